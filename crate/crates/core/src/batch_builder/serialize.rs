use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use super::container::{ContainerError, ContainerReader, ContainerWriter, RawContainer};
use crate::data_model::{Batch, GridSpec, Month, Schema};
use crate::error::{CoreError, Result};

pub const BATCH_KIND: &str = "batch";

#[derive(Serialize, Deserialize)]
struct BatchMeta {
    grid: GridSpec,
    schema: Schema,
    timestamps: [Month; 2],
    lead_time: u32,
    species: Vec<u64>,
    pressure_levels: Vec<u32>,
    channels: Vec<String>,
}

/// One `f32` array per schema group, named after the group, shape `(2, C_g, H, W)`.
pub fn serialize_batch(b: &Batch) -> Vec<u8> {
    let mut w = ContainerWriter::new(BATCH_KIND);
    for (g, arr) in b.schema().groups().iter().zip(b.groups()) {
        w.push_f32(g.group.as_str(), arr.shape(), arr.iter());
    }
    let meta = BatchMeta {
        grid: b.grid().clone(),
        schema: b.schema().clone(),
        timestamps: b.timestamps(),
        lead_time: b.lead_time(),
        species: b.species_ids(),
        pressure_levels: b.pressure_levels(),
        channels: b.schema().channels().iter().map(|c| c.label()).collect(),
    };
    w.finish(serde_json::to_value(meta).expect("meta serializes")).to_bytes()
}

pub fn deserialize_batch(bytes: &[u8]) -> Result<Batch> {
    let r = ContainerReader::from_bytes(bytes, BATCH_KIND)?;
    let meta: BatchMeta =
        serde_json::from_value(r.meta().clone()).map_err(|e| ContainerError::Header(format!("batch metadata: {e}")))?;
    meta.grid.validate()?;
    let mut groups = Vec::with_capacity(meta.schema.groups().len());
    for g in meta.schema.groups() {
        let (shape, data) = r.f32_array(g.group.as_str())?;
        let want = vec![2, g.channel_count(), meta.grid.height, meta.grid.width];
        if shape != want {
            return Err(ContainerError::ShapeMismatch(format!("`{}` has shape {shape:?}, schema implies {want:?}", g.group)).into());
        }
        groups.push(Array4::from_shape_vec((want[0], want[1], want[2], want[3]), data).expect("sized"));
    }
    if r.header().arrays.len() != groups.len() {
        return Err(ContainerError::ShapeMismatch("container holds arrays the schema does not name".into()).into());
    }
    Batch::new(meta.grid, meta.schema, meta.timestamps, meta.lead_time, groups)
}

pub fn write_batch(path: &Path, b: &Batch) -> Result<()> {
    std::fs::write(path, serialize_batch(b))?;
    Ok(())
}

pub fn read_batch(path: &Path) -> Result<Batch> {
    let bytes = std::fs::read(path)?;
    deserialize_batch(&bytes).map_err(|e| match e {
        CoreError::Container(c) => CoreError::Source { path: path.display().to_string(), detail: c.to_string() },
        other => other,
    })
}

/// Envelope of a serialized batch, for inspection and corruption tests.
pub fn raw_container(bytes: &[u8]) -> Result<RawContainer> {
    Ok(RawContainer::parse(bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{GridSpec, Schema};
    use rand::{Rng, SeedableRng};

    fn random_batch(seed: u64) -> Batch {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut b = Batch::zeros(GridSpec::desk(), Schema::desk(), [Month::new(2003, 11).unwrap(), Month::new(2003, 12).unwrap()], 1)
            .unwrap();
        for arr in b.groups_mut() {
            arr.mapv_inplace(|_| rng.gen_range(-1e3f32..1e3));
        }
        b
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let b = random_batch(3);
        let back = deserialize_batch(&serialize_batch(&b)).unwrap();
        assert_eq!(back, b);
        for (x, y) in back.groups().iter().zip(b.groups()) {
            assert!(x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = serialize_batch(&random_batch(4));
        let e = deserialize_batch(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(e, CoreError::Container(ContainerError::Truncated { .. })));
        let mut raw = raw_container(&bytes).unwrap();
        raw.header.arrays[0].shape[3] -= 1;
        let e = deserialize_batch(&raw.to_bytes()).unwrap_err();
        assert!(matches!(e, CoreError::Container(ContainerError::ShapeMismatch(_))));
    }

    #[test]
    fn serialization_is_deterministic() {
        assert_eq!(serialize_batch(&random_batch(5)), serialize_batch(&random_batch(5)));
    }
}
