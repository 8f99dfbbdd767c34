//! Line-delimited JSON logs on stderr, optionally mirrored to a file.

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use serde_json::{json, Map, Value};

pub struct Logger {
    file: Mutex<Option<File>>,
    quiet: bool,
}

impl Logger {
    pub fn new(quiet: bool) -> Self {
        Self { file: Mutex::new(None), quiet }
    }

    /// Mirrors later records to `path`, truncating it.
    pub fn tee(&self, path: &Path) -> std::io::Result<()> {
        *self.file.lock().expect("log lock") = Some(File::create(path)?);
        Ok(())
    }

    pub fn event(&self, level: &str, event: &str, fields: Value) {
        let mut rec = Map::new();
        rec.insert("level".into(), json!(level));
        rec.insert("event".into(), json!(event));
        if let Value::Object(m) = fields {
            rec.extend(m);
        }
        let line = Value::Object(rec).to_string();
        if !self.quiet {
            eprintln!("{line}");
        }
        if let Some(f) = self.file.lock().expect("log lock").as_mut() {
            // A failed mirror write must not abort the run.
            let _ = writeln!(f, "{line}");
        }
    }

    pub fn info(&self, event: &str, fields: Value) {
        self.event("info", event, fields);
    }

    pub fn warn(&self, event: &str, fields: Value) {
        self.event("warn", event, fields);
    }
}

/// Routes library `log` records through the JSON logger.
pub struct Bridge(pub &'static Logger);

impl log::Log for Bridge {
    fn enabled(&self, m: &log::Metadata) -> bool {
        m.level() <= log::Level::Warn
    }

    fn log(&self, r: &log::Record) {
        if self.enabled(r.metadata()) {
            let level = r.level().as_str().to_lowercase();
            self.0.event(&level, "library", json!({ "target": r.target(), "message": r.args().to_string() }));
        }
    }

    fn flush(&self) {}
}
