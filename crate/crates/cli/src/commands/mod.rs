pub mod build;
pub mod evaluate;
pub mod gradcheck;
pub mod rollout;
pub mod stats;
pub mod train;

use crate::config::Loaded;
use crate::logging::Logger;

/// What every command receives: the resolved configuration and the logger.
pub struct Ctx<'a> {
    pub loaded: Loaded,
    pub log: &'a Logger,
}
