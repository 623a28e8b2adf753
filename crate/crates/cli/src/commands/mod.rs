pub mod ablate;
pub mod compare;
pub mod eval;
pub mod prune;
pub mod score;
pub mod train;

use std::path::Path;

use comp_core::model::load_checkpoint;
use comp_core::Model;

use crate::error::CliError;

pub fn load_model(dir: &Path) -> Result<Model, CliError> {
    Ok(load_checkpoint(dir)?)
}

