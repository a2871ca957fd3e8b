pub mod analyze;
pub mod benchmark;
pub mod gen_data;
pub mod gradcheck;
pub mod paramcount;
pub mod sweep;
pub mod train;

use softmoa::encoder::{Checkpoint, Model, Petl};

use crate::config::RunConfig;
use crate::Result;

/// A freshly initialized model for `petl`, with the configured backbone
/// checkpoint loaded and the backbone unfrozen if the run asks for it.
pub fn build_model(cfg: &RunConfig, petl: Petl, n_classes: usize) -> Result<Model> {
    let mut m = Model::new(cfg.encoder(petl, n_classes), cfg.seed)?;
    if let Some(path) = &cfg.backbone {
        m.load_backbone(&Checkpoint::read(path)?)?;
    }
    if cfg.train_backbone {
        m.set_backbone_trainable(true);
    }
    Ok(m)
}
