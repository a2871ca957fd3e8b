use std::path::PathBuf;

use crate::config::RunConfig;
use crate::Result;

/// Writes every configured task as `<task>-train.smds` (and `-test`) under
/// the output directory. Returns the written paths.
pub fn run(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(&cfg.out)?;
    let mut written = Vec::new();
    for task in cfg.tasks()? {
        let path = cfg.out.join(format!("{}-train.smds", task.name));
        task.train.save(&path)?;
        written.push(path);
        if let Some(test) = &task.test {
            let path = cfg.out.join(format!("{}-test.smds", task.name));
            test.save(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}
