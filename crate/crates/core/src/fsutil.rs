//! Output publication through a staging path and one rename, so an
//! interrupted command never leaves a partial result under the final name.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

fn staging_path(target: &Path) -> PathBuf {
    let name = target
        .file_name()
        .map_or_else(|| "output".into(), |n| n.to_string_lossy().into_owned());
    target.with_file_name(format!(".{name}.partial-{}", std::process::id()))
}

pub fn write_file_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let stage = staging_path(path);
    fs::write(&stage, bytes).map_err(|e| Error::io(&stage, e))?;
    fs::rename(&stage, path).map_err(|e| {
        let _ = fs::remove_file(&stage);
        Error::io(path, e)
    })
}

/// Fills a fresh staging directory, then swaps it in for `dir`.
///
/// An existing `dir` is replaced only when it is empty or `replaceable`
/// accepts it.
pub fn write_dir_atomically(
    dir: &Path,
    replaceable: impl Fn(&Path) -> bool,
    fill: impl FnOnce(&Path) -> Result<()>,
) -> Result<()> {
    if dir.exists() {
        let empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_none();
        if !(empty || replaceable(dir)) {
            return Err(Error::contract(format!(
                "refusing to replace {}: not empty and not produced by this tool",
                dir.display()
            )));
        }
    }
    let stage = staging_path(dir);
    if stage.exists() {
        fs::remove_dir_all(&stage).map_err(|e| Error::io(&stage, e))?;
    }
    fs::create_dir_all(&stage).map_err(|e| Error::io(&stage, e))?;
    if let Err(e) = fill(&stage) {
        let _ = fs::remove_dir_all(&stage);
        return Err(e);
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&stage, dir).map_err(|e| Error::io(dir, e))
}
