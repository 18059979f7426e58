//! Atomic artifact writes and small file helpers.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, CliResult};

fn temp_sibling(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let stage = "write";
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(stage, parent, e))?;
    }
    let tmp = temp_sibling(path);
    let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(stage, &tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| CliError::io(stage, &tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| CliError::io(stage, path, e))
}

/// Builds a directory under a temporary name, then swaps it into place.
pub fn atomic_dir<F>(path: &Path, fill: F) -> CliResult<()>
where
    F: FnOnce(&Path) -> CliResult<()>,
{
    let stage = "write";
    let tmp = temp_sibling(path);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| CliError::io(stage, &tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| CliError::io(stage, &tmp, e))?;
    fill(&tmp)?;
    if path.exists() {
        fs::remove_dir_all(path).map_err(|e| CliError::io(stage, path, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| CliError::io(stage, path, e))
}

pub fn pretty_json<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(|e| CliError::runtime("serialize", e))?;
    v.push(b'\n');
    Ok(v)
}

/// One compact JSON object per line.
pub fn jsonl<T: Serialize>(items: &[T]) -> CliResult<Vec<u8>> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it).map_err(|e| CliError::runtime("serialize", e))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn read_text(stage: &str, path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(stage, path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.txt");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn atomic_dir_swaps() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt");
        atomic_dir(&p, |d| atomic_write(&d.join("a"), b"1")).unwrap();
        atomic_dir(&p, |d| atomic_write(&d.join("b"), b"2")).unwrap();
        assert!(!p.join("a").exists() && p.join("b").exists());
    }
}
