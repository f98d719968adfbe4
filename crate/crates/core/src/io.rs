//! File helpers shared by the CLI: atomic writes and manifest parsing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temporary file and renames it over `path`, so
/// readers never observe a partially written file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("path has no file name")))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// Parses a manifest: one comma-separated record per line, blank lines and
/// `#` comments ignored. Every record must have exactly `fields` entries.
/// Relative paths are left as written.
pub fn parse_manifest(text: &str, fields: usize) -> Result<Vec<Vec<String>>> {
    let mut records = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
        if parts.len() != fields || parts.iter().any(String::is_empty) {
            return Err(Error::param(format!(
                "manifest line {}: expected {fields} comma-separated fields, got {:?}",
                lineno + 1,
                line
            )));
        }
        records.push(parts);
    }
    Ok(records)
}

pub fn read_manifest(path: impl AsRef<Path>, fields: usize) -> Result<Vec<Vec<String>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, fields)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_skips_comments_and_blanks() {
        let text = "# header\n\na.png, b.png\nc.png,d.png # trailing\n";
        let recs = parse_manifest(text, 2).unwrap();
        assert_eq!(recs, vec![vec!["a.png", "b.png"], vec!["c.png", "d.png"]]);
    }

    #[test]
    fn manifest_rejects_wrong_arity() {
        let err = parse_manifest("a.png\n", 2).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.txt");
        write_atomic(&p, b"first").unwrap();
        write_atomic(&p, b"second").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "second");
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn atomic_write_into_missing_dir_fails_cleanly() {
        let err = write_atomic("/nonexistent-dir/x.txt", b"x").unwrap_err();
        assert!(err.is_io());
    }
}
