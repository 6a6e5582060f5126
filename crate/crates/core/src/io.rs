//! Artifact file helpers: atomic writes and format-version headers.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::format(path.display().to_string(), "not a file path"))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_artifact(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

pub fn read_artifact_bytes(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

/// Checks that the first line starts with `expected` (`<format> <version>`)
/// and returns the remainder of the text after that line.
pub fn read_versioned<'a>(text: &'a str, expected: &str, origin: &str) -> Result<&'a str> {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    check_header(first, expected, origin)?;
    Ok(rest)
}

pub(crate) fn check_header(first: &str, expected: &str, origin: &str) -> Result<()> {
    let mut want = expected.split_whitespace();
    let mut got = first.split_whitespace();
    let (want_name, want_ver) = (want.next().unwrap_or(""), want.next().unwrap_or(""));
    let (got_name, got_ver) = (got.next().unwrap_or(""), got.next().unwrap_or(""));
    if got_name != want_name {
        return Err(Error::format(
            origin,
            format!("expected a `{want_name}` file, found header `{first}`"),
        ));
    }
    if got_ver != want_ver {
        return Err(Error::Version {
            path: origin.to_string(),
            expected: want_ver.to_string(),
            found: got_ver.to_string(),
        });
    }
    Ok(())
}

/// Parses `key=value` tokens from a header or record line.
pub fn kv_fields(line: &str) -> impl Iterator<Item = (&str, &str)> {
    line.split_whitespace().filter_map(|t| t.split_once('='))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_and_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/a.txt");
        write_atomic(&p, b"thing v1 x=1\nbody\n").unwrap();
        let text = read_artifact(&p).unwrap();
        assert_eq!(read_versioned(&text, "thing v1", "a").unwrap(), "body\n");
        assert!(matches!(
            read_versioned(&text, "thing v2", "a"),
            Err(Error::Version { .. })
        ));
        assert!(matches!(
            read_versioned(&text, "other v1", "a"),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            read_artifact(&dir.path().join("nope")),
            Err(Error::MissingArtifact(_))
        ));
    }
}
