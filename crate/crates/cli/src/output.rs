//! Output files: a `# config_hash=... seed=...` comment line, then the body,
//! written to a temporary file in the target directory and renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::RunConfig;
use crate::CliError;

pub fn header(cfg: &RunConfig) -> String {
    format!("# config_hash={} seed={}\n", cfg.hash(), cfg.seed())
}

/// Writes `header + body` to `path` atomically.
pub fn write_atomic(path: &Path, cfg: &RunConfig, body: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("output path {} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(header(cfg).as_bytes())?;
        f.write_all(body)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Writes to `--out` if given, otherwise to stdout; both carry the header.
pub fn emit(cfg: &RunConfig, body: &[u8]) -> Result<(), CliError> {
    match &cfg.out {
        Some(path) => write_atomic(path, cfg, body),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(header(cfg).as_bytes())?;
            out.write_all(body)?;
            Ok(())
        }
    }
}

/// Serialises rows as RFC 4180 CSV with a header row.
pub fn csv_bytes<T: serde::Serialize>(rows: &[T]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Io(std::io::Error::other(e)))?;
    }
    w.into_inner()
        .map_err(|e| CliError::Io(std::io::Error::other(e.to_string())))
}

/// One JSON document per line.
pub fn jsonl_bytes<T: serde::Serialize>(items: &[T]) -> Result<Vec<u8>, CliError> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| CliError::Io(e.into()))?;
        out.push(b'\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_leaves_no_temporaries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/out.csv");
        let cfg = RunConfig {
            seed: Some(9),
            ..RunConfig::default()
        };
        write_atomic(&path, &cfg, b"a,b\n1,2\n").unwrap();
        write_atomic(&path, &cfg, b"a,b\n3,4\n").unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# config_hash="));
        assert!(text.ends_with("a,b\n3,4\n"));
        assert_eq!(fs::read_dir(dir.path().join("sub")).unwrap().count(), 1);
    }

    #[test]
    fn csv_quotes_fields() {
        #[derive(serde::Serialize)]
        struct R {
            name: &'static str,
            x: f64,
        }
        let b = csv_bytes(&[R {
            name: "a,\"b\"",
            x: 0.1,
        }])
        .unwrap();
        assert_eq!(String::from_utf8(b).unwrap(), "name,x\n\"a,\"\"b\"\"\",0.1\n");
    }
}
