//! Append-only run folders with atomic writes and a hashed manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::CliError;

/// A fresh `<root>/<command>_<hash>_<n>` directory. Files are written through a
/// temporary name and renamed into place; the manifest is written last.
pub struct RunDir {
    path: PathBuf,
    command: String,
    config_hash: String,
    files: BTreeMap<String, String>,
}

impl RunDir {
    pub fn create(root: &Path, command: &str, config_hash: &str) -> Result<RunDir, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let short = &config_hash[..config_hash.len().min(8)];
        for n in 0.. {
            let path = root.join(format!("{command}_{short}_{n}"));
            match fs::create_dir(&path) {
                Ok(()) => {
                    return Ok(RunDir {
                        path,
                        command: command.to_string(),
                        config_hash: config_hash.to_string(),
                        files: BTreeMap::new(),
                    })
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(CliError::io(&path, e)),
            }
        }
        unreachable!()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        if self.files.contains_key(name) {
            return Err(CliError::Io(format!("{name} already written to {}", self.path.display())));
        }
        write_atomic(&self.path.join(name), bytes)?;
        self.files.insert(name.to_string(), hex(&Sha256::digest(bytes)));
        Ok(())
    }

    pub fn write_str(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        self.write(name, text.as_bytes())
    }

    /// Rows of `f64` columns with a header.
    pub fn write_csv<R: AsRef<[String]>>(&mut self, name: &str, header: &[&str], rows: &[R]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).map_err(|e| CliError::Io(e.to_string()))?;
        for r in rows {
            w.write_record(r.as_ref()).map_err(|e| CliError::Io(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
        self.write(name, &bytes)
    }

    /// Writes `manifest.toml` and returns the folder path.
    pub fn finish(self) -> Result<PathBuf, CliError> {
        let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let mut m = toml::Table::new();
        m.insert("command".into(), self.command.clone().into());
        m.insert("config_hash".into(), self.config_hash.clone().into());
        m.insert("created_unix".into(), toml::Value::Integer(created as i64));
        let files: toml::Table = self.files.iter().map(|(k, v)| (k.clone(), toml::Value::from(v.clone()))).collect();
        m.insert("sha256".into(), toml::Value::Table(files));
        let text = toml::to_string(&m).map_err(|e| CliError::Io(e.to_string()))?;
        write_atomic(&self.path.join("manifest.toml"), text.as_bytes())?;
        Ok(self.path)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}
