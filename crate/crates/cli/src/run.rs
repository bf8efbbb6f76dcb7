//! On-disk layout of a run directory, content hashes and run manifests.

use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ratesynth::schema::DatasetSchema;
use ratesynth::table::{load_raw_dataset, ColumnKind, RawTable};

use crate::config::RunConfig;

/// Version tag written into every manifest.
pub const MANIFEST_FORMAT: &str = "ratesynth-run-manifest/1";

/// File names inside a run directory.
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    pub fn prepared_dir(&self) -> PathBuf {
        self.root.join("prepared")
    }
    pub fn schema(&self) -> PathBuf {
        self.prepared_dir().join("schema.toml")
    }
    pub fn filtered_csv(&self) -> PathBuf {
        self.prepared_dir().join("filtered.csv")
    }
    pub fn splits(&self) -> PathBuf {
        self.prepared_dir().join("splits.json")
    }
    pub fn prepare_manifest(&self) -> PathBuf {
        self.prepared_dir().join("manifest.json")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.root.join("train")
    }
    pub fn latest_checkpoint(&self) -> PathBuf {
        self.train_dir().join("checkpoint_latest.json")
    }
    pub fn final_checkpoint(&self) -> PathBuf {
        self.train_dir().join("checkpoint_final.json")
    }
    pub fn loss_history(&self) -> PathBuf {
        self.train_dir().join("loss_history.csv")
    }
    pub fn autoencoder_history(&self) -> PathBuf {
        self.train_dir().join("autoencoder_history.csv")
    }
    pub fn privacy_ledger(&self) -> PathBuf {
        self.train_dir().join("privacy_ledger.json")
    }
    pub fn train_manifest(&self) -> PathBuf {
        self.train_dir().join("manifest.json")
    }

    pub fn synthetic_dir(&self) -> PathBuf {
        self.root.join("synthetic")
    }
    pub fn synthetic_csv(&self) -> PathBuf {
        self.synthetic_dir().join("synthetic.csv")
    }

    pub fn evaluation_dir(&self) -> PathBuf {
        self.root.join("evaluation")
    }
}

/// Git-style content hash: SHA-256 over `"blob <len>\0"` followed by the
/// bytes, as `git hash-object` computes it in a SHA-256 repository.
pub fn content_hash(path: &Path) -> Result<String> {
    let len = std::fs::metadata(path)
        .with_context(|| format!("cannot read `{}`", path.display()))?
        .len();
    let mut hasher = Sha256::new();
    hasher.update(format!("blob {len}\0").as_bytes());
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One file a command read or wrote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub role: String,
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(role: &str, path: &Path) -> Result<Self> {
        Ok(Self {
            role: role.to_string(),
            path: path.display().to_string(),
            bytes: std::fs::metadata(path)?.len(),
            sha256: content_hash(path)?,
        })
    }
}

/// What a command did, with the configuration it ran under.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub tool_version: String,
    pub command: String,
    pub config: RunConfig,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub summary: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            format: MANIFEST_FORMAT.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: config.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            summary: serde_json::Value::Null,
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.push(FileRecord::of(role, path)?);
        Ok(())
    }

    pub fn output(&mut self, role: &str, path: &Path) -> Result<()> {
        self.outputs.push(FileRecord::of(role, path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Pretty JSON with a trailing newline, written via a temporary file so an
/// interrupted write never leaves a truncated file behind.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    write_atomic(path, text.as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).with_context(|| format!("cannot create `{}`", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = std::fs::File::open(path).with_context(|| format!("cannot open `{}`", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("cannot parse `{}`", path.display()))
}

/// Column list a CSV conforming to `schema` must carry.
pub fn schema_columns(schema: &DatasetSchema) -> Vec<(&str, ColumnKind)> {
    schema
        .variables
        .iter()
        .map(|v| {
            let kind = if v.raw_is_numeric() {
                ColumnKind::Numeric
            } else {
                ColumnKind::Categorical
            };
            (v.name.as_str(), kind)
        })
        .collect()
}

/// Reads a CSV with exactly the schema's columns.
pub fn load_with_schema(path: &Path, schema: &DatasetSchema) -> Result<RawTable> {
    load_raw_dataset(path, &schema_columns(schema)).with_context(|| format!("cannot load `{}`", path.display()))
}

/// `412748` → `"412,748"`.
pub fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}
