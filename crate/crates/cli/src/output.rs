use anyhow::{Context, Result};
use crisk_core::resampling::{Method, MultiplierKind};
use crisk_core::simulate::TruthKind;
use serde::Serialize;
use std::fmt;
use std::path::{Path, PathBuf};

pub const VERSION: &str = concat!("crisk ", env!("CARGO_PKG_VERSION"));

/// Invalid arguments detected after parsing.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().find_map(|e| e.downcast_ref::<crisk_core::Error>()).is_some_and(crisk_core::Error::is_numerical);
    if numerical {
        3
    } else {
        2
    }
}

/// Every option that shaped a run; written into each output file.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RunConfig {
    pub subcommand: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    pub output: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub causes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multiplier: Option<MultiplierKind>,
    #[serde(rename = "B", skip_serializing_if = "Option::is_none")]
    pub replicates: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jitter_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stabilize: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<TruthKind>,
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    #[serde(flatten)]
    body: &'a T,
    config: &'a RunConfig,
    version: &'static str,
}

pub struct Writer {
    dir: PathBuf,
    config: RunConfig,
    written: Vec<PathBuf>,
}

impl Writer {
    pub fn new(dir: &Path, config: RunConfig) -> Result<Writer> {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
        Ok(Writer { dir: dir.to_path_buf(), config, written: Vec::new() })
    }

    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
        log::info!("wrote {}", path.display());
        self.written.push(path);
        Ok(())
    }

    /// JSON object with the `config` and `version` keys added next to the body's fields.
    pub fn json<T: Serialize>(&mut self, name: &str, body: &T) -> Result<()> {
        let stamped = Stamped { body, config: &self.config, version: VERSION };
        let mut text = serde_json::to_string_pretty(&stamped)?;
        text.push('\n');
        self.write(name, &text)
    }

    /// CSV preceded by a `#` comment line carrying the config and version.
    pub fn csv(&mut self, name: &str, body: &str) -> Result<()> {
        let header = serde_json::json!({ "config": &self.config, "version": VERSION });
        self.write(name, &format!("# {header}\n{body}"))
    }

    /// Prints the written paths to standard output as one JSON line.
    pub fn finish(self) -> Result<()> {
        let files: Vec<String> = self.written.iter().map(|p| p.display().to_string()).collect();
        println!("{}", serde_json::json!({ "written": files }));
        Ok(())
    }
}
