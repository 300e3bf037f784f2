use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

pub const MANIFEST_PREFIX: &str = "manifest.";

/// Record of one subcommand run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments as given, without the program name.
    pub argv: Vec<String>,
    pub seed_override: Option<u64>,
    pub threads: Option<usize>,
    pub config: serde_json::Value,
    /// Seeds actually used, after any override.
    pub seeds: BTreeMap<String, u64>,
    /// Input path to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the output directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("malformed manifest {}: {e}", path.display())))
    }

    pub fn file_name(command: &str) -> String {
        format!("{MANIFEST_PREFIX}{command}.json")
    }
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut hasher = Sha256::new();
    io::copy(&mut File::open(path)?, &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}

/// Collects seeds, inputs and outputs while a subcommand runs.
pub(crate) struct RunContext {
    pub out: PathBuf,
    seed_override: Option<u64>,
    seeds: BTreeMap<String, u64>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl RunContext {
    pub fn new(out: PathBuf, seed_override: Option<u64>) -> CliResult<Self> {
        fs::create_dir_all(&out)?;
        Ok(Self {
            out,
            seed_override,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn seed_override(&self) -> Option<u64> {
        self.seed_override
    }

    /// The effective value of a seed flag.
    pub fn seed(&mut self, name: &str, value: u64) -> u64 {
        let v = self.seed_override.unwrap_or(value);
        self.seeds.insert(name.to_owned(), v);
        v
    }

    /// Checks that every input exists and records its digest.
    pub fn inputs<'a>(&mut self, paths: impl IntoIterator<Item = &'a Path>) -> CliResult<()> {
        for p in paths {
            if !p.exists() {
                return Err(CliError::Usage(format!("input not found: {}", p.display())));
            }
            if p.is_file() {
                self.inputs.insert(p.display().to_string(), sha256_file(p)?);
            }
        }
        Ok(())
    }

    pub fn input_file(&mut self, path: &Path) -> CliResult<()> {
        self.inputs([path])
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Records an output that has already been written.
    pub fn record(&mut self, name: &str) -> CliResult<()> {
        let digest = sha256_file(&self.path(name))?;
        self.outputs.insert(name.to_owned(), digest);
        Ok(())
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.record(name)?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    pub fn finish(
        self,
        command: &str,
        argv: Vec<String>,
        threads: Option<usize>,
        config: serde_json::Value,
    ) -> CliResult<Manifest> {
        let manifest = Manifest {
            tool: "steerlab".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv,
            seed_override: self.seed_override,
            threads,
            config,
            seeds: self.seeds,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(self.out.join(Manifest::file_name(command)), bytes)?;
        Ok(manifest)
    }
}
