// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use swea_core::io::{sha256_file, write_atomic};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileHash {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

/// Everything needed to re-run a command: the exact arguments, the working
/// directory they are relative to, the resolved configuration and the hashes
/// of every input and output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub cwd: PathBuf,
    /// Flag whose value names the output location, rewritten by replay.
    pub output_flag: String,
    /// The flag names a directory rather than a file or file prefix.
    pub output_is_dir: bool,
    pub config: serde_json::Value,
    pub seeds: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

impl RunManifest {
    pub fn new(command: &str, output_flag: &str, output_is_dir: bool) -> Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            command: command.to_owned(),
            argv: std::env::args().skip(1).collect(),
            cwd: std::env::current_dir().context("reading the working directory")?,
            output_flag: output_flag.to_owned(),
            output_is_dir,
            config: serde_json::Value::Null,
            seeds: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileHash::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(FileHash::of(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        write_atomic(path, json.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    /// `argv` with the output flag pointed into `out_dir`: a directory output
    /// becomes `out_dir` itself, a file or prefix keeps its file name.
    pub fn redirected_argv(&self, out_dir: &Path) -> Result<Vec<String>> {
        let mut argv = self.argv.clone();
        let inline = format!("{}=", self.output_flag);
        for i in 0..argv.len() {
            if argv[i] == self.output_flag && i + 1 < argv.len() {
                argv[i + 1] = self.relocate(&argv[i + 1], out_dir)?;
                return Ok(argv);
            }
            if let Some(v) = argv[i].strip_prefix(&inline) {
                argv[i] = format!("{inline}{}", self.relocate(v, out_dir)?);
                return Ok(argv);
            }
        }
        bail!("manifest argv has no {} flag", self.output_flag)
    }

    fn relocate(&self, value: &str, out_dir: &Path) -> Result<String> {
        if self.output_is_dir {
            return Ok(out_dir.to_string_lossy().into_owned());
        }
        let name = Path::new(value)
            .file_name()
            .with_context(|| format!("output path {value:?} has no file name"))?;
        Ok(out_dir.join(name).to_string_lossy().into_owned())
    }
}

/// `<path>.manifest.json`.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// `<prefix>.<ext>`, keeping any dots already in the prefix.
pub fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}
