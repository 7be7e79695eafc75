use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;

/// Artifact sink. Without a directory every write is skipped.
#[derive(Debug)]
pub struct Output {
    dir: Option<PathBuf>,
    files: Vec<String>,
    started: Instant,
    started_unix: u64,
}

impl Output {
    pub fn new(dir: Option<&Path>) -> Result<Self> {
        if let Some(d) = dir {
            fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
        }
        Ok(Self {
            dir: dir.map(Path::to_path_buf),
            files: Vec::new(),
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        })
    }

    /// No artifacts are written.
    pub fn discard() -> Self {
        Self::new(None).expect("no directory to create")
    }

    pub fn is_enabled(&self) -> bool {
        self.dir.is_some()
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    /// Opens `name` for writing and hands the writer to `fill`.
    pub fn with_file<F>(&mut self, name: &str, fill: F) -> Result<()>
    where
        F: FnOnce(&mut dyn Write) -> Result<()>,
    {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let path = dir.join(name);
        let mut w = BufWriter::new(
            File::create(&path).with_context(|| format!("creating {}", path.display()))?,
        );
        fill(&mut w)?;
        w.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn text(&mut self, name: &str, body: &str) -> Result<()> {
        self.with_file(name, |w| Ok(w.write_all(body.as_bytes())?))
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.with_file(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            Ok(writeln!(w)?)
        })
    }

    /// Writes `manifest.json` with the config echo, versions, wall-clock time,
    /// the artifact list and run-specific metadata.
    pub fn finish(
        mut self,
        command: &str,
        config: &ExperimentConfig,
        passed: bool,
        metadata: Value,
    ) -> Result<()> {
        if !self.is_enabled() {
            return Ok(());
        }
        let manifest = json!({
            "command": command,
            "config": config,
            "versions": {
                "mfsim": mfsim::VERSION,
                "mfsim-harness": env!("CARGO_PKG_VERSION"),
            },
            "started_unix": self.started_unix,
            "wall_clock_seconds": self.started.elapsed().as_secs_f64(),
            "passed": passed,
            "artifacts": self.files.clone(),
            "metadata": metadata,
        });
        self.json("manifest.json", &manifest)
    }
}
