//! Line-delimited JSON manifests describing the mixtures to build.
//!
//! Each line names one utterance: per-speaker source WAVs and mouth-frame
//! files (MROI or PGM directory), optional fixed gains, optional noise.
//! Relative paths are resolved against the manifest's directory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

pub const DEFAULT_DURATION_SECS: f64 = 2.0;

fn default_duration() -> f64 {
    DEFAULT_DURATION_SECS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixManifestEntry {
    pub utterance_id: String,
    pub sources: Vec<PathBuf>,
    pub mouths: Vec<PathBuf>,
    /// Offsets relative to the first speaker; drawn at mix time when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gains_db: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_snr_db: Option<f64>,
    #[serde(default = "default_duration")]
    pub duration: f64,
}

impl MixManifestEntry {
    pub fn speakers(&self) -> usize {
        self.sources.len()
    }

    /// Structural checks plus existence of every referenced file.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.utterance_id.is_empty() || self.utterance_id.contains(['/', '\\']) {
            return Err(format!("bad utterance id {:?}", self.utterance_id));
        }
        if !(2..=4).contains(&self.sources.len()) {
            return Err(format!("{} speakers, expected 2 to 4", self.sources.len()));
        }
        if self.mouths.len() != self.sources.len() {
            return Err(format!("{} mouth streams for {} sources", self.mouths.len(), self.sources.len()));
        }
        if let Some(g) = &self.gains_db {
            if g.len() != self.sources.len() {
                return Err(format!("{} gains for {} sources", g.len(), self.sources.len()));
            }
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(format!("duration {} must be positive", self.duration));
        }
        for p in self.sources.iter().chain(&self.mouths).chain(self.noise.iter()) {
            if !p.exists() {
                return Err(format!("missing file {}", p.display()));
            }
        }
        Ok(())
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.sources.iter_mut().for_each(fix);
        self.mouths.iter_mut().for_each(fix);
        self.noise.iter_mut().for_each(fix);
    }
}

/// Parses a manifest. Blank lines and `#` comments are skipped; file
/// existence is not checked here (see [`MixManifestEntry::validate`]).
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<MixManifestEntry>> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let mut e: MixManifestEntry =
            serde_json::from_str(t).map_err(|err| PipelineError::Manifest { line: i + 1, msg: err.to_string() })?;
        e.resolve(&base);
        out.push(e);
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[MixManifestEntry]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for e in entries {
        writeln!(f, "{}", serde_json::to_string(e)?)?;
    }
    Ok(())
}
