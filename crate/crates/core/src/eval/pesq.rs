use std::path::{Path, PathBuf};
use std::process::Command;

use crate::error::{Error, Result};

/// An external ITU-T P.862 scorer, run as `scorer +16000 <clean> <degraded>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PesqScorer {
    pub program: PathBuf,
}

impl PesqScorer {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        PesqScorer {
            program: program.into(),
        }
    }

    pub fn score(&self, clean: &Path, degraded: &Path) -> Result<f64> {
        // The reference binary drops a results file into its working directory.
        let scratch = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let output = Command::new(&self.program)
            .arg("+16000")
            .arg(absolute(clean))
            .arg(absolute(degraded))
            .current_dir(scratch.path())
            .output()
            .map_err(|e| Error::Scorer(format!("cannot run {}: {e}", self.program.display())))?;
        let stdout = String::from_utf8_lossy(&output.stdout);
        if !output.status.success() {
            return Err(Error::Scorer(format!(
                "{} exited with {}: {}",
                self.program.display(),
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        parse_score(&stdout)
            .ok_or_else(|| Error::Scorer(format!("no score in output: {:?}", stdout.trim())))
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// The last number on the last line of `output` that contains one.
pub fn parse_score(output: &str) -> Option<f64> {
    output.lines().rev().find_map(|line| {
        line.split(|c: char| c.is_whitespace() || c == '=' || c == ',' || c == ';')
            .rev()
            .find_map(|tok| tok.parse::<f64>().ok().filter(|v| v.is_finite()))
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PesqOutcome {
    Scored {
        pesq: f64,
        delta: f64,
    },
    /// No scorer configured.
    Unavailable,
}

/// PESQ of `estimate` against `clean`, and its gain over the unprocessed `mixture`.
pub fn delta_pesq(
    scorer: Option<&PesqScorer>,
    clean: &Path,
    estimate: &Path,
    mixture: &Path,
) -> Result<PesqOutcome> {
    let Some(scorer) = scorer else {
        return Ok(PesqOutcome::Unavailable);
    };
    let pesq = scorer.score(clean, estimate)?;
    let baseline = scorer.score(clean, mixture)?;
    Ok(PesqOutcome::Scored {
        pesq,
        delta: pesq - baseline,
    })
}
