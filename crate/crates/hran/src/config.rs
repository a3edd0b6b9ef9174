//! The JSON run configuration shared by every command.

use std::path::{Path, PathBuf};

use hran_core::decoding::BeamOptions;
use hran_core::model::{fingerprint_of, ModelConfig};
use hran_core::training::TrainSchedule;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::read_text;

/// File locations. Relative paths are taken from the directory of the
/// config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunPaths {
    pub train: PathBuf,
    pub validation: PathBuf,
    pub context_vocab: PathBuf,
    pub response_vocab: PathBuf,
    /// Receives `last.ckpt`, `best.ckpt` and `report.jsonl`.
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeOptions {
    pub beam: usize,
    pub n_best: usize,
    /// Token budget per response, EOS included.
    pub max_len: usize,
    pub allow_unk: bool,
    pub length_normalize: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            beam: 10,
            n_best: 1,
            max_len: 50,
            allow_unk: false,
            length_normalize: false,
        }
    }
}

impl DecodeOptions {
    pub fn beam_options(&self) -> BeamOptions {
        BeamOptions {
            width: self.beam,
            n_best: self.n_best,
            length_normalize: self.length_normalize,
        }
    }

    pub fn check(&self) -> CliResult<()> {
        if self.beam == 0 || self.n_best == 0 || self.n_best > self.beam {
            return Err(CliError::Usage(format!(
                "need 1 <= nbest <= beam, got nbest {} and beam {}",
                self.n_best, self.beam
            )));
        }
        if self.max_len == 0 {
            return Err(CliError::Usage("max-len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: RunPaths,
    /// Vocabulary sizes are taken from the vocabulary files.
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub decode: DecodeOptions,
    /// Seeds parameter initialization and batch shuffling. Overrides the
    /// seeds inside `model` and `schedule`.
    pub seed: u64,
}

impl RunConfig {
    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = read_text(path)?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let p = &mut cfg.paths;
        for f in [
            &mut p.train,
            &mut p.validation,
            &mut p.context_vocab,
            &mut p.response_vocab,
            &mut p.output_dir,
        ] {
            if f.as_os_str().is_empty() {
                return Err(CliError::format(path, "every entry of \"paths\" is required"));
            }
            if f.is_relative() {
                *f = base.join(&*f);
            }
        }
        cfg.apply_seed();
        Ok(cfg)
    }

    pub fn apply_seed(&mut self) {
        self.model.seed = self.seed;
        self.schedule.seed = self.seed;
    }

    /// Digest of everything that affects results. Paths are left out so a
    /// moved run keeps its fingerprint.
    pub fn fingerprint(&self) -> String {
        let digestible = (&self.model, &self.schedule, &self.decode, self.seed);
        fingerprint_of(&serde_json::to_string(&digestible).expect("config serializes"))
    }
}
