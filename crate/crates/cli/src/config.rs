//! Run configuration: one JSON file, every field optional.

use std::path::{Path, PathBuf};

use kqprune_core::pruning::{SelectionMode, Strategy};
use kqprune_core::tasks::{
    default_rft_hyper, PruneSettings, RecallTaskSpec, ToyConfig, TrainHyper,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model initialization seed.
    pub seed: u64,
    pub model: ToyConfig,
    pub task: RecallTaskSpec,
    pub train: TrainHyper,
    pub finetune: TrainHyper,
    pub prune: PruneSettings,
    pub eval_sequences: usize,
    pub spectrum_skip: usize,
    pub bench: BenchConfig,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct BenchConfig {
    pub seq_len: usize,
    pub warmup: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seq_len: 2048,
            warmup: 3,
            repeats: 5,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ToyConfig::default(),
            task: RecallTaskSpec::default(),
            train: TrainHyper::default(),
            finetune: default_rft_hyper(),
            prune: PruneSettings::default(),
            eval_sequences: 128,
            spectrum_skip: 0,
            bench: BenchConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub ratio: Option<f64>,
    pub strategy: Option<Strategy>,
    pub mode: Option<SelectionMode>,
    pub f: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::parse(path, e))
    }

    /// `--seed` sets the model seed, the task seed and the pruning seed.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(r) = o.ratio {
            self.prune.ratio = r;
        }
        if let Some(s) = o.strategy {
            self.prune.strategy = s;
        }
        if let Some(m) = o.mode {
            self.prune.mode = m;
        }
        if let Some(f) = o.f {
            self.prune.f = f;
        }
        if let Some(s) = o.seed {
            self.seed = s;
            self.task.seed = s;
            self.prune.seed = s;
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.task.validate()?;
        if self.task.vocab != self.model.vocab {
            return Err(CliError::Config(format!(
                "task.vocab {} differs from model.vocab {}",
                self.task.vocab, self.model.vocab
            )));
        }
        let p = &self.prune;
        if !(0.0..1.0).contains(&p.ratio) {
            return Err(CliError::Config(format!(
                "prune.ratio {} outside [0, 1)",
                p.ratio
            )));
        }
        if !(p.f.is_finite() && p.f >= 1.0) {
            return Err(CliError::Config(format!(
                "prune.f {} must be a finite value ≥ 1",
                p.f
            )));
        }
        if p.calibration_sequences == 0 || p.max_samples == 0 {
            return Err(CliError::Config(
                "prune.calibrationSequences and prune.maxSamples must be positive".into(),
            ));
        }
        if self.eval_sequences == 0 {
            return Err(CliError::Config("evalSequences must be positive".into()));
        }
        if self.bench.warmup < 3 || self.bench.repeats == 0 || self.bench.seq_len == 0 {
            return Err(CliError::Config(
                "bench needs warmup ≥ 3, repeats ≥ 1, seqLen ≥ 1".into(),
            ));
        }
        Ok(())
    }
}
