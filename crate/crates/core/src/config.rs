//! Run configuration: one TOML document drives every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Supervision};
use crate::taskgen::TaskKind;
use crate::trainer::TrainConfig;

/// Fully resolved configuration for a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub steps: Vec<usize>,
    pub complexities: Vec<usize>,
    pub n_per_cell: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: "data".into(),
            checkpoint_dir: "runs".into(),
            report_dir: "reports".into(),
        }
    }
}

impl EvalConfig {
    pub fn defaults_for(task: TaskKind) -> Self {
        let (steps, complexities) = match task {
            TaskKind::Graph => ((1..=12).collect(), (1..=6).collect()),
            TaskKind::Logic => ((1..=20).collect(), (1..=7).collect()),
            TaskKind::Family => ((1..=16).collect(), (2..=7).collect()),
        };
        EvalConfig {
            steps,
            complexities,
            n_per_cell: 500,
        }
    }
}

// ── Raw (file-shaped) layer ──────────────────────────────────────────

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    seed: Option<u64>,
    model: RawModel,
    #[serde(default)]
    train: RawTrain,
    #[serde(default)]
    eval: RawEval,
    #[serde(default)]
    paths: RawPaths,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    task: Option<String>,
    d: Option<usize>,
    heads: Option<usize>,
    d_ff: Option<usize>,
    layerscale: Option<bool>,
    rope: Option<bool>,
    gate_bias: Option<f32>,
    t_max: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    t_lo: Option<usize>,
    t_hi: Option<usize>,
    complexity_lo: Option<usize>,
    complexity_hi: Option<usize>,
    batch_size: Option<usize>,
    total_steps: Option<usize>,
    lr: Option<f32>,
    weight_decay: Option<f32>,
    grad_clip: Option<f32>,
    warmup_steps: Option<usize>,
    lr_floor: Option<f32>,
    supervision: Option<String>,
    log_every: Option<usize>,
    checkpoint_every: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEval {
    steps: Option<Vec<usize>>,
    complexities: Option<Vec<usize>>,
    n_per_cell: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPaths {
    data_dir: Option<PathBuf>,
    checkpoint_dir: Option<PathBuf>,
    report_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Parse a TOML document; unknown keys are rejected with the parser's
    /// line/column diagnostics. Missing fields fall back to per-task
    /// defaults.
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let raw: RawRunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        let task_name = raw
            .model
            .task
            .as_deref()
            .ok_or_else(|| Error::Config("model.task is required".into()))?;
        let task = TaskKind::parse(task_name)
            .ok_or_else(|| Error::Config(format!("unknown task `{task_name}`")))?;

        let defaults = ModelConfig::for_task(task);
        let model = ModelConfig {
            task,
            d: raw.model.d.unwrap_or(defaults.d),
            heads: raw.model.heads.unwrap_or(defaults.heads),
            d_ff: raw.model.d_ff.unwrap_or(defaults.d_ff),
            layerscale: raw.model.layerscale.unwrap_or(defaults.layerscale),
            rope: raw.model.rope.unwrap_or(defaults.rope),
            gate_bias: raw.model.gate_bias.unwrap_or(defaults.gate_bias),
            t_max: raw.model.t_max.unwrap_or(defaults.t_max),
        };

        let td = TrainConfig::defaults_for(task);
        let supervision = match raw.train.supervision.as_deref() {
            None => td.supervision,
            Some("silent") => Supervision::Silent,
            Some("intermediate") => Supervision::Intermediate,
            Some(other) => {
                return Err(Error::Config(format!("unknown supervision `{other}`")))
            }
        };
        let seed = raw.seed.unwrap_or(42);
        let train = TrainConfig {
            task,
            t_lo: raw.train.t_lo.unwrap_or(td.t_lo),
            t_hi: raw.train.t_hi.unwrap_or(td.t_hi),
            complexity_lo: raw.train.complexity_lo.unwrap_or(td.complexity_lo),
            complexity_hi: raw.train.complexity_hi.unwrap_or(td.complexity_hi),
            batch_size: raw.train.batch_size.unwrap_or(td.batch_size),
            total_steps: raw.train.total_steps.unwrap_or(td.total_steps),
            lr: raw.train.lr.unwrap_or(td.lr),
            weight_decay: raw.train.weight_decay.unwrap_or(td.weight_decay),
            grad_clip: raw.train.grad_clip.unwrap_or(td.grad_clip),
            warmup_steps: raw.train.warmup_steps.unwrap_or(td.warmup_steps),
            lr_floor: raw.train.lr_floor.unwrap_or(td.lr_floor),
            supervision,
            seed,
            log_every: raw.train.log_every.unwrap_or(td.log_every),
            checkpoint_every: raw.train.checkpoint_every.unwrap_or(td.checkpoint_every),
        };

        let ed = EvalConfig::defaults_for(task);
        let eval = EvalConfig {
            steps: raw.eval.steps.unwrap_or(ed.steps),
            complexities: raw.eval.complexities.unwrap_or(ed.complexities),
            n_per_cell: raw.eval.n_per_cell.unwrap_or(ed.n_per_cell),
        };

        let pd = Paths::default();
        let paths = Paths {
            data_dir: raw.paths.data_dir.unwrap_or(pd.data_dir),
            checkpoint_dir: raw.paths.checkpoint_dir.unwrap_or(pd.checkpoint_dir),
            report_dir: raw.paths.report_dir.unwrap_or(pd.report_dir),
        };

        let cfg = RunConfig {
            seed,
            model,
            train,
            eval,
            paths,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_toml(&text)
    }

    /// Internal consistency across sections.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(&self.model)?;
        if self.eval.steps.is_empty() || self.eval.complexities.is_empty() {
            return Err(Error::Config("eval grid must be non-empty".into()));
        }
        if self.eval.n_per_cell == 0 {
            return Err(Error::Config("eval.n_per_cell must be positive".into()));
        }
        for &t in &self.eval.steps {
            if t < 1 || t > self.model.t_max {
                return Err(Error::Config(format!(
                    "eval step {t} outside 1..={}",
                    self.model.t_max
                )));
            }
        }
        if matches!(self.model.task, TaskKind::Family)
            && self.eval.complexities.iter().any(|&c| c < 2)
        {
            return Err(Error::Config("family eval depths must be >= 2".into()));
        }
        Ok(())
    }

    /// TOML snapshot sufficient to rerun identically.
    pub fn to_snapshot(&self) -> String {
        #[derive(Serialize)]
        struct Snapshot<'a> {
            seed: u64,
            model: &'a ModelConfig,
            train: &'a TrainConfig,
            eval: &'a EvalConfig,
            paths: &'a Paths,
        }
        toml::to_string_pretty(&Snapshot {
            seed: self.seed,
            model: &self.model,
            train: &self.train,
            eval: &self.eval,
            paths: &self.paths,
        })
        .expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_task_defaults() {
        let cfg = RunConfig::from_toml("[model]\ntask = \"graph\"\n").unwrap();
        assert_eq!(cfg.model.d, 128);
        assert_eq!(cfg.model.heads, 4);
        assert!(!cfg.model.rope);
        assert_eq!(cfg.train.t_lo, 5);
        assert_eq!(cfg.train.t_hi, 8);
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(cfg.eval.n_per_cell, 500);
        assert_eq!(cfg.seed, 42);

        let cfg = RunConfig::from_toml("[model]\ntask = \"logic\"\n").unwrap();
        assert_eq!((cfg.model.d, cfg.model.heads, cfg.model.d_ff), (256, 8, 1024));
        assert_eq!((cfg.train.t_lo, cfg.train.t_hi), (4, 16));
        assert_eq!(cfg.model.t_max, 28);

        let cfg = RunConfig::from_toml("[model]\ntask = \"family\"\n").unwrap();
        assert_eq!((cfg.train.t_lo, cfg.train.t_hi), (1, 12));
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!((cfg.train.complexity_lo, cfg.train.complexity_hi), (2, 5));
    }

    #[test]
    fn unknown_keys_rejected_with_location() {
        let err = RunConfig::from_toml("[model]\ntask = \"graph\"\nbananas = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bananas"), "{msg}");
        assert!(msg.contains("line"), "diagnostics should cite a line: {msg}");
    }

    #[test]
    fn inconsistent_ranges_rejected() {
        let err = RunConfig::from_toml(
            "[model]\ntask = \"graph\"\nt_max = 6\n[train]\nt_hi = 9\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("t_max"));

        let err =
            RunConfig::from_toml("[model]\ntask = \"graph\"\n[eval]\nsteps = [25]\n").unwrap_err();
        assert!(err.to_string().contains("eval step"));
    }

    #[test]
    fn snapshot_roundtrip() {
        let cfg = RunConfig::from_toml("[model]\ntask = \"logic\"\n[train]\nlr = 1e-4\n").unwrap();
        let snap = cfg.to_snapshot();
        let back = RunConfig::from_toml(&snap).unwrap();
        assert_eq!(back, cfg);
    }
}
