//! Silent-thinking training loop and the intermediate-supervision ablation.
//!
//! Each optimizer step samples one unroll depth T uniformly from the
//! configured range, assembles a label-balanced batch of fresh instances,
//! records one tape per instance, and averages gradients. Everything is a
//! pure function of (seed, config): per-step randomness is re-derived from
//! the step index, so two runs agree bit for bit and a resumed run continues
//! the exact trajectory of an uninterrupted one.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Supervision};
use crate::params::{Gradients, ParameterStore};
use crate::rng::{child_seed, labeled_seed, rng_from_seed};
use crate::taskgen::{generate_balanced, TaskKind};
use crate::tensor::{Tape, Tensor};

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Captured by the model section in config files.
    #[serde(skip_serializing)]
    pub task: TaskKind,
    /// Unroll-depth range sampled per batch.
    pub t_lo: usize,
    pub t_hi: usize,
    /// Complexity range sampled per instance.
    pub complexity_lo: usize,
    pub complexity_hi: usize,
    pub batch_size: usize,
    pub total_steps: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub grad_clip: f32,
    pub warmup_steps: usize,
    /// Cosine-decay the learning rate toward `lr * lr_floor` over
    /// `total_steps` after warmup; 1.0 disables decay.
    pub lr_floor: f32,
    pub supervision: Supervision,
    /// Captured by the top-level seed in config files.
    #[serde(skip_serializing)]
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Per-task defaults: step ranges and complexity ranges follow the
    /// task's standard regime; optimizer settings are shared.
    pub fn defaults_for(task: TaskKind) -> Self {
        let (t_lo, t_hi, c_lo, c_hi, batch) = match task {
            TaskKind::Graph => (5, 8, 1, 5, 128),
            TaskKind::Logic => (4, 16, 1, 8, 128),
            TaskKind::Family => (1, 12, 2, 5, 64),
        };
        TrainConfig {
            task,
            t_lo,
            t_hi,
            complexity_lo: c_lo,
            complexity_hi: c_hi,
            batch_size: batch,
            total_steps: 20_000,
            lr: 3e-4,
            weight_decay: 0.01,
            grad_clip: 1.0,
            warmup_steps: 500,
            lr_floor: 1.0,
            supervision: Supervision::Silent,
            seed: 42,
            log_every: 50,
            checkpoint_every: 1000,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.task != model.task {
            return Err(Error::Config("train task differs from model task".into()));
        }
        if self.t_lo < 1 || self.t_lo > self.t_hi {
            return Err(Error::Config(format!(
                "bad step range [{}, {}]",
                self.t_lo, self.t_hi
            )));
        }
        if self.t_hi > model.t_max {
            return Err(Error::Config(format!(
                "t_hi = {} exceeds t_max = {}",
                self.t_hi, model.t_max
            )));
        }
        if self.complexity_lo > self.complexity_hi || self.complexity_lo == 0 {
            return Err(Error::Config(format!(
                "bad complexity range [{}, {}]",
                self.complexity_lo, self.complexity_hi
            )));
        }
        if matches!(self.task, TaskKind::Family) && self.complexity_lo < 2 {
            return Err(Error::Config("family chains need depth >= 2".into()));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::Config("batch size and steps must be positive".into()));
        }
        Ok(())
    }
}

/// One metrics-log row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f32,
    pub train_acc: f32,
    pub sampled_t: usize,
    pub wallclock: f64,
}

/// Decision returned by a training probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainControl {
    Continue,
    Stop,
}

/// Summary of a finished (or early-stopped) run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps_run: usize,
    pub final_loss: f32,
    pub final_train_acc: f32,
    pub stopped_early: bool,
    pub metrics: Vec<MetricsRow>,
}

// ── Optimizer ────────────────────────────────────────────────────────

/// Adam with decoupled weight decay. Decay applies to matrices only;
/// vectors (biases, norms, LayerScale, depth rows) are left undecayed.
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: usize,
}

impl AdamW {
    pub fn new(store: &ParameterStore, lr: f32, weight_decay: f32) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect(),
            v: store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One update with the given learning-rate scale (warmup).
    pub fn apply(&mut self, store: &mut ParameterStore, grads: &Gradients, lr_scale: f32) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr = self.lr * lr_scale;
        let n = store.len();
        for idx in 0..n {
            let pid = crate::params::ParamId(idx);
            if !store.get(pid).requires_grad() {
                continue;
            }
            let decay = if store.get(pid).shape().len() >= 2 {
                self.weight_decay
            } else {
                0.0
            };
            let g = grads.get(pid);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let p = store.get_mut(pid).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + decay * p[i]);
            }
        }
    }

    /// Moments and step counter as a named-tensor store for persistence.
    pub fn to_store(&self, params: &ParameterStore) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.add("adamw.step", Tensor::scalar(self.step as f32));
        for (pid, name, t) in params.iter() {
            s.add(
                format!("adamw.m.{name}"),
                Tensor::new(t.shape().to_vec(), self.m[pid.0].clone()).unwrap(),
            );
            s.add(
                format!("adamw.v.{name}"),
                Tensor::new(t.shape().to_vec(), self.v[pid.0].clone()).unwrap(),
            );
        }
        s
    }

    pub fn restore(&mut self, params: &ParameterStore, saved: &ParameterStore) -> Result<()> {
        let step_id = saved.id_of("adamw.step")?;
        self.step = saved.get(step_id).data()[0] as usize;
        for (pid, name, t) in params.iter() {
            let m = saved.get(saved.id_of(&format!("adamw.m.{name}"))?);
            let v = saved.get(saved.id_of(&format!("adamw.v.{name}"))?);
            if m.numel() != t.numel() || v.numel() != t.numel() {
                return Err(Error::Checkpoint(format!(
                    "optimizer state for `{name}` has wrong size"
                )));
            }
            self.m[pid.0].copy_from_slice(m.data());
            self.v[pid.0].copy_from_slice(v.data());
        }
        Ok(())
    }
}

// ── Training loop ────────────────────────────────────────────────────

/// Gradients are accumulated over a fixed number of batch shards so the
/// floating-point reduction order never depends on thread count.
const ACCUM_SHARDS: usize = 8;

/// Artifact paths for a training run rooted at one directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub dir: PathBuf,
}

impl RunDir {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunDir { dir: dir.into() }
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }

    pub fn optimizer_state(&self) -> PathBuf {
        self.dir.join("model.opt.ckpt")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
}

/// Train to completion (or early stop / configured budget).
///
/// `probe` is consulted every `probe_every` steps (0 = never) and may stop
/// training; `out` enables checkpoint + metrics artifacts when present.
/// If `out` already holds a checkpoint, training resumes from it.
pub fn train(
    model: &mut Model,
    cfg: &TrainConfig,
    out: Option<&RunDir>,
    probe_every: usize,
    mut probe: impl FnMut(usize, &Model) -> TrainControl,
) -> Result<TrainReport> {
    cfg.validate(&model.cfg)?;
    let mut opt = AdamW::new(&model.store, cfg.lr, cfg.weight_decay);
    let mut start_step = 0;

    if let Some(run) = out {
        if run.checkpoint().exists() {
            let params = checkpoint::load(&run.checkpoint())?;
            *model = Model::from_store(model.cfg, params)?;
            opt = AdamW::new(&model.store, cfg.lr, cfg.weight_decay);
            if run.optimizer_state().exists() {
                let saved = checkpoint::load(&run.optimizer_state())?;
                opt.restore(&model.store, &saved)?;
            }
            start_step = opt.step_count();
        }
    }

    let train_seed = labeled_seed(cfg.seed, "train");
    let clock = Instant::now();
    let mut metrics: Vec<MetricsRow> = Vec::new();
    let mut last = (f32::NAN, 0.0f32);
    let mut stopped_early = false;
    let mut steps_run = start_step;

    for step in start_step..cfg.total_steps {
        let step_seed = child_seed(train_seed, step as u64);
        let mut step_rng = rng_from_seed(step_seed);
        let t_steps = step_rng.random_range(cfg.t_lo..=cfg.t_hi);

        let (loss, acc, grads) = run_batch(model, cfg, step, step_seed, t_steps)?;
        if !loss.is_finite() {
            return Err(abort_diagnostics(model, cfg, step, step_seed, t_steps, loss));
        }
        let mut grads = grads;
        if !grads.all_finite() {
            return Err(Error::TrainAborted {
                step,
                t: t_steps,
                detail: "non-finite gradient after batch accumulation".into(),
            });
        }
        grads.clip_global_norm(cfg.grad_clip);
        let warm = if cfg.warmup_steps > 0 {
            (((step + 1) as f32) / cfg.warmup_steps as f32).min(1.0)
        } else {
            1.0
        };
        let decay = if cfg.lr_floor < 1.0 {
            let progress = (step + 1) as f32 / cfg.total_steps as f32;
            let cos = 0.5 * (1.0 + (std::f32::consts::PI * progress.min(1.0)).cos());
            cfg.lr_floor + (1.0 - cfg.lr_floor) * cos
        } else {
            1.0
        };
        let lr_scale = warm * decay;
        opt.apply(&mut model.store, &grads, lr_scale);
        last = (loss, acc);
        steps_run = step + 1;

        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            metrics.push(MetricsRow {
                step: step + 1,
                loss,
                train_acc: acc,
                sampled_t: t_steps,
                wallclock: clock.elapsed().as_secs_f64(),
            });
        }
        if let Some(run) = out {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                save_run_state(model, &opt, run, &metrics)?;
            }
        }
        if probe_every > 0 && (step + 1) % probe_every == 0 {
            if probe(step + 1, model) == TrainControl::Stop {
                stopped_early = true;
                break;
            }
        }
    }

    if let Some(run) = out {
        save_run_state(model, &opt, run, &metrics)?;
    }
    Ok(TrainReport {
        steps_run,
        final_loss: last.0,
        final_train_acc: last.1,
        stopped_early,
        metrics,
    })
}

/// One batch: deterministic instance assembly, per-instance tapes, sharded
/// gradient accumulation in a fixed reduction order.
fn run_batch(
    model: &Model,
    cfg: &TrainConfig,
    step: usize,
    step_seed: u64,
    t_steps: usize,
) -> Result<(f32, f32, Gradients)> {
    let batch = cfg.batch_size;
    let shard_size = batch.div_ceil(ACCUM_SHARDS);
    let shards: Vec<(usize, usize)> = (0..ACCUM_SHARDS)
        .map(|s| (s * shard_size, ((s + 1) * shard_size).min(batch)))
        .filter(|(lo, hi)| lo < hi)
        .collect();

    let results: Vec<Result<(Gradients, f64, usize)>> = shards
        .par_iter()
        .map(|&(lo, hi)| {
            let mut grads = Gradients::zeros_like(&model.store);
            let mut loss_sum = 0.0f64;
            let mut correct = 0usize;
            for i in lo..hi {
                let inst_seed = child_seed(step_seed, 1000 + i as u64);
                let mut inst_rng = rng_from_seed(inst_seed);
                let complexity =
                    inst_rng.random_range(cfg.complexity_lo..=cfg.complexity_hi);
                let inst = generate_balanced(cfg.task, complexity, i, child_seed(inst_seed, 2))?;
                let encode_seed = child_seed(inst_seed, 3);

                let mut tape = Tape::new();
                let fwd =
                    model.forward_loss(&mut tape, &inst, t_steps, cfg.supervision, encode_seed)?;
                let loss = tape.value(fwd.loss)[0];
                loss_sum += loss as f64;
                if !loss.is_finite() {
                    return Err(Error::TrainAborted {
                        step,
                        t: t_steps,
                        detail: format!("instance {i} produced non-finite loss {loss}"),
                    });
                }
                let pred = crate::model::readout::argmax(&tape, fwd.final_logits);
                correct += (pred == inst.label_index()) as usize;
                tape.backward(fwd.loss)?;
                fwd.bound.grads_into(&tape, &mut grads, 1.0 / batch as f32);
            }
            Ok((grads, loss_sum, correct))
        })
        .collect();

    let mut total = Gradients::zeros_like(&model.store);
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    for r in results {
        let (g, l, c) = r?;
        total.add_scaled(&g, 1.0);
        loss_sum += l;
        correct += c;
    }
    Ok((
        (loss_sum / batch as f64) as f32,
        correct as f32 / batch as f32,
        total,
    ))
}

/// Rebuild the failing batch's first instance with diagnostics for the abort
/// report: per-step state norms stand in for the latent trajectory.
fn abort_diagnostics(
    model: &Model,
    cfg: &TrainConfig,
    step: usize,
    step_seed: u64,
    t_steps: usize,
    loss: f32,
) -> Error {
    let mut detail = format!("non-finite batch loss {loss}");
    let inst_seed = child_seed(step_seed, 1000);
    let mut inst_rng = rng_from_seed(inst_seed);
    let complexity = inst_rng.random_range(cfg.complexity_lo..=cfg.complexity_hi);
    if let Ok(inst) = generate_balanced(cfg.task, complexity, 0, child_seed(inst_seed, 2)) {
        if let Ok((tape, states, _)) = model.run_states(&inst, t_steps, child_seed(inst_seed, 3)) {
            let norms = crate::model::core::state_norms(&tape, &states);
            detail.push_str(&format!("; state norms {:?}", norms.state_norms));
        }
    }
    Error::TrainAborted {
        step,
        t: t_steps,
        detail,
    }
}

fn save_run_state(
    model: &Model,
    opt: &AdamW,
    run: &RunDir,
    metrics: &[MetricsRow],
) -> Result<()> {
    checkpoint::save(&model.store, &run.checkpoint())?;
    checkpoint::save(&opt.to_store(&model.store), &run.optimizer_state())?;
    write_metrics_csv(metrics, &run.metrics())
}

/// Whole-file CSV write (atomic) with the canonical metrics schema.
pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "loss", "train_acc", "sampled_T", "wallclock"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            format!("{}", r.loss),
            format!("{}", r.train_acc),
            r.sampled_t.to_string(),
            format!("{:.3}", r.wallclock),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    checkpoint::atomic_write(path, &bytes)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_cfg() -> (ModelConfig, TrainConfig) {
        let model = ModelConfig {
            task: TaskKind::Graph,
            d: 16,
            heads: 2,
            d_ff: 32,
            layerscale: false,
            rope: false,
            gate_bias: -2.0,
            t_max: 8,
        };
        let mut train = TrainConfig::defaults_for(TaskKind::Graph);
        train.t_lo = 2;
        train.t_hi = 3;
        train.complexity_lo = 1;
        train.complexity_hi = 2;
        train.batch_size = 8;
        train.total_steps = 6;
        train.warmup_steps = 2;
        train.log_every = 2;
        train.checkpoint_every = 0;
        (model, train)
    }

    #[test]
    fn same_seed_same_trajectory() {
        let (mc, tc) = tiny_cfg();
        let mut m1 = Model::new(mc, 5).unwrap();
        let mut m2 = Model::new(mc, 5).unwrap();
        train(&mut m1, &tc, None, 0, |_, _| TrainControl::Continue).unwrap();
        train(&mut m2, &tc, None, 0, |_, _| TrainControl::Continue).unwrap();
        assert_eq!(m1.store.to_bytes(), m2.store.to_bytes());
    }

    #[test]
    fn different_seed_different_trajectory() {
        let (mc, tc) = tiny_cfg();
        let mut m1 = Model::new(mc, 5).unwrap();
        let mut m2 = Model::new(mc, 5).unwrap();
        let mut tc2 = tc.clone();
        tc2.seed = 43;
        train(&mut m1, &tc, None, 0, |_, _| TrainControl::Continue).unwrap();
        train(&mut m2, &tc2, None, 0, |_, _| TrainControl::Continue).unwrap();
        assert_ne!(m1.store.to_bytes(), m2.store.to_bytes());
    }

    #[test]
    fn degenerate_single_step_range_runs() {
        let (mc, mut tc) = tiny_cfg();
        tc.t_lo = 1;
        tc.t_hi = 1;
        tc.total_steps = 3;
        let mut m = Model::new(mc, 1).unwrap();
        let report = train(&mut m, &tc, None, 0, |_, _| TrainControl::Continue).unwrap();
        assert_eq!(report.steps_run, 3);
        assert!(report.final_loss.is_finite());
    }

    #[test]
    fn initial_loss_is_near_ln2() {
        // Binary task at near-identity init: logits are ~uniform.
        let (mc, tc) = tiny_cfg();
        let model = Model::new(mc, 9).unwrap();
        let (loss, _, _) = run_batch(&model, &tc, 0, labeled_seed(tc.seed, "train"), 2).unwrap();
        assert!(
            (loss - std::f32::consts::LN_2).abs() < 0.15,
            "init loss {loss}"
        );
    }

    #[test]
    fn early_stop_probe() {
        let (mc, mut tc) = tiny_cfg();
        tc.total_steps = 100;
        let mut m = Model::new(mc, 2).unwrap();
        let report = train(&mut m, &tc, None, 2, |step, _| {
            if step >= 4 {
                TrainControl::Stop
            } else {
                TrainControl::Continue
            }
        })
        .unwrap();
        assert!(report.stopped_early);
        assert_eq!(report.steps_run, 4);
    }

    #[test]
    fn resume_continues_identically() {
        let (mc, mut tc) = tiny_cfg();
        tc.checkpoint_every = 2;
        tc.total_steps = 6;

        // Uninterrupted run.
        let mut full = Model::new(mc, 5).unwrap();
        train(&mut full, &tc, None, 0, |_, _| TrainControl::Continue).unwrap();

        // Run to step 4, then resume to 6 from the saved state.
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path());
        let mut tc_half = tc.clone();
        tc_half.total_steps = 4;
        let mut half = Model::new(mc, 5).unwrap();
        train(&mut half, &tc_half, Some(&run), 0, |_, _| TrainControl::Continue).unwrap();
        let mut resumed = Model::new(mc, 5).unwrap();
        let report = train(&mut resumed, &tc, Some(&run), 0, |_, _| TrainControl::Continue).unwrap();
        assert_eq!(report.steps_run, 6);
        assert_eq!(resumed.store.to_bytes(), full.store.to_bytes());
    }

    #[test]
    fn metrics_csv_schema() {
        let rows = vec![MetricsRow {
            step: 10,
            loss: 0.5,
            train_acc: 0.75,
            sampled_t: 3,
            wallclock: 1.25,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&rows, &path).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        assert!(body.starts_with("step,loss,train_acc,sampled_T,wallclock"));
        assert!(body.contains("10,0.5,0.75,3,"));
    }
}
