//! Operator entry point: dataset generation, training, evaluation, gradient
//! checks, and the supervision ablation, all driven by one TOML config.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use loopformer::checkpoint;
use loopformer::config::RunConfig;
use loopformer::evaluator;
use loopformer::model::{Model, Supervision};
use loopformer::params::BoundParams;
use loopformer::rng::{child_seed, labeled_seed};
use loopformer::taskgen::{self, TaskKind};
use loopformer::tensor::{grad_check, Tape};
use loopformer::trainer::{self, RunDir, TrainControl};

#[derive(Parser)]
#[command(name = "loopformer", about = "Depth-recurrent transformer engine", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate oracle-verified JSONL datasets.
    Gen {
        /// Task: graph | logic | family.
        task: String,
        /// Complexity bucket spec, e.g. "hops=1..5" or "depth=2..4".
        bucket: String,
        /// Instances per bucket.
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train a model per the config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: <checkpoint_dir>/<task>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep a checkpoint over (steps x complexity) and emit reports.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint path (default: <checkpoint_dir>/<task>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Report directory (default: <report_dir>/<task>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient verification on a small model.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of sampled parameter entries.
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
    /// Paired silent-vs-intermediate supervision comparison.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: <report_dir>/<task>-ablation).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Deep OOD complexity probed at a single thinking step.
        #[arg(long, default_value_t = 12)]
        deep: usize,
        /// Instances per probe cell.
        #[arg(long, default_value_t = 500)]
        probe_n: usize,
    },
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Gen {
            task,
            bucket,
            count,
            out,
            seed,
        } => cmd_gen(&task, &bucket, count, out, seed),
        Command::Train { config, seed, out } => cmd_train(&config, seed, out),
        Command::Eval {
            config,
            checkpoint,
            seed,
            out,
        } => cmd_eval(&config, checkpoint, seed, out),
        Command::Gradcheck {
            config,
            seed,
            samples,
        } => cmd_gradcheck(&config, seed, samples),
        Command::Ablate {
            config,
            seed,
            out,
            deep,
            probe_n,
        } => cmd_ablate(&config, seed, out, deep, probe_n),
    }
}

/// Paths may be overridden by environment variables (paths only).
fn env_path(var: &str, fallback: PathBuf) -> PathBuf {
    std::env::var_os(var).map(PathBuf::from).unwrap_or(fallback)
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    cfg.paths.data_dir = env_path("LOOPFORMER_DATA_DIR", cfg.paths.data_dir);
    cfg.paths.checkpoint_dir = env_path("LOOPFORMER_CHECKPOINT_DIR", cfg.paths.checkpoint_dir);
    cfg.paths.report_dir = env_path("LOOPFORMER_REPORT_DIR", cfg.paths.report_dir);
    Ok(cfg)
}

fn parse_bucket(task: TaskKind, spec: &str) -> Result<(usize, usize)> {
    let axis = task.complexity_axis();
    let body = spec
        .strip_prefix(&format!("{axis}="))
        .with_context(|| format!("bucket spec must look like `{axis}=LO..HI`"))?;
    let (lo, hi) = body
        .split_once("..")
        .with_context(|| format!("bucket spec must look like `{axis}=LO..HI`"))?;
    let lo: usize = lo.parse().context("bucket lower bound")?;
    let hi: usize = hi.parse().context("bucket upper bound")?;
    if lo == 0 || hi < lo {
        bail!("bad bucket range {lo}..{hi}");
    }
    Ok((lo, hi))
}

fn cmd_gen(task: &str, bucket: &str, count: usize, out: Option<PathBuf>, seed: u64) -> Result<()> {
    let task = TaskKind::parse(task).with_context(|| format!("unknown task `{task}`"))?;
    let (lo, hi) = parse_bucket(task, bucket)?;
    let out = out.unwrap_or_else(|| {
        env_path("LOOPFORMER_DATA_DIR", PathBuf::from("data"))
            .join(format!("{}-{lo}-{hi}.jsonl", task.name()))
    });

    let gen_seed = labeled_seed(seed, "gen");
    let mut lines = String::new();
    let mut total = 0usize;
    for complexity in lo..=hi {
        let bucket_seed = child_seed(gen_seed, complexity as u64);
        for i in 0..count {
            let inst = taskgen::generate_balanced(
                task,
                complexity,
                i,
                child_seed(bucket_seed, i as u64),
            )?;
            // Every emitted record is oracle-verified.
            let ok = match &inst {
                taskgen::TaskInstance::Graph(g) => taskgen::graph::verify(g),
                taskgen::TaskInstance::Logic(e) => taskgen::logic::verify(e),
                taskgen::TaskInstance::Family(f) => taskgen::family::verify(f),
            };
            if !ok {
                bail!("oracle re-verification failed for {} {complexity}/{i}", task.name());
            }
            let line = match &inst {
                taskgen::TaskInstance::Graph(g) => serde_json::to_string(g)?,
                taskgen::TaskInstance::Logic(e) => serde_json::to_string(e)?,
                taskgen::TaskInstance::Family(f) => serde_json::to_string(f)?,
            };
            lines.push_str(&line);
            lines.push('\n');
            total += 1;
        }
    }
    checkpoint::atomic_write(&out, lines.as_bytes())?;
    // The closed vocabulary ships beside token-based datasets.
    match task {
        TaskKind::Logic => {
            loopformer::model::perception::Vocab::logic().to_file(&out.with_extension("vocab.txt"))?
        }
        TaskKind::Family => loopformer::model::perception::Vocab::family()
            .to_file(&out.with_extension("vocab.txt"))?,
        TaskKind::Graph => {}
    }
    println!("wrote {total} records to {}", out.display());
    Ok(())
}

fn cmd_train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let out = out.unwrap_or_else(|| cfg.paths.checkpoint_dir.join(cfg.model.task.name()));
    let run = RunDir::new(&out);
    std::fs::create_dir_all(&out)?;
    checkpoint::atomic_write(&out.join("config.toml"), cfg.to_snapshot().as_bytes())?;

    let mut model = Model::new(cfg.model, labeled_seed(cfg.seed, "init"))?;
    let resuming = run.checkpoint().exists();
    if resuming {
        println!("resuming from {}", run.checkpoint().display());
    }
    let report = trainer::train(&mut model, &cfg.train, Some(&run), 0, |_, _| {
        TrainControl::Continue
    })?;
    println!(
        "trained {} steps; final loss {:.4}, train acc {:.3}",
        report.steps_run, report.final_loss, report.final_train_acc
    );
    println!("checkpoint: {}", run.checkpoint().display());
    println!("metrics: {}", run.metrics().display());
    Ok(())
}

fn cmd_eval(
    config: &Path,
    checkpoint_path: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let ckpt = checkpoint_path.unwrap_or_else(|| {
        cfg.paths
            .checkpoint_dir
            .join(cfg.model.task.name())
            .join("model.ckpt")
    });
    let store = checkpoint::load(&ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let model = Model::from_store(cfg.model, store)?;

    let report = evaluator::sweep(
        &model,
        &cfg.eval.steps,
        &cfg.eval.complexities,
        cfg.eval.n_per_cell,
        cfg.seed,
        (cfg.train.t_lo, cfg.train.t_hi),
        (cfg.train.complexity_lo, cfg.train.complexity_hi),
    )?;
    let out = out.unwrap_or_else(|| cfg.paths.report_dir.join(cfg.model.task.name()));
    std::fs::create_dir_all(&out)?;
    let csv_path = out.join("heatmap.csv");
    let png_path = out.join("heatmap.png");
    evaluator::emit_csv(&report, &csv_path)?;
    evaluator::emit_png(&report, &png_path)?;
    checkpoint::atomic_write(&out.join("config.toml"), cfg.to_snapshot().as_bytes())?;

    let stats = evaluator::frontier_stats(&report, 0.9)?;
    println!("frontier (threshold 0.90):");
    for p in &stats.points {
        match p.min_sufficient_steps {
            Some(t) => println!(
                "  {} {}: first sufficient T = {t}{}",
                report.task.complexity_axis(),
                p.complexity,
                p.sharpness
                    .map(|s| format!(" (jump {s:+.3})"))
                    .unwrap_or_default()
            ),
            None => println!(
                "  {} {}: below threshold everywhere",
                report.task.complexity_axis(),
                p.complexity
            ),
        }
    }
    println!("wrote {} and {}", csv_path.display(), png_path.display());
    Ok(())
}

fn cmd_gradcheck(config: &Path, seed: Option<u64>, samples: usize) -> Result<()> {
    let cfg = load_config(config, seed)?;
    // A small model keeps central differences fast; the op set is identical.
    let mut mc = cfg.model;
    mc.d = mc.d.min(32);
    mc.heads = mc.heads.min(2);
    mc.d_ff = mc.d_ff.min(64);
    let model = Model::new(mc, labeled_seed(cfg.seed, "gradcheck-init"))?;

    let complexity = cfg.train.complexity_lo.max(if matches!(mc.task, TaskKind::Family) { 2 } else { 1 });
    let inst = taskgen::generate(mc.task, complexity, labeled_seed(cfg.seed, "gradcheck-inst"))?;
    let t_steps = 3.min(mc.t_max);
    let build = |tape: &mut Tape, bound: &mut BoundParams, store: &loopformer::params::ParameterStore| {
        let shadow = Model::from_store(mc, store.clone())?;
        let (loss, _, _) =
            shadow.forward_loss_with(tape, bound, &inst, t_steps, Supervision::Silent, 7)?;
        Ok(loss)
    };
    let report = grad_check(&build, &model.store, 1e-3, samples, labeled_seed(cfg.seed, "gradcheck"))?;
    println!(
        "gradcheck: {} entries, max rel err {:.3e}",
        report.checked, report.max_rel_err
    );
    if let Some((name, idx, a, n)) = &report.worst {
        println!("  worst: {name}[{idx}] analytic {a:.6e} vs numeric {n:.6e}");
    }
    for f in &report.failures {
        println!("  failure: {f}");
    }
    if report.passed(1e-2) {
        println!("PASS (tolerance 1e-2)");
        Ok(())
    } else {
        bail!("gradient check failed");
    }
}

fn cmd_ablate(
    config: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    deep: usize,
    probe_n: usize,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    if !matches!(cfg.model.task, TaskKind::Graph) {
        bail!("the supervision ablation is defined on the graph task");
    }
    let out = out.unwrap_or_else(|| {
        cfg.paths
            .report_dir
            .join(format!("{}-ablation", cfg.model.task.name()))
    });
    std::fs::create_dir_all(&out)?;
    checkpoint::atomic_write(&out.join("config.toml"), cfg.to_snapshot().as_bytes())?;

    let mut rows = Vec::new();
    for (mode, tag) in [
        (Supervision::Silent, "silent"),
        (Supervision::Intermediate, "intermediate"),
    ] {
        let mut tc = cfg.train.clone();
        tc.supervision = mode;
        let mut model = Model::new(cfg.model, labeled_seed(cfg.seed, "init"))?;
        let run = RunDir::new(out.join(tag));
        std::fs::create_dir_all(out.join(tag))?;
        let report = trainer::train(&mut model, &tc, Some(&run), 0, |_, _| TrainControl::Continue)?;
        println!(
            "{tag}: {} steps, final train acc {:.3}",
            report.steps_run, report.final_train_acc
        );

        // Step-1 accuracy on deep OOD instances: the shortcut signature.
        let step1 =
            evaluator::cell_accuracy(&model, cfg.model.task, 1, deep, probe_n, labeled_seed(cfg.seed, "ablate-deep"))?;
        // Sufficient-step accuracy just beyond the training range.
        let ood_c = cfg.train.complexity_hi + 1;
        let ood_t = ood_c.max(cfg.train.t_hi);
        let sufficient = evaluator::cell_accuracy(
            &model,
            cfg.model.task,
            ood_t.min(cfg.model.t_max),
            ood_c,
            probe_n,
            labeled_seed(cfg.seed, "ablate-ood"),
        )?;
        println!("{tag}: step-1 acc on {deep}-hop = {step1:.3}, sufficient-step OOD acc = {sufficient:.3}");
        rows.push((tag, step1, sufficient));
    }

    let mut body = String::from("strategy,step1_deep_ood_acc,sufficient_step_ood_acc\n");
    for (tag, s1, ss) in &rows {
        body.push_str(&format!("{tag},{s1},{ss}\n"));
    }
    let path = out.join("ablation.csv");
    checkpoint::atomic_write(&path, body.as_bytes())?;
    println!("wrote {}", path.display());
    Ok(())
}
