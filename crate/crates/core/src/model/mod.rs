//! Model assembly: configuration, parameter initialization and resolution,
//! and the per-instance forward pass shared by training and evaluation.

pub mod core;
pub mod perception;
pub mod readout;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{normal, orthogonal_rows, xavier_uniform, BoundParams, ParamId, ParameterStore};
use crate::rng::rng_from_seed;
use crate::taskgen::{TaskInstance, TaskKind};
use crate::tensor::{Tape, Tensor, TensorRef};

use self::core::{AttnContext, BlockParams, GateParams};
use self::perception::{encode_boolexpr, encode_family, encode_graph, Encoded, Vocab, NODE_ID_POOL};
use self::readout::ReadoutParams;

pub const ROPE_BASE: f32 = 10_000.0;

/// Loss placement during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    /// Readout and loss only at the final step.
    Silent,
    /// Readout at every step, loss averaged over steps.
    Intermediate,
}

/// Architectural hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: TaskKind,
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layerscale: bool,
    pub rope: bool,
    pub gate_bias: f32,
    pub t_max: usize,
}

impl ModelConfig {
    /// Per-task defaults.
    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Graph => ModelConfig {
                task,
                d: 128,
                heads: 4,
                d_ff: 256,
                layerscale: false,
                rope: false,
                gate_bias: -2.0,
                t_max: 20,
            },
            TaskKind::Logic => ModelConfig {
                task,
                d: 256,
                heads: 8,
                d_ff: 1024,
                layerscale: true,
                rope: true,
                gate_bias: -2.0,
                t_max: 28,
            },
            TaskKind::Family => ModelConfig {
                task,
                d: 256,
                heads: 8,
                d_ff: 1024,
                layerscale: true,
                rope: true,
                gate_bias: -2.0,
                t_max: 20,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d_ff == 0 || self.t_max == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d = {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.rope && (self.d / self.heads) % 2 != 0 {
            return Err(Error::Config(
                "rotary positions need an even per-head dimension".into(),
            ));
        }
        let wants_rope = !matches!(self.task, TaskKind::Graph);
        if self.rope != wants_rope {
            return Err(Error::Config(format!(
                "task {} {} rotary positions",
                self.task.name(),
                if wants_rope { "requires" } else { "forbids" }
            )));
        }
        if matches!(self.task, TaskKind::Graph) && self.layerscale {
            return Err(Error::Config(
                "the topological interface runs without LayerScale".into(),
            ));
        }
        if !matches!(self.task, TaskKind::Graph) && !self.layerscale {
            return Err(Error::Config(
                "rotary interfaces require LayerScale".into(),
            ));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        match self.task {
            TaskKind::Graph => NODE_ID_POOL,
            TaskKind::Logic => Vocab::logic().len(),
            TaskKind::Family => Vocab::family().len(),
        }
    }
}

/// LayerScale initialization value.
pub const LAYERSCALE_INIT: f32 = 1e-4;

#[derive(Debug, Clone, Copy)]
enum ReadoutIds {
    Mlp {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
    Linear {
        w: ParamId,
        b: ParamId,
    },
}

#[derive(Debug, Clone, Copy)]
struct ParamIds {
    embed: ParamId,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
    ln1_scale: ParamId,
    ln1_shift: ParamId,
    ln2_scale: ParamId,
    ln2_shift: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    gamma_attn: Option<ParamId>,
    gamma_ffn: Option<ParamId>,
    gate_w: ParamId,
    gate_b: ParamId,
    depth: ParamId,
    readout: ReadoutIds,
}

/// A trainable model: config, parameters, and the task's vocabulary.
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParameterStore,
    ids: ParamIds,
    vocab: Option<Vocab>,
}

/// Everything the tape needs for one instance forward.
pub struct BoundModel<'a> {
    pub block: BlockParams,
    pub gate: GateParams,
    pub depth_table: TensorRef,
    pub embed: TensorRef,
    pub readout: ReadoutParams,
    pub bound: &'a mut BoundParams,
}

/// Output of one recorded forward pass.
pub struct ForwardPass {
    pub loss: TensorRef,
    pub final_logits: TensorRef,
    pub states: Vec<TensorRef>,
    pub bound: BoundParams,
}

impl Model {
    /// Fresh model with seeded initialization.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut store = ParameterStore::new();
        let mut rng = rng_from_seed(seed);
        let (d, d_ff, t_max) = (cfg.d, cfg.d_ff, cfg.t_max);
        let vocab_size = cfg.vocab_size();

        // Graph surface ids are drawn from a pool equal to the hidden width,
        // so their embeddings can start as an exactly orthogonal basis; bag
        // membership through masked attention is then crosstalk-free from
        // the first step. Token vocabularies are larger than d and use
        // gaussian rows.
        let embed_data = if matches!(cfg.task, TaskKind::Graph) && vocab_size == d {
            orthogonal_rows(&mut rng, d)
        } else {
            normal(&mut rng, vocab_size * d, 1.0)
        };
        let embed = store.add("embed.table", Tensor::new(vec![vocab_size, d], embed_data)?);
        let mut proj = |store: &mut ParameterStore, name: &str, rows: usize, cols: usize| {
            let data = xavier_uniform(&mut rng, rows, cols);
            store.add(name, Tensor::new(vec![rows, cols], data).unwrap())
        };
        let w_q = proj(&mut store, "core.attn.w_q", d, d);
        let w_k = proj(&mut store, "core.attn.w_k", d, d);
        let w_v = proj(&mut store, "core.attn.w_v", d, d);
        let w_o = proj(&mut store, "core.attn.w_o", d, d);
        let ln1_scale = store.add("core.ln1.scale", Tensor::filled(vec![d], 1.0));
        let ln1_shift = store.add("core.ln1.shift", Tensor::zeros(vec![d]));
        let ln2_scale = store.add("core.ln2.scale", Tensor::filled(vec![d], 1.0));
        let ln2_shift = store.add("core.ln2.shift", Tensor::zeros(vec![d]));
        let ffn_w1 = proj(&mut store, "core.ffn.w1", d, d_ff);
        let ffn_b1 = store.add("core.ffn.b1", Tensor::zeros(vec![d_ff]));
        let ffn_w2 = proj(&mut store, "core.ffn.w2", d_ff, d);
        let ffn_b2 = store.add("core.ffn.b2", Tensor::zeros(vec![d]));
        let (gamma_attn, gamma_ffn) = if cfg.layerscale {
            (
                Some(store.add(
                    "core.ls.gamma_attn",
                    Tensor::filled(vec![d], LAYERSCALE_INIT),
                )),
                Some(store.add(
                    "core.ls.gamma_ffn",
                    Tensor::filled(vec![d], LAYERSCALE_INIT),
                )),
            )
        } else {
            (None, None)
        };
        let gate_w = proj(&mut store, "core.gate.w_z", 2 * d, d);
        let gate_b = store.add("core.gate.b_z", Tensor::filled(vec![d], cfg.gate_bias));
        let depth = store.add("core.depth.table", Tensor::zeros(vec![t_max, d]));

        // Readout output layers start at zero: logits are uniform at init,
        // so the first losses sit at ln(num_classes) regardless of scale.
        let classes = cfg.task.num_classes();
        let readout = match cfg.task {
            TaskKind::Logic => {
                let w = store.add("readout.cls.w", Tensor::zeros(vec![d, classes]));
                let b = store.add("readout.cls.b", Tensor::zeros(vec![classes]));
                ReadoutIds::Linear { w, b }
            }
            TaskKind::Graph | TaskKind::Family => {
                let prefix = if matches!(cfg.task, TaskKind::Graph) {
                    "readout.pair"
                } else {
                    "readout.ptr"
                };
                let w1 = proj(&mut store, &format!("{prefix}.w1"), 2 * d, d);
                let b1 = store.add(format!("{prefix}.b1"), Tensor::zeros(vec![d]));
                let w2 = store.add(format!("{prefix}.w2"), Tensor::zeros(vec![d, classes]));
                let b2 = store.add(format!("{prefix}.b2"), Tensor::zeros(vec![classes]));
                ReadoutIds::Mlp { w1, b1, w2, b2 }
            }
        };

        let ids = ParamIds {
            embed,
            w_q,
            w_k,
            w_v,
            w_o,
            ln1_scale,
            ln1_shift,
            ln2_scale,
            ln2_shift,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
            gamma_attn,
            gamma_ffn,
            gate_w,
            gate_b,
            depth,
            readout,
        };
        Ok(Model {
            vocab: Model::vocab_for(cfg.task),
            cfg,
            store,
            ids,
        })
    }

    /// Rebuild a model around externally loaded parameters (a checkpoint).
    pub fn from_store(cfg: ModelConfig, store: ParameterStore) -> Result<Model> {
        cfg.validate()?;
        let ids = Model::resolve(&cfg, &store)?;
        Ok(Model {
            vocab: Model::vocab_for(cfg.task),
            cfg,
            store,
            ids,
        })
    }

    fn vocab_for(task: TaskKind) -> Option<Vocab> {
        match task {
            TaskKind::Graph => None,
            TaskKind::Logic => Some(Vocab::logic()),
            TaskKind::Family => Some(Vocab::family()),
        }
    }

    fn resolve(cfg: &ModelConfig, store: &ParameterStore) -> Result<ParamIds> {
        let want = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = store.id_of(name)?;
            if store.get(id).shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, config wants {:?}",
                    store.get(id).shape(),
                    shape
                )));
            }
            Ok(id)
        };
        let (d, d_ff) = (cfg.d, cfg.d_ff);
        let classes = cfg.task.num_classes();
        let readout = match cfg.task {
            TaskKind::Logic => ReadoutIds::Linear {
                w: want("readout.cls.w", &[d, classes])?,
                b: want("readout.cls.b", &[classes])?,
            },
            TaskKind::Graph | TaskKind::Family => {
                let prefix = if matches!(cfg.task, TaskKind::Graph) {
                    "readout.pair"
                } else {
                    "readout.ptr"
                };
                ReadoutIds::Mlp {
                    w1: want(&format!("{prefix}.w1"), &[2 * d, d])?,
                    b1: want(&format!("{prefix}.b1"), &[d])?,
                    w2: want(&format!("{prefix}.w2"), &[d, classes])?,
                    b2: want(&format!("{prefix}.b2"), &[classes])?,
                }
            }
        };
        Ok(ParamIds {
            embed: want("embed.table", &[cfg.vocab_size(), d])?,
            w_q: want("core.attn.w_q", &[d, d])?,
            w_k: want("core.attn.w_k", &[d, d])?,
            w_v: want("core.attn.w_v", &[d, d])?,
            w_o: want("core.attn.w_o", &[d, d])?,
            ln1_scale: want("core.ln1.scale", &[d])?,
            ln1_shift: want("core.ln1.shift", &[d])?,
            ln2_scale: want("core.ln2.scale", &[d])?,
            ln2_shift: want("core.ln2.shift", &[d])?,
            ffn_w1: want("core.ffn.w1", &[d, d_ff])?,
            ffn_b1: want("core.ffn.b1", &[d_ff])?,
            ffn_w2: want("core.ffn.w2", &[d_ff, d])?,
            ffn_b2: want("core.ffn.b2", &[d])?,
            gamma_attn: if cfg.layerscale {
                Some(want("core.ls.gamma_attn", &[d])?)
            } else {
                None
            },
            gamma_ffn: if cfg.layerscale {
                Some(want("core.ls.gamma_ffn", &[d])?)
            } else {
                None
            },
            gate_w: want("core.gate.w_z", &[2 * d, d])?,
            gate_b: want("core.gate.b_z", &[d])?,
            depth: want("core.depth.table", &[cfg.t_max, d])?,
            readout,
        })
    }

    pub fn vocab(&self) -> Option<&Vocab> {
        self.vocab.as_ref()
    }

    /// Encode an instance through the task's perception interface.
    pub fn encode(&self, inst: &TaskInstance, seed: u64) -> Result<Encoded> {
        if inst.kind() != self.cfg.task {
            return Err(Error::Config(format!(
                "model is configured for {}, instance is {}",
                self.cfg.task.name(),
                inst.kind().name()
            )));
        }
        match inst {
            TaskInstance::Graph(g) => encode_graph(g, seed),
            TaskInstance::Logic(e) => encode_boolexpr(&e.src, self.vocab.as_ref().unwrap()),
            TaskInstance::Family(f) => encode_family(f, self.vocab.as_ref().unwrap()),
        }
    }

    /// Bind every parameter once onto the tape.
    pub fn bind<'a>(&self, tape: &mut Tape, bound: &'a mut BoundParams) -> BoundModel<'a> {
        let ids = &self.ids;
        let n = |id: ParamId, tape: &mut Tape, bound: &mut BoundParams| {
            bound.node(tape, &self.store, id)
        };
        let block = BlockParams {
            w_q: n(ids.w_q, tape, bound),
            w_k: n(ids.w_k, tape, bound),
            w_v: n(ids.w_v, tape, bound),
            w_o: n(ids.w_o, tape, bound),
            ln1_scale: n(ids.ln1_scale, tape, bound),
            ln1_shift: n(ids.ln1_shift, tape, bound),
            ln2_scale: n(ids.ln2_scale, tape, bound),
            ln2_shift: n(ids.ln2_shift, tape, bound),
            ffn_w1: n(ids.ffn_w1, tape, bound),
            ffn_b1: n(ids.ffn_b1, tape, bound),
            ffn_w2: n(ids.ffn_w2, tape, bound),
            ffn_b2: n(ids.ffn_b2, tape, bound),
            gamma_attn: ids.gamma_attn.map(|g| n(g, tape, bound)),
            gamma_ffn: ids.gamma_ffn.map(|g| n(g, tape, bound)),
        };
        let gate = GateParams {
            w_z: n(ids.gate_w, tape, bound),
            b_z: n(ids.gate_b, tape, bound),
        };
        let depth_table = n(ids.depth, tape, bound);
        let embed = n(ids.embed, tape, bound);
        let readout = match ids.readout {
            ReadoutIds::Mlp { w1, b1, w2, b2 } => ReadoutParams::PairMlp {
                w1: n(w1, tape, bound),
                b1: n(b1, tape, bound),
                w2: n(w2, tape, bound),
                b2: n(b2, tape, bound),
            },
            ReadoutIds::Linear { w, b } => ReadoutParams::ClsLinear {
                w: n(w, tape, bound),
                b: n(b, tape, bound),
            },
        };
        BoundModel {
            block,
            gate,
            depth_table,
            embed,
            readout,
            bound,
        }
    }

    fn apply_readout(
        &self,
        tape: &mut Tape,
        bm: &BoundModel,
        enc: &Encoded,
        h: TensorRef,
    ) -> Result<TensorRef> {
        match (enc.readout, bm.readout) {
            (perception::ReadoutQuery::Pair { s, t }, ReadoutParams::PairMlp { w1, b1, w2, b2 }) => {
                readout::pairwise_readout(tape, h, s, t, w1, b1, w2, b2)
            }
            (perception::ReadoutQuery::Cls, ReadoutParams::ClsLinear { w, b }) => {
                readout::cls_readout(tape, h, w, b)
            }
            (
                perception::ReadoutQuery::Pointer { p, q },
                ReadoutParams::PairMlp { w1, b1, w2, b2 } | ReadoutParams::PointerMlp { w1, b1, w2, b2 },
            ) => readout::pointer_readout(tape, h, p, q, w1, b1, w2, b2),
            _ => Err(Error::Config(
                "readout head does not match the perception interface".into(),
            )),
        }
    }

    /// Record the full forward pass and loss for one instance on a tape.
    pub fn forward_loss(
        &self,
        tape: &mut Tape,
        inst: &TaskInstance,
        t_steps: usize,
        supervision: Supervision,
        encode_seed: u64,
    ) -> Result<ForwardPass> {
        let mut bound = BoundParams::new(&self.store);
        let (loss, final_logits, states) =
            self.forward_loss_with(tape, &mut bound, inst, t_steps, supervision, encode_seed)?;
        Ok(ForwardPass {
            loss,
            final_logits,
            states,
            bound,
        })
    }

    /// Same as [`Model::forward_loss`] but binding through a caller-owned
    /// parameter map (the gradient checker reads analytic grads through it).
    pub fn forward_loss_with(
        &self,
        tape: &mut Tape,
        bound: &mut BoundParams,
        inst: &TaskInstance,
        t_steps: usize,
        supervision: Supervision,
        encode_seed: u64,
    ) -> Result<(TensorRef, TensorRef, Vec<TensorRef>)> {
        let enc = self.encode(inst, encode_seed)?;
        let bm = self.bind(tape, bound);
        let h0 = tape.gather_rows(bm.embed, &enc.ids)?;
        let ctx = AttnContext {
            heads: self.cfg.heads,
            mask: enc.mask.clone(),
            positions: enc.positions.as_deref(),
            rope_base: ROPE_BASE,
        };
        let states = core::unroll(tape, &bm.block, &bm.gate, bm.depth_table, &ctx, h0, t_steps)?;
        let label = inst.label_index();
        let (loss, final_logits) = match supervision {
            Supervision::Silent => {
                let logits = self.apply_readout(tape, &bm, &enc, *states.last().unwrap())?;
                let loss = readout::silent_loss(tape, logits, label)?;
                (loss, logits)
            }
            Supervision::Intermediate => {
                let mut losses = Vec::with_capacity(states.len());
                let mut last_logits = None;
                for &st in &states {
                    let logits = self.apply_readout(tape, &bm, &enc, st)?;
                    losses.push(tape.cross_entropy(logits, label)?);
                    last_logits = Some(logits);
                }
                let loss = tape.mean_scalars(&losses)?;
                (loss, last_logits.unwrap())
            }
        };
        Ok((loss, final_logits, states))
    }

    /// Forward without a loss; returns the tape and all unrolled states.
    pub fn run_states(
        &self,
        inst: &TaskInstance,
        t_steps: usize,
        encode_seed: u64,
    ) -> Result<(Tape, Vec<TensorRef>, Encoded)> {
        let enc = self.encode(inst, encode_seed)?;
        let (tape, states) = self.run_states_with_encoding(&enc, t_steps)?;
        Ok((tape, states, enc))
    }

    /// Forward from an explicit encoding; lets callers perturb ids, masks,
    /// or positions directly.
    pub fn run_states_with_encoding(
        &self,
        enc: &Encoded,
        t_steps: usize,
    ) -> Result<(Tape, Vec<TensorRef>)> {
        let mut tape = Tape::new();
        let mut bound = BoundParams::new(&self.store);
        let bm = self.bind(&mut tape, &mut bound);
        let h0 = tape.gather_rows(bm.embed, &enc.ids)?;
        let ctx = AttnContext {
            heads: self.cfg.heads,
            mask: enc.mask.clone(),
            positions: enc.positions.as_deref(),
            rope_base: ROPE_BASE,
        };
        let states = core::unroll(&mut tape, &bm.block, &bm.gate, bm.depth_table, &ctx, h0, t_steps)?;
        Ok((tape, states))
    }

    /// Predicted class for one instance after `t_steps` of thinking.
    pub fn predict(&self, inst: &TaskInstance, t_steps: usize, encode_seed: u64) -> Result<usize> {
        let mut tape = Tape::new();
        let enc = self.encode(inst, encode_seed)?;
        let mut bound = BoundParams::new(&self.store);
        let bm = self.bind(&mut tape, &mut bound);
        let h0 = tape.gather_rows(bm.embed, &enc.ids)?;
        let ctx = AttnContext {
            heads: self.cfg.heads,
            mask: enc.mask.clone(),
            positions: enc.positions.as_deref(),
            rope_base: ROPE_BASE,
        };
        let states = core::unroll(&mut tape, &bm.block, &bm.gate, bm.depth_table, &ctx, h0, t_steps)?;
        let logits = self.apply_readout(&mut tape, &bm, &enc, *states.last().unwrap())?;
        Ok(readout::argmax(&tape, logits))
    }
}
