//! Compositional task generators with exact oracles.

pub mod family;
pub mod graph;
pub mod logic;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub use family::{gen_family, offset_oracle, parity_confusion, FamilyInstance, Relation};
pub use graph::{bfs_oracle, gen_graph, gen_graph_labeled, GraphInstance};
pub use logic::{depth_oracle, eval_oracle, gen_expr, gen_expr_labeled, BoolExpr, BoolExprInstance};

/// Which task family an instance or model config belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Graph,
    Logic,
    Family,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Graph => "graph",
            TaskKind::Logic => "logic",
            TaskKind::Family => "family",
        }
    }

    /// Name of the task's complexity axis.
    pub fn complexity_axis(self) -> &'static str {
        match self {
            TaskKind::Graph => "hops",
            TaskKind::Logic => "depth",
            TaskKind::Family => "depth",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            TaskKind::Graph | TaskKind::Logic => 2,
            TaskKind::Family => family::NUM_RELATIONS,
        }
    }

    pub fn parse(s: &str) -> Option<TaskKind> {
        match s {
            "graph" => Some(TaskKind::Graph),
            "logic" => Some(TaskKind::Logic),
            "family" => Some(TaskKind::Family),
            _ => None,
        }
    }
}

/// Tagged union of the three instance types.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskInstance {
    Graph(GraphInstance),
    Logic(BoolExprInstance),
    Family(FamilyInstance),
}

impl TaskInstance {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskInstance::Graph(_) => TaskKind::Graph,
            TaskInstance::Logic(_) => TaskKind::Logic,
            TaskInstance::Family(_) => TaskKind::Family,
        }
    }

    /// Class index of the ground-truth label.
    pub fn label_index(&self) -> usize {
        match self {
            TaskInstance::Graph(g) => g.label as usize,
            TaskInstance::Logic(e) => e.label as usize,
            TaskInstance::Family(f) => f.label.index(),
        }
    }

    /// The instance's position on its task's complexity axis.
    pub fn complexity(&self) -> usize {
        match self {
            // Negatives carry the planted difficulty of their construction,
            // which the hops field no longer records; bucket callers track it.
            TaskInstance::Graph(g) => g.hops.unwrap_or(0),
            TaskInstance::Logic(e) => e.depth,
            TaskInstance::Family(f) => f.depth,
        }
    }
}

/// Generate one instance of the given task at the given complexity.
pub fn generate(kind: TaskKind, complexity: usize, seed: u64) -> Result<TaskInstance> {
    Ok(match kind {
        TaskKind::Graph => TaskInstance::Graph(gen_graph(
            complexity,
            graph::default_n_for_hops(complexity),
            seed,
        )?),
        TaskKind::Logic => TaskInstance::Logic(gen_expr(complexity, seed)?),
        TaskKind::Family => TaskInstance::Family(gen_family(complexity, seed)?),
    })
}

/// Generate with an explicitly balanced label where the task is binary:
/// `slot` parity picks the label, giving exact 50/50 within a batch.
pub fn generate_balanced(kind: TaskKind, complexity: usize, slot: usize, seed: u64) -> Result<TaskInstance> {
    Ok(match kind {
        TaskKind::Graph => {
            let label = slot % 2 == 0;
            TaskInstance::Graph(gen_graph_labeled(
                complexity,
                graph::default_n_for_hops(complexity),
                label,
                seed,
            )?)
        }
        TaskKind::Logic => {
            let label = slot % 2 == 0;
            TaskInstance::Logic(gen_expr_labeled(complexity, label, seed)?)
        }
        TaskKind::Family => {
            TaskInstance::Family(family::gen_family_with_slot(complexity, slot, seed)?)
        }
    })
}
