//! Shuffled relational documents over a family tree.
//!
//! The fact chain follows an apex route: from the starting entity it
//! ascends `a` parent links to a common ancestor, then descends `b` child
//! links, with a + b = depth. The queried relation between the two chain
//! endpoints is decided purely by the signed offset a - b, so relation-word
//! counting and parity detection are useless; contradictory distractor
//! sentences over disjoint names pad the document, and every alternative
//! label feasible at a given depth shares the parity of the true label.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Relation classes; the classifier's label space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Parent,
    Child,
    Sibling,
    Grandparent,
    Grandchild,
}

pub const NUM_RELATIONS: usize = 5;

impl Relation {
    pub fn index(self) -> usize {
        match self {
            Relation::Parent => 0,
            Relation::Child => 1,
            Relation::Sibling => 2,
            Relation::Grandparent => 3,
            Relation::Grandchild => 4,
        }
    }

    pub fn from_index(i: usize) -> Option<Relation> {
        [
            Relation::Parent,
            Relation::Child,
            Relation::Sibling,
            Relation::Grandparent,
            Relation::Grandchild,
        ]
        .get(i)
        .copied()
    }

    /// Net generational offset of "A is the R of B", counted upward.
    pub fn offset(self) -> i32 {
        match self {
            Relation::Parent => 1,
            Relation::Child => -1,
            Relation::Sibling => 0,
            Relation::Grandparent => 2,
            Relation::Grandchild => -2,
        }
    }

    pub fn from_offset(off: i32) -> Option<Relation> {
        match off {
            1 => Some(Relation::Parent),
            -1 => Some(Relation::Child),
            0 => Some(Relation::Sibling),
            2 => Some(Relation::Grandparent),
            -2 => Some(Relation::Grandchild),
            _ => None,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Relation::Parent => "parent",
            Relation::Child => "child",
            Relation::Sibling => "sibling",
            Relation::Grandparent => "grandparent",
            Relation::Grandchild => "grandchild",
        }
    }
}

/// A single "X is the <rel> of Y" fact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub subject: String,
    pub relation: Relation,
    pub object: String,
}

impl Fact {
    pub fn sentence(&self) -> String {
        format!(
            "{} is the {} of {} .",
            self.subject,
            self.relation.word(),
            self.object
        )
    }
}

/// One relational-composition instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyInstance {
    /// Chain facts in path order (ascend, then descend); the oracle's input.
    pub facts: Vec<Fact>,
    /// Contradictory padding over names disjoint from the chain.
    pub distractors: Vec<Fact>,
    /// Rendered fact+distractor sentences, fully shuffled; the model's input.
    pub sentences: Vec<String>,
    /// (entity A, entity B): the document asks how A relates to B.
    pub query: (String, String),
    pub label: Relation,
    pub depth: usize,
    /// Ascending (parent) steps.
    pub a: usize,
    /// Descending (child) steps.
    pub b: usize,
}

/// Deterministic closed name pool (240 single-token names).
pub fn name_pool() -> Vec<String> {
    const FIRST: [&str; 16] = [
        "Ba", "Ce", "Do", "Fa", "Gi", "Ha", "Jo", "Ka", "Li", "Ma", "Ne", "Ola", "Pe", "Ra", "Sa",
        "Tu",
    ];
    const SECOND: [&str; 15] = [
        "bel", "dan", "dric", "fin", "gar", "lan", "lia", "mar", "mon", "nor", "ren", "rin", "ron",
        "ven", "vis",
    ];
    let mut names = Vec::with_capacity(FIRST.len() * SECOND.len());
    for f in FIRST {
        for s in SECOND {
            names.push(format!("{f}{s}"));
        }
    }
    names
}

/// Feasible (a, b) splits for a depth: a >= 1, b >= 0, a + b = depth, and the
/// net offset a - b inside the label set.
pub fn feasible_splits(depth: usize) -> Vec<(usize, usize)> {
    (1..=depth)
        .map(|a| (a, depth - a))
        .filter(|&(a, b)| (a as i32 - b as i32).abs() <= 2)
        .collect()
}

/// Labels reachable at a depth; all of them share the depth's parity.
pub fn feasible_labels(depth: usize) -> Vec<Relation> {
    feasible_splits(depth)
        .iter()
        .filter_map(|&(a, b)| Relation::from_offset(a as i32 - b as i32))
        .collect()
}

/// Generate one instance at the given chain depth.
pub fn gen_family(depth: usize, seed: u64) -> Result<FamilyInstance> {
    gen_family_inner(depth, seed, None)
}

/// Deterministic split rotation: slot k takes the k-th feasible (a, b)
/// split, giving exactly uniform class shares inside a balanced batch.
pub fn gen_family_with_slot(depth: usize, slot: usize, seed: u64) -> Result<FamilyInstance> {
    gen_family_inner(depth, seed, Some(slot))
}

fn gen_family_inner(depth: usize, seed: u64, slot: Option<usize>) -> Result<FamilyInstance> {
    if depth < 2 {
        return Err(Error::InfeasibleParams("depth must be >= 2".into()));
    }
    let splits = feasible_splits(depth);
    if splits.is_empty() {
        return Err(Error::InfeasibleParams(format!(
            "no feasible (a, b) split at depth {depth}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let pick = match slot {
        Some(k) => k % splits.len(),
        None => rng.random_range(0..splits.len()),
    };
    let (a, b) = splits[pick];

    let pool = name_pool();
    // Without-replacement sample: chain entities first, then distractor names.
    let distractor_count = rng.random_range(2..=2 * depth);
    let name_budget = depth + 1 + distractor_count + 2;
    let mut picked = Vec::with_capacity(name_budget);
    let mut used = vec![false; pool.len()];
    while picked.len() < name_budget {
        let i = rng.random_range(0..pool.len());
        if !used[i] {
            used[i] = true;
            picked.push(pool[i].clone());
        }
    }
    let chain: Vec<String> = picked[..depth + 1].to_vec();
    let extra_names: Vec<String> = picked[depth + 1..].to_vec();

    // Ascend a steps, descend b steps.
    let mut facts = Vec::with_capacity(depth);
    for i in 0..a {
        facts.push(Fact {
            subject: chain[i + 1].clone(),
            relation: Relation::Parent,
            object: chain[i].clone(),
        });
    }
    for j in a..depth {
        facts.push(Fact {
            subject: chain[j + 1].clone(),
            relation: Relation::Child,
            object: chain[j].clone(),
        });
    }

    // Distractors: random triples over the extra names; roughly half are
    // direct contradictions of an earlier distractor.
    let mut distractors: Vec<Fact> = Vec::with_capacity(distractor_count);
    for _ in 0..distractor_count {
        let contradict = !distractors.is_empty() && rng.random::<bool>();
        if contradict {
            let base = &distractors[rng.random_range(0..distractors.len())];
            let flipped = if rng.random() {
                // same pair, opposite relation word
                Fact {
                    subject: base.subject.clone(),
                    relation: if base.relation == Relation::Parent {
                        Relation::Child
                    } else {
                        Relation::Parent
                    },
                    object: base.object.clone(),
                }
            } else {
                // reversed pair, same relation word
                Fact {
                    subject: base.object.clone(),
                    relation: base.relation,
                    object: base.subject.clone(),
                }
            };
            distractors.push(flipped);
        } else {
            let x = rng.random_range(0..extra_names.len());
            let mut y = rng.random_range(0..extra_names.len());
            while y == x {
                y = rng.random_range(0..extra_names.len());
            }
            distractors.push(Fact {
                subject: extra_names[x].clone(),
                relation: if rng.random() {
                    Relation::Parent
                } else {
                    Relation::Child
                },
                object: extra_names[y].clone(),
            });
        }
    }

    // Render and shuffle the full document body.
    let mut sentences: Vec<String> = facts
        .iter()
        .chain(distractors.iter())
        .map(Fact::sentence)
        .collect();
    for i in (1..sentences.len()).rev() {
        let j = rng.random_range(0..=i);
        sentences.swap(i, j);
    }

    let label = Relation::from_offset(a as i32 - b as i32)
        .expect("split filtered to the label set");
    let inst = FamilyInstance {
        facts,
        distractors,
        sentences,
        // A is the end of the walk, B the start: walking B -> apex -> A
        // accumulates offset a - b, which is A's relation to B.
        query: (chain[depth].clone(), chain[0].clone()),
        label,
        depth,
        a,
        b,
    };
    debug_assert_eq!(offset_oracle(&inst).unwrap(), label);
    Ok(inst)
}

/// Walk the unshuffled chain: +1 per parent step, -1 per child step; map the
/// net offset to a relation.
pub fn offset_oracle(inst: &FamilyInstance) -> Result<Relation> {
    let mut current = inst.query.1.clone();
    let mut offset = 0i32;
    for fact in &inst.facts {
        if fact.object != current {
            return Err(Error::GeneratorContract(format!(
                "broken chain: fact about `{}` while standing at `{}`",
                fact.object, current
            )));
        }
        offset += match fact.relation {
            Relation::Parent => 1,
            Relation::Child => -1,
            other => {
                return Err(Error::GeneratorContract(format!(
                    "chain fact uses non-chain relation `{}`",
                    other.word()
                )))
            }
        };
        current = fact.subject.clone();
    }
    if current != inst.query.0 {
        return Err(Error::GeneratorContract(format!(
            "chain ends at `{current}`, query asks about `{}`",
            inst.query.0
        )));
    }
    Relation::from_offset(offset).ok_or_else(|| {
        Error::GeneratorContract(format!("net offset {offset} outside the label set"))
    })
}

/// Re-verify stored fields: oracle label, split arithmetic, disjoint
/// distractors, parity discipline, and sentence bag consistency.
pub fn verify(inst: &FamilyInstance) -> bool {
    if inst.a + inst.b != inst.depth || inst.a < 1 {
        return false;
    }
    match offset_oracle(inst) {
        Ok(rel) if rel == inst.label => {}
        _ => return false,
    }
    let chain_names: std::collections::HashSet<&str> = inst
        .facts
        .iter()
        .flat_map(|f| [f.subject.as_str(), f.object.as_str()])
        .collect();
    for d in &inst.distractors {
        if chain_names.contains(d.subject.as_str()) || chain_names.contains(d.object.as_str()) {
            return false;
        }
    }
    // Parity discipline: every feasible alternative label at this depth has
    // the same offset parity as the truth.
    let parity = inst.label.offset().rem_euclid(2);
    if feasible_labels(inst.depth)
        .iter()
        .any(|r| r.offset().rem_euclid(2) != parity)
    {
        return false;
    }
    // Shuffled sentences are exactly the rendered facts + distractors.
    let mut want: Vec<String> = inst
        .facts
        .iter()
        .chain(inst.distractors.iter())
        .map(Fact::sentence)
        .collect();
    let mut got = inst.sentences.clone();
    want.sort();
    got.sort();
    want == got
}

/// Confusion counts over the relation classes, with parity-restricted views.
#[derive(Debug, Clone, Serialize)]
pub struct ConfusionReport {
    /// counts[truth][predicted]
    pub counts: Vec<Vec<usize>>,
    pub accuracy: f64,
    /// Errors whose predicted label shares the truth's offset parity.
    pub within_parity_errors: usize,
    /// Errors that cross parity (impossible to excuse as a hard negative).
    pub cross_parity_errors: usize,
}

/// Compute the confusion structure of predictions against truths, split
/// along the parity axes that define hard negatives.
pub fn parity_confusion(labels: &[Relation], predictions: &[Relation]) -> ConfusionReport {
    assert_eq!(labels.len(), predictions.len());
    let mut counts = vec![vec![0usize; NUM_RELATIONS]; NUM_RELATIONS];
    let mut correct = 0;
    let mut within = 0;
    let mut cross = 0;
    for (&y, &p) in labels.iter().zip(predictions) {
        counts[y.index()][p.index()] += 1;
        if y == p {
            correct += 1;
        } else if y.offset().rem_euclid(2) == p.offset().rem_euclid(2) {
            within += 1;
        } else {
            cross += 1;
        }
    }
    ConfusionReport {
        counts,
        accuracy: if labels.is_empty() {
            0.0
        } else {
            correct as f64 / labels.len() as f64
        },
        within_parity_errors: within,
        cross_parity_errors: cross,
    }
}
