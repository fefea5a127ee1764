//! Nested boolean expressions with controlled operator-nesting depth.
//!
//! Depth counts operator nesting along the deepest root-to-leaf path;
//! constants are depth 0. Serialization always parenthesizes binary
//! operators and writes negation as a bare `!`, e.g. `!((T&F)|(!(T|F)))`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{child_seed, rng_from_seed, Rng};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BoolExpr {
    Const(bool),
    Not(Box<BoolExpr>),
    And(Box<BoolExpr>, Box<BoolExpr>),
    Or(Box<BoolExpr>, Box<BoolExpr>),
}

impl BoolExpr {
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        self.write(&mut out);
        out
    }

    fn write(&self, out: &mut String) {
        match self {
            BoolExpr::Const(true) => out.push('T'),
            BoolExpr::Const(false) => out.push('F'),
            BoolExpr::Not(c) => {
                out.push('!');
                c.write(out);
            }
            BoolExpr::And(l, r) => {
                out.push('(');
                l.write(out);
                out.push('&');
                r.write(out);
                out.push(')');
            }
            BoolExpr::Or(l, r) => {
                out.push('(');
                l.write(out);
                out.push('|');
                r.write(out);
                out.push(')');
            }
        }
    }

    pub fn parse(src: &str) -> Result<BoolExpr> {
        let bytes = src.as_bytes();
        let (expr, used) = parse_at(bytes, 0)?;
        if used != bytes.len() {
            return Err(Error::GeneratorContract(format!(
                "trailing input after position {used} in `{src}`"
            )));
        }
        Ok(expr)
    }
}

fn parse_at(b: &[u8], pos: usize) -> Result<(BoolExpr, usize)> {
    let err = |what: &str, at: usize| {
        Error::GeneratorContract(format!("parse error at byte {at}: {what}"))
    };
    match b.get(pos) {
        Some(b'T') => Ok((BoolExpr::Const(true), pos + 1)),
        Some(b'F') => Ok((BoolExpr::Const(false), pos + 1)),
        Some(b'!') => {
            let (child, next) = parse_at(b, pos + 1)?;
            Ok((BoolExpr::Not(Box::new(child)), next))
        }
        Some(b'(') => {
            let (left, next) = parse_at(b, pos + 1)?;
            let op = *b.get(next).ok_or_else(|| err("missing operator", next))?;
            if op == b')' {
                // redundant grouping parens around a sub-expression
                return Ok((left, next + 1));
            }
            let (right, next) = parse_at(b, next + 1)?;
            match b.get(next) {
                Some(b')') => {}
                _ => return Err(err("missing closing paren", next)),
            }
            let expr = match op {
                b'&' => BoolExpr::And(Box::new(left), Box::new(right)),
                b'|' => BoolExpr::Or(Box::new(left), Box::new(right)),
                _ => return Err(err("unknown operator", next)),
            };
            Ok((expr, next + 1))
        }
        _ => Err(err("unexpected token", pos)),
    }
}

/// Recursive truth evaluation.
pub fn eval_oracle(e: &BoolExpr) -> bool {
    match e {
        BoolExpr::Const(v) => *v,
        BoolExpr::Not(c) => !eval_oracle(c),
        BoolExpr::And(l, r) => eval_oracle(l) && eval_oracle(r),
        BoolExpr::Or(l, r) => eval_oracle(l) || eval_oracle(r),
    }
}

/// Max operator nesting; constants are 0.
pub fn depth_oracle(e: &BoolExpr) -> usize {
    match e {
        BoolExpr::Const(_) => 0,
        BoolExpr::Not(c) => 1 + depth_oracle(c),
        BoolExpr::And(l, r) | BoolExpr::Or(l, r) => 1 + depth_oracle(l).max(depth_oracle(r)),
    }
}

/// One expression-evaluation instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoolExprInstance {
    pub src: String,
    pub depth: usize,
    #[serde(with = "super::graph::label_as_int")]
    pub label: bool,
}

impl BoolExprInstance {
    pub fn ast(&self) -> Result<BoolExpr> {
        BoolExpr::parse(&self.src)
    }
}

/// Generate an instance with a coin-flipped truth label.
pub fn gen_expr(depth: usize, seed: u64) -> Result<BoolExprInstance> {
    let mut rng = rng_from_seed(seed);
    let label = rng.random::<bool>();
    gen_expr_labeled(depth, label, child_seed(seed, 1))
}

/// Rejection-sample an expression of exactly `depth` with the given label.
pub fn gen_expr_labeled(depth: usize, label: bool, seed: u64) -> Result<BoolExprInstance> {
    if depth < 1 {
        return Err(Error::InfeasibleParams("depth must be >= 1".into()));
    }
    for attempt in 0..256 {
        let mut rng = rng_from_seed(child_seed(seed, attempt));
        let ast = build(depth, &mut rng);
        debug_assert_eq!(depth_oracle(&ast), depth);
        if eval_oracle(&ast) == label {
            return Ok(BoolExprInstance {
                src: ast.serialize(),
                depth,
                label,
            });
        }
    }
    Err(Error::GeneratorContract(format!(
        "no depth-{depth} expression with label {label} after 256 attempts"
    )))
}

/// Build an expression of exactly `target` nesting. One operand of every
/// binary node is forced to carry the remaining depth; the other is kept
/// shallow so instance length grows linearly with depth.
fn build(target: usize, rng: &mut Rng) -> BoolExpr {
    if target == 0 {
        return BoolExpr::Const(rng.random());
    }
    match rng.random_range(0..3u32) {
        0 => BoolExpr::Not(Box::new(build(target - 1, rng))),
        op => {
            let deep = build(target - 1, rng);
            // Geometric-ish shallow side, capped by the remaining budget.
            let mut side = 0;
            while side < target - 1 && rng.random::<f32>() < 0.4 {
                side += 1;
            }
            let shallow = build(side.min(2), rng);
            let (l, r) = if rng.random() {
                (deep, shallow)
            } else {
                (shallow, deep)
            };
            if op == 1 {
                BoolExpr::And(Box::new(l), Box::new(r))
            } else {
                BoolExpr::Or(Box::new(l), Box::new(r))
            }
        }
    }
}

/// Re-verify stored fields against the oracles.
pub fn verify(inst: &BoolExprInstance) -> bool {
    match inst.ast() {
        Ok(ast) => {
            ast.serialize() == inst.src
                && depth_oracle(&ast) == inst.depth
                && eval_oracle(&ast) == inst.label
        }
        Err(_) => false,
    }
}
