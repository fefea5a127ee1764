//! Named learnable tensors and their gradient buffers.

use std::collections::HashMap;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, TensorRef};

/// Index of a parameter within a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named parameters. Insertion order is creation
/// order and is the canonical order for checkpoints and optimizers.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter `{name}`"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Little-endian byte image of all parameter payloads in canonical order;
    /// used for bit-exactness checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_values() * 4);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }
}

/// Lazy binding of store parameters onto a tape: each parameter becomes at
/// most one leaf per tape, so weight sharing across recurrence steps is a
/// structural fact rather than a convention.
pub struct BoundParams {
    nodes: Vec<Option<TensorRef>>,
}

impl BoundParams {
    pub fn new(store: &ParameterStore) -> Self {
        BoundParams {
            nodes: vec![None; store.len()],
        }
    }

    pub fn node(&mut self, tape: &mut Tape, store: &ParameterStore, id: ParamId) -> TensorRef {
        if let Some(n) = self.nodes[id.0] {
            return n;
        }
        let t = store.get(id);
        let (r, c) = t.dims2();
        let n = if t.requires_grad() {
            tape.leaf_grad(r, c, t.data().to_vec())
        } else {
            tape.leaf(r, c, t.data().to_vec())
        };
        self.nodes[id.0] = Some(n);
        n
    }

    /// Accumulate `scale * grad` for every bound parameter into `out`.
    pub fn grads_into(&self, tape: &Tape, out: &mut Gradients, scale: f32) {
        for (pid, node) in self.nodes.iter().enumerate() {
            let Some(node) = node else { continue };
            let Some(g) = tape.grad(*node) else { continue };
            let dst = &mut out.data[pid];
            for (d, &v) in dst.iter_mut().zip(g) {
                *d += scale * v;
            }
        }
    }
}

/// Gradient accumulator parallel to a [`ParameterStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    data: Vec<Vec<f32>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParameterStore) -> Self {
        Gradients {
            data: store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.data {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.data[id.0]
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f32) {
        for (dst, src) in self.data.iter_mut().zip(&other.data) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn global_norm(&self) -> f32 {
        let mut s = 0.0f64;
        for g in &self.data {
            for &v in g {
                s += (v as f64) * (v as f64);
            }
        }
        (s as f32).sqrt()
    }

    /// Scale all gradients so the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f32) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in &mut self.data {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

// ── Initialization helpers ──────────────────────────────────────────

/// Standard normal samples via Box-Muller.
pub fn normal(rng: &mut Rng, n: usize, std: f32) -> Vec<f32> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f32 = rng.random::<f32>().max(1e-12);
        let u2: f32 = rng.random();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f32::consts::PI * u2).sin_cos();
        out.push(r * c * std);
        if out.len() < n {
            out.push(r * s * std);
        }
    }
    out
}

/// Glorot/Xavier uniform init for a [fan_in, fan_out] matrix.
pub fn xavier_uniform(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Vec<f32> {
    let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect()
}

/// Random orthogonal n-by-n matrix scaled so each row has norm sqrt(n):
/// mutually orthogonal identity embeddings with the same scale as unit
/// gaussian rows. Gram-Schmidt in f64 keeps the basis clean.
pub fn orthogonal_rows(rng: &mut Rng, n: usize) -> Vec<f32> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let cand: Vec<f64> = normal(rng, n, 1.0).iter().map(|&v| v as f64).collect();
        let mut v = cand;
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= dot * bi;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue; // degenerate draw, resample
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let scale = (n as f64).sqrt();
    basis
        .into_iter()
        .flat_map(|row| row.into_iter().map(move |x| (x * scale) as f32))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn store_roundtrip_and_order() {
        let mut s = ParameterStore::new();
        let a = s.add("w", Tensor::zeros(vec![2, 3]));
        let b = s.add("b", Tensor::filled(vec![3], 1.0));
        assert_eq!(s.name(a), "w");
        assert_eq!(s.id_of("b").unwrap(), b);
        assert!(s.id_of("nope").is_err());
        assert_eq!(s.total_values(), 9);
        let names: Vec<_> = s.iter().map(|(_, n, _)| n.to_string()).collect();
        assert_eq!(names, vec!["w", "b"]);
    }

    #[test]
    fn bound_params_register_once() {
        let mut s = ParameterStore::new();
        let w = s.add("w", Tensor::filled(vec![2], 3.0));
        let mut tape = Tape::new();
        let mut bp = BoundParams::new(&s);
        let n1 = bp.node(&mut tape, &s, w);
        let n2 = bp.node(&mut tape, &s, w);
        assert_eq!(n1, n2);
        assert_eq!(tape.num_nodes(), 1);
    }

    #[test]
    fn grad_clip_bounds_norm() {
        let mut s = ParameterStore::new();
        s.add("w", Tensor::zeros(vec![2]));
        let mut g = Gradients::zeros_like(&s);
        g.data[0] = vec![3.0, 4.0];
        g.clip_global_norm(1.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normal_moments_are_plausible() {
        let mut rng = rng_from_seed(1);
        let xs = normal(&mut rng, 20_000, 1.0);
        let mean: f32 = xs.iter().sum::<f32>() / xs.len() as f32;
        let var: f32 = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / xs.len() as f32;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
