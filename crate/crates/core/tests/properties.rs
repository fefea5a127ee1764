//! Property tests over the substrate and the generators.

use std::sync::Arc;

use proptest::prelude::*;

use loopformer::taskgen::logic::{depth_oracle, eval_oracle, BoolExpr};
use loopformer::tensor::{AttnMask, Tape};

// Random expression trees up to a modest size.
fn expr_strategy() -> impl Strategy<Value = BoolExpr> {
    let leaf = any::<bool>().prop_map(BoolExpr::Const);
    leaf.prop_recursive(6, 64, 3, |inner| {
        prop_oneof![
            inner.clone().prop_map(|c| BoolExpr::Not(Box::new(c))),
            (inner.clone(), inner.clone())
                .prop_map(|(l, r)| BoolExpr::And(Box::new(l), Box::new(r))),
            (inner.clone(), inner).prop_map(|(l, r)| BoolExpr::Or(Box::new(l), Box::new(r))),
        ]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// parse(serialize(ast)) reproduces the tree exactly.
    #[test]
    fn expr_string_roundtrip(ast in expr_strategy()) {
        let src = ast.serialize();
        let back = BoolExpr::parse(&src).unwrap();
        prop_assert_eq!(&back, &ast);
        // and the oracles agree across the roundtrip
        prop_assert_eq!(eval_oracle(&back), eval_oracle(&ast));
        prop_assert_eq!(depth_oracle(&back), depth_oracle(&ast));
    }

    /// Masked softmax rows: masked entries exactly zero, unmasked rows sum
    /// to one, all outputs within [0, 1].
    #[test]
    fn softmax_mask_semantics(
        n in 2usize..8,
        raw in proptest::collection::vec(-50.0f32..50.0, 64),
        mask_bits in proptest::collection::vec(any::<bool>(), 64),
    ) {
        let scores: Vec<f32> = raw.iter().take(n * n).copied().collect();
        // diagonal forced open: the self-loop convention
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                allowed[i * n + j] = i == j || mask_bits[i * n + j];
            }
        }
        let mask = AttnMask::from_allowed(n, allowed.clone()).unwrap();
        let mut tape = Tape::new();
        let s = tape.leaf(n, n, scores);
        let p = tape.softmax_rows(s, Some(Arc::new(mask))).unwrap();
        let v = tape.value(p);
        for i in 0..n {
            let mut sum = 0.0f64;
            for j in 0..n {
                let x = v[i * n + j];
                prop_assert!((0.0..=1.0).contains(&x));
                if !allowed[i * n + j] {
                    prop_assert_eq!(x.to_bits(), 0.0f32.to_bits());
                }
                sum += x as f64;
            }
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    /// The gate is a convex mix: outputs stay inside the elementwise
    /// envelope of the two states (with equal states it is exact identity,
    /// covered by unit tests).
    #[test]
    fn gate_output_stays_in_envelope(
        vals in proptest::collection::vec(-3.0f32..3.0, 24),
        z_logits in proptest::collection::vec(-6.0f32..6.0, 12),
    ) {
        let d = 12;
        let mut tape = Tape::new();
        let h_prev = tape.leaf(1, d, vals[..d].to_vec());
        let h_tilde = tape.leaf(1, d, vals[d..].to_vec());
        let z_in = tape.leaf(1, d, z_logits);
        let z = tape.sigmoid(z_in);
        let diff = tape.sub(h_tilde, h_prev).unwrap();
        let scaled = tape.mul(z, diff).unwrap();
        let out = tape.add(h_prev, scaled).unwrap();
        for j in 0..d {
            let lo = vals[j].min(vals[d + j]) - 1e-5;
            let hi = vals[j].max(vals[d + j]) + 1e-5;
            let o = tape.value(out)[j];
            prop_assert!(o >= lo && o <= hi, "dim {}: {} outside [{}, {}]", j, o, lo, hi);
        }
    }

    /// Checkpoint container: bit-exact round-trip for arbitrary finite
    /// payloads, including signed zero and subnormals.
    #[test]
    fn checkpoint_roundtrip_bits(
        a in proptest::collection::vec(proptest::num::f32::ANY, 1..40),
        b in proptest::collection::vec(proptest::num::f32::ANY, 1..40),
    ) {
        // NaN payloads are excluded: parameters are always finite.
        prop_assume!(a.iter().all(|v| !v.is_nan()) && b.iter().all(|v| !v.is_nan()));
        let mut store = loopformer::params::ParameterStore::new();
        let la = a.len();
        let lb = b.len();
        store.add("a", loopformer::tensor::Tensor::new(vec![la], a).unwrap());
        store.add("b", loopformer::tensor::Tensor::new(vec![lb], b).unwrap());
        let bytes = loopformer::checkpoint::to_bytes(&store);
        let back = loopformer::checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(store.to_bytes(), back.to_bytes());
    }
}
