//! Decoding heads: from the final hidden state to task logits and loss.

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorRef};

/// Tape-bound readout parameters; variant follows the interface.
#[derive(Debug, Clone, Copy)]
pub enum ReadoutParams {
    /// Two-layer MLP over the concatenated (source, target) rows.
    PairMlp {
        w1: TensorRef,
        b1: TensorRef,
        w2: TensorRef,
        b2: TensorRef,
    },
    /// Linear classifier over the [CLS] row.
    ClsLinear { w: TensorRef, b: TensorRef },
    /// Two-layer MLP over the concatenated query-entity rows.
    PointerMlp {
        w1: TensorRef,
        b1: TensorRef,
        w2: TensorRef,
        b2: TensorRef,
    },
}

fn two_row_mlp(
    tape: &mut Tape,
    h: TensorRef,
    first: usize,
    second: usize,
    w1: TensorRef,
    b1: TensorRef,
    w2: TensorRef,
    b2: TensorRef,
) -> Result<TensorRef> {
    let rows = tape.rows(h);
    for idx in [first, second] {
        if idx >= rows {
            return Err(Error::IndexOutOfRange {
                what: "readout row",
                index: idx,
                len: rows,
            });
        }
    }
    let picked = tape.gather_rows(h, &[first as u32, second as u32])?;
    let d = tape.cols(h);
    let cat = tape.reshape(picked, 1, 2 * d)?;
    let hid = tape.matmul(cat, w1)?;
    let hid = tape.add_row(hid, b1)?;
    let act = tape.gelu(hid);
    let logits = tape.matmul(act, w2)?;
    tape.add_row(logits, b2)
}

/// Logits over {unreachable, reachable} from the source and target rows.
pub fn pairwise_readout(
    tape: &mut Tape,
    h: TensorRef,
    s: usize,
    t: usize,
    w1: TensorRef,
    b1: TensorRef,
    w2: TensorRef,
    b2: TensorRef,
) -> Result<TensorRef> {
    if s == t {
        return Err(Error::GeneratorContract(
            "pairwise readout requires distinct source and target".into(),
        ));
    }
    two_row_mlp(tape, h, s, t, w1, b1, w2, b2)
}

/// Logits over {false, true} from the [CLS] row.
pub fn cls_readout(
    tape: &mut Tape,
    h: TensorRef,
    w: TensorRef,
    b: TensorRef,
) -> Result<TensorRef> {
    let cls = tape.gather_rows(h, &[0])?;
    let logits = tape.matmul(cls, w)?;
    tape.add_row(logits, b)
}

/// Logits over the relation classes from the query-entity rows.
pub fn pointer_readout(
    tape: &mut Tape,
    h: TensorRef,
    p: usize,
    q: usize,
    w1: TensorRef,
    b1: TensorRef,
    w2: TensorRef,
    b2: TensorRef,
) -> Result<TensorRef> {
    two_row_mlp(tape, h, p, q, w1, b1, w2, b2)
}

/// Final-step-only cross-entropy; the silent objective is exactly one
/// readout and one loss, attached to H^(T).
pub fn silent_loss(tape: &mut Tape, logits: TensorRef, label: usize) -> Result<TensorRef> {
    tape.cross_entropy(logits, label)
}

/// Class argmax of a logits node.
pub fn argmax(tape: &Tape, logits: TensorRef) -> usize {
    let v = tape.value(logits);
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}
