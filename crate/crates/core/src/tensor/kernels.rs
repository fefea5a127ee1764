//! Hot-loop f32 kernels.
//!
//! All loops use a fixed operation order so results are bit-identical run to
//! run within one build. Reductions accumulate in eight lanes so the
//! compiler can vectorize without reassociating floats.

const LANES: usize = 8;

/// Fixed-order lane-accumulated dot product.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / LANES;
    let mut acc = [0f32; LANES];
    for c in 0..chunks {
        let base = c * LANES;
        for l in 0..LANES {
            acc[l] = a[base + l].mul_add(b[base + l], acc[l]);
        }
    }
    let mut s = 0f32;
    for l in 0..LANES {
        s += acc[l];
    }
    for i in chunks * LANES..n {
        s = a[i].mul_add(b[i], s);
    }
    s
}

/// Fixed-order lane-accumulated sum.
pub fn sum(a: &[f32]) -> f32 {
    let n = a.len();
    let chunks = n / LANES;
    let mut acc = [0f32; LANES];
    for c in 0..chunks {
        let base = c * LANES;
        for l in 0..LANES {
            acc[l] += a[base + l];
        }
    }
    let mut s = 0f32;
    for l in 0..LANES {
        s += acc[l];
    }
    for i in chunks * LANES..n {
        s += a[i];
    }
    s
}

/// c += a @ b, with a: [m,k], b: [k,n], c: [m,n].
pub fn matmul_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] = aik.mul_add(brow[j], crow[j]);
            }
        }
    }
}

/// c = a @ b^T, with a: [m,k], b: [n,k], c: [m,n].
pub fn matmul_transb(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            crow[j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// c += a^T @ b, with a: [m,k], b: [m,n], c: [k,n].
pub fn matmul_transa_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            let crow = &mut c[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] = ail.mul_add(brow[j], crow[j]);
            }
        }
    }
}
