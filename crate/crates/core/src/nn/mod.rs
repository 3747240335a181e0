//! Small numerical kernels shared by the LM and the probes.

mod optim;

pub use optim::{AdamW, AdamWConfig, LrSchedule, ParamGroup};

/// `C = alpha · op(A) · op(B) + beta · C` on row-major buffers.
///
/// `op(A)` is `m × k`, `op(B)` is `k × n`. `lda`/`ldb`/`ldc` are the row
/// strides of the buffers as stored (before transposition).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    lda: usize,
    trans_a: bool,
    b: &[f32],
    ldb: usize,
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, lda) } else { (lda, 1) };
    let (rsb, csb) = if trans_b { (1, ldb) } else { (ldb, 1) };
    let a_need = if trans_a {
        (k.max(1) - 1) * lda + m
    } else {
        (m - 1) * lda + k
    };
    let b_need = if trans_b {
        (n - 1) * ldb + k
    } else {
        (k.max(1) - 1) * ldb + n
    };
    assert!(k == 0 || a.len() >= a_need, "gemm: A too short");
    assert!(k == 0 || b.len() >= b_need, "gemm: B too short");
    assert!(c.len() >= (m - 1) * ldc + n, "gemm: C too short");
    // SAFETY: the asserts above bound every index the kernel touches; the
    // buffers do not alias because `c` is borrowed mutably.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Adds `bias` to every row of the `rows × bias.len()` matrix `x`.
pub fn add_bias(x: &mut [f32], bias: &[f32]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Column sums of `x` accumulated into `out`.
pub fn accumulate_col_sums(x: &[f32], out: &mut [f32]) {
    for row in x.chunks_exact(out.len()) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Cross-entropy of `logits` against `target`. Overwrites `logits` with the
/// gradient `softmax − onehot` scaled by `scale` and returns the loss.
pub fn cross_entropy_grad(logits: &mut [f32], target: usize, scale: f32) -> f32 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = logits.iter().map(|v| (v - max).exp()).sum();
    let log_z = max + sum.ln();
    let loss = log_z - logits[target];
    for v in logits.iter_mut() {
        *v = (*v - log_z).exp() * scale;
    }
    logits[target] -= scale;
    loss
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
