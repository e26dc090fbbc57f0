//! Backward rules for the matrix decompositions.

use crate::tensor::{DenseTensor, SvdResult};

/// Regularized reciprocal `x / (x^2 + eps)`; equals `1/x` up to O(eps/x^2).
#[inline]
fn reg_inv(x: f64, eps: f64) -> f64 {
    x / (x * x + eps)
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> DenseTensor {
    DenseTensor::from_parts(vec![rows, cols], data)
}

fn mm(a: &DenseTensor, b: &DenseTensor) -> DenseTensor {
    a.matmul(b).expect("conformant matrices")
}

/// Pads an (r x c) matrix with zero columns up to `cols`.
fn pad_cols(t: &DenseTensor, cols: usize) -> DenseTensor {
    let (r, c) = (t.rows(), t.cols());
    if c == cols {
        return t.clone();
    }
    let mut out = vec![0.0; r * cols];
    for i in 0..r {
        out[i * cols..i * cols + c].copy_from_slice(&t.data()[i * c..(i + 1) * c]);
    }
    mat(r, cols, out)
}

/// Gradient of a truncated SVD with respect to its input matrix.
///
/// `full` is the complete thin decomposition computed in the forward pass; the
/// truncated outputs are its leading `gu.cols()` (or `gs.len()`) triplets, so
/// upstream gradients are zero-padded to full size and the discarded subspace
/// enters through the spectrum gaps. Every `1/(a - b)` style factor is
/// replaced by `(a - b)/((a - b)^2 + eps)`, which keeps the result finite for
/// degenerate spectra.
///
/// `gv` is the gradient with respect to the `v` factor as returned (k x cols).
pub fn svd_backward(
    full: &SvdResult,
    gu: Option<&DenseTensor>,
    gs: Option<&[f64]>,
    gv: Option<&DenseTensor>,
    eps: f64,
) -> DenseTensor {
    let u = &full.u;
    let s = &full.s;
    let vt = &full.v;
    let m = u.rows();
    let n = vt.cols();
    let k0 = s.len();
    let v = vt.t();

    let gu_full = gu.map(|g| pad_cols(g, k0));
    let gv_full = gv.map(|g| pad_cols(&g.t(), k0));

    let j = gu_full.as_ref().map(|g| mm(&u.t(), g));
    let kk = gv_full.as_ref().map(|g| mm(&v.t(), g));

    let mut x = vec![0.0; k0 * k0];
    for a in 0..k0 {
        for b in 0..k0 {
            if a == b {
                continue;
            }
            let mut num = 0.0;
            if let Some(j) = &j {
                num += (j.get(&[a, b]) - j.get(&[b, a])) * s[b];
            }
            if let Some(kk) = &kk {
                num += s[a] * (kk.get(&[a, b]) - kk.get(&[b, a]));
            }
            if num != 0.0 {
                x[a * k0 + b] = num * reg_inv(s[b] - s[a], eps) * reg_inv(s[b] + s[a], eps);
            }
        }
    }
    if let Some(gs) = gs {
        for (a, g) in gs.iter().enumerate() {
            x[a * k0 + a] += g;
        }
    }
    let mut ga = mm(&mm(u, &mat(k0, k0, x)), vt);

    let sinv: Vec<f64> = s.iter().map(|&x| reg_inv(x, eps)).collect();
    if let Some(gu) = &gu_full {
        if m > k0 {
            // (I - U U^T) gU S^-1 V^T
            let proj = gu.sub(&mm(u, &mm(&u.t(), gu))).expect("same shape");
            let scaled = scale_cols(&proj, &sinv);
            ga = ga.add(&mm(&scaled, vt)).expect("same shape");
        }
    }
    if let Some(gv) = &gv_full {
        if n > k0 {
            // U S^-1 gV^T (I - V V^T)
            let proj = gv.sub(&mm(&v, &mm(vt, gv))).expect("same shape");
            let scaled = scale_cols(&proj, &sinv);
            ga = ga.add(&mm(u, &scaled.t())).expect("same shape");
        }
    }
    ga
}

fn scale_cols(t: &DenseTensor, c: &[f64]) -> DenseTensor {
    let (r, k) = (t.rows(), t.cols());
    let d = t.data();
    let mut out = Vec::with_capacity(r * k);
    for i in 0..r {
        for j in 0..k {
            out.push(d[i * k + j] * c[j]);
        }
    }
    mat(r, k, out)
}

/// Outcome of a QR backward pass.
pub struct QrGrad {
    pub grad: DenseTensor,
    /// Set when `r` has a (near-)zero diagonal entry, i.e. the input was
    /// rank deficient and the gradient may be inaccurate.
    pub ill_conditioned: bool,
}

/// Gradient of the reduced QR factorization with respect to its input.
pub fn qr_backward(
    a: &DenseTensor,
    q: &DenseTensor,
    r: &DenseTensor,
    gq: Option<&DenseTensor>,
    gr: Option<&DenseTensor>,
) -> QrGrad {
    let (m, n) = (a.rows(), a.cols());
    let gq = gq.cloned().unwrap_or_else(|| DenseTensor::zeros(q.shape()));
    let gr = gr.cloned().unwrap_or_else(|| DenseTensor::zeros(r.shape()));
    if m >= n {
        return qr_backward_tall(q, r, &gq, &gr);
    }

    // wide: a = [x | y] with x square; r = [u | q^T y]
    let split = |t: &DenseTensor, at: usize| -> (DenseTensor, DenseTensor) {
        let (rows, cols) = (t.rows(), t.cols());
        let d = t.data();
        let mut left = Vec::with_capacity(rows * at);
        let mut right = Vec::with_capacity(rows * (cols - at));
        for i in 0..rows {
            left.extend_from_slice(&d[i * cols..i * cols + at]);
            right.extend_from_slice(&d[i * cols + at..(i + 1) * cols]);
        }
        (mat(rows, at, left), mat(rows, cols - at, right))
    };
    let (_, y) = split(a, m);
    let (u, _) = split(r, m);
    let (gu, gvv) = split(&gr, m);
    let gy = mm(q, &gvv);
    let gq_eff = gq.add(&mm(&y, &gvv.t())).expect("same shape");
    let inner = qr_backward_tall(q, &u, &gq_eff, &gu);
    let gx = inner.grad;
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        out.extend_from_slice(&gx.data()[i * m..(i + 1) * m]);
        out.extend_from_slice(&gy.data()[i * (n - m)..(i + 1) * (n - m)]);
    }
    QrGrad {
        grad: mat(m, n, out),
        ill_conditioned: inner.ill_conditioned,
    }
}

/// m >= n case: `ga = (gq + q copyltu(M)) r^{-T}` with `M = r gr^T - gq^T q`.
fn qr_backward_tall(
    q: &DenseTensor,
    r: &DenseTensor,
    gq: &DenseTensor,
    gr: &DenseTensor,
) -> QrGrad {
    let n = r.rows();
    let m_mat = mm(r, &gr.t()).sub(&mm(&gq.t(), q)).expect("same shape");
    let md = m_mat.data();
    let mut sym = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = if i >= j { md[i * n + j] } else { md[j * n + i] };
        }
    }
    let b = gq.add(&mm(q, &mat(n, n, sym))).expect("same shape");

    let rd = r.data();
    let diag_max = (0..n).map(|i| rd[i * n + i].abs()).fold(0.0, f64::max);
    let ill = (0..n).any(|i| rd[i * n + i].abs() <= 1e-12 * diag_max.max(f64::MIN_POSITIVE));

    // solve X r^T = b row by row: r x^T = b_row^T (upper-triangular back substitution)
    let rows = b.rows();
    let bd = b.data();
    let mut out = vec![0.0; rows * n];
    for row in 0..rows {
        let rhs = &bd[row * n..(row + 1) * n];
        let x = &mut out[row * n..(row + 1) * n];
        for i in (0..n).rev() {
            let mut acc = rhs[i];
            for j in i + 1..n {
                acc -= rd[i * n + j] * x[j];
            }
            x[i] = acc / rd[i * n + i];
        }
    }
    QrGrad {
        grad: mat(rows, n, out),
        ill_conditioned: ill,
    }
}
