//! Householder QR and one-sided Jacobi SVD for small dense matrices.

use super::DenseTensor;
use crate::error::{Error, Result};

fn require_matrix(m: &DenseTensor, what: &str) -> Result<(usize, usize)> {
    if m.rank() != 2 {
        return Err(Error::arg(format!(
            "{what} needs a rank-2 tensor, got shape {:?}",
            m.shape()
        )));
    }
    Ok((m.shape()[0], m.shape()[1]))
}

/// Reduced QR: `q` is rows x k with orthonormal columns, `r` is k x cols upper
/// triangular (trapezoidal when wide) with a non-negative diagonal, k = min(rows, cols).
pub fn qr_reduced(m: &DenseTensor) -> Result<(DenseTensor, DenseTensor)> {
    let (rows, cols) = require_matrix(m, "qr_reduced")?;
    let k = rows.min(cols);
    let mut a = m.to_vec();
    let mut reflectors: Vec<Option<Vec<f64>>> = Vec::with_capacity(k);

    for j in 0..k {
        let norm = (j..rows)
            .map(|i| a[i * cols + j].powi(2))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            reflectors.push(None);
            continue;
        }
        let x0 = a[j * cols + j];
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (j..rows).map(|i| a[i * cols + j]).collect();
        v[0] -= alpha;
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            reflectors.push(None);
            continue;
        }
        v.iter_mut().for_each(|x| *x /= vnorm);
        for c in j..cols {
            let dot: f64 = v
                .iter()
                .enumerate()
                .map(|(t, vi)| vi * a[(j + t) * cols + c])
                .sum();
            for (t, vi) in v.iter().enumerate() {
                a[(j + t) * cols + c] -= 2.0 * vi * dot;
            }
        }
        reflectors.push(Some(v));
    }

    let mut r = vec![0.0; k * cols];
    for i in 0..k {
        for c in i..cols {
            r[i * cols + c] = a[i * cols + c];
        }
    }

    // q = H_0 H_1 ... H_{k-1} applied to the first k columns of the identity
    let mut q = vec![0.0; rows * k];
    for i in 0..k {
        q[i * k + i] = 1.0;
    }
    for j in (0..k).rev() {
        if let Some(v) = &reflectors[j] {
            for c in 0..k {
                let dot: f64 = v
                    .iter()
                    .enumerate()
                    .map(|(t, vi)| vi * q[(j + t) * k + c])
                    .sum();
                for (t, vi) in v.iter().enumerate() {
                    q[(j + t) * k + c] -= 2.0 * vi * dot;
                }
            }
        }
    }

    for i in 0..k {
        if r[i * cols + i] < 0.0 {
            for c in i..cols {
                r[i * cols + c] = -r[i * cols + c];
            }
            for row in 0..rows {
                q[row * k + i] = -q[row * k + i];
            }
        }
    }

    Ok((
        DenseTensor::from_parts(vec![rows, k], q),
        DenseTensor::from_parts(vec![k, cols], r),
    ))
}

/// Singular value decomposition `m ≈ u · diag(s) · v`.
///
/// `u` is rows x k, `v` is k x cols (orthonormal rows), `s` is non-increasing.
/// `discarded_weight` is the 2-norm of the singular values dropped by
/// truncation (zero for a full decomposition).
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: DenseTensor,
    pub s: Vec<f64>,
    pub v: DenseTensor,
    pub discarded_weight: f64,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// Keeps the leading `min(chi, rank)` triplets; ties at the cut keep the
    /// earlier entries of the sorted order.
    pub fn truncate(&self, chi: usize) -> Result<SvdResult> {
        if chi < 1 {
            return Err(Error::arg("chi must be at least 1"));
        }
        let k0 = self.s.len();
        let k = chi.min(k0);
        let rows = self.u.shape()[0];
        let cols = self.v.shape()[1];
        let u = if k == k0 {
            self.u.clone()
        } else {
            let ud = self.u.data();
            let mut out = Vec::with_capacity(rows * k);
            for r in 0..rows {
                out.extend_from_slice(&ud[r * k0..r * k0 + k]);
            }
            DenseTensor::from_parts(vec![rows, k], out)
        };
        let v = DenseTensor::from_parts(vec![k, cols], self.v.data()[..k * cols].to_vec());
        let tail: f64 = self.s[k..].iter().map(|x| x * x).sum();
        Ok(SvdResult {
            u,
            s: self.s[..k].to_vec(),
            v,
            discarded_weight: (self.discarded_weight.powi(2) + tail).sqrt(),
        })
    }

    /// `u · diag(s) · v` as a dense matrix.
    pub fn reconstruct(&self) -> DenseTensor {
        let k = self.s.len();
        let rows = self.u.shape()[0];
        let ud = self.u.data();
        let mut us = vec![0.0; rows * k];
        for r in 0..rows {
            for c in 0..k {
                us[r * k + c] = ud[r * k + c] * self.s[c];
            }
        }
        DenseTensor::from_parts(vec![rows, k], us)
            .matmul(&self.v)
            .expect("consistent factor shapes")
    }
}

/// Thin SVD with all min(rows, cols) singular triplets.
pub fn svd_full(m: &DenseTensor) -> Result<SvdResult> {
    let (rows, cols) = require_matrix(m, "svd")?;
    if rows >= cols {
        let (u, s, vt) = jacobi_tall(m.data(), rows, cols);
        Ok(SvdResult {
            u: DenseTensor::from_parts(vec![rows, cols], u),
            s,
            v: DenseTensor::from_parts(vec![cols, cols], vt),
            discarded_weight: 0.0,
        })
    } else {
        // m^T = u' s v'  =>  m = v'^T s u'^T
        let mt = m.t();
        let (u, s, vt) = jacobi_tall(mt.data(), cols, rows);
        let u_t = DenseTensor::from_parts(vec![cols, rows], u).t();
        let vt_t = DenseTensor::from_parts(vec![rows, rows], vt).t();
        Ok(SvdResult {
            u: vt_t,
            s,
            v: u_t,
            discarded_weight: 0.0,
        })
    }
}

/// Truncated SVD keeping at most `chi` singular triplets.
pub fn svd_truncated(m: &DenseTensor, chi: usize) -> Result<SvdResult> {
    if chi < 1 {
        return Err(Error::arg("chi must be at least 1"));
    }
    svd_full(m)?.truncate(chi)
}

/// One-sided (Hestenes) Jacobi on a row-major rows x cols matrix, rows >= cols.
/// Returns (u rows x cols, s, vt cols x cols), all row-major, s descending.
fn jacobi_tall(a: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    const TOL: f64 = 1e-15;
    const MAX_SWEEPS: usize = 80;

    // column-major working copies: column j of `w` is w[j*rows..(j+1)*rows]
    let mut w = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            w[c * rows + r] = a[r * cols + c];
        }
    }
    let mut v = vec![0.0; cols * cols];
    for i in 0..cols {
        v[i * cols + i] = 1.0;
    }
    let mut norms: Vec<f64> = (0..cols)
        .map(|j| w[j * rows..(j + 1) * rows].iter().map(|x| x * x).sum())
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let (cp, cq) = column_pair(&mut w, rows, p, q);
                let gamma: f64 = cp.iter().zip(cq.iter()).map(|(x, y)| x * y).sum();
                if gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let mut na = 0.0;
                let mut nb = 0.0;
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let xp = c * *x - s * *y;
                    let yq = s * *x + c * *y;
                    *x = xp;
                    *y = yq;
                    na += xp * xp;
                    nb += yq * yq;
                }
                norms[p] = na;
                norms[q] = nb;
                let (vp, vq) = column_pair(&mut v, cols, p, q);
                for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
                    let xp = c * *x - s * *y;
                    let yq = s * *x + c * *y;
                    *x = xp;
                    *y = yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sv: Vec<(f64, usize)> = (0..cols)
        .map(|j| {
            (
                w[j * rows..(j + 1) * rows]
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt(),
                j,
            )
        })
        .collect();
    // stable sort keeps the original column order among exact ties
    sv.sort_by(|x, y| y.0.total_cmp(&x.0));

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut s = Vec::with_capacity(cols);
    let mut vt = vec![0.0; cols * cols];
    let mut missing = Vec::new();
    for (k, &(sigma, j)) in sv.iter().enumerate() {
        s.push(sigma);
        for i in 0..cols {
            // `v` is column-major too: column j is v[j*cols..]
            vt[k * cols + i] = v[j * cols + i];
        }
        if sigma > f64::MIN_POSITIVE * 1e4 {
            u_cols.push(
                w[j * rows..(j + 1) * rows]
                    .iter()
                    .map(|x| x / sigma)
                    .collect(),
            );
        } else {
            u_cols.push(vec![0.0; rows]);
            missing.push(k);
        }
    }
    if !missing.is_empty() {
        complete_orthonormal(&mut u_cols, &missing, rows);
    }

    let mut u = vec![0.0; rows * cols];
    for (k, col) in u_cols.iter().enumerate() {
        for r in 0..rows {
            u[r * cols + k] = col[r];
        }
    }
    (u, s, vt)
}

fn column_pair(buf: &mut [f64], len: usize, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(p < q);
    let (lo, hi) = buf.split_at_mut(q * len);
    (&mut lo[p * len..(p + 1) * len], &mut hi[..len])
}

/// Fills the listed columns with unit vectors orthogonal to every other column.
fn complete_orthonormal(cols: &mut [Vec<f64>], missing: &[usize], rows: usize) {
    let mut candidate = 0usize;
    for &k in missing {
        loop {
            assert!(candidate < rows, "cannot complete an orthonormal basis");
            let mut e = vec![0.0; rows];
            e[candidate] = 1.0;
            candidate += 1;
            // two rounds of Gram-Schmidt for stability
            for _ in 0..2 {
                for (j, c) in cols.iter().enumerate() {
                    if j == k || (missing.contains(&j) && c.iter().all(|x| *x == 0.0)) {
                        continue;
                    }
                    let d: f64 = c.iter().zip(e.iter()).map(|(x, y)| x * y).sum();
                    for (ei, ci) in e.iter_mut().zip(c.iter()) {
                        *ei -= d * ci;
                    }
                }
            }
            let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-8 {
                cols[k] = e.into_iter().map(|x| x / n).collect();
                break;
            }
        }
    }
}
