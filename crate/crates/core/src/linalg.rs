//! Sparse 2×2-block operators, conjugate gradients and a few small dense
//! routines (symmetric eigenvalues, power iteration).

use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math::sqrt;
use crate::{Error, Result};

/// 2×2 block stored row-major: `[a00, a01, a10, a11]`.
pub type Block = [f64; 4];

/// Symmetric-pattern sparse matrix of 2×2 blocks, one sorted row per site.
#[derive(Clone, Debug, Default)]
pub struct BlockSparse {
    rows: Vec<Vec<(usize, Block)>>,
}

impl BlockSparse {
    pub fn new(n_sites: usize) -> Self {
        BlockSparse { rows: vec![Vec::new(); n_sites] }
    }

    pub fn n_sites(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        2 * self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[(usize, Block)] {
        &self.rows[i]
    }

    pub fn add(&mut self, i: usize, j: usize, blk: &Block) {
        let row = &mut self.rows[i];
        match row.binary_search_by_key(&j, |e| e.0) {
            Ok(pos) => {
                let b = &mut row[pos].1;
                for k in 0..4 {
                    b[k] += blk[k];
                }
            }
            Err(pos) => row.insert(pos, (j, *blk)),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> Block {
        match self.rows[i].binary_search_by_key(&j, |e| e.0) {
            Ok(pos) => self.rows[i][pos].1,
            Err(_) => [0.0; 4],
        }
    }

    pub fn nnz_blocks(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim());
        for (i, row) in self.rows.iter().enumerate() {
            let (mut a, mut b) = (0.0, 0.0);
            for &(j, ref blk) in row {
                let (xj0, xj1) = (x[2 * j], x[2 * j + 1]);
                a += blk[0] * xj0 + blk[1] * xj1;
                b += blk[2] * xj0 + blk[3] * xj1;
            }
            y[2 * i] = a;
            y[2 * i + 1] = b;
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim()];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn scaled(&self, s: f64) -> BlockSparse {
        let rows = self
            .rows
            .iter()
            .map(|r| r.iter().map(|&(j, b)| (j, [s * b[0], s * b[1], s * b[2], s * b[3]])).collect())
            .collect();
        BlockSparse { rows }
    }

    /// `self - other` as a new operator.
    pub fn difference(&self, other: &BlockSparse) -> BlockSparse {
        let mut out = self.clone();
        for (i, row) in other.rows.iter().enumerate() {
            for &(j, b) in row {
                out.add(i, j, &[-b[0], -b[1], -b[2], -b[3]]);
            }
        }
        out
    }

    /// Largest entrywise asymmetry `max |H_ab - H_ba|`.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, b) in row {
                let t = self.get(j, i);
                worst = worst
                    .max((b[0] - t[0]).abs())
                    .max((b[1] - t[2]).abs())
                    .max((b[2] - t[1]).abs())
                    .max((b[3] - t[3]).abs());
            }
        }
        worst
    }

    /// Largest entry of the blockwise row sums (acoustic sum rule residual).
    pub fn max_row_sum(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for row in &self.rows {
            let mut s = [0.0; 4];
            for &(_, b) in row {
                for k in 0..4 {
                    s[k] += b[k];
                }
            }
            for v in s {
                worst = worst.max(v.abs());
            }
        }
        worst
    }

    pub fn max_abs(&self) -> f64 {
        self.rows.iter().flat_map(|r| r.iter()).flat_map(|(_, b)| b.iter()).fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Dense row-major copy; only sensible for small systems.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.dim();
        let mut d = vec![0.0; n * n];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, b) in row {
                d[(2 * i) * n + 2 * j] += b[0];
                d[(2 * i) * n + 2 * j + 1] += b[1];
                d[(2 * i + 1) * n + 2 * j] += b[2];
                d[(2 * i + 1) * n + 2 * j + 1] += b[3];
            }
        }
        d
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    sqrt(dot(a, a))
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Removes rigid translations from a flattened 2D field (zero mean per component).
pub fn project_translations(v: &mut [f64]) {
    let n = v.len() / 2;
    if n == 0 {
        return;
    }
    let (mut mx, mut my) = (0.0, 0.0);
    for c in v.chunks_exact(2) {
        mx += c[0];
        my += c[1];
    }
    mx /= n as f64;
    my /= n as f64;
    for c in v.chunks_exact_mut(2) {
        c[0] -= mx;
        c[1] -= my;
    }
}

#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when a direction with `pᵀAp <= 0` was met; holds `(p, pᵀAp / pᵀp)`.
    pub negative_curvature: Option<(Vec<f64>, f64)>,
}

/// Conjugate gradients for `A x = b` with `A` symmetric. When `project` is set
/// every vector is kept orthogonal to rigid translations, which makes the
/// singular lattice operators usable. Stops at `‖r‖ <= tol`.
pub fn conjugate_gradient<F>(apply: F, b: &[f64], tol: f64, max_iter: usize, project: bool) -> CgOutcome
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    if project {
        project_translations(&mut r);
    }
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    if sqrt(rr) <= tol {
        return CgOutcome { x, iterations: 0, converged: true, negative_curvature: None };
    }
    for it in 0..max_iter {
        apply(&p, &mut ap);
        if project {
            project_translations(&mut ap);
        }
        let pap = dot(&p, &ap);
        let pp = dot(&p, &p);
        if pap <= 0.0 {
            return CgOutcome { x, iterations: it, converged: false, negative_curvature: Some((p.clone(), pap / pp)) };
        }
        let alpha = rr / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        let rr_new = dot(&r, &r);
        if sqrt(rr_new) <= tol {
            return CgOutcome { x, iterations: it + 1, converged: true, negative_curvature: None };
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
    }
    CgOutcome { x, iterations: max_iter, converged: false, negative_curvature: None }
}

/// Deterministic pseudo-random unit vector.
pub fn random_unit_vector(n: usize, seed: u64, project: bool) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    if project {
        project_translations(&mut v);
    }
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    v
}

/// Spectral norm of a symmetric operator by power iteration on `‖A v‖`.
/// Returns `PowerIterationNotConverged` if the relative change does not drop
/// below `tol` within `max_iter` steps.
pub fn spectral_norm<F>(apply: F, n: usize, seed: u64, tol: f64, max_iter: usize) -> Result<f64>
where
    F: Fn(&[f64], &mut [f64]),
{
    let mut v = random_unit_vector(n, seed, false);
    let mut w = vec![0.0; n];
    let mut est = 0.0;
    for _ in 0..max_iter {
        apply(&v, &mut w);
        let nw = norm(&w);
        if nw == 0.0 {
            return Ok(0.0);
        }
        let change = (nw - est).abs();
        est = nw;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / nw;
        }
        if change <= tol * nw {
            return Ok(est);
        }
    }
    Err(Error::PowerIterationNotConverged)
}

/// Eigenvalues (ascending) and, optionally, eigenvectors of a dense symmetric
/// row-major matrix by cyclic Jacobi rotations. Eigenvectors are returned as
/// columns of a row-major `n×n` matrix.
pub fn symmetric_eigen(a: &[f64], n: usize, want_vectors: bool) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    if a.len() != n * n {
        return Err(Error::DimensionMismatch(alloc::format!("expected {}x{} matrix", n, n)));
    }
    // Rotations assume exact symmetry; round-off asymmetry would stall them.
    let mut m = a.to_vec();
    for p in 0..n {
        for q in (p + 1)..n {
            let s = 0.5 * (m[p * n + q] + m[q * n + p]);
            m[p * n + q] = s;
            m[q * n + p] = s;
        }
    }
    let mut v = if want_vectors {
        let mut id = vec![0.0; n * n];
        for i in 0..n {
            id[i * n + i] = 1.0;
        }
        Some(id)
    } else {
        None
    };
    let frob2 = m.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off <= 1e-28 * frob2 {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&i, &j| m[i * n + i].total_cmp(&m[j * n + j]));
            let vals = idx.iter().map(|&i| m[i * n + i]).collect();
            let vecs = v.map(|v| {
                let mut out = vec![0.0; n * n];
                for (c, &i) in idx.iter().enumerate() {
                    for r in 0..n {
                        out[r * n + c] = v[r * n + i];
                    }
                }
                out
            });
            return Ok((vals, vecs));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                if let Some(v) = v.as_mut() {
                    for k in 0..n {
                        let vkp = v[k * n + p];
                        let vkq = v[k * n + q];
                        v[k * n + p] = c * vkp - s * vkq;
                        v[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }
    Err(Error::EigensolverFailed("Jacobi sweeps did not converge".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // [[2,1],[1,2]] -> 1, 3
        let (vals, vecs) = symmetric_eigen(&[2.0, 1.0, 1.0, 2.0], 2, true).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-14 && (vals[1] - 3.0).abs() < 1e-14);
        let v = vecs.unwrap();
        assert!((v[0].abs() - v[2].abs()).abs() < 1e-14);
    }

    #[test]
    fn cg_solves_spd_system() {
        let a = [4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0];
        let b = [1.0, 2.0, 3.0];
        let out = conjugate_gradient(
            |x, y| {
                for i in 0..3 {
                    y[i] = (0..3).map(|j| a[i * 3 + j] * x[j]).sum();
                }
            },
            &b,
            1e-14,
            10,
            false,
        );
        assert!(out.converged);
        for i in 0..3 {
            let r: f64 = (0..3).map(|j| a[i * 3 + j] * out.x[j]).sum::<f64>() - b[i];
            assert!(r.abs() < 1e-12);
        }
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let d = [1.0, -5.0, 2.0, 0.5];
        let s = spectral_norm(
            |x, y| {
                for i in 0..4 {
                    y[i] = d[i] * x[i];
                }
            },
            4,
            3,
            1e-12,
            500,
        )
        .unwrap();
        assert!((s - 5.0).abs() < 1e-9);
    }
}
