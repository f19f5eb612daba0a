//! Weighted linear least squares for the surrogate coefficients, solved by
//! column-pivoted QR with truncation of small pivots.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::lattice::{DefectKind, DefectedLattice};
use crate::math::{sqrt, Vec2};
use crate::surrogate::{build_basis, Basis, BasisSpec, SurrogateModel};
use crate::training::{rmse, Observation, Tag};
use crate::{Error, Result};

/// Default truncation threshold of the rank-revealing QR.
pub const DEFAULT_RTOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KindWeights {
    pub kind: DefectKind,
    pub w_e: f64,
    pub w_f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_e: f64,
    pub w_f: f64,
    /// Overrides for training domains containing a given defect kind.
    pub per_kind: Vec<KindWeights>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_e: 100.0, w_f: 1.0, per_kind: Vec::new() }
    }
}

impl LossWeights {
    /// Mixed interstitial/vacancy training: more weight on the interstitial.
    pub fn mixed() -> Self {
        LossWeights {
            w_e: 100.0,
            w_f: 1.0,
            per_kind: vec![
                KindWeights { kind: DefectKind::Interstitial, w_e: 100.0, w_f: 10.0 },
                KindWeights { kind: DefectKind::Vacancy, w_e: 10.0, w_f: 1.0 },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |e: f64, f: f64| e >= 0.0 && f >= 0.0 && e + f > 0.0 && e.is_finite() && f.is_finite();
        if !ok(self.w_e, self.w_f) || !self.per_kind.iter().all(|k| ok(k.w_e, k.w_f)) {
            return Err(Error::InvalidSpec("weights must be nonnegative with W_E + W_F > 0".into()));
        }
        Ok(())
    }

    /// `(W_E, W_F)` for a training lattice.
    pub fn for_lattice(&self, lattice: &DefectedLattice) -> (f64, f64) {
        let kind = lattice.defects().defects.first().map(|d| d.kind);
        self.per_kind.iter().find(|k| Some(k.kind) == kind).map(|k| (k.w_e, k.w_f)).unwrap_or((self.w_e, self.w_f))
    }
}

/// Observations from one training domain.
#[derive(Clone, Copy, Debug)]
pub struct TrainingData<'a> {
    pub lattice: &'a DefectedLattice,
    pub samples: &'a [Observation],
}

/// Dense column-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut m = DenseMatrix::zeros(rows.len(), cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::DimensionMismatch("ragged rows".into()));
            }
            for (j, &v) in r.iter().enumerate() {
                m.set(i, j, v);
            }
        }
        Ok(m)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.rows + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[j * self.rows + i] = v;
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                for (yi, a) in y.iter_mut().zip(self.column(j)) {
                    *yi += a * xj;
                }
            }
        }
        y
    }
}

/// Unweighted rows of one observation: the energy row and `2n` force rows
/// (row-major, `#B` columns each), plus `Σ_ℓ B(g_ℓ(x))` subtraction applied.
struct RowBuilder<'a> {
    basis: &'a Basis,
    lattice: &'a DefectedLattice,
    reference: Vec<f64>,
}

impl<'a> RowBuilder<'a> {
    fn new(basis: &'a Basis, lattice: &'a DefectedLattice) -> Result<Self> {
        let nb = basis.len();
        let mut reference = vec![0.0; nb];
        let zero = vec![Vec2::ZERO; lattice.n_sites()];
        let mut g = Vec::new();
        let mut sites = Vec::new();
        for i in 0..lattice.n_sites() {
            environment(lattice, &zero, i, basis.spec().cutoff, &mut g, &mut sites);
            for (r, v) in reference.iter_mut().zip(basis.design_row(&g)?) {
                *r += v;
            }
        }
        Ok(RowBuilder { basis, lattice, reference })
    }

    /// Energy row into `energy`, force rows (`-∂/∂u`) into `forces[(2s+a)·#B + b]`.
    fn rows(&self, u: &[Vec2], energy: &mut [f64], forces: &mut [f64]) -> Result<()> {
        let nb = self.basis.len();
        energy.copy_from_slice(&self.reference);
        energy.iter_mut().for_each(|e| *e = -*e);
        forces.iter_mut().for_each(|f| *f = 0.0);
        let mut g = Vec::new();
        let mut sites = Vec::new();
        let mut vals = vec![0.0; nb];
        let mut grads = Vec::new();
        for i in 0..self.lattice.n_sites() {
            environment(self.lattice, u, i, self.basis.spec().cutoff, &mut g, &mut sites);
            let k = g.len();
            grads.clear();
            grads.resize(nb * k, Vec2::ZERO);
            self.basis.design_row_gradient(&g, &mut vals, &mut grads)?;
            for (e, v) in energy.iter_mut().zip(&vals) {
                *e += v;
            }
            for b in 0..nb {
                for (j, &s) in sites.iter().enumerate() {
                    let d = grads[b * k + j];
                    forces[(2 * s) * nb + b] -= d.x;
                    forces[(2 * s + 1) * nb + b] -= d.y;
                    forces[(2 * i) * nb + b] += d.x;
                    forces[(2 * i + 1) * nb + b] += d.y;
                }
            }
        }
        Ok(())
    }
}

fn environment(lattice: &DefectedLattice, u: &[Vec2], i: usize, rc: f64, g: &mut Vec<Vec2>, sites: &mut Vec<usize>) {
    g.clear();
    sites.clear();
    let rc2 = rc * rc;
    for nb in lattice.neighbors(i) {
        let y = nb.bond + u[nb.site] - u[i];
        if y.norm2() < rc2 {
            g.push(y);
            sites.push(nb.site);
        }
    }
}

/// Weighted design matrix and targets: per sample one energy row scaled by
/// `√W_E` followed by `2n` force rows scaled by `√W_F`.
pub fn assemble(data: &[TrainingData<'_>], spec: &BasisSpec, weights: &LossWeights) -> Result<(DenseMatrix, Vec<f64>)> {
    weights.validate()?;
    let basis = build_basis(spec)?;
    let nb = basis.len();
    let total: usize = data.iter().map(|d| d.samples.len() * (1 + 2 * d.lattice.n_sites())).sum();
    let mut a = DenseMatrix::zeros(total, nb);
    let mut y = vec![0.0; total];
    let mut row = 0;
    for d in data {
        let (we, wf) = weights.for_lattice(d.lattice);
        let (se, sf) = (sqrt(we), sqrt(wf));
        let builder = RowBuilder::new(&basis, d.lattice)?;
        let n = d.lattice.n_sites();
        let mut er = vec![0.0; nb];
        let mut fr = vec![0.0; 2 * n * nb];
        for obs in d.samples {
            check_observation(d.lattice, obs)?;
            builder.rows(&obs.u.values, &mut er, &mut fr)?;
            for b in 0..nb {
                a.set(row, b, se * er[b]);
            }
            y[row] = se * obs.energy;
            row += 1;
            for c in 0..2 * n {
                for b in 0..nb {
                    a.set(row, b, sf * fr[c * nb + b]);
                }
                y[row] = sf * obs.forces[c / 2].get(c % 2);
                row += 1;
            }
        }
    }
    Ok((a, y))
}

fn check_observation(lattice: &DefectedLattice, obs: &Observation) -> Result<()> {
    if obs.u.len() != lattice.n_sites() || obs.forces.len() != lattice.n_sites() {
        return Err(Error::DimensionMismatch(alloc::format!(
            "observation has {} sites, training lattice has {}",
            obs.u.len(),
            lattice.n_sites()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RrqrSolution {
    pub coefficients: Vec<f64>,
    pub rank: usize,
    /// `‖A x − b‖²`.
    pub residual: f64,
}

/// Least squares by Householder QR with column pivoting. Columns whose pivot
/// falls below `rtol · |R_00|` are truncated (their coefficients are zero).
pub fn solve_rrqr(a: &DenseMatrix, b: &[f64], rtol: f64) -> Result<RrqrSolution> {
    if a.rows == 0 || a.cols == 0 {
        return Err(Error::DimensionMismatch("empty design matrix".into()));
    }
    if b.len() != a.rows {
        return Err(Error::DimensionMismatch(alloc::format!("{} rows but {} targets", a.rows, b.len())));
    }
    if !(rtol > 0.0 && rtol < 1.0) {
        return Err(Error::InvalidSpec("rtol must lie in (0, 1)".into()));
    }
    let (m, n) = (a.rows, a.cols);
    let mut r = a.data.clone();
    let mut qtb = b.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    let steps = m.min(n);
    let mut rank = steps;
    let mut r00 = 0.0;
    let mut v = vec![0.0; m];
    for k in 0..steps {
        // pivot: largest remaining column norm, lowest index on ties
        let mut best = k;
        let mut best_norm = -1.0;
        for j in k..n {
            let col = &r[j * m + k..(j + 1) * m];
            let nrm: f64 = col.iter().map(|x| x * x).sum();
            if nrm > best_norm {
                best_norm = nrm;
                best = j;
            }
        }
        if best != k {
            for i in 0..m {
                r.swap(k * m + i, best * m + i);
            }
            perm.swap(k, best);
        }
        let alpha = sqrt(best_norm.max(0.0));
        if k == 0 {
            r00 = alpha;
            if r00 == 0.0 {
                return Err(Error::AllColumnsTruncated);
            }
        }
        if alpha < rtol * r00 {
            rank = k;
            break;
        }
        // Householder vector for column k, rows k..m
        let x0 = r[k * m + k];
        let beta = if x0 >= 0.0 { -alpha } else { alpha };
        for i in k..m {
            v[i] = r[k * m + i];
        }
        v[k] = x0 - beta;
        let vnorm2: f64 = v[k..m].iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for j in (k + 1)..n {
                let col = &mut r[j * m..(j + 1) * m];
                let s: f64 = v[k..m].iter().zip(&col[k..m]).map(|(a, b)| a * b).sum();
                let f = 2.0 * s / vnorm2;
                for i in k..m {
                    col[i] -= f * v[i];
                }
            }
            let s: f64 = v[k..m].iter().zip(&qtb[k..m]).map(|(a, b)| a * b).sum();
            let f = 2.0 * s / vnorm2;
            for i in k..m {
                qtb[i] -= f * v[i];
            }
        }
        r[k * m + k] = beta;
        for i in (k + 1)..m {
            r[k * m + i] = 0.0;
        }
    }
    // back substitution on the leading rank × rank block
    let mut z = vec![0.0; rank];
    for i in (0..rank).rev() {
        let mut s = qtb[i];
        for j in (i + 1)..rank {
            s -= r[j * m + i] * z[j];
        }
        z[i] = s / r[i * m + i];
    }
    let mut x = vec![0.0; n];
    for (i, &zi) in z.iter().enumerate() {
        x[perm[i]] = zi;
    }
    let residual = qtb[rank..].iter().map(|t| t * t).sum();
    Ok(RrqrSolution { coefficients: x, rank, residual })
}

/// Running triangular factor of `[A | b]`, updated one block of rows at a
/// time so the full design matrix is never stored.
#[derive(Clone, Debug)]
pub struct QrAccumulator {
    n: usize,
    /// Upper-triangular `(n+1) × (n+1)`, row-major.
    r: Vec<f64>,
    rows_seen: usize,
}

impl QrAccumulator {
    pub fn new(cols: usize) -> Self {
        let n1 = cols + 1;
        QrAccumulator { n: cols, r: vec![0.0; n1 * n1], rows_seen: 0 }
    }

    /// Appends rows `[a_i | b_i]` given row-major (`cols + 1` entries each).
    pub fn push_rows(&mut self, block: &mut [f64]) {
        let n1 = self.n + 1;
        let k = block.len() / n1;
        self.rows_seen += k;
        for j in 0..n1 {
            // reflect (R[j, j], block[:, j]) onto R[j, j]
            let rjj = self.r[j * n1 + j];
            let mut s2 = rjj * rjj;
            for i in 0..k {
                let x = block[i * n1 + j];
                s2 += x * x;
            }
            let tail2 = s2 - rjj * rjj;
            if tail2 == 0.0 {
                continue;
            }
            let alpha = sqrt(s2);
            let beta = if rjj >= 0.0 { -alpha } else { alpha };
            let v0 = rjj - beta;
            let vnorm2 = v0 * v0 + tail2;
            for c in (j + 1)..n1 {
                let mut s = v0 * self.r[j * n1 + c];
                for i in 0..k {
                    s += block[i * n1 + j] * block[i * n1 + c];
                }
                let f = 2.0 * s / vnorm2;
                self.r[j * n1 + c] -= f * v0;
                for i in 0..k {
                    block[i * n1 + c] -= f * block[i * n1 + j];
                }
            }
            self.r[j * n1 + j] = beta;
            for i in 0..k {
                block[i * n1 + j] = 0.0;
            }
        }
    }

    pub fn rows_seen(&self) -> usize {
        self.rows_seen
    }

    /// Solves the accumulated problem with [`solve_rrqr`] on the triangular
    /// factor; the residual includes the part already eliminated.
    pub fn solve(&self, rtol: f64) -> Result<RrqrSolution> {
        let n = self.n;
        let n1 = n + 1;
        let mut a = DenseMatrix::zeros(n, n);
        let mut b = vec![0.0; n];
        for i in 0..n {
            for j in i..n {
                a.set(i, j, self.r[i * n1 + j]);
            }
            b[i] = self.r[i * n1 + n];
        }
        let mut sol = solve_rrqr(&a, &b, rtol)?;
        let tail = self.r[n * n1 + n];
        sol.residual += tail * tail;
        Ok(sol)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub model: SurrogateModel,
    pub effective_rank: usize,
    pub residual_loss: f64,
    pub train_rmse_e: f64,
    pub train_rmse_f: f64,
    /// `None` without test observations.
    pub test_rmse: Option<(f64, f64)>,
}

/// Fits on the `train`-tagged observations and reports RMSE on both splits.
pub fn fit(data: &[TrainingData<'_>], spec: &BasisSpec, weights: &LossWeights, rtol: f64) -> Result<FitResult> {
    weights.validate()?;
    let basis = build_basis(spec)?;
    let nb = basis.len();
    let n1 = nb + 1;
    let mut acc = QrAccumulator::new(nb);
    let mut any = false;
    for d in data {
        let (we, wf) = weights.for_lattice(d.lattice);
        let (se, sf) = (sqrt(we), sqrt(wf));
        let builder = RowBuilder::new(&basis, d.lattice)?;
        let n = d.lattice.n_sites();
        let mut er = vec![0.0; nb];
        let mut fr = vec![0.0; 2 * n * nb];
        let mut block = vec![0.0; (1 + 2 * n) * n1];
        for obs in d.samples.iter().filter(|o| o.tag == Tag::Train) {
            check_observation(d.lattice, obs)?;
            any = true;
            builder.rows(&obs.u.values, &mut er, &mut fr)?;
            for b in 0..nb {
                block[b] = se * er[b];
            }
            block[nb] = se * obs.energy;
            for c in 0..2 * n {
                let row = &mut block[(c + 1) * n1..(c + 2) * n1];
                for b in 0..nb {
                    row[b] = sf * fr[c * nb + b];
                }
                row[nb] = sf * obs.forces[c / 2].get(c % 2);
            }
            acc.push_rows(&mut block);
        }
    }
    if !any {
        return Err(Error::DimensionMismatch("no training observations".into()));
    }
    let sol = acc.solve(rtol)?;
    let model = SurrogateModel::new(basis, sol.coefficients)?;
    let mut train_e = 0.0;
    let mut train_f = 0.0;
    let mut test_e = 0.0;
    let mut test_f = 0.0;
    let (mut n_train, mut n_test) = (0usize, 0usize);
    for d in data {
        let tr: Vec<&Observation> = d.samples.iter().filter(|o| o.tag == Tag::Train).collect();
        let te: Vec<&Observation> = d.samples.iter().filter(|o| o.tag == Tag::Test).collect();
        let (e, f) = rmse(d.lattice, &model, &tr)?;
        train_e += e * e * tr.len() as f64;
        train_f += f * f * tr.len() as f64;
        n_train += tr.len();
        let (e, f) = rmse(d.lattice, &model, &te)?;
        test_e += e * e * te.len() as f64;
        test_f += f * f * te.len() as f64;
        n_test += te.len();
    }
    Ok(FitResult {
        model,
        effective_rank: sol.rank,
        residual_loss: sol.residual,
        train_rmse_e: sqrt(train_e / n_train as f64),
        train_rmse_f: sqrt(train_f / n_train as f64),
        test_rmse: (n_test > 0).then(|| (sqrt(test_e / n_test as f64), sqrt(test_f / n_test as f64))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrate::MinimizerConfig;
    use crate::lattice::BravaisSpec;
    use crate::potential::{calibrate_r0, Assembler, EamToyPotential, SitePotential};
    use crate::training::{make_training_domain, sample_configs, TrainingDomain};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(m: usize, n: usize, seed: u64) -> (DenseMatrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = DenseMatrix::zeros(m, n);
        a.data.iter_mut().for_each(|x| *x = rng.random::<f64>() - 0.5);
        let b = (0..m).map(|_| rng.random::<f64>() - 0.5).collect();
        (a, b)
    }

    /// Normal equations solved by Gaussian elimination with partial pivoting.
    fn normal_equations(a: &DenseMatrix, b: &[f64]) -> Vec<f64> {
        let n = a.cols;
        let mut g = vec![vec![0.0; n + 1]; n];
        for i in 0..n {
            for j in 0..n {
                g[i][j] = a.column(i).iter().zip(a.column(j)).map(|(x, y)| x * y).sum();
            }
            g[i][n] = a.column(i).iter().zip(b).map(|(x, y)| x * y).sum();
        }
        for k in 0..n {
            let p = (k..n).max_by(|&i, &j| g[i][k].abs().total_cmp(&g[j][k].abs())).unwrap();
            g.swap(k, p);
            for i in (k + 1)..n {
                let f = g[i][k] / g[k][k];
                for j in k..=n {
                    g[i][j] -= f * g[k][j];
                }
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| g[i][j] * x[j]).sum();
            x[i] = (g[i][n] - s) / g[i][i];
        }
        x
    }

    #[test]
    fn rrqr_matches_normal_equations() {
        for seed in 0..20 {
            let (a, b) = random_matrix(10 + seed as usize, 3 + (seed as usize % 4), seed);
            let x = solve_rrqr(&a, &b, DEFAULT_RTOL).unwrap();
            let y = normal_equations(&a, &b);
            assert_eq!(x.rank, a.cols);
            let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (p, q) in x.coefficients.iter().zip(&y) {
                assert!((p - q).abs() < 1e-8 * scale);
            }
        }
    }

    #[test]
    fn duplicated_column_is_truncated() {
        let (mut a, b) = random_matrix(12, 4, 7);
        let full = solve_rrqr(&a, &b, DEFAULT_RTOL).unwrap();
        let mut dup = DenseMatrix::zeros(12, 5);
        for j in 0..4 {
            for i in 0..12 {
                dup.set(i, j, a.get(i, j));
            }
        }
        for i in 0..12 {
            dup.set(i, 4, a.get(i, 1));
        }
        let sol = solve_rrqr(&dup, &b, DEFAULT_RTOL).unwrap();
        assert_eq!(sol.rank, 4);
        assert!((sol.residual - full.residual).abs() < 1e-12 * full.residual.max(1.0));
        a.data.iter_mut().for_each(|x| *x = 0.0);
        assert_eq!(solve_rrqr(&a, &b, DEFAULT_RTOL).unwrap_err(), Error::AllColumnsTruncated);
    }

    #[test]
    fn consistent_target_has_no_residual() {
        let (a, _) = random_matrix(15, 5, 3);
        let x: Vec<f64> = (0..5).map(|i| i as f64 - 2.0).collect();
        let b = a.matvec(&x);
        let sol = solve_rrqr(&a, &b, DEFAULT_RTOL).unwrap();
        assert!(sol.residual < 1e-20);
        for (p, q) in sol.coefficients.iter().zip(&x) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn common_row_scaling_leaves_the_solution_unchanged() {
        let (a, b) = random_matrix(20, 6, 11);
        let mut a2 = a.clone();
        a2.data.iter_mut().for_each(|x| *x *= 8.0);
        let b2: Vec<f64> = b.iter().map(|x| x * 8.0).collect();
        let s1 = solve_rrqr(&a, &b, DEFAULT_RTOL).unwrap();
        let s2 = solve_rrqr(&a2, &b2, DEFAULT_RTOL).unwrap();
        for (p, q) in s1.coefficients.iter().zip(&s2.coefficients) {
            assert!((p - q).abs() < 1e-12 * (1.0 + p.abs()));
        }
    }

    #[test]
    fn accumulator_matches_dense_solve() {
        let (a, b) = random_matrix(40, 6, 5);
        let dense = solve_rrqr(&a, &b, DEFAULT_RTOL).unwrap();
        let mut acc = QrAccumulator::new(6);
        for chunk in 0..4 {
            let mut block = Vec::new();
            for i in chunk * 10..(chunk + 1) * 10 {
                for j in 0..6 {
                    block.push(a.get(i, j));
                }
                block.push(b[i]);
            }
            acc.push_rows(&mut block);
        }
        let s = acc.solve(DEFAULT_RTOL).unwrap();
        assert_eq!(acc.rows_seen(), 40);
        for (p, q) in s.coefficients.iter().zip(&dense.coefficients) {
            assert!((p - q).abs() < 1e-10 * (1.0 + q.abs()));
        }
        assert!((s.residual - dense.residual).abs() < 1e-10 * dense.residual);
    }

    fn small_domain() -> (EamToyPotential, TrainingDomain) {
        let pot = EamToyPotential::default();
        let b = BravaisSpec::triangular(calibrate_r0(&pot).unwrap());
        let d = make_training_domain(&b, 4, DefectKind::Vacancy, &pot, &MinimizerConfig::newton()).unwrap();
        (pot, d)
    }

    fn spec(pot: &EamToyPotential, k: usize, deg: usize) -> BasisSpec {
        BasisSpec { order: 2, max_degree: deg, radial_size: k, angular_max: 2, cutoff: pot.cutoff, r_in: 0.5 }
    }

    #[test]
    fn design_rows_reproduce_model_energy_and_forces() {
        let (pot, d) = small_domain();
        let s = spec(&pot, 3, 5);
        let samples = sample_configs(&d, &pot, 2, 0.02, 1, Tag::Train).unwrap();
        let w = LossWeights { w_e: 4.0, w_f: 9.0, per_kind: vec![] };
        let (a, _) = assemble(&[TrainingData { lattice: &d.lattice, samples: &samples }], &s, &w).unwrap();
        let n = d.lattice.n_sites();
        assert_eq!(a.rows, 2 * (1 + 2 * n));
        let basis = build_basis(&s).unwrap();
        let c: Vec<f64> = (0..basis.len()).map(|i| 0.1 * (1.0 + i as f64).recip()).collect();
        let model = SurrogateModel::new(basis, c.clone()).unwrap();
        let asm = Assembler::new(&d.lattice, &model).unwrap();
        let pred = a.matvec(&c);
        for (si, obs) in samples.iter().enumerate() {
            let base = si * (1 + 2 * n);
            let (e, g) = asm.energy_gradient(&obs.u).unwrap();
            assert!((pred[base] - 2.0 * e).abs() < 1e-12 * (1.0 + e.abs()));
            for c in 0..2 * n {
                assert!((pred[base + 1 + c] + 3.0 * g[c / 2].get(c % 2)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn force_rows_match_finite_differences_of_energy_rows() {
        let (pot, d) = small_domain();
        let s = spec(&pot, 3, 5);
        let basis = build_basis(&s).unwrap();
        let builder = RowBuilder::new(&basis, &d.lattice).unwrap();
        let n = d.lattice.n_sites();
        let nb = basis.len();
        let u = d.equilibrium.u_bar.values.clone();
        let mut er = vec![0.0; nb];
        let mut fr = vec![0.0; 2 * n * nb];
        builder.rows(&u, &mut er, &mut fr).unwrap();
        let h = 1e-6;
        let scale = fr.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let (mut up, mut dn) = (vec![0.0; nb], vec![0.0; nb]);
        let mut scratch = vec![0.0; 2 * n * nb];
        for c in [0, 1, 7, 2 * n - 1] {
            let mut p = u.clone();
            p[c / 2].set(c % 2, u[c / 2].get(c % 2) + h);
            builder.rows(&p, &mut up, &mut scratch).unwrap();
            let mut q = u.clone();
            q[c / 2].set(c % 2, u[c / 2].get(c % 2) - h);
            builder.rows(&q, &mut dn, &mut scratch).unwrap();
            for b in 0..nb {
                let fd = -(up[b] - dn[b]) / (2.0 * h);
                assert!((fd - fr[c * nb + b]).abs() < 1e-6 * scale);
            }
        }
    }

    #[test]
    fn zero_force_weight_keeps_rows() {
        let (pot, d) = small_domain();
        let samples = sample_configs(&d, &pot, 1, 0.01, 2, Tag::Train).unwrap();
        let w = LossWeights { w_e: 1.0, w_f: 0.0, per_kind: vec![] };
        let (a, y) =
            assemble(&[TrainingData { lattice: &d.lattice, samples: &samples }], &spec(&pot, 2, 3), &w).unwrap();
        assert_eq!(a.rows, 1 + 2 * d.lattice.n_sites());
        assert!(y[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn realizable_target_is_recovered() {
        let (_, d) = small_domain();
        let pot = EamToyPotential::default();
        let s = spec(&pot, 3, 5);
        let basis = build_basis(&s).unwrap();
        let c: Vec<f64> = (0..basis.len()).map(|i| 0.02 * (((i * 7) % 5) as f64 - 2.0)).collect();
        let truth = SurrogateModel::new(basis, c).unwrap();
        let mut samples = sample_configs(&d, &truth, 6, 0.02, 5, Tag::Train).unwrap();
        samples.extend(sample_configs(&d, &truth, 3, 0.02, 6, Tag::Test).unwrap());
        let r =
            fit(&[TrainingData { lattice: &d.lattice, samples: &samples }], &s, &LossWeights::default(), DEFAULT_RTOL)
                .unwrap();
        let (te, tf) = r.test_rmse.unwrap();
        assert!(te < 1e-8 && tf < 1e-8, "{te} {tf}");
    }

    #[test]
    fn nested_bases_do_not_increase_the_residual_and_fits_are_deterministic() {
        let (pot, d) = small_domain();
        let samples = sample_configs(&d, &pot, 8, 0.02, 8, Tag::Train).unwrap();
        let data = [TrainingData { lattice: &d.lattice, samples: &samples }];
        let mut last = f64::INFINITY;
        for deg in [2, 4, 6] {
            let r = fit(&data, &spec(&pot, 4, deg), &LossWeights::default(), DEFAULT_RTOL).unwrap();
            assert!(r.residual_loss <= last * (1.0 + 1e-9));
            last = r.residual_loss;
        }
        let a = fit(&data, &spec(&pot, 4, 6), &LossWeights::default(), DEFAULT_RTOL).unwrap();
        let b = fit(&data, &spec(&pot, 4, 6), &LossWeights::default(), DEFAULT_RTOL).unwrap();
        let bits = |r: &FitResult| r.model.coefficients().iter().map(|c| c.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let _ = pot.cutoff();
    }
}
