//! Energy minimisation, stability certificates, truncation of core solutions
//! and the superposition predictor for multi-defect configurations.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::analysis::{fit_rate_window, RateFit};
use crate::lattice::{stencil_norm, DefectKind, DefectedLattice, DisplacementField};
use crate::linalg::{self, conjugate_gradient, dot, norm, project_translations, BlockSparse};
use crate::math::{smoothstep5, sqrt, Vec2};
use crate::potential::{Assembler, SitePotential};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Polak–Ribière+ nonlinear conjugate gradients, strong Wolfe line search.
    Ncg,
    /// Truncated Newton with projected CG inner solves.
    NewtonCg,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MinimizerConfig {
    /// Bound on the largest per-site force norm.
    pub g_tol: f64,
    pub max_iterations: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant of the strong Wolfe conditions.
    pub c2: f64,
    /// Largest per-site displacement of one step, in units of `r0`.
    pub max_step: f64,
    pub method: Method,
}

impl Default for MinimizerConfig {
    fn default() -> Self {
        MinimizerConfig { g_tol: 1e-8, max_iterations: 20_000, c1: 1e-4, c2: 0.1, max_step: 0.1, method: Method::Ncg }
    }
}

impl MinimizerConfig {
    pub fn newton() -> Self {
        MinimizerConfig { method: Method::NewtonCg, max_iterations: 200, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.g_tol > 0.0) {
            return Err(Error::InvalidSpec("g_tol must be positive".into()));
        }
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::InvalidSpec("need 0 < c1 < c2 < 1".into()));
        }
        if !(self.max_step > 0.0) {
            return Err(Error::InvalidSpec("max_step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumResult {
    pub u_bar: DisplacementField,
    pub energy: f64,
    /// Largest per-site force norm.
    pub residual_force_norm: f64,
    /// Smallest Hessian eigenvalue off the translations, when computed.
    pub c_bar: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
}

fn max_site_norm(g: &[f64]) -> f64 {
    g.chunks_exact(2).map(|c| sqrt(c[0] * c[0] + c[1] * c[1])).fold(0.0, f64::max)
}

struct Problem<'a, 'b, P: SitePotential + ?Sized> {
    asm: &'b Assembler<'a, P>,
    noise: f64,
}

impl<P: SitePotential + ?Sized> Problem<'_, '_, P> {
    fn eval(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let u = DisplacementField::from_flat(x);
        let (e, g) = self.asm.energy_gradient(&u).ok()?;
        let mut g = crate::math::flatten(&g);
        project_translations(&mut g);
        Some((e, g))
    }
}

/// Local minimiser of `𝓔` started from `u0`.
pub fn equilibrate<P: SitePotential + ?Sized>(
    asm: &Assembler<'_, P>,
    u0: &DisplacementField,
    cfg: &MinimizerConfig,
) -> Result<EquilibriumResult> {
    cfg.validate()?;
    asm.check(u0)?;
    let scale: f64 = asm.reference_site_energies().iter().map(|e| e.abs()).sum();
    let problem = Problem { asm, noise: 256.0 * f64::EPSILON * scale.max(1.0) };
    let step_cap = cfg.max_step * asm.lattice().r0();
    match cfg.method {
        Method::Ncg => ncg(&problem, u0, cfg, step_cap),
        Method::NewtonCg => newton_cg(&problem, u0, cfg, step_cap),
    }
}

fn finish(x: Vec<f64>, e: f64, g: &[f64], iterations: usize) -> EquilibriumResult {
    EquilibriumResult {
        u_bar: DisplacementField::from_flat(&x),
        energy: e,
        residual_force_norm: max_site_norm(g),
        c_bar: None,
        converged: true,
        iterations,
    }
}

fn ncg<P: SitePotential + ?Sized>(
    pb: &Problem<'_, '_, P>,
    u0: &DisplacementField,
    cfg: &MinimizerConfig,
    step_cap: f64,
) -> Result<EquilibriumResult> {
    let mut x = u0.flat();
    let (mut e, mut g) = pb.eval(&x).ok_or(Error::LeftAdmissibleSet)?;
    let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut alpha_prev = 0.0;
    let mut slope_prev = 0.0;
    let mut stalls = 0;
    for it in 0..cfg.max_iterations {
        if max_site_norm(&g) <= cfg.g_tol {
            return Ok(finish(x, e, &g, it));
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        let dmax = max_site_norm(&d);
        let amax = step_cap / dmax;
        let mut a0 =
            if alpha_prev > 0.0 { (alpha_prev * slope_prev / slope).min(1.0).max(alpha_prev * 0.01) } else { 1.0 };
        a0 = a0.min(amax);
        let Some(step) = wolfe_search(pb, &x, e, &d, slope, a0, amax, cfg) else {
            // no acceptable point along d: restart once from steepest descent
            stalls += 1;
            if stalls > 2 {
                return Err(Error::NotConverged { iterations: it, residual: max_site_norm(&g) });
            }
            d = g.iter().map(|v| -v).collect();
            alpha_prev = 0.0;
            continue;
        };
        stalls = 0;
        let (alpha, e_new, g_new) = step;
        axpy_in(&mut x, alpha, &d);
        let gg = dot(&g, &g);
        let beta = (dot(&g_new, &g_new) - dot(&g_new, &g)) / gg;
        let beta = beta.max(0.0);
        for (di, gi) in d.iter_mut().zip(&g_new) {
            *di = -gi + beta * *di;
        }
        alpha_prev = alpha;
        slope_prev = slope;
        e = e_new;
        g = g_new;
    }
    if max_site_norm(&g) <= cfg.g_tol {
        return Ok(finish(x, e, &g, cfg.max_iterations));
    }
    Err(Error::NotConverged { iterations: cfg.max_iterations, residual: max_site_norm(&g) })
}

fn axpy_in(x: &mut [f64], a: f64, d: &[f64]) {
    linalg::axpy(a, d, x);
}

fn trial<P: SitePotential + ?Sized>(pb: &Problem<'_, '_, P>, x: &[f64], a: f64, d: &[f64]) -> Option<(f64, Vec<f64>)> {
    let mut y = x.to_vec();
    axpy_in(&mut y, a, d);
    pb.eval(&y)
}

/// Strong Wolfe line search; sufficient decrease is relaxed by the energy
/// round-off level so that the search does not stall near the minimum.
#[allow(clippy::too_many_arguments)]
fn wolfe_search<P: SitePotential + ?Sized>(
    pb: &Problem<'_, '_, P>,
    x: &[f64],
    e0: f64,
    d: &[f64],
    slope0: f64,
    a_init: f64,
    amax: f64,
    cfg: &MinimizerConfig,
) -> Option<(f64, f64, Vec<f64>)> {
    let armijo = |a: f64, e: f64| e <= e0 + cfg.c1 * a * slope0 + pb.noise;
    let curvature = |s: f64| s.abs() <= -cfg.c2 * slope0;
    let (mut a_lo, mut e_lo, mut s_lo) = (0.0, e0, slope0);
    let mut a = a_init;
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    for i in 0..40 {
        let Some((e, g)) = trial(pb, x, a, d) else {
            a = 0.5 * (a_lo + a);
            continue;
        };
        let s = dot(&g, d);
        if !armijo(a, e) || (i > 0 && e >= e_lo && e > e0 - pb.noise && a_lo > 0.0) {
            return zoom(pb, x, e0, d, slope0, (a_lo, e_lo, s_lo), (a, e, s), cfg).or(best);
        }
        if curvature(s) {
            return Some((a, e, g));
        }
        if s >= 0.0 {
            return zoom(pb, x, e0, d, slope0, (a, e, s), (a_lo, e_lo, s_lo), cfg).or(Some((a, e, g)));
        }
        if e < e0 {
            best = Some((a, e, g));
        }
        if a >= amax {
            return best;
        }
        a_lo = a;
        e_lo = e;
        s_lo = s;
        a = (2.0 * a).min(amax);
    }
    best
}

#[allow(clippy::too_many_arguments)]
fn zoom<P: SitePotential + ?Sized>(
    pb: &Problem<'_, '_, P>,
    x: &[f64],
    e0: f64,
    d: &[f64],
    slope0: f64,
    lo: (f64, f64, f64),
    hi: (f64, f64, f64),
    cfg: &MinimizerConfig,
) -> Option<(f64, f64, Vec<f64>)> {
    let (mut a_lo, mut e_lo, mut s_lo) = lo;
    let (mut a_hi, mut _e_hi, mut s_hi) = hi;
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    for _ in 0..50 {
        let w = a_hi - a_lo;
        // secant on the directional derivative, safeguarded into the bracket
        let mut a = if (s_hi - s_lo).abs() > 0.0 { a_lo - s_lo * w / (s_hi - s_lo) } else { a_lo + 0.5 * w };
        let (l, h) = if a_lo < a_hi { (a_lo, a_hi) } else { (a_hi, a_lo) };
        let margin = 0.1 * (h - l);
        if !(a > l + margin && a < h - margin) {
            a = 0.5 * (a_lo + a_hi);
        }
        if (h - l) < 1e-14 * h.max(1e-300) {
            break;
        }
        let Some((e, g)) = trial(pb, x, a, d) else {
            a_hi = a;
            continue;
        };
        let s = dot(&g, d);
        if e > e0 + cfg.c1 * a * slope0 + pb.noise || e >= e_lo + pb.noise {
            a_hi = a;
            _e_hi = e;
            s_hi = s;
        } else {
            if s.abs() <= -cfg.c2 * slope0 {
                return Some((a, e, g));
            }
            if e <= e0 && a > 0.0 {
                best = Some((a, e, g.clone()));
            }
            if s * (a_hi - a_lo) >= 0.0 {
                a_hi = a_lo;
                _e_hi = e_lo;
                s_hi = s_lo;
            }
            a_lo = a;
            e_lo = e;
            s_lo = s;
        }
    }
    best
}

fn newton_cg<P: SitePotential + ?Sized>(
    pb: &Problem<'_, '_, P>,
    u0: &DisplacementField,
    cfg: &MinimizerConfig,
    step_cap: f64,
) -> Result<EquilibriumResult> {
    let mut x = u0.flat();
    let (mut e, mut g) = pb.eval(&x).ok_or(Error::LeftAdmissibleSet)?;
    for it in 0..cfg.max_iterations {
        let gmax = max_site_norm(&g);
        if gmax <= cfg.g_tol {
            return Ok(finish(x, e, &g, it));
        }
        let h = pb.asm.hessian(&DisplacementField::from_flat(&x))?;
        let gn = norm(&g);
        let minus_g: Vec<f64> = g.iter().map(|v| -v).collect();
        let forcing = (0.5f64).min(sqrt(gn)).max(1e-3);
        let out = conjugate_gradient(|v, w| h.matvec_into(v, w), &minus_g, forcing * gn, 4 * g.len() + 50, true);
        let mut p = out.x;
        if norm(&p) == 0.0 || dot(&p, &g) >= 0.0 {
            p = minus_g.clone();
        }
        let pmax = max_site_norm(&p);
        if pmax > step_cap {
            p.iter_mut().for_each(|v| *v *= step_cap / pmax);
        }
        let slope = dot(&p, &g);
        let mut a = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            if let Some((en, gnw)) = trial(pb, &x, a, &p) {
                let decrease = en <= e + cfg.c1 * a * slope + pb.noise;
                // inside the round-off band accept on a smaller gradient
                let noisy = (en - e).abs() <= pb.noise && norm(&gnw) < gn;
                if (decrease && en <= e + pb.noise) || noisy {
                    accepted = Some((en, gnw));
                    break;
                }
            }
            a *= 0.5;
        }
        let Some((en, gnw)) = accepted else {
            return Err(Error::NotConverged { iterations: it, residual: gmax });
        };
        axpy_in(&mut x, a, &p);
        e = en;
        g = gnw;
    }
    if max_site_norm(&g) <= cfg.g_tol {
        return Ok(finish(x, e, &g, cfg.max_iterations));
    }
    Err(Error::NotConverged { iterations: cfg.max_iterations, residual: max_site_norm(&g) })
}

/// Dense eigensolves are used up to this dimension.
const DENSE_LIMIT: usize = 500;

/// Smallest eigenvalue of a block-sparse symmetric operator on the
/// complement of rigid translations.
pub fn smallest_eigenvalue(h: &BlockSparse, seed: u64) -> Result<f64> {
    let dim = h.dim();
    let n = h.n_sites();
    if n < 2 {
        return Err(Error::EigensolverFailed("need at least two sites".into()));
    }
    let shift = 2.0 * gershgorin(h) + 1.0;
    if dim <= DENSE_LIMIT {
        let mut a = h.to_dense();
        // push translations to the top of the spectrum
        let w = shift / n as f64;
        for i in 0..n {
            for j in 0..n {
                a[(2 * i) * dim + 2 * j] += w;
                a[(2 * i + 1) * dim + 2 * j + 1] += w;
            }
        }
        let (vals, _) = linalg::symmetric_eigen(&a, dim, false)?;
        return Ok(vals[0]);
    }
    inverse_iteration(h, seed, shift)
}

fn gershgorin(h: &BlockSparse) -> f64 {
    let mut best: f64 = 0.0;
    for i in 0..h.n_sites() {
        let (mut r0, mut r1) = (0.0, 0.0);
        for (_, b) in h.row(i) {
            r0 += b[0].abs() + b[1].abs();
            r1 += b[2].abs() + b[3].abs();
        }
        best = best.max(r0).max(r1);
    }
    best
}

fn inverse_iteration(h: &BlockSparse, seed: u64, shift: f64) -> Result<f64> {
    let dim = h.dim();
    let apply = |v: &[f64], w: &mut [f64]| h.matvec_into(v, w);
    let mut v = linalg::random_unit_vector(dim, seed, true);
    let mut w = vec![0.0; dim];
    let mut lambda = f64::INFINITY;
    for _ in 0..300 {
        let out = conjugate_gradient(apply, &v, 1e-10, 20 * dim, true);
        if let Some((p, q)) = out.negative_curvature {
            let _ = p;
            return Ok(q.min(shifted_power(h, seed, shift)?));
        }
        if !out.converged {
            return Err(Error::EigensolverFailed("inner CG did not converge".into()));
        }
        let mut x = out.x;
        project_translations(&mut x);
        let nx = norm(&x);
        x.iter_mut().for_each(|t| *t /= nx);
        apply(&x, &mut w);
        let rq = dot(&x, &w);
        let change = (rq - lambda).abs();
        lambda = rq;
        v = x;
        if change <= 1e-9 * rq.abs().max(1e-300) {
            return Ok(lambda);
        }
    }
    Err(Error::EigensolverFailed("inverse iteration did not converge".into()))
}

/// Power iteration on `σI − H` (translations projected): largest eigenvalue
/// is `σ − λ_min`.
fn shifted_power(h: &BlockSparse, seed: u64, shift: f64) -> Result<f64> {
    let dim = h.dim();
    let mut v = linalg::random_unit_vector(dim, seed ^ 0x5eed, true);
    let mut w = vec![0.0; dim];
    let mut est = f64::INFINITY;
    for _ in 0..20_000 {
        h.matvec_into(&v, &mut w);
        for (wi, vi) in w.iter_mut().zip(&v) {
            *wi = shift * vi - *wi;
        }
        project_translations(&mut w);
        let nw = norm(&w);
        let rq = dot(&v, &w);
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / nw;
        }
        if (rq - est).abs() <= 1e-10 * shift {
            return Ok(shift - rq);
        }
        est = rq;
    }
    Err(Error::EigensolverFailed("shifted power iteration did not converge".into()))
}

/// `c̄`: smallest Hessian eigenvalue off the translations at `u`.
pub fn check_stability<P: SitePotential + ?Sized>(asm: &Assembler<'_, P>, u: &DisplacementField) -> Result<f64> {
    let h = asm.hessian(u)?;
    smallest_eigenvalue(&h, 0x57ab1e)
}

/// Equilibrates and attaches `c̄`.
pub fn equilibrate_stable<P: SitePotential + ?Sized>(
    asm: &Assembler<'_, P>,
    u0: &DisplacementField,
    cfg: &MinimizerConfig,
) -> Result<EquilibriumResult> {
    let mut res = equilibrate(asm, u0, cfg)?;
    res.c_bar = Some(check_stability(asm, &res.u_bar)?);
    Ok(res)
}

/// `η(t)`: 1 on `[0, 4/6]`, 0 from `5/6` on, quintic in between.
pub fn eta(t: f64) -> f64 {
    if t <= 4.0 / 6.0 {
        1.0
    } else if t >= 5.0 / 6.0 {
        0.0
    } else {
        1.0 - smoothstep5((t - 4.0 / 6.0) * 6.0).0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationOperator {
    pub center: Vec2,
    pub radius: f64,
}

/// `Π_R u = η(|ℓ − ℓ_i| / R)(u − a_R)` with `a_R` the mean of `u` over the
/// sites of the annulus `4R/6 <= |ℓ − ℓ_i| <= 5R/6`.
pub fn truncate(
    lattice: &DefectedLattice,
    op: &TruncationOperator,
    u: &DisplacementField,
) -> Result<DisplacementField> {
    u.check(lattice)?;
    let r0 = lattice.r0();
    if !(op.radius >= 3.0 * r0 * (1.0 - 1e-12)) {
        return Err(Error::InvalidSpec("truncation radius must be at least 3 r0".into()));
    }
    if 5.0 * op.radius / 6.0 >= lattice.domain_radius() {
        return Err(Error::InvalidSpec("truncation ball does not fit in the periodic cell".into()));
    }
    let t: Vec<f64> =
        (0..lattice.n_sites()).map(|i| lattice.min_image(lattice.position(i) - op.center).norm() / op.radius).collect();
    let mut sum = Vec2::ZERO;
    let mut count = 0usize;
    for (i, &ti) in t.iter().enumerate() {
        if (4.0 / 6.0..=5.0 / 6.0).contains(&ti) {
            sum += u.values[i];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyAnnulus);
    }
    let a = sum * (1.0 / count as f64);
    let values = t
        .iter()
        .zip(&u.values)
        .map(|(&ti, &ui)| {
            let e = eta(ti);
            if e == 0.0 {
                Vec2::ZERO
            } else {
                (ui - a) * e
            }
        })
        .collect();
    Ok(DisplacementField::from_values(values))
}

/// Equilibrated single-defect solution used to build predictors.
#[derive(Clone, Copy, Debug)]
pub struct CoreSolution<'a> {
    pub lattice: &'a DefectedLattice,
    pub u: &'a DisplacementField,
}

impl CoreSolution<'_> {
    fn center(&self) -> Result<(DefectKind, Vec2)> {
        let d = self.lattice.defects();
        if d.len() != 1 {
            return Err(Error::InvalidSpec("core solution must contain exactly one defect".into()));
        }
        Ok((d.defects[0].kind, d.defects[0].position))
    }
}

/// `z(ℓ) = Σ_i Π_R ū^core(ℓ − ℓ_i)`, one core solution per defect kind.
pub fn build_predictor(target: &DefectedLattice, cores: &[CoreSolution<'_>], radius: f64) -> Result<DisplacementField> {
    let reach = 5.0 * radius / 6.0;
    let mut truncated: BTreeMap<DefectKind, (CoreSolution<'_>, Vec2, DisplacementField)> = BTreeMap::new();
    for core in cores {
        let (kind, center) = core.center()?;
        if core.lattice.domain_radius() <= reach + core.lattice.r0() {
            return Err(Error::CoreDomainTooSmall { needed: reach + core.lattice.r0() });
        }
        let tr = truncate(core.lattice, &TruncationOperator { center, radius }, core.u)?;
        truncated.insert(kind, (*core, center, tr));
    }
    let mut z = DisplacementField::zeros(target.n_sites());
    for defect in &target.defects().defects {
        let (core, center, tr) = truncated
            .get(&defect.kind)
            .ok_or_else(|| Error::InvalidSpec(alloc::format!("no core solution for {}", defect.kind.as_str())))?;
        for i in 0..target.n_sites() {
            let p = target.min_image(target.position(i) - defect.position);
            if p.norm() >= reach {
                continue;
            }
            let j = core
                .lattice
                .site_at(*center + p)
                .ok_or_else(|| Error::InvalidSpec("core lattice does not match the target lattice".into()))?;
            z.values[i] += tr.values[j];
        }
    }
    Ok(z)
}

/// Dual-norm force residual `‖δ𝓔(z)‖` of a predictor.
pub fn predictor_residual<P: SitePotential + ?Sized>(asm: &Assembler<'_, P>, z: &DisplacementField) -> Result<f64> {
    let (_, g) = asm.energy_gradient(z)?;
    crate::lattice::dual_stencil_norm(asm.lattice(), &crate::math::flatten(&g))
}

/// Log-log slope of the shell maximum of `|Du(ℓ)|` against distance from
/// `center`, over `[5 r0, 0.4 · domain radius]`.
pub fn check_decay(lattice: &DefectedLattice, u: &DisplacementField, center: Vec2) -> Result<RateFit> {
    u.check(lattice)?;
    let r0 = lattice.r0();
    let (lo, hi) = (5.0 * r0, 0.4 * lattice.domain_radius());
    let width = 0.5 * r0;
    let mut shells: BTreeMap<i64, f64> = BTreeMap::new();
    for i in 0..lattice.n_sites() {
        let r = lattice.min_image(lattice.position(i) - center).norm();
        if r < lo || r > hi {
            continue;
        }
        let key = crate::math::floor(r / width) as i64;
        let s = stencil_norm(lattice, u, i);
        let slot = shells.entry(key).or_insert(0.0);
        *slot = slot.max(s);
    }
    let points: Vec<(f64, f64)> =
        shells.iter().filter(|(_, &v)| v > 0.0).map(|(&k, &v)| ((k as f64 + 0.5) * width, v)).collect();
    if points.len() < 3 {
        return Err(Error::InsufficientShells);
    }
    fit_rate_window(&points, lo, hi)
}
