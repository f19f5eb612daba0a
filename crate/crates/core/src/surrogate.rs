//! Linear invariant surrogate `Ṽ(g) = Σ_B c_B B(g)` built from products of
//! neighbour-summed densities `A_{km} = Σ_j P_k(r_j) e^{i m θ_j}`.
//!
//! Rotation invariance is the selection rule `Σ m = 0`; taking the real
//! part of each product makes it reflection invariant.

use alloc::vec;
use alloc::vec::Vec;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::linalg::Block;
use crate::math::Vec2;
use crate::potential::SitePotential;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    /// Maximal correlation order ν (body order − 1).
    pub order: usize,
    /// Bound on `Σ (k + |m|)` over the factors of a product.
    pub max_degree: usize,
    /// Number of radial functions `K`.
    pub radial_size: usize,
    /// Largest angular index `M`.
    pub angular_max: usize,
    pub cutoff: f64,
    /// Left end of the interval mapped onto `[-1, 1]` by the radial transform.
    pub r_in: f64,
}

impl BasisSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.order) {
            return Err(Error::InvalidSpec("correlation order must be 1, 2 or 3".into()));
        }
        if self.radial_size == 0 {
            return Err(Error::InvalidSpec("radial_size must be at least 1".into()));
        }
        if !(self.cutoff > 0.0) || !(self.r_in >= 0.0) || !(self.r_in < self.cutoff) {
            return Err(Error::InvalidSpec("need 0 <= r_in < cutoff".into()));
        }
        Ok(())
    }
}

/// One-particle index `(k, m)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Channel {
    pub k: usize,
    pub m: i32,
}

/// An ordered, deduplicated list of invariant products.
#[derive(Clone, Debug, PartialEq)]
pub struct Basis {
    spec: BasisSpec,
    channels: Vec<Channel>,
    /// Each function is a sorted multiset of channel indices.
    functions: Vec<Vec<usize>>,
}

/// Enumerates the basis for `spec`.
pub fn build_basis(spec: &BasisSpec) -> Result<Basis> {
    spec.validate()?;
    let mm = spec.angular_max as i32;
    let mut channels = Vec::new();
    for m in -mm..=mm {
        for k in 0..spec.radial_size {
            if k + m.unsigned_abs() as usize <= spec.max_degree {
                channels.push(Channel { k, m });
            }
        }
    }
    channels.sort();
    let mut functions: Vec<Vec<Channel>> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    fn visit(
        start: usize,
        channels: &[Channel],
        spec: &BasisSpec,
        stack: &mut Vec<usize>,
        out: &mut Vec<Vec<Channel>>,
    ) {
        if !stack.is_empty() {
            let tuple: Vec<Channel> = stack.iter().map(|&i| channels[i]).collect();
            let msum: i32 = tuple.iter().map(|c| c.m).sum();
            if msum == 0 {
                let mut neg: Vec<Channel> = tuple.iter().map(|c| Channel { k: c.k, m: -c.m }).collect();
                neg.sort();
                if tuple <= neg {
                    out.push(tuple);
                }
            }
        }
        if stack.len() == spec.order {
            return;
        }
        for i in start..channels.len() {
            let deg: usize = stack
                .iter()
                .chain(core::iter::once(&i))
                .map(|&j| channels[j].k + channels[j].m.unsigned_abs() as usize)
                .sum();
            if deg > spec.max_degree {
                continue;
            }
            stack.push(i);
            visit(i, channels, spec, stack, out);
            stack.pop();
        }
    }
    visit(0, &channels, spec, &mut stack, &mut functions);
    functions.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    functions.dedup();
    if functions.is_empty() {
        return Err(Error::EmptyBasis);
    }
    let functions =
        functions.into_iter().map(|f| f.iter().map(|c| channels.binary_search(c).unwrap()).collect()).collect();
    Ok(Basis { spec: *spec, channels, functions })
}

/// Value, first and second derivative of a function of `r`.
#[derive(Clone, Copy, Debug, Default)]
struct Radial {
    f: f64,
    d: f64,
    dd: f64,
}

impl Basis {
    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    /// Factors of basis function `b` as channels.
    pub fn function(&self, b: usize) -> Vec<Channel> {
        self.functions[b].iter().map(|&i| self.channels[i]).collect()
    }

    /// `P_k(x(r)) (1 − r/r_c)³` for all `k`, with two derivatives.
    fn radial(&self, r: f64, out: &mut [Radial]) {
        let rc = self.spec.cutoff;
        if r >= rc {
            out.iter_mut().for_each(|o| *o = Radial::default());
            return;
        }
        let s = 2.0 / (rc - self.spec.r_in);
        let x = s * (r - self.spec.r_in) - 1.0;
        let t = 1.0 - r / rc;
        let env = Radial { f: t * t * t, d: -3.0 * t * t / rc, dd: 6.0 * t / (rc * rc) };
        let (mut p0, mut d0, mut dd0) = (1.0, 0.0, 0.0);
        let (mut p1, mut d1, mut dd1) = (x, 1.0, 0.0);
        for (k, o) in out.iter_mut().enumerate() {
            let (p, dp, ddp) = match k {
                0 => (p0, d0, dd0),
                1 => (p1, d1, dd1),
                _ => {
                    let kf = (k - 1) as f64;
                    let p2 = ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0);
                    let d2 = d0 + (2.0 * kf + 1.0) * p1;
                    let dd2 = dd0 + (2.0 * kf + 1.0) * d1;
                    p0 = p1;
                    d0 = d1;
                    dd0 = dd1;
                    p1 = p2;
                    d1 = d2;
                    dd1 = dd2;
                    (p2, d2, dd2)
                }
            };
            // chain rule through x(r) = s r + const
            let (pr, dpr, ddpr) = (p, dp * s, ddp * s * s);
            *o = Radial {
                f: pr * env.f,
                d: dpr * env.f + pr * env.d,
                dd: ddpr * env.f + 2.0 * dpr * env.d + pr * env.dd,
            };
        }
    }

    /// Densities `A_c` and, optionally, `∇φ_c(g_j)` and `∇²φ_c(g_j)`.
    fn densities(&self, g: &[Vec2], level: u8) -> Result<Densities> {
        let nc = self.channels.len();
        let kk = self.spec.radial_size;
        let mm = self.spec.angular_max;
        let mut a = vec![C64::new(0.0, 0.0); nc];
        let mut grad = if level >= 1 { vec![[C64::new(0.0, 0.0); 2]; g.len() * nc] } else { Vec::new() };
        let mut hess = if level >= 2 { vec![[C64::new(0.0, 0.0); 4]; g.len() * nc] } else { Vec::new() };
        let mut radial = vec![Radial::default(); kk];
        // deterministic summation order
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&i, &j| g[i].x.total_cmp(&g[j].x).then(g[i].y.total_cmp(&g[j].y)));
        let mut zpow = vec![C64::new(0.0, 0.0); mm + 1];
        for &j in &order {
            let v = g[j];
            let r = v.norm();
            if !(r > 0.0) {
                return Err(Error::NeighborAtZeroDistance);
            }
            if r >= self.spec.cutoff {
                continue;
            }
            self.radial(r, &mut radial);
            let z = C64::new(v.x, v.y);
            zpow[0] = C64::new(1.0, 0.0);
            for m in 1..=mm {
                zpow[m] = zpow[m - 1] * z;
            }
            let mut rpow = vec![1.0; mm + 3];
            let inv_r = 1.0 / r;
            for m in 1..rpow.len() {
                rpow[m] = rpow[m - 1] * inv_r;
            }
            for (c, ch) in self.channels.iter().enumerate() {
                let m = ch.m.unsigned_abs() as usize;
                let rad = radial[ch.k];
                let mf = m as f64;
                // φ = S(r) z^m with S = R r^{−m}
                let s = rad.f * rpow[m];
                let phi = zpow[m] * s;
                let conj = ch.m < 0;
                a[c] += if conj { phi.conj() } else { phi };
                if level == 0 {
                    continue;
                }
                let s1 = rad.d * rpow[m] - mf * rad.f * rpow[m + 1];
                let t = s1 * inv_r;
                let dz = if m >= 1 { zpow[m - 1] * mf } else { C64::new(0.0, 0.0) };
                let iu = C64::new(0.0, 1.0);
                let gx = zpow[m] * (t * v.x) + dz * s;
                let gy = zpow[m] * (t * v.y) + iu * dz * s;
                let slot = &mut grad[j * nc + c];
                if conj {
                    *slot = [gx.conj(), gy.conj()];
                } else {
                    *slot = [gx, gy];
                }
                if level < 2 {
                    continue;
                }
                let s2 = rad.dd * rpow[m] - 2.0 * mf * rad.d * rpow[m + 1] + mf * (mf + 1.0) * rad.f * rpow[m + 2];
                let tp = (s2 - t) * inv_r; // T'(r)
                let ddz = if m >= 2 { zpow[m - 2] * (mf * (mf - 1.0)) } else { C64::new(0.0, 0.0) };
                let dzx = dz;
                let dzy = iu * dz;
                let gv = [v.x, v.y];
                let dzv = [dzx, dzy];
                let ddzv = [[ddz, iu * ddz], [iu * ddz, -ddz]];
                let mut h = [C64::new(0.0, 0.0); 4];
                for p in 0..2 {
                    for q in 0..2 {
                        let delta = if p == q { 1.0 } else { 0.0 };
                        h[2 * p + q] = zpow[m] * (tp * inv_r * gv[q] * gv[p] + t * delta)
                            + dzv[q] * (t * gv[p])
                            + dzv[p] * (t * gv[q])
                            + ddzv[p][q] * s;
                    }
                }
                if conj {
                    h.iter_mut().for_each(|x| *x = x.conj());
                }
                hess[j * nc + c] = h;
            }
        }
        Ok(Densities { a, grad, hess, nc })
    }

    /// `(B(g))_B`, so that `Ṽ(g) = row · c`.
    pub fn design_row(&self, g: &[Vec2]) -> Result<Vec<f64>> {
        let d = self.densities(g, 0)?;
        Ok(self.functions.iter().map(|f| product(&d.a, f).re).collect())
    }

    /// Basis values and gradients `∂B/∂g_j`, stored at `grads[b * k + j]`.
    pub fn design_row_gradient(&self, g: &[Vec2], values: &mut [f64], grads: &mut [Vec2]) -> Result<()> {
        let k = g.len();
        let d = self.densities(g, 1)?;
        for (b, f) in self.functions.iter().enumerate() {
            values[b] = product(&d.a, f).re;
            let out = &mut grads[b * k..(b + 1) * k];
            out.iter_mut().for_each(|x| *x = Vec2::ZERO);
            for p in 0..f.len() {
                let mut coef = C64::new(1.0, 0.0);
                for (q, &c) in f.iter().enumerate() {
                    if q != p {
                        coef *= d.a[c];
                    }
                }
                let c = f[p];
                for j in 0..k {
                    let gr = d.grad[j * d.nc + c];
                    out[j] += Vec2::new((coef * gr[0]).re, (coef * gr[1]).re);
                }
            }
        }
        Ok(())
    }
}

struct Densities {
    a: Vec<C64>,
    grad: Vec<[C64; 2]>,
    hess: Vec<[C64; 4]>,
    nc: usize,
}

fn product(a: &[C64], f: &[usize]) -> C64 {
    f.iter().fold(C64::new(1.0, 0.0), |acc, &c| acc * a[c])
}

/// Fitted surrogate: basis plus one coefficient per basis function.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateModel {
    basis: Basis,
    coefficients: Vec<f64>,
}

impl SurrogateModel {
    pub fn new(basis: Basis, coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.len() != basis.len() {
            return Err(Error::DimensionMismatch(alloc::format!(
                "{} coefficients for {} basis functions",
                coefficients.len(),
                basis.len()
            )));
        }
        Ok(SurrogateModel { basis, coefficients })
    }

    pub fn from_spec(spec: &BasisSpec, coefficients: Vec<f64>) -> Result<Self> {
        Self::new(build_basis(spec)?, coefficients)
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn spec(&self) -> &BasisSpec {
        &self.basis.spec
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn basis_size(&self) -> usize {
        self.basis.len()
    }

    /// `Ṽ(g)`.
    pub fn evaluate_site(&self, g: &[Vec2]) -> Result<f64> {
        let d = self.basis.densities(g, 0)?;
        Ok(self.q_value(&d.a).re)
    }

    /// `∂Ṽ/∂g_j` for every neighbour.
    pub fn site_gradient(&self, g: &[Vec2]) -> Result<Vec<Vec2>> {
        let mut out = vec![Vec2::ZERO; g.len()];
        SitePotential::site_gradient(self, g, &mut out)?;
        Ok(out)
    }

    /// `Q(A) = Σ_B c_B Π A`, holomorphic in the densities.
    fn q_value(&self, a: &[C64]) -> C64 {
        self.basis
            .functions
            .iter()
            .zip(&self.coefficients)
            .fold(C64::new(0.0, 0.0), |acc, (f, &c)| acc + product(a, f) * c)
    }

    /// `∂Q/∂A_c` and optionally `∂²Q/∂A_c∂A_d`.
    fn q_derivatives(&self, a: &[C64], want_second: bool) -> (Vec<C64>, Vec<C64>) {
        let nc = a.len();
        let mut dq = vec![C64::new(0.0, 0.0); nc];
        let mut wq = if want_second { vec![C64::new(0.0, 0.0); nc * nc] } else { Vec::new() };
        for (f, &c) in self.basis.functions.iter().zip(&self.coefficients) {
            if c == 0.0 {
                continue;
            }
            for p in 0..f.len() {
                let mut coef = C64::new(c, 0.0);
                for (q, &i) in f.iter().enumerate() {
                    if q != p {
                        coef *= a[i];
                    }
                }
                dq[f[p]] += coef;
                if !want_second {
                    continue;
                }
                for q in 0..f.len() {
                    if q == p {
                        continue;
                    }
                    let mut coef2 = C64::new(c, 0.0);
                    for (s, &i) in f.iter().enumerate() {
                        if s != p && s != q {
                            coef2 *= a[i];
                        }
                    }
                    wq[f[p] * nc + f[q]] += coef2;
                }
            }
        }
        (dq, wq)
    }
}

impl SitePotential for SurrogateModel {
    fn cutoff(&self) -> f64 {
        self.basis.spec.cutoff
    }

    fn site_energy(&self, g: &[Vec2]) -> Result<f64> {
        self.evaluate_site(g)
    }

    fn site_gradient(&self, g: &[Vec2], grad: &mut [Vec2]) -> Result<f64> {
        let d = self.basis.densities(g, 1)?;
        let (dq, _) = self.q_derivatives(&d.a, false);
        for (j, out) in grad.iter_mut().enumerate() {
            let mut gx = C64::new(0.0, 0.0);
            let mut gy = C64::new(0.0, 0.0);
            for c in 0..d.nc {
                let gr = d.grad[j * d.nc + c];
                gx += dq[c] * gr[0];
                gy += dq[c] * gr[1];
            }
            *out = Vec2::new(gx.re, gy.re);
        }
        Ok(self.q_value(&d.a).re)
    }

    fn site_hessian(&self, g: &[Vec2], grad: &mut [Vec2], hess: &mut [Block]) -> Result<f64> {
        let k = g.len();
        let d = self.basis.densities(g, 2)?;
        let nc = d.nc;
        let (dq, wq) = self.q_derivatives(&d.a, true);
        // t_j = W ∇φ(g_j)
        let mut t = vec![[C64::new(0.0, 0.0); 2]; k * nc];
        for j in 0..k {
            for c in 0..nc {
                let mut acc = [C64::new(0.0, 0.0); 2];
                let row = &wq[c * nc..(c + 1) * nc];
                for (e, &w) in row.iter().enumerate() {
                    if w == C64::new(0.0, 0.0) {
                        continue;
                    }
                    let gr = d.grad[j * nc + e];
                    acc[0] += w * gr[0];
                    acc[1] += w * gr[1];
                }
                t[j * nc + c] = acc;
            }
        }
        for a in 0..k {
            let mut gx = C64::new(0.0, 0.0);
            let mut gy = C64::new(0.0, 0.0);
            for c in 0..nc {
                let gr = d.grad[a * nc + c];
                gx += dq[c] * gr[0];
                gy += dq[c] * gr[1];
            }
            grad[a] = Vec2::new(gx.re, gy.re);
            for b in 0..k {
                let mut blk = [C64::new(0.0, 0.0); 4];
                for c in 0..nc {
                    let ga = d.grad[a * nc + c];
                    let tb = t[b * nc + c];
                    blk[0] += ga[0] * tb[0];
                    blk[1] += ga[0] * tb[1];
                    blk[2] += ga[1] * tb[0];
                    blk[3] += ga[1] * tb[1];
                }
                if a == b {
                    for c in 0..nc {
                        let h = d.hess[a * nc + c];
                        for s in 0..4 {
                            blk[s] += dq[c] * h[s];
                        }
                    }
                }
                hess[a * k + b] = [blk[0].re, blk[1].re, blk[2].re, blk[3].re];
            }
        }
        Ok(self.q_value(&d.a).re)
    }
}
