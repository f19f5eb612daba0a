//! Site potentials, the EAM reference model and assembly of the periodic
//! energy difference `𝓔(u) = Σ_ℓ V(g_ℓ(x + u)) − V(g_ℓ(x))`.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::lattice::{check_admissible, DefectedLattice, DisplacementField};
use crate::linalg::{Block, BlockSparse};
use crate::math::{exp, smoothstep5, sqrt, Vec2};
use crate::{Error, Result};

/// Admissibility parameter used by the assembler.
pub const DEFAULT_ADMISSIBILITY: f64 = 0.5;

/// A site energy of the deformed neighbour vectors `g_j = ρ_j + D_ρ u`.
///
/// Neighbours at or beyond [`cutoff`](SitePotential::cutoff) must not
/// contribute; the assembler drops them before calling.
pub trait SitePotential {
    fn cutoff(&self) -> f64;

    fn site_energy(&self, g: &[Vec2]) -> Result<f64>;

    /// Writes `∂V/∂g_j` into `grad` and returns `V`.
    fn site_gradient(&self, g: &[Vec2], grad: &mut [Vec2]) -> Result<f64>;

    /// Writes the gradient and the `k×k` Hessian blocks (row-major,
    /// `hess[a * k + b] = ∂²V/∂g_a∂g_b`) and returns `V`.
    fn site_hessian(&self, g: &[Vec2], grad: &mut [Vec2], hess: &mut [Block]) -> Result<f64>;
}

impl<P: SitePotential + ?Sized> SitePotential for &P {
    fn cutoff(&self) -> f64 {
        (**self).cutoff()
    }
    fn site_energy(&self, g: &[Vec2]) -> Result<f64> {
        (**self).site_energy(g)
    }
    fn site_gradient(&self, g: &[Vec2], grad: &mut [Vec2]) -> Result<f64> {
        (**self).site_gradient(g, grad)
    }
    fn site_hessian(&self, g: &[Vec2], grad: &mut [Vec2], hess: &mut [Block]) -> Result<f64> {
        (**self).site_hessian(g, grad, hess)
    }
}

/// `V = ½ Σ φ(r_j) + F(Σ ψ(r_j))` with a Morse pair term, exponential
/// density `ψ = e^{−λ r}` and embedding `F(t) = c1 √t + c2 t²`. Both `φ`
/// and `ψ` are multiplied by a C² taper on `[r_cut − w, r_cut]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EamToyPotential {
    pub pair_depth: f64,
    pub pair_stiffness: f64,
    pub pair_length: f64,
    pub density_decay: f64,
    pub embed_c1: f64,
    pub embed_c2: f64,
    pub cutoff: f64,
    pub taper_width: f64,
}

impl Default for EamToyPotential {
    fn default() -> Self {
        EamToyPotential {
            pair_depth: 1.0,
            pair_stiffness: 4.0,
            pair_length: 1.0,
            density_decay: 2.0,
            embed_c1: -1.0,
            embed_c2: 0.2,
            cutoff: 2.5,
            taper_width: 0.5,
        }
    }
}

/// Radial function value with first and second derivatives.
#[derive(Clone, Copy, Debug, Default)]
struct Radial {
    f: f64,
    d: f64,
    dd: f64,
}

impl EamToyPotential {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("pair_stiffness", self.pair_stiffness),
            ("pair_length", self.pair_length),
            ("density_decay", self.density_decay),
            ("cutoff", self.cutoff),
            ("taper_width", self.taper_width),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidSpec(alloc::format!("{name} must be positive")));
            }
        }
        for (name, v) in [("pair_depth", self.pair_depth), ("embed_c1", self.embed_c1), ("embed_c2", self.embed_c2)] {
            if !v.is_finite() {
                return Err(Error::InvalidSpec(alloc::format!("{name} must be finite")));
            }
        }
        if self.taper_width > self.cutoff {
            return Err(Error::InvalidSpec("taper_width exceeds cutoff".into()));
        }
        Ok(())
    }

    fn taper(&self, r: f64) -> Radial {
        let w = self.taper_width;
        let (s, ds, dds) = smoothstep5((r - (self.cutoff - w)) / w);
        Radial { f: 1.0 - s, d: -ds / w, dd: -dds / (w * w) }
    }

    fn tapered(&self, r: f64, raw: Radial) -> Radial {
        let t = self.taper(r);
        Radial { f: raw.f * t.f, d: raw.d * t.f + raw.f * t.d, dd: raw.dd * t.f + 2.0 * raw.d * t.d + raw.f * t.dd }
    }

    fn pair(&self, r: f64) -> Radial {
        if r >= self.cutoff {
            return Radial::default();
        }
        let a = self.pair_stiffness;
        let e1 = exp(-a * (r - self.pair_length));
        let e2 = e1 * e1;
        let d = self.pair_depth;
        let raw = Radial {
            f: d * (e2 - 2.0 * e1),
            d: d * (-2.0 * a * e2 + 2.0 * a * e1),
            dd: d * (4.0 * a * a * e2 - 2.0 * a * a * e1),
        };
        self.tapered(r, raw)
    }

    fn density(&self, r: f64) -> Radial {
        if r >= self.cutoff {
            return Radial::default();
        }
        let l = self.density_decay;
        let e = exp(-l * r);
        self.tapered(r, Radial { f: e, d: -l * e, dd: l * l * e })
    }

    fn embed(&self, t: f64) -> Radial {
        if t <= 0.0 {
            // isolated atom: no embedding contribution, no force
            return Radial::default();
        }
        let s = sqrt(t);
        Radial {
            f: self.embed_c1 * s + self.embed_c2 * t * t,
            d: 0.5 * self.embed_c1 / s + 2.0 * self.embed_c2 * t,
            dd: -0.25 * self.embed_c1 / (s * t) + 2.0 * self.embed_c2,
        }
    }

    /// Same parameters with all pair and embedding weights scaled by `s`.
    pub fn scaled_energy(&self, s: f64) -> Self {
        EamToyPotential {
            pair_depth: self.pair_depth * s,
            embed_c1: self.embed_c1 * s,
            embed_c2: self.embed_c2 * s,
            ..*self
        }
    }
}

fn radius(g: Vec2) -> Result<f64> {
    let r = g.norm();
    if !(r > 0.0) {
        return Err(Error::InadmissibleConfiguration);
    }
    Ok(r)
}

impl SitePotential for EamToyPotential {
    fn cutoff(&self) -> f64 {
        self.cutoff
    }

    fn site_energy(&self, g: &[Vec2]) -> Result<f64> {
        let mut pair = 0.0;
        let mut rho = 0.0;
        for &gj in g {
            let r = radius(gj)?;
            pair += self.pair(r).f;
            rho += self.density(r).f;
        }
        Ok(0.5 * pair + self.embed(rho).f)
    }

    fn site_gradient(&self, g: &[Vec2], grad: &mut [Vec2]) -> Result<f64> {
        let mut pair = 0.0;
        let mut rho = 0.0;
        for &gj in g {
            let r = radius(gj)?;
            pair += self.pair(r).f;
            rho += self.density(r).f;
        }
        let emb = self.embed(rho);
        for (gj, out) in g.iter().zip(grad.iter_mut()) {
            let r = gj.norm();
            let coef = 0.5 * self.pair(r).d + emb.d * self.density(r).d;
            *out = *gj * (coef / r);
        }
        Ok(0.5 * pair + emb.f)
    }

    fn site_hessian(&self, g: &[Vec2], grad: &mut [Vec2], hess: &mut [Block]) -> Result<f64> {
        let k = g.len();
        let mut pair = 0.0;
        let mut rho = 0.0;
        let mut radials = Vec::with_capacity(k);
        for &gj in g {
            let r = radius(gj)?;
            let p = self.pair(r);
            let d = self.density(r);
            pair += p.f;
            rho += d.f;
            radials.push((r, p, d));
        }
        let emb = self.embed(rho);
        hess.iter_mut().for_each(|b| *b = [0.0; 4]);
        // w_a = ψ'(r_a) ĝ_a, the density gradient
        let mut w = Vec::with_capacity(k);
        for a in 0..k {
            let (r, p, d) = radials[a];
            let e = g[a] * (1.0 / r);
            let f1 = 0.5 * p.d + emb.d * d.d;
            let f2 = 0.5 * p.dd + emb.d * d.dd;
            grad[a] = e * f1;
            // f'' ê êᵀ + (f'/r)(I − ê êᵀ)
            let t = f1 / r;
            let blk = &mut hess[a * k + a];
            blk[0] += (f2 - t) * e.x * e.x + t;
            blk[1] += (f2 - t) * e.x * e.y;
            blk[2] += (f2 - t) * e.y * e.x;
            blk[3] += (f2 - t) * e.y * e.y + t;
            w.push(e * d.d);
        }
        if emb.dd != 0.0 {
            for a in 0..k {
                for b in 0..k {
                    let blk = &mut hess[a * k + b];
                    blk[0] += emb.dd * w[a].x * w[b].x;
                    blk[1] += emb.dd * w[a].x * w[b].y;
                    blk[2] += emb.dd * w[a].y * w[b].x;
                    blk[3] += emb.dd * w[a].y * w[b].y;
                }
            }
        }
        Ok(0.5 * pair + emb.f)
    }
}

/// Energy, forces and force constants of a site potential on a periodic
/// defected lattice, relative to the reference configuration `u ≡ 0`.
pub struct Assembler<'a, P: SitePotential + ?Sized> {
    lattice: &'a DefectedLattice,
    pot: &'a P,
    reference: Vec<f64>,
    admissibility: f64,
}

/// Deformed bonds of site `i` inside the cutoff and the matching sites.
fn environment(lattice: &DefectedLattice, u: &[Vec2], i: usize, rc: f64, g: &mut Vec<Vec2>, sites: &mut Vec<usize>) {
    g.clear();
    sites.clear();
    let rc2 = rc * rc;
    let ui = u[i];
    for nb in lattice.neighbors(i) {
        let y = nb.bond + u[nb.site] - ui;
        if y.norm2() < rc2 {
            g.push(y);
            sites.push(nb.site);
        }
    }
}

impl<'a, P: SitePotential + ?Sized> Assembler<'a, P> {
    pub fn new(lattice: &'a DefectedLattice, pot: &'a P) -> Result<Self> {
        if !(pot.cutoff() < lattice.list_radius()) {
            return Err(Error::InvalidSpec(alloc::format!(
                "potential cutoff {} must be below the neighbour-list radius {}",
                pot.cutoff(),
                lattice.list_radius()
            )));
        }
        let zero = vec![Vec2::ZERO; lattice.n_sites()];
        let mut g = Vec::new();
        let mut sites = Vec::new();
        let mut reference = Vec::with_capacity(lattice.n_sites());
        for i in 0..lattice.n_sites() {
            environment(lattice, &zero, i, pot.cutoff(), &mut g, &mut sites);
            reference.push(pot.site_energy(&g)?);
        }
        Ok(Assembler { lattice, pot, reference, admissibility: DEFAULT_ADMISSIBILITY })
    }

    pub fn lattice(&self) -> &'a DefectedLattice {
        self.lattice
    }

    pub fn potential(&self) -> &'a P {
        self.pot
    }

    pub fn admissibility(&self) -> f64 {
        self.admissibility
    }

    /// Site energies of the reference configuration `V(g_ℓ(x))`.
    pub fn reference_site_energies(&self) -> &[f64] {
        &self.reference
    }

    /// Admissible and inside the range the neighbour list can represent.
    pub fn check(&self, u: &DisplacementField) -> Result<()> {
        u.check(self.lattice)?;
        let skin = self.lattice.list_radius() - self.pot.cutoff();
        if !(u.max_relative_norm() < 0.5 * skin) || !check_admissible(self.lattice, u, self.admissibility) {
            return Err(Error::InadmissibleConfiguration);
        }
        Ok(())
    }

    /// `V_ℓ(Du(ℓ))` for a single site, without the admissibility check.
    pub fn site_energy_difference(&self, u: &DisplacementField, i: usize) -> Result<f64> {
        let mut g = Vec::new();
        let mut sites = Vec::new();
        environment(self.lattice, &u.values, i, self.pot.cutoff(), &mut g, &mut sites);
        Ok(self.pot.site_energy(&g)? - self.reference[i])
    }

    pub fn site_energies(&self, u: &DisplacementField) -> Result<Vec<f64>> {
        self.check(u)?;
        let mut g = Vec::new();
        let mut sites = Vec::new();
        let mut out = Vec::with_capacity(self.lattice.n_sites());
        for i in 0..self.lattice.n_sites() {
            environment(self.lattice, &u.values, i, self.pot.cutoff(), &mut g, &mut sites);
            out.push(self.pot.site_energy(&g)? - self.reference[i]);
        }
        Ok(out)
    }

    pub fn energy(&self, u: &DisplacementField) -> Result<f64> {
        Ok(self.site_energies(u)?.iter().sum())
    }

    /// Energy and gradient `∂𝓔/∂u` (forces are its negative).
    pub fn energy_gradient(&self, u: &DisplacementField) -> Result<(f64, Vec<Vec2>)> {
        self.check(u)?;
        let n = self.lattice.n_sites();
        let mut grad = vec![Vec2::ZERO; n];
        let mut g = Vec::new();
        let mut sites = Vec::new();
        let mut dv = Vec::new();
        let mut energy = 0.0;
        for i in 0..n {
            environment(self.lattice, &u.values, i, self.pot.cutoff(), &mut g, &mut sites);
            dv.clear();
            dv.resize(g.len(), Vec2::ZERO);
            energy += self.pot.site_gradient(&g, &mut dv)? - self.reference[i];
            for (&j, &d) in sites.iter().zip(&dv) {
                grad[j] += d;
                grad[i] -= d;
            }
        }
        Ok((energy, grad))
    }

    pub fn forces(&self, u: &DisplacementField) -> Result<Vec<Vec2>> {
        let (_, grad) = self.energy_gradient(u)?;
        Ok(grad.into_iter().map(|g| -g).collect())
    }

    /// `∇²𝓔(u)` as a block-sparse symmetric operator.
    pub fn hessian(&self, u: &DisplacementField) -> Result<BlockSparse> {
        self.check(u)?;
        let n = self.lattice.n_sites();
        let mut h = BlockSparse::new(n);
        let mut g = Vec::new();
        let mut sites = Vec::new();
        let mut dv = Vec::new();
        let mut blocks = Vec::new();
        let mut row_sums: Vec<Block> = Vec::new();
        let mut col_sums: Vec<Block> = Vec::new();
        for i in 0..n {
            environment(self.lattice, &u.values, i, self.pot.cutoff(), &mut g, &mut sites);
            let k = g.len();
            dv.clear();
            dv.resize(k, Vec2::ZERO);
            blocks.clear();
            blocks.resize(k * k, [0.0; 4]);
            self.pot.site_hessian(&g, &mut dv, &mut blocks)?;
            row_sums.clear();
            row_sums.resize(k, [0.0; 4]);
            col_sums.clear();
            col_sums.resize(k, [0.0; 4]);
            let mut total = [0.0; 4];
            for a in 0..k {
                for b in 0..k {
                    let blk = blocks[a * k + b];
                    h.add(sites[a], sites[b], &blk);
                    for c in 0..4 {
                        row_sums[a][c] += blk[c];
                        col_sums[b][c] += blk[c];
                        total[c] += blk[c];
                    }
                }
            }
            for a in 0..k {
                let r = row_sums[a].map(|x| -x);
                h.add(sites[a], i, &r);
                let c = col_sums[a].map(|x| -x);
                h.add(i, sites[a], &c);
            }
            h.add(i, i, &total);
        }
        Ok(h)
    }
}

/// Neighbour vectors of a perfect triangular-type lattice at scale `s` within
/// `rc`, given unit-scale lattice vectors.
pub fn homogeneous_environment(a1: Vec2, a2: Vec2, s: f64, rc: f64) -> Vec<Vec2> {
    let area = (a1.x * a2.y - a1.y * a2.x).abs();
    let h = (area / a1.norm()).min(area / a2.norm()) * s;
    let n = crate::math::ceil(rc / h) as i64 + 1;
    let mut g = Vec::new();
    for j in -n..=n {
        for i in -n..=n {
            if i == 0 && j == 0 {
                continue;
            }
            let x = (a1 * i as f64 + a2 * j as f64) * s;
            if x.norm() < rc {
                g.push(x);
            }
        }
    }
    g
}

/// Energy per atom of the homogeneous triangular lattice at spacing `s`,
/// with its first and second derivatives in `s`.
pub fn energy_per_atom<P: SitePotential + ?Sized>(pot: &P, s: f64) -> Result<(f64, f64, f64)> {
    let a1 = Vec2::new(1.0, 0.0);
    let a2 = Vec2::new(0.5, 0.5 * sqrt(3.0));
    let g = homogeneous_environment(a1, a2, s, pot.cutoff());
    let k = g.len();
    let mut grad = vec![Vec2::ZERO; k];
    let mut hess = vec![[0.0; 4]; k * k];
    let e = pot.site_hessian(&g, &mut grad, &mut hess)?;
    // dg/ds = g / s
    let t: Vec<Vec2> = g.iter().map(|x| *x * (1.0 / s)).collect();
    let de: f64 = grad.iter().zip(&t).map(|(a, b)| a.dot(*b)).sum();
    let mut dde = 0.0;
    for a in 0..k {
        for b in 0..k {
            let h = hess[a * k + b];
            dde += t[a].x * (h[0] * t[b].x + h[1] * t[b].y) + t[a].y * (h[2] * t[b].x + h[3] * t[b].y);
        }
    }
    Ok((e, de, dde))
}

/// Lattice spacing minimising the homogeneous energy per atom on
/// `[lo, hi]`; golden-section search followed by Newton refinement.
pub fn calibrate_r0_in<P: SitePotential + ?Sized>(pot: &P, lo: f64, hi: f64) -> Result<f64> {
    let e = |s: f64| -> Result<f64> { Ok(energy_per_atom(pot, s)?.0) };
    let phi = 0.5 * (sqrt(5.0) - 1.0);
    let (mut a, mut b) = (lo, hi);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (e(c)?, e(d)?);
    while b - a > 1e-7 * (hi - lo) {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = e(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = e(d)?;
        }
    }
    let mut s = 0.5 * (a + b);
    let edge = 1e-4 * (hi - lo);
    if s - lo < edge || hi - s < edge {
        return Err(Error::NoMinimumInBracket { lo, hi });
    }
    for _ in 0..50 {
        let (_, de, dde) = energy_per_atom(pot, s)?;
        if de.abs() < 1e-12 {
            break;
        }
        if !(dde > 0.0) {
            return Err(Error::NoMinimumInBracket { lo, hi });
        }
        let step = de / dde;
        s -= step;
        if step.abs() < 1e-15 * s {
            break;
        }
    }
    let (_, de, dde) = energy_per_atom(pot, s)?;
    if !(de.abs() < 1e-10) || !(dde > 0.0) || s <= lo || s >= hi {
        return Err(Error::NoMinimumInBracket { lo, hi });
    }
    Ok(s)
}

/// [`calibrate_r0_in`] over `[0.6, 1.6]·pair_length`.
pub fn calibrate_r0(pot: &EamToyPotential) -> Result<f64> {
    pot.validate()?;
    calibrate_r0_in(pot, 0.6 * pot.pair_length, 1.6 * pot.pair_length)
}

/// Normwise relative errors of analytic derivatives against central
/// differences with step `h`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DerivativeErrors {
    /// `max |∂𝓔_fd − ∂𝓔| / max |∂𝓔|`.
    pub force: f64,
    /// `max |∂²𝓔_fd − ∂²𝓔| / max |∂²𝓔|`, differencing the gradient.
    pub hessian: f64,
}

impl DerivativeErrors {
    pub fn max(self, other: DerivativeErrors) -> DerivativeErrors {
        DerivativeErrors { force: self.force.max(other.force), hessian: self.hessian.max(other.hessian) }
    }
}

pub fn derivative_errors<P: SitePotential + ?Sized>(
    asm: &Assembler<'_, P>,
    u: &DisplacementField,
    h: f64,
) -> Result<DerivativeErrors> {
    let (_, g) = asm.energy_gradient(u)?;
    let dense = asm.hessian(u)?.to_dense();
    let dim = 2 * u.len();
    let gmax = g.iter().map(|v| v.x.abs().max(v.y.abs())).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let hmax = dense.iter().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut out = DerivativeErrors::default();
    for j in 0..dim {
        let (s, ax) = (j / 2, j % 2);
        let mut up = u.clone();
        up.values[s].set(ax, u.values[s].get(ax) + h);
        let mut dn = u.clone();
        dn.values[s].set(ax, u.values[s].get(ax) - h);
        let (eu, gu) = asm.energy_gradient(&up)?;
        let (ed, gd) = asm.energy_gradient(&dn)?;
        out.force = out.force.max(((eu - ed) / (2.0 * h) - g[s].get(ax)).abs() / gmax);
        for i in 0..dim {
            let fd = (gu[i / 2].get(i % 2) - gd[i / 2].get(i % 2)) / (2.0 * h);
            out.hessian = out.hessian.max((fd - dense[i * dim + j]).abs() / hmax);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_lattice, BravaisSpec, Defect, DefectSet, SupercellSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize, defects: Vec<Defect>) -> (EamToyPotential, DefectedLattice) {
        let pot = EamToyPotential::default();
        let r0 = calibrate_r0(&pot).unwrap();
        let b = BravaisSpec::triangular(r0);
        let lat = build_lattice(&b, &SupercellSpec::new(n), &DefectSet::new(defects, r0)).unwrap();
        (pot, lat)
    }

    fn random_field(n: usize, seed: u64, amp: f64) -> DisplacementField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DisplacementField::from_values(
            (0..n).map(|_| Vec2::new(amp * (rng.random::<f64>() - 0.5), amp * (rng.random::<f64>() - 0.5))).collect(),
        )
    }

    #[test]
    fn pair_and_density_vanish_smoothly_at_cutoff() {
        let p = EamToyPotential::default();
        for f in [EamToyPotential::pair, EamToyPotential::density] {
            let v = f(&p, p.cutoff - 1e-9);
            assert!(v.f.abs() < 1e-20 && v.d.abs() < 1e-12 && v.dd.abs() < 1e-6);
            let z = f(&p, p.cutoff);
            assert_eq!((z.f, z.d, z.dd), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn radial_derivatives_match_finite_differences() {
        let p = EamToyPotential::default();
        let h = 1e-6;
        for &r in &[0.8, 1.0, 1.7, 2.1, 2.3, 2.45] {
            for f in [EamToyPotential::pair, EamToyPotential::density] {
                let v = f(&p, r);
                let fd = (f(&p, r + h).f - f(&p, r - h).f) / (2.0 * h);
                let fdd = (f(&p, r + h).d - f(&p, r - h).d) / (2.0 * h);
                assert!((v.d - fd).abs() < 1e-7 * (1.0 + v.d.abs()));
                assert!((v.dd - fdd).abs() < 1e-6 * (1.0 + v.dd.abs()));
            }
        }
    }

    #[test]
    fn pair_only_r0_is_the_pair_minimum() {
        let pot = EamToyPotential {
            embed_c1: 0.0,
            embed_c2: 0.0,
            cutoff: 1.6,
            taper_width: 0.5,
            pair_length: 1.0,
            ..EamToyPotential::default()
        };
        let r0 = calibrate_r0(&pot).unwrap();
        assert!((r0 - 1.0).abs() < 1e-10);
        let deeper = pot.scaled_energy(2.0);
        assert!((calibrate_r0(&deeper).unwrap() - r0).abs() < 1e-10);
    }

    #[test]
    fn eam_r0_has_vanishing_derivative() {
        let pot = EamToyPotential::default();
        let r0 = calibrate_r0(&pot).unwrap();
        let (_, de, dde) = energy_per_atom(&pot, r0).unwrap();
        assert!(de.abs() < 1e-10);
        assert!(dde > 0.0);
        // golden-section oracle on a fine grid
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=2000 {
            let s = r0 - 0.05 + 1e-4 * 0.5 * k as f64;
            let e = energy_per_atom(&pot, s).unwrap().0;
            if e < best.0 {
                best = (e, s);
            }
        }
        assert!((best.1 - r0).abs() < 1e-4);
    }

    #[test]
    fn bracket_without_minimum_is_reported() {
        let pot = EamToyPotential::default();
        let r0 = calibrate_r0(&pot).unwrap();
        assert!(matches!(calibrate_r0_in(&pot, 1.1 * r0, 1.3 * r0), Err(Error::NoMinimumInBracket { .. })));
    }

    #[test]
    fn zero_and_translation_have_zero_energy() {
        let (pot, lat) = setup(5, vec![]);
        let asm = Assembler::new(&lat, &pot).unwrap();
        let zero = DisplacementField::zeros(lat.n_sites());
        assert_eq!(asm.energy(&zero).unwrap(), 0.0);
        let t = DisplacementField::from_values(vec![Vec2::new(0.13, -0.07); lat.n_sites()]);
        assert!(asm.energy(&t).unwrap().abs() < 1e-12);
        let f = asm.forces(&zero).unwrap();
        assert!(f.iter().all(|v| v.norm() < 1e-12));
    }

    #[test]
    fn energy_matches_double_loop_oracle() {
        let (pot, lat) = setup(3, vec![]);
        let asm = Assembler::new(&lat, &pot).unwrap();
        let u = random_field(lat.n_sites(), 3, 0.1 * lat.r0());
        let [c1, c2] = lat.cell_vectors();
        let site = |disp: &DisplacementField, i: usize| -> f64 {
            let mut pair = 0.0;
            let mut rho = 0.0;
            for j in 0..lat.n_sites() {
                for s1 in -3..=3 {
                    for s2 in -3..=3 {
                        if i == j && s1 == 0 && s2 == 0 {
                            continue;
                        }
                        let y = lat.position(j) + disp.values[j] + c1 * s1 as f64 + c2 * s2 as f64
                            - lat.position(i)
                            - disp.values[i];
                        let r = y.norm();
                        pair += pot.pair(r).f;
                        rho += pot.density(r).f;
                    }
                }
            }
            0.5 * pair + pot.embed(rho).f
        };
        let zero = DisplacementField::zeros(lat.n_sites());
        let oracle: f64 = (0..lat.n_sites()).map(|i| site(&u, i) - site(&zero, i)).sum();
        let e = asm.energy(&u).unwrap();
        assert!((e - oracle).abs() < 1e-12 * oracle.abs().max(1e-3), "{e} vs {oracle}");
    }

    #[test]
    fn vacancy_forces_match_finite_differences_and_decay() {
        let (pot, lat) = setup(8, vec![Defect::vacancy(Vec2::ZERO)]);
        let asm = Assembler::new(&lat, &pot).unwrap();
        let zero = DisplacementField::zeros(lat.n_sites());
        let f = asm.forces(&zero).unwrap();
        let h = 1e-5 * lat.r0();
        let mut max_err: f64 = 0.0;
        let fmax = f.iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(fmax > 1e-3);
        for i in 0..lat.n_sites() {
            for ax in 0..2 {
                let mut up = zero.clone();
                up.values[i].set(ax, h);
                let mut dn = zero.clone();
                dn.values[i].set(ax, -h);
                let fd = -(asm.energy(&up).unwrap() - asm.energy(&dn).unwrap()) / (2.0 * h);
                max_err = max_err.max((fd - f[i].get(ax)).abs() / fmax);
            }
        }
        assert!(max_err < 1e-6, "{max_err}");
        let near = lat.site_at(lat.bravais().a1).unwrap();
        let far = lat.site_at(lat.bravais().point(4, 0)).unwrap();
        assert!(f[far].norm() < 0.1 * f[near].norm());
        let net = f.iter().fold(Vec2::ZERO, |a, b| a + *b);
        assert!(net.norm() < 1e-10 * fmax);
    }

    #[test]
    fn hessian_matches_finite_differences_of_forces() {
        let (pot, lat) = setup(4, vec![]);
        let asm = Assembler::new(&lat, &pot).unwrap();
        let u = random_field(lat.n_sites(), 11, 0.1 * lat.r0());
        let hs = asm.hessian(&u).unwrap();
        let dense = hs.to_dense();
        let dim = 2 * lat.n_sites();
        let h = 1e-5 * lat.r0();
        let scale = hs.max_abs();
        let mut max_err: f64 = 0.0;
        for j in 0..dim {
            let mut up = u.clone();
            let mut dn = u.clone();
            let (s, ax) = (j / 2, j % 2);
            up.values[s].set(ax, u.values[s].get(ax) + h);
            dn.values[s].set(ax, u.values[s].get(ax) - h);
            let gu = asm.energy_gradient(&up).unwrap().1;
            let gd = asm.energy_gradient(&dn).unwrap().1;
            for i in 0..dim {
                let fd = (gu[i / 2].get(i % 2) - gd[i / 2].get(i % 2)) / (2.0 * h);
                max_err = max_err.max((fd - dense[i * dim + j]).abs() / scale);
            }
        }
        assert!(max_err < 1e-5, "{max_err}");
        assert!(hs.max_asymmetry() < 1e-12 * scale);
        assert!(hs.max_row_sum() < 1e-8 * scale);
    }

    #[test]
    fn homogeneous_hessian_is_positive_semidefinite_with_two_zero_modes() {
        let (pot, lat) = setup(6, vec![]);
        let asm = Assembler::new(&lat, &pot).unwrap();
        let hs = asm.hessian(&DisplacementField::zeros(lat.n_sites())).unwrap();
        let (vals, _) = crate::linalg::symmetric_eigen(&hs.to_dense(), hs.dim(), false).unwrap();
        let scale = vals[vals.len() - 1];
        assert!(vals[0].abs() < 1e-9 * scale && vals[1].abs() < 1e-9 * scale);
        assert!(vals[2] > 1e-6 * scale, "{}", vals[2]);
    }

    #[test]
    fn locality_is_bitwise() {
        let (pot, lat) = setup(12, vec![]);
        let asm = Assembler::new(&lat, &pot).unwrap();
        let u = random_field(lat.n_sites(), 4, 0.05);
        let i = lat.site_at(Vec2::ZERO).unwrap();
        let mut v = u.clone();
        for j in 0..lat.n_sites() {
            if lat.min_image(lat.position(j) - lat.position(i)).norm() > 2.0 * pot.cutoff {
                v.values[j] = Vec2::ZERO;
            }
        }
        assert_eq!(
            asm.site_energy_difference(&u, i).unwrap().to_bits(),
            asm.site_energy_difference(&v, i).unwrap().to_bits()
        );
    }

    #[test]
    fn site_energy_is_rotation_invariant() {
        let pot = EamToyPotential::default();
        let g = homogeneous_environment(Vec2::new(1.0, 0.0), Vec2::new(0.5, 0.8660254037844386), 1.02, pot.cutoff);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gp: Vec<Vec2> =
            g.iter().map(|x| *x + Vec2::new(0.05 * rng.random::<f64>(), 0.05 * rng.random::<f64>())).collect();
        let e = pot.site_energy(&gp).unwrap();
        let rot: Vec<Vec2> = gp.iter().map(|x| x.rotate(0.731)).collect();
        assert!((pot.site_energy(&rot).unwrap() - e).abs() < 1e-12 * e.abs());
    }

    #[test]
    fn inadmissible_configuration_is_rejected() {
        let (pot, lat) = setup(4, vec![]);
        let asm = Assembler::new(&lat, &pot).unwrap();
        let mut u = DisplacementField::zeros(lat.n_sites());
        u.values[0] = lat.bravais().a1 * 0.9;
        assert_eq!(asm.energy(&u).unwrap_err(), Error::InadmissibleConfiguration);
    }
}
