//! Periodic Bravais supercells with point defects, neighbour lists and the
//! nearest-neighbour stencil norms used to measure geometry errors.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::math::{ceil, round, sqrt, Vec2};
use crate::{Error, Result};

/// Default neighbour-list radius in units of `r0`.
pub const DEFAULT_LIST_RADIUS: f64 = 3.5;
/// Pairs closer than this (in `r0`) in the reference configuration are
/// checked for admissibility.
pub const ADMISSIBILITY_RADIUS: f64 = 3.0;
/// Voronoi neighbour candidates are restricted to this radius (in `r0`).
pub const VORONOI_CANDIDATE_RADIUS: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BravaisSpec {
    /// First lattice vector (column of `A`).
    pub a1: Vec2,
    /// Second lattice vector.
    pub a2: Vec2,
    /// Lattice scale, used for all tolerances and relative radii.
    pub r0: f64,
}

impl BravaisSpec {
    /// `A = r0 [[1, 1/2], [0, √3/2]]`.
    pub fn triangular(r0: f64) -> Self {
        BravaisSpec { a1: Vec2::new(r0, 0.0), a2: Vec2::new(0.5 * r0, 0.5 * sqrt(3.0) * r0), r0 }
    }

    pub fn det(&self) -> f64 {
        self.a1.x * self.a2.y - self.a1.y * self.a2.x
    }

    pub fn point(&self, n1: i64, n2: i64) -> Vec2 {
        self.a1 * n1 as f64 + self.a2 * n2 as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r0 > 0.0) {
            return Err(Error::InvalidSpec("r0 must be positive".into()));
        }
        if self.det().abs() < 1e-12 * self.r0 * self.r0 {
            return Err(Error::SingularCell);
        }
        Ok(())
    }
}

/// Supercell `Ω_N = B (-N/2, N/2]^2` with `B = A M` for an integer matrix `M`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupercellSpec {
    pub repeat: usize,
    /// Columns of `M`: `b_k = m[k][0] a1 + m[k][1] a2`.
    pub cell_vectors: [[i64; 2]; 2],
}

impl SupercellSpec {
    pub fn new(repeat: usize) -> Self {
        SupercellSpec { repeat, cell_vectors: [[1, 0], [0, 1]] }
    }

    fn det_m(&self) -> i64 {
        let m = self.cell_vectors;
        m[0][0] * m[1][1] - m[1][0] * m[0][1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectKind {
    Vacancy,
    Interstitial,
}

impl DefectKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DefectKind::Vacancy => "vacancy",
            DefectKind::Interstitial => "interstitial",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Defect {
    pub kind: DefectKind,
    pub position: Vec2,
}

impl Defect {
    pub fn vacancy(position: Vec2) -> Self {
        Defect { kind: DefectKind::Vacancy, position }
    }

    /// Interstitial at the centroid of the triangle spanned by `site`,
    /// `site + a1` and `site + a2`.
    pub fn interstitial_near(bravais: &BravaisSpec, site: Vec2) -> Self {
        Defect { kind: DefectKind::Interstitial, position: site + (bravais.a1 + bravais.a2) * (1.0 / 3.0) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectSet {
    pub defects: Vec<Defect>,
    /// `R_def`, in length units.
    pub core_radius: f64,
}

impl DefectSet {
    pub fn new(defects: Vec<Defect>, core_radius: f64) -> Self {
        DefectSet { defects, core_radius }
    }

    pub fn len(&self) -> usize {
        self.defects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.defects.is_empty()
    }
}

/// One entry of a neighbour list: the neighbouring site and the reference
/// bond vector `x_j + shift - x_i` (periodic image already applied).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub site: usize,
    pub bond: Vec2,
}

#[derive(Clone, Debug)]
pub struct DefectedLattice {
    bravais: BravaisSpec,
    supercell: SupercellSpec,
    defects: DefectSet,
    cell: [Vec2; 2],
    inv_cell: [[f64; 2]; 2],
    positions: Vec<Vec2>,
    interstitial: Vec<bool>,
    list_radius: f64,
    neighbors: Vec<Vec<Neighbor>>,
    nn: Vec<Vec<Neighbor>>,
    lookup: Vec<((i64, i64), usize)>,
}

/// Periodic lattice with vacancies removed and interstitials appended, using
/// the default neighbour-list radius.
pub fn build_lattice(bravais: &BravaisSpec, cell: &SupercellSpec, defects: &DefectSet) -> Result<DefectedLattice> {
    build_lattice_with_radius(bravais, cell, defects, DEFAULT_LIST_RADIUS * bravais.r0)
}

pub fn build_lattice_with_radius(
    bravais: &BravaisSpec,
    cell: &SupercellSpec,
    defects: &DefectSet,
    list_radius: f64,
) -> Result<DefectedLattice> {
    bravais.validate()?;
    let n = cell.repeat as i64;
    let det_m = cell.det_m();
    if n < 1 || det_m == 0 {
        return Err(Error::SingularCell);
    }
    let r0 = bravais.r0;
    let m = cell.cell_vectors;
    let b1 = bravais.point(m[0][0], m[0][1]) * n as f64;
    let b2 = bravais.point(m[1][0], m[1][1]) * n as f64;
    let det_b = b1.x * b2.y - b1.y * b2.x;
    if det_b.abs() < 1e-12 * r0 * r0 {
        return Err(Error::SingularCell);
    }
    let inv_cell = [[b2.y / det_b, -b2.x / det_b], [-b1.y / det_b, b1.x / det_b]];

    // Integer coordinates n (in the A basis) lie inside the cell iff
    // adj(M) n ∈ (-N det/2, N det/2]^2 (sign-adjusted), which is exact.
    let adj = [[m[1][1], -m[1][0]], [-m[0][1], m[0][0]]];
    let (sgn, ad) = if det_m > 0 { (1, det_m) } else { (-1, -det_m) };
    let half_twice = n * ad; // compare 2*adj·n against ±N det
    let extent = n * (m[0][0].abs() + m[0][1].abs() + m[1][0].abs() + m[1][1].abs()) + 1;
    let mut positions = Vec::new();
    for n2 in -extent..=extent {
        for n1 in -extent..=extent {
            let f1 = sgn * 2 * (adj[0][0] * n1 + adj[0][1] * n2);
            let f2 = sgn * 2 * (adj[1][0] * n1 + adj[1][1] * n2);
            if f1 > -half_twice && f1 <= half_twice && f2 > -half_twice && f2 <= half_twice {
                positions.push(bravais.point(n1, n2));
            }
        }
    }
    let expected = (n * n * ad) as usize;
    debug_assert_eq!(positions.len(), expected);

    let mut lat = DefectedLattice {
        bravais: *bravais,
        supercell: *cell,
        defects: DefectSet::new(Vec::new(), defects.core_radius),
        cell: [b1, b2],
        inv_cell,
        positions,
        interstitial: Vec::new(),
        list_radius,
        neighbors: Vec::new(),
        nn: Vec::new(),
        lookup: Vec::new(),
    };

    // Place defects.
    if !(defects.core_radius > 0.0) {
        return Err(Error::InvalidSpec("core radius must be positive".into()));
    }
    let mut vacancies = Vec::new();
    let mut interstitials = Vec::new();
    for (index, d) in defects.defects.iter().enumerate() {
        let f = lat.fractional(d.position);
        let tol = 1e-9;
        if !(f[0] > -0.5 - tol && f[0] <= 0.5 + tol && f[1] > -0.5 - tol && f[1] <= 0.5 + tol) {
            return Err(Error::DefectOutsideCell { index });
        }
        let p = lat.wrap(d.position);
        match d.kind {
            DefectKind::Vacancy => {
                let site = lat
                    .positions
                    .iter()
                    .position(|&x| lat.min_image(x - p).norm() < 1e-6 * r0)
                    .ok_or(Error::VacancyOffLattice { index })?;
                if vacancies.contains(&site) {
                    return Err(Error::OverlappingDefects { separation: 0.0, limit: 2.0 * defects.core_radius });
                }
                vacancies.push(site);
            }
            DefectKind::Interstitial => {
                let closest = lat.positions.iter().map(|&x| lat.min_image(x - p).norm()).fold(f64::INFINITY, f64::min);
                if closest < 0.3 * r0 {
                    return Err(Error::InterstitialTooClose { index });
                }
                interstitials.push(p);
            }
        }
        lat.defects.defects.push(Defect { kind: d.kind, position: p });
    }
    if lat.defects.defects.is_empty() {
        // Homogeneous lattice: nothing to separate.
    } else {
        let sep = min_separation(&lat);
        if sep < 2.0 * defects.core_radius {
            return Err(Error::OverlappingDefects { separation: sep, limit: 2.0 * defects.core_radius });
        }
    }
    vacancies.sort_unstable();
    let mut kept = Vec::with_capacity(lat.positions.len());
    for (i, &x) in lat.positions.iter().enumerate() {
        if vacancies.binary_search(&i).is_err() {
            kept.push(x);
        }
    }
    let n_lattice = kept.len();
    for &p in &interstitials {
        for q in &interstitials {
            if q != &p && lat.min_image(*q - p).norm() < 0.3 * r0 {
                return Err(Error::OverlappingDefects { separation: lat.min_image(*q - p).norm(), limit: 0.3 * r0 });
            }
        }
        kept.push(p);
    }
    lat.positions = kept;
    lat.interstitial = (0..lat.positions.len()).map(|i| i >= n_lattice).collect();

    lat.build_neighbors();
    lat.build_nearest_neighbors();
    lat.build_lookup();
    Ok(lat)
}

impl DefectedLattice {
    pub fn bravais(&self) -> &BravaisSpec {
        &self.bravais
    }

    pub fn supercell(&self) -> &SupercellSpec {
        &self.supercell
    }

    pub fn defects(&self) -> &DefectSet {
        &self.defects
    }

    pub fn r0(&self) -> f64 {
        self.bravais.r0
    }

    pub fn n_sites(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[Vec2] {
        &self.positions
    }

    pub fn position(&self, i: usize) -> Vec2 {
        self.positions[i]
    }

    pub fn is_interstitial(&self, i: usize) -> bool {
        self.interstitial[i]
    }

    pub fn cell_vectors(&self) -> [Vec2; 2] {
        self.cell
    }

    pub fn list_radius(&self) -> f64 {
        self.list_radius
    }

    /// Neighbours within the list radius, including periodic images.
    pub fn neighbors(&self, i: usize) -> &[Neighbor] {
        &self.neighbors[i]
    }

    /// Nearest-neighbour set `N(ℓ)` (Voronoi criterion).
    pub fn nearest_neighbors(&self, i: usize) -> &[Neighbor] {
        &self.nn[i]
    }

    /// Half of the shortest supercell side, used as the "domain radius".
    pub fn domain_radius(&self) -> f64 {
        0.5 * self.cell[0].norm().min(self.cell[1].norm())
    }

    pub fn fractional(&self, p: Vec2) -> [f64; 2] {
        let a = self.inv_cell;
        [a[0][0] * p.x + a[0][1] * p.y, a[1][0] * p.x + a[1][1] * p.y]
    }

    fn cartesian(&self, f: [f64; 2]) -> Vec2 {
        self.cell[0] * f[0] + self.cell[1] * f[1]
    }

    /// Wraps a point into `Ω_N`.
    pub fn wrap(&self, p: Vec2) -> Vec2 {
        let f = self.fractional(p);
        let g = [f[0] - ceil(f[0] - 0.5), f[1] - ceil(f[1] - 0.5)];
        self.cartesian(g)
    }

    /// Shortest periodic image of a difference vector.
    pub fn min_image(&self, d: Vec2) -> Vec2 {
        let f = self.fractional(d);
        let base = [f[0] - round(f[0]), f[1] - round(f[1])];
        let mut best = self.cartesian(base);
        let mut best_n = best.norm2();
        for s1 in -1..=1 {
            for s2 in -1..=1 {
                if s1 == 0 && s2 == 0 {
                    continue;
                }
                let c = self.cartesian([base[0] + s1 as f64, base[1] + s2 as f64]);
                let cn = c.norm2();
                if cn < best_n - 1e-12 * self.bravais.r0 * self.bravais.r0 {
                    best = c;
                    best_n = cn;
                }
            }
        }
        best
    }

    /// Length of the shortest non-zero supercell translation.
    pub fn shortest_period(&self) -> f64 {
        let mut best = f64::INFINITY;
        for s1 in -2i32..=2 {
            for s2 in -2i32..=2 {
                if s1 == 0 && s2 == 0 {
                    continue;
                }
                best = best.min((self.cell[0] * s1 as f64 + self.cell[1] * s2 as f64).norm());
            }
        }
        best
    }

    /// Site whose reference position coincides with `p` (after wrapping).
    pub fn site_at(&self, p: Vec2) -> Option<usize> {
        let key = self.key(self.wrap(p));
        for dk0 in -1..=1 {
            for dk1 in -1..=1 {
                let k = (key.0 + dk0, key.1 + dk1);
                if let Ok(pos) = self.lookup.binary_search_by_key(&k, |e| e.0) {
                    let i = self.lookup[pos].1;
                    if self.min_image(self.positions[i] - p).norm() < 1e-6 * self.bravais.r0 {
                        return Some(i);
                    }
                }
            }
        }
        None
    }

    fn key(&self, p: Vec2) -> (i64, i64) {
        let q = 1e-4 * self.bravais.r0;
        (round(p.x / q) as i64, round(p.y / q) as i64)
    }

    fn build_lookup(&mut self) {
        let mut lookup: Vec<((i64, i64), usize)> =
            self.positions.iter().enumerate().map(|(i, &p)| (self.key(p), i)).collect();
        lookup.sort_unstable();
        self.lookup = lookup;
    }

    fn cell_heights(&self) -> [f64; 2] {
        let area = (self.cell[0].x * self.cell[1].y - self.cell[0].y * self.cell[1].x).abs();
        [area / self.cell[1].norm(), area / self.cell[0].norm()]
    }

    fn build_neighbors(&mut self) {
        let n = self.positions.len();
        let rc = self.list_radius;
        let rc2 = rc * rc;
        let h = self.cell_heights();
        let bins = [floor_usize(h[0] / rc), floor_usize(h[1] / rc)];
        let mut neighbors: Vec<Vec<Neighbor>> = vec![Vec::new(); n];
        if bins[0] >= 3 && bins[1] >= 3 {
            // Cell list: every neighbour is the unique minimum image.
            let nb = bins[0] * bins[1];
            let mut heads: Vec<Vec<usize>> = vec![Vec::new(); nb];
            let bin_of = |f: [f64; 2]| -> (usize, usize) {
                let b0 = ((f[0] + 0.5) * bins[0] as f64) as isize;
                let b1 = ((f[1] + 0.5) * bins[1] as f64) as isize;
                (b0.clamp(0, bins[0] as isize - 1) as usize, b1.clamp(0, bins[1] as isize - 1) as usize)
            };
            let mut site_bins = Vec::with_capacity(n);
            for (i, &p) in self.positions.iter().enumerate() {
                let b = bin_of(self.fractional(p));
                heads[b.0 + bins[0] * b.1].push(i);
                site_bins.push(b);
            }
            for i in 0..n {
                let (b0, b1) = site_bins[i];
                let mut visited: Vec<usize> = Vec::with_capacity(9);
                for d1 in -1isize..=1 {
                    for d0 in -1isize..=1 {
                        let c0 = (b0 as isize + d0).rem_euclid(bins[0] as isize) as usize;
                        let c1 = (b1 as isize + d1).rem_euclid(bins[1] as isize) as usize;
                        let c = c0 + bins[0] * c1;
                        if visited.contains(&c) {
                            continue;
                        }
                        visited.push(c);
                        for &j in &heads[c] {
                            if j == i {
                                continue;
                            }
                            let d = self.min_image(self.positions[j] - self.positions[i]);
                            if d.norm2() <= rc2 {
                                neighbors[i].push(Neighbor { site: j, bond: d });
                            }
                        }
                    }
                }
            }
        } else {
            let k0 = ceil(rc / h[0]) as i64 + 1;
            let k1 = ceil(rc / h[1]) as i64 + 1;
            for i in 0..n {
                for j in 0..n {
                    let base = self.positions[j] - self.positions[i];
                    for s1 in -k0..=k0 {
                        for s2 in -k1..=k1 {
                            if i == j && s1 == 0 && s2 == 0 {
                                continue;
                            }
                            let d = base + self.cell[0] * s1 as f64 + self.cell[1] * s2 as f64;
                            if d.norm2() <= rc2 {
                                neighbors[i].push(Neighbor { site: j, bond: d });
                            }
                        }
                    }
                }
            }
        }
        for list in neighbors.iter_mut() {
            list.sort_by(|a, b| {
                a.site.cmp(&b.site).then(a.bond.x.total_cmp(&b.bond.x)).then(a.bond.y.total_cmp(&b.bond.y))
            });
        }
        self.neighbors = neighbors;
    }

    /// `m ∈ N(ℓ)` iff some point on the bisector of ℓ and m is at least as
    /// close to both as to every other site.
    fn build_nearest_neighbors(&mut self) {
        let r0 = self.bravais.r0;
        let cand_r = VORONOI_CANDIDATE_RADIUS * r0 * (1.0 + 1e-9);
        let tol = 1e-9 * r0;
        let mut nn = Vec::with_capacity(self.positions.len());
        for i in 0..self.positions.len() {
            let list = &self.neighbors[i];
            let mut set = Vec::new();
            for cand in list.iter().filter(|c| c.bond.norm() <= cand_r) {
                let m = cand.bond;
                let mid = m * 0.5;
                let dir = m.perp() * (1.0 / m.norm());
                let (mut lo, mut hi) = (-1e6 * r0, 1e6 * r0);
                for k in list {
                    if k.site == cand.site && (k.bond - m).norm() < tol {
                        continue;
                    }
                    // 2 a·k <= |k|^2 with a = mid + t dir
                    let kk = k.bond;
                    let coef = 2.0 * dir.dot(kk);
                    let rhs = kk.norm2() - 2.0 * mid.dot(kk);
                    if coef.abs() < 1e-14 * r0 {
                        if rhs < -tol * r0 {
                            lo = 1.0;
                            hi = -1.0;
                            break;
                        }
                    } else if coef > 0.0 {
                        hi = hi.min(rhs / coef);
                    } else {
                        lo = lo.max(rhs / coef);
                    }
                }
                if lo <= hi + tol {
                    set.push(*cand);
                }
            }
            nn.push(set);
        }
        self.nn = nn;
    }
}

fn floor_usize(x: f64) -> usize {
    if x <= 0.0 {
        0
    } else {
        crate::math::floor(x) as usize
    }
}

/// `L_D`: the smallest distance between distinct defect cores among all
/// periodic images. With a single defect this is the shortest supercell
/// period.
pub fn min_separation(lattice: &DefectedLattice) -> f64 {
    let defects = &lattice.defects.defects;
    let mut best = lattice.shortest_period();
    for i in 0..defects.len() {
        for j in (i + 1)..defects.len() {
            let d = lattice.min_image(defects[j].position - defects[i].position).norm();
            best = best.min(d);
        }
    }
    best
}

/// Periodic displacement field, one value per site of `Λ_N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementField {
    pub values: Vec<Vec2>,
}

impl DisplacementField {
    pub fn zeros(n: usize) -> Self {
        DisplacementField { values: vec![Vec2::ZERO; n] }
    }

    pub fn from_values(values: Vec<Vec2>) -> Self {
        DisplacementField { values }
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        DisplacementField { values: crate::math::unflatten(flat) }
    }

    pub fn flat(&self) -> Vec<f64> {
        crate::math::flatten(&self.values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check(&self, lattice: &DefectedLattice) -> Result<()> {
        if self.values.len() != lattice.n_sites() {
            return Err(Error::LatticeMismatch { expected: lattice.n_sites(), found: self.values.len() });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn difference(&self, other: &DisplacementField) -> DisplacementField {
        DisplacementField { values: self.values.iter().zip(&other.values).map(|(a, b)| *a - *b).collect() }
    }

    pub fn sum(&self, other: &DisplacementField) -> DisplacementField {
        DisplacementField { values: self.values.iter().zip(&other.values).map(|(a, b)| *a + *b).collect() }
    }

    pub fn scaled(&self, s: f64) -> DisplacementField {
        DisplacementField { values: self.values.iter().map(|v| *v * s).collect() }
    }

    pub fn max_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Largest deviation from the mean displacement.
    pub fn max_relative_norm(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        let mut mean = Vec2::ZERO;
        for v in &self.values {
            mean += *v;
        }
        let mean = mean * (1.0 / self.values.len() as f64);
        self.values.iter().map(|v| (*v - mean).norm()).fold(0.0, f64::max)
    }
}

/// `|Du(ℓ)|_N`.
pub fn stencil_norm(lattice: &DefectedLattice, u: &DisplacementField, site: usize) -> f64 {
    sqrt(stencil_norm2(lattice, u, site))
}

fn stencil_norm2(lattice: &DefectedLattice, u: &DisplacementField, site: usize) -> f64 {
    let ui = u.values[site];
    lattice.nn[site].iter().map(|nb| (u.values[nb.site] - ui).norm2()).sum()
}

/// `‖Du‖_{ℓ²_N(Λ_N)}`.
pub fn global_stencil_norm(lattice: &DefectedLattice, u: &DisplacementField) -> f64 {
    sqrt((0..lattice.n_sites()).map(|i| stencil_norm2(lattice, u, i)).sum())
}

/// Applies the operator `K` with `vᵀ K v = ‖Dv‖²` to a flattened field.
pub fn stencil_operator_apply(lattice: &DefectedLattice, v: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for i in 0..lattice.n_sites() {
        for nb in &lattice.nn[i] {
            let m = nb.site;
            let dx = v[2 * m] - v[2 * i];
            let dy = v[2 * m + 1] - v[2 * i + 1];
            out[2 * m] += dx;
            out[2 * m + 1] += dy;
            out[2 * i] -= dx;
            out[2 * i + 1] -= dy;
        }
    }
}

/// Dual norm `sup ⟨f, v⟩ / ‖Dv‖ = sqrt(fᵀ K⁺ f)` of a flattened force field
/// (its net force is projected out first).
pub fn dual_stencil_norm(lattice: &DefectedLattice, f: &[f64]) -> Result<f64> {
    let mut b = f.to_vec();
    crate::linalg::project_translations(&mut b);
    let scale = crate::linalg::norm(&b);
    if scale == 0.0 {
        return Ok(0.0);
    }
    let out = crate::linalg::conjugate_gradient(
        |v, w| stencil_operator_apply(lattice, v, w),
        &b,
        1e-11 * scale,
        20 * b.len() + 100,
        true,
    );
    if !out.converged {
        return Err(Error::NotConverged { iterations: out.iterations, residual: f64::NAN });
    }
    Ok(sqrt(crate::linalg::dot(&b, &out.x).max(0.0)))
}

/// `|y(ℓ) − y(k)| > m |ℓ − k|` for all reference pairs within
/// [`ADMISSIBILITY_RADIUS`] `r0`.
pub fn check_admissible(lattice: &DefectedLattice, u: &DisplacementField, m: f64) -> bool {
    if u.values.len() != lattice.n_sites() || !u.is_finite() {
        return false;
    }
    let rmax = ADMISSIBILITY_RADIUS * lattice.r0();
    for i in 0..lattice.n_sites() {
        for nb in &lattice.neighbors[i] {
            let r = nb.bond.norm();
            if r > rmax {
                continue;
            }
            let y = nb.bond + u.values[nb.site] - u.values[i];
            if !(y.norm() > m * r) {
                return false;
            }
        }
    }
    true
}
