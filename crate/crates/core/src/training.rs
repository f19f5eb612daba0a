//! Training domains, perturbed samples around the training equilibrium and
//! the matching conditions between reference and surrogate.

use alloc::vec;
use alloc::vec::Vec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::equilibrate::{equilibrate_stable, EquilibriumResult, MinimizerConfig};
use crate::lattice::{
    build_lattice, BravaisSpec, Defect, DefectKind, DefectSet, DefectedLattice, DisplacementField, SupercellSpec,
};
use crate::linalg::{self, BlockSparse};
use crate::math::{sqrt, Vec2};
use crate::potential::{Assembler, SitePotential};
use crate::{Error, Result};

/// Smallest admitted training cell, in units of `r0`.
pub const MIN_TRAINING_SIZE: usize = 4;
const MAX_RESAMPLES: usize = 100;

#[derive(Clone, Debug)]
pub struct TrainingDomain {
    /// Side length in units of `r0`.
    pub size: usize,
    pub lattice: DefectedLattice,
    pub equilibrium: EquilibriumResult,
}

/// Defect of the given kind at (or next to) the origin.
pub fn defect_at_origin(bravais: &BravaisSpec, kind: DefectKind) -> Defect {
    match kind {
        DefectKind::Vacancy => Defect::vacancy(Vec2::ZERO),
        DefectKind::Interstitial => Defect::interstitial_near(bravais, Vec2::ZERO),
    }
}

/// Periodic `L × L` cell with one defect, equilibrated and checked for
/// strong stability.
pub fn make_training_domain<P: SitePotential + ?Sized>(
    bravais: &BravaisSpec,
    size: usize,
    kind: DefectKind,
    pot: &P,
    cfg: &MinimizerConfig,
) -> Result<TrainingDomain> {
    if size < MIN_TRAINING_SIZE {
        return Err(Error::InvalidSpec(alloc::format!(
            "training size {size} is below the minimum {MIN_TRAINING_SIZE}"
        )));
    }
    let defects = DefectSet::new(vec![defect_at_origin(bravais, kind)], bravais.r0);
    let lattice = build_lattice(bravais, &SupercellSpec::new(size), &defects)?;
    let equilibrium = {
        let asm = Assembler::new(&lattice, pot)?;
        equilibrate_stable(&asm, &DisplacementField::zeros(lattice.n_sites()), cfg)?
    };
    let c_bar = equilibrium.c_bar.unwrap_or(f64::NAN);
    if !(c_bar > 0.0) {
        return Err(Error::UnstableTrainingEquilibrium { c_bar });
    }
    Ok(TrainingDomain { size, lattice, equilibrium })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub u: DisplacementField,
    /// Reference energy difference `𝓔_L(u)`.
    pub energy: f64,
    pub forces: Vec<Vec2>,
    pub tag: Tag,
}

/// `n` configurations `ū_L + η`, `η` i.i.d. Gaussian with standard deviation
/// `delta · r0` per coordinate, labelled with reference energies and forces.
pub fn sample_configs<P: SitePotential + ?Sized>(
    domain: &TrainingDomain,
    pot: &P,
    n: usize,
    delta: f64,
    seed: u64,
    tag: Tag,
) -> Result<Vec<Observation>> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::InvalidSpec("delta must be nonnegative".into()));
    }
    let asm = Assembler::new(&domain.lattice, pot)?;
    let normal = Normal::new(0.0, delta * domain.lattice.r0()).map_err(|_| Error::InvalidSpec("bad delta".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = &domain.equilibrium.u_bar;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut accepted = None;
        for _ in 0..MAX_RESAMPLES {
            let u = DisplacementField::from_values(
                base.values.iter().map(|b| *b + Vec2::new(normal.sample(&mut rng), normal.sample(&mut rng))).collect(),
            );
            if asm.check(&u).is_ok() {
                accepted = Some(u);
                break;
            }
        }
        let u = accepted.ok_or(Error::InadmissibleSample { attempts: MAX_RESAMPLES })?;
        let (energy, grad) = asm.energy_gradient(&u)?;
        out.push(Observation { u, energy, forces: grad.into_iter().map(|g| -g).collect(), tag });
    }
    Ok(out)
}

/// Matching conditions measured on the training domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchingReport {
    pub eps_e: f64,
    pub eps_f: f64,
    pub eps_fc: f64,
    pub eps_fc_hom: f64,
    /// `eps_fc_hom / ‖∇²𝓔^h(0)‖`.
    pub eps_fc_hom_relative: f64,
    pub rmse_e: f64,
    pub rmse_f: f64,
}

/// Energy (per site) and force (per component) RMSE of `model` on `samples`.
pub fn rmse<Q: SitePotential + ?Sized>(
    lattice: &DefectedLattice,
    model: &Q,
    samples: &[&Observation],
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let asm = Assembler::new(lattice, model)?;
    let n = lattice.n_sites() as f64;
    let (mut se, mut sf) = (0.0, 0.0);
    for obs in samples {
        let (e, g) = asm.energy_gradient(&obs.u)?;
        se += ((e - obs.energy) / n) * ((e - obs.energy) / n);
        for (gi, fi) in g.iter().zip(&obs.forces) {
            let d = -*gi - *fi;
            sf += d.x * d.x + d.y * d.y;
        }
    }
    let m = samples.len() as f64;
    Ok((sqrt(se / m), sqrt(sf / (2.0 * n * m))))
}

const DENSE_NORM_LIMIT: usize = 500;

/// `‖A‖₂` of a symmetric block operator: dense eigenvalues for small
/// dimensions, power iteration otherwise.
pub fn operator_norm(a: &BlockSparse, seed: u64) -> Result<f64> {
    let dim = a.dim();
    if dim == 0 {
        return Ok(0.0);
    }
    if dim <= DENSE_NORM_LIMIT {
        let (vals, _) = linalg::symmetric_eigen(&a.to_dense(), dim, false)?;
        return Ok(vals[0].abs().max(vals[dim - 1].abs()));
    }
    linalg::spectral_norm(|v, w| a.matvec_into(v, w), dim, seed, 1e-6, 5_000)
}

/// `ε^E`, `ε^F` (max over all samples), `ε^FC` at `ū_L`, `ε^FC_hom` on the
/// defect-free cell at `u = 0`, and test-split RMSE.
pub fn matching_report<P, Q>(
    domain: &TrainingDomain,
    reference: &P,
    model: &Q,
    samples: &[Observation],
) -> Result<MatchingReport>
where
    P: SitePotential + ?Sized,
    Q: SitePotential + ?Sized,
{
    if samples.is_empty() {
        return Err(Error::InvalidSpec("matching report needs at least one sample".into()));
    }
    let lat = &domain.lattice;
    let sur = Assembler::new(lat, model)?;
    let mut eps_e: f64 = 0.0;
    let mut eps_f: f64 = 0.0;
    for obs in samples {
        let (e, g) = sur.energy_gradient(&obs.u)?;
        eps_e = eps_e.max((e - obs.energy).abs());
        let f2: f64 = g.iter().zip(&obs.forces).map(|(gi, fi)| (-*gi - *fi).norm2()).sum();
        eps_f = eps_f.max(sqrt(f2));
    }
    let refa = Assembler::new(lat, reference)?;
    let h_ref = refa.hessian(&domain.equilibrium.u_bar)?;
    let h_sur = sur.hessian(&domain.equilibrium.u_bar)?;
    let eps_fc = operator_norm(&h_ref.difference(&h_sur), 0xfc)?;

    let hom = build_lattice(
        lat.bravais(),
        &SupercellSpec::new(domain.size),
        &DefectSet::new(Vec::new(), lat.defects().core_radius),
    )?;
    let zero = DisplacementField::zeros(hom.n_sites());
    let h_ref_hom = Assembler::new(&hom, reference)?.hessian(&zero)?;
    let h_sur_hom = Assembler::new(&hom, model)?.hessian(&zero)?;
    let eps_fc_hom = operator_norm(&h_ref_hom.difference(&h_sur_hom), 0xfc)?;
    let hom_norm = operator_norm(&h_ref_hom, 0xfc)?;

    let test: Vec<&Observation> = samples.iter().filter(|o| o.tag == Tag::Test).collect();
    let (rmse_e, rmse_f) = rmse(lat, model, &test)?;
    Ok(MatchingReport {
        eps_e,
        eps_f,
        eps_fc,
        eps_fc_hom,
        eps_fc_hom_relative: if hom_norm > 0.0 { eps_fc_hom / hom_norm } else { 0.0 },
        rmse_e,
        rmse_f,
    })
}
