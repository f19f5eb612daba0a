//! Subcommand implementations. Each returns the JSON summary printed on
//! success; artifacts go to the output directory.

use std::path::{Path, PathBuf};

use mlipgen_core::equilibrate::{check_stability, equilibrate};
use mlipgen_core::fit::{fit, LossWeights, TrainingData};
use mlipgen_core::lattice::{build_lattice, min_separation, DefectKind, DefectSet, DisplacementField, SupercellSpec};
use mlipgen_core::linalg::random_unit_vector;
use mlipgen_core::potential::{derivative_errors, Assembler, DerivativeErrors, SitePotential};
use mlipgen_core::surrogate::SurrogateModel;
use mlipgen_core::training::{make_training_domain, matching_report, sample_configs, Tag, TrainingDomain};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::artifact::{
    self, Metadata, ModelDocument, TrainingSetHeader, ENERGY_CONVENTION, TRAINING_SET_FORMAT_VERSION,
};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult, StageExt};
use crate::study::{run_study, test_seed};

pub fn generate_lattice(cfg: &RunConfig, out: &Path) -> CliResult<Value> {
    let lattice = cfg.lattice()?;
    let path = out.join("lattice.xyz");
    artifact::write_text(&path, &artifact::lattice_xyz(&Metadata::new(cfg, cfg.seed), &lattice))?;
    Ok(json!({
        "lattice": path,
        "n_sites": lattice.n_sites(),
        "n_defects": lattice.defects().len(),
        "min_separation": min_separation(&lattice),
        "r0": lattice.r0(),
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumDocument {
    pub metadata: Metadata,
    pub n_sites: usize,
    pub energy: f64,
    pub residual_force_norm: f64,
    pub c_bar: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub displacement: String,
}

pub fn equilibrate_lattice(cfg: &RunConfig, out: &Path) -> CliResult<Value> {
    let lattice = cfg.lattice()?;
    let asm = Assembler::new(&lattice, &cfg.potential).stage("assemble")?;
    let mut res =
        equilibrate(&asm, &DisplacementField::zeros(lattice.n_sites()), &cfg.minimizer).stage("equilibrate")?;
    res.c_bar = Some(check_stability(&asm, &res.u_bar).stage("stability")?);
    let meta = Metadata::new(cfg, cfg.seed);
    let csv = out.join("displacement.csv");
    artifact::write_text(&csv, &artifact::displacement_csv(&meta, &lattice, &res.u_bar))?;
    let doc = EquilibriumDocument {
        metadata: meta,
        n_sites: lattice.n_sites(),
        energy: res.energy,
        residual_force_norm: res.residual_force_norm,
        c_bar: res.c_bar,
        converged: res.converged,
        iterations: res.iterations,
        displacement: "displacement.csv".into(),
    };
    let path = out.join("equilibrium.json");
    artifact::write_json(&path, &doc)?;
    Ok(json!({ "equilibrium": path, "displacement": csv, "energy": res.energy, "c_bar": res.c_bar }))
}

/// Overrides of the `[training]` table.
#[derive(Clone, Debug, Default)]
pub struct TrainingFlags {
    pub size: Option<usize>,
    pub defect: Option<DefectKind>,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    pub delta: Option<f64>,
    pub seed: Option<u64>,
}

fn training_domain(cfg: &RunConfig, size: usize, kind: DefectKind) -> CliResult<TrainingDomain> {
    make_training_domain(&cfg.bravais()?, size, kind, &cfg.potential, &cfg.minimizer).stage("training_domain")
}

pub fn make_training_set(cfg: &RunConfig, flags: &TrainingFlags, dir: &Path) -> CliResult<Value> {
    let t = &cfg.training;
    let size = flags.size.unwrap_or(t.sizes[0]);
    let kind = flags.defect.unwrap_or(t.defect);
    let n_train = flags.n_train.unwrap_or(t.n_train);
    let n_test = flags.n_test.unwrap_or(t.n_test);
    let delta = flags.delta.unwrap_or(t.delta);
    let seed = flags.seed.unwrap_or(t.seeds[0]);
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(CliError::config("--delta", "must be nonnegative"));
    }
    let domain = training_domain(cfg, size, kind)?;
    let mut samples =
        sample_configs(&domain, &cfg.potential, n_train, delta, seed, Tag::Train).stage("sample_configs")?;
    samples.extend(
        sample_configs(&domain, &cfg.potential, n_test, delta, test_seed(seed), Tag::Test).stage("sample_configs")?,
    );
    let header = TrainingSetHeader {
        format_version: TRAINING_SET_FORMAT_VERSION,
        metadata: Metadata::new(cfg, seed),
        size,
        defect: kind,
        n_sites: domain.lattice.n_sites(),
        delta,
        train_seed: seed,
        test_seed: test_seed(seed),
        energy_convention: ENERGY_CONVENTION.into(),
    };
    artifact::write_training_set(dir, &header, &samples)?;
    Ok(json!({
        "training_set": dir.join(artifact::TRAINING_INDEX),
        "n_train": n_train,
        "n_test": n_test,
        "n_sites": domain.lattice.n_sites(),
        "c_bar": domain.equilibrium.c_bar,
    }))
}

/// Overrides of `[basis]`, `[weights]` and `[fit]`.
#[derive(Clone, Debug, Default)]
pub struct FitFlags {
    pub order: Option<usize>,
    pub degree: Option<usize>,
    pub we: Option<f64>,
    pub wf: Option<f64>,
    pub rtol: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    pub metadata: Metadata,
    pub basis_size: usize,
    pub effective_rank: usize,
    pub residual_loss: f64,
    pub train_rmse_e: f64,
    pub train_rmse_f: f64,
    pub test_rmse_e: Option<f64>,
    pub test_rmse_f: Option<f64>,
    pub fit_wall_time: Option<f64>,
    pub energy_convention: String,
    pub model: String,
}

pub fn fit_model(cfg: &RunConfig, flags: &FitFlags, training_set: &Path, out: &Path) -> CliResult<Value> {
    let mut spec = cfg.basis_spec();
    spec.order = flags.order.unwrap_or(spec.order);
    spec.max_degree = flags.degree.unwrap_or(spec.max_degree);
    spec.validate().map_err(|e| CliError::config("--basis-order/--basis-degree", e.to_string()))?;
    let weights = LossWeights {
        w_e: flags.we.unwrap_or(cfg.weights.w_e),
        w_f: flags.wf.unwrap_or(cfg.weights.w_f),
        ..cfg.weights.clone()
    };
    weights.validate().map_err(|e| CliError::config("--we/--wf", e.to_string()))?;
    let rtol = flags.rtol.unwrap_or(cfg.fit.rtol);
    if !(rtol > 0.0 && rtol < 1.0) {
        return Err(CliError::config("--rtol", "must lie in (0, 1)"));
    }
    let (header, samples) = artifact::read_training_set(training_set)?;
    let lattice = training_lattice(cfg, &header)?;
    let start = std::time::Instant::now();
    let res = fit(&[TrainingData { lattice: &lattice, samples: &samples }], &spec, &weights, rtol).stage("fit")?;
    let elapsed = start.elapsed().as_secs_f64();
    let meta = Metadata::new(cfg, header.train_seed);
    let model_path = out.join("model.json");
    artifact::write_json(&model_path, &ModelDocument::new(meta.clone(), &res.model))?;
    let doc = FitDocument {
        metadata: meta,
        basis_size: res.model.basis_size(),
        effective_rank: res.effective_rank,
        residual_loss: res.residual_loss,
        train_rmse_e: res.train_rmse_e,
        train_rmse_f: res.train_rmse_f,
        test_rmse_e: res.test_rmse.map(|t| t.0),
        test_rmse_f: res.test_rmse.map(|t| t.1),
        fit_wall_time: cfg.study.record_wall_time.then_some(elapsed),
        energy_convention: ENERGY_CONVENTION.into(),
        model: "model.json".into(),
    };
    let path = out.join("fit_result.json");
    artifact::write_json(&path, &doc)?;
    Ok(
        json!({ "fit_result": path, "model": model_path, "basis_size": doc.basis_size, "effective_rank": doc.effective_rank }),
    )
}

fn training_lattice(cfg: &RunConfig, header: &TrainingSetHeader) -> CliResult<mlipgen_core::lattice::DefectedLattice> {
    let b = cfg.bravais()?;
    let defects = DefectSet::new(vec![mlipgen_core::training::defect_at_origin(&b, header.defect)], b.r0);
    let lattice = build_lattice(&b, &SupercellSpec::new(header.size), &defects).stage("training_lattice")?;
    if lattice.n_sites() != header.n_sites {
        return Err(CliError::Check {
            stage: "training_lattice",
            message: format!("training set has {} sites, the configured lattice {}", header.n_sites, lattice.n_sites()),
        });
    }
    Ok(lattice)
}

pub fn report_matching(cfg: &RunConfig, training_set: &Path, model_path: &Path, out: &Path) -> CliResult<Value> {
    let (header, samples) = artifact::read_training_set(training_set)?;
    let model = artifact::read_json::<ModelDocument>(model_path)?.model()?;
    let domain = training_domain(cfg, header.size, header.defect)?;
    if domain.lattice.n_sites() != header.n_sites {
        return Err(CliError::Check {
            stage: "report_matching",
            message: "training set does not match the config".into(),
        });
    }
    let rep = matching_report(&domain, &cfg.potential, &model, &samples).stage("report_matching")?;
    let doc = json!({ "metadata": Metadata::new(cfg, header.train_seed), "report": rep, "energy_convention": ENERGY_CONVENTION });
    let path = out.join("matching.json");
    artifact::write_json(&path, &doc)?;
    Ok(json!({ "matching": path, "report": rep }))
}

pub fn study(cfg: &RunConfig, out: &Path) -> CliResult<Value> {
    let res = run_study(cfg, out)?;
    let failed = res.rows.iter().filter(|r| !r.is_ok()).count();
    Ok(json!({
        "study": out.join("study.csv"),
        "rates": out.join("rates.json"),
        "grid_points": res.rows.len(),
        "failed_points": failed,
    }))
}

pub const FORCE_TOLERANCE: f64 = 1e-6;
pub const HESSIAN_TOLERANCE: f64 = 1e-5;
pub const DERIVATIVE_CELL: usize = 5;
pub const DERIVATIVE_SAMPLES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivativeReport {
    pub reference: DerivativeErrors,
    pub surrogate: Option<DerivativeErrors>,
    pub force_tolerance: f64,
    pub hessian_tolerance: f64,
    pub configurations: usize,
    pub pass: bool,
}

/// Largest finite-difference errors over random admissible perturbations
/// (amplitude `0.1 r0`) of the homogeneous `5 × 5` cell.
pub fn derivative_suite<P: SitePotential + ?Sized>(cfg: &RunConfig, pot: &P) -> CliResult<DerivativeErrors> {
    let b = cfg.bravais()?;
    let lattice = build_lattice(&b, &SupercellSpec::new(DERIVATIVE_CELL), &DefectSet::new(Vec::new(), b.r0))
        .stage("build_lattice")?;
    let asm = Assembler::new(&lattice, pot).stage("assemble")?;
    let dim = 2 * lattice.n_sites();
    let mut worst = DerivativeErrors::default();
    for k in 0..DERIVATIVE_SAMPLES as u64 {
        let v = random_unit_vector(dim, cfg.seed.wrapping_mul(1000).wrapping_add(k), false);
        let vmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let u = DisplacementField::from_flat(&v.iter().map(|x| 0.1 * b.r0 * x / vmax).collect::<Vec<_>>());
        asm.check(&u).stage("check_derivatives")?;
        worst = worst.max(derivative_errors(&asm, &u, 1e-5 * b.r0).stage("check_derivatives")?);
    }
    Ok(worst)
}

pub fn check_derivatives(cfg: &RunConfig, model: Option<&Path>) -> CliResult<DerivativeReport> {
    let reference = derivative_suite(cfg, &cfg.potential)?;
    let surrogate = match model {
        Some(p) => {
            let m: SurrogateModel = artifact::read_json::<ModelDocument>(p)?.model()?;
            Some(derivative_suite(cfg, &m)?)
        }
        None => None,
    };
    let ok = |e: &DerivativeErrors| e.force < FORCE_TOLERANCE && e.hessian < HESSIAN_TOLERANCE;
    let pass = ok(&reference) && surrogate.as_ref().is_none_or(ok);
    Ok(DerivativeReport {
        reference,
        surrogate,
        force_tolerance: FORCE_TOLERANCE,
        hessian_tolerance: HESSIAN_TOLERANCE,
        configurations: DERIVATIVE_SAMPLES,
        pass,
    })
}

/// Output directory: the flag, else the config's.
pub fn output_dir(cfg: &RunConfig, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.clone())
}
