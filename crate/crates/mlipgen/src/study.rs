//! Convergence study: for every (L, basis, simulation, seed) grid point fit a
//! surrogate on the training cells, equilibrate it on the simulation domain
//! from the reference predictor and record the errors against the reference.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use mlipgen_core::analysis::{energy_error, fit_rate, geometry_error, RateFit};
use mlipgen_core::equilibrate::{build_predictor, equilibrate, CoreSolution, EquilibriumResult};
use mlipgen_core::fit::{fit, LossWeights, TrainingData};
use mlipgen_core::lattice::{
    build_lattice, min_separation, BravaisSpec, DefectKind, DefectSet, DefectedLattice, DisplacementField,
    SupercellSpec,
};
use mlipgen_core::potential::Assembler;
use mlipgen_core::surrogate::BasisSpec;
use mlipgen_core::training::{
    defect_at_origin, make_training_domain, matching_report, sample_configs, Observation, Tag, TrainingDomain,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifact::{self, csv_with_header, num, Metadata};
use crate::config::{RunConfig, SimulationConfig};
use crate::error::{core_error_kind, CliError, CliResult, StageExt};

/// Offset separating the test-set seed stream from the training one.
pub const TEST_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn test_seed(seed: u64) -> u64 {
    seed.wrapping_add(TEST_SEED_OFFSET)
}

pub const STUDY_HEADER: [&str; 16] = [
    "L",
    "n_D",
    "defect_kinds",
    "#B",
    "rmse_E",
    "rmse_F",
    "eps_E",
    "eps_F",
    "eps_FC",
    "eps_FC_hom",
    "geometry_error",
    "energy_error",
    "wall_time",
    "simulation",
    "seed",
    "status",
];

/// Metrics of one grid point; `None` where a stage failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub l: usize,
    pub n_d: usize,
    pub defect_kinds: String,
    pub basis_index: usize,
    pub basis_size: usize,
    pub rmse_e: Option<f64>,
    pub rmse_f: Option<f64>,
    pub eps_e: Option<f64>,
    pub eps_f: Option<f64>,
    pub eps_fc: Option<f64>,
    pub eps_fc_hom: Option<f64>,
    pub geometry_error: Option<f64>,
    pub energy_error: Option<f64>,
    pub wall_time: Option<f64>,
    pub simulation: usize,
    pub seed: u64,
    /// `ok` or the failing stage and error kind.
    pub status: String,
}

impl StudyRow {
    fn cells(&self) -> Vec<String> {
        let opt = |x: Option<f64>| x.map(num).unwrap_or_default();
        vec![
            self.l.to_string(),
            self.n_d.to_string(),
            self.defect_kinds.clone(),
            self.basis_size.to_string(),
            opt(self.rmse_e),
            opt(self.rmse_f),
            opt(self.eps_e),
            opt(self.eps_f),
            opt(self.eps_fc),
            opt(self.eps_fc_hom),
            opt(self.geometry_error),
            opt(self.energy_error),
            opt(self.wall_time),
            self.simulation.to_string(),
            self.seed.to_string(),
            self.status.clone(),
        ]
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// A log-log fit of one series, or the reason it could not be formed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesFit {
    pub name: String,
    pub group: BTreeMap<String, String>,
    pub points: Vec<(f64, f64)>,
    pub fit: Option<RateFit>,
    pub error: Option<String>,
}

/// `geometry_error(n_D) / geometry_error(n_min)` against `√(n_D / n_min)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectCountRatio {
    pub group: BTreeMap<String, String>,
    pub n_d: usize,
    pub ratio: f64,
    pub expected: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub metadata: Metadata,
    pub series: Vec<SeriesFit>,
    pub defect_count_ratios: Vec<DefectCountRatio>,
}

impl RateSummary {
    pub fn find(&self, name: &str, group: &[(&str, &str)]) -> Option<&SeriesFit> {
        self.series
            .iter()
            .find(|s| s.name == name && group.iter().all(|(k, v)| s.group.get(*k).map(String::as_str) == Some(*v)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyOutput {
    pub rows: Vec<StudyRow>,
    pub summary: RateSummary,
    pub csv: String,
}

struct Simulation {
    lattice: DefectedLattice,
    kinds: BTreeSet<DefectKind>,
    predictor: DisplacementField,
    reference: EquilibriumResult,
}

/// Memoised intermediate results shared by grid points.
pub struct Study<'a> {
    cfg: &'a RunConfig,
    bravais: BravaisSpec,
    bases: Vec<BasisSpec>,
    sims: Vec<SimulationConfig>,
    cores: BTreeMap<DefectKind, (DefectedLattice, DisplacementField)>,
    domains: BTreeMap<(usize, DefectKind), TrainingDomain>,
    samples: BTreeMap<(usize, DefectKind, u64), Vec<Observation>>,
    simulations: BTreeMap<usize, Simulation>,
    cache_dir: Option<PathBuf>,
}

impl<'a> Study<'a> {
    pub fn new(cfg: &'a RunConfig, cache_dir: Option<PathBuf>) -> CliResult<Self> {
        Ok(Study {
            cfg,
            bravais: cfg.bravais()?,
            bases: cfg.study_bases(),
            sims: cfg.study_simulations(),
            cores: BTreeMap::new(),
            domains: BTreeMap::new(),
            samples: BTreeMap::new(),
            simulations: BTreeMap::new(),
            cache_dir,
        })
    }

    /// Grid points in output order: L, then basis, simulation and seed.
    pub fn grid(&self) -> Vec<(usize, usize, usize, u64)> {
        let mut g = Vec::new();
        for &l in &self.cfg.training.sizes {
            for b in 0..self.bases.len() {
                for s in 0..self.sims.len() {
                    for &seed in &self.cfg.training.seeds {
                        g.push((l, b, s, seed));
                    }
                }
            }
        }
        g
    }

    pub fn run(&mut self) -> CliResult<StudyOutput> {
        let mut rows = Vec::new();
        for (l, b, s, seed) in self.grid() {
            rows.push(self.point(l, b, s, seed)?);
        }
        let meta = Metadata::new(self.cfg, self.cfg.seed);
        let cells: Vec<Vec<String>> = rows.iter().map(StudyRow::cells).collect();
        let csv = csv_with_header(&meta, &STUDY_HEADER, &cells);
        let summary = summarize(meta, &rows, self.cfg.minimizer.g_tol);
        Ok(StudyOutput { rows, summary, csv })
    }

    fn cache_path(&self, l: usize, b: usize, s: usize, seed: u64) -> Option<PathBuf> {
        let dir = self.cache_dir.as_ref()?;
        let key = format!("{}:{l}:{b}:{s}:{seed}", self.cfg.hash());
        Some(dir.join(format!("{}.json", &hex::encode(Sha256::digest(key.as_bytes()))[..32])))
    }

    fn point(&mut self, l: usize, b: usize, s: usize, seed: u64) -> CliResult<StudyRow> {
        let cache = self.cache_path(l, b, s, seed);
        if let Some(path) = cache.as_deref().filter(|p| p.exists()) {
            if let Ok(row) = artifact::read_json::<StudyRow>(path) {
                return Ok(row);
            }
        }
        let sim_cfg = &self.sims[s];
        let kinds: BTreeSet<DefectKind> = sim_cfg.defects.iter().map(|d| d.kind).collect();
        let mut row = StudyRow {
            l,
            n_d: sim_cfg.defects.len(),
            defect_kinds: kinds.iter().map(|k| k.as_str()).collect::<Vec<_>>().join("+"),
            basis_index: b,
            basis_size: 0,
            rmse_e: None,
            rmse_f: None,
            eps_e: None,
            eps_f: None,
            eps_fc: None,
            eps_fc_hom: None,
            geometry_error: None,
            energy_error: None,
            wall_time: None,
            simulation: s,
            seed,
            status: "ok".into(),
        };
        let start = Instant::now();
        if let Err(e) = self.evaluate(&mut row) {
            row.status = match e {
                CliError::Stage { stage, source } => format!("{stage}:{}", core_error_kind(&source)),
                other => format!("error:{other}"),
            };
        }
        if self.cfg.study.record_wall_time {
            row.wall_time = Some(start.elapsed().as_secs_f64());
        }
        if let Some(path) = cache {
            artifact::write_json(&path, &row)?;
        }
        Ok(row)
    }

    fn evaluate(&mut self, row: &mut StudyRow) -> CliResult<()> {
        let (l, seed) = (row.l, row.seed);
        self.prepare_simulation(row.simulation)?;
        let kinds = self.simulations[&row.simulation].kinds.clone();
        for &k in &kinds {
            self.prepare_samples(l, k, seed)?;
        }
        let cfg = self.cfg;
        let spec = self.bases[row.basis_index];
        let weights = if kinds.len() > 1 && cfg.weights.per_kind.is_empty() {
            LossWeights { per_kind: LossWeights::mixed().per_kind, ..cfg.weights.clone() }
        } else {
            cfg.weights.clone()
        };
        let data: Vec<TrainingData<'_>> = kinds
            .iter()
            .map(|&k| TrainingData { lattice: &self.domains[&(l, k)].lattice, samples: &self.samples[&(l, k, seed)] })
            .collect();
        let fitted = fit(&data, &spec, &weights, cfg.fit.rtol).stage("fit")?;
        row.basis_size = fitted.model.basis_size();
        if let Some((e, f)) = fitted.test_rmse {
            row.rmse_e = Some(e);
            row.rmse_f = Some(f);
        }
        for &k in &kinds {
            let rep =
                matching_report(&self.domains[&(l, k)], &cfg.potential, &fitted.model, &self.samples[&(l, k, seed)])
                    .stage("report_matching")?;
            let up = |slot: &mut Option<f64>, v: f64| *slot = Some(slot.map_or(v, |s: f64| s.max(v)));
            up(&mut row.eps_e, rep.eps_e);
            up(&mut row.eps_f, rep.eps_f);
            up(&mut row.eps_fc, rep.eps_fc);
            up(&mut row.eps_fc_hom, rep.eps_fc_hom);
        }
        let sim = &self.simulations[&row.simulation];
        let asm_ref = Assembler::new(&sim.lattice, &cfg.potential).stage("assemble")?;
        let asm_sur = Assembler::new(&sim.lattice, &fitted.model).stage("assemble")?;
        let sur = equilibrate(&asm_sur, &sim.predictor, &cfg.minimizer).stage("equilibrate_surrogate")?;
        row.geometry_error =
            Some(geometry_error(&sim.lattice, &sim.reference.u_bar, &sur.u_bar).stage("geometry_error")?);
        row.energy_error =
            Some(energy_error(&asm_ref, &asm_sur, &sim.reference.u_bar, &sur.u_bar).stage("energy_error")?);
        Ok(())
    }

    fn prepare_core(&mut self, kind: DefectKind) -> CliResult<()> {
        if self.cores.contains_key(&kind) {
            return Ok(());
        }
        let cfg = self.cfg;
        let b = self.bravais;
        let lattice = build_lattice(
            &b,
            &SupercellSpec::new(cfg.study.core_size),
            &DefectSet::new(vec![defect_at_origin(&b, kind)], cfg.lattice.core_radius * b.r0),
        )
        .stage("core_lattice")?;
        let asm = Assembler::new(&lattice, &cfg.potential).stage("core_lattice")?;
        let eq = equilibrate(&asm, &DisplacementField::zeros(lattice.n_sites()), &cfg.minimizer)
            .stage("equilibrate_core")?;
        self.cores.insert(kind, (lattice, eq.u_bar));
        Ok(())
    }

    fn prepare_simulation(&mut self, s: usize) -> CliResult<()> {
        if self.simulations.contains_key(&s) {
            return Ok(());
        }
        let cfg = self.cfg;
        let lattice = cfg.simulation_lattice(&self.sims[s])?;
        let kinds: BTreeSet<DefectKind> = lattice.defects().defects.iter().map(|d| d.kind).collect();
        for &k in &kinds {
            self.prepare_core(k)?;
        }
        let radius = cfg.study.predictor_radius_fraction * min_separation(&lattice);
        let cores: Vec<CoreSolution<'_>> =
            self.cores.values().map(|(lat, u)| CoreSolution { lattice: lat, u }).collect();
        let predictor = build_predictor(&lattice, &cores, radius).stage("predictor")?;
        let asm = Assembler::new(&lattice, &cfg.potential).stage("assemble")?;
        let reference = equilibrate(&asm, &predictor, &cfg.minimizer).stage("equilibrate_reference")?;
        self.simulations.insert(s, Simulation { lattice, kinds, predictor, reference });
        Ok(())
    }

    fn prepare_samples(&mut self, l: usize, kind: DefectKind, seed: u64) -> CliResult<()> {
        let cfg = self.cfg;
        if !self.domains.contains_key(&(l, kind)) {
            let d = make_training_domain(&self.bravais, l, kind, &cfg.potential, &cfg.minimizer)
                .stage("training_domain")?;
            self.domains.insert((l, kind), d);
        }
        if !self.samples.contains_key(&(l, kind, seed)) {
            let d = &self.domains[&(l, kind)];
            let t = &cfg.training;
            let mut s =
                sample_configs(d, &cfg.potential, t.n_train, t.delta, seed, Tag::Train).stage("sample_configs")?;
            s.extend(
                sample_configs(d, &cfg.potential, t.n_test, t.delta, test_seed(seed), Tag::Test)
                    .stage("sample_configs")?,
            );
            self.samples.insert((l, kind, seed), s);
        }
        Ok(())
    }
}

fn series(name: &str, group: BTreeMap<String, String>, points: Vec<(f64, f64)>) -> SeriesFit {
    let (fit, error) = match fit_rate(&points) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    SeriesFit { name: name.into(), group, points, fit, error }
}

fn group(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Rate fits per series. Error-vs-L windows drop the largest L when its
/// error is below `10 · g_tol`, the minimiser's resolution.
pub fn summarize(metadata: Metadata, rows: &[StudyRow], g_tol: f64) -> RateSummary {
    let ok: Vec<&StudyRow> = rows.iter().filter(|r| r.is_ok()).collect();
    let mut out = Vec::new();

    let mut by_basis: BTreeMap<(usize, usize, u64), Vec<&StudyRow>> = BTreeMap::new();
    let mut by_l: BTreeMap<(usize, usize, u64), Vec<&StudyRow>> = BTreeMap::new();
    let mut by_count: BTreeMap<(usize, usize, u64), Vec<&StudyRow>> = BTreeMap::new();
    for r in &ok {
        by_basis.entry((r.basis_index, r.simulation, r.seed)).or_default().push(r);
        by_l.entry((r.l, r.simulation, r.seed)).or_default().push(r);
        by_count.entry((r.l, r.basis_index, r.seed)).or_default().push(r);
    }
    for ((b, s, seed), rs) in &by_basis {
        if rs.len() < 2 {
            continue;
        }
        let g = group(&[("basis", b.to_string()), ("simulation", s.to_string()), ("seed", seed.to_string())]);
        for (name, pick) in [
            ("geometry_error_vs_L", (|r: &StudyRow| r.geometry_error) as fn(&StudyRow) -> Option<f64>),
            ("energy_error_vs_L", |r: &StudyRow| r.energy_error),
        ] {
            let mut pts: Vec<(f64, f64)> = rs.iter().filter_map(|r| Some((r.l as f64, pick(r)?))).collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            if pts.last().is_some_and(|p| p.1 < 10.0 * g_tol) {
                pts.pop();
            }
            out.push(series(name, g.clone(), pts));
        }
    }
    for ((l, s, seed), rs) in &by_l {
        if rs.len() < 2 {
            continue;
        }
        let g = group(&[("L", l.to_string()), ("simulation", s.to_string()), ("seed", seed.to_string())]);
        for (name, pick) in [
            ("geometry_error_vs_rmse_F", (|r: &StudyRow| r.geometry_error) as fn(&StudyRow) -> Option<f64>),
            ("energy_error_vs_rmse_F", |r: &StudyRow| r.energy_error),
        ] {
            let pts: Vec<(f64, f64)> = rs.iter().filter_map(|r| Some((r.rmse_f?, pick(r)?))).collect();
            out.push(series(name, g.clone(), pts));
        }
    }
    let mut ratios = Vec::new();
    for ((l, b, seed), rs) in &by_count {
        let counts: BTreeSet<usize> = rs.iter().map(|r| r.n_d).collect();
        if counts.len() < 2 {
            continue;
        }
        let g = group(&[("L", l.to_string()), ("basis", b.to_string()), ("seed", seed.to_string())]);
        let mut pts: Vec<(f64, f64)> = rs.iter().filter_map(|r| Some((r.n_d as f64, r.geometry_error?))).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        if let Some(&(n0, e0)) = pts.first() {
            for &(n, e) in &pts {
                ratios.push(DefectCountRatio {
                    group: g.clone(),
                    n_d: n as usize,
                    ratio: e / e0,
                    expected: (n / n0).sqrt(),
                });
            }
        }
        out.push(series("geometry_error_vs_n_D", g, pts));
    }
    RateSummary { metadata, series: out, defect_count_ratios: ratios }
}

/// Runs the study and writes `study.csv` and `rates.json` into `dir`.
pub fn run_study(cfg: &RunConfig, dir: &Path) -> CliResult<StudyOutput> {
    let cache = cfg.study.cache.then(|| dir.join("cache"));
    let out = Study::new(cfg, cache)?.run()?;
    artifact::write_text(&dir.join("study.csv"), &out.csv)?;
    artifact::write_json(&dir.join("rates.json"), &out.summary)?;
    Ok(out)
}
