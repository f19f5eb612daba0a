//! Run configuration read from TOML. Unknown keys are rejected by name.

use std::path::{Path, PathBuf};

use mlipgen_core::equilibrate::MinimizerConfig;
use mlipgen_core::fit::{LossWeights, DEFAULT_RTOL};
use mlipgen_core::lattice::{
    build_lattice, BravaisSpec, Defect, DefectKind, DefectSet, DefectedLattice, SupercellSpec,
};
use mlipgen_core::potential::{calibrate_r0, EamToyPotential};
use mlipgen_core::surrogate::BasisSpec;
use mlipgen_core::training::MIN_TRAINING_SIZE;
use mlipgen_core::Vec2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult, StageExt};

pub const SCHEMA_VERSION: u32 = 1;

/// The configuration shipped with the binary and used when `--config` is absent.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub lattice: LatticeConfig,
    #[serde(default)]
    pub potential: EamToyPotential,
    #[serde(default)]
    pub basis: BasisConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub minimizer: MinimizerConfig,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub study: StudyConfig,
}

fn default_seed() -> u64 {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Simulation domain: `n × n` periodic copies of the cell with defects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    /// Rows are the primitive vectors in units of `r0`.
    #[serde(default = "triangular_cell")]
    pub cell: [[f64; 2]; 2],
    /// Lattice constant; calibrated from the potential when absent.
    #[serde(default)]
    pub r0: Option<f64>,
    pub n: usize,
    /// Defect core radius in units of `r0`.
    #[serde(default = "default_core_radius")]
    pub core_radius: f64,
    #[serde(default)]
    pub defects: Vec<DefectConfig>,
}

fn default_dimension() -> usize {
    2
}

fn triangular_cell() -> [[f64; 2]; 2] {
    [[1.0, 0.0], [0.5, 0.75f64.sqrt()]]
}

fn default_core_radius() -> f64 {
    1.0
}

/// A defect at lattice coordinates `site`; interstitials sit at the
/// centroid of the triangle spanned from that site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefectConfig {
    pub kind: DefectKind,
    pub site: [i64; 2],
}

/// [`BasisSpec`] without the cutoff, which is taken from the potential.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisConfig {
    pub order: usize,
    pub max_degree: usize,
    pub radial_size: usize,
    pub angular_max: usize,
    pub r_in: f64,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig { order: 3, max_degree: 10, radial_size: 6, angular_max: 5, r_in: 0.5 }
    }
}

impl BasisConfig {
    pub fn spec(&self, pot: &EamToyPotential) -> BasisSpec {
        BasisSpec {
            order: self.order,
            max_degree: self.max_degree,
            radial_size: self.radial_size,
            angular_max: self.angular_max,
            cutoff: pot.cutoff,
            r_in: self.r_in,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Training cell sizes `L` in units of `r0`.
    pub sizes: Vec<usize>,
    pub defect: DefectKind,
    pub n_train: usize,
    pub n_test: usize,
    /// Noise standard deviation as a fraction of `r0`.
    pub delta: f64,
    pub seeds: Vec<u64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            sizes: vec![8],
            defect: DefectKind::Vacancy,
            n_train: 200,
            n_test: 50,
            delta: 0.01,
            seeds: vec![1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub rtol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { rtol: DEFAULT_RTOL }
    }
}

/// One basis of the study grid; order and `r_in` come from `[basis]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisGridEntry {
    pub radial_size: usize,
    pub max_degree: usize,
    pub angular_max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub n: usize,
    pub defects: Vec<DefectConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    /// Empty means the single `[basis]`.
    pub bases: Vec<BasisGridEntry>,
    /// Empty means the `[lattice]` domain.
    pub simulations: Vec<SimulationConfig>,
    /// Side of the single-defect cells whose equilibria build the predictor.
    pub core_size: usize,
    /// Truncation radius of the predictor as a fraction of the defect separation.
    pub predictor_radius_fraction: f64,
    /// Wall times break byte-for-byte reproducibility of the CSV.
    pub record_wall_time: bool,
    /// Reuse per-point results from `<output_dir>/cache`.
    pub cache: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            bases: Vec::new(),
            simulations: Vec::new(),
            core_size: 40,
            predictor_radius_fraction: 0.57,
            record_wall_time: false,
            cache: true,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| CliError::config("<document>", e.message()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            CliError::config(if key == "." { "<document>".to_string() } else { key }, e.into_inner().message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => RunConfig::from_toml(DEFAULT_CONFIG),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::config("<file>", format!("{}: {e}", p.display())))?;
                RunConfig::from_toml(&text)
            }
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |key: &str, msg: &str| Err(CliError::config(key, msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad("schema_version", &format!("unsupported schema version, expected {SCHEMA_VERSION}"));
        }
        if self.lattice.dimension != 2 {
            return bad("lattice.dimension", "only d = 2 is supported");
        }
        if self.lattice.n == 0 {
            return bad("lattice.n", "must be positive");
        }
        if let Some(r0) = self.lattice.r0 {
            if !(r0 > 0.0 && r0.is_finite()) {
                return bad("lattice.r0", "must be positive");
            }
        }
        if !(self.lattice.core_radius > 0.0) {
            return bad("lattice.core_radius", "must be positive");
        }
        self.potential.validate().map_err(|e| CliError::config("potential", e.to_string()))?;
        self.basis.spec(&self.potential).validate().map_err(|e| CliError::config("basis", e.to_string()))?;
        let t = &self.training;
        if t.sizes.is_empty() || t.sizes.iter().any(|&l| l < MIN_TRAINING_SIZE) {
            return bad("training.sizes", &format!("need at least one size, each >= {MIN_TRAINING_SIZE}"));
        }
        if t.n_train == 0 {
            return bad("training.n_train", "must be positive");
        }
        if !(t.delta >= 0.0 && t.delta.is_finite()) {
            return bad("training.delta", "must be nonnegative");
        }
        if t.seeds.is_empty() {
            return bad("training.seeds", "need at least one seed");
        }
        self.weights.validate().map_err(|e| CliError::config("weights", e.to_string()))?;
        self.minimizer.validate().map_err(|e| CliError::config("minimizer", e.to_string()))?;
        if !(self.fit.rtol > 0.0 && self.fit.rtol < 1.0) {
            return bad("fit.rtol", "must lie in (0, 1)");
        }
        let s = &self.study;
        if s.core_size < MIN_TRAINING_SIZE {
            return bad("study.core_size", "too small");
        }
        if !(s.predictor_radius_fraction > 0.0 && s.predictor_radius_fraction < 0.6) {
            return bad("study.predictor_radius_fraction", "must lie in (0, 0.6) so truncated cores stay disjoint");
        }
        for (i, sim) in s.simulations.iter().enumerate() {
            if sim.n == 0 || sim.defects.is_empty() {
                return bad(&format!("study.simulations[{i}]"), "need n > 0 and at least one defect");
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, excluding the output location.
    pub fn hash(&self) -> String {
        let canonical =
            serde_json::to_vec(&RunConfig { output_dir: PathBuf::new(), ..self.clone() }).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn r0(&self) -> CliResult<f64> {
        match self.lattice.r0 {
            Some(r0) => Ok(r0),
            None => calibrate_r0(&self.potential).stage("calibrate_r0"),
        }
    }

    pub fn bravais(&self) -> CliResult<BravaisSpec> {
        let r0 = self.r0()?;
        let [a, b] = self.lattice.cell;
        let spec = BravaisSpec { a1: Vec2::new(a[0], a[1]) * r0, a2: Vec2::new(b[0], b[1]) * r0, r0 };
        spec.validate().map_err(|e| CliError::config("lattice.cell", e.to_string()))?;
        Ok(spec)
    }

    pub fn basis_spec(&self) -> BasisSpec {
        self.basis.spec(&self.potential)
    }

    /// Basis specs of the study grid.
    pub fn study_bases(&self) -> Vec<BasisSpec> {
        if self.study.bases.is_empty() {
            return vec![self.basis_spec()];
        }
        self.study
            .bases
            .iter()
            .map(|e| {
                BasisConfig {
                    radial_size: e.radial_size,
                    max_degree: e.max_degree,
                    angular_max: e.angular_max,
                    ..self.basis
                }
                .spec(&self.potential)
            })
            .collect()
    }

    pub fn study_simulations(&self) -> Vec<SimulationConfig> {
        if self.study.simulations.is_empty() {
            return vec![SimulationConfig { n: self.lattice.n, defects: self.lattice.defects.clone() }];
        }
        self.study.simulations.clone()
    }

    pub fn simulation_lattice(&self, sim: &SimulationConfig) -> CliResult<DefectedLattice> {
        let b = self.bravais()?;
        let defects = sim.defects.iter().map(|d| to_defect(&b, d)).collect();
        build_lattice(&b, &SupercellSpec::new(sim.n), &DefectSet::new(defects, self.lattice.core_radius * b.r0))
            .stage("build_lattice")
    }

    pub fn lattice(&self) -> CliResult<DefectedLattice> {
        self.simulation_lattice(&SimulationConfig { n: self.lattice.n, defects: self.lattice.defects.clone() })
    }
}

pub fn to_defect(b: &BravaisSpec, d: &DefectConfig) -> Defect {
    let p = b.point(d.site[0], d.site[1]);
    match d.kind {
        DefectKind::Vacancy => Defect::vacancy(p),
        DefectKind::Interstitial => Defect::interstitial_near(b, p),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_config_parses() {
        let cfg = RunConfig::from_toml(DEFAULT_CONFIG).unwrap();
        assert_eq!(cfg.schema_version, SCHEMA_VERSION);
        assert!(!cfg.study.record_wall_time);
    }

    #[test]
    fn unknown_keys_are_named() {
        let text = DEFAULT_CONFIG.replace("[potential]", "[potential]\nbogus_key = 1.0");
        match RunConfig::from_toml(&text).unwrap_err() {
            CliError::Config { key, .. } => assert_eq!(key, "potential.bogus_key"),
            e => panic!("{e:?}"),
        }
        let text = format!("stray = 3\n{DEFAULT_CONFIG}");
        match RunConfig::from_toml(&text).unwrap_err() {
            CliError::Config { key, .. } => assert_eq!(key, "stray"),
            e => panic!("{e:?}"),
        }
        // A key after the last header belongs to that table.
        let text = format!("{DEFAULT_CONFIG}\nstray = 3\n");
        match RunConfig::from_toml(&text).unwrap_err() {
            CliError::Config { key, .. } => assert_eq!(key, "study.stray"),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn invalid_values_name_their_key() {
        let text = DEFAULT_CONFIG.replace("delta = 0.01", "delta = -1.0");
        match RunConfig::from_toml(&text).unwrap_err() {
            CliError::Config { key, .. } => assert_eq!(key, "training.delta"),
            e => panic!("{e:?}"),
        }
        let err = RunConfig::from_toml("schema_version = 1\n[lattice]\nn = 'x'\n").unwrap_err();
        assert_eq!(err.exit_code(), crate::error::EXIT_CONFIG);
    }

    #[test]
    fn hash_ignores_formatting_but_not_values() {
        let a = RunConfig::from_toml(DEFAULT_CONFIG).unwrap();
        let b = RunConfig::from_toml(&format!("# comment\n{DEFAULT_CONFIG}")).unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.seed += 1;
        assert_ne!(a.hash(), c.hash());
    }
}
