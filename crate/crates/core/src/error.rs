use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    // lattice
    #[error("supercell matrix is singular")]
    SingularCell,
    #[error("defect {index} lies outside the supercell")]
    DefectOutsideCell { index: usize },
    #[error("vacancy {index} does not coincide with a lattice site")]
    VacancyOffLattice { index: usize },
    #[error("interstitial {index} is closer than 0.3 r0 to a lattice site")]
    InterstitialTooClose { index: usize },
    #[error("defect cores overlap: separation {separation} below 2 R_def = {limit}")]
    OverlappingDefects { separation: f64, limit: f64 },
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("displacement field has {found} sites, lattice has {expected}")]
    LatticeMismatch { expected: usize, found: usize },

    // potential
    #[error("configuration is not admissible")]
    InadmissibleConfiguration,
    #[error("no minimum of the energy per atom inside [{lo}, {hi}]")]
    NoMinimumInBracket { lo: f64, hi: f64 },

    // surrogate
    #[error("basis specification produces an empty basis")]
    EmptyBasis,
    #[error("neighbour at zero distance")]
    NeighborAtZeroDistance,

    // equilibrate
    #[error("minimizer did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("iterate left the admissible set")]
    LeftAdmissibleSet,
    #[error("eigensolver failed: {0}")]
    EigensolverFailed(String),
    #[error("no sites in the truncation annulus")]
    EmptyAnnulus,
    #[error("core solution does not cover the truncation ball (need radius {needed})")]
    CoreDomainTooSmall { needed: f64 },
    #[error("fewer than three usable shells for a decay fit")]
    InsufficientShells,

    // training
    #[error("training equilibrium is not strongly stable (c_bar = {c_bar:e})")]
    UnstableTrainingEquilibrium { c_bar: f64 },
    #[error("could not draw an admissible sample after {attempts} attempts")]
    InadmissibleSample { attempts: usize },
    #[error("power iteration did not converge")]
    PowerIterationNotConverged,

    // fit
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("all columns truncated by the rank-revealing QR")]
    AllColumnsTruncated,

    // analysis
    #[error("at least three points are needed for a rate fit, got {0}")]
    TooFewPoints(usize),
    #[error("log-log fit needs positive values")]
    NonpositiveValue,
}
