//! Acceptance suite: evaluates every criterion at its stated tolerance and
//! runtime budget, printing one PASS/FAIL line each.
//!
//! Criteria listed in `EXPECTED_FAILURES` are known not to be met by this
//! implementation (see the README). They still report FAIL; only failures
//! outside that list make the target exit nonzero.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use mlipgen::commands::check_derivatives;
use mlipgen::config::{BasisGridEntry, DefectConfig, RunConfig, SimulationConfig, DEFAULT_CONFIG};
use mlipgen::study::{RateSummary, Study, StudyOutput};
use mlipgen_core::analysis::{fit_rate, RateFit};
use mlipgen_core::equilibrate::{
    build_predictor, check_decay, check_stability, equilibrate, predictor_residual, truncate, CoreSolution,
    EquilibriumResult, MinimizerConfig, TruncationOperator,
};
use mlipgen_core::fit::{solve_rrqr, DenseMatrix, DEFAULT_RTOL};
use mlipgen_core::lattice::{
    build_lattice, global_stencil_norm, BravaisSpec, Defect, DefectKind, DefectSet, DefectedLattice, DisplacementField,
    SupercellSpec,
};
use mlipgen_core::potential::{calibrate_r0, Assembler, EamToyPotential};
use mlipgen_core::surrogate::build_basis;
use mlipgen_core::Vec2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria this implementation does not meet; each is analysed in the README.
const EXPECTED_FAILURES: &[u32] = &[7, 8];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn slope_text(f: &RateFit) -> String {
    format!("slope {:.3} (r² {:.3}, {} points)", f.slope, f.r_squared, f.points)
}

struct Reference {
    pot: EamToyPotential,
    bravais: BravaisSpec,
    minimizer: MinimizerConfig,
}

impl Reference {
    fn new() -> Self {
        let pot = EamToyPotential::default();
        let bravais = BravaisSpec::triangular(calibrate_r0(&pot).expect("r0 calibrates"));
        Reference { pot, bravais, minimizer: MinimizerConfig::newton() }
    }

    fn r0(&self) -> f64 {
        self.bravais.r0
    }

    fn lattice(&self, n: usize, defects: Vec<Defect>) -> DefectedLattice {
        build_lattice(&self.bravais, &SupercellSpec::new(n), &DefectSet::new(defects, self.r0()))
            .expect("lattice builds")
    }

    fn relax(&self, lat: &DefectedLattice, start: &DisplacementField) -> EquilibriumResult {
        let asm = Assembler::new(lat, &self.pot).expect("assembler");
        let res = equilibrate(&asm, start, &self.minimizer).expect("reference relaxes");
        assert!(res.converged);
        res
    }
}

fn derivatives() -> Outcome {
    let cfg = RunConfig::from_toml(DEFAULT_CONFIG).unwrap();
    match check_derivatives(&cfg, None) {
        Ok(r) => outcome(
            r.reference.force < 1e-6 && r.reference.hessian < 1e-5,
            format!(
                "force {:.2e} < 1e-6, hessian {:.2e} < 1e-5 over {} configurations",
                r.reference.force, r.reference.hessian, r.configurations
            ),
        ),
        Err(e) => outcome(false, e.to_string()),
    }
}

fn phonon_stability(r: &Reference) -> Outcome {
    let lat = r.lattice(10, Vec::new());
    let asm = Assembler::new(&lat, &r.pot).unwrap();
    match check_stability(&asm, &DisplacementField::zeros(lat.n_sites())) {
        Ok(c) => outcome(c > 0.0, format!("smallest non-translation eigenvalue {c:.4e} > 0")),
        Err(e) => outcome(false, e.to_string()),
    }
}

/// Single-vacancy equilibrium on the `N = 40` cell.
struct Core {
    lattice: DefectedLattice,
    u: DisplacementField,
}

fn core(r: &Reference) -> Core {
    let lattice = r.lattice(40, vec![Defect::vacancy(Vec2::ZERO)]);
    let u = r.relax(&lattice, &DisplacementField::zeros(lattice.n_sites())).u_bar;
    Core { lattice, u }
}

fn decay(c: &Core) -> Outcome {
    match check_decay(&c.lattice, &c.u, Vec2::ZERO) {
        Ok(f) => outcome(f.slope <= -1.6, format!("{} ≤ -1.6", slope_text(&f))),
        Err(e) => outcome(false, e.to_string()),
    }
}

fn truncation(r: &Reference, c: &Core) -> Outcome {
    let pts: Vec<(f64, f64)> = [6.0, 8.0, 10.0, 12.0]
        .iter()
        .map(|&k| {
            let op = TruncationOperator { center: Vec2::ZERO, radius: k * r.r0() };
            let t = truncate(&c.lattice, &op, &c.u).unwrap();
            (k, global_stencil_norm(&c.lattice, &t.difference(&c.u)))
        })
        .collect();
    let f = fit_rate(&pts).unwrap();
    outcome((f.slope + 1.0).abs() <= 0.3, format!("{} within ±0.3 of -1", slope_text(&f)))
}

/// Predictor residuals and corrector norms on two-vacancy cells of side `2 L_D`.
fn predictor_and_corrector(r: &Reference, c: &Core) -> (Outcome, Outcome) {
    let core = CoreSolution { lattice: &c.lattice, u: &c.u };
    let (mut residual, mut corrector) = (Vec::new(), Vec::new());
    for ld in [8usize, 12, 16, 20] {
        let lat = r.lattice(2 * ld, vec![Defect::vacancy(Vec2::ZERO), Defect::vacancy(r.bravais.point(ld as i64, 0))]);
        let z = build_predictor(&lat, &[core], 0.57 * ld as f64 * r.r0()).unwrap();
        let asm = Assembler::new(&lat, &r.pot).unwrap();
        residual.push((ld as f64, predictor_residual(&asm, &z).unwrap()));
        let u = r.relax(&lat, &z).u_bar;
        corrector.push((ld as f64, global_stencil_norm(&lat, &u.difference(&z))));
    }
    let fr = fit_rate(&residual).unwrap();
    let fc = fit_rate(&corrector).unwrap();
    (
        outcome((fr.slope + 1.0).abs() <= 0.3, format!("{} within ±0.3 of -1", slope_text(&fr))),
        outcome(fc.slope <= -0.6, format!("{} ≤ -0.6", slope_text(&fc))),
    )
}

fn grid(entries: &[(usize, usize, usize)]) -> Vec<BasisGridEntry> {
    entries
        .iter()
        .map(|&(radial_size, max_degree, angular_max)| BasisGridEntry { radial_size, max_degree, angular_max })
        .collect()
}

fn run_study(cfg: &RunConfig) -> Result<StudyOutput, String> {
    Study::new(cfg, None).and_then(|mut s| s.run()).map_err(|e| e.to_string())
}

fn failed_points(out: &StudyOutput) -> String {
    let bad: Vec<String> =
        out.rows.iter().filter(|r| !r.is_ok()).map(|r| format!("L={} #B={} {}", r.l, r.basis_size, r.status)).collect();
    if bad.is_empty() {
        String::new()
    } else {
        format!("; failed points: {}", bad.join(", "))
    }
}

fn series_fit(summary: &RateSummary, name: &str, group: &[(&str, &str)]) -> Result<RateFit, String> {
    let s = summary.find(name, group).ok_or_else(|| format!("series {name} missing"))?;
    s.fit.ok_or_else(|| s.error.clone().unwrap_or_default())
}

fn error_vs_rmse() -> Outcome {
    let mut cfg = RunConfig::from_toml(DEFAULT_CONFIG).unwrap();
    cfg.training.sizes = vec![8];
    cfg.study.bases = grid(&[(3, 4, 2), (4, 6, 3), (5, 8, 4), (6, 10, 5)]);
    let out = match run_study(&cfg) {
        Ok(o) => o,
        Err(e) => return outcome(false, e),
    };
    let g = [("L", "8"), ("simulation", "0"), ("seed", "1")];
    let geo = series_fit(&out.summary, "geometry_error_vs_rmse_F", &g);
    let en = series_fit(&out.summary, "energy_error_vs_rmse_F", &g);
    match (geo, en) {
        (Ok(geo), Ok(en)) => outcome(
            (0.7..=1.3).contains(&geo.slope) && (1.6..=2.6).contains(&en.slope) && geo.points >= 4,
            format!(
                "geometry {} in [0.7, 1.3]; energy {} in [1.6, 2.6]{}",
                slope_text(&geo),
                slope_text(&en),
                failed_points(&out)
            ),
        ),
        (a, b) => outcome(false, format!("geometry {:?}; energy {:?}{}", a.err(), b.err(), failed_points(&out))),
    }
}

fn error_vs_size() -> Outcome {
    let mut cfg = RunConfig::from_toml(DEFAULT_CONFIG).unwrap();
    cfg.training.sizes = vec![4, 5, 6, 7, 8];
    cfg.study.bases = grid(&[(6, 10, 5), (8, 12, 6)]);
    let out = match run_study(&cfg) {
        Ok(o) => o,
        Err(e) => return outcome(false, e),
    };
    let rmse: Vec<String> = out
        .rows
        .iter()
        .filter(|r| r.l == 8)
        .map(|r| format!("#B={} rmse_F {:.2e}", r.basis_size, r.rmse_f.unwrap_or(f64::NAN)))
        .collect();
    // The largest basis is the near-saturated one.
    let g = [("basis", "1"), ("simulation", "0"), ("seed", "1")];
    let geo = series_fit(&out.summary, "geometry_error_vs_L", &g);
    let en = series_fit(&out.summary, "energy_error_vs_L", &g);
    match (geo, en) {
        (Ok(geo), Ok(en)) => outcome(
            (geo.slope + 1.0).abs() <= 0.4 && en.slope <= -1.6,
            format!(
                "geometry {} within ±0.4 of -1; energy {} ≤ -1.6; at L=8 {}{}",
                slope_text(&geo),
                slope_text(&en),
                rmse.join(", "),
                failed_points(&out)
            ),
        ),
        (a, b) => outcome(false, format!("geometry {:?}; energy {:?}{}", a.err(), b.err(), failed_points(&out))),
    }
}

fn defect_count() -> Outcome {
    let mut cfg = RunConfig::from_toml(DEFAULT_CONFIG).unwrap();
    cfg.training.sizes = vec![8];
    cfg.study.bases = grid(&[(3, 4, 2), (4, 6, 3), (6, 10, 5)]);
    let sites = [[0, 0], [16, 0], [0, 16], [16, 16]];
    cfg.study.simulations = (2..=4)
        .map(|n| SimulationConfig {
            n: 32,
            defects: sites[..n].iter().map(|&site| DefectConfig { kind: DefectKind::Vacancy, site }).collect(),
        })
        .collect();
    let out = match run_study(&cfg) {
        Ok(o) => o,
        Err(e) => return outcome(false, e),
    };
    let ratios = &out.summary.defect_count_ratios;
    let within = |r: &mlipgen::study::DefectCountRatio| r.ratio <= 1.5 * r.expected && r.ratio >= r.expected / 1.5;
    let checked: Vec<_> = ratios.iter().filter(|r| r.n_d > 2).collect();
    let text: Vec<String> = checked
        .iter()
        .map(|r| format!("basis {} n_D={} {:.3}/{:.3}", r.group["basis"], r.n_d, r.ratio, r.expected))
        .collect();
    outcome(
        checked.len() == 2 * cfg.study.bases.len() && checked.iter().all(|r| within(r)),
        format!("ratio/expected within a factor 1.5: {}{}", text.join(", "), failed_points(&out)),
    )
}

fn rrqr_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (m, n) = (rng.random_range(20..60), rng.random_range(3..15));
        let rows: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
        let b: Vec<f64> = (0..m).map(|_| rng.random::<f64>() - 0.5).collect();
        let x = solve_rrqr(&DenseMatrix::from_rows(&rows).unwrap(), &b, DEFAULT_RTOL).unwrap().coefficients;
        let y = normal_equations(&rows, &b);
        let err = x.iter().zip(&y).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(err / y.iter().map(|c| c * c).sum::<f64>().sqrt());
    }
    let mut rows: Vec<Vec<f64>> = (0..30).map(|_| (0..6).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
    rows.iter_mut().for_each(|r| r.push(r[2]));
    let b: Vec<f64> = (0..30).map(|_| rng.random::<f64>()).collect();
    let rank = solve_rrqr(&DenseMatrix::from_rows(&rows).unwrap(), &b, DEFAULT_RTOL).unwrap().rank;
    outcome(
        worst < 1e-8 && rank == 6,
        format!("max relative deviation {worst:.2e} < 1e-8; duplicated column rank {rank} of 7 (expected 6)"),
    )
}

/// Cholesky solve of `AᵀA x = Aᵀb`.
fn normal_equations(rows: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = rows[0].len();
    let mut g = vec![0.0; n * n];
    let mut rhs = vec![0.0; n];
    for (r, bi) in rows.iter().zip(b) {
        for i in 0..n {
            rhs[i] += r[i] * bi;
            for j in 0..n {
                g[i * n + j] += r[i] * r[j];
            }
        }
    }
    for j in 0..n {
        for k in 0..j {
            g[j * n + j] -= g[j * n + k] * g[j * n + k];
        }
        g[j * n + j] = g[j * n + j].sqrt();
        for i in (j + 1)..n {
            for k in 0..j {
                g[i * n + j] -= g[i * n + k] * g[j * n + k];
            }
            g[i * n + j] /= g[j * n + j];
        }
    }
    for i in 0..n {
        for k in 0..i {
            rhs[i] -= g[i * n + k] * rhs[k];
        }
        rhs[i] /= g[i * n + i];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            rhs[i] -= g[k * n + i] * rhs[k];
        }
        rhs[i] /= g[i * n + i];
    }
    rhs
}

fn invariance() -> Outcome {
    let cfg = RunConfig::from_toml(DEFAULT_CONFIG).unwrap();
    let basis = build_basis(&cfg.basis_spec()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let k = rng.random_range(4..16);
        let g: Vec<Vec2> = (0..k)
            .map(|_| {
                let (r, th) = (0.7 + 1.7 * rng.random::<f64>(), std::f64::consts::TAU * rng.random::<f64>());
                Vec2::new(r * th.cos(), r * th.sin())
            })
            .collect();
        let row = basis.design_row(&g).unwrap();
        let angle = std::f64::consts::TAU * rng.random::<f64>();
        let reflect = rng.random::<bool>();
        let mut h: Vec<Vec2> =
            g.iter().map(|v| Vec2::new(v.x, if reflect { -v.y } else { v.y }).rotate(angle)).collect();
        h.shuffle(&mut rng);
        let other = basis.design_row(&h).unwrap();
        let scale = row.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let diff = row.iter().zip(&other).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        worst = worst.max(diff / scale);
    }
    outcome(
        worst < 1e-12,
        format!("max relative change {worst:.2e} < 1e-12 over 100 transforms, {} functions", basis.len()),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| -> Result<Vec<u8>, String> {
        let out = dir.path().join(name);
        let st = Command::new(env!("CARGO_BIN_EXE_mlipgen"))
            .args(["study", "--out", out.to_str().unwrap()])
            .output()
            .map_err(|e| e.to_string())?;
        if !st.status.success() {
            return Err(String::from_utf8_lossy(&st.stderr).into_owned());
        }
        std::fs::read(out.join("study.csv")).map_err(|e| e.to_string())
    };
    match (run("a"), run("b")) {
        (Ok(a), Ok(b)) => {
            let rows = a.split(|&c| c == b'\n').filter(|l| !l.is_empty() && l[0] != b'#').count() - 1;
            outcome(
                a == b,
                format!("two runs of the bundled config: {} bytes, {rows} rows, identical: {}", a.len(), a == b),
            )
        }
        (a, b) => outcome(false, format!("{:?} {:?}", a.err(), b.err())),
    }
}

fn timed(results: &mut Vec<(Outcome, Duration)>, f: impl FnOnce() -> Outcome) {
    let t = Instant::now();
    let o = f();
    results.push((o, t.elapsed()));
}

fn main() -> ExitCode {
    let budgets: [(u32, &str, Duration); 12] = [
        (1, "derivative correctness", Duration::from_secs(60)),
        (2, "phonon stability", Duration::from_secs(60)),
        (3, "decay", Duration::from_secs(600)),
        (4, "truncation rate", Duration::from_secs(300)),
        (5, "predictor residual", Duration::from_secs(900)),
        (6, "corrector", Duration::from_secs(1200)),
        (7, "error vs force RMSE", Duration::from_secs(1800)),
        (8, "error vs training size", Duration::from_secs(3600)),
        (9, "defect count scaling", Duration::from_secs(1800)),
        (10, "rr-QR oracle", Duration::from_secs(10)),
        (11, "basis invariance", Duration::from_secs(60)),
        (12, "study determinism", Duration::MAX),
    ];
    let r = Reference::new();
    let mut results: Vec<(Outcome, Duration)> = Vec::new();
    timed(&mut results, derivatives);
    timed(&mut results, || phonon_stability(&r));
    let t = Instant::now();
    let c = core(&r);
    let core_time = t.elapsed();
    timed(&mut results, || decay(&c));
    timed(&mut results, || truncation(&r, &c));
    results[2].1 += core_time;
    results[3].1 += core_time;
    // Criteria 5 and 6 share their equilibria; each is charged the full time.
    let t = Instant::now();
    let (pred, corr) = predictor_and_corrector(&r, &c);
    let shared = t.elapsed() + core_time;
    results.push((pred, shared));
    results.push((corr, shared));
    timed(&mut results, error_vs_rmse);
    timed(&mut results, error_vs_size);
    timed(&mut results, defect_count);
    timed(&mut results, rrqr_oracle);
    timed(&mut results, invariance);
    timed(&mut results, determinism);

    let mut unexpected = 0;
    println!();
    for ((id, name, budget), (o, elapsed)) in budgets.iter().zip(&results) {
        let in_time = *elapsed < *budget;
        let pass = o.pass && in_time;
        let expected = EXPECTED_FAILURES.contains(id);
        let note = match (pass, expected) {
            (false, true) => " [expected failure]",
            (true, true) => " [unexpected pass]",
            _ => "",
        };
        if !pass && !expected {
            unexpected += 1;
        }
        let budget_text = if *budget == Duration::MAX { String::new() } else { format!(" / {}s", budget.as_secs()) };
        println!(
            "criterion {id:>2} {} {name}: {} [{:.1}s{budget_text}]{note}",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64()
        );
    }
    let passed = budgets.iter().zip(&results).filter(|(b, (o, e))| o.pass && *e < b.2).count();
    println!("acceptance: {passed}/12 criteria pass; {unexpected} unexpected failures");
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
