//! On-disk formats. Every artifact carries a [`Metadata`] header: a
//! `metadata` object in JSON, `# key=value` lines in CSV, and the comment
//! line of the XYZ file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mlipgen_core::lattice::{DefectKind, DefectedLattice, DisplacementField};
use mlipgen_core::surrogate::{BasisSpec, SurrogateModel};
use mlipgen_core::training::{Observation, Tag};
use mlipgen_core::Vec2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SCHEMA_VERSION};
use crate::error::{CliError, CliResult, StageExt};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const TRAINING_SET_FORMAT_VERSION: u32 = 1;

/// Metadata attached to every output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub schema_version: u32,
}

impl Metadata {
    pub fn new(cfg: &RunConfig, seed: u64) -> Self {
        Metadata {
            config_hash: cfg.hash(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            schema_version: SCHEMA_VERSION,
        }
    }

    fn pairs(&self) -> [(&'static str, String); 4] {
        [
            ("config_hash", self.config_hash.clone()),
            ("seed", self.seed.to_string()),
            ("version", self.version.clone()),
            ("schema_version", self.schema_version.to_string()),
        ]
    }

    /// `# key=value` lines for CSV headers.
    pub fn comment_block(&self) -> String {
        self.pairs().iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
    }

    /// Parses the block written by [`comment_block`](Self::comment_block).
    pub fn from_comment_block(text: &str) -> Option<Self> {
        let get = |key: &str| {
            text.lines()
                .filter_map(|l| l.strip_prefix("# "))
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .map(str::to_string)
        };
        Some(Metadata {
            config_hash: get("config_hash")?,
            seed: get("seed")?.parse().ok()?,
            version: get("version")?,
            schema_version: get("schema_version")?.parse().ok()?,
        })
    }
}

/// Shortest round-trip representation of a float.
pub fn num(x: f64) -> String {
    format!("{x:e}")
}

fn parse_num(s: &str, path: &Path) -> CliResult<f64> {
    s.trim().parse().map_err(|_| CliError::io(path, format!("bad number `{s}`")))
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    s.push('\n');
    write_text(path, &s)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::io(path, e))
}

/// CSV text with a metadata comment block.
pub fn csv_with_header(meta: &Metadata, header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields");
    format!("{}{body}", meta.comment_block())
}

/// Header and rows of a CSV written by [`csv_with_header`].
pub fn read_csv(path: &Path) -> CliResult<(Metadata, Vec<String>, Vec<Vec<String>>)> {
    let text = read_text(path)?;
    let meta = Metadata::from_comment_block(&text).ok_or_else(|| CliError::io(path, "missing metadata header"))?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| CliError::io(path, e))?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(|e| CliError::io(path, e))?.iter().map(str::to_string).collect());
    }
    Ok((meta, header, rows))
}

/// XYZ-style site list: count, metadata comment line, then `index x y`.
pub fn lattice_xyz(meta: &Metadata, lattice: &DefectedLattice) -> String {
    let mut s = format!("{}\n", lattice.n_sites());
    let pairs: Vec<String> = meta.pairs().iter().map(|(k, v)| format!("{k}={v}")).collect();
    s.push_str(&pairs.join(" "));
    s.push('\n');
    for (i, p) in lattice.positions().iter().enumerate() {
        let _ = writeln!(s, "{i} {} {}", num(p.x), num(p.y));
    }
    s
}

pub const DISPLACEMENT_HEADER: [&str; 5] = ["site", "x", "y", "ux", "uy"];

pub fn displacement_csv(meta: &Metadata, lattice: &DefectedLattice, u: &DisplacementField) -> String {
    let rows: Vec<Vec<String>> = (0..lattice.n_sites())
        .map(|i| {
            let p = lattice.position(i);
            vec![i.to_string(), num(p.x), num(p.y), num(u.values[i].x), num(u.values[i].y)]
        })
        .collect();
    csv_with_header(meta, &DISPLACEMENT_HEADER, &rows)
}

pub fn read_displacement_csv(path: &Path) -> CliResult<(Metadata, DisplacementField)> {
    let (meta, header, rows) = read_csv(path)?;
    if header != DISPLACEMENT_HEADER {
        return Err(CliError::io(path, "unexpected displacement columns"));
    }
    let mut values = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        if r[0].parse::<usize>().ok() != Some(i) {
            return Err(CliError::io(path, format!("site index out of order at row {i}")));
        }
        values.push(Vec2::new(parse_num(&r[3], path)?, parse_num(&r[4], path)?));
    }
    Ok((meta, DisplacementField::from_values(values)))
}

/// Serialized surrogate; coefficients survive a round trip bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub format_version: u32,
    pub metadata: Metadata,
    pub spec: BasisSpec,
    pub basis_size: usize,
    pub coefficients: Vec<f64>,
}

impl ModelDocument {
    pub fn new(meta: Metadata, model: &SurrogateModel) -> Self {
        ModelDocument {
            format_version: MODEL_FORMAT_VERSION,
            metadata: meta,
            spec: *model.spec(),
            basis_size: model.basis_size(),
            coefficients: model.coefficients().to_vec(),
        }
    }

    pub fn model(&self) -> CliResult<SurrogateModel> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(CliError::Check {
                stage: "load_model",
                message: format!("model format {} is not {MODEL_FORMAT_VERSION}", self.format_version),
            });
        }
        SurrogateModel::from_spec(&self.spec, self.coefficients.clone()).stage("load_model")
    }
}

/// First line of `observations.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSetHeader {
    pub format_version: u32,
    pub metadata: Metadata,
    /// Training cell side in units of `r0`.
    pub size: usize,
    pub defect: DefectKind,
    pub n_sites: usize,
    pub delta: f64,
    pub train_seed: u64,
    pub test_seed: u64,
    /// Energies are per-structure differences `𝓔_L(u)`; forces are `−∇𝓔_L`.
    pub energy_convention: String,
}

/// One observation; the configuration lives in a CSV next to the index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationRecord {
    pub index: usize,
    pub configuration: String,
    pub energy: f64,
    /// `[f_0x, f_0y, f_1x, ...]`.
    pub forces: Vec<f64>,
    pub tag: Tag,
}

pub const TRAINING_INDEX: &str = "observations.jsonl";
pub const ENERGY_CONVENTION: &str = "per-structure energy difference E(u) - E(0); RMSE reported per site";

const CONFIG_HEADER: [&str; 3] = ["site", "ux", "uy"];

pub fn write_training_set(dir: &Path, header: &TrainingSetHeader, samples: &[Observation]) -> CliResult<()> {
    let cfg_dir = dir.join("configs");
    ensure_dir(&cfg_dir)?;
    let mut index = serde_json::to_string(header).map_err(|e| CliError::io(dir, e))?;
    index.push('\n');
    for (k, obs) in samples.iter().enumerate() {
        let rel = format!("configs/{k:06}.csv");
        let rows: Vec<Vec<String>> =
            obs.u.values.iter().enumerate().map(|(i, v)| vec![i.to_string(), num(v.x), num(v.y)]).collect();
        write_text(&dir.join(&rel), &csv_with_header(&header.metadata, &CONFIG_HEADER, &rows))?;
        let rec = ObservationRecord {
            index: k,
            configuration: rel,
            energy: obs.energy,
            forces: obs.forces.iter().flat_map(|f| [f.x, f.y]).collect(),
            tag: obs.tag,
        };
        index.push_str(&serde_json::to_string(&rec).map_err(|e| CliError::io(dir, e))?);
        index.push('\n');
    }
    write_text(&dir.join(TRAINING_INDEX), &index)
}

pub fn read_training_set(dir: &Path) -> CliResult<(TrainingSetHeader, Vec<Observation>)> {
    let path = dir.join(TRAINING_INDEX);
    let text = read_text(&path)?;
    let mut lines = text.lines();
    let header: TrainingSetHeader =
        serde_json::from_str(lines.next().unwrap_or_default()).map_err(|e| CliError::io(&path, e))?;
    if header.format_version != TRAINING_SET_FORMAT_VERSION {
        return Err(CliError::io(&path, format!("training set format {} is not supported", header.format_version)));
    }
    let mut samples = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let rec: ObservationRecord = serde_json::from_str(line).map_err(|e| CliError::io(&path, e))?;
        let cfg_path: PathBuf = dir.join(&rec.configuration);
        let (_, _, rows) = read_csv(&cfg_path)?;
        let mut values = Vec::with_capacity(rows.len());
        for r in &rows {
            values.push(Vec2::new(parse_num(&r[1], &cfg_path)?, parse_num(&r[2], &cfg_path)?));
        }
        if values.len() != header.n_sites || rec.forces.len() != 2 * header.n_sites {
            return Err(CliError::io(&cfg_path, "observation size does not match the header"));
        }
        samples.push(Observation {
            u: DisplacementField::from_values(values),
            energy: rec.energy,
            forces: rec.forces.chunks(2).map(|c| Vec2::new(c[0], c[1])).collect(),
            tag: rec.tag,
        });
    }
    Ok((header, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DEFAULT_CONFIG;

    fn meta() -> Metadata {
        Metadata::new(&RunConfig::from_toml(DEFAULT_CONFIG).unwrap(), 7)
    }

    #[test]
    fn comment_block_round_trips() {
        let m = meta();
        assert_eq!(Metadata::from_comment_block(&m.comment_block()), Some(m));
    }

    #[test]
    fn model_coefficients_round_trip_bitwise() {
        let spec = BasisSpec { order: 2, max_degree: 4, radial_size: 3, angular_max: 2, cutoff: 2.5, r_in: 0.5 };
        let n = mlipgen_core::surrogate::build_basis(&spec).unwrap().len();
        let coeffs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.1).sqrt() * 1e-7 / 3.0 - f64::EPSILON * i as f64).collect();
        let model = SurrogateModel::from_spec(&spec, coeffs).unwrap();
        let doc = ModelDocument::new(meta(), &model);
        let text = serde_json::to_string_pretty(&doc).unwrap();
        let back: ModelDocument = serde_json::from_str(&text).unwrap();
        let m2 = back.model().unwrap();
        let bits = |m: &SurrogateModel| m.coefficients().iter().map(|c| c.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&model), bits(&m2));
        let mut wrong = back.clone();
        wrong.format_version = 99;
        assert!(wrong.model().is_err());
    }

    #[test]
    fn numbers_round_trip_through_text() {
        for x in [0.0, -0.0, 1e-300, 0.1 + 0.2, -123456.789e10, f64::MIN_POSITIVE] {
            let y: f64 = num(x).parse().unwrap();
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
