use std::fs;
use std::path::{Path, PathBuf};

use lora_construct::train::LossCurve;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::experiments::Cell;
use crate::BenchError;

pub const CSV_HEADER: &str =
    "experiment,model_kind,method,rank,seed,train_mse,test_mse,predicted_bound,accuracy,params_tunable,elapsed_ms";

/// One (method, rank, seed) cell. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub model_kind: String,
    pub method: String,
    pub rank: usize,
    pub seed: u64,
    pub train_mse: Option<f64>,
    pub test_mse: f64,
    pub predicted_bound: Option<f64>,
    pub accuracy: Option<f64>,
    pub params_tunable: usize,
    pub elapsed_ms: u64,
}

impl ResultRow {
    /// Equality ignoring wall-clock time.
    pub fn same_result(&self, other: &ResultRow) -> bool {
        ResultRow {
            elapsed_ms: 0,
            ..self.clone()
        } == ResultRow {
            elapsed_ms: 0,
            ..other.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellStatus {
    Ok,
    Failed,
    AssumptionViolation,
    Timeout,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRecord {
    pub id: String,
    pub cell: Cell,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub elapsed_ms: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub input_radius: f64,
    /// Test inputs are Gaussian draws redrawn until they land in the input ball.
    pub test_inputs: String,
    pub wall_clock_ms: u64,
    pub cells: Vec<CellRecord>,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            seeds: config.seed_list(),
            input_radius: config.radius(),
            test_inputs: "standard gaussian truncated to the input ball by resampling".into(),
            wall_clock_ms: 0,
            cells: Vec::new(),
        }
    }

    pub fn has_failures(&self) -> bool {
        self.cells.iter().any(|c| c.status != CellStatus::Ok)
    }

    pub fn has_assumption_violations(&self) -> bool {
        self.cells.iter().any(|c| c.status == CellStatus::AssumptionViolation)
    }
}

fn io(path: &Path, e: impl std::fmt::Display) -> BenchError {
    BenchError::Io(format!("{}: {e}", path.display()))
}

pub fn rows_to_csv(rows: &[ResultRow]) -> Result<String, BenchError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    // An empty sweep still gets a header.
    if rows.is_empty() {
        return Ok(format!("{CSV_HEADER}\n"));
    }
    for r in rows {
        w.serialize(r).map_err(|e| BenchError::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| BenchError::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<ResultRow>, BenchError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| BenchError::Io(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(BenchError::Io(format!("unexpected header `{}`", header.iter().collect::<Vec<_>>().join(","))));
    }
    r.deserialize().map(|row| row.map_err(|e| BenchError::Io(e.to_string()))).collect()
}

/// Writes through a temporary file so readers never see a partial file.
fn write_atomic(path: &Path, contents: &str) -> Result<(), BenchError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io(path, e))
}

#[derive(Debug, Clone)]
pub struct OutputPaths {
    pub dir: PathBuf,
}

impl OutputPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        OutputPaths { dir: dir.into() }
    }

    pub fn results(&self) -> PathBuf {
        self.dir.join("results.csv")
    }

    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    pub fn curve(&self, cell_id: &str) -> PathBuf {
        self.dir.join("curves").join(format!("{cell_id}.csv"))
    }
}

pub fn emit(rows: &[ResultRow], manifest: &RunManifest, paths: &OutputPaths) -> Result<(), BenchError> {
    write_atomic(&paths.results(), &rows_to_csv(rows)?)?;
    let json = serde_json::to_string_pretty(manifest).map_err(|e| BenchError::Io(e.to_string()))?;
    write_atomic(&paths.manifest(), &json)
}

pub fn write_curve(curve: &LossCurve, cell_id: &str, paths: &OutputPaths) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| BenchError::Io(e.to_string());
    w.write_record(["iteration", "loss"]).map_err(err)?;
    for (i, l) in curve.losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()]).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| BenchError::Io(e.to_string()))?;
    write_atomic(&paths.curve(cell_id), &String::from_utf8(bytes).expect("utf-8"))
}

/// Rows and manifest from an earlier run in `paths`, if there is one.
pub fn load_previous(paths: &OutputPaths) -> Result<Option<(Vec<ResultRow>, RunManifest)>, BenchError> {
    let (rp, mp) = (paths.results(), paths.manifest());
    if !mp.exists() {
        return Ok(None);
    }
    let manifest: RunManifest =
        serde_json::from_str(&fs::read_to_string(&mp).map_err(|e| io(&mp, e))?).map_err(|e| io(&mp, e))?;
    let rows = if rp.exists() {
        rows_from_csv(&fs::read_to_string(&rp).map_err(|e| io(&rp, e))?)?
    } else {
        Vec::new()
    };
    Ok(Some((rows, manifest)))
}
