use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use lora_construct::fnn::{self, uniform_partition};
use lora_construct::linear::{self, LinearChain, RankBudget};
use lora_construct::matrix::{gaussian_in_ball, seeded_rng};
use lora_construct::tfn;
use lora_construct::train::{
    evaluate_loss, head_outputs, predict_labels, train_final_layers, train_lora, LossCurve, LossKind, Model, Targets,
    TrainConfig, TrainOptions,
};
use lora_construct::{Error, Matrix};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ExperimentKind, Method, ModelKind, Task};
use crate::emit::{self, CellRecord, CellStatus, OutputPaths, ResultRow, RunManifest};
use crate::model_file;
use crate::models::{generate_models, ModelSpec};
use crate::BenchError;

const TEST_STREAM: u64 = 0x7e57_0000;

/// One unit of work: a method at a rank (or tuned-layer count) on one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub experiment: ExperimentKind,
    pub model: ModelKind,
    pub method: Method,
    /// LoRA rank, or the number of tuned layers for the final-layers method.
    pub rank: usize,
    pub seed: u64,
    pub train_biases: bool,
}

impl Cell {
    pub fn id(&self) -> String {
        format!(
            "{}-{}-{}-r{}-s{}{}",
            self.experiment.name(),
            self.model.name(),
            self.method.name(),
            self.rank,
            self.seed,
            if self.train_biases { "-bias" } else { "" }
        )
    }
}

pub fn plan_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let model = cfg.model_kind();
    let mut out = Vec::new();
    for seed in cfg.seed_list() {
        let cell = |method, rank, train_biases| Cell {
            experiment: cfg.experiment,
            model,
            method,
            rank,
            seed,
            train_biases,
        };
        match cfg.experiment {
            ExperimentKind::CompareFinalLayers => {
                for &r in &cfg.ranks {
                    out.push(cell(Method::Gradient, r, cfg.train_biases));
                }
                for &k in &cfg.final_layers {
                    out.push(cell(Method::FinalLayers, k, true));
                }
            }
            ExperimentKind::AblateBias => {
                for &r in &cfg.ranks {
                    out.push(cell(Method::Gradient, r, false));
                    out.push(cell(Method::Gradient, r, true));
                }
            }
            ExperimentKind::Curves => {
                for &r in &cfg.ranks {
                    out.push(cell(Method::Gradient, r, cfg.train_biases));
                }
            }
            _ => {
                for &m in &cfg.methods {
                    if m == Method::FinalLayers {
                        for &k in &cfg.final_layers {
                            out.push(cell(m, k, true));
                        }
                    } else {
                        for &r in &cfg.ranks {
                            out.push(cell(m, r, cfg.train_biases));
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn model_spec(cfg: &ExperimentConfig) -> ModelSpec {
    ModelSpec {
        kind: cfg.model_kind(),
        dim: cfg.dim,
        depth: cfg.depth,
        target_depth: cfg.target_depth,
        heads: cfg.heads,
        head_type: cfg.head_type,
    }
}

/// Fixed 2×16 head: the first row sums coordinates 1..8, the second 9..16.
pub fn binary_head(dim: usize) -> Matrix {
    let half = dim / 2;
    Matrix::from_fn(2, dim, |r, c| if (c < half) == (r == 0) { 1.0 } else { 0.0 })
}

fn head_for(cfg: &ExperimentConfig) -> Option<Matrix> {
    (cfg.experiment == ExperimentKind::Classify && cfg.task == Task::Binary).then(|| binary_head(cfg.dim))
}

/// Held-out inputs for a seed: in-ball Gaussian columns, or sequences of them.
pub fn test_inputs(cfg: &ExperimentConfig, model: &Model, seed: u64) -> Vec<Matrix> {
    let mut rng = seeded_rng(seed ^ TEST_STREAM);
    let (d, n, rho) = (model.dim(), cfg.test_samples, cfg.radius());
    match model {
        Model::Tfn(_) => (0..n).map(|_| gaussian_in_ball(d, cfg.train.seq_len, rho, &mut rng)).collect(),
        _ => vec![gaussian_in_ball(d, n, rho, &mut rng)],
    }
}

pub struct CellOutput {
    pub row: ResultRow,
    pub curve: Option<LossCurve>,
    pub notes: Vec<String>,
}

struct Adapted {
    model: Model,
    predicted_bound: Option<f64>,
    params_tunable: usize,
    train_mse: Option<f64>,
    curve: Option<LossCurve>,
    notes: Vec<String>,
}

fn construct(cfg: &ExperimentConfig, frozen: &Model, target: &Model, rank: usize, seed: u64) -> Result<Adapted, BenchError> {
    let d = frozen.dim();
    let budget = RankBudget::Uniform(rank);
    let (model, predicted_bound, slots, bias_params) = match (frozen, target) {
        (Model::Linear(chain), Model::Linear(t)) => {
            let (base, plan) = linear::synthesize_with_jitter(chain, &t.product(), &budget, cfg.jitter.unwrap_or(0.0), seed)?;
            let ws = base.weights().iter().zip(&plan.deltas).map(|(w, dw)| w + dw).collect();
            (Model::Linear(LinearChain::new(ws)?), Some(plan.predicted_spectral_error), chain.depth(), 0)
        }
        (Model::Fnn(f), Model::Fnn(t)) => {
            let part = uniform_partition(f.depth(), t.depth())?;
            let plan = fnn::synthesize(f, t, &part, &budget, cfg.radius())?;
            let sigma = Matrix::identity(d, d);
            let bound = fnn::error_bound(f, t, &part, &budget, &sigma)?;
            (Model::Fnn(plan.apply(f)), Some(bound.bound), f.depth(), d * f.depth())
        }
        (Model::Tfn(f), Model::Tfn(t)) => {
            let gaps = tfn::compute_gaps(f, t)?;
            let plan = tfn::synthesize(f, t, rank)?;
            let slots = plan.adapted_deltas().len();
            let bound = (rank >= gaps.required_rank).then_some(0.0);
            (Model::Tfn(plan.apply(f)), bound, slots, 2 * d * f.depth())
        }
        _ => return Err(BenchError::Config("frozen and target families differ".into())),
    };
    Ok(Adapted {
        model,
        predicted_bound,
        params_tunable: 2 * rank * d * slots + bias_params,
        train_mse: None,
        curve: None,
        notes: Vec::new(),
    })
}

fn train_options(cfg: &ExperimentConfig, cell: &Cell) -> TrainOptions {
    TrainOptions {
        train_biases: cell.train_biases,
        loss: if cfg.experiment == ExperimentKind::Classify {
            LossKind::CrossEntropy
        } else {
            LossKind::Mse
        },
        fixed_output_layer: head_for(cfg),
        finite_train_set: (cfg.experiment == ExperimentKind::Generalization).then_some(cfg.train_samples),
    }
}

fn train_cell(cfg: &ExperimentConfig, cell: &Cell, frozen: &Model, target: &Model, started: Instant) -> Result<Adapted, BenchError> {
    let tc = TrainConfig {
        seed: cell.seed,
        deadline: Some(started + Duration::from_secs(cfg.cell_timeout_secs)),
        ..cfg.train.clone()
    };
    let opts = train_options(cfg, cell);
    if cell.method == Method::FinalLayers && cell.rank == 0 {
        return Ok(Adapted {
            model: frozen.clone(),
            predicted_bound: None,
            params_tunable: 0,
            train_mse: None,
            curve: None,
            notes: Vec::new(),
        });
    }
    let out = match cell.method {
        Method::FinalLayers => train_final_layers(frozen, target, cell.rank, &tc, &opts)?,
        _ => train_lora(frozen, target, cell.rank, &tc, &opts)?,
    };
    // With a fixed head the trainer's loss is on head outputs; report the
    // training error as output MSE in that case too.
    let train_mse = out.train_loss.filter(|_| opts.loss == LossKind::Mse);
    Ok(Adapted {
        model: out.adapted,
        predicted_bound: None,
        params_tunable: out.params_tunable,
        train_mse,
        curve: Some(out.curve),
        notes: out.notes,
    })
}

/// Runs one cell on an already generated model pair.
pub fn run_cell(cfg: &ExperimentConfig, cell: &Cell, frozen: &Model, target: &Model) -> Result<CellOutput, BenchError> {
    let started = Instant::now();
    let adapted = match cell.method {
        Method::Construction => construct(cfg, frozen, target, cell.rank, cell.seed)?,
        Method::Gradient | Method::FinalLayers => train_cell(cfg, cell, frozen, target, started)?,
    };
    let head = head_for(cfg);
    let xs = test_inputs(cfg, frozen, cell.seed);
    let reference = Targets::Outputs(head_outputs(target, &xs, head.as_ref()));
    let test_mse = evaluate_loss(&adapted.model, &xs, &reference, head.as_ref());
    let accuracy = (cfg.experiment == ExperimentKind::Classify).then(|| {
        let want = predict_labels(target, &xs, head.as_ref());
        let got = predict_labels(&adapted.model, &xs, head.as_ref());
        let total: usize = want.iter().map(Vec::len).sum();
        let hits: usize = want.iter().zip(&got).map(|(a, b)| a.iter().zip(b).filter(|(x, y)| x == y).count()).sum();
        hits as f64 / total as f64
    });
    Ok(CellOutput {
        row: ResultRow {
            experiment: cell.experiment.name().into(),
            model_kind: cell.model.name().into(),
            method: cell.method.name().into(),
            rank: cell.rank,
            seed: cell.seed,
            train_mse: adapted.train_mse,
            test_mse,
            predicted_bound: adapted.predicted_bound,
            accuracy,
            params_tunable: adapted.params_tunable,
            elapsed_ms: started.elapsed().as_millis() as u64,
        },
        curve: adapted.curve,
        notes: adapted.notes,
    })
}

/// The model pair for a seed: loaded from files when given, generated otherwise.
pub fn models_for(cfg: &ExperimentConfig, seed: u64) -> Result<(Model, Model), BenchError> {
    match (&cfg.frozen_model, &cfg.target_model) {
        (Some(f), Some(t)) => {
            let (f, t) = (model_file::load(f)?, model_file::load(t)?);
            if f.kind() != cfg.model_kind().name() || t.kind() != f.kind() {
                return Err(BenchError::Config(format!(
                    "model files are {} / {}, experiment needs {}",
                    f.kind(),
                    t.kind(),
                    cfg.model_kind().name()
                )));
            }
            Ok((f, t))
        }
        _ => generate_models(&model_spec(cfg), cfg.variant, seed, &cfg.pretrain),
    }
}

/// Regenerates the models for a recorded cell and runs it again.
pub fn replay_cell(manifest: &RunManifest, id: &str) -> Result<ResultRow, BenchError> {
    let rec = manifest
        .cells
        .iter()
        .find(|c| c.id == id)
        .ok_or_else(|| BenchError::Config(format!("no cell `{id}` in manifest")))?;
    let cfg = &manifest.config;
    let (frozen, target) = models_for(cfg, rec.cell.seed)?;
    Ok(run_cell(cfg, &rec.cell, &frozen, &target)?.row)
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<ResultRow>,
    pub manifest: RunManifest,
    pub curves: Vec<(String, LossCurve)>,
}

fn status_of(e: &BenchError) -> CellStatus {
    match e {
        BenchError::Construct(Error::Timeout { .. }) => CellStatus::Timeout,
        BenchError::Construct(err) if err.is_assumption_violation() => CellStatus::AssumptionViolation,
        _ => CellStatus::Failed,
    }
}

/// Runs every planned cell. With an output directory, rows and manifest are
/// rewritten after each cell and cells already recorded as finished are
/// skipped on a rerun with the same config.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome, BenchError> {
    cfg.validate()?;
    let started = Instant::now();
    let paths = cfg.out_dir.as_ref().map(OutputPaths::new);
    let mut manifest = RunManifest::new(cfg);
    let mut rows = Vec::new();
    let mut done: HashMap<String, ResultRow> = HashMap::new();
    if let Some(p) = &paths {
        if let Some((old_rows, old)) = emit::load_previous(p)? {
            let same = serde_json::to_value(&old.config).ok() == serde_json::to_value(cfg).ok();
            if !same {
                return Err(BenchError::Config(format!("{} holds a run with a different config", p.dir.display())));
            }
            let ok = old.cells.iter().filter(|c| c.status == CellStatus::Ok);
            for (rec, row) in ok.zip(old_rows) {
                done.insert(rec.id.clone(), row);
            }
            manifest.cells = old.cells.into_iter().filter(|c| done.contains_key(&c.id)).collect();
            rows = manifest.cells.iter().map(|c| done[&c.id].clone()).collect();
        }
    }

    let mut pairs: BTreeMap<u64, Result<(Model, Model), String>> = BTreeMap::new();
    let mut curves = Vec::new();
    for cell in plan_cells(cfg) {
        let id = cell.id();
        if done.contains_key(&id) {
            continue;
        }
        let t0 = Instant::now();
        let pair = pairs
            .entry(cell.seed)
            .or_insert_with(|| models_for(cfg, cell.seed).map_err(|e| e.to_string()));
        let result = match pair {
            Ok((f, t)) => run_cell(cfg, &cell, f, t),
            Err(msg) => Err(BenchError::Config(format!("model generation failed: {msg}"))),
        };
        let record = match result {
            Ok(out) => {
                if let (Some(c), Some(p)) = (&out.curve, &paths) {
                    if cfg.experiment == ExperimentKind::Curves {
                        emit::write_curve(c, &id, p)?;
                    }
                }
                if let Some(c) = out.curve {
                    curves.push((id.clone(), c));
                }
                rows.push(out.row);
                CellRecord {
                    id,
                    cell,
                    status: CellStatus::Ok,
                    message: None,
                    elapsed_ms: t0.elapsed().as_millis() as u64,
                    notes: out.notes,
                }
            }
            Err(e) => CellRecord {
                id,
                cell,
                status: status_of(&e),
                message: Some(e.to_string()),
                elapsed_ms: t0.elapsed().as_millis() as u64,
                notes: Vec::new(),
            },
        };
        manifest.cells.push(record);
        manifest.wall_clock_ms = started.elapsed().as_millis() as u64;
        if let Some(p) = &paths {
            emit::emit(&rows, &manifest, p)?;
        }
    }
    manifest.wall_clock_ms = started.elapsed().as_millis() as u64;
    if let Some(p) = &paths {
        emit::emit(&rows, &manifest, p)?;
    }
    Ok(SweepOutcome { rows, manifest, curves })
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Median test MSE across seeds, keyed by (method, rank, params_tunable).
pub fn median_test_mse(rows: &[ResultRow]) -> BTreeMap<(String, usize, usize), f64> {
    let mut groups: BTreeMap<(String, usize, usize), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.method.clone(), r.rank, r.params_tunable))
            .or_default()
            .push(r.test_mse);
    }
    groups.into_iter().filter_map(|(k, mut v)| median(&mut v).map(|m| (k, m))).collect()
}
