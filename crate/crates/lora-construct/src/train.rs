//! Gradient baselines: LoRA factors trained with Adam over a learning-rate ×
//! weight-decay grid, final-layers tuning, and pretraining a frozen model part
//! of the way toward its target.

use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fnn::FnnModel;
use crate::linear::LinearChain;
use crate::matrix::{gaussian_matrix, per_coordinate_mse, seeded_rng, Matrix, Vector};
use crate::tfn::{AttentionHead, TfnBlock, TfnModel};

/// Any of the three model families, frozen or target.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Linear(LinearChain),
    Fnn(FnnModel),
    Tfn(TfnModel),
}

impl Model {
    pub fn dim(&self) -> usize {
        match self {
            Model::Linear(c) => c.dim(),
            Model::Fnn(m) => m.dim(),
            Model::Tfn(m) => m.dim(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Model::Linear(_) => "linear",
            Model::Fnn(_) => "fnn",
            Model::Tfn(_) => "tfn",
        }
    }

    /// Weight matrices in canonical order. For attention models: per block,
    /// per head Q, K, V, [O]; then W_1, W_2; finally W_o.
    pub fn weights(&self) -> Vec<Matrix> {
        match self {
            Model::Linear(c) => c.weights().to_vec(),
            Model::Fnn(m) => m.weights.clone(),
            Model::Tfn(m) => {
                let mut out = Vec::new();
                for b in &m.blocks {
                    for h in &b.heads {
                        out.extend([h.w_q.clone(), h.w_k.clone(), h.w_v.clone()]);
                        if let Some(o) = &h.w_o {
                            out.push(o.clone());
                        }
                    }
                    out.extend([b.w1.clone(), b.w2.clone()]);
                }
                out.push(m.w_out.clone());
                out
            }
        }
    }

    /// Bias vectors in canonical order (per block b_1, b_2 for attention models).
    pub fn biases(&self) -> Vec<Vector> {
        match self {
            Model::Linear(_) => Vec::new(),
            Model::Fnn(m) => m.biases.clone(),
            Model::Tfn(m) => m.blocks.iter().flat_map(|b| [b.b1.clone(), b.b2.clone()]).collect(),
        }
    }

    /// Same architecture with new parameters in canonical order.
    pub fn rebuild(&self, weights: Vec<Matrix>, biases: Vec<Vector>) -> Model {
        match self {
            Model::Linear(_) => Model::Linear(LinearChain::new(weights).expect("shapes preserved")),
            Model::Fnn(_) => Model::Fnn(FnnModel { weights, biases }),
            Model::Tfn(m) => {
                let mut w = weights.into_iter();
                let mut b = biases.into_iter();
                let blocks = m
                    .blocks
                    .iter()
                    .map(|blk| {
                        let heads = blk
                            .heads
                            .iter()
                            .map(|h| AttentionHead {
                                w_q: w.next().unwrap(),
                                w_k: w.next().unwrap(),
                                w_v: w.next().unwrap(),
                                w_o: h.w_o.as_ref().map(|_| w.next().unwrap()),
                            })
                            .collect();
                        TfnBlock {
                            heads,
                            w1: w.next().unwrap(),
                            w2: w.next().unwrap(),
                            b1: b.next().unwrap(),
                            b2: b.next().unwrap(),
                        }
                    })
                    .collect();
                Model::Tfn(TfnModel {
                    head_type: m.head_type,
                    blocks,
                    w_out: w.next().unwrap(),
                })
            }
        }
    }

    /// Plain evaluation of one input chunk: a batch of columns, or one token sequence.
    pub fn eval(&self, x: &Matrix) -> Matrix {
        match self {
            Model::Linear(c) => c.product() * x,
            Model::Fnn(m) => m.forward_batch(x),
            Model::Tfn(m) => m.forward(x).expect("input shape checked by caller"),
        }
    }

    /// Draws `batch` inputs. Columns for linear and ReLU models, `batch`
    /// separate `dim × seq_len` sequences for attention models.
    pub fn sample_inputs<R: Rng + ?Sized>(&self, batch: usize, seq_len: usize, rng: &mut R) -> Vec<Matrix> {
        let d = self.dim();
        match self {
            Model::Tfn(_) => (0..batch).map(|_| gaussian_matrix(d, seq_len, rng)).collect(),
            _ => vec![gaussian_matrix(d, batch, rng)],
        }
    }

    fn tape_forward(&self, tape: &mut Tape, w: &[Var], b: &[Var], x: Var) -> Result<Var> {
        match self {
            Model::Linear(_) => {
                let mut z = x;
                for &wv in w {
                    z = tape.matmul(wv, z)?;
                }
                Ok(z)
            }
            Model::Fnn(_) => {
                let mut z = x;
                for (&wv, &bv) in w.iter().zip(b) {
                    let a = tape.matmul(wv, z)?;
                    let a = tape.add_bias(a, bv)?;
                    z = tape.relu(a);
                }
                Ok(z)
            }
            Model::Tfn(m) => {
                let mut wi = w.iter().copied();
                let mut bi = b.iter().copied();
                let mut z = x;
                for blk in &m.blocks {
                    let mut attn: Option<Var> = None;
                    for h in &blk.heads {
                        let (q, k, v) = (wi.next().unwrap(), wi.next().unwrap(), wi.next().unwrap());
                        let kz = tape.matmul(k, z)?;
                        let qz = tape.matmul(q, z)?;
                        let kzt = tape.transpose(kz);
                        let scores = tape.matmul(kzt, qz)?;
                        let s = tape.softmax_columns(scores);
                        let vz = tape.matmul(v, z)?;
                        let mut head = tape.matmul(vz, s)?;
                        if h.w_o.is_some() {
                            head = tape.matmul(wi.next().unwrap(), head)?;
                        }
                        attn = Some(match attn {
                            None => head,
                            Some(acc) => tape.add(acc, head)?,
                        });
                    }
                    let (w1, w2) = (wi.next().unwrap(), wi.next().unwrap());
                    let (b1, b2) = (bi.next().unwrap(), bi.next().unwrap());
                    let hid = tape.matmul(w1, attn.expect("at least one head"))?;
                    let hid = tape.add_bias(hid, b1)?;
                    let hid = tape.relu(hid);
                    let out = tape.matmul(w2, hid)?;
                    z = tape.add_bias(out, b2)?;
                }
                let logits = tape.matmul(wi.next().unwrap(), z)?;
                Ok(tape.softmax_columns(logits))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Mse,
    CrossEntropy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rates: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub iterations: usize,
    pub batch: usize,
    pub validation_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Tokens per sequence for attention models.
    pub seq_len: usize,
    pub seed: u64,
    #[serde(skip)]
    pub deadline: Option<Instant>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rates: vec![1e-2, 1e-3, 1e-4],
            weight_decays: vec![0.0, 1e-2, 1e-3, 1e-4],
            iterations: 5000,
            batch: 256,
            validation_size: 256,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seq_len: 10,
            seed: 0,
            deadline: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rates.is_empty() || self.weight_decays.is_empty() {
            return Err(Error::InvalidArgument("training grid is empty".into()));
        }
        if self.batch == 0 || self.validation_size == 0 || self.seq_len == 0 {
            return Err(Error::InvalidArgument("batch, validation size and sequence length must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub train_biases: bool,
    pub loss: LossKind,
    /// Frozen matrix applied to both models' outputs before the loss.
    pub fixed_output_layer: Option<Matrix>,
    /// Train on a fixed set of this many samples instead of fresh batches.
    pub finite_train_set: Option<usize>,
}

/// Low-rank factors; the realized update is `a bᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraParam {
    pub a: Matrix,
    pub b: Matrix,
}

impl LoraParam {
    /// `a` Gaussian with standard deviation `1/sqrt(rank)`, `b` zero.
    pub fn init<R: Rng + ?Sized>(dim: usize, rank: usize, rng: &mut R) -> Self {
        let std = 1.0 / (rank.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        LoraParam {
            a: Matrix::from_fn(dim, rank, |_, _| normal.sample(rng)),
            b: Matrix::zeros(dim, rank),
        }
    }

    pub fn delta(&self) -> Matrix {
        &self.a * self.b.transpose()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    Frozen,
    Lora { a: usize, b: usize },
    Full(usize),
}

/// Which parameters a run trains, and where they sit in the flat tensor list.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    weights: Vec<Slot>,
    biases: Vec<Option<usize>>,
    count: usize,
}

impl ParamLayout {
    fn new() -> Self {
        ParamLayout {
            weights: Vec::new(),
            biases: Vec::new(),
            count: 0,
        }
    }

    fn next(&mut self) -> usize {
        self.count += 1;
        self.count - 1
    }

    /// Low-rank factors on every weight; biases trainable if asked.
    pub fn lora(model: &Model, rank: usize, train_biases: bool) -> Self {
        let mut l = ParamLayout::new();
        for _ in model.weights() {
            let s = if rank == 0 {
                Slot::Frozen
            } else {
                let a = l.next();
                let b = l.next();
                Slot::Lora { a, b }
            };
            l.weights.push(s);
        }
        for _ in model.biases() {
            let s = train_biases.then(|| l.next());
            l.biases.push(s);
        }
        l
    }

    /// Full weights and biases of the last `k` layers of a chain or ReLU model.
    pub fn final_layers(model: &Model, k: usize) -> Self {
        let n = model.weights().len();
        let mut l = ParamLayout::new();
        for i in 0..n {
            let s = if i + k >= n { Slot::Full(l.next()) } else { Slot::Frozen };
            l.weights.push(s);
        }
        for i in 0..model.biases().len() {
            let s = (i + k >= n).then(|| l.next());
            l.biases.push(s);
        }
        l
    }

    /// Every weight and bias, at full rank.
    pub fn everything(model: &Model) -> Self {
        Self::final_layers(model, model.weights().len())
    }

    /// Initial tensors: LoRA factors per [`LoraParam::init`], full weights and biases copied.
    pub fn init_params<R: Rng + ?Sized>(&self, model: &Model, rank: usize, rng: &mut R) -> Vec<Matrix> {
        let d = model.dim();
        let mut out = vec![Matrix::zeros(0, 0); self.count];
        let ws = model.weights();
        for (w, s) in ws.iter().zip(&self.weights) {
            match *s {
                Slot::Frozen => {}
                Slot::Lora { a, b } => {
                    let p = LoraParam::init(d, rank, rng);
                    out[a] = p.a;
                    out[b] = p.b;
                }
                Slot::Full(i) => out[i] = w.clone(),
            }
        }
        for (b, s) in model.biases().iter().zip(&self.biases) {
            if let Some(i) = s {
                out[*i] = Matrix::from_column_slice(d, 1, b.as_slice());
            }
        }
        out
    }

    /// Number of trainable scalars.
    pub fn tunable(&self, params: &[Matrix]) -> usize {
        params.iter().map(|p| p.len()).sum()
    }

    /// Model with the parameters folded in.
    pub fn realize(&self, model: &Model, params: &[Matrix]) -> Model {
        let ws = model
            .weights()
            .into_iter()
            .zip(&self.weights)
            .map(|(w, s)| match *s {
                Slot::Frozen => w,
                Slot::Lora { a, b } => w + &params[a] * params[b].transpose(),
                Slot::Full(i) => params[i].clone(),
            })
            .collect();
        let bs = model
            .biases()
            .into_iter()
            .zip(&self.biases)
            .map(|(b, s)| match s {
                None => b,
                Some(i) => params[*i].column(0).into_owned(),
            })
            .collect();
        model.rebuild(ws, bs)
    }

    fn bind(&self, tape: &mut Tape, model: &Model, params: &[Matrix]) -> Result<(Vec<Var>, Vec<Var>, Vec<Var>)> {
        let pv: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let mut wv = Vec::with_capacity(self.weights.len());
        for (w, s) in model.weights().into_iter().zip(&self.weights) {
            wv.push(match *s {
                Slot::Frozen => tape.leaf(w),
                Slot::Lora { a, b } => {
                    let base = tape.leaf(w);
                    let bt = tape.transpose(pv[b]);
                    let delta = tape.matmul(pv[a], bt)?;
                    tape.add(base, delta)?
                }
                Slot::Full(i) => pv[i],
            });
        }
        let d = model.dim();
        let bv = model
            .biases()
            .into_iter()
            .zip(&self.biases)
            .map(|(b, s)| match s {
                None => tape.leaf(Matrix::from_column_slice(d, 1, b.as_slice())),
                Some(i) => pv[*i],
            })
            .collect();
        Ok((pv, wv, bv))
    }
}

/// What the loss compares against, per input chunk.
#[derive(Debug, Clone)]
pub enum Targets {
    Outputs(Vec<Matrix>),
    Labels(Vec<Vec<usize>>),
}

fn argmax_columns(m: &Matrix) -> Vec<usize> {
    m.column_iter()
        .map(|c| {
            let mut best = 0;
            for i in 1..c.len() {
                if c[i] > c[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Model outputs per chunk, with the optional fixed head applied.
pub fn head_outputs(model: &Model, inputs: &[Matrix], head: Option<&Matrix>) -> Vec<Matrix> {
    inputs
        .iter()
        .map(|x| {
            let y = model.eval(x);
            match head {
                Some(h) => h * y,
                None => y,
            }
        })
        .collect()
}

/// Class predictions (argmax per column) per chunk.
pub fn predict_labels(model: &Model, inputs: &[Matrix], head: Option<&Matrix>) -> Vec<Vec<usize>> {
    head_outputs(model, inputs, head).iter().map(argmax_columns).collect()
}

pub fn make_targets(target: &Model, inputs: &[Matrix], opts: &TrainOptions) -> Targets {
    let head = opts.fixed_output_layer.as_ref();
    match opts.loss {
        LossKind::Mse => Targets::Outputs(head_outputs(target, inputs, head)),
        LossKind::CrossEntropy => Targets::Labels(predict_labels(target, inputs, head)),
    }
}

/// Loss averaged over chunks and its gradient with respect to every tensor in `params`.
pub fn objective(
    model: &Model,
    layout: &ParamLayout,
    params: &[Matrix],
    inputs: &[Matrix],
    targets: &Targets,
    head: Option<&Matrix>,
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let (pv, wv, bv) = layout.bind(&mut tape, model, params)?;
    let head_v = head.map(|h| tape.leaf(h.clone()));
    let mut total: Option<Var> = None;
    for (c, x) in inputs.iter().enumerate() {
        let xv = tape.leaf(x.clone());
        let mut out = model.tape_forward(&mut tape, &wv, &bv, xv)?;
        if let Some(h) = head_v {
            out = tape.matmul(h, out)?;
        }
        let l = match targets {
            Targets::Outputs(ys) => {
                let yv = tape.leaf(ys[c].clone());
                tape.mse(out, yv)?
            }
            Targets::Labels(ls) => tape.cross_entropy(out, ls[c].clone())?,
        };
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let loss = tape.scale(total, 1.0 / inputs.len() as f64);
    let grads = tape.backward(loss)?;
    Ok((tape.scalar(loss), pv.iter().map(|&v| grads.get(&tape, v)).collect()))
}

/// Loss without gradients.
pub fn evaluate_loss(model: &Model, inputs: &[Matrix], targets: &Targets, head: Option<&Matrix>) -> f64 {
    let outs = head_outputs(model, inputs, head);
    let mut total = 0.0;
    for (c, y) in outs.iter().enumerate() {
        total += match targets {
            Targets::Outputs(ys) => per_coordinate_mse(y, &ys[c]),
            Targets::Labels(ls) => {
                let mut s = 0.0;
                for (j, &lab) in ls[c].iter().enumerate() {
                    let col = y.column(j);
                    let mx = col.max();
                    s += mx + col.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() - col[lab];
                }
                s / ls[c].len() as f64
            }
        };
    }
    total / outs.len() as f64
}

struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(params: &[Matrix], cfg: &TrainConfig) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.nrows(), p.ncols())).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    /// One step; weight decay enters as an L2 term on the gradient.
    fn step(&mut self, params: &mut [Matrix], grads: &[Matrix], lr: f64, wd: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = if wd != 0.0 { &grads[i] + &params[i] * wd } else { grads[i].clone() };
            self.m[i] = &self.m[i] * self.beta1 + &g * (1.0 - self.beta1);
            self.v[i] = &self.v[i] * self.beta2 + g.map(|x| x * x) * (1.0 - self.beta2);
            let (eps, m, v) = (self.eps, &self.m[i], &self.v[i]);
            let upd = m.zip_map(v, |mi, vi| (mi / c1) / ((vi / c2).sqrt() + eps));
            params[i] -= upd * lr;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossCurve {
    pub losses: Vec<f64>,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCell {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// `None` when the run diverged.
    pub validation_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub adapted: Model,
    /// Realized update per weight, in canonical order.
    pub weight_deltas: Vec<Matrix>,
    pub biases: Vec<Vector>,
    pub curve: LossCurve,
    pub grid: Vec<GridCell>,
    pub params_tunable: usize,
    /// Final loss on the fixed training set, when one was used.
    pub train_loss: Option<f64>,
    pub notes: Vec<String>,
}

// Independent streams derived from the run seed.
const DATA_STREAM: u64 = 0x5eed_da7a;
const INIT_STREAM: u64 = 0x5eed_1417;
const VALIDATION_STREAM: u64 = 0x5eed_7a11;

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    seeded_rng(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ tag)
}

fn check_deadline(cfg: &TrainConfig, started: Instant) -> Result<()> {
    if let Some(d) = cfg.deadline {
        if Instant::now() > d {
            return Err(Error::Timeout {
                elapsed_ms: started.elapsed().as_millis(),
            });
        }
    }
    Ok(())
}

fn check_models(frozen: &Model, target: &Model) -> Result<()> {
    if frozen.kind() != target.kind() || frozen.dim() != target.dim() {
        return Err(Error::dims(
            "training pair",
            format!("{} (D={}) vs {} (D={})", frozen.kind(), frozen.dim(), target.kind(), target.dim()),
        ));
    }
    Ok(())
}

/// Runs the grid for a given parameter layout and keeps the run with the
/// lowest final validation loss.
pub fn train_layout(
    frozen: &Model,
    target: &Model,
    layout: &ParamLayout,
    rank: usize,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_models(frozen, target)?;
    let started = Instant::now();
    let head = opts.fixed_output_layer.as_ref();
    let val_inputs = frozen.sample_inputs(cfg.validation_size, cfg.seq_len, &mut stream(cfg.seed, VALIDATION_STREAM));
    let val_targets = make_targets(target, &val_inputs, opts);
    let init = layout.init_params(frozen, rank, &mut stream(cfg.seed, INIT_STREAM));
    let fixed_set = opts.finite_train_set.map(|n| {
        let xs = frozen.sample_inputs(n, cfg.seq_len, &mut stream(cfg.seed, DATA_STREAM ^ 1));
        let ts = make_targets(target, &xs, opts);
        (xs, ts)
    });

    let mut notes = Vec::new();
    let mut grid = Vec::new();
    let mut best: Option<(f64, Vec<Matrix>, LossCurve)> = None;
    for &lr in &cfg.learning_rates {
        for &wd in &cfg.weight_decays {
            let mut params = init.clone();
            let mut adam = Adam::new(&params, cfg);
            let mut data = stream(cfg.seed, DATA_STREAM);
            let mut losses = Vec::with_capacity(cfg.iterations);
            let mut diverged = false;
            for it in 0..cfg.iterations {
                if it % 64 == 0 {
                    check_deadline(cfg, started)?;
                }
                let (xs, ts) = match &fixed_set {
                    None => {
                        let xs = frozen.sample_inputs(cfg.batch, cfg.seq_len, &mut data);
                        let ts = make_targets(target, &xs, opts);
                        (xs, ts)
                    }
                    Some((xs, ts)) => subsample(xs, ts, cfg.batch, &mut data),
                };
                let (loss, grads) = objective(frozen, layout, &params, &xs, &ts, head)?;
                if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                    diverged = true;
                    break;
                }
                losses.push(loss);
                adam.step(&mut params, &grads, lr, wd);
            }
            let val = if diverged {
                None
            } else {
                let model = layout.realize(frozen, &params);
                Some(evaluate_loss(&model, &val_inputs, &val_targets, head)).filter(|v| v.is_finite())
            };
            grid.push(GridCell {
                learning_rate: lr,
                weight_decay: wd,
                validation_loss: val,
            });
            match val {
                None => notes.push(format!("lr={lr:e} wd={wd:e} diverged; dropped from grid")),
                Some(v) => {
                    if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                        let curve = LossCurve {
                            losses,
                            learning_rate: lr,
                            weight_decay: wd,
                            validation_loss: v,
                        };
                        best = Some((v, params, curve));
                    }
                }
            }
        }
    }
    let (_, params, curve) = best.ok_or_else(|| Error::AllRunsDiverged(notes.join("; ")))?;
    let adapted = layout.realize(frozen, &params);
    let weight_deltas = adapted.weights().iter().zip(frozen.weights()).map(|(a, w)| a - w).collect();
    let train_loss = fixed_set.as_ref().map(|(xs, ts)| evaluate_loss(&adapted, xs, ts, head));
    Ok(TrainOutcome {
        train_loss,
        biases: adapted.biases(),
        adapted,
        weight_deltas,
        curve,
        grid,
        params_tunable: layout.tunable(&init),
        notes,
    })
}

fn subsample<R: Rng + ?Sized>(xs: &[Matrix], ts: &Targets, batch: usize, rng: &mut R) -> (Vec<Matrix>, Targets) {
    if xs.len() == 1 {
        // One chunk of columns.
        let n = xs[0].ncols();
        if n <= batch {
            return (xs.to_vec(), ts.clone());
        }
        let idx: Vec<usize> = sample_indices(rng, n, batch).into_vec();
        let x = xs[0].select_columns(&idx);
        let t = match ts {
            Targets::Outputs(ys) => Targets::Outputs(vec![ys[0].select_columns(&idx)]),
            Targets::Labels(ls) => Targets::Labels(vec![idx.iter().map(|&i| ls[0][i]).collect()]),
        };
        return (vec![x], t);
    }
    if xs.len() <= batch {
        return (xs.to_vec(), ts.clone());
    }
    let idx: Vec<usize> = sample_indices(rng, xs.len(), batch).into_vec();
    let x = idx.iter().map(|&i| xs[i].clone()).collect();
    let t = match ts {
        Targets::Outputs(ys) => Targets::Outputs(idx.iter().map(|&i| ys[i].clone()).collect()),
        Targets::Labels(ls) => Targets::Labels(idx.iter().map(|&i| ls[i].clone()).collect()),
    };
    (x, t)
}

pub fn train_lora(
    frozen: &Model,
    target: &Model,
    rank: usize,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if rank > frozen.dim() {
        return Err(Error::InvalidArgument(format!("rank {rank} exceeds dimension {}", frozen.dim())));
    }
    let layout = ParamLayout::lora(frozen, rank, opts.train_biases);
    train_layout(frozen, target, &layout, rank, cfg, opts)
}

/// Retrains the full weights and biases of the last `k` layers.
pub fn train_final_layers(
    frozen: &Model,
    target: &Model,
    k: usize,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let depth = match frozen {
        Model::Linear(c) => c.depth(),
        Model::Fnn(m) => m.depth(),
        Model::Tfn(_) => return Err(Error::InvalidArgument("final-layers tuning is defined for chains and ReLU models".into())),
    };
    if k == 0 || k >= depth {
        return Err(Error::InvalidArgument(format!("need 1 <= k < {depth}, got {k}")));
    }
    let layout = ParamLayout::final_layers(frozen, k);
    train_layout(frozen, target, &layout, 0, cfg, opts)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub batch: usize,
    pub eval_size: usize,
    pub check_every: usize,
    pub max_iterations: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            learning_rate: 1e-3,
            batch: 256,
            eval_size: 1024,
            check_every: 10,
            max_iterations: 50_000,
            seq_len: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: Model,
    pub initial_mse: f64,
    pub final_mse: f64,
    pub iterations: usize,
    /// `(iteration, best loss ratio so far)` at every check.
    pub checkpoints: Vec<(usize, f64)>,
}

/// Full-rank Adam updates on every frozen parameter until the held-out MSE
/// drops to `(1 - reduction)` of where it started.
pub fn pretrain_toward(frozen: &Model, target: &Model, reduction: f64, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    check_models(frozen, target)?;
    if !(0.0..1.0).contains(&reduction) {
        return Err(Error::InvalidArgument(format!("reduction must lie in [0, 1), got {reduction}")));
    }
    let opts = TrainOptions::default();
    let eval_x = frozen.sample_inputs(cfg.eval_size, cfg.seq_len, &mut stream(cfg.seed, VALIDATION_STREAM ^ 2));
    let eval_t = make_targets(target, &eval_x, &opts);
    let initial = evaluate_loss(frozen, &eval_x, &eval_t, None);
    let goal = (1.0 - reduction) * initial;
    let mut checkpoints = vec![(0, 1.0)];
    if initial == 0.0 || initial <= goal {
        return Ok(PretrainOutcome {
            model: frozen.clone(),
            initial_mse: initial,
            final_mse: initial,
            iterations: 0,
            checkpoints,
        });
    }

    let layout = ParamLayout::everything(frozen);
    let mut params = layout.init_params(frozen, 0, &mut stream(cfg.seed, INIT_STREAM));
    let train_cfg = TrainConfig::default();
    let mut adam = Adam::new(&params, &train_cfg);
    let mut data = stream(cfg.seed, DATA_STREAM ^ 2);
    let mut best = initial;
    for it in 1..=cfg.max_iterations {
        let xs = frozen.sample_inputs(cfg.batch, cfg.seq_len, &mut data);
        let ts = make_targets(target, &xs, &opts);
        let (_, grads) = objective(frozen, &layout, &params, &xs, &ts, None)?;
        adam.step(&mut params, &grads, cfg.learning_rate, 0.0);
        if it % cfg.check_every == 0 {
            let model = layout.realize(frozen, &params);
            let mse = evaluate_loss(&model, &eval_x, &eval_t, None);
            best = best.min(mse);
            checkpoints.push((it, best / initial));
            if mse <= goal {
                return Ok(PretrainOutcome {
                    model,
                    initial_mse: initial,
                    final_mse: mse,
                    iterations: it,
                    checkpoints,
                });
            }
        }
    }
    Err(Error::PretrainCap {
        cap: cfg.max_iterations,
        ratio: best / initial,
    })
}
