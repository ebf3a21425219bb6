//! ReLU networks of constant width and adapter construction for them.
//!
//! A shallower target is matched by grouping consecutive frozen layers into
//! blocks, one block per target layer. Inside a block the non-final layers get
//! biases large enough that every ReLU stays on for inputs in a known ball, so
//! the block acts as one affine map and the linear construction applies.

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear::{self, LinearChain, RankBudget};
use crate::matrix::{
    add_bias, check_finite, frobenius_norm, random_matrix, relu, seeded_rng, spectral_norm, svd_named,
    uniform_vector, Factorized, InitScheme, Matrix, Vector, RANK_TOL,
};

#[derive(Debug, Clone, PartialEq)]
pub struct FnnModel {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vector>,
}

impl FnnModel {
    pub fn new(weights: Vec<Matrix>, biases: Vec<Vector>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::dims(
                "FnnModel",
                format!("{} weights and {} biases", weights.len(), biases.len()),
            ));
        }
        let d = weights[0].nrows();
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.nrows() != d || w.ncols() != d || b.len() != d {
                return Err(Error::dims(
                    "FnnModel",
                    format!("layer {} has W {}x{} and b {}, width is {d}", l + 1, w.nrows(), w.ncols(), b.len()),
                ));
            }
            check_finite(w, &format!("W_{}", l + 1))?;
            check_finite(&Matrix::from_column_slice(d, 1, b.as_slice()), &format!("b_{}", l + 1))?;
        }
        Ok(FnnModel { weights, biases })
    }

    pub fn dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn forward(&self, x: &Vector) -> Result<Vector> {
        if x.len() != self.dim() {
            return Err(Error::dims("fnn forward", format!("input has {} entries, width is {}", x.len(), self.dim())));
        }
        let mut z = x.clone();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            z = (w * z + b).map(|v| v.max(0.0));
        }
        Ok(z)
    }

    /// Forward on a batch stored one sample per column.
    pub fn forward_batch(&self, xs: &Matrix) -> Matrix {
        let mut z = xs.clone();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            z = relu(&add_bias(&(w * z), b));
        }
        z
    }

    /// Pre-activations of every layer for a batch.
    pub fn preactivations(&self, xs: &Matrix) -> Vec<Matrix> {
        let mut z = xs.clone();
        let mut out = Vec::with_capacity(self.depth());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            let a = add_bias(&(w * &z), b);
            z = relu(&a);
            out.push(a);
        }
        out
    }
}

/// Xavier-uniform weights and biases uniform on `±1/sqrt(dim)`.
pub fn random_fnn<R: Rng + ?Sized>(dim: usize, depth: usize, rng: &mut R) -> FnnModel {
    let bound = 1.0 / (dim as f64).sqrt();
    let mut weights = Vec::with_capacity(depth);
    let mut biases = Vec::with_capacity(depth);
    for _ in 0..depth {
        weights.push(random_matrix(dim, dim, InitScheme::XavierUniform, rng));
        biases.push(uniform_vector(dim, bound, rng));
    }
    FnnModel { weights, biases }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    /// Zero-based, consecutive, covering `0..depth`.
    blocks: Vec<Range<usize>>,
}

impl Partition {
    pub fn new(blocks: Vec<Range<usize>>, depth: usize) -> Result<Self> {
        let mut next = 0;
        for b in &blocks {
            if b.start != next || b.end <= b.start {
                return Err(Error::InvalidArgument(format!("blocks {blocks:?} are not consecutive and nonempty")));
            }
            next = b.end;
        }
        if next != depth || blocks.is_empty() {
            return Err(Error::InvalidArgument(format!("blocks {blocks:?} do not cover {depth} layers")));
        }
        Ok(Partition { blocks })
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.end)
    }

    /// One-based layer indices per block, for display.
    pub fn one_based(&self) -> Vec<Vec<usize>> {
        self.blocks.iter().map(|b| (b.start + 1..=b.end).collect()).collect()
    }
}

/// `target_depth - 1` blocks of `⌊depth/target_depth⌋` layers, the last one takes the rest.
pub fn uniform_partition(depth: usize, target_depth: usize) -> Result<Partition> {
    if target_depth == 0 || depth < target_depth {
        return Err(Error::InvalidArgument(format!(
            "cannot split {depth} frozen layers over {target_depth} target layers"
        )));
    }
    let m = depth / target_depth;
    let mut blocks: Vec<Range<usize>> = (0..target_depth - 1).map(|i| i * m..(i + 1) * m).collect();
    blocks.push((target_depth - 1) * m..depth);
    Partition::new(blocks, depth)
}

#[derive(Debug, Clone)]
pub struct BlockPlan {
    pub deltas: Vec<Matrix>,
    pub biases: Vec<Vector>,
    /// Constant bias given to each non-final layer of the block.
    pub offsets: Vec<f64>,
    pub input_bound: f64,
    pub predicted_error: f64,
    pub achieved_error: f64,
}

/// Adapts one block of frozen layers to a single target layer for inputs with
/// `‖x‖ ≤ input_bound`.
pub fn synthesize_block(
    frozen_layers: &LinearChain,
    target_weight: &Matrix,
    target_bias: &Vector,
    budget: &RankBudget,
    input_bound: f64,
) -> Result<BlockPlan> {
    let d = frozen_layers.dim();
    if target_bias.len() != d {
        return Err(Error::dims("synthesize_block", format!("bias has {} entries, width is {d}", target_bias.len())));
    }
    let lin = linear::synthesize(frozen_layers, target_weight, budget)?;
    let depth = frozen_layers.depth();
    let adapted: Vec<Matrix> = frozen_layers.weights().iter().zip(&lin.deltas).map(|(w, dw)| w + dw).collect();

    let mut offsets = Vec::with_capacity(depth - 1);
    let mut biases = Vec::with_capacity(depth);
    let mut bound = input_bound;
    for a in &adapted[..depth - 1] {
        let rows: Vec<f64> = a.row_iter().map(|r| r.norm()).collect();
        let worst = rows.iter().fold(0.0f64, |m, &r| m.max(r)) * bound;
        let c = if worst > 0.0 { 1.1 * worst } else { 1.0 };
        bound = rows.iter().map(|&r| (r * bound + c).powi(2)).sum::<f64>().sqrt();
        offsets.push(c);
        biases.push(Vector::from_element(d, c));
    }
    // With every earlier ReLU on, the offsets reach the last layer as one shift.
    let mut shift = Vector::zeros(d);
    for (a, b) in adapted[..depth - 1].iter().zip(&biases) {
        shift = a * shift + b;
    }
    biases.push(target_bias - &adapted[depth - 1] * shift);

    Ok(BlockPlan {
        deltas: lin.deltas,
        biases,
        offsets,
        input_bound,
        predicted_error: lin.predicted_spectral_error,
        achieved_error: lin.achieved_spectral_error,
    })
}

#[derive(Debug, Clone)]
pub struct FnnAdapterPlan {
    pub deltas: Vec<Matrix>,
    pub new_biases: Vec<Vector>,
    pub input_radius: f64,
    /// Offset per frozen layer; `None` for the last layer of each block.
    pub activation_offsets: Vec<Option<f64>>,
    pub block_input_bounds: Vec<f64>,
    pub per_block_predicted_error: Vec<f64>,
    pub per_block_achieved_error: Vec<f64>,
}

impl FnnAdapterPlan {
    pub fn apply(&self, frozen: &FnnModel) -> FnnModel {
        FnnModel {
            weights: frozen.weights.iter().zip(&self.deltas).map(|(w, d)| w + d).collect(),
            biases: self.new_biases.clone(),
        }
    }

    /// Smallest pre-activation over all non-final block layers, across a batch.
    pub fn min_inner_preactivation(&self, frozen: &FnnModel, xs: &Matrix) -> f64 {
        let adapted = self.apply(frozen);
        adapted
            .preactivations(xs)
            .iter()
            .zip(&self.activation_offsets)
            .filter(|(_, c)| c.is_some())
            .map(|(a, _)| a.min())
            .fold(f64::INFINITY, f64::min)
    }
}

fn check_pair(frozen: &FnnModel, target: &FnnModel, partition: &Partition) -> Result<()> {
    if frozen.dim() != target.dim() {
        return Err(Error::dims("fnn pair", format!("widths {} and {}", frozen.dim(), target.dim())));
    }
    if partition.depth() != frozen.depth() || partition.len() != target.depth() {
        return Err(Error::dims(
            "fnn partition",
            format!(
                "partition covers {} layers in {} blocks; frozen depth {}, target depth {}",
                partition.depth(),
                partition.len(),
                frozen.depth(),
                target.depth()
            ),
        ));
    }
    Ok(())
}

fn block_chain(frozen: &FnnModel, block: &Range<usize>) -> LinearChain {
    LinearChain::new(frozen.weights[block.clone()].to_vec()).expect("model shapes already checked")
}

fn tag_block(err: Error, block: usize) -> Error {
    match err {
        Error::NonSingularityViolation { name, condition, ceiling } => Error::NonSingularityViolation {
            name: format!("block {block}: {name}"),
            condition,
            ceiling,
        },
        other => other,
    }
}

pub fn synthesize(
    frozen: &FnnModel,
    target: &FnnModel,
    partition: &Partition,
    budget: &RankBudget,
    radius: f64,
) -> Result<FnnAdapterPlan> {
    check_pair(frozen, target, partition)?;
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("input radius must be positive, got {radius}")));
    }
    let ranks = budget.per_layer(frozen.depth())?;

    let mut plan = FnnAdapterPlan {
        deltas: Vec::new(),
        new_biases: Vec::new(),
        input_radius: radius,
        activation_offsets: Vec::new(),
        block_input_bounds: Vec::new(),
        per_block_predicted_error: Vec::new(),
        per_block_achieved_error: Vec::new(),
    };
    // Norm bound on the target's block outputs, and on how far ours may stray.
    let mut target_bound = radius;
    let mut deviation = 0.0;
    for (i, block) in partition.blocks().iter().enumerate() {
        let chain = block_chain(frozen, block);
        let input_bound = target_bound + deviation;
        let bp = synthesize_block(
            &chain,
            &target.weights[i],
            &target.biases[i],
            &RankBudget::PerLayer(ranks[block.clone()].to_vec()),
            input_bound,
        )
        .map_err(|e| tag_block(e, i + 1))?;

        let linearized = chain.adapted_product(&bp.deltas);
        deviation = spectral_norm(&linearized) * deviation + bp.achieved_error * target_bound;
        target_bound = frobenius_norm(&target.weights[i]) * target_bound + target.biases[i].norm();

        plan.block_input_bounds.push(input_bound);
        plan.per_block_predicted_error.push(bp.predicted_error);
        plan.per_block_achieved_error.push(bp.achieved_error);
        plan.activation_offsets.extend(bp.offsets.iter().map(|&c| Some(c)));
        plan.activation_offsets.push(None);
        plan.deltas.extend(bp.deltas);
        plan.new_biases.extend(bp.biases);
    }
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequiredRank {
    pub per_block: Vec<usize>,
    pub max: usize,
}

/// Per block, `⌈rank(W̄_i - ∏ W_l) / |block|⌉`.
pub fn required_rank(frozen: &FnnModel, target: &FnnModel, partition: &Partition) -> Result<RequiredRank> {
    check_pair(frozen, target, partition)?;
    let mut per_block = Vec::with_capacity(partition.len());
    for (i, block) in partition.blocks().iter().enumerate() {
        let gap = linear::error_matrix(&block_chain(frozen, block), &target.weights[i])?;
        let r = svd_named(&gap, "block gap")?.numerical_rank(RANK_TOL);
        per_block.push(r.div_ceil(block.len()));
    }
    let max = per_block.iter().copied().max().unwrap_or(0);
    Ok(RequiredRank { per_block, max })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBoundReport {
    pub beta: f64,
    pub per_block_error: Vec<f64>,
    /// Bound on the mean output distance.
    pub bound: f64,
    /// Bound on the mean squared output distance; only for one-layer targets.
    pub squared_bound: Option<f64>,
}

impl ErrorBoundReport {
    /// Recomputes `bound` from `beta`, the block errors and the target's weight norms.
    pub fn assemble(beta: f64, per_block_error: &[f64], target_frobenius: &[f64]) -> f64 {
        let n = per_block_error.len();
        let growth = target_frobenius
            .iter()
            .zip(per_block_error)
            .map(|(w, e)| w + e)
            .fold(0.0f64, f64::max);
        beta * per_block_error
            .iter()
            .enumerate()
            .map(|(i, e)| growth.powi((n - 1 - i) as i32) * e)
            .sum::<f64>()
    }
}

/// Error bound for the constructed adapter, given the input second moment `sigma`.
pub fn error_bound(
    frozen: &FnnModel,
    target: &FnnModel,
    partition: &Partition,
    budget: &RankBudget,
    sigma: &Matrix,
) -> Result<ErrorBoundReport> {
    check_pair(frozen, target, partition)?;
    let d = frozen.dim();
    if sigma.nrows() != d || sigma.ncols() != d {
        return Err(Error::dims("error_bound", format!("sigma is {}x{}, width is {d}", sigma.nrows(), sigma.ncols())));
    }
    let ranks = budget.per_layer(frozen.depth())?;
    let mut per_block_error = Vec::with_capacity(partition.len());
    for (i, block) in partition.blocks().iter().enumerate() {
        let gap = linear::error_matrix(&block_chain(frozen, block), &target.weights[i])?;
        let covered: usize = ranks[block.clone()].iter().sum();
        per_block_error.push(svd_named(&gap, "block gap")?.sigma(covered + 1));
    }

    let sigma_f = frobenius_norm(sigma);
    let root = sigma_f.sqrt();
    let wn: Vec<f64> = target.weights.iter().map(frobenius_norm).collect();
    let bn: Vec<f64> = target.biases.iter().map(|b| b.norm()).collect();
    let mut beta = root;
    for i in 0..target.depth() {
        let lead = root * wn[..=i].iter().product::<f64>();
        // Bias terms carry the product of the weight norms strictly between j and i.
        let tail: f64 = (0..=i)
            .map(|j| {
                let between: f64 = if j + 1 < i { wn[j + 1..i].iter().product() } else { 1.0 };
                between * bn[j]
            })
            .sum();
        beta = beta.max(lead + tail);
    }
    let bound = ErrorBoundReport::assemble(beta, &per_block_error, &wn);
    let squared_bound = (target.depth() == 1).then(|| sigma_f * per_block_error[0].powi(2));
    Ok(ErrorBoundReport {
        beta,
        per_block_error,
        bound,
        squared_bound,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Witness {
    pub x1: Vector,
    pub x2: Vector,
    /// Both points switch on every target unit, not just some.
    pub all_active: bool,
    pub samples_used: usize,
}

/// Looks for two inputs that the frozen first layer maps to zero but the
/// target's first layer maps to different outputs. Such a pair shows that
/// retraining only the layers after the first cannot reproduce the target.
pub fn final_layer_witness(
    frozen: &FnnModel,
    target: &FnnModel,
    search_budget: usize,
    seed: u64,
) -> Result<Option<Witness>> {
    let d = frozen.dim();
    if d < 2 || target.dim() != d {
        return Err(Error::InvalidArgument(format!("witness search needs matching widths >= 2, got {d}")));
    }
    if target.depth() != 1 {
        return Err(Error::InvalidArgument(format!("witness search needs a one-layer target, got {}", target.depth())));
    }
    let (w, b) = (&frozen.weights[0], &frozen.biases[0]);
    let (wt, bt) = (&target.weights[0], &target.biases[0]);
    let factor = Factorized::new(w, "W_1").ok();
    let mut rng = seeded_rng(seed);

    let mut first: Option<(Vector, Vector, bool)> = None;
    for n in 1..=search_budget {
        let x = match &factor {
            // Pick the frozen pre-activation inside the negative orthant and pull it back.
            Some(f) => {
                let y = Vector::from_fn(d, |_, _| -rng.sample::<f64, _>(StandardNormal).abs());
                f.solve_vec(&(y - b))
            }
            None => Vector::from_fn(d, |_, _| rng.sample(StandardNormal)),
        };
        if (w * &x + b).iter().any(|&v| v > 0.0) {
            continue;
        }
        let pre = wt * &x + bt;
        if pre.iter().all(|&v| v <= 0.0) {
            continue;
        }
        let all_on = pre.iter().all(|&v| v > 0.0);
        let out = pre.map(|v| v.max(0.0));
        match &first {
            None => first = Some((x, out, all_on)),
            Some((x1, out1, on1)) => {
                if (&out - out1).norm() > 1e-9 * (1.0 + out1.norm()) {
                    return Ok(Some(Witness {
                        x1: x1.clone(),
                        x2: x,
                        all_active: *on1 && all_on,
                        samples_used: n,
                    }));
                }
            }
        }
    }
    Ok(None)
}

/// Per-coordinate MSE between two models on a batch.
pub fn output_mse(a: &FnnModel, b: &FnnModel, xs: &Matrix) -> f64 {
    crate::matrix::per_coordinate_mse(&a.forward_batch(xs), &b.forward_batch(xs))
}

/// Largest absolute output difference on a batch.
pub fn max_deviation(a: &FnnModel, b: &FnnModel, xs: &Matrix) -> f64 {
    (a.forward_batch(xs) - b.forward_batch(xs)).amax()
}

/// Mean of ‖f(x) − g(x)‖ and of its square over a batch.
pub fn mean_distance(a: &FnnModel, b: &FnnModel, xs: &Matrix) -> (f64, f64) {
    let diff = a.forward_batch(xs) - b.forward_batch(xs);
    let n = xs.ncols() as f64;
    let (s1, s2) = diff
        .column_iter()
        .map(|c| c.norm_squared())
        .fold((0.0, 0.0), |(a, b), sq| (a + sq.sqrt(), b + sq));
    (s1 / n, s2 / n)
}
