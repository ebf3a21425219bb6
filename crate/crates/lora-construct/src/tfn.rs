//! Attention networks without skip connections or normalization, and adapter
//! construction for them.
//!
//! Block `l` maps `Z` (D×N, one token per column) to
//! `W_2 ReLU(W_1 Σ_h W_O^h W_V^h Z softmax((W_K^h Z)ᵀ W_Q^h Z) + b_1) + b_2`;
//! the network output is `softmax(W_o Z_L)`. Softmax normalizes each column and
//! the scores carry no `1/sqrt(D)` factor. The single-head variant drops `W_O`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear::{self, AssumptionReport, CheckedMatrix, LinearChain, RankBudget};
use crate::matrix::{
    add_bias, check_finite, random_matrix, relu, softmax_columns, solve_named, solve_right_named,
    svd_named, uniform_vector, InitScheme, Matrix, Vector, RANK_TOL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadType {
    Single,
    Multi,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    /// Absent in the single-head variant.
    pub w_o: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TfnBlock {
    pub heads: Vec<AttentionHead>,
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
    pub b2: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TfnModel {
    pub head_type: HeadType,
    pub blocks: Vec<TfnBlock>,
    pub w_out: Matrix,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct TfnTrace {
    /// ReLU output inside each block.
    pub hidden: Vec<Matrix>,
    /// Output of each block.
    pub blocks: Vec<Matrix>,
    pub output: Matrix,
}

impl AttentionHead {
    fn matrices(&self) -> Vec<(&'static str, &Matrix)> {
        let mut v = vec![("W_Q", &self.w_q), ("W_K", &self.w_k), ("W_V", &self.w_v)];
        if let Some(o) = &self.w_o {
            v.push(("W_O", o));
        }
        v
    }
}

impl TfnModel {
    pub fn new(head_type: HeadType, blocks: Vec<TfnBlock>, w_out: Matrix) -> Result<Self> {
        let m = TfnModel {
            head_type,
            blocks,
            w_out,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::InvalidArgument("a transformer needs at least one block".into()));
        }
        let d = self.w_out.nrows();
        let heads = self.blocks[0].heads.len();
        if heads == 0 || (self.head_type == HeadType::Single && heads != 1) {
            return Err(Error::InvalidArgument(format!("{heads} heads for head type {:?}", self.head_type)));
        }
        let square = |m: &Matrix, name: String| -> Result<()> {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::dims("TfnModel", format!("{name} is {}x{}, width is {d}", m.nrows(), m.ncols())));
            }
            check_finite(m, &name)
        };
        square(&self.w_out, "W_o".into())?;
        for (l, b) in self.blocks.iter().enumerate() {
            if b.heads.len() != heads {
                return Err(Error::dims("TfnModel", format!("block {} has {} heads, expected {heads}", l + 1, b.heads.len())));
            }
            for (h, head) in b.heads.iter().enumerate() {
                if head.w_o.is_some() != (self.head_type == HeadType::Multi) {
                    return Err(Error::InvalidArgument(format!(
                        "block {} head {}: output projection must be present exactly for multi-head models",
                        l + 1,
                        h + 1
                    )));
                }
                for (name, m) in head.matrices() {
                    square(m, format!("{name}_{}_{}", l + 1, h + 1))?;
                }
            }
            square(&b.w1, format!("W_1_{}", l + 1))?;
            square(&b.w2, format!("W_2_{}", l + 1))?;
            if b.b1.len() != d || b.b2.len() != d {
                return Err(Error::dims("TfnModel", format!("block {} biases must have {d} entries", l + 1)));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.w_out.nrows()
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn heads(&self) -> usize {
        self.blocks[0].heads.len()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.trace(x)?.output)
    }

    pub fn trace(&self, x: &Matrix) -> Result<TfnTrace> {
        if x.nrows() != self.dim() || x.ncols() == 0 {
            return Err(Error::dims(
                "tfn forward",
                format!("input is {}x{}, width is {}", x.nrows(), x.ncols(), self.dim()),
            ));
        }
        let mut z = x.clone();
        let mut hidden = Vec::with_capacity(self.depth());
        let mut outs = Vec::with_capacity(self.depth());
        for b in &self.blocks {
            let h = relu(&add_bias(&(&b.w1 * attention(b, &z)), &b.b1));
            z = add_bias(&(&b.w2 * &h), &b.b2);
            hidden.push(h);
            outs.push(z.clone());
        }
        Ok(TfnTrace {
            hidden,
            blocks: outs,
            output: softmax_columns(&(&self.w_out * &z)),
        })
    }
}

/// Sum over heads of `[W_O] W_V Z softmax((W_K Z)ᵀ W_Q Z)`.
pub fn attention(block: &TfnBlock, z: &Matrix) -> Matrix {
    let mut acc = Matrix::zeros(z.nrows(), z.ncols());
    for head in &block.heads {
        let scores = (&head.w_k * z).transpose() * (&head.w_q * z);
        let mixed = &head.w_v * z * softmax_columns(&scores);
        match &head.w_o {
            Some(o) => acc += o * mixed,
            None => acc += mixed,
        }
    }
    acc
}

/// Gaussian attention weights; Xavier-uniform feedforward and output weights;
/// biases uniform on `±1/sqrt(dim)`.
pub fn random_tfn<R: Rng + ?Sized>(dim: usize, depth: usize, heads: usize, head_type: HeadType, rng: &mut R) -> TfnModel {
    let heads = if head_type == HeadType::Single { 1 } else { heads };
    let bound = 1.0 / (dim as f64).sqrt();
    let gauss = |rng: &mut R| random_matrix(dim, dim, InitScheme::StandardGaussian, rng);
    let mut blocks = Vec::with_capacity(depth);
    for _ in 0..depth {
        let hs = (0..heads)
            .map(|_| AttentionHead {
                w_q: gauss(rng),
                w_k: gauss(rng),
                w_v: gauss(rng),
                w_o: (head_type == HeadType::Multi).then(|| gauss(rng)),
            })
            .collect();
        blocks.push(TfnBlock {
            heads: hs,
            w1: random_matrix(dim, dim, InitScheme::XavierUniform, rng),
            b1: uniform_vector(dim, bound, rng),
            w2: random_matrix(dim, dim, InitScheme::XavierUniform, rng),
            b2: uniform_vector(dim, bound, rng),
        });
    }
    let w_out = random_matrix(dim, dim, InitScheme::XavierUniform, rng);
    TfnModel {
        head_type,
        blocks,
        w_out,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapReport {
    /// `gaps[i]` for block `i+1`; the last entry is the output layer.
    pub gaps: Vec<usize>,
    pub required_rank: usize,
}

fn check_pair(frozen: &TfnModel, target: &TfnModel) -> Result<()> {
    if frozen.dim() != target.dim()
        || frozen.depth() != target.depth()
        || frozen.heads() != target.heads()
        || frozen.head_type != target.head_type
    {
        return Err(Error::dims(
            "tfn pair",
            format!(
                "frozen (D={}, L={}, H={}, {:?}) vs target (D={}, L={}, H={}, {:?})",
                frozen.dim(),
                frozen.depth(),
                frozen.heads(),
                frozen.head_type,
                target.dim(),
                target.depth(),
                target.heads(),
                target.head_type
            ),
        ));
    }
    Ok(())
}

fn gap_rank(m: &Matrix) -> Result<usize> {
    Ok(svd_named(m, "gap")?.numerical_rank(RANK_TOL))
}

/// Value-side product of a head: `W_1 W_O W_V`, or `W_1 W_V` without `W_O`.
fn value_product(block: &TfnBlock, head: &AttentionHead) -> Matrix {
    match &head.w_o {
        Some(o) => &block.w1 * o * &head.w_v,
        None => &block.w1 * &head.w_v,
    }
}

/// Rank of the mismatch each block and the output layer must absorb.
pub fn compute_gaps(frozen: &TfnModel, target: &TfnModel) -> Result<GapReport> {
    check_pair(frozen, target)?;
    let mut gaps = Vec::with_capacity(frozen.depth() + 1);
    for l in 0..frozen.depth() {
        let (fb, tb) = (&frozen.blocks[l], &target.blocks[l]);
        let prev = if l == 0 {
            None
        } else {
            let (f2, t2) = (&frozen.blocks[l - 1].w2, &target.blocks[l - 1].w2);
            crate::matrix::Factorized::new(f2, &format!("frozen W_2_{l}"))?;
            crate::matrix::Factorized::new(t2, &format!("target W_2_{l}"))?;
            Some((f2, t2))
        };
        let mut g = 0;
        for (fh, th) in fb.heads.iter().zip(&tb.heads) {
            let (fkq, tkq) = (fh.w_k.transpose() * &fh.w_q, th.w_k.transpose() * &th.w_q);
            let (fov, tov) = (value_product(fb, fh), value_product(tb, th));
            let (kq, ov) = match prev {
                None => (tkq - fkq, tov - fov),
                Some((f2, t2)) => (
                    t2.transpose() * tkq * t2 - f2.transpose() * fkq * f2,
                    tov * t2 - fov * f2,
                ),
            };
            g = g.max(gap_rank(&kq)?).max(gap_rank(&ov)?);
        }
        gaps.push(g);
    }
    let last = frozen.depth() - 1;
    let out = &target.w_out * &target.blocks[last].w2 - &frozen.w_out * &frozen.blocks[last].w2;
    gaps.push(gap_rank(&out)?);
    let required_rank = gaps.iter().max().copied().unwrap_or(0).div_ceil(2);
    Ok(GapReport { gaps, required_rank })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadDelta {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Option<Matrix>,
}

#[derive(Debug, Clone)]
pub struct TfnAdapterPlan {
    /// Indexed `[block][head]`.
    pub head_deltas: Vec<Vec<HeadDelta>>,
    /// Nonzero only in the single-head variant.
    pub ff1_deltas: Vec<Matrix>,
    /// Nonzero only for the last block.
    pub ff2_deltas: Vec<Matrix>,
    pub out_delta: Matrix,
    pub b1: Vec<Vector>,
    pub b2: Vec<Vector>,
    pub rank: usize,
}

impl TfnAdapterPlan {
    pub fn apply(&self, frozen: &TfnModel) -> TfnModel {
        let blocks = frozen
            .blocks
            .iter()
            .enumerate()
            .map(|(l, b)| TfnBlock {
                heads: b
                    .heads
                    .iter()
                    .zip(&self.head_deltas[l])
                    .map(|(h, d)| AttentionHead {
                        w_q: &h.w_q + &d.w_q,
                        w_k: &h.w_k + &d.w_k,
                        w_v: &h.w_v + &d.w_v,
                        w_o: match (&h.w_o, &d.w_o) {
                            (Some(o), Some(dd)) => Some(o + dd),
                            (o, _) => o.clone(),
                        },
                    })
                    .collect(),
                w1: &b.w1 + &self.ff1_deltas[l],
                b1: self.b1[l].clone(),
                w2: &b.w2 + &self.ff2_deltas[l],
                b2: self.b2[l].clone(),
            })
            .collect();
        TfnModel {
            head_type: frozen.head_type,
            blocks,
            w_out: &frozen.w_out + &self.out_delta,
        }
    }

    /// Every delta that is allowed to be nonzero, with a label.
    pub fn adapted_deltas(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (l, heads) in self.head_deltas.iter().enumerate() {
            for (h, d) in heads.iter().enumerate() {
                out.push((format!("W_Q_{}_{}", l + 1, h + 1), &d.w_q));
                out.push((format!("W_K_{}_{}", l + 1, h + 1), &d.w_k));
                out.push((format!("W_V_{}_{}", l + 1, h + 1), &d.w_v));
                if let Some(o) = &d.w_o {
                    out.push((format!("W_O_{}_{}", l + 1, h + 1), o));
                }
            }
        }
        for (l, d) in self.ff1_deltas.iter().enumerate() {
            out.push((format!("W_1_{}", l + 1), d));
        }
        out.push((format!("W_2_{}", self.ff2_deltas.len()), self.ff2_deltas.last().unwrap()));
        out.push(("W_o".into(), &self.out_delta));
        out
    }
}

/// The two-factor problems the construction solves, in order.
struct PairProblem {
    label: String,
    chain: LinearChain,
    target: Matrix,
}

/// Conjugation `W̄_2 W_2⁻¹` that carries target block outputs to adapted ones.
fn carry(frozen_w2: &Matrix, target_w2: &Matrix, l: usize) -> Result<Matrix> {
    solve_right_named(target_w2, frozen_w2, &format!("frozen W_2_{l}"))
}

fn pair_problems(frozen: &TfnModel, target: &TfnModel) -> Result<Vec<Vec<(PairProblem, PairProblem)>>> {
    let mut out = Vec::with_capacity(frozen.depth());
    for l in 0..frozen.depth() {
        let (fb, tb) = (&frozen.blocks[l], &target.blocks[l]);
        let c = if l == 0 {
            None
        } else {
            Some(carry(&frozen.blocks[l - 1].w2, &target.blocks[l - 1].w2, l)?)
        };
        let mut heads = Vec::with_capacity(fb.heads.len());
        for (h, (fh, th)) in fb.heads.iter().zip(&tb.heads).enumerate() {
            let tag = format!("block {} head {}", l + 1, h + 1);
            let mut kq = th.w_k.transpose() * &th.w_q;
            if let Some(c) = &c {
                kq = c.transpose() * kq * c;
            }
            let kq_pair = PairProblem {
                label: format!("{tag} key/query"),
                chain: LinearChain::new(vec![fh.w_q.clone(), fh.w_k.transpose()])?,
                target: kq,
            };
            let value_pair = match (&fh.w_o, &th.w_o) {
                (Some(fo), Some(to)) => {
                    let mut t = solve_named(&fb.w1, &(&tb.w1 * to * &th.w_v), &format!("frozen W_1_{}", l + 1))?;
                    if let Some(c) = &c {
                        t *= c;
                    }
                    PairProblem {
                        label: format!("{tag} value/output"),
                        chain: LinearChain::new(vec![fh.w_v.clone(), fo.clone()])?,
                        target: t,
                    }
                }
                _ => {
                    let mut t = &tb.w1 * &th.w_v;
                    if let Some(c) = &c {
                        t *= c;
                    }
                    PairProblem {
                        label: format!("{tag} value/feedforward"),
                        chain: LinearChain::new(vec![fh.w_v.clone(), fb.w1.clone()])?,
                        target: t,
                    }
                }
            };
            heads.push((kq_pair, value_pair));
        }
        out.push(heads);
    }
    Ok(out)
}

fn output_problem(frozen: &TfnModel, target: &TfnModel) -> Result<PairProblem> {
    let last = frozen.depth() - 1;
    Ok(PairProblem {
        label: "output".into(),
        chain: LinearChain::new(vec![frozen.blocks[last].w2.clone(), frozen.w_out.clone()])?,
        target: &target.w_out * &target.blocks[last].w2,
    })
}

fn prefixed(err: Error, label: &str) -> Error {
    match err {
        Error::NonSingularityViolation { name, condition, ceiling } => Error::NonSingularityViolation {
            name: format!("{label}: {name}"),
            condition,
            ceiling,
        },
        other => other,
    }
}

fn solve_pair(p: &PairProblem, rank: usize) -> Result<(Matrix, Matrix)> {
    let plan = linear::synthesize(&p.chain, &p.target, &RankBudget::Uniform(rank)).map_err(|e| prefixed(e, &p.label))?;
    let mut it = plan.deltas.into_iter();
    Ok((it.next().unwrap(), it.next().unwrap()))
}

/// Conditions every weight of both models and every matrix the pair
/// constructions invert, for truncation ranks `1..=rank`.
pub fn check_assumptions(frozen: &TfnModel, target: &TfnModel, rank: usize) -> Result<AssumptionReport> {
    check_pair(frozen, target)?;
    let mut checks: Vec<CheckedMatrix> = Vec::new();
    for (who, m) in [("frozen", frozen), ("target", target)] {
        for (l, b) in m.blocks.iter().enumerate() {
            for (h, head) in b.heads.iter().enumerate() {
                for (name, w) in head.matrices() {
                    checks.push(linear::check_named(w, format!("{who} {name}_{}_{}", l + 1, h + 1))?);
                }
            }
            checks.push(linear::check_named(&b.w1, format!("{who} W_1_{}", l + 1))?);
            checks.push(linear::check_named(&b.w2, format!("{who} W_2_{}", l + 1))?);
        }
        checks.push(linear::check_named(&m.w_out, format!("{who} W_o"))?);
    }
    let base = AssumptionReport::from_checks(checks);
    if !base.satisfied {
        return Ok(base);
    }
    let mut reports = vec![base];
    let problems = pair_problems(frozen, target)?;
    for p in problems
        .iter()
        .flatten()
        .flat_map(|(a, b)| [a, b])
        .chain(std::iter::once(&output_problem(frozen, target)?))
    {
        let mut r = linear::check_assumptions(&p.chain, &p.target, &RankBudget::Uniform(rank))?;
        // The factor checks repeat the weight checks above; keep the perturbed products.
        r.checked_matrices.retain(|c| c.name.starts_with("prod"));
        for c in &mut r.checked_matrices {
            c.name = format!("{}: {}", p.label, c.name);
        }
        reports.push(r);
    }
    Ok(AssumptionReport::merge(reports))
}

pub fn synthesize(frozen: &TfnModel, target: &TfnModel, rank: usize) -> Result<TfnAdapterPlan> {
    check_pair(frozen, target)?;
    let d = frozen.dim();
    if rank > d {
        return Err(Error::InvalidArgument(format!("rank {rank} exceeds dimension {d}")));
    }
    let depth = frozen.depth();
    let zero = Matrix::zeros(d, d);
    let problems = pair_problems(frozen, target)?;

    let mut head_deltas = Vec::with_capacity(depth);
    let mut ff1_deltas = Vec::with_capacity(depth);
    for heads in &problems {
        let mut hd = Vec::with_capacity(heads.len());
        let mut ff1 = zero.clone();
        for (kq, value) in heads {
            let (dq, dkt) = solve_pair(kq, rank)?;
            let (dv, dsecond) = solve_pair(value, rank)?;
            let w_o = match frozen.head_type {
                HeadType::Multi => Some(dsecond),
                HeadType::Single => {
                    ff1 = dsecond;
                    None
                }
            };
            hd.push(HeadDelta {
                w_q: dq,
                w_k: dkt.transpose(),
                w_v: dv,
                w_o,
            });
        }
        head_deltas.push(hd);
        ff1_deltas.push(ff1);
    }

    let mut b1 = Vec::with_capacity(depth);
    let mut b2 = Vec::with_capacity(depth);
    for l in 0..depth {
        b1.push(target.blocks[l].b1.clone());
        if l + 1 < depth {
            let (fb, tb) = (&frozen.blocks[l], &target.blocks[l]);
            let pulled = solve_named(
                &tb.w2,
                &Matrix::from_column_slice(d, 1, tb.b2.as_slice()),
                &format!("target W_2_{}", l + 1),
            )?;
            b2.push((&fb.w2 * pulled).column(0).into_owned());
        }
    }

    let (d2, dout) = solve_pair(&output_problem(frozen, target)?, rank)?;
    let last = &target.blocks[depth - 1];
    let w_out_adapted = &frozen.w_out + &dout;
    let shifted = solve_named(
        &w_out_adapted,
        &(&target.w_out * Matrix::from_column_slice(d, 1, last.b2.as_slice())),
        "W_o + dW_o",
    )?;
    b2.push(shifted.column(0).into_owned());

    let mut ff2_deltas = vec![zero.clone(); depth];
    ff2_deltas[depth - 1] = d2;
    Ok(TfnAdapterPlan {
        head_deltas,
        ff1_deltas,
        ff2_deltas,
        out_delta: dout,
        b1,
        b2,
        rank,
    })
}

/// Per block, the largest entry of `|Ĥ_l - H̄_l|` on input `x`.
pub fn intermediate_deviation(frozen: &TfnModel, plan: &TfnAdapterPlan, target: &TfnModel, x: &Matrix) -> Result<Vec<f64>> {
    let ours = plan.apply(frozen).trace(x)?;
    let theirs = target.trace(x)?;
    Ok(ours.hidden.iter().zip(&theirs.hidden).map(|(a, b)| (a - b).amax()).collect())
}
