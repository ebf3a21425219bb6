//! Optimal low-rank adapters for a product of square matrices.
//!
//! Given frozen factors `W_1..W_L` and a target `T`, every factor gets an
//! update of rank at most its budget so that the adapted product is as close
//! as possible to `T` in spectral norm. The residual equals the first
//! singular value of `T - W_L...W_1` that the combined budget cannot cover.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{
    chain_product, check_finite, condition_number, gaussian_matrix, seeded_rng, solve_named,
    solve_right_named, spectral_norm, svd_named, Matrix, CONDITION_CEILING, RANK_TOL,
};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearChain {
    weights: Vec<Matrix>,
}

impl LinearChain {
    /// `weights[0]` is applied first.
    pub fn new(weights: Vec<Matrix>) -> Result<Self> {
        let first = weights
            .first()
            .ok_or_else(|| Error::InvalidArgument("a chain needs at least one factor".into()))?;
        let d = first.nrows();
        for (i, w) in weights.iter().enumerate() {
            if w.nrows() != d || w.ncols() != d {
                return Err(Error::dims(
                    "LinearChain",
                    format!("factor {} is {}x{}, expected {d}x{d}", i + 1, w.nrows(), w.ncols()),
                ));
            }
            check_finite(w, &format!("W_{}", i + 1))?;
        }
        Ok(LinearChain { weights })
    }

    pub fn dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn into_weights(self) -> Vec<Matrix> {
        self.weights
    }

    pub fn product(&self) -> Matrix {
        chain_product(&self.weights, self.dim()).expect("shapes checked on construction")
    }

    /// Product of `W_l + ΔW_l`.
    pub fn adapted_product(&self, deltas: &[Matrix]) -> Matrix {
        let mut out = Matrix::identity(self.dim(), self.dim());
        for (w, d) in self.weights.iter().zip(deltas) {
            out = (w + d) * out;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankBudget {
    Uniform(usize),
    PerLayer(Vec<usize>),
}

impl RankBudget {
    pub fn per_layer(&self, depth: usize) -> Result<Vec<usize>> {
        match self {
            RankBudget::Uniform(r) => Ok(vec![*r; depth]),
            RankBudget::PerLayer(rs) if rs.len() == depth => Ok(rs.clone()),
            RankBudget::PerLayer(rs) => Err(Error::dims(
                "RankBudget",
                format!("{} per-layer ranks for a depth-{depth} chain", rs.len()),
            )),
        }
    }

    fn validated(&self, depth: usize, dim: usize) -> Result<Vec<usize>> {
        let rs = self.per_layer(depth)?;
        if let Some(bad) = rs.iter().find(|&&r| r > dim) {
            return Err(Error::InvalidArgument(format!("rank {bad} exceeds dimension {dim}")));
        }
        Ok(rs)
    }
}

#[derive(Debug, Clone)]
pub struct LinearAdapterPlan {
    pub deltas: Vec<Matrix>,
    pub achieved_spectral_error: f64,
    pub predicted_spectral_error: f64,
    /// Number of singular directions of the error matrix actually covered.
    pub effective_rank_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckedMatrix {
    pub name: String,
    pub condition: f64,
}

impl CheckedMatrix {
    pub fn ok(&self) -> bool {
        self.condition <= CONDITION_CEILING
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub checked_matrices: Vec<CheckedMatrix>,
    /// `ceiling / condition`, minimized over the checked matrices; below 1 means a failure.
    pub min_condition_margin: f64,
    pub satisfied: bool,
}

impl AssumptionReport {
    pub fn from_checks(checked_matrices: Vec<CheckedMatrix>) -> Self {
        let min_condition_margin = checked_matrices
            .iter()
            .map(|c| CONDITION_CEILING / c.condition)
            .fold(f64::INFINITY, f64::min);
        let satisfied = checked_matrices.iter().all(CheckedMatrix::ok);
        AssumptionReport {
            checked_matrices,
            min_condition_margin,
            satisfied,
        }
    }

    pub fn merge(reports: impl IntoIterator<Item = AssumptionReport>) -> Self {
        Self::from_checks(reports.into_iter().flat_map(|r| r.checked_matrices).collect())
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckedMatrix> {
        self.checked_matrices.iter().filter(|c| !c.ok())
    }

    pub fn first_violation(&self) -> Option<Error> {
        self.failures().next().map(|c| Error::NonSingularityViolation {
            name: c.name.clone(),
            condition: c.condition,
            ceiling: CONDITION_CEILING,
        })
    }
}

pub(crate) fn check_named(m: &Matrix, name: String) -> Result<CheckedMatrix> {
    let condition = condition_number(m)?;
    Ok(CheckedMatrix {
        name,
        condition: if condition.is_nan() { f64::INFINITY } else { condition },
    })
}

fn check_target(chain: &LinearChain, target: &Matrix) -> Result<()> {
    let d = chain.dim();
    if target.nrows() != d || target.ncols() != d {
        return Err(Error::dims(
            "target",
            format!("target is {}x{}, chain dimension is {d}", target.nrows(), target.ncols()),
        ));
    }
    check_finite(target, "target")
}

/// `target - W_L...W_1`.
pub fn error_matrix(chain: &LinearChain, target: &Matrix) -> Result<Matrix> {
    check_target(chain, target)?;
    Ok(target - chain.product())
}

/// σ_{ΣR_l + 1}(E): the smallest spectral error any adapter within budget can reach.
pub fn optimal_error(chain: &LinearChain, target: &Matrix, budget: &RankBudget) -> Result<f64> {
    let total: usize = budget.per_layer(chain.depth())?.iter().sum();
    let e = error_matrix(chain, target)?;
    Ok(svd_named(&e, "error matrix")?.sigma(total + 1))
}

/// Conditions every frozen factor and every `∏W + α_r(E)` for `r` up to the
/// combined budget of all factors but the last.
pub fn check_assumptions(chain: &LinearChain, target: &Matrix, budget: &RankBudget) -> Result<AssumptionReport> {
    let rs = budget.per_layer(chain.depth())?;
    let e = error_matrix(chain, target)?;
    let f = svd_named(&e, "error matrix")?;
    let prod = chain.product();
    let mut checks = Vec::new();
    for (i, w) in chain.weights().iter().enumerate() {
        checks.push(check_named(w, format!("W_{}", i + 1))?);
    }
    let upto: usize = rs[..rs.len() - 1].iter().sum::<usize>().min(chain.dim());
    for r in 1..=upto {
        checks.push(check_named(&(&prod + f.truncated(r)), format!("prod W + alpha_{r}(E)"))?);
    }
    Ok(AssumptionReport::from_checks(checks))
}

pub fn synthesize(chain: &LinearChain, target: &Matrix, budget: &RankBudget) -> Result<LinearAdapterPlan> {
    let report = check_assumptions(chain, target, budget)?;
    if let Some(err) = report.first_violation() {
        return Err(err);
    }
    construct(chain, target, budget)
}

/// Like [`synthesize`], but on an assumption failure perturbs every frozen
/// factor by `eps`-scaled Gaussian noise and retries once. Returns the chain the
/// plan applies to.
pub fn synthesize_with_jitter(
    chain: &LinearChain,
    target: &Matrix,
    budget: &RankBudget,
    eps: f64,
    seed: u64,
) -> Result<(LinearChain, LinearAdapterPlan)> {
    match synthesize(chain, target, budget) {
        Err(e) if e.is_assumption_violation() && eps > 0.0 => {
            let jittered = jitter_chain(chain, eps, &mut seeded_rng(seed))?;
            let plan = synthesize(&jittered, target, budget)?;
            Ok((jittered, plan))
        }
        other => other.map(|p| (chain.clone(), p)),
    }
}

pub fn jitter_chain<R: Rng + ?Sized>(chain: &LinearChain, eps: f64, rng: &mut R) -> Result<LinearChain> {
    let d = chain.dim();
    LinearChain::new(
        chain
            .weights()
            .iter()
            .map(|w| w + gaussian_matrix(d, d, rng) * eps)
            .collect(),
    )
}

fn construct(chain: &LinearChain, target: &Matrix, budget: &RankBudget) -> Result<LinearAdapterPlan> {
    let d = chain.dim();
    let depth = chain.depth();
    let rs = budget.validated(depth, d)?;
    let total: usize = rs.iter().sum();
    let e = error_matrix(chain, target)?;
    let f = svd_named(&e, "error matrix")?;
    let used = total.min(f.numerical_rank(RANK_TOL));

    let mut deltas: Vec<Matrix> = Vec::with_capacity(depth);
    let mut start = 0usize;
    for l in 0..depth {
        let end = (start + rs[l]).min(used);
        let begin = start.min(used);
        start += rs[l];
        if begin >= end {
            deltas.push(Matrix::zeros(d, d));
            continue;
        }
        // E' Q_l keeps singular directions begin..end of the error matrix.
        let mut piece = Matrix::zeros(d, d);
        for k in begin..end {
            piece += f.singular_values[k] * f.u.column(k) * f.v.column(k).transpose();
        }
        // Peel the frozen factors above layer l off the left, one solve each.
        for i in (l + 1..depth).rev() {
            piece = solve_named(&chain.weights()[i], &piece, &format!("W_{}", i + 1))?;
        }
        // And the already adapted factors below it off the right.
        for (i, done) in deltas.iter().enumerate() {
            let adapted = &chain.weights()[i] + done;
            piece = solve_right_named(&piece, &adapted, &format!("W_{0} + dW_{0}", i + 1))?;
        }
        deltas.push(piece);
    }

    let achieved = spectral_norm(&(chain.adapted_product(&deltas) - target));
    Ok(LinearAdapterPlan {
        deltas,
        achieved_spectral_error: achieved,
        predicted_spectral_error: f.sigma(total + 1),
        effective_rank_used: used,
    })
}

/// Pads a smaller target into the frozen product: leading block from
/// `target`, every other entry from `W_L...W_1`.
pub fn embed_wider_target(target: &Matrix, chain: &LinearChain) -> Result<Matrix> {
    let d = chain.dim();
    let small = target.nrows();
    if !target.is_square() || small > d || small == 0 {
        return Err(Error::dims(
            "embed_wider_target",
            format!("target is {}x{}, chain dimension is {d}", target.nrows(), target.ncols()),
        ));
    }
    let mut out = chain.product();
    out.view_mut((0, 0), (small, small)).copy_from(target);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{random_matrix_seeded, rank, sigma_k, InitScheme};

    fn gauss(d: usize, seed: u64) -> Matrix {
        random_matrix_seeded(d, InitScheme::StandardGaussian, seed)
    }

    fn naive_mul(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.nrows(), b.ncols(), |i, j| (0..a.ncols()).map(|k| a[(i, k)] * b[(k, j)]).sum())
    }

    #[test]
    fn error_matrix_cases() {
        let chain = LinearChain::new(vec![gauss(4, 1), gauss(4, 2)]).unwrap();
        let zero = error_matrix(&chain, &chain.product()).unwrap();
        assert!(zero.norm() < 1e-14);

        let t = gauss(3, 3);
        let id = LinearChain::new(vec![Matrix::identity(3, 3)]).unwrap();
        assert_eq!(error_matrix(&id, &t).unwrap(), &t - Matrix::identity(3, 3));

        let t = gauss(4, 0);
        let e = error_matrix(&chain, &t).unwrap();
        let oracle = &t - naive_mul(&chain.weights()[1], &chain.weights()[0]);
        assert!((e - oracle).norm() < 1e-13);
    }

    #[test]
    fn optimal_error_cases() {
        let chain = LinearChain::new(vec![gauss(4, 5), gauss(4, 6)]).unwrap();
        assert_eq!(optimal_error(&chain, &chain.product(), &RankBudget::Uniform(1)).unwrap(), 0.0);
        let t = gauss(4, 2);
        assert_eq!(optimal_error(&chain, &t, &RankBudget::Uniform(2)).unwrap(), 0.0);
        let e = &t - chain.product();
        let got = optimal_error(&chain, &t, &RankBudget::Uniform(1)).unwrap();
        assert!((got - sigma_k(&e, 3)).abs() < 1e-12);
    }

    #[test]
    fn assumptions_identity_and_zero() {
        let chain = LinearChain::new(vec![Matrix::identity(3, 3); 2]).unwrap();
        let rep = check_assumptions(&chain, &Matrix::identity(3, 3), &RankBudget::Uniform(2)).unwrap();
        assert!(rep.satisfied);

        let chain = LinearChain::new(vec![Matrix::identity(3, 3), Matrix::zeros(3, 3)]).unwrap();
        let rep = check_assumptions(&chain, &gauss(3, 1), &RankBudget::Uniform(1)).unwrap();
        assert!(!rep.satisfied);
        assert_eq!(rep.failures().next().unwrap().name, "W_2");
        assert!(synthesize(&chain, &gauss(3, 1), &RankBudget::Uniform(1))
            .unwrap_err()
            .is_assumption_violation());
    }

    #[test]
    fn single_layer_full_rank() {
        let w = gauss(5, 3);
        let t = gauss(5, 4);
        let chain = LinearChain::new(vec![w.clone()]).unwrap();
        let plan = synthesize(&chain, &t, &RankBudget::Uniform(5)).unwrap();
        assert!((&plan.deltas[0] - (&t - &w)).norm() < 1e-12);
    }

    #[test]
    fn already_matching_target() {
        let chain = LinearChain::new(vec![gauss(4, 8), gauss(4, 9), gauss(4, 10)]).unwrap();
        let plan = synthesize(&chain, &chain.product(), &RankBudget::Uniform(2)).unwrap();
        assert!(plan.deltas.iter().all(|d| d.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn exact_at_threshold() {
        let chain = LinearChain::new(vec![gauss(16, 20), gauss(16, 21)]).unwrap();
        let t = gauss(16, 22);
        let plan = synthesize(&chain, &t, &RankBudget::Uniform(8)).unwrap();
        let diff = chain.adapted_product(&plan.deltas) - &t;
        assert!(diff.norm() < 1e-8 * (1.0 + t.norm()));
        for d in &plan.deltas {
            assert!(rank(d).unwrap() <= 8);
        }
    }

    #[test]
    fn goal_matrix_identity() {
        let chain = LinearChain::new(vec![gauss(6, 30), gauss(6, 31), gauss(6, 32)]).unwrap();
        let t = gauss(6, 33);
        let budget = RankBudget::Uniform(1);
        let plan = synthesize(&chain, &t, &budget).unwrap();
        let e = error_matrix(&chain, &t).unwrap();
        let want = chain.product() + crate::matrix::best_rank_approx(&e, 3).unwrap();
        assert!((chain.adapted_product(&plan.deltas) - want).norm() < 1e-8 * (1.0 + t.norm()));
        assert!((plan.achieved_spectral_error - plan.predicted_spectral_error).abs() < 1e-7);
    }

    #[test]
    fn per_layer_zero_budget_layer_gets_zero() {
        let chain = LinearChain::new(vec![gauss(4, 40), gauss(4, 41)]).unwrap();
        let plan = synthesize(&chain, &gauss(4, 42), &RankBudget::PerLayer(vec![0, 2])).unwrap();
        assert!(plan.deltas[0].iter().all(|&v| v == 0.0));
        assert_eq!(rank(&plan.deltas[1]).unwrap(), 2);
    }

    #[test]
    fn budget_length_mismatch() {
        let chain = LinearChain::new(vec![gauss(4, 40), gauss(4, 41)]).unwrap();
        assert!(synthesize(&chain, &gauss(4, 42), &RankBudget::PerLayer(vec![1])).is_err());
    }

    #[test]
    fn jitter_rescues_singular_chain() {
        let chain = LinearChain::new(vec![Matrix::zeros(3, 3), gauss(3, 1)]).unwrap();
        let t = gauss(3, 2);
        assert!(synthesize_with_jitter(&chain, &t, &RankBudget::Uniform(2), 0.0, 0).is_err());
        let (used, plan) = synthesize_with_jitter(&chain, &t, &RankBudget::Uniform(2), 1e-3, 0).unwrap();
        assert_ne!(used, chain);
        assert!((used.adapted_product(&plan.deltas) - &t).norm() < 1e-8 * (1.0 + t.norm()));
    }

    #[test]
    fn embed_cases() {
        let chain = LinearChain::new(vec![gauss(6, 50), gauss(6, 51)]).unwrap();
        let t = gauss(6, 52);
        assert_eq!(embed_wider_target(&t, &chain).unwrap(), t);

        let lead = chain.product().view((0, 0), (3, 3)).into_owned();
        let e = error_matrix(&chain, &embed_wider_target(&lead, &chain).unwrap()).unwrap();
        assert!(e.norm() < 1e-14);

        let small = gauss(3, 53);
        let e = error_matrix(&chain, &embed_wider_target(&small, &chain).unwrap()).unwrap();
        assert!(rank(&e).unwrap() <= 3);
        assert!(embed_wider_target(&gauss(7, 1), &chain).is_err());
    }
}
