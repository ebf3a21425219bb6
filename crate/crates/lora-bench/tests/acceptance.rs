//! Runs the twelve acceptance criteria and prints one PASS/FAIL line each.
//! Built without the libtest harness so the lines always reach the console.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use lora_bench::config::{ExperimentConfig, ExperimentKind, Method, ModelKind, Variant};
use lora_bench::experiments::{median, run_sweep};
use lora_bench::models::{generate_models, ModelSpec};
use lora_construct::fnn::{
    self, error_bound, final_layer_witness, max_deviation, mean_distance, output_mse, random_fnn, uniform_partition, FnnModel,
};
use lora_construct::linear::{self, LinearChain, RankBudget};
use lora_construct::matrix::{gaussian_in_ball, gaussian_matrix, per_coordinate_mse, random_matrix, seeded_rng, InitScheme};
use lora_construct::tfn::{self, compute_gaps, random_tfn, HeadType};
use lora_construct::train::{
    make_targets, objective, train_lora, LossKind, Model, ParamLayout, PretrainConfig, TrainConfig, TrainOptions,
};
use lora_construct::Matrix;
use rand::Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

type Outcome = Result<String, String>;

// Singular values from the bidiagonal routine, kept independent of the crate's Jacobi SVD.
fn oracle_singular_values(m: &Matrix) -> Vec<f64> {
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

fn oracle_sigma(m: &Matrix, k: usize) -> f64 {
    oracle_singular_values(m).get(k - 1).copied().unwrap_or(0.0)
}

fn spec(kind: ModelKind, dim: usize, depth: usize, target_depth: usize) -> ModelSpec {
    ModelSpec {
        kind,
        dim,
        depth,
        target_depth,
        heads: 1,
        head_type: HeadType::Multi,
    }
}

fn linear_pair(dim: usize, depth: usize, seed: u64) -> (LinearChain, Matrix) {
    let (f, t) = generate_models(&spec(ModelKind::Linear, dim, depth, 1), Variant::Random, seed, &PretrainConfig::default()).unwrap();
    match (f, t) {
        (Model::Linear(f), Model::Linear(t)) => (f, t.product()),
        _ => unreachable!(),
    }
}

fn fnn_pair(dim: usize, depth: usize, target_depth: usize, seed: u64) -> (FnnModel, FnnModel) {
    let (f, t) = generate_models(&spec(ModelKind::Fnn, dim, depth, target_depth), Variant::Random, seed, &PretrainConfig::default()).unwrap();
    match (f, t) {
        (Model::Fnn(f), Model::Fnn(t)) => (f, t),
        _ => unreachable!(),
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Construction MSE per rank for the linear instances of criterion 1.
fn linear_mse_curve(seed: u64) -> Result<Vec<f64>, String> {
    let (chain, t) = linear_pair(16, 2, seed);
    let xs = gaussian_matrix(16, 1024, &mut seeded_rng(1000 + seed));
    (0..=16)
        .map(|r| {
            let plan = linear::synthesize(&chain, &t, &RankBudget::Uniform(r)).map_err(|e| format!("seed {seed} R={r}: {e}"))?;
            Ok(per_coordinate_mse(&(chain.adapted_product(&plan.deltas) * &xs), &(&t * &xs)))
        })
        .collect()
}

fn c1_linear_optimality() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_exact = 0.0f64;
    for seed in SEEDS {
        let (chain, t) = linear_pair(16, 2, seed);
        let e = &t - chain.product();
        let xs = gaussian_matrix(16, 1024, &mut seeded_rng(1000 + seed));
        for r in 0..=16 {
            let plan = linear::synthesize(&chain, &t, &RankBudget::Uniform(r)).map_err(|e| format!("seed {seed} R={r}: {e}"))?;
            let resid = chain.adapted_product(&plan.deltas) - &t;
            let gap = (oracle_sigma(&resid, 1) - oracle_sigma(&e, 2 * r + 1)).abs();
            worst = worst.max(gap);
            check(gap < 1e-7, || format!("seed {seed} R={r}: |achieved - sigma| = {gap:e}"))?;
            if r >= 8 {
                let mse = per_coordinate_mse(&(&resid * &xs), &Matrix::zeros(16, 1024));
                worst_exact = worst_exact.max(mse);
                check(mse < 1e-12, || format!("seed {seed} R={r}: mse {mse:e}"))?;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 10.0, || format!("took {secs:.1}s"))?;
    Ok(format!("max |err - sigma_2R+1| {worst:.1e}, max mse at R>=8 {worst_exact:.1e}, {secs:.2}s"))
}

fn c2_budget_shift() -> Outcome {
    let mut worst = 0.0f64;
    for seed in SEEDS {
        let (chain, t) = linear_pair(8, 2, seed);
        for r in 0..=4 {
            let errs = [vec![r, r], vec![2 * r, 0], vec![0, 2 * r]]
                .into_iter()
                .map(|b| {
                    linear::synthesize(&chain, &t, &RankBudget::PerLayer(b.clone()))
                        .map(|p| oracle_sigma(&(chain.adapted_product(&p.deltas) - &t), 1))
                        .map_err(|e| format!("seed {seed} {b:?}: {e}"))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let spread = errs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) - errs.iter().fold(f64::INFINITY, |a, &b| a.min(b));
            worst = worst.max(spread);
            check(spread < 1e-7, || format!("seed {seed} R={r}: spread {spread:e}"))?;
        }
    }
    Ok(format!("max spread {worst:.1e}"))
}

const RADIUS_16: f64 = 8.0;

fn fnn_construction(f: &FnnModel, t: &FnnModel, r: usize) -> Result<FnnModel, String> {
    let part = uniform_partition(f.depth(), t.depth()).unwrap();
    fnn::synthesize(f, t, &part, &RankBudget::Uniform(r), RADIUS_16)
        .map(|p| p.apply(f))
        .map_err(|e| format!("R={r}: {e}"))
}

fn c3_fnn_exactness() -> Outcome {
    let start = Instant::now();
    let (mut dev, mut mse) = (0.0f64, 0.0f64);
    for seed in SEEDS {
        let (f, t) = fnn_pair(16, 4, 2, seed);
        let adapted = fnn_construction(&f, &t, 8).map_err(|e| format!("seed {seed} {e}"))?;
        let xs = gaussian_in_ball(16, 256, RADIUS_16, &mut seeded_rng(2000 + seed));
        let d = max_deviation(&adapted, &t, &xs);
        let m = output_mse(&adapted, &t, &xs);
        dev = dev.max(d);
        mse = mse.max(m);
        check(d < 1e-6 && m < 1e-10, || format!("seed {seed}: max dev {d:e}, mse {m:e}"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 30.0, || format!("took {secs:.1}s"))?;
    Ok(format!("max dev {dev:.1e}, max mse {mse:.1e}, {secs:.2}s"))
}

fn c4_fnn_bounds() -> Outcome {
    let mut tightest = 0.0f64;
    let mut cells = 0;
    for d in [4usize, 8] {
        let radius = 2.0 * (d as f64).sqrt();
        for target_depth in [1usize, 2] {
            let depth = 2 * target_depth;
            for seed in SEEDS {
                let (f, t) = fnn_pair(d, depth, target_depth, seed);
                let part = uniform_partition(depth, target_depth).unwrap();
                let xs = gaussian_in_ball(d, 10_000, radius, &mut seeded_rng(3000 + seed));
                for r in 0..=d {
                    let budget = RankBudget::Uniform(r);
                    let plan = fnn::synthesize(&f, &t, &part, &budget, radius)
                        .map_err(|e| format!("D={d} Lbar={target_depth} seed {seed} R={r}: {e}"))?;
                    let report = error_bound(&f, &t, &part, &budget, &Matrix::identity(d, d)).unwrap();
                    let (mean, mean_sq) = mean_distance(&plan.apply(&f), &t, &xs);
                    // 1e-9 absorbs roundoff where the bound is exactly zero.
                    check(mean <= report.bound + 1e-9, || {
                        format!("D={d} Lbar={target_depth} seed {seed} R={r}: mean {mean:e} > bound {:e}", report.bound)
                    })?;
                    if report.bound > 0.0 {
                        tightest = tightest.max(mean / report.bound);
                    }
                    if target_depth == 1 {
                        let sq = report.squared_bound.unwrap();
                        check(mean_sq <= sq + 1e-9, || format!("D={d} seed {seed} R={r}: mean sq {mean_sq:e} > {sq:e}"))?;
                    }
                    cells += 1;
                }
            }
        }
    }
    Ok(format!("{cells} cells, largest mean/bound ratio {tightest:.3}"))
}

fn c5_monotonicity() -> Outcome {
    let tol = 1e-12;
    for seed in SEEDS {
        let curve = linear_mse_curve(seed)?;
        for r in 1..curve.len() {
            check(curve[r] <= curve[r - 1] + tol, || format!("linear seed {seed}: mse[{r}]={:e} > mse[{}]={:e}", curve[r], r - 1, curve[r - 1]))?;
        }
        let (f, t) = fnn_pair(16, 4, 2, seed);
        let xs = gaussian_in_ball(16, 1024, RADIUS_16, &mut seeded_rng(2000 + seed));
        let mut prev = f64::INFINITY;
        for r in 0..=8 {
            let m = output_mse(&fnn_construction(&f, &t, r).map_err(|e| format!("seed {seed} {e}"))?, &t, &xs);
            check(m <= prev + tol, || format!("fnn seed {seed}: mse[{r}]={m:e} > {prev:e}"))?;
            prev = m;
        }
    }
    Ok("linear R=0..16 and fnn R=0..8 nonincreasing on all seeds".into())
}

fn c6_tfn_exactness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (heads, ht) in [(1usize, HeadType::Single), (2, HeadType::Multi)] {
        for depth in [1usize, 2] {
            for seed in SEEDS {
                let mut rng = seeded_rng(seed * 7 + depth as u64 * 131 + heads as u64);
                let f = random_tfn(16, depth, heads, ht, &mut rng);
                let t = random_tfn(16, depth, heads, ht, &mut rng);
                let tag = format!("H={heads} L={depth} seed {seed}");
                let gaps = compute_gaps(&f, &t).map_err(|e| format!("{tag}: {e}"))?;
                let max_gap = *gaps.gaps.iter().max().unwrap();
                check(max_gap == 16, || format!("{tag}: max gap {max_gap}"))?;
                let adapted = tfn::synthesize(&f, &t, 8).map_err(|e| format!("{tag}: {e}"))?.apply(&f);
                for _ in 0..64 {
                    let x = gaussian_matrix(16, 10, &mut rng);
                    let d = (adapted.forward(&x).unwrap() - t.forward(&x).unwrap()).amax();
                    worst = worst.max(d);
                    check(d < 1e-6, || format!("{tag}: deviation {d:e}"))?;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("max deviation {worst:.1e}, every max gap 16, {secs:.2}s"))
}

fn c7_gradient_floor() -> Outcome {
    let base = TrainConfig {
        iterations: 2000,
        ..TrainConfig::default()
    };
    let mut runs = 0;
    let mut closest = f64::INFINITY;
    for seed in SEEDS {
        let (chain, t) = linear_pair(8, 2, seed);
        let e = &t - chain.product();
        let target = Model::Linear(LinearChain::new(vec![t.clone()]).unwrap());
        for r in 1..=3 {
            let floor = oracle_sigma(&e, 2 * r + 1);
            // Every grid cell separately, not only the selected one.
            for &lr in &base.learning_rates {
                for &wd in &base.weight_decays {
                    let cfg = TrainConfig {
                        learning_rates: vec![lr],
                        weight_decays: vec![wd],
                        seed,
                        ..base.clone()
                    };
                    let Ok(out) = train_lora(&Model::Linear(chain.clone()), &target, r, &cfg, &TrainOptions::default()) else {
                        continue;
                    };
                    let Model::Linear(adapted) = &out.adapted else { unreachable!() };
                    let err = oracle_sigma(&(adapted.product() - &t), 1);
                    closest = closest.min(err - floor);
                    check(err >= floor - 1e-6, || format!("seed {seed} R={r} lr={lr} wd={wd}: {err:e} < {floor:e}"))?;
                    runs += 1;
                }
            }
        }
    }
    Ok(format!("{runs} runs, smallest margin above the floor {closest:.2e}"))
}

fn fd_coordinates(frozen: &Model, target: &Model, layout: &ParamLayout, rank: usize, loss: LossKind, n: usize, seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let params: Vec<Matrix> = layout
        .init_params(frozen, rank, &mut rng)
        .iter()
        .map(|p| p.map(|v| v + 0.1 * rng.random_range(-1.0..1.0)))
        .collect();
    let opts = TrainOptions {
        loss,
        ..TrainOptions::default()
    };
    let xs = frozen.sample_inputs(8, 6, &mut rng);
    let ts = make_targets(target, &xs, &opts);
    let (_, grads) = objective(frozen, layout, &params, &xs, &ts, None).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..n {
        let i = rng.random_range(0..params.len());
        let j = rng.random_range(0..params[i].len());
        let (mut p, mut m) = (params.clone(), params.clone());
        p[i][j] += h;
        m[i][j] -= h;
        let fd = (objective(frozen, layout, &p, &xs, &ts, None).unwrap().0 - objective(frozen, layout, &m, &xs, &ts, None).unwrap().0) / (2.0 * h);
        let g = grads[i][j];
        worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-4));
    }
    worst
}

fn c8_gradient_sanity() -> Outcome {
    let (f, t) = linear_pair(16, 1, 0);
    let frozen = Model::Linear(f);
    let target = Model::Linear(LinearChain::new(vec![t]).unwrap());
    let out = train_lora(&frozen, &target, 16, &TrainConfig::default(), &TrainOptions::default()).map_err(|e| e.to_string())?;
    let mse = out.curve.validation_loss;
    check(mse <= 1e-6, || format!("L=1 R=D validation mse {mse:e}"))?;

    let mut rng = seeded_rng(77);
    let fnn_f = Model::Fnn(random_fnn(6, 3, &mut rng));
    let fnn_t = Model::Fnn(random_fnn(6, 2, &mut rng));
    let tfn_f = Model::Tfn(random_tfn(5, 2, 2, HeadType::Multi, &mut rng));
    let tfn_t = Model::Tfn(random_tfn(5, 2, 2, HeadType::Multi, &mut rng));
    let checks = [
        fd_coordinates(&fnn_f, &fnn_t, &ParamLayout::everything(&fnn_f), 0, LossKind::Mse, 50, 1),
        fd_coordinates(&fnn_f, &fnn_t, &ParamLayout::lora(&fnn_f, 2, true), 2, LossKind::CrossEntropy, 50, 2),
        fd_coordinates(&tfn_f, &tfn_t, &ParamLayout::everything(&tfn_f), 0, LossKind::Mse, 50, 3),
        fd_coordinates(&tfn_f, &tfn_t, &ParamLayout::lora(&tfn_f, 2, true), 2, LossKind::Mse, 50, 4),
    ];
    let worst = checks.iter().fold(0.0f64, |a, &b| a.max(b));
    check(worst < 1e-5, || format!("finite-difference relative error {worst:e}"))?;
    Ok(format!("L=1 R=D mse {mse:.1e} (lr {:e}), 200 coordinates worst rel err {worst:.1e}", out.curve.learning_rate))
}

fn c9_final_layers() -> Outcome {
    // Matched pairs: LoRA rank k (2kDL parameters, frozen biases) against the
    // last k layers (k(D²+D) parameters), so LoRA never has more parameters.
    let ks: Vec<usize> = (1..=7).collect();
    let cfg = ExperimentConfig {
        experiment: ExperimentKind::CompareFinalLayers,
        dim: 16,
        depth: 8,
        target_depth: 1,
        ranks: ks.clone(),
        final_layers: ks.clone(),
        train_biases: false,
        train: TrainConfig {
            learning_rates: vec![1e-2, 1e-3],
            weight_decays: vec![0.0],
            iterations: 1000,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let out = run_sweep(&cfg).map_err(|e| e.to_string())?;
    check(!out.manifest.has_failures(), || "some cells failed".into())?;
    let med = |method: &str, k: usize| {
        let mut v: Vec<f64> = out.rows.iter().filter(|r| r.method == method && r.rank == k).map(|r| r.test_mse).collect();
        let params = out.rows.iter().find(|r| r.method == method && r.rank == k).map(|r| r.params_tunable).unwrap_or(0);
        (median(&mut v).unwrap_or(f64::NAN), params)
    };
    let mut pairs = Vec::new();
    for &k in &ks {
        let (fl, fp) = med("final-layers", k);
        let (lo, lp) = med("gradient", k);
        check(lp <= fp, || format!("k={k}: LoRA has {lp} params vs {fp}"))?;
        check(fl > lo, || format!("k={k}: final-layers {fl:.3e} <= LoRA {lo:.3e}"))?;
        pairs.push(format!("{k}:{:.2}", fl / lo));
    }

    let mut found = 0;
    let mut rng = seeded_rng(4242);
    for i in 0..100u64 {
        let f = random_fnn(16, 8, &mut rng);
        let t = random_fnn(16, 1, &mut rng);
        if final_layer_witness(&f, &t, 100_000, i).map_err(|e| e.to_string())?.is_some() {
            found += 1;
        }
    }
    check(found >= 95, || format!("witness found for {found}/100"))?;
    Ok(format!("final/LoRA median ratios {}, witnesses {found}/100", pairs.join(" ")))
}

fn c10_pretraining() -> Outcome {
    let run = |variant| {
        let cfg = ExperimentConfig {
            experiment: ExperimentKind::SweepLinear,
            ranks: (1..=7).collect(),
            variant,
            ..ExperimentConfig::default()
        };
        run_sweep(&cfg).map_err(|e| e.to_string())
    };
    let (random, pretrained) = (run(Variant::Random)?, run(Variant::Pretrained)?);
    check(!random.manifest.has_failures() && !pretrained.manifest.has_failures(), || "some cells failed".into())?;
    let med = |rows: &[lora_bench::ResultRow], r: usize| {
        let mut v: Vec<f64> = rows.iter().filter(|x| x.rank == r).map(|x| x.test_mse).collect();
        median(&mut v).unwrap()
    };
    let mut ratios = Vec::new();
    for r in 1..=7 {
        let (a, b) = (med(&pretrained.rows, r), med(&random.rows, r));
        check(a < b, || format!("R={r}: pretrained {a:e} >= random {b:e}"))?;
        ratios.push(format!("{r}:{:.2}", a / b));
    }
    Ok(format!("pretrained/random median ratios {}", ratios.join(" ")))
}

fn c11_classification() -> Outcome {
    let cfg = ExperimentConfig {
        experiment: ExperimentKind::Classify,
        model: ModelKind::Fnn,
        ranks: vec![8, 12, 16],
        methods: vec![Method::Construction],
        ..ExperimentConfig::default()
    };
    let out = run_sweep(&cfg).map_err(|e| e.to_string())?;
    check(!out.manifest.has_failures(), || "some cells failed".into())?;
    check(out.rows.len() == 15, || format!("{} rows", out.rows.len()))?;
    for r in &out.rows {
        check(r.accuracy == Some(1.0), || format!("seed {} R={}: accuracy {:?}", r.seed, r.rank, r.accuracy))?;
    }
    Ok("accuracy 1.0 on 1024 held-out samples for R in {8,12,16}, 5/5 seeds".into())
}

fn c12_assumptions() -> Outcome {
    let mut rng = seeded_rng(1212);
    let gauss = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<Matrix> {
        (0..n).map(|_| random_matrix(16, 16, InitScheme::StandardGaussian, rng)).collect()
    };
    let mut failures = Vec::new();
    for i in 0..100 {
        let r = i % 17;
        let chain = LinearChain::new(gauss(&mut rng, 2)).unwrap();
        let t = gauss(&mut rng, 1).pop().unwrap();
        let rep = linear::check_assumptions(&chain, &t, &RankBudget::Uniform(r)).map_err(|e| e.to_string())?;
        if !rep.satisfied {
            failures.push(format!("linear #{i}"));
        }

        // ReLU networks: the conditions are those of each block's chain.
        let ws = gauss(&mut rng, 4);
        let tw = gauss(&mut rng, 2);
        let part = uniform_partition(4, 2).unwrap();
        for (b, block) in part.blocks().iter().enumerate() {
            let c = LinearChain::new(ws[block.clone()].to_vec()).unwrap();
            let rep = linear::check_assumptions(&c, &tw[b], &RankBudget::Uniform(r)).map_err(|e| e.to_string())?;
            if !rep.satisfied {
                failures.push(format!("fnn #{i} block {}", b + 1));
            }
        }

        let (heads, ht) = if i % 2 == 0 { (2, HeadType::Multi) } else { (1, HeadType::Single) };
        let f = random_tfn(16, 2, heads, ht, &mut rng);
        let t = random_tfn(16, 2, heads, ht, &mut rng);
        let rep = tfn::check_assumptions(&f, &t, 8).map_err(|e| e.to_string())?;
        if !rep.satisfied {
            failures.push(format!("tfn #{i}"));
        }
    }
    check(failures.is_empty(), || format!("failures: {}", failures.join(", ")))?;
    Ok("300 instances (100 per family), 0 failures".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("linear optimality", c1_linear_optimality),
        ("budget-shift equivalence", c2_budget_shift),
        ("fnn exactness", c3_fnn_exactness),
        ("fnn bound validity", c4_fnn_bounds),
        ("monotonicity", c5_monotonicity),
        ("tfn exactness", c6_tfn_exactness),
        ("gradient floor", c7_gradient_floor),
        ("gradient sanity", c8_gradient_sanity),
        ("final-layers comparison", c9_final_layers),
        ("pretraining effect", c10_pretraining),
        ("classification", c11_classification),
        ("assumption surrogates", c12_assumptions),
    ];
    let only: Vec<usize> = std::env::args().filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
