//! End-to-end acceptance suite. Each test prints one PASS/FAIL line with
//! the measured value and its threshold. The training tests share runs, so
//! the tripwire and determinism checks reuse what the experiments trained.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use cflab::autodiff::{Graph, Precision, Tensor};
use cflab::checks::{run_checks, Scope};
use cflab::config::Settings;
use cflab::constraints::*;
use cflab::eval::{evaluate_causal, evaluate_tracking, CausalReport};
use cflab::models::{DetectorPair, RegressionCNN};
use cflab::scenes::{generate, Dataset, DatasetKind};
use cflab::trainer::{
    ablate, output_std, thread_budget, train, Model, RunRecord, TrainConfig, TrainMode,
    TruthGuard,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Free-fall iteration budget; the threshold is met well before 4000.
const FREEFALL_ITERATIONS: usize = 2000;

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "acceptance {n} {name}: {verdict} {detail}");
}

fn settings(kind: DatasetKind) -> Settings {
    Settings::defaults(kind)
}

fn dataset(kind: DatasetKind) -> &'static Dataset {
    static FF: OnceLock<Dataset> = OnceLock::new();
    static WALK: OnceLock<Dataset> = OnceLock::new();
    static CAUSAL: OnceLock<Dataset> = OnceLock::new();
    let cell = match kind {
        DatasetKind::FreeFall => &FF,
        DatasetKind::Walk => &WALK,
        DatasetKind::Causal => &CAUSAL,
    };
    cell.get_or_init(|| generate(kind, &settings(kind).gen).expect("default config generates"))
}

fn initial_model(s: &Settings) -> Model {
    match s.train.experiment {
        DatasetKind::Causal => Model::Pair(DetectorPair::new(s.arch.clone(), s.train.seed).unwrap()),
        _ => Model::Regression(RegressionCNN::new(s.arch.clone(), s.train.seed).unwrap()),
    }
}

fn run(cfg: &TrainConfig, s: &Settings) -> (RunRecord, Model) {
    let data = dataset(cfg.experiment);
    let guard = TruthGuard::new(data);
    let mut model = initial_model(s);
    let record = train(cfg, &guard, &mut model).expect("training succeeds");
    (record, model)
}

fn freefall_config(mode: TrainMode) -> (TrainConfig, Settings) {
    let s = settings(DatasetKind::FreeFall);
    let mut cfg = s.train.clone();
    cfg.iterations = FREEFALL_ITERATIONS;
    cfg.mode = mode;
    (cfg, s)
}

struct FreeFall {
    constraint: RunRecord,
    supervised: RunRecord,
    pearson: f64,
    supervised_pearson: f64,
    random: f64,
}

fn freefall() -> &'static FreeFall {
    static CELL: OnceLock<FreeFall> = OnceLock::new();
    CELL.get_or_init(|| {
        let data = dataset(DatasetKind::FreeFall);
        let score = |m: &Model, seed, holdout| match m {
            Model::Regression(r) => evaluate_tracking(r, data, holdout, seed).unwrap(),
            Model::Pair(_) => unreachable!(),
        };
        let (cfg, s) = freefall_config(TrainMode::Constraint);
        let (constraint, model) = run(&cfg, &s);
        let rc = score(&model, cfg.seed, cfg.holdout);
        let (cfg, s) = freefall_config(TrainMode::Supervised);
        let (supervised, model) = run(&cfg, &s);
        let rs = score(&model, cfg.seed, cfg.holdout);
        FreeFall {
            constraint,
            supervised,
            pearson: rc.aggregate,
            supervised_pearson: rs.aggregate,
            random: rc.comparison("random").expect("random row"),
        }
    })
}

struct Walk {
    full: RunRecord,
    collapsed: RunRecord,
    score: f64,
    mean_trajectory: f64,
    collapsed_std: f64,
}

fn walk() -> &'static Walk {
    static CELL: OnceLock<Walk> = OnceLock::new();
    CELL.get_or_init(|| {
        let s = settings(DatasetKind::Walk);
        let data = dataset(DatasetKind::Walk);
        let runs = ablate(&s.train, data, &initial_model(&s), &[vec![1, 2]], thread_budget())
            .expect("walk runs succeed");
        let [full, collapsed]: [_; 2] = runs.try_into().ok().expect("full and one ablation");
        let Model::Regression(m) = &full.model else {
            unreachable!()
        };
        let r = evaluate_tracking(m, data, s.train.holdout, s.train.seed).unwrap();
        let std = output_std(&collapsed.model, data, s.train.holdout).unwrap()[0];
        Walk {
            full: full.record,
            collapsed: collapsed.record,
            score: r.aggregate,
            mean_trajectory: r.mean_trajectory_correlation(),
            collapsed_std: std,
        }
    })
}

struct CausalRun {
    label: String,
    record: RunRecord,
    report: CausalReport,
}

fn causal() -> &'static [CausalRun] {
    static CELL: OnceLock<Vec<CausalRun>> = OnceLock::new();
    CELL.get_or_init(|| {
        let s = settings(DatasetKind::Causal);
        let data = dataset(DatasetKind::Causal);
        let drops = [vec![1], vec![2], vec![3]];
        let runs = ablate(&s.train, data, &initial_model(&s), &drops, thread_budget())
            .expect("causal runs succeed");
        runs.into_iter()
            .map(|r| {
                let Model::Pair(p) = &r.model else {
                    unreachable!()
                };
                CausalRun {
                    report: evaluate_causal(p, data, s.train.holdout).unwrap(),
                    label: r.label,
                    record: r.record,
                }
            })
            .collect()
    })
}

#[test]
fn gradient_correctness() {
    let start = Instant::now();
    let outcomes = run_checks(Scope::All, Precision::Double).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = outcomes.iter().map(|o| o.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed).map(|o| &o.name).collect();
    let suites = ["ops", "losses", "models"];
    let covered = suites.iter().all(|s| outcomes.iter().any(|o| o.suite == *s));
    let pass = failed.is_empty() && worst < 1e-4 && covered && secs < 120.0;
    report(
        1,
        "gradient correctness",
        pass,
        &format!(
            "{} checks, max rel error {worst:.2e} (< 1e-4), {secs:.1} s (< 120 s), failed {failed:?}",
            outcomes.len()
        ),
    );
    assert!(pass);
}

#[test]
fn projection_algebra() {
    let mut worst: f64 = 0.0;
    for n in [3, 5, 10, 50] {
        for dt in [0.05, 0.1, 1.0] {
            let op = ProjectionOperator::affine(n, dt).unwrap();
            let p = op.projection().data();
            let at = |i: usize, j: usize| p[i * n + j];
            let mut trace = 0.0;
            for i in 0..n {
                trace += at(i, i);
                for j in 0..n {
                    worst = worst.max((at(i, j) - at(j, i)).abs());
                    let pp: f64 = (0..n).map(|k| at(i, k) * at(k, j)).sum();
                    worst = worst.max((pp - at(i, j)).abs());
                }
            }
            worst = worst.max((trace - 2.0).abs());
            for (c0, c1) in [(1.0, 0.0), (0.0, 1.0), (-2.5, 3.7)] {
                let y: Vec<f64> = (1..=n).map(|i| c0 + c1 * i as f64 * dt).collect();
                for i in 0..n {
                    let py: f64 = (0..n).map(|k| at(i, k) * y[k]).sum();
                    worst = worst.max((py - y[i]).abs());
                }
            }
        }
    }
    let pass = worst < 1e-10;
    report(
        2,
        "projection algebra",
        pass,
        &format!("max deviation {worst:.2e} (< 1e-10) over N in {{3,5,10,50}}, dt in {{0.05,0.1,1}}"),
    );
    assert!(pass);
}

fn scalar(g: &Graph, v: cflab::autodiff::Var) -> f64 {
    g.value(v).item().unwrap()
}

#[test]
fn loss_zero_sets() {
    let mut r = ChaCha8Rng::seed_from_u64(0x2E50);
    let mut worst_ff: f64 = 0.0;
    let mut worst_cv: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.random_range(3..=20);
        let dt = r.random_range(0.05..0.5);
        let (y0, v0): (f64, f64) = (r.random_range(-10.0..10.0), r.random_range(-10.0..10.0));
        let y: Vec<f64> = (1..=n)
            .map(|i| {
                let t = i as f64 * dt;
                y0 + v0 * t + GRAVITY * t * t
            })
            .collect();
        let proj = build_projection(n, dt, GRAVITY).unwrap();
        let mut g = Graph::new();
        let v = g.param(Tensor::vector(y));
        let l = free_fall_loss(&mut g, v, &proj).unwrap();
        worst_ff = worst_ff.max(scalar(&g, l));

        let (c0, c1): (f64, f64) = (r.random_range(-10.0..10.0), r.random_range(-10.0..10.0));
        let y: Vec<f64> = (0..n).map(|i| c0 + c1 * i as f64).collect();
        let proj = ProjectionOperator::affine(n, 1.0).unwrap();
        let mut g = Graph::new();
        let v = g.param(Tensor::vector(y));
        let t = constant_velocity_loss(&mut g, v, &proj, &LossWeights::walk()).unwrap();
        worst_cv = worst_cv.max(scalar(&g, t.inertial));
    }

    let grid = [0.0, 0.25, 0.5, 0.9, 1.0];
    let mut implication_ok = true;
    for &p1 in &grid {
        for &p2 in &grid {
            let mut g = Graph::new();
            let a = g.param(Tensor::vector(vec![p1]));
            let b = g.param(Tensor::vector(vec![p2]));
            let v = soft_implication(&mut g, a, b).unwrap();
            let l = scalar(&g, v);
            let zero_expected = p1 * (1.0 - p2) == 0.0;
            implication_ok &= (l == 0.0) == zero_expected;
        }
    }
    let pass = worst_ff < 1e-8 && worst_cv < 1e-8 && implication_ok;
    report(
        3,
        "loss zero-sets",
        pass,
        &format!(
            "free fall max {worst_ff:.2e} (< 1e-8), inertial max {worst_cv:.2e} (< 1e-8), \
             implication zero exactly on p1(1-p2)=0: {implication_ok}"
        ),
    );
    assert!(pass);
}

#[test]
fn freefall_experiment() {
    let start = Instant::now();
    let ff = freefall();
    let pass = ff.pearson >= 0.80 && ff.supervised_pearson >= ff.pearson && ff.random < 0.30;
    report(
        4,
        "free fall",
        pass,
        &format!(
            "constraint Pearson {:.4} (>= 0.80), supervised {:.4} (>= constraint), random {:.4} (< 0.30), \
             {FREEFALL_ITERATIONS} iterations, {:.0} s",
            ff.pearson,
            ff.supervised_pearson,
            ff.random,
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn walking_experiment() {
    let start = Instant::now();
    let w = walk();
    let pass = w.score >= 0.80;
    report(
        5,
        "walking",
        pass,
        &format!(
            "affine-fit correlation {:.4} (>= 0.80), mean per-trajectory {:.4}, {:.0} s",
            w.score,
            w.mean_trajectory,
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn causal_experiment() {
    let start = Instant::now();
    let full = &causal()[0];
    assert_eq!(full.label, "full");
    let r = &full.report;
    let pass = r.accuracy[0] >= 0.90 && r.accuracy[1] >= 0.90 && r.violation_rate <= 0.02;
    report(
        6,
        "causal",
        pass,
        &format!(
            "{} held-out scenes, peach {:.4} mario {:.4} (>= 0.90), violations {:.4} (<= 0.02), {:.0} s",
            r.items,
            r.accuracy[0],
            r.accuracy[1],
            r.violation_rate,
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn trivial_solution_ablations() {
    let w = walk();
    let walk_ok = w.collapsed_std < 0.01;
    let mut detail = format!("walk without h1,h2: output std {:.2e} (< 0.01)", w.collapsed_std);
    let mut causal_ok = true;
    for run in &causal()[1..] {
        let worst = run.report.accuracy[0].min(run.report.accuracy[1]);
        causal_ok &= worst < 0.75;
        detail.push_str(&format!(
            "; causal {}: peach {:.3} mario {:.3} (one < 0.75)",
            run.label, run.report.accuracy[0], run.report.accuracy[1]
        ));
    }
    let pass = walk_ok && causal_ok && causal().len() == 4;
    report(7, "trivial-solution ablations", pass, &detail);
    assert!(pass);
}

#[test]
fn label_free_contract() {
    let ff = freefall();
    let w = walk();
    let c = causal();
    let mut reads = vec![
        ("freefall", ff.constraint.truth_reads),
        ("walk", w.full.truth_reads),
        ("walk -h1-h2", w.collapsed.truth_reads),
    ];
    for run in c {
        reads.push((run.label.as_str(), run.record.truth_reads));
    }
    let constraint_clean = reads.iter().all(|(_, n)| *n == 0);
    // the tripwire itself must fire when truth is read
    let armed = ff.supervised.truth_reads > 0;
    let pass = constraint_clean && armed;
    report(
        8,
        "label-free contract",
        pass,
        &format!(
            "truth reads per constraint run {reads:?} (all 0); supervised control reads {}",
            ff.supervised.truth_reads
        ),
    );
    assert!(pass);
}

#[test]
fn determinism() {
    let ff = freefall();
    let w = walk();
    let c = &causal()[0];
    let mut mismatched = Vec::new();
    for (mode, first) in [
        (TrainMode::Constraint, &ff.constraint),
        (TrainMode::Supervised, &ff.supervised),
    ] {
        let (cfg, s) = freefall_config(mode);
        let (again, _) = run(&cfg, &s);
        if again.loss_csv() != first.loss_csv() {
            mismatched.push(format!("freefall {}", mode.name()));
        }
    }
    for (kind, first) in [(DatasetKind::Walk, &w.full), (DatasetKind::Causal, &c.record)] {
        let s = settings(kind);
        let (again, _) = run(&s.train, &s);
        if again.loss_csv() != first.loss_csv() {
            mismatched.push(kind.name().to_string());
        }
    }
    let pass = mismatched.is_empty();
    report(
        9,
        "determinism",
        pass,
        &format!("byte-identical loss CSVs on re-run (freefall, walk, causal); mismatches {mismatched:?}"),
    );
    assert!(pass);
}
