//! Optimisation loop: constraint-supervised and label-supervised training
//! with Adam.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{check_gradients, AutodiffError, Graph, Mode, Precision, Tensor, Var};
use crate::constraints::{
    causal_loss_terms, constant_velocity_loss, free_fall_loss, CausalProbs, ConstraintError,
    LossWeights, ProjectionOperator, GRAVITY,
};
use crate::models::{
    forward_pair, forward_regression, predict_pair, predict_regression, Architecture,
    DetectorPair, Head, ModelError, ParamSet, RegressionCNN,
};
use crate::scenes::render::batch_tensor;
use crate::scenes::rng::{self, SceneRng};
use crate::scenes::{CausalScene, Dataset, DatasetKind, Image, Labels, Split, Trajectory};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset is {got} but the run is configured for {expected}")]
    KindMismatch {
        expected: DatasetKind,
        got: DatasetKind,
    },
    #[error("model does not fit the experiment: {0}")]
    ModelMismatch(String),
    #[error("non-finite gradient in {param} at iteration {iteration}")]
    NonFiniteGradient { param: String, iteration: usize },
    #[error("non-finite loss {value} at iteration {iteration}")]
    NonFiniteLoss { value: f64, iteration: usize },
    #[error("start-up gradient check failed: max relative error {error:.3e} in {param}")]
    GradCheck { param: String, error: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl TrainError {
    /// Divergence and gradient failures, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteGradient { .. }
                | TrainError::NonFiniteLoss { .. }
                | TrainError::GradCheck { .. }
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Constraint,
    Supervised,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Constraint => "constraint",
            TrainMode::Supervised => "supervised",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constraint" => Ok(TrainMode::Constraint),
            "supervised" => Ok(TrainMode::Supervised),
            other => Err(format!(
                "unknown mode '{other}' (expected constraint|supervised)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Bias-corrected Adam update at step `t ≥ 1`. Nothing is modified when a
/// gradient is non-finite.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    adam: &Adam,
    t: usize,
) -> Result<(), TrainError> {
    if t == 0 {
        return Err(TrainError::Config("adam step counter starts at 1".into()));
    }
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(TrainError::Config(format!(
            "adam: {} params, {} grads, {}/{} moments",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    for ((name, p), g) in params.names().zip(params.tensors()).zip(grads) {
        if g.shape() != p.shape() {
            return Err(TrainError::Config(format!(
                "adam: gradient {:?} for {name} {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                param: name.to_string(),
                iteration: t,
            });
        }
    }
    let c1 = 1.0 - adam.beta1.powi(t as i32);
    let c2 = 1.0 - adam.beta2.powi(t as i32);
    for (i, g) in grads.iter().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.tensor_mut(i).data_mut();
        for k in 0..g.len() {
            let gk = g.data()[k];
            m[k] = adam.beta1 * m[k] + (1.0 - adam.beta1) * gk;
            v[k] = adam.beta2 * v[k] + (1.0 - adam.beta2) * gk * gk;
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            p[k] -= lr * mh / (vh.sqrt() + adam.epsilon);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub experiment: DatasetKind,
    pub mode: TrainMode,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Trajectories (tracking) or images (causal) per batch.
    pub batch: usize,
    /// Frames per trajectory window.
    pub window: usize,
    pub weights: LossWeights,
    pub gravity: f64,
    pub adam: Adam,
    pub seed: u64,
    pub precision: Precision,
    /// Label-free held-out output statistics every this many iterations;
    /// 0 disables them.
    pub eval_every: usize,
    /// Items at the end of the dataset reserved for evaluation.
    pub holdout: usize,
    /// Finite-difference check of a down-scaled model before training.
    pub gradcheck: bool,
}

impl TrainConfig {
    pub fn new(experiment: DatasetKind) -> Self {
        let (weights, holdout) = match experiment {
            DatasetKind::FreeFall => (LossWeights::new(0.0, 0.0, 0.0).unwrap(), 13),
            DatasetKind::Walk => (LossWeights::walk(), 0),
            DatasetKind::Causal => (LossWeights::causal(), 128),
        };
        Self {
            experiment,
            mode: TrainMode::Constraint,
            learning_rate: 1e-4,
            iterations: 4000,
            batch: 16,
            window: 5,
            weights,
            gravity: GRAVITY,
            adam: Adam::default(),
            seed: 1,
            precision: Precision::Double,
            eval_every: 500,
            holdout,
            gradcheck: true,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.batch < 2 {
            return bad(format!("batch must be at least 2, got {}", self.batch));
        }
        if self.window < 3 {
            return bad(format!("window must be at least 3 frames, got {}", self.window));
        }
        self.weights
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return bad(format!("adam constants out of range: {a:?}"));
        }
        Ok(())
    }

    /// `key = value` lines that reproduce the run.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment = {}", self.experiment);
        let _ = writeln!(s, "mode = {}", self.mode.name());
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "iterations = {}", self.iterations);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "window = {}", self.window);
        let _ = writeln!(s, "gamma1 = {}", self.weights.gamma1);
        let _ = writeln!(s, "gamma2 = {}", self.weights.gamma2);
        let _ = writeln!(s, "gamma3 = {}", self.weights.gamma3);
        let _ = writeln!(s, "gravity = {}", self.gravity);
        let _ = writeln!(s, "adam_beta1 = {}", self.adam.beta1);
        let _ = writeln!(s, "adam_beta2 = {}", self.adam.beta2);
        let _ = writeln!(s, "adam_epsilon = {}", self.adam.epsilon);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "precision = {}", self.precision.name());
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        let _ = writeln!(s, "holdout = {}", self.holdout);
        let _ = writeln!(s, "gradcheck = {}", self.gradcheck);
        s
    }
}

/// Read-only view of a dataset that counts every ground-truth access.
/// Training only ever sees the dataset through this wrapper.
pub struct TruthGuard<'a> {
    data: &'a Dataset,
    reads: AtomicUsize,
}

impl<'a> TruthGuard<'a> {
    pub fn new(data: &'a Dataset) -> Self {
        Self {
            data,
            reads: AtomicUsize::new(0),
        }
    }

    pub fn kind(&self) -> DatasetKind {
        self.data.kind()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn tracks(&self) -> &'a [Trajectory] {
        self.data.trajectories().unwrap_or(&[])
    }

    fn scenes(&self) -> &'a [CausalScene] {
        self.data.scenes().unwrap_or(&[])
    }

    /// Frames of trajectory `i`.
    pub fn frames(&self, i: usize) -> &'a [Image] {
        &self.tracks()[i].frames
    }

    /// Frame spacing of trajectory `i` in seconds.
    pub fn dt(&self, i: usize) -> f64 {
        self.tracks()[i].meta.dt
    }

    pub fn image(&self, i: usize) -> &'a Image {
        &self.scenes()[i].image
    }

    pub fn truth(&self, i: usize) -> &'a [f64] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.tracks()[i].truth()
    }

    pub fn labels(&self, i: usize) -> Labels {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.scenes()[i].labels
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Regression(RegressionCNN),
    Pair(DetectorPair),
}

impl Model {
    /// Default architecture for an experiment.
    pub fn for_experiment(kind: DatasetKind, seed: u64) -> Result<Self, ModelError> {
        Ok(match kind {
            DatasetKind::Causal => Model::Pair(DetectorPair::new(Architecture::detector(), seed)?),
            _ => Model::Regression(RegressionCNN::new(Architecture::regression(), seed)?),
        })
    }

    pub fn param_sets(&self) -> Vec<&ParamSet> {
        match self {
            Model::Regression(m) => vec![&m.params],
            Model::Pair(p) => vec![&p.f1.params, &p.f2.params],
        }
    }

    fn param_sets_mut(&mut self) -> Vec<&mut ParamSet> {
        match self {
            Model::Regression(m) => vec![&mut m.params],
            Model::Pair(p) => vec![&mut p.f1.params, &mut p.f2.params],
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.param_sets().iter().map(|p| p.scalar_count()).sum()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        match self {
            Model::Regression(m) => m.save(path),
            Model::Pair(p) => p.save(path),
        }
    }

    fn check(&self, kind: DatasetKind) -> Result<(), TrainError> {
        match (self, kind) {
            (Model::Pair(_), DatasetKind::Causal) => Ok(()),
            (Model::Regression(_), DatasetKind::FreeFall | DatasetKind::Walk) => Ok(()),
            _ => Err(TrainError::ModelMismatch(format!(
                "a {} model cannot train on {kind}",
                match self {
                    Model::Regression(_) => "regression",
                    Model::Pair(_) => "detector pair",
                }
            ))),
        }
    }
}

/// One window of a tracking batch: frame indices into trajectory `item`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub item: usize,
    pub frames: Vec<usize>,
    /// Seconds between the chosen frames.
    pub dt: f64,
}

/// Indices of trajectory frames used for training and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackPlan {
    pub train_items: Vec<usize>,
    pub test_items: Vec<usize>,
    /// Walking trains on the first half and evaluates on the second.
    pub by_half: bool,
}

impl TrackPlan {
    pub fn new(kind: DatasetKind, len: usize, holdout: usize) -> Self {
        let s = Split::for_dataset(kind, len, holdout);
        Self {
            train_items: s.train,
            test_items: s.test,
            by_half: s.by_half,
        }
    }

    /// Frame range of trajectory `n` frames long used for training.
    pub fn train_range(&self, n: usize) -> std::ops::Range<usize> {
        if self.by_half {
            0..n / 2
        } else {
            0..n
        }
    }

    pub fn test_range(&self, n: usize) -> std::ops::Range<usize> {
        if self.by_half {
            n / 2..n
        } else {
            0..n
        }
    }
}

/// Draw one window: contiguous for free fall, evenly strided across the
/// first half for walking.
fn sample_window(
    data: &TruthGuard,
    plan: &TrackPlan,
    window: usize,
    r: &mut SceneRng,
) -> Result<Window, TrainError> {
    let item = plan.train_items[r.random_range(0..plan.train_items.len())];
    let n = data.frames(item).len();
    let range = plan.train_range(n);
    let len = range.len();
    if len < window {
        return Err(TrainError::Config(format!(
            "trajectory {item} offers {len} training frames, fewer than the window of {window}"
        )));
    }
    let stride = if plan.by_half { (len - 1) / (window - 1) } else { 1 };
    let span = (window - 1) * stride;
    let start = range.start + r.random_range(0..=(len - 1 - span));
    Ok(Window {
        item,
        frames: (0..window).map(|k| start + k * stride).collect(),
        dt: data.dt(item) * stride as f64,
    })
}

/// Per-iteration values written to the loss CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub loss: f64,
    pub terms: Vec<f64>,
}

/// Label-free statistics of held-out outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Periodic {
    pub iteration: usize,
    /// Population std of held-out outputs (one per network).
    pub output_std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub term_names: Vec<String>,
    pub steps: Vec<Step>,
    pub periodic: Vec<Periodic>,
    /// Wall-clock seconds per iteration; not part of the loss CSV.
    pub seconds: Vec<f64>,
    /// Ground-truth reads made through the guard during training.
    pub truth_reads: usize,
    /// Largest relative error of the start-up gradient check.
    pub gradcheck_error: Option<f64>,
    pub checkpoint: Option<std::path::PathBuf>,
}

impl RunRecord {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// `iteration,loss,<terms>` with shortest round-trip float formatting.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("iteration,loss");
        for n in &self.term_names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for (i, st) in self.steps.iter().enumerate() {
            let _ = write!(s, "{i},{}", st.loss);
            for t in &st.terms {
                let _ = write!(s, ",{t}");
            }
            s.push('\n');
        }
        s
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("iteration,output_std\n");
        for p in &self.periodic {
            let v: Vec<String> = p.output_std.iter().map(f64::to_string).collect();
            let _ = writeln!(s, "{},{}", p.iteration, v.join(";"));
        }
        s
    }

    pub fn mean_seconds(&self) -> f64 {
        if self.seconds.is_empty() {
            0.0
        } else {
            self.seconds.iter().sum::<f64>() / self.seconds.len() as f64
        }
    }
}

fn term_names(cfg: &TrainConfig) -> Vec<String> {
    let names: &[&str] = match (cfg.mode, cfg.experiment) {
        (TrainMode::Supervised, DatasetKind::Causal) => &["bce_peach", "bce_mario"],
        (TrainMode::Supervised, _) => &[],
        (TrainMode::Constraint, DatasetKind::FreeFall) => &[],
        (TrainMode::Constraint, DatasetKind::Walk) => &["inertial", "spread", "bounds"],
        (TrainMode::Constraint, DatasetKind::Causal) => &["implication", "h1", "h2", "h3"],
    };
    names.iter().map(|s| s.to_string()).collect()
}

/// Frames of all windows in order, as one `B·N×H×W×3` tensor.
fn window_images(data: &TruthGuard, windows: &[Window]) -> Tensor {
    batch_tensor(
        windows
            .iter()
            .flat_map(|w| w.frames.iter().map(move |&f| &data.frames(w.item)[f])),
    )
}

/// Reflection applied to a causal batch: horizontal and vertical flips,
/// each with probability one half.
fn sample_reflection(r: &mut SceneRng) -> (bool, bool) {
    (r.random_bool(0.5), r.random_bool(0.5))
}

/// A sampled training batch, independent of the model.
#[derive(Clone, Debug)]
pub enum Batch {
    Tracking { windows: Vec<Window>, images: Tensor },
    Causal {
        items: Vec<usize>,
        images: Tensor,
        reflected: Tensor,
    },
}

fn sample_batch(
    data: &TruthGuard,
    cfg: &TrainConfig,
    plan: &TrackPlan,
    r: &mut SceneRng,
) -> Result<Batch, TrainError> {
    match cfg.experiment {
        DatasetKind::Causal => {
            let items: Vec<usize> = (0..cfg.batch)
                .map(|_| plan.train_items[r.random_range(0..plan.train_items.len())])
                .collect();
            let (h, v) = sample_reflection(r);
            let images = batch_tensor(items.iter().map(|&i| data.image(i)));
            let refl: Vec<Image> = items.iter().map(|&i| data.image(i).reflected(h, v)).collect();
            Ok(Batch::Causal {
                items,
                images,
                reflected: batch_tensor(&refl),
            })
        }
        _ => {
            let windows = (0..cfg.batch)
                .map(|_| sample_window(data, plan, cfg.window, r))
                .collect::<Result<Vec<_>, _>>()?;
            let images = window_images(data, &windows);
            Ok(Batch::Tracking { windows, images })
        }
    }
}

/// Total loss and logged terms for one batch; the graph holds the
/// parameters bound in `binds` (one slice per network).
fn batch_loss(
    g: &mut Graph,
    model: &Model,
    binds: &[Vec<Var>],
    batch: &Batch,
    data: &TruthGuard,
    cfg: &TrainConfig,
    mode: Mode,
    r: &mut SceneRng,
) -> Result<(Var, Vec<Var>), TrainError> {
    match (model, batch) {
        (Model::Regression(m), Batch::Tracking { windows, images }) => {
            let x = g.constant(images.clone());
            let pred = forward_regression(g, m, &binds[0], x, mode, r)?;
            tracking_loss(g, pred, windows, data, cfg)
        }
        (Model::Pair(p), Batch::Causal {
            items,
            images,
            reflected,
        }) => {
            let x = g.constant(images.clone());
            let a = forward_pair(g, p, &binds[0], &binds[1], x, mode, r)?;
            match cfg.mode {
                TrainMode::Constraint => {
                    let xr = g.constant(reflected.clone());
                    let b = forward_pair(g, p, &binds[0], &binds[1], xr, mode, r)?;
                    let probs = CausalProbs {
                        p1: a.p1,
                        p2: a.p2,
                        p1_reflected: b.p1,
                        p2_reflected: b.p2,
                    };
                    let t = causal_loss_terms(g, &probs, &cfg.weights)?;
                    let h1 = g.add(t.reflection[0], t.reflection[1])?;
                    let h2 = g.add(t.spread[0], t.spread[1])?;
                    let h3a = g.add(t.distribution[0], t.distribution[1])?;
                    let h3 = g.add(h3a, t.distribution[2])?;
                    Ok((t.total, vec![t.implication, h1, h2, h3]))
                }
                TrainMode::Supervised => {
                    let labels: Vec<Labels> = items.iter().map(|&i| data.labels(i)).collect();
                    let y1 = labels.iter().map(|l| f64::from(u8::from(l.peach))).collect();
                    let y2 = labels.iter().map(|l| f64::from(u8::from(l.mario))).collect();
                    let b1 = bce(g, a.p1, y1)?;
                    let b2 = bce(g, a.p2, y2)?;
                    let sum = g.add(b1, b2)?;
                    Ok((g.scale(sum, 0.5), vec![b1, b2]))
                }
            }
        }
        _ => Err(TrainError::ModelMismatch("batch does not match the model".into())),
    }
}

/// Mean binary cross-entropy of probabilities `p` against 0/1 targets.
fn bce(g: &mut Graph, p: Var, y: Vec<f64>) -> Result<Var, TrainError> {
    let y = g.constant(Tensor::vector(y));
    let lp = g.ln(p);
    let q = g.one_minus(p);
    let lq = g.ln(q);
    let ny = g.one_minus(y);
    let a = g.mul(y, lp)?;
    let b = g.mul(ny, lq)?;
    let s = g.add(a, b)?;
    let m = g.mean(s);
    Ok(g.neg(m))
}

fn tracking_loss(
    g: &mut Graph,
    pred: Var,
    windows: &[Window],
    data: &TruthGuard,
    cfg: &TrainConfig,
) -> Result<(Var, Vec<Var>), TrainError> {
    let n = cfg.window;
    if cfg.mode == TrainMode::Supervised {
        let truth: Vec<f64> = windows
            .iter()
            .flat_map(|w| {
                let t = data.truth(w.item);
                w.frames.iter().map(move |&f| t[f])
            })
            .collect();
        let t = g.constant(Tensor::vector(truth));
        let d = g.sub(pred, t)?;
        let a = g.abs(d);
        return Ok((g.mean(a), Vec::new()));
    }
    let mut total: Option<Var> = None;
    let mut terms: Vec<Option<Var>> = vec![None; 3];
    let accumulate = |g: &mut Graph, acc: &mut Option<Var>, v: Var| -> Result<(), TrainError> {
        *acc = Some(match *acc {
            None => v,
            Some(a) => g.add(a, v)?,
        });
        Ok(())
    };
    for (k, w) in windows.iter().enumerate() {
        let y = g.slice(pred, k * n, n)?;
        match cfg.experiment {
            DatasetKind::FreeFall => {
                let proj = ProjectionOperator::new(n, w.dt, cfg.gravity)?;
                let l = free_fall_loss(g, y, &proj)?;
                accumulate(g, &mut total, l)?;
            }
            DatasetKind::Walk => {
                let proj = ProjectionOperator::affine(n, w.dt)?;
                let t = constant_velocity_loss(g, y, &proj, &cfg.weights)?;
                accumulate(g, &mut total, t.total)?;
                for (slot, v) in terms.iter_mut().zip([t.inertial, t.spread, t.bounds]) {
                    accumulate(g, slot, v)?;
                }
            }
            DatasetKind::Causal => unreachable!("tracking loss on causal data"),
        }
    }
    let scale = 1.0 / windows.len() as f64;
    let total = g.scale(total.expect("non-empty batch"), scale);
    let terms = terms
        .into_iter()
        .flatten()
        .map(|t| g.scale(t, scale))
        .collect();
    Ok((total, terms))
}

/// Side of the inputs of the down-scaled start-up check model.
const PROBE_SIZE: usize = 14;

fn probe_arch(head: Head) -> Architecture {
    Architecture {
        head,
        input_size: PROBE_SIZE,
        channels: vec![3, 2],
        kernel: 3,
        hidden: 4,
        dropout: 0.0,
    }
}

/// Area-average a `B×S×S×3` batch down to `B×s×s×3`.
fn shrink(images: &Tensor, size: usize) -> Tensor {
    let s = images.shape();
    let (b, h, w) = (s[0], s[1], s[2]);
    let (fy, fx) = (h / size, w / size);
    let mut out = vec![0.0; b * size * size * 3];
    let d = images.data();
    let norm = (fy * fx) as f64;
    for i in 0..b {
        for r in 0..size * fy {
            for c in 0..size * fx {
                for ch in 0..3 {
                    out[((i * size + r / fy) * size + c / fx) * 3 + ch] +=
                        d[((i * h + r) * w + c) * 3 + ch] / norm;
                }
            }
        }
    }
    Tensor::new(&[b, size, size, 3], out).expect("shrunk shape")
}

/// Zero biases leave dead units and outputs of exactly one half, where the
/// assignment argmax of the causal loss ties and the loss jumps.
fn jitter_biases(model: &mut Model, seed: u64) {
    let mut r = rng::stream(seed, &[0x9B0B]);
    for set in model.param_sets_mut() {
        let biases: Vec<usize> = set
            .names()
            .enumerate()
            .filter(|(_, n)| n.ends_with(".bias"))
            .map(|(i, _)| i)
            .collect();
        for i in biases {
            for v in set.tensor_mut(i).data_mut() {
                *v = r.random_range(-0.1..0.1);
            }
        }
    }
}

/// Finite-difference check of the experiment loss through a down-scaled
/// model on the (shrunk) first batch. Returns the worst relative error.
fn startup_gradcheck(
    batch: &Batch,
    data: &TruthGuard,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    const STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];
    const TOL: f64 = 1e-4;
    let (probe, small) = match batch {
        Batch::Tracking { windows, images } => (
            Model::Regression(RegressionCNN::new(probe_arch(Head::Regression), cfg.seed)?),
            Batch::Tracking {
                windows: windows.clone(),
                images: shrink(images, PROBE_SIZE),
            },
        ),
        Batch::Causal {
            items,
            images,
            reflected,
        } => (
            Model::Pair(DetectorPair::new(probe_arch(Head::Detector), cfg.seed)?),
            Batch::Causal {
                items: items.clone(),
                images: shrink(images, PROBE_SIZE),
                reflected: shrink(reflected, PROBE_SIZE),
            },
        ),
    };
    let mut probe = probe;
    jitter_biases(&mut probe, cfg.seed);
    let sets = probe.param_sets();
    let mut worst = 0.0f64;
    for (si, set) in sets.iter().enumerate() {
        for (pi, (name, tensor)) in set.entries().iter().enumerate() {
            let build = |g: &mut Graph, v: Var| {
                let binds: Vec<Vec<Var>> = sets
                    .iter()
                    .enumerate()
                    .map(|(sj, s)| {
                        s.tensors()
                            .enumerate()
                            .map(|(pj, t)| {
                                if (sj, pj) == (si, pi) {
                                    v
                                } else {
                                    g.constant(t.clone())
                                }
                            })
                            .collect()
                    })
                    .collect();
                let mut r = rng::seeded(0);
                batch_loss(g, &probe, &binds, &small, data, cfg, Mode::Eval, &mut r)
                    .map(|(l, _)| l)
                    .map_err(|e| AutodiffError::Precondition(e.to_string()))
            };
            // A difference that straddles a ReLU or |·| kink disagrees at one
            // step but not at a smaller one; a wrong gradient fails at all.
            let mut best = f64::INFINITY;
            for step in STEPS {
                let report = check_gradients(build, tensor, step, TOL)?;
                best = best.min(report.max_rel_error);
                if report.passed {
                    break;
                }
            }
            if best >= TOL {
                return Err(TrainError::GradCheck {
                    param: name.clone(),
                    error: best,
                });
            }
            worst = worst.max(best);
        }
    }
    Ok(worst)
}

/// Population std of held-out outputs, computed without labels.
fn heldout_std(model: &Model, data: &TruthGuard, plan: &TrackPlan) -> Result<Vec<f64>, TrainError> {
    let std = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
    };
    Ok(match model {
        Model::Regression(m) => {
            let frames = tracking_eval_frames(data, plan);
            let flat: Vec<&Image> = frames.into_iter().flatten().collect();
            vec![std(&predict_regression(m, &flat)?)]
        }
        Model::Pair(p) => {
            let imgs: Vec<&Image> = plan.test_items.iter().map(|&i| data.image(i)).collect();
            let (a, b) = predict_pair(p, &imgs)?;
            vec![std(&a), std(&b)]
        }
    })
}

/// Held-out frames of every test trajectory.
pub fn tracking_eval_frames<'a>(data: &TruthGuard<'a>, plan: &TrackPlan) -> Vec<Vec<&'a Image>> {
    plan.test_items
        .iter()
        .map(|&i| {
            let f = data.frames(i);
            f[plan.test_range(f.len())].iter().collect()
        })
        .collect()
}

/// Train `model` in place. The dataset is reachable only through `data`;
/// in constraint mode no truth is read.
pub fn train(
    cfg: &TrainConfig,
    data: &TruthGuard,
    model: &mut Model,
) -> Result<RunRecord, TrainError> {
    crate::heap::retain_freed_memory();
    cfg.validate()?;
    if data.kind() != cfg.experiment {
        return Err(TrainError::KindMismatch {
            expected: cfg.experiment,
            got: data.kind(),
        });
    }
    model.check(cfg.experiment)?;
    let plan = TrackPlan::new(cfg.experiment, data.len(), cfg.holdout);
    if plan.train_items.is_empty() {
        return Err(TrainError::Config("no training items after the holdout".into()));
    }
    if plan.test_items.is_empty() {
        return Err(TrainError::Config("no held-out items to evaluate".into()));
    }
    let reads_before = data.reads();
    let mut batch_rng = rng::stream(cfg.seed, &[0xBA7C]);
    let mut drop_rng = rng::stream(cfg.seed, &[0xD809]);
    let mut states: Vec<AdamState> = model.param_sets().into_iter().map(AdamState::new).collect();
    let mut record = RunRecord {
        config: cfg.clone(),
        term_names: term_names(cfg),
        steps: Vec::with_capacity(cfg.iterations),
        periodic: Vec::new(),
        seconds: Vec::with_capacity(cfg.iterations),
        truth_reads: 0,
        gradcheck_error: None,
        checkpoint: None,
    };
    for it in 0..cfg.iterations {
        let started = Instant::now();
        let batch = sample_batch(data, cfg, &plan, &mut batch_rng)?;
        if it == 0 && cfg.gradcheck {
            record.gradcheck_error = Some(startup_gradcheck(&batch, data, cfg)?);
        }
        let mut g = Graph::with_precision(cfg.precision);
        let binds: Vec<Vec<Var>> = model.param_sets().iter().map(|p| p.bind(&mut g)).collect();
        let (loss, terms) =
            batch_loss(&mut g, model, &binds, &batch, data, cfg, Mode::Train, &mut drop_rng)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                value,
                iteration: it,
            });
        }
        let terms = terms
            .iter()
            .map(|&t| g.value(t).item())
            .collect::<Result<Vec<_>, _>>()?;
        g.backward(loss)?;
        for ((set, bound), state) in model.param_sets_mut().into_iter().zip(&binds).zip(&mut states) {
            let grads: Vec<Tensor> = bound
                .iter()
                .zip(set.tensors())
                .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            adam_step(set, &grads, state, cfg.learning_rate, &cfg.adam, it + 1).map_err(|e| match e {
                TrainError::NonFiniteGradient { param, .. } => TrainError::NonFiniteGradient {
                    param,
                    iteration: it,
                },
                other => other,
            })?;
            if cfg.precision == Precision::Single {
                for i in 0..set.len() {
                    set.tensor_mut(i).round_to_f32();
                }
            }
        }
        record.steps.push(Step { loss: value, terms });
        record.seconds.push(started.elapsed().as_secs_f64());
        if cfg.eval_every > 0 && ((it + 1) % cfg.eval_every == 0 || it + 1 == cfg.iterations) {
            record.periodic.push(Periodic {
                iteration: it + 1,
                output_std: heldout_std(model, data, &plan)?,
            });
        }
    }
    record.truth_reads = data.reads() - reads_before;
    Ok(record)
}

/// Sufficiency terms that can be dropped: walking has h1 (spread) and h2
/// (bounds); causal has h1 (reflection), h2 (spread) and h3 (distribution).
pub fn term_count(kind: DatasetKind) -> usize {
    match kind {
        DatasetKind::Walk => 2,
        DatasetKind::Causal => 3,
        DatasetKind::FreeFall => 0,
    }
}

/// Weights with the given terms (1-based) set to zero.
pub fn drop_terms(weights: &LossWeights, terms: &[usize]) -> LossWeights {
    let mut w = *weights;
    for &t in terms {
        match t {
            1 => w.gamma1 = 0.0,
            2 => w.gamma2 = 0.0,
            3 => w.gamma3 = 0.0,
            _ => {}
        }
    }
    w
}

pub fn ablation_label(terms: &[usize]) -> String {
    if terms.is_empty() {
        "full".to_string()
    } else {
        terms.iter().map(|t| format!("-h{t}")).collect()
    }
}

/// One run of an ablation study.
#[derive(Clone, Debug)]
pub struct AblationRun {
    pub dropped: Vec<usize>,
    pub label: String,
    pub record: RunRecord,
    pub model: Model,
}

/// The full run plus one run per set of dropped terms. Every run starts
/// from the same initial model and seed; up to `threads` runs execute at
/// once.
pub fn ablate(
    cfg: &TrainConfig,
    dataset: &Dataset,
    initial: &Model,
    drops: &[Vec<usize>],
    threads: usize,
) -> Result<Vec<AblationRun>, TrainError> {
    if cfg.mode != TrainMode::Constraint {
        return Err(TrainError::Config("ablations apply to constraint training".into()));
    }
    let max = term_count(cfg.experiment);
    let mut sets: Vec<Vec<usize>> = vec![Vec::new()];
    for d in drops {
        let mut d = d.clone();
        d.sort_unstable();
        d.dedup();
        if let Some(&bad) = d.iter().find(|&&t| t == 0 || t > max) {
            return Err(TrainError::Config(format!(
                "{} has no term h{bad} (terms are h1..h{max})",
                cfg.experiment
            )));
        }
        if !sets.contains(&d) {
            sets.push(d);
        }
    }
    let run = |dropped: &Vec<usize>| -> Result<AblationRun, TrainError> {
        let mut c = cfg.clone();
        c.weights = drop_terms(&cfg.weights, dropped);
        let guard = TruthGuard::new(dataset);
        let mut model = initial.clone();
        let record = train(&c, &guard, &mut model)?;
        Ok(AblationRun {
            dropped: dropped.clone(),
            label: ablation_label(dropped),
            record,
            model,
        })
    };
    let threads = threads.max(1);
    let mut out: Vec<Option<Result<AblationRun, TrainError>>> = (0..sets.len()).map(|_| None).collect();
    for (chunk_sets, chunk_out) in sets.chunks(threads).zip(out.chunks_mut(threads)) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk_sets.iter().map(|d| s.spawn(|| run(d))).collect();
            for (slot, h) in chunk_out.iter_mut().zip(handles) {
                *slot = Some(h.join().expect("ablation worker panicked"));
            }
        });
    }
    out.into_iter().map(|r| r.expect("every run joined")).collect()
}

/// Worker count from `CF_THREADS`, defaulting to the available cores.
pub fn thread_budget() -> usize {
    std::env::var("CF_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Population std of held-out outputs: the degeneracy metric of ablations.
/// Frames are read without touching truth.
pub fn output_std(model: &Model, data: &Dataset, holdout: usize) -> Result<Vec<f64>, TrainError> {
    let guard = TruthGuard::new(data);
    let plan = TrackPlan::new(data.kind(), data.len(), holdout);
    heldout_std(model, &guard, &plan)
}
