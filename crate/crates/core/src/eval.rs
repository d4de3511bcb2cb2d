//! Evaluation protocols and reports.

use std::fmt::Write as _;

use rand::Rng;
use thiserror::Error;

use crate::models::{predict_pair, predict_regression, DetectorPair, ModelError, RegressionCNN};
use crate::scenes::{rng, Dataset, DatasetKind, Split};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} predictions for {1} targets")]
    Length(usize, usize),
    #[error("need at least {need} points, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("truth is constant; correlation is undefined")]
    ConstantTruth,
    #[error("empty evaluation set")]
    Empty,
    #[error("trials must be at least {0}")]
    Trials(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Pearson correlation. A constant `pred` scores 0.
pub fn pearson(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::Length(pred.len(), truth.len()));
    }
    if pred.len() < 2 {
        return Err(EvalError::TooShort {
            need: 2,
            got: pred.len(),
        });
    }
    let (mp, mt) = (mean(pred), mean(truth));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        let (dp, dt) = (p - mp, t - mt);
        sxy += dp * dt;
        sxx += dp * dp;
        syy += dt * dt;
    }
    if syy == 0.0 {
        return Err(EvalError::ConstantTruth);
    }
    if sxx == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Least-squares map `α·pred + β ≈ truth` for one trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineFit {
    pub alpha: f64,
    pub beta: f64,
    /// Constant predictions: `α = 0`, `β = mean(truth)`.
    pub degenerate: bool,
}

pub fn fit_affine(pred: &[f64], truth: &[f64]) -> Result<AffineFit, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::Length(pred.len(), truth.len()));
    }
    if pred.len() < 2 {
        return Err(EvalError::TooShort {
            need: 2,
            got: pred.len(),
        });
    }
    let (mp, mt) = (mean(pred), mean(truth));
    let sxx: f64 = pred.iter().map(|p| (p - mp) * (p - mp)).sum();
    if sxx == 0.0 {
        return Ok(AffineFit {
            alpha: 0.0,
            beta: mt,
            degenerate: true,
        });
    }
    let sxy: f64 = pred.iter().zip(truth).map(|(p, t)| (p - mp) * (t - mt)).sum();
    let alpha = sxy / sxx;
    Ok(AffineFit {
        alpha,
        beta: mt - alpha * mp,
        degenerate: false,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineFitCorrelation {
    pub fits: Vec<AffineFit>,
    pub correlation: f64,
}

/// Fit each trajectory separately, then correlate the concatenated mapped
/// predictions with the concatenated truth.
pub fn affine_fit_correlation(
    pred: &[Vec<f64>],
    truth: &[Vec<f64>],
) -> Result<AffineFitCorrelation, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::Length(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut fits = Vec::with_capacity(pred.len());
    let mut mapped = Vec::new();
    let mut all_truth = Vec::new();
    for (p, t) in pred.iter().zip(truth) {
        let f = fit_affine(p, t)?;
        mapped.extend(p.iter().map(|v| f.alpha * v + f.beta));
        all_truth.extend_from_slice(t);
        fits.push(f);
    }
    let correlation = pearson(&mapped, &all_truth)?;
    Ok(AffineFitCorrelation { fits, correlation })
}

/// How tracking predictions are scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Raw predictions against truth over all held-out frames.
    Pearson,
    /// Per-trajectory affine fit first.
    AffineFit,
}

impl Protocol {
    pub fn score(self, pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64, EvalError> {
        match self {
            Protocol::Pearson => {
                let p: Vec<f64> = pred.concat();
                let t: Vec<f64> = truth.concat();
                pearson(&p, &t)
            }
            Protocol::AffineFit => Ok(affine_fit_correlation(pred, truth)?.correlation),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Baseline {
    /// Mean |correlation| over trials.
    pub mean: f64,
    pub std_error: f64,
    pub trials: usize,
}

pub const MIN_TRIALS: usize = 1000;

/// Expected |correlation| of uniform random predictions scored with
/// `protocol` against `truth`.
pub fn random_baseline(
    truth: &[Vec<f64>],
    protocol: Protocol,
    trials: usize,
    seed: u64,
) -> Result<Baseline, EvalError> {
    if trials < MIN_TRIALS {
        return Err(EvalError::Trials(MIN_TRIALS));
    }
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut r = rng::seeded(seed);
    let mut values = Vec::with_capacity(trials);
    for _ in 0..trials {
        let pred: Vec<Vec<f64>> = truth
            .iter()
            .map(|t| (0..t.len()).map(|_| r.random::<f64>()).collect())
            .collect();
        values.push(protocol.score(&pred, truth)?.abs());
    }
    let m = mean(&values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (trials - 1) as f64;
    Ok(Baseline {
        mean: m,
        std_error: (var / trials as f64).sqrt(),
        trials,
    })
}

/// Per-trajectory row of a tracking report.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub index: usize,
    pub frames: usize,
    pub correlation: f64,
    pub fit: AffineFit,
}

/// Labelled aggregate value, e.g. the supervised model or a paper number.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub value: f64,
    /// Paper values come from real video and are context, not targets.
    pub paper: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackingReport {
    pub experiment: String,
    pub protocol: Protocol,
    pub rows: Vec<TrajectoryRow>,
    pub aggregate: f64,
    pub comparisons: Vec<ComparisonRow>,
}

/// Score held-out trajectories; `index[i]` names trajectory `i` in the
/// dataset.
pub fn tracking_report(
    experiment: &str,
    protocol: Protocol,
    index: &[usize],
    pred: &[Vec<f64>],
    truth: &[Vec<f64>],
) -> Result<TrackingReport, EvalError> {
    if pred.len() != truth.len() || index.len() != pred.len() {
        return Err(EvalError::Length(pred.len(), truth.len()));
    }
    let mut rows = Vec::with_capacity(pred.len());
    for ((&i, p), t) in index.iter().zip(pred).zip(truth) {
        let fit = fit_affine(p, t)?;
        let correlation = match protocol {
            Protocol::Pearson => pearson(p, t)?,
            Protocol::AffineFit => {
                let m: Vec<f64> = p.iter().map(|v| fit.alpha * v + fit.beta).collect();
                pearson(&m, t)?
            }
        };
        rows.push(TrajectoryRow {
            index: i,
            frames: p.len(),
            correlation,
            fit,
        });
    }
    Ok(TrackingReport {
        experiment: experiment.to_string(),
        protocol,
        aggregate: protocol.score(pred, truth)?,
        rows,
        comparisons: Vec::new(),
    })
}

/// Paper numbers printed next to synthetic results.
pub fn paper_rows(experiment: &str) -> Vec<ComparisonRow> {
    let row = |label: &str, value| ComparisonRow {
        label: label.to_string(),
        value,
        paper: true,
    };
    match experiment {
        "freefall" => vec![
            row("paper real-data constraint", 0.901),
            row("paper real-data supervised", 0.945),
            row("paper real-data random", 0.121),
        ],
        "walk" => vec![row("paper real-data constraint", 0.954)],
        _ => Vec::new(),
    }
}

impl TrackingReport {
    /// Average of the per-trajectory correlations; unlike the pooled
    /// aggregate it is near zero for a constant model.
    pub fn mean_trajectory_correlation(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.correlation).sum::<f64>() / self.rows.len() as f64
    }

    pub fn comparison(&self, label: &str) -> Option<f64> {
        self.comparisons
            .iter()
            .find(|c| c.label == label)
            .map(|c| c.value)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,frames,correlation,alpha,beta,degenerate\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "trajectory {},{},{},{},{},{}",
                r.index, r.frames, r.correlation, r.fit.alpha, r.fit.beta, r.fit.degenerate
            );
        }
        let total: usize = self.rows.iter().map(|r| r.frames).sum();
        let _ = writeln!(s, "aggregate,{total},{},,,", self.aggregate);
        for c in &self.comparisons {
            let _ = writeln!(s, "{},,{},,,", c.label, c.value);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let proto = match self.protocol {
            Protocol::Pearson => "Pearson correlation of raw outputs with pixel truth",
            Protocol::AffineFit => "correlation after a per-trajectory affine fit",
        };
        let _ = writeln!(s, "{} evaluation: {proto}", self.experiment);
        let _ = writeln!(s, "{:>10} {:>6} {:>8} {:>10} {:>10}", "trajectory", "frames", "r", "alpha", "beta");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>10} {:>6} {:>8.4} {:>10.4} {:>10.4}{}",
                r.index,
                r.frames,
                r.correlation,
                r.fit.alpha,
                r.fit.beta,
                if r.fit.degenerate { "  (constant output)" } else { "" }
            );
        }
        let _ = writeln!(s, "aggregate correlation: {:.4}", self.aggregate);
        let _ = writeln!(
            s,
            "mean per-trajectory correlation: {:.4}",
            self.mean_trajectory_correlation()
        );
        write_comparisons(&mut s, &self.comparisons);
        s
    }
}

fn write_comparisons(s: &mut String, rows: &[ComparisonRow]) {
    for c in rows.iter().filter(|c| !c.paper) {
        let _ = writeln!(s, "{}: {:.4}", c.label, c.value);
    }
    let paper: Vec<_> = rows.iter().filter(|c| c.paper).collect();
    if !paper.is_empty() {
        let _ = writeln!(s, "context only, measured on the paper's real video (not a target here):");
        for c in paper {
            let _ = writeln!(s, "  {}: {:.1}%", c.label, 100.0 * c.value);
        }
    }
}

/// 2×2 counts indexed `[truth][prediction]`.
pub type Confusion = [[usize; 2]; 2];

#[derive(Clone, Debug, PartialEq)]
pub struct CausalReport {
    pub items: usize,
    /// Peach and Mario accuracy after polarity resolution.
    pub accuracy: [f64; 2],
    pub joint_accuracy: f64,
    /// Fraction of items with `ŷ1 ∧ ¬ŷ2`.
    pub violation_rate: f64,
    pub confusion: [Confusion; 2],
    /// `true` where a detector's output was negated.
    pub flipped: [bool; 2],
    pub comparisons: Vec<ComparisonRow>,
}

fn threshold(p: &[f64], flip: bool) -> Vec<bool> {
    p.iter().map(|&v| (v > 0.5) != flip).collect()
}

/// Per detector, negate the thresholded output when that is more accurate
/// on the given (training) labels.
pub fn resolve_polarity(p1: &[f64], p2: &[f64], labels: &[(bool, bool)]) -> [bool; 2] {
    let acc = |p: &[f64], pick: fn(&(bool, bool)) -> bool| {
        let hits = p
            .iter()
            .zip(labels)
            .filter(|(&v, l)| (v > 0.5) == pick(l))
            .count();
        2 * hits < p.len()
    };
    [acc(p1, |l| l.0), acc(p2, |l| l.1)]
}

/// Thresholded metrics on held-out scenes; `labels[i]` is (peach, mario).
pub fn causal_metrics(
    p1: &[f64],
    p2: &[f64],
    labels: &[(bool, bool)],
    flipped: [bool; 2],
) -> Result<CausalReport, EvalError> {
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    if p1.len() != labels.len() {
        return Err(EvalError::Length(p1.len(), labels.len()));
    }
    if p2.len() != labels.len() {
        return Err(EvalError::Length(p2.len(), labels.len()));
    }
    let y1 = threshold(p1, flipped[0]);
    let y2 = threshold(p2, flipped[1]);
    let mut confusion = [[[0usize; 2]; 2]; 2];
    let (mut joint, mut bad) = (0, 0);
    for ((&a, &b), &(t1, t2)) in y1.iter().zip(&y2).zip(labels) {
        confusion[0][usize::from(t1)][usize::from(a)] += 1;
        confusion[1][usize::from(t2)][usize::from(b)] += 1;
        joint += usize::from(a == t1 && b == t2);
        bad += usize::from(a && !b);
    }
    let n = labels.len() as f64;
    let acc = |c: &Confusion| (c[0][0] + c[1][1]) as f64 / n;
    Ok(CausalReport {
        items: labels.len(),
        accuracy: [acc(&confusion[0]), acc(&confusion[1])],
        joint_accuracy: joint as f64 / n,
        violation_rate: bad as f64 / n,
        confusion,
        flipped,
        comparisons: Vec::new(),
    })
}

impl CausalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "items,{}", self.items);
        let _ = writeln!(s, "peach_accuracy,{}", self.accuracy[0]);
        let _ = writeln!(s, "mario_accuracy,{}", self.accuracy[1]);
        let _ = writeln!(s, "joint_accuracy,{}", self.joint_accuracy);
        let _ = writeln!(s, "violation_rate,{}", self.violation_rate);
        for (k, name) in ["peach", "mario"].iter().enumerate() {
            let c = &self.confusion[k];
            let _ = writeln!(s, "{name}_flipped,{}", self.flipped[k]);
            let _ = writeln!(s, "{name}_tn,{}", c[0][0]);
            let _ = writeln!(s, "{name}_fp,{}", c[0][1]);
            let _ = writeln!(s, "{name}_fn,{}", c[1][0]);
            let _ = writeln!(s, "{name}_tp,{}", c[1][1]);
        }
        for c in &self.comparisons {
            let _ = writeln!(s, "{},{}", c.label, c.value);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "causal evaluation on {} held-out scenes", self.items);
        for (k, name) in ["peach", "mario"].iter().enumerate() {
            let c = &self.confusion[k];
            let _ = writeln!(
                s,
                "{name:>6}: accuracy {:.4}{}  tn {} fp {} fn {} tp {}",
                self.accuracy[k],
                if self.flipped[k] { " (negated)" } else { "" },
                c[0][0],
                c[0][1],
                c[1][0],
                c[1][1]
            );
        }
        let _ = writeln!(s, "joint accuracy: {:.4}", self.joint_accuracy);
        let _ = writeln!(s, "implication violations: {:.4}", self.violation_rate);
        write_comparisons(&mut s, &self.comparisons);
        s
    }
}


/// Held-out predictions and truth of a tracking model: all frames of the
/// test trajectories for free fall, second halves for walking.
pub fn tracking_predictions(
    model: &RegressionCNN,
    data: &Dataset,
    holdout: usize,
) -> Result<(Vec<usize>, Vec<Vec<f64>>, Vec<Vec<f64>>), ModelError> {
    let tracks = data.trajectories().ok_or_else(|| {
        ModelError::Architecture(format!("{} is not a tracking dataset", data.kind()))
    })?;
    let split = Split::for_dataset(data.kind(), tracks.len(), holdout);
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for &i in &split.test {
        let t = &tracks[i];
        let n = t.len();
        let range = if split.by_half { n / 2..n } else { 0..n };
        let frames: Vec<_> = t.frames[range.clone()].iter().collect();
        pred.push(predict_regression(model, &frames)?);
        truth.push(t.truth()[range].to_vec());
    }
    Ok((split.test, pred, truth))
}

/// Scoring protocol of a tracking experiment.
pub fn protocol_for(kind: DatasetKind) -> Protocol {
    match kind {
        DatasetKind::Walk => Protocol::AffineFit,
        _ => Protocol::Pearson,
    }
}

/// Detector outputs on the train and test scenes with their labels.
pub struct CausalOutputs {
    pub train: (Vec<f64>, Vec<f64>, Vec<(bool, bool)>),
    pub test: (Vec<f64>, Vec<f64>, Vec<(bool, bool)>),
}

pub fn causal_outputs(
    pair: &DetectorPair,
    data: &Dataset,
    holdout: usize,
) -> Result<CausalOutputs, ModelError> {
    let scenes = data.scenes().ok_or_else(|| {
        ModelError::Architecture(format!("{} is not a causal dataset", data.kind()))
    })?;
    let split = Split::for_dataset(data.kind(), scenes.len(), holdout);
    let run = |idx: &[usize]| -> Result<_, ModelError> {
        let imgs: Vec<_> = idx.iter().map(|&i| &scenes[i].image).collect();
        let (a, b) = predict_pair(pair, &imgs)?;
        let l = idx
            .iter()
            .map(|&i| (scenes[i].labels.peach, scenes[i].labels.mario))
            .collect();
        Ok((a, b, l))
    };
    Ok(CausalOutputs {
        train: run(&split.train)?,
        test: run(&split.test)?,
    })
}

/// Polarity from the training scenes, metrics on the held-out ones.
pub fn causal_report(outputs: &CausalOutputs) -> Result<CausalReport, EvalError> {
    let (a, b, l) = &outputs.train;
    let flipped = resolve_polarity(a, b, l);
    let (a, b, l) = &outputs.test;
    causal_metrics(a, b, l, flipped)
}

/// Random-baseline trials used by reports.
pub const BASELINE_TRIALS: usize = 1000;

/// Held-out report of a tracking model with the random baseline and the
/// paper's context rows.
pub fn evaluate_tracking(
    model: &RegressionCNN,
    data: &Dataset,
    holdout: usize,
    seed: u64,
) -> Result<TrackingReport, EvalError> {
    let kind = data.kind();
    let protocol = protocol_for(kind);
    let (index, pred, truth) = tracking_predictions(model, data, holdout)?;
    let mut report = tracking_report(kind.name(), protocol, &index, &pred, &truth)?;
    let baseline = random_baseline(&truth, protocol, BASELINE_TRIALS, seed)?;
    report.comparisons.push(ComparisonRow {
        label: "random".to_string(),
        value: baseline.mean,
        paper: false,
    });
    report.comparisons.extend(paper_rows(kind.name()));
    Ok(report)
}

/// Held-out report of a detector pair; polarity comes from the training
/// scenes.
pub fn evaluate_causal(
    pair: &DetectorPair,
    data: &Dataset,
    holdout: usize,
) -> Result<CausalReport, EvalError> {
    causal_report(&causal_outputs(pair, data, holdout)?)
}
