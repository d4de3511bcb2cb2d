use super::{AutodiffError, Graph, Precision, Tensor, Var};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - b| / max(|a|, |b|, floor)`
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Denominator floor for a check of `f` at `step`. A central difference
/// carries rounding noise of about `ε·|f| / step`, times the number of
/// terms accumulated into `f` (allowed up to 10). Gradients smaller than
/// that noise divided by the tolerance, exact zeros included, are compared
/// in absolute terms.
pub fn noise_floor(value: f64, step: f64, tolerance: f64, precision: Precision) -> f64 {
    let eps = match precision {
        Precision::Double => f64::EPSILON,
        Precision::Single => f64::from(f32::EPSILON),
    };
    (10.0 * eps * value.abs().max(1.0) / (step * tolerance)).max(1e-8)
}

fn evaluate<F>(build: &F, input: &Tensor, precision: Precision) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::with_precision(precision);
    let x = g.param(input.clone());
    let out = build(&mut g, x)?;
    g.value(out).item()
}

/// Compare the tape gradient of `build(input)` with central finite
/// differences of step `step` on every coordinate of `input`.
///
/// `build` must be deterministic; two forward passes that disagree are
/// rejected.
pub fn check_gradients<F>(
    build: F,
    input: &Tensor,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, AutodiffError>,
{
    check_gradients_with(build, input, step, tolerance, Precision::Double)
}

pub fn check_gradients_with<F>(
    build: F,
    input: &Tensor,
    step: f64,
    tolerance: f64,
    precision: Precision,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, AutodiffError>,
{
    if step <= 0.0 {
        return Err(AutodiffError::Precondition(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut g = Graph::with_precision(precision);
    let x = g.param(input.clone());
    let out = build(&mut g, x)?;
    let first = g.value(out).item()?;
    g.backward(out)?;
    let analytic = match g.grad(x) {
        Some(t) => t.data().to_vec(),
        None => vec![0.0; input.len()],
    };

    let second = evaluate(&build, input, precision)?;
    if first.to_bits() != second.to_bits() {
        return Err(AutodiffError::NonDeterministic { first, second });
    }

    let mut numeric = Vec::with_capacity(input.len());
    let mut probe = input.clone();
    for i in 0..input.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = evaluate(&build, &probe, precision)?;
        probe.data_mut()[i] = orig - step;
        let down = evaluate(&build, &probe, precision)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * step));
    }

    let floor = noise_floor(first, step, tolerance, precision);
    let (worst, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
        worst,
        tolerance,
        passed: max_rel_error < tolerance,
    })
}
