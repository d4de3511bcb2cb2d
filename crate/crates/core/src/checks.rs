//! Registered finite-difference gradient checks: every graph op, every
//! constraint loss, and the losses composed with down-scaled models.

use std::fmt::Write as _;

use rand::Rng;

use crate::autodiff::{check_gradients_with, AutodiffError, Graph, Mode, Precision, Tensor, Var};
use crate::constraints::{
    causal_loss_terms, constant_velocity_loss, free_fall_loss, CausalProbs, LossWeights,
    ProjectionOperator, GRAVITY,
};
use crate::models::{
    forward_pair, forward_regression, Architecture, DetectorPair, Head, ParamSet, RegressionCNN,
};
use crate::scenes::rng::{self, SceneRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Losses,
    Models,
    All,
}

impl Scope {
    fn includes(self, suite: Scope) -> bool {
        self == Scope::All || self == suite
    }
}

impl std::str::FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ops" => Ok(Scope::Ops),
            "losses" => Ok(Scope::Losses),
            "models" => Ok(Scope::Models),
            "all" => Ok(Scope::All),
            other => Err(format!(
                "unknown scope '{other}' (expected ops|losses|models|all)"
            )),
        }
    }
}

/// Step and tolerance per precision. Rounding every value to f32 leaves
/// central differences with about 1e-7 relative noise, so single precision
/// uses a larger step and a 1e-2 tolerance.
pub fn settings(precision: Precision) -> (f64, f64) {
    match precision {
        Precision::Double => (1e-5, 1e-4),
        Precision::Single => (1e-3, 1e-2),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub suite: &'static str,
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn format_table(outcomes: &[CheckOutcome], precision: Precision) -> String {
    let (step, tol) = settings(precision);
    let mut s = format!(
        "gradient checks ({} precision, step {step:e}, tolerance {tol:e})\n",
        precision.name()
    );
    for o in outcomes {
        let _ = writeln!(
            s,
            "{:<7} {:<34} {:>10.3e}  {}",
            o.suite,
            o.name,
            o.max_rel_error,
            if o.passed { "pass" } else { "FAIL" }
        );
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    let _ = writeln!(s, "{} checks, {failed} failed", outcomes.len());
    s
}

type Builder<'a> = Box<dyn Fn(&mut Graph, Var) -> Result<Var, AutodiffError> + 'a>;

struct Case<'a> {
    name: String,
    input: Tensor,
    build: Builder<'a>,
}

/// Values with magnitude in [0.2, 1.2] and random sign: clear of the
/// ReLU and |·| kinks at any step used here.
fn signed(shape: &[usize], r: &mut SceneRng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.random_range(0.2..1.2);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut SceneRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).expect("shape")
}

/// `Σ wᵢ yᵢ` with fixed random weights, so every output coordinate
/// contributes a distinct gradient.
fn weighted(g: &mut Graph, y: Var, seed: u64) -> Result<Var, AutodiffError> {
    let n = g.value(y).len();
    let flat = g.reshape(y, &[n])?;
    let w = g.constant(uniform(&[n], 0.5, 1.5, &mut rng::seeded(seed)));
    let p = g.mul(flat, w)?;
    Ok(g.sum(p))
}

fn op_cases<'a>() -> Vec<Case<'a>> {
    let mut r = rng::seeded(0x0905);
    let mut cases: Vec<Case> = Vec::new();
    let mut add = |name: &str, input: Tensor, build: Builder<'a>| {
        cases.push(Case {
            name: name.to_string(),
            input,
            build,
        })
    };
    let kernel = signed(&[3, 3, 2, 3], &mut r);
    let bias = signed(&[3], &mut r);
    let image = signed(&[2, 5, 5, 2], &mut r);
    {
        let (k, b) = (kernel.clone(), bias.clone());
        add(
            "conv2d.input",
            image.clone(),
            Box::new(move |g, x| {
                let kv = g.constant(k.clone());
                let bv = g.constant(b.clone());
                let y = g.conv2d(x, kv, bv)?;
                weighted(g, y, 1)
            }),
        );
    }
    {
        let (im, b) = (image.clone(), bias.clone());
        add(
            "conv2d.kernel",
            kernel.clone(),
            Box::new(move |g, k| {
                let x = g.constant(im.clone());
                let bv = g.constant(b.clone());
                let y = g.conv2d(x, k, bv)?;
                weighted(g, y, 1)
            }),
        );
    }
    {
        let (im, k) = (image.clone(), kernel.clone());
        add(
            "conv2d.bias",
            bias,
            Box::new(move |g, b| {
                let x = g.constant(im.clone());
                let kv = g.constant(k.clone());
                let y = g.conv2d(x, kv, b)?;
                weighted(g, y, 1)
            }),
        );
    }
    add(
        "maxpool2",
        uniform(&[2, 4, 6, 2], -1.0, 1.0, &mut r),
        Box::new(|g, x| {
            let y = g.maxpool2(x)?;
            weighted(g, y, 2)
        }),
    );
    let w = signed(&[4, 6], &mut r);
    let b = signed(&[4], &mut r);
    let xin = signed(&[3, 6], &mut r);
    {
        let (w, b) = (w.clone(), b.clone());
        add(
            "dense.input",
            xin.clone(),
            Box::new(move |g, x| {
                let wv = g.constant(w.clone());
                let bv = g.constant(b.clone());
                let y = g.dense(x, wv, bv)?;
                weighted(g, y, 3)
            }),
        );
    }
    {
        let (xin, b) = (xin.clone(), b.clone());
        add(
            "dense.weight",
            w.clone(),
            Box::new(move |g, wv| {
                let x = g.constant(xin.clone());
                let bv = g.constant(b.clone());
                let y = g.dense(x, wv, bv)?;
                weighted(g, y, 3)
            }),
        );
    }
    {
        let (xin, w) = (xin, w);
        add(
            "dense.bias",
            b,
            Box::new(move |g, bv| {
                let x = g.constant(xin.clone());
                let wv = g.constant(w.clone());
                let y = g.dense(x, wv, bv)?;
                weighted(g, y, 3)
            }),
        );
    }
    let m = signed(&[4, 5], &mut r);
    {
        let m = m.clone();
        add(
            "matvec.vector",
            signed(&[5], &mut r),
            Box::new(move |g, v| {
                let mv = g.constant(m.clone());
                let y = g.matvec(mv, v)?;
                weighted(g, y, 4)
            }),
        );
    }
    {
        let v = signed(&[5], &mut r);
        add(
            "matvec.matrix",
            m,
            Box::new(move |g, mv| {
                let vv = g.constant(v.clone());
                let y = g.matvec(mv, vv)?;
                weighted(g, y, 4)
            }),
        );
    }
    type Unary = fn(&mut Graph, Var) -> Var;
    let unary: [(&str, Unary, bool); 8] = [
        ("relu", |g, x| g.relu(x), false),
        ("sigmoid", |g, x| g.sigmoid(x), false),
        ("abs", |g, x| g.abs(x), false),
        ("neg", |g, x| g.neg(x), false),
        ("ln", |g, x| g.ln(x), true),
        ("scale", |g, x| g.scale(x, -2.5), false),
        ("add_scalar", |g, x| g.add_scalar(x, 0.75), false),
        ("one_minus", |g, x| g.one_minus(x), false),
    ];
    for (name, f, positive) in unary {
        let input = if positive {
            uniform(&[7], 0.2, 2.0, &mut r)
        } else {
            signed(&[7], &mut r)
        };
        add(
            name,
            input,
            Box::new(move |g, x| {
                let y = f(g, x);
                weighted(g, y, 5)
            }),
        );
    }
    type Binary = fn(&mut Graph, Var, Var) -> Result<Var, AutodiffError>;
    let binary: [(&str, Binary); 3] = [
        ("add", |g, a, b| g.add(a, b)),
        ("sub", |g, a, b| g.sub(a, b)),
        ("mul", |g, a, b| g.mul(a, b)),
    ];
    for (name, f) in binary {
        let other = signed(&[6], &mut r);
        let o2 = other.clone();
        add(
            &format!("{name}.lhs"),
            signed(&[6], &mut r),
            Box::new(move |g, x| {
                let o = g.constant(other.clone());
                let y = f(g, x, o)?;
                weighted(g, y, 6)
            }),
        );
        add(
            &format!("{name}.rhs"),
            signed(&[6], &mut r),
            Box::new(move |g, x| {
                let o = g.constant(o2.clone());
                let y = f(g, o, x)?;
                weighted(g, y, 6)
            }),
        );
    }
    type Reduce = fn(&mut Graph, Var) -> Var;
    let reductions: [(&str, Reduce); 4] = [
        ("sum", |g, x| g.sum(x)),
        ("mean", |g, x| g.mean(x)),
        ("max", |g, x| g.max(x)),
        ("std", |g, x| g.std(x)),
    ];
    for (name, f) in reductions {
        add(
            name,
            uniform(&[6], -1.0, 1.0, &mut r),
            Box::new(move |g, x| {
                // square first so the reduction sees a non-linear input
                let sq = g.mul(x, x)?;
                let y = f(g, sq);
                let z = f(g, x);
                g.add(y, z)
            }),
        );
    }
    add(
        "dropout",
        signed(&[12], &mut r),
        Box::new(|g, x| {
            let mut dr = rng::seeded(9);
            let y = g.dropout(x, 0.5, Mode::Train, &mut dr)?;
            weighted(g, y, 7)
        }),
    );
    add(
        "reshape",
        signed(&[2, 3, 2], &mut r),
        Box::new(|g, x| {
            let y = g.reshape(x, &[3, 4])?;
            let c = g.column(y, 1)?;
            let s = g.mul(c, c)?;
            let t = weighted(g, y, 8)?;
            let u = g.sum(s);
            g.add(t, u)
        }),
    );
    add(
        "slice",
        signed(&[9], &mut r),
        Box::new(|g, x| {
            let y = g.slice(x, 2, 5)?;
            weighted(g, y, 9)
        }),
    );
    add(
        "concat",
        signed(&[5], &mut r),
        Box::new(|g, x| {
            let sq = g.mul(x, x)?;
            let y = g.concat(&[x, sq, x])?;
            weighted(g, y, 10)
        }),
    );
    add(
        "stack_columns+column",
        signed(&[3, 4], &mut r),
        Box::new(|g, x| {
            let c0 = g.column(x, 0)?;
            let c3 = g.column(x, 3)?;
            let sq = g.mul(c3, c3)?;
            let y = g.stack_columns(&[c0, sq, c0])?;
            weighted(g, y, 11)
        }),
    );
    add(
        "select_cells",
        signed(&[2, 3, 3, 4], &mut r),
        Box::new(|g, x| {
            let y = g.select_cells(x, &[(1, 2), (0, 0)])?;
            let sq = g.mul(y, y)?;
            let a = weighted(g, sq, 12)?;
            let b = weighted(g, y, 13)?;
            g.add(a, b)
        }),
    );
    cases
}

fn to_ad(e: impl std::fmt::Display) -> AutodiffError {
    AutodiffError::Precondition(e.to_string())
}

fn loss_cases<'a>() -> Vec<Case<'a>> {
    let mut r = rng::seeded(0x1055);
    let mut cases = Vec::new();
    let proj = ProjectionOperator::new(5, 0.1, GRAVITY).expect("projection");
    cases.push(Case {
        name: "free_fall_loss".into(),
        input: uniform(&[5], 0.0, 3.0, &mut r),
        build: Box::new(move |g, y| free_fall_loss(g, y, &proj).map_err(to_ad)),
    });
    let affine = ProjectionOperator::affine(5, 0.1).expect("projection");
    // one value above and one below the range so the bounds term is active
    cases.push(Case {
        name: "constant_velocity_loss".into(),
        input: Tensor::vector(vec![-0.7, 3.1, 4.4, 8.2, 11.3]),
        build: Box::new(move |g, y| {
            Ok(constant_velocity_loss(g, y, &affine, &LossWeights::walk())
                .map_err(to_ad)?
                .total)
        }),
    });
    let m = 6;
    cases.push(Case {
        name: "causal_loss".into(),
        input: uniform(&[4 * m], 0.05, 0.95, &mut r),
        build: Box::new(move |g, x| {
            let probs = CausalProbs {
                p1: g.slice(x, 0, m)?,
                p2: g.slice(x, m, m)?,
                p1_reflected: g.slice(x, 2 * m, m)?,
                p2_reflected: g.slice(x, 3 * m, m)?,
            };
            Ok(causal_loss_terms(g, &probs, &LossWeights::causal())
                .map_err(to_ad)?
                .total)
        }),
    });
    cases
}

fn bind_with(g: &mut Graph, params: &ParamSet, probe: Option<(usize, Var)>) -> Vec<Var> {
    params
        .tensors()
        .enumerate()
        .map(|(i, t)| match probe {
            Some((k, v)) if k == i => v,
            _ => g.constant(t.clone()),
        })
        .collect()
}

fn micro(head: Head, input_size: usize, hidden: usize) -> Architecture {
    Architecture {
        head,
        input_size,
        channels: vec![3, 2],
        kernel: 3,
        hidden,
        dropout: 0.0,
    }
}

fn images(count: usize, size: usize, r: &mut SceneRng) -> Tensor {
    uniform(&[count, size, size, 3], 0.0, 1.0, r)
}

fn flip_columns(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (b, h, w) = (s[0], s[1], s[2]);
    let mut d = vec![0.0; x.len()];
    for i in 0..b * h {
        for c in 0..w {
            for ch in 0..3 {
                d[(i * w + c) * 3 + ch] = x.data()[(i * w + (w - 1 - c)) * 3 + ch];
            }
        }
    }
    Tensor::new(s, d).expect("shape")
}

/// Biases are drawn away from zero so no unit sits exactly on a kink and
/// no probability sits exactly on the 0.5 tie of the assignment argmax.
fn jitter(params: &mut ParamSet, r: &mut SceneRng) {
    for i in 0..params.len() {
        if params.names().nth(i).is_some_and(|n| n.ends_with(".bias")) {
            let t = params.tensor_mut(i);
            let shape = t.shape().to_vec();
            *t = signed(&shape, r).map(|v| v * 0.2);
        }
    }
}

fn model_cases<'a>() -> Vec<Case<'a>> {
    let mut r = rng::seeded(0x30DF);
    let mut cases = Vec::new();
    let mut reg = RegressionCNN::new(micro(Head::Regression, 8, 4), 11).expect("micro model");
    jitter(&mut reg.params, &mut r);
    let x = images(3, 8, &mut r);
    let proj = ProjectionOperator::new(3, 0.1, GRAVITY).expect("projection");
    let reg = std::rc::Rc::new(reg);
    for (k, (name, t)) in reg.params.entries().iter().enumerate() {
        let (reg, x, proj) = (reg.clone(), x.clone(), proj.clone());
        cases.push(Case {
            name: format!("free_fall∘regressor {name}"),
            input: t.clone(),
            build: Box::new(move |g, v| {
                let p = bind_with(g, &reg.params, Some((k, v)));
                let xv = g.constant(x.clone());
                let mut dr = rng::seeded(0);
                let y = forward_regression(g, &reg, &p, xv, Mode::Eval, &mut dr).map_err(to_ad)?;
                free_fall_loss(g, y, &proj).map_err(to_ad)
            }),
        });
    }
    let mut pair = DetectorPair::new(micro(Head::Detector, 16, 3), 4).expect("micro pair");
    jitter(&mut pair.f1.params, &mut r);
    jitter(&mut pair.f2.params, &mut r);
    let x = images(4, 16, &mut r);
    let xr = flip_columns(&x);
    let pair = std::rc::Rc::new(pair);
    for net in 0..2 {
        let set = if net == 0 { &pair.f1.params } else { &pair.f2.params };
        for (k, (name, t)) in set.entries().iter().enumerate() {
            let (pair, x, xr) = (pair.clone(), x.clone(), xr.clone());
            cases.push(Case {
                name: format!("causal∘pair f{}.{name}", net + 1),
                input: t.clone(),
                build: Box::new(move |g, v| {
                    let probe = Some((k, v));
                    let p1 = bind_with(g, &pair.f1.params, if net == 0 { probe } else { None });
                    let p2 = bind_with(g, &pair.f2.params, if net == 1 { probe } else { None });
                    let mut dr = rng::seeded(0);
                    let xv = g.constant(x.clone());
                    let a = forward_pair(g, &pair, &p1, &p2, xv, Mode::Eval, &mut dr).map_err(to_ad)?;
                    let xrv = g.constant(xr.clone());
                    let b =
                        forward_pair(g, &pair, &p1, &p2, xrv, Mode::Eval, &mut dr).map_err(to_ad)?;
                    let probs = CausalProbs {
                        p1: a.p1,
                        p2: a.p2,
                        p1_reflected: b.p1,
                        p2_reflected: b.p2,
                    };
                    Ok(causal_loss_terms(g, &probs, &LossWeights::causal())
                        .map_err(to_ad)?
                        .total)
                }),
            });
        }
    }
    cases
}

/// Run every registered check in `scope`.
pub fn run_checks(scope: Scope, precision: Precision) -> Result<Vec<CheckOutcome>, AutodiffError> {
    let (step, tol) = settings(precision);
    let suites: [(&'static str, Scope, fn() -> Vec<Case<'static>>); 3] = [
        ("ops", Scope::Ops, op_cases),
        ("losses", Scope::Losses, loss_cases),
        ("models", Scope::Models, model_cases),
    ];
    let mut out = Vec::new();
    for (suite, s, cases) in suites {
        if !scope.includes(s) {
            continue;
        }
        for case in cases() {
            let report = check_gradients_with(&case.build, &case.input, step, tol, precision)?;
            out.push(CheckOutcome {
                suite,
                name: case.name,
                max_rel_error: report.max_rel_error,
                tolerance: tol,
                passed: report.passed,
            });
        }
    }
    Ok(out)
}
