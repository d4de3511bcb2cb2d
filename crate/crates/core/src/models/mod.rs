//! Convolutional networks: a per-frame regressor for tracking and a pair of
//! single-cell detectors for the causal scenes.

mod checkpoint;

use std::fmt;
use std::path::Path;

use rand::{Rng, RngCore};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Mode, Tensor, Var};
use crate::scenes::rng;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_VERSION};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("input shape {got:?} does not match the model (expected {expected})")]
    Input { got: Vec<usize>, expected: String },
    #[error("spatial selection: {0}")]
    Selection(String),
    #[error("checkpoint error at byte {offset}: {message}")]
    Checkpoint { offset: u64, message: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// dense → relu → dropout → dense(1), one real per image.
    Regression,
    /// pick one grid cell, dense → relu → dense(1) → sigmoid.
    Detector,
}

/// Layer sizes of a network. Each entry after the first in `channels` adds a
/// conv → relu → maxpool2 block.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub head: Head,
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl Architecture {
    pub fn regression() -> Self {
        Self {
            head: Head::Regression,
            input_size: 56,
            channels: vec![3, 16, 32, 64],
            kernel: 3,
            hidden: 128,
            dropout: 0.5,
        }
    }

    pub fn detector() -> Self {
        Self {
            head: Head::Detector,
            hidden: 32,
            dropout: 0.0,
            ..Self::regression()
        }
    }

    pub fn blocks(&self) -> usize {
        self.channels.len() - 1
    }

    /// Side of the final feature grid.
    pub fn grid(&self) -> usize {
        self.input_size >> self.blocks()
    }

    pub fn features(&self) -> usize {
        *self.channels.last().unwrap()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Architecture(m));
        if self.channels.len() < 2 || self.channels.contains(&0) {
            return bad(format!("need at least one block, got channels {:?}", self.channels));
        }
        if self.channels[0] != 3 {
            return bad(format!("input must have 3 channels, got {}", self.channels[0]));
        }
        let step = 1usize << self.blocks();
        if self.input_size == 0 || self.input_size % step != 0 {
            return bad(format!(
                "input size {} is not divisible by {step} ({} poolings)",
                self.input_size,
                self.blocks()
            ));
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.hidden == 0 {
            return bad("hidden width must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Parameter names and shapes in binding order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, w) in self.channels.windows(2).enumerate() {
            let k = self.kernel;
            out.push((format!("conv{}.kernel", i + 1), vec![k, k, w[0], w[1]]));
            out.push((format!("conv{}.bias", i + 1), vec![w[1]]));
        }
        let flat = match self.head {
            Head::Regression => self.grid() * self.grid() * self.features(),
            Head::Detector => self.features(),
        };
        out.push(("fc1.weight".into(), vec![self.hidden, flat]));
        out.push(("fc1.bias".into(), vec![self.hidden]));
        out.push(("fc2.weight".into(), vec![1, self.hidden]));
        out.push(("fc2.bias".into(), vec![1]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head = match self.head {
            Head::Regression => "regression",
            Head::Detector => "detector",
        };
        let ch: Vec<String> = self.channels.iter().map(usize::to_string).collect();
        write!(
            f,
            "head={head} input={} channels={} kernel={} hidden={} dropout={}",
            self.input_size,
            ch.join(","),
            self.kernel,
            self.hidden,
            self.dropout
        )
    }
}

impl std::str::FromStr for Architecture {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |m: String| ModelError::Architecture(m);
        let mut a = Architecture::regression();
        for field in s.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed field '{field}'")))?;
            let num = |v: &str| v.parse::<usize>().map_err(|e| bad(format!("{k}: {e}")));
            match k {
                "head" => {
                    a.head = match v {
                        "regression" => Head::Regression,
                        "detector" => Head::Detector,
                        _ => return Err(bad(format!("unknown head '{v}'"))),
                    }
                }
                "input" => a.input_size = num(v)?,
                "channels" => a.channels = v.split(',').map(num).collect::<Result<_, _>>()?,
                "kernel" => a.kernel = num(v)?,
                "hidden" => a.hidden = num(v)?,
                "dropout" => a.dropout = v.parse().map_err(|e| bad(format!("dropout: {e}")))?,
                _ => return Err(bad(format!("unknown field '{k}'"))),
            }
        }
        a.validate()?;
        Ok(a)
    }
}

/// Named parameter tensors in binding order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Register every tensor as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| g.param(t.clone())).collect()
    }

    /// Register every tensor as a constant, for inference.
    pub fn bind_constant(&self, g: &mut Graph) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| g.constant(t.clone())).collect()
    }

    fn check_layout(&self, arch: &Architecture) -> Result<(), ModelError> {
        let layout = arch.layout();
        if layout.len() != self.entries.len() {
            return Err(ModelError::Architecture(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                self.entries.len()
            )));
        }
        for ((name, shape), (n, t)) in layout.iter().zip(&self.entries) {
            if name != n || shape != t.shape() {
                return Err(ModelError::Architecture(format!(
                    "parameter {n} {:?} does not match layout {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Uniform `±√(6/fan_in)` weights and zero biases, one stream per tensor.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<ParamSet, ModelError> {
    arch.validate()?;
    let entries = arch
        .layout()
        .into_iter()
        .enumerate()
        .map(|(i, (name, shape))| {
            let len: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; len]
            } else {
                // kernels are k×k×Cin×Cout, dense weights out×in
                let fan_in: usize = if shape.len() == 4 {
                    shape[..3].iter().product()
                } else {
                    shape[1]
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut r = rng::stream(seed, &[i as u64]);
                (0..len).map(|_| r.random_range(-bound..bound)).collect()
            };
            let t = Tensor::new(&shape, data).expect("layout shapes are valid");
            (name, t)
        })
        .collect();
    Ok(ParamSet::new(entries))
}

fn check_images(g: &Graph, images: Var, arch: &Architecture) -> Result<usize, ModelError> {
    let s = g.value(images).shape();
    match s {
        [n, h, w, 3] if *h == arch.input_size && *w == arch.input_size => Ok(*n),
        _ => Err(ModelError::Input {
            got: s.to_vec(),
            expected: format!("N×{0}×{0}×3", arch.input_size),
        }),
    }
}

/// Conv blocks on a `N×H×W×3` batch; returns the `N×g×g×C` grid.
fn features(g: &mut Graph, params: &[Var], arch: &Architecture, images: Var) -> Result<Var, ModelError> {
    let mut x = images;
    for b in 0..arch.blocks() {
        x = g.conv2d(x, params[2 * b], params[2 * b + 1])?;
        x = g.relu(x);
        x = g.maxpool2(x)?;
    }
    Ok(x)
}

/// Per-frame height regressor.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionCNN {
    pub arch: Architecture,
    pub params: ParamSet,
}

impl RegressionCNN {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self, ModelError> {
        if arch.head != Head::Regression {
            return Err(ModelError::Architecture("regression model needs a regression head".into()));
        }
        let params = init_params(&arch, seed)?;
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: Architecture, params: ParamSet) -> Result<Self, ModelError> {
        arch.validate()?;
        params.check_layout(&arch)?;
        Ok(Self { arch, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        write_checkpoint(path, &self.arch.to_string(), self.params.entries())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let (meta, entries) = read_checkpoint(path)?;
        let arch: Architecture = meta.parse()?;
        Self::from_params(arch, ParamSet::new(entries))
    }
}

/// One scalar per image of a `N×H×W×3` batch; `params` come from
/// [`ParamSet::bind`]. Dropout draws from `rng` in train mode only.
pub fn forward_regression(
    g: &mut Graph,
    model: &RegressionCNN,
    params: &[Var],
    images: Var,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Var, ModelError> {
    let arch = &model.arch;
    let n = check_images(g, images, arch)?;
    let blocks = arch.blocks();
    let grid = features(g, params, arch, images)?;
    let flat = g.reshape(grid, &[n, arch.grid() * arch.grid() * arch.features()])?;
    let h = g.dense(flat, params[2 * blocks], params[2 * blocks + 1])?;
    let h = g.relu(h);
    let h = g.dropout(h, arch.dropout, mode, rng)?;
    let out = g.dense(h, params[2 * blocks + 2], params[2 * blocks + 3])?;
    Ok(g.reshape(out, &[n])?)
}

/// Cells within Chebyshev distance `radius` of `cell` are not selectable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Exclusion {
    pub cell: (usize, usize),
    pub radius: usize,
}

impl Exclusion {
    pub fn excludes(&self, cell: (usize, usize)) -> bool {
        cell.0.abs_diff(self.cell.0) <= self.radius && cell.1.abs_diff(self.cell.1) <= self.radius
    }
}

/// Cell of a `R×C×Ch` grid (row-major data) whose channel mean is largest
/// among admissible cells; ties go to the first cell in row-major order.
pub fn select_cell(
    data: &[f64],
    rows: usize,
    cols: usize,
    channels: usize,
    excluded: Option<Exclusion>,
) -> Result<(usize, usize), ModelError> {
    assert_eq!(data.len(), rows * cols * channels, "grid data matches its shape");
    let mut best: Option<((usize, usize), f64)> = None;
    for r in 0..rows {
        for c in 0..cols {
            if excluded.is_some_and(|e| e.excludes((r, c))) {
                continue;
            }
            let off = (r * cols + c) * channels;
            let mean = data[off..off + channels].iter().sum::<f64>() / channels as f64;
            if best.is_none_or(|(_, m)| mean > m) {
                best = Some(((r, c), mean));
            }
        }
    }
    best.map(|(cell, _)| cell).ok_or_else(|| {
        ModelError::Selection(format!(
            "every cell of the {rows}×{cols} grid is excluded by {excluded:?}"
        ))
    })
}

/// Selected channel vector and its cell for one `R×C×Ch` grid tensor.
pub fn select_spatial(
    grid: &Tensor,
    excluded: Option<Exclusion>,
) -> Result<(Tensor, (usize, usize)), ModelError> {
    let [r, c, ch] = grid.shape()[..] else {
        return Err(ModelError::Input {
            got: grid.shape().to_vec(),
            expected: "R×C×Ch grid".into(),
        });
    };
    let cell = select_cell(grid.data(), r, c, ch, excluded)?;
    let off = (cell.0 * c + cell.1) * ch;
    Ok((Tensor::vector(grid.data()[off..off + ch].to_vec()), cell))
}

/// Single-object presence detector.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorNet {
    pub arch: Architecture,
    pub params: ParamSet,
}

impl DetectorNet {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self, ModelError> {
        if arch.head != Head::Detector {
            return Err(ModelError::Architecture("detector needs a detector head".into()));
        }
        let params = init_params(&arch, seed)?;
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: Architecture, params: ParamSet) -> Result<Self, ModelError> {
        arch.validate()?;
        params.check_layout(&arch)?;
        Ok(Self { arch, params })
    }
}

/// Output of one detector on a batch.
#[derive(Clone, Debug)]
pub struct Detection {
    /// `M` probabilities.
    pub probs: Var,
    pub cells: Vec<(usize, usize)>,
}

/// Run a detector; `exclusions[i]` restricts the cell choice on image `i`.
pub fn forward_detector(
    g: &mut Graph,
    net: &DetectorNet,
    params: &[Var],
    images: Var,
    exclusions: &[Option<Exclusion>],
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Detection, ModelError> {
    let arch = &net.arch;
    let m = check_images(g, images, arch)?;
    if exclusions.len() != m {
        return Err(ModelError::Selection(format!(
            "{} exclusions for a batch of {m}",
            exclusions.len()
        )));
    }
    let grid = features(g, params, arch, images)?;
    let (side, ch) = (arch.grid(), arch.features());
    let cells = {
        let data = g.value(grid).data();
        let per = side * side * ch;
        (0..m)
            .map(|i| select_cell(&data[i * per..(i + 1) * per], side, side, ch, exclusions[i]))
            .collect::<Result<Vec<_>, _>>()?
    };
    let picked = g.select_cells(grid, &cells)?;
    let blocks = arch.blocks();
    let h = g.dense(picked, params[2 * blocks], params[2 * blocks + 1])?;
    let h = g.relu(h);
    let h = g.dropout(h, arch.dropout, mode, rng)?;
    let z = g.dense(h, params[2 * blocks + 2], params[2 * blocks + 3])?;
    let p = g.sigmoid(z);
    Ok(Detection {
        probs: g.reshape(p, &[m])?,
        cells,
    })
}

/// Peach detector `f1` and Mario detector `f2`.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorPair {
    pub f1: DetectorNet,
    pub f2: DetectorNet,
    pub exclusion_radius: usize,
}

pub const EXCLUSION_RADIUS: usize = 2;

impl DetectorPair {
    /// Two independently initialised detectors.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self, ModelError> {
        Ok(Self {
            f1: DetectorNet::new(arch.clone(), rng::derive_seed(seed, &[1]))?,
            f2: DetectorNet::new(arch, rng::derive_seed(seed, &[2]))?,
            exclusion_radius: EXCLUSION_RADIUS,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.f1.params.scalar_count() + self.f2.params.scalar_count()
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let meta = format!(
            "pair radius={} | {} | {}",
            self.exclusion_radius, self.f1.arch, self.f2.arch
        );
        let mut entries = Vec::new();
        for (prefix, net) in [("f1", &self.f1), ("f2", &self.f2)] {
            for (n, t) in net.params.entries() {
                entries.push((format!("{prefix}.{n}"), t.clone()));
            }
        }
        write_checkpoint(path, &meta, &entries)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let (meta, entries) = read_checkpoint(path)?;
        let bad = || ModelError::Architecture(format!("not a detector pair checkpoint: '{meta}'"));
        let mut parts = meta.split(" | ");
        let radius = parts
            .next()
            .and_then(|p| p.strip_prefix("pair radius="))
            .and_then(|r| r.parse().ok())
            .ok_or_else(bad)?;
        let a1: Architecture = parts.next().ok_or_else(bad)?.parse()?;
        let a2: Architecture = parts.next().ok_or_else(bad)?.parse()?;
        let split = |prefix: &str| {
            ParamSet::new(
                entries
                    .iter()
                    .filter_map(|(n, t)| {
                        n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone()))
                    })
                    .collect(),
            )
        };
        Ok(Self {
            f1: DetectorNet::from_params(a1, split("f1."))?,
            f2: DetectorNet::from_params(a2, split("f2."))?,
            exclusion_radius: radius,
        })
    }
}

/// Both detectors on one batch.
#[derive(Clone, Debug)]
pub struct PairOutput {
    pub p1: Var,
    pub p2: Var,
    pub cells1: Vec<(usize, usize)>,
    pub cells2: Vec<(usize, usize)>,
}

/// `f1` picks freely; on images where it reports `p1 > 0.5`, `f2` may not
/// pick within the exclusion radius of `f1`'s cell.
pub fn forward_pair(
    g: &mut Graph,
    pair: &DetectorPair,
    params1: &[Var],
    params2: &[Var],
    images: Var,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<PairOutput, ModelError> {
    let m = check_images(g, images, &pair.f1.arch)?;
    let d1 = forward_detector(g, &pair.f1, params1, images, &vec![None; m], mode, rng)?;
    let exclusions: Vec<Option<Exclusion>> = g
        .value(d1.probs)
        .data()
        .iter()
        .zip(&d1.cells)
        .map(|(&p, &cell)| {
            (p > 0.5).then_some(Exclusion {
                cell,
                radius: pair.exclusion_radius,
            })
        })
        .collect();
    let d2 = forward_detector(g, &pair.f2, params2, images, &exclusions, mode, rng)?;
    Ok(PairOutput {
        p1: d1.probs,
        p2: d2.probs,
        cells1: d1.cells,
        cells2: d2.cells,
    })
}

const INFERENCE_CHUNK: usize = 32;

/// Eval-mode predictions for a list of frames, in chunks.
pub fn predict_regression(
    model: &RegressionCNN,
    frames: &[&crate::scenes::Image],
) -> Result<Vec<f64>, ModelError> {
    let mut out = Vec::with_capacity(frames.len());
    let mut unused = rng::seeded(0);
    for chunk in frames.chunks(INFERENCE_CHUNK) {
        let mut g = Graph::new();
        let p = model.params.bind_constant(&mut g);
        let x = g.constant(crate::scenes::render::batch_tensor(chunk.iter().copied()));
        let y = forward_regression(&mut g, model, &p, x, Mode::Eval, &mut unused)?;
        out.extend_from_slice(g.value(y).data());
    }
    Ok(out)
}

/// Eval-mode `(p1, p2)` for a list of images, in chunks.
pub fn predict_pair(
    pair: &DetectorPair,
    images: &[&crate::scenes::Image],
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    let (mut p1, mut p2) = (Vec::new(), Vec::new());
    let mut unused = rng::seeded(0);
    for chunk in images.chunks(INFERENCE_CHUNK) {
        let mut g = Graph::new();
        let a = pair.f1.params.bind_constant(&mut g);
        let b = pair.f2.params.bind_constant(&mut g);
        let x = g.constant(crate::scenes::render::batch_tensor(chunk.iter().copied()));
        let out = forward_pair(&mut g, pair, &a, &b, x, Mode::Eval, &mut unused)?;
        p1.extend_from_slice(g.value(out.p1).data());
        p2.extend_from_slice(g.value(out.p2).data());
    }
    Ok((p1, p2))
}
