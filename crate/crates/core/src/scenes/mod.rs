//! Deterministic synthetic datasets: thrown objects, walkers, and sprite
//! scenes with a causal co-occurrence rule.

mod causal;
mod freefall;
mod io;
pub mod render;
pub mod rng;
mod walk;

use thiserror::Error;

pub use causal::{
    generate_causal, sprite_mask, CausalScene, Character, Labels, Placement, CELL, SPRITE,
};
pub use freefall::{freefall_trajectory, generate_freefall, Toss};
pub use io::{dataset_file_size, load_dataset, save_dataset, write_manifest, FORMAT_VERSION};
pub use render::Image;
pub use walk::{generate_walk, walk_trajectory, Stride};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("no valid placement: {0}")]
    Placement(String),
    #[error("dataset format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which experiment a dataset belongs to. The discriminant is the on-disk
/// kind byte.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    FreeFall = 0,
    Walk = 1,
    Causal = 2,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::FreeFall => "freefall",
            DatasetKind::Walk => "walk",
            DatasetKind::Causal => "causal",
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(DatasetKind::FreeFall),
            1 => Some(DatasetKind::Walk),
            2 => Some(DatasetKind::Causal),
            _ => None,
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "freefall" => Ok(DatasetKind::FreeFall),
            "walk" => Ok(DatasetKind::Walk),
            "causal" => Ok(DatasetKind::Causal),
            other => Err(format!(
                "unknown experiment '{other}' (expected freefall|walk|causal)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Background {
    /// One random muted colour per item.
    Flat,
    /// Value-noise texture drawn fresh for every item.
    Textured,
    /// Value-noise texture shared by all items with the same scene id.
    PerScene,
}

impl Background {
    pub fn name(self) -> &'static str {
        match self {
            Background::Flat => "flat",
            Background::Textured => "textured",
            Background::PerScene => "per-scene",
        }
    }
}

impl std::str::FromStr for Background {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flat" => Ok(Background::Flat),
            "textured" => Ok(Background::Textured),
            "per-scene" => Ok(Background::PerScene),
            other => Err(format!(
                "unknown background '{other}' (expected flat|textured|per-scene)"
            )),
        }
    }
}

/// Independent appearance probabilities, before the Peach ⇒ Mario rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Appearance {
    pub peach: f64,
    pub mario: f64,
    pub yoshi: f64,
    pub bowser: f64,
}

impl Default for Appearance {
    fn default() -> Self {
        Self {
            peach: 0.4,
            mario: 0.4,
            yoshi: 0.5,
            bowser: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    /// Square image side; must be divisible by 8.
    pub image_size: usize,
    /// Seconds between frames.
    pub dt: f64,
    /// Vertical acceleration in m/s² (enters as `a·t²`).
    pub gravity: f64,
    pub pixels_per_meter: f64,
    pub background: Background,
    /// Radius of the thrown disk, pixels.
    pub object_radius: f64,
    /// Per-channel uniform pixel noise amplitude.
    pub noise: f32,
    pub appearance: Appearance,
    /// Trajectories (tracking) or scenes (causal) to generate.
    pub count: usize,
    /// Total frames over all trajectories, spread as evenly as possible
    /// (earlier trajectories take the remainder). Ignored for causal.
    pub images: usize,
    /// Distinct backgrounds cycled across walking trajectories.
    pub scenes: usize,
    /// Items reserved for evaluation (free fall and causal).
    pub holdout: usize,
    /// Minimum Chebyshev distance, in 8-pixel feature-grid cells, between
    /// the centres of two causal characters; 0 only forbids overlap.
    pub separation: usize,
    /// Launch speed range for tosses, m/s.
    pub launch_speed: (f64, f64),
    /// Walking speed range, pixels per frame.
    pub walk_speed: (f64, f64),
    pub seed: u64,
}

impl GenConfig {
    pub fn freefall() -> Self {
        Self {
            image_size: 56,
            dt: 0.1,
            gravity: crate::constraints::GRAVITY,
            pixels_per_meter: 17.0,
            background: Background::Textured,
            object_radius: 4.0,
            noise: 0.02,
            appearance: Appearance::default(),
            count: 65,
            images: 602,
            scenes: 65,
            holdout: 13,
            separation: 0,
            launch_speed: (7.5, 10.0),
            walk_speed: (0.5, 1.0),
            seed: 1,
        }
    }

    pub fn walk() -> Self {
        Self {
            background: Background::PerScene,
            count: 11,
            images: 507,
            scenes: 6,
            holdout: 0,
            ..Self::freefall()
        }
    }

    pub fn causal() -> Self {
        Self {
            background: Background::Textured,
            count: 2048 + 128,
            images: 2048 + 128,
            scenes: 1,
            holdout: 128,
            separation: 3,
            ..Self::freefall()
        }
    }

    pub fn for_kind(kind: DatasetKind) -> Self {
        match kind {
            DatasetKind::FreeFall => Self::freefall(),
            DatasetKind::Walk => Self::walk(),
            DatasetKind::Causal => Self::causal(),
        }
    }

    /// Frames in trajectory `i`.
    pub fn frames_of(&self, i: usize) -> usize {
        self.images / self.count + usize::from(i < self.images % self.count)
    }

    /// Validation for tracking datasets: every trajectory needs frames.
    pub(crate) fn validate_tracking(&self) -> Result<(), SceneError> {
        self.validate()?;
        if self.images < self.count {
            return Err(SceneError::Config(format!(
                "images {} must cover at least one frame per trajectory ({})",
                self.images, self.count
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::Config(m));
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return bad(format!(
                "image_size must be a positive multiple of 8, got {}",
                self.image_size
            ));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !self.gravity.is_finite() {
            return bad(format!("gravity must be finite, got {}", self.gravity));
        }
        if !(self.pixels_per_meter > 0.0 && self.pixels_per_meter.is_finite()) {
            return bad(format!(
                "pixels_per_meter must be positive, got {}",
                self.pixels_per_meter
            ));
        }
        if !(self.object_radius > 0.0) {
            return bad(format!(
                "object_radius must be positive, got {}",
                self.object_radius
            ));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise must lie in [0, 1], got {}", self.noise));
        }
        let a = &self.appearance;
        for (name, p) in [
            ("p_peach", a.peach),
            ("p_mario", a.mario),
            ("p_yoshi", a.yoshi),
            ("p_bowser", a.bowser),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.count == 0 {
            return bad("count must be at least 1".into());
        }
        if self.scenes == 0 {
            return bad("scenes must be at least 1".into());
        }
        if self.holdout > self.count {
            return bad(format!(
                "holdout {} exceeds count {}",
                self.holdout, self.count
            ));
        }
        for (name, (lo, hi)) in [
            ("launch_speed", self.launch_speed),
            ("walk_speed", self.walk_speed),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(format!("{name} range must be ordered, got ({lo}, {hi})"));
            }
        }
        Ok(())
    }
}

/// Free-fall and walking sequences: rendered frames plus the tracked
/// coordinate of the object in every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<Image>,
    truth: Vec<f64>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn new(frames: Vec<Image>, truth: Vec<f64>, meta: TrajectoryMeta) -> Self {
        assert_eq!(frames.len(), truth.len(), "one truth value per frame");
        Self {
            frames,
            truth,
            meta,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Ground-truth positions in pixels. Free fall: height of the object
    /// centre above the bottom edge. Walking: column of the figure centre.
    pub fn truth(&self) -> &[f64] {
        &self.truth
    }
}

/// World parameters a trajectory was rendered from.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryMeta {
    pub seed: u64,
    pub scene: u32,
    pub dt: f64,
    pub pixels_per_meter: f64,
    /// Free fall: height at `t = 0` (m). Walking: column at frame 0 (px).
    pub y0: f64,
    /// Free fall: vertical launch speed (m/s). Walking: px per frame.
    pub v0: f64,
    /// Horizontal start (px) and drift (px per frame) of a toss; walking
    /// stores the ground row and 0.
    pub x0: f64,
    pub vx: f64,
}

impl TrajectoryMeta {
    pub(crate) fn to_params(&self) -> Vec<f64> {
        vec![
            f64::from(self.scene),
            self.dt,
            self.pixels_per_meter,
            self.y0,
            self.v0,
            self.x0,
            self.vx,
        ]
    }

    pub(crate) fn from_params(seed: u64, p: &[f64]) -> Option<Self> {
        let [scene, dt, ppm, y0, v0, x0, vx] = p[..] else {
            return None;
        };
        Some(Self {
            seed,
            scene: scene as u32,
            dt,
            pixels_per_meter: ppm,
            y0,
            v0,
            x0,
            vx,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    FreeFall(Vec<Trajectory>),
    Walk(Vec<Trajectory>),
    Causal(Vec<CausalScene>),
}

impl Dataset {
    pub fn kind(&self) -> DatasetKind {
        match self {
            Dataset::FreeFall(_) => DatasetKind::FreeFall,
            Dataset::Walk(_) => DatasetKind::Walk,
            Dataset::Causal(_) => DatasetKind::Causal,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::FreeFall(t) | Dataset::Walk(t) => t.len(),
            Dataset::Causal(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_count(&self) -> usize {
        match self {
            Dataset::FreeFall(t) | Dataset::Walk(t) => t.iter().map(Trajectory::len).sum(),
            Dataset::Causal(s) => s.len(),
        }
    }

    pub fn trajectories(&self) -> Option<&[Trajectory]> {
        match self {
            Dataset::FreeFall(t) | Dataset::Walk(t) => Some(t),
            Dataset::Causal(_) => None,
        }
    }

    pub fn scenes(&self) -> Option<&[CausalScene]> {
        match self {
            Dataset::Causal(s) => Some(s),
            _ => None,
        }
    }

    /// `(height, width)` of every image.
    pub fn image_size(&self) -> (usize, usize) {
        let img = match self {
            Dataset::FreeFall(t) | Dataset::Walk(t) => t.first().and_then(|t| t.frames.first()),
            Dataset::Causal(s) => s.first().map(|s| &s.image),
        };
        img.map_or((0, 0), |i| (i.height(), i.width()))
    }
}

/// Disjoint train/test assignment of dataset items.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Walking splits each trajectory in time instead of by item.
    pub by_half: bool,
}

impl Split {
    /// The last `holdout` items are held out; walking keeps every
    /// trajectory and splits it into first and second halves.
    pub fn for_dataset(kind: DatasetKind, len: usize, holdout: usize) -> Self {
        match kind {
            DatasetKind::Walk => Self {
                train: (0..len).collect(),
                test: (0..len).collect(),
                by_half: true,
            },
            _ => {
                let cut = len.saturating_sub(holdout);
                Self {
                    train: (0..cut).collect(),
                    test: (cut..len).collect(),
                    by_half: false,
                }
            }
        }
    }
}

/// Generate the dataset for `kind` from `config`.
pub fn generate(kind: DatasetKind, config: &GenConfig) -> Result<Dataset, SceneError> {
    Ok(match kind {
        DatasetKind::FreeFall => Dataset::FreeFall(generate_freefall(config, config.seed)?),
        DatasetKind::Walk => Dataset::Walk(generate_walk(config, config.seed)?),
        DatasetKind::Causal => {
            Dataset::Causal(generate_causal(config, config.count, config.seed)?)
        }
    })
}

pub(crate) fn background_for<R: rand::Rng + ?Sized>(
    config: &GenConfig,
    scene: u64,
    rng: &mut R,
) -> Image {
    let n = config.image_size;
    match config.background {
        Background::Flat => {
            let mut img = Image::new(n, n);
            img.fill(render::muted_colour(rng));
            img
        }
        Background::Textured => {
            let base = render::muted_colour(rng);
            render::textured_background(n, n, base, 0.15, 4, rng)
        }
        Background::PerScene => {
            let mut srng = rng::stream(config.seed, &[rng::label::BACKGROUND, scene]);
            let base = render::muted_colour(&mut srng);
            render::textured_background(n, n, base, 0.2, 5, &mut srng)
        }
    }
}
