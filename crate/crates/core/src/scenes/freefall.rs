use rand::Rng;

use super::render::{draw_disk, Rgb};
use super::rng::{self, label};
use super::{background_for, GenConfig, SceneError, Trajectory, TrajectoryMeta};

const BALL: Rgb = [0.95, 0.45, 0.1];
const MAX_TRIES: usize = 1000;

/// Launch parameters of one toss. Heights are metres above the bottom
/// edge; horizontal values are pixels and pixels per frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Toss {
    pub y0: f64,
    pub v0: f64,
    pub x0: f64,
    pub vx: f64,
}

/// Height in metres at frame `k`: `y0 + v0·t + a·t²` with `t = k·dt`.
fn height(toss: &Toss, gravity: f64, dt: f64, k: usize) -> f64 {
    let t = k as f64 * dt;
    toss.y0 + toss.v0 * t + gravity * t * t
}

/// Highest and lowest height (relative to `y0 = 0`) over `frames` frames.
fn extent(v0: f64, gravity: f64, dt: f64, frames: usize) -> (f64, f64) {
    let probe = Toss {
        y0: 0.0,
        v0,
        x0: 0.0,
        vx: 0.0,
    };
    (0..frames)
        .map(|k| height(&probe, gravity, dt, k))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| {
            (lo.min(y), hi.max(y))
        })
}

/// Render one toss. The truth is the height of the disk centre above the
/// bottom edge, in pixels.
pub fn freefall_trajectory(
    config: &GenConfig,
    toss: Toss,
    frames: usize,
    seed: u64,
    scene: u32,
) -> Trajectory {
    let mut rng = rng::seeded(seed);
    let background = background_for(config, u64::from(scene), &mut rng);
    let h = config.image_size as f64;
    let mut images = Vec::with_capacity(frames);
    let mut truth = Vec::with_capacity(frames);
    for k in 0..frames {
        let px = config.pixels_per_meter * height(&toss, config.gravity, config.dt, k);
        let mut img = background.clone();
        draw_disk(
            &mut img,
            h - px,
            toss.x0 + toss.vx * k as f64,
            config.object_radius,
            BALL,
        );
        img.add_noise(config.noise, &mut rng);
        images.push(img);
        truth.push(px);
    }
    let meta = TrajectoryMeta {
        seed,
        scene,
        dt: config.dt,
        pixels_per_meter: config.pixels_per_meter,
        y0: toss.y0,
        v0: toss.v0,
        x0: toss.x0,
        vx: toss.vx,
    };
    Trajectory::new(images, truth, meta)
}

fn sample_toss<R: Rng + ?Sized>(
    config: &GenConfig,
    frames: usize,
    rng: &mut R,
) -> Option<Toss> {
    let size = config.image_size as f64;
    let margin = config.object_radius + 1.0;
    let ppm = config.pixels_per_meter;
    let (vlo, vhi) = config.launch_speed;
    for _ in 0..MAX_TRIES {
        let v0 = if vlo < vhi {
            rng.random_range(vlo..=vhi)
        } else {
            vlo
        };
        let (lo, hi) = extent(v0, config.gravity, config.dt, frames);
        // y0 range keeping every centre in [margin, size - margin] px
        let ymin = margin / ppm - lo;
        let ymax = (size - margin) / ppm - hi;
        if ymin > ymax {
            continue;
        }
        let y0 = if ymin < ymax {
            rng.random_range(ymin..=ymax)
        } else {
            ymin
        };
        // cross the frame left to right or right to left
        let span = size - 2.0 * margin;
        let travel = rng.random_range(0.5..=1.0) * span;
        let vx = travel / (frames.max(2) - 1) as f64;
        let start = margin + rng.random_range(0.0..=(span - travel));
        let toss = if rng.random_bool(0.5) {
            Toss {
                y0,
                v0,
                x0: start,
                vx,
            }
        } else {
            Toss {
                y0,
                v0,
                x0: start + travel,
                vx: -vx,
            }
        };
        return Some(toss);
    }
    None
}

pub fn generate_freefall(config: &GenConfig, seed: u64) -> Result<Vec<Trajectory>, SceneError> {
    config.validate_tracking()?;
    (0..config.count)
        .map(|i| {
            let item_seed = rng::derive_seed(seed, &[label::FREEFALL, i as u64]);
            let mut rng = rng::seeded(item_seed);
            let frames = config.frames_of(i);
            let toss = sample_toss(config, frames, &mut rng).ok_or_else(|| {
                SceneError::Config(format!(
                    "no toss with {frames} frames stays in a {size}x{size} frame \
                     (radius {}, launch speed {:?}, {} px/m)",
                    config.object_radius,
                    config.launch_speed,
                    config.pixels_per_meter,
                    size = config.image_size
                ))
            })?;
            let render_seed = rng::derive_seed(item_seed, &[label::SCENE]);
            Ok(freefall_trajectory(config, toss, frames, render_seed, i as u32))
        })
        .collect()
}
