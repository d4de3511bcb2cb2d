use rand::Rng;

use super::render::{draw_disk, draw_rect, Rgb};
use super::rng::{self, label};
use super::{background_for, GenConfig, SceneError, Trajectory, TrajectoryMeta};

const SHIRT: Rgb = [0.15, 0.3, 0.85];
const TROUSERS: Rgb = [0.1, 0.1, 0.15];
const SKIN: Rgb = [0.95, 0.8, 0.65];
const HALF_WIDTH: f64 = 2.5;
const HEIGHT: f64 = 16.0;
const JITTER: f64 = 0.6;

/// Walker motion: column at frame 0 and columns per frame; `ground` is
/// the row of the feet.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stride {
    pub x0: f64,
    pub speed: f64,
    pub ground: f64,
}

fn draw_walker(img: &mut super::Image, cx: f64, ground: f64) {
    let top = ground - HEIGHT;
    let waist = ground - 7.0;
    draw_rect(img, waist, cx - HALF_WIDTH, ground, cx + HALF_WIDTH, TROUSERS);
    draw_rect(img, top + 4.0, cx - HALF_WIDTH, waist, cx + HALF_WIDTH, SHIRT);
    draw_disk(img, top + 2.0, cx, 2.2, SKIN);
}

/// Render a walker moving at constant speed. Truth is the column of the
/// figure centre; the drawn figure bobs vertically by up to `JITTER` px.
pub fn walk_trajectory(
    config: &GenConfig,
    stride: Stride,
    frames: usize,
    seed: u64,
    scene: u32,
) -> Trajectory {
    let mut rng = rng::seeded(seed);
    let background = background_for(config, u64::from(scene), &mut rng);
    let mut images = Vec::with_capacity(frames);
    let mut truth = Vec::with_capacity(frames);
    for k in 0..frames {
        let x = stride.x0 + stride.speed * k as f64;
        let bob = rng.random_range(-JITTER..=JITTER);
        let mut img = background.clone();
        draw_walker(&mut img, x, stride.ground + bob);
        img.add_noise(config.noise, &mut rng);
        images.push(img);
        truth.push(x);
    }
    let meta = TrajectoryMeta {
        seed,
        scene,
        dt: config.dt,
        pixels_per_meter: config.pixels_per_meter,
        y0: stride.x0,
        v0: stride.speed,
        x0: stride.ground,
        vx: 0.0,
    };
    Trajectory::new(images, truth, meta)
}

pub fn generate_walk(config: &GenConfig, seed: u64) -> Result<Vec<Trajectory>, SceneError> {
    config.validate_tracking()?;
    let size = config.image_size as f64;
    let margin = HALF_WIDTH + 1.0;
    let span = size - 2.0 * margin;
    if span <= 0.0 || size < HEIGHT + 2.0 * JITTER + 2.0 {
        return Err(SceneError::Config(format!(
            "a {0}x{0} frame cannot hold the walker",
            config.image_size
        )));
    }
    (0..config.count)
        .map(|i| {
            let item_seed = rng::derive_seed(seed, &[label::WALK, i as u64]);
            let mut rng = rng::seeded(item_seed);
            let frames = config.frames_of(i);
            let (lo, hi) = config.walk_speed;
            let mut speed = if lo < hi { rng.random_range(lo..=hi) } else { lo };
            let steps = (frames.max(2) - 1) as f64;
            speed = speed.min(span / steps);
            let travel = speed * steps;
            let start = margin + rng.random_range(0.0..=(span - travel));
            // alternate direction so both halves of the frame are visited
            let stride = if i % 2 == 0 {
                Stride {
                    x0: start,
                    speed,
                    ground: 0.0,
                }
            } else {
                Stride {
                    x0: start + travel,
                    speed: -speed,
                    ground: 0.0,
                }
            };
            let gmin = HEIGHT + JITTER + 1.0;
            let gmax = size - JITTER - 1.0;
            let stride = Stride {
                ground: rng.random_range(gmin..=gmax),
                ..stride
            };
            let scene = (i % config.scenes) as u32;
            let render_seed = rng::derive_seed(item_seed, &[label::SCENE]);
            Ok(walk_trajectory(config, stride, frames, render_seed, scene))
        })
        .collect()
}
