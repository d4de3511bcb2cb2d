//! Software rasterizer for the synthetic scenes.
//!
//! Pixel `(row, col)` covers `[row, row+1) × [col, col+1)`; its centre sits
//! at `(row + 0.5, col + 0.5)`.

use rand::Rng;

use crate::autodiff::Tensor;

pub type Rgb = [f32; 3];

/// `H×W×3` image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f32>) -> Option<Self> {
        (data.len() == height * width * 3).then_some(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> Rgb {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: Rgb) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Alpha-blend `rgb` over the pixel with coverage `alpha`.
    pub fn blend(&mut self, row: usize, col: usize, rgb: Rgb, alpha: f32) {
        if alpha <= 0.0 {
            return;
        }
        let a = alpha.min(1.0);
        let i = (row * self.width + col) * 3;
        for (c, &v) in self.data[i..i + 3].iter_mut().zip(&rgb) {
            *c = *c * (1.0 - a) + v * a;
        }
    }

    pub fn fill(&mut self, rgb: Rgb) {
        for px in self.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
    }

    /// Uniform noise in `[-amplitude, amplitude]` per channel, clamped.
    pub fn add_noise<R: Rng + ?Sized>(&mut self, amplitude: f32, rng: &mut R) {
        if amplitude <= 0.0 {
            return;
        }
        for v in &mut self.data {
            *v = (*v + rng.random_range(-amplitude..=amplitude)).clamp(0.0, 1.0);
        }
    }

    /// Mirror left-right and/or top-bottom.
    pub fn reflected(&self, horizontal: bool, vertical: bool) -> Self {
        let mut out = Self::new(self.height, self.width);
        for r in 0..self.height {
            let sr = if vertical { self.height - 1 - r } else { r };
            for c in 0..self.width {
                let sc = if horizontal { self.width - 1 - c } else { c };
                out.set(r, c, self.pixel(sr, sc));
            }
        }
        out
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.height, self.width, 3],
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("image buffer matches its shape")
    }
}

/// Stack images into a `B×H×W×3` tensor.
pub fn batch_tensor<'a>(images: impl IntoIterator<Item = &'a Image>) -> Tensor {
    let mut data = Vec::new();
    let mut count = 0;
    let mut hw = (0, 0);
    for img in images {
        hw = (img.height, img.width);
        data.extend(img.data.iter().map(|&v| f64::from(v)));
        count += 1;
    }
    Tensor::new(&[count, hw.0, hw.1, 3], data).expect("images share one size")
}

/// Coverage of a pixel by a disk, from the signed distance of the pixel
/// centre to the disk edge.
pub fn disk_coverage(distance: f64, radius: f64) -> f32 {
    (radius + 0.5 - distance).clamp(0.0, 1.0) as f32
}

/// Anti-aliased filled disk centred at `(cy, cx)` in continuous pixel
/// coordinates.
pub fn draw_disk(img: &mut Image, cy: f64, cx: f64, radius: f64, rgb: Rgb) {
    let r0 = (cy - radius - 1.0).floor().max(0.0) as usize;
    let r1 = ((cy + radius + 1.0).ceil() as usize).min(img.height);
    let c0 = (cx - radius - 1.0).floor().max(0.0) as usize;
    let c1 = ((cx + radius + 1.0).ceil() as usize).min(img.width);
    for r in r0..r1 {
        for c in c0..c1 {
            let dy = r as f64 + 0.5 - cy;
            let dx = c as f64 + 0.5 - cx;
            let cov = disk_coverage((dy * dy + dx * dx).sqrt(), radius);
            img.blend(r, c, rgb, cov);
        }
    }
}

/// Anti-aliased axis-aligned rectangle `[top, bottom) × [left, right)`.
pub fn draw_rect(img: &mut Image, top: f64, left: f64, bottom: f64, right: f64, rgb: Rgb) {
    let r0 = top.floor().max(0.0) as usize;
    let r1 = (bottom.ceil() as usize).min(img.height);
    let c0 = left.floor().max(0.0) as usize;
    let c1 = (right.ceil() as usize).min(img.width);
    for r in r0..r1 {
        let vy = (bottom.min(r as f64 + 1.0) - top.max(r as f64)).max(0.0);
        for c in c0..c1 {
            let vx = (right.min(c as f64 + 1.0) - left.max(c as f64)).max(0.0);
            img.blend(r, c, rgb, (vy * vx) as f32);
        }
    }
}

/// Smooth value-noise texture: a coarse grid of random colours around
/// `base`, bilinearly upsampled.
pub fn textured_background<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    base: Rgb,
    contrast: f32,
    cells: usize,
    rng: &mut R,
) -> Image {
    let g = cells.max(1) + 1;
    let grid: Vec<Rgb> = (0..g * g)
        .map(|_| {
            let mut c = base;
            for v in &mut c {
                *v = (*v + rng.random_range(-contrast..=contrast)).clamp(0.0, 1.0);
            }
            c
        })
        .collect();
    let mut img = Image::new(height, width);
    let sy = (g - 1) as f32 / height as f32;
    let sx = (g - 1) as f32 / width as f32;
    for r in 0..height {
        let fy = (r as f32 + 0.5) * sy;
        let y0 = (fy.floor() as usize).min(g - 2);
        let ty = fy - y0 as f32;
        for c in 0..width {
            let fx = (c as f32 + 0.5) * sx;
            let x0 = (fx.floor() as usize).min(g - 2);
            let tx = fx - x0 as f32;
            let mut px = [0.0; 3];
            for (k, v) in px.iter_mut().enumerate() {
                let a = grid[y0 * g + x0][k] * (1.0 - tx) + grid[y0 * g + x0 + 1][k] * tx;
                let b = grid[(y0 + 1) * g + x0][k] * (1.0 - tx) + grid[(y0 + 1) * g + x0 + 1][k] * tx;
                *v = a * (1.0 - ty) + b * ty;
            }
            img.set(r, c, px);
        }
    }
    img
}

/// Random muted colour.
pub fn muted_colour<R: Rng + ?Sized>(rng: &mut R) -> Rgb {
    let base = rng.random_range(0.25f32..0.6);
    [
        (base + rng.random_range(-0.12f32..0.12)).clamp(0.0, 1.0),
        (base + rng.random_range(-0.12f32..0.12)).clamp(0.0, 1.0),
        (base + rng.random_range(-0.12f32..0.12)).clamp(0.0, 1.0),
    ]
}
