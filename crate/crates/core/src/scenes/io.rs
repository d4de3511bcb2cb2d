//! Binary dataset files.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! header   "CFDS" | version u32 | kind u8 | height u32 | width u32 | count u32
//! item     seed u64 | frames u32 | params f64 × P | pixels f32 × frames·H·W·3 | truth f64 × T
//! ```
//!
//! `P` is 7 for tracking kinds (scene, dt, px/m, y0, v0, x0, vx) and 20 for
//! causal scenes (present, row, col, flip_h, flip_v per character). `T` is
//! `frames` for tracking kinds and 4 presence labels for causal scenes.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::causal::{Character, Labels, Placement};
use super::render::Image;
use super::{
    CausalScene, Dataset, DatasetKind, GenConfig, SceneError, Split, Trajectory, TrajectoryMeta,
};

const MAGIC: &[u8; 4] = b"CFDS";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_BYTES: u64 = 4 + 4 + 1 + 4 + 4 + 4;
const TRACK_PARAMS: usize = 7;
const CAUSAL_PARAMS: usize = 20;

fn param_count(kind: DatasetKind) -> usize {
    match kind {
        DatasetKind::FreeFall | DatasetKind::Walk => TRACK_PARAMS,
        DatasetKind::Causal => CAUSAL_PARAMS,
    }
}

/// Exact size in bytes of a file holding items with the given frame
/// counts (1 per causal scene).
pub fn dataset_file_size(kind: DatasetKind, height: usize, width: usize, frames: &[usize]) -> u64 {
    let pixels = (height * width * 3) as u64;
    let per_item = 8 + 4 + 8 * param_count(kind) as u64;
    frames
        .iter()
        .map(|&n| {
            let n = n as u64;
            let truth = match kind {
                DatasetKind::Causal => 4,
                _ => n,
            };
            per_item + 4 * pixels * n + 8 * truth
        })
        .sum::<u64>()
        + HEADER_BYTES
}

struct Out {
    buf: Vec<u8>,
}

impl Out {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32, SceneError> {
    u32::try_from(v).map_err(|_| SceneError::Config(format!("{what} {v} does not fit in u32")))
}

fn causal_params(scene: &CausalScene) -> Vec<f64> {
    let mut p = vec![0.0; CAUSAL_PARAMS];
    for pl in &scene.placements {
        let slot = &mut p[pl.character as usize * 5..][..5];
        slot.copy_from_slice(&[
            1.0,
            pl.row as f64,
            pl.col as f64,
            f64::from(u8::from(pl.flip_h)),
            f64::from(u8::from(pl.flip_v)),
        ]);
    }
    p
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), SceneError> {
    let (h, w) = dataset.image_size();
    let mut out = Out { buf: Vec::new() };
    out.buf.extend_from_slice(MAGIC);
    out.u32(FORMAT_VERSION);
    out.u8(dataset.kind() as u8);
    out.u32(to_u32(h, "image height")?);
    out.u32(to_u32(w, "image width")?);
    out.u32(to_u32(dataset.len(), "item count")?);
    let file = fs::File::create(path)?;
    let mut writer = BufWriter::new(file);
    writer.write_all(&out.buf)?;
    let mut flush = |out: &mut Out| -> Result<(), SceneError> {
        writer.write_all(&out.buf)?;
        out.buf.clear();
        Ok(())
    };
    out.buf.clear();
    match dataset {
        Dataset::FreeFall(items) | Dataset::Walk(items) => {
            for t in items {
                out.u64(t.meta.seed);
                out.u32(to_u32(t.len(), "frame count")?);
                out.f64s(&t.meta.to_params());
                for f in &t.frames {
                    if (f.height(), f.width()) != (h, w) {
                        return Err(SceneError::Config("images differ in size".into()));
                    }
                    out.f32s(f.data());
                }
                out.f64s(t.truth());
                flush(&mut out)?;
            }
        }
        Dataset::Causal(items) => {
            for s in items {
                if (s.image.height(), s.image.width()) != (h, w) {
                    return Err(SceneError::Config("images differ in size".into()));
                }
                out.u64(s.seed);
                out.u32(1);
                out.f64s(&causal_params(s));
                out.f32s(s.image.data());
                let truth: Vec<f64> = s.labels.as_array().map(|b| f64::from(u8::from(b))).to_vec();
                out.f64s(&truth);
                flush(&mut out)?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T, SceneError> {
        Err(SceneError::Format {
            offset: self.pos as u64,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], SceneError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => self.fail(format!(
                "truncated: need {n} bytes for {what}, {} left",
                self.bytes.len() - self.pos
            )),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8, SceneError> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32, SceneError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64, SceneError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, SceneError> {
        let raw = self.take(n.saturating_mul(8), what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>, SceneError> {
        let raw = self.take(n.saturating_mul(4), what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn placements_from(cur: &Cursor, p: &[f64]) -> Result<(Labels, Vec<Placement>), SceneError> {
    let mut present = [false; 4];
    let mut out = Vec::new();
    for (i, slot) in p.chunks_exact(5).enumerate() {
        if slot[0] == 0.0 {
            continue;
        }
        present[i] = true;
        let character = Character::from_index(i).expect("four slots");
        if slot[1] < 0.0 || slot[2] < 0.0 {
            return cur.fail(format!("negative placement for {}", character.name()));
        }
        out.push(Placement {
            character,
            row: slot[1] as usize,
            col: slot[2] as usize,
            flip_h: slot[3] != 0.0,
            flip_v: slot[4] != 0.0,
        });
    }
    Ok((Labels::from_array(present), out))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, SceneError> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(4, "magic")? != MAGIC {
        cur.pos = 0;
        return cur.fail("bad magic, expected \"CFDS\"");
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        cur.pos -= 4;
        return cur.fail(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        ));
    }
    let kind_byte = cur.u8("kind")?;
    let Some(kind) = DatasetKind::from_byte(kind_byte) else {
        cur.pos -= 1;
        return cur.fail(format!("unknown dataset kind {kind_byte}"));
    };
    let h = cur.u32("height")? as usize;
    let w = cur.u32("width")? as usize;
    let count = cur.u32("count")? as usize;
    if h == 0 || w == 0 {
        return cur.fail(format!("empty image size {h}x{w}"));
    }
    let pixels = h * w * 3;
    let nparams = param_count(kind);
    let mut tracks = Vec::new();
    let mut scenes = Vec::new();
    for item in 0..count {
        let seed = cur.u64("item seed")?;
        let frames = cur.u32("frame count")? as usize;
        let params = cur.f64s(nparams, "params")?;
        match kind {
            DatasetKind::Causal => {
                if frames != 1 {
                    return cur.fail(format!("causal item {item} has {frames} frames"));
                }
                let data = cur.f32s(pixels, "pixels")?;
                let truth = cur.f64s(4, "labels")?;
                let (labels, placements) = placements_from(&cur, &params)?;
                let stored = Labels::from_array([0, 1, 2, 3].map(|i| truth[i] != 0.0));
                if stored != labels {
                    return cur.fail(format!("item {item}: labels disagree with placements"));
                }
                scenes.push(CausalScene {
                    image: Image::from_data(h, w, data).expect("sized read"),
                    labels,
                    placements,
                    seed,
                });
            }
            _ => {
                let meta = TrajectoryMeta::from_params(seed, &params).expect("sized read");
                let mut images = Vec::with_capacity(frames);
                for _ in 0..frames {
                    let data = cur.f32s(pixels, "pixels")?;
                    images.push(Image::from_data(h, w, data).expect("sized read"));
                }
                let truth = cur.f64s(frames, "truth")?;
                tracks.push(Trajectory::new(images, truth, meta));
            }
        }
    }
    if cur.pos != bytes.len() {
        return cur.fail(format!("{} trailing bytes", bytes.len() - cur.pos));
    }
    Ok(match kind {
        DatasetKind::FreeFall => Dataset::FreeFall(tracks),
        DatasetKind::Walk => Dataset::Walk(tracks),
        DatasetKind::Causal => Dataset::Causal(scenes),
    })
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".manifest.txt");
    PathBuf::from(name)
}

fn join(ix: &[usize]) -> String {
    ix.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Write `<path>.manifest.txt` next to the dataset and return its path.
pub fn write_manifest(
    path: &Path,
    dataset: &Dataset,
    config: &GenConfig,
    split: &Split,
) -> Result<PathBuf, SceneError> {
    let mut s = String::new();
    let (h, w) = dataset.image_size();
    let a = &config.appearance;
    let _ = writeln!(s, "kind = {}", dataset.kind());
    let _ = writeln!(s, "format_version = {FORMAT_VERSION}");
    let _ = writeln!(s, "items = {}", dataset.len());
    let _ = writeln!(s, "images = {}", dataset.image_count());
    let _ = writeln!(s, "image_size = {h}x{w}");
    let _ = writeln!(s, "seed = {}", config.seed);
    let _ = writeln!(s, "dt = {}", config.dt);
    let _ = writeln!(s, "gravity = {}", config.gravity);
    let _ = writeln!(s, "pixels_per_meter = {}", config.pixels_per_meter);
    let _ = writeln!(s, "background = {}", config.background.name());
    let _ = writeln!(s, "object_radius = {}", config.object_radius);
    let _ = writeln!(s, "noise = {}", config.noise);
    let _ = writeln!(
        s,
        "appearance = peach {} mario {} yoshi {} bowser {}",
        a.peach, a.mario, a.yoshi, a.bowser
    );
    let _ = writeln!(s, "separation = {} cells", config.separation);
    let _ = writeln!(s, "scenes = {}", config.scenes);
    let _ = writeln!(s, "launch_speed = {} {}", config.launch_speed.0, config.launch_speed.1);
    let _ = writeln!(s, "walk_speed = {} {}", config.walk_speed.0, config.walk_speed.1);
    if split.by_half {
        let _ = writeln!(s, "split = first half of every trajectory trains, second half tests");
    }
    let _ = writeln!(s, "train = {}", join(&split.train));
    let _ = writeln!(s, "test = {}", join(&split.test));
    if let Some(ts) = dataset.trajectories() {
        let frames: Vec<usize> = ts.iter().map(Trajectory::len).collect();
        let _ = writeln!(s, "frames = {}", join(&frames));
        let scenes: Vec<usize> = ts.iter().map(|t| t.meta.scene as usize).collect();
        let _ = writeln!(s, "scene_ids = {}", join(&scenes));
    }
    let out = manifest_path(path);
    fs::write(&out, s)?;
    Ok(out)
}
