use rand::Rng;

use super::render::{Image, Rgb};
use super::rng::{self, label};
use super::{background_for, GenConfig, SceneError};

/// Side of every character sprite, pixels.
pub const SPRITE: usize = 12;
/// Pixels per feature-grid cell after three 2× poolings.
pub const CELL: usize = 8;
const ATTEMPTS: usize = 1000;
const REGENERATIONS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Character {
    Peach = 0,
    Mario = 1,
    Yoshi = 2,
    Bowser = 3,
}

impl Character {
    pub const ALL: [Character; 4] = [
        Character::Peach,
        Character::Mario,
        Character::Yoshi,
        Character::Bowser,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Character::Peach => "peach",
            Character::Mario => "mario",
            Character::Yoshi => "yoshi",
            Character::Bowser => "bowser",
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    fn rows(self) -> [&'static str; SPRITE] {
        match self {
            Character::Peach => [
                "...YYYYY....",
                "..YYYYYYY...",
                "..YYSSSYY...",
                "..YSSKSKY...",
                "..YYSSSSY...",
                "..YY.PP.Y...",
                "...PPPPP....",
                "..PPPWPPP...",
                "..PPPPPPP...",
                ".PPPPPPPPP..",
                ".PPPPPPPPP..",
                "..SS...SS...",
            ],
            Character::Mario => [
                "...RRRRR....",
                "..RRRRRRRRR.",
                "..HHHSSKS...",
                ".HSHSSSKSSS.",
                ".HSHHSSSKSSS",
                ".HHSSSSKKKK.",
                "...SSSSSSS..",
                "..RRBRRR....",
                ".RRRBRRBRRR.",
                "RRRRBBBBRRRR",
                "SSRBYBBYBRSS",
                "..BBB..BBB..",
            ],
            Character::Yoshi => [
                "......GGG...",
                ".....GGGGG..",
                "....GGWWKG..",
                "....GGWWKGG.",
                "GG..GGGGGGGG",
                "GGG.GGGGGGGG",
                ".GGGGGGG....",
                "..GWWWWG....",
                "..GWWWWGG...",
                "..GGGGGG....",
                "...RR.RR....",
                "..RRR.RRR...",
            ],
            Character::Bowser => [
                "..W....W....",
                "..OOOOOOO...",
                ".OOOKOOOOO..",
                ".OOOOOOWWOO.",
                "..OOOOOOOO..",
                "DWDWDOOOOO..",
                "DDDDDOOOOOO.",
                "DWDWDOCCCOO.",
                "DDDDDOCCCOO.",
                ".DDDOOCCCO..",
                "..OOO..OOO..",
                ".OOOO..OOOO.",
            ],
        }
    }
}

fn palette(code: u8) -> Option<Rgb> {
    Some(match code {
        b'Y' => [0.98, 0.86, 0.3],
        b'S' => [0.98, 0.78, 0.62],
        b'K' => [0.05, 0.05, 0.05],
        b'P' => [0.96, 0.5, 0.72],
        b'W' => [0.97, 0.97, 0.97],
        b'R' => [0.9, 0.08, 0.08],
        b'H' => [0.45, 0.25, 0.1],
        b'B' => [0.15, 0.2, 0.8],
        b'G' => [0.2, 0.78, 0.2],
        b'O' => [0.98, 0.55, 0.08],
        b'D' => [0.1, 0.4, 0.12],
        b'C' => [0.98, 0.9, 0.65],
        _ => return None,
    })
}

/// Sprite pixels in row-major order; `None` is transparent.
pub fn sprite_mask(character: Character) -> Vec<Option<Rgb>> {
    character
        .rows()
        .iter()
        .flat_map(|row| row.bytes().map(palette))
        .collect()
}

/// Which characters a scene contains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Labels {
    pub peach: bool,
    pub mario: bool,
    pub yoshi: bool,
    pub bowser: bool,
}

impl Labels {
    pub fn present(&self, c: Character) -> bool {
        match c {
            Character::Peach => self.peach,
            Character::Mario => self.mario,
            Character::Yoshi => self.yoshi,
            Character::Bowser => self.bowser,
        }
    }

    pub fn as_array(&self) -> [bool; 4] {
        [self.peach, self.mario, self.yoshi, self.bowser]
    }

    pub fn from_array(a: [bool; 4]) -> Self {
        Self {
            peach: a[0],
            mario: a[1],
            yoshi: a[2],
            bowser: a[3],
        }
    }

    /// Peach never appears without Mario.
    pub fn satisfies_rule(&self) -> bool {
        !self.peach || self.mario
    }
}

/// Top-left corner and reflection flags of one drawn sprite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub character: Character,
    pub row: usize,
    pub col: usize,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl Placement {
    /// Pixel centre of the sprite as `(row, col)`.
    pub fn centre(&self) -> (f64, f64) {
        let half = SPRITE as f64 / 2.0;
        (self.row as f64 + half, self.col as f64 + half)
    }

    fn overlaps(&self, other: &Placement) -> bool {
        self.row < other.row + SPRITE
            && other.row < self.row + SPRITE
            && self.col < other.col + SPRITE
            && other.col < self.col + SPRITE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CausalScene {
    pub image: Image,
    pub labels: Labels,
    pub placements: Vec<Placement>,
    pub seed: u64,
}

fn draw_labels<R: Rng + ?Sized>(config: &GenConfig, rng: &mut R) -> Labels {
    let a = &config.appearance;
    let peach = rng.random_bool(a.peach);
    let mario = peach || rng.random_bool(a.mario);
    Labels {
        peach,
        mario,
        yoshi: rng.random_bool(a.yoshi),
        bowser: rng.random_bool(a.bowser),
    }
}

/// Rejection-samples one placement per present character. With a
/// separation, each character is centred in a random grid cell at least
/// that many cells from every other character, jittered by a pixel.
fn place<R: Rng + ?Sized>(
    labels: &Labels,
    size: usize,
    separation: usize,
    rng: &mut R,
) -> Option<Vec<Placement>> {
    let chars: Vec<Character> = Character::ALL
        .into_iter()
        .filter(|&c| labels.present(c))
        .collect();
    let span = size - SPRITE;
    let grid = size / CELL;
    let corner = |cell: usize, jitter: i64| {
        let centred = (cell * CELL + CELL / 2) as i64 - (SPRITE / 2) as i64 + jitter;
        centred.clamp(0, span as i64) as usize
    };
    'attempt: for _ in 0..ATTEMPTS {
        let mut out: Vec<Placement> = Vec::with_capacity(chars.len());
        let mut cells: Vec<(usize, usize)> = Vec::with_capacity(chars.len());
        for &character in &chars {
            let (row, col) = if separation == 0 {
                (rng.random_range(0..=span), rng.random_range(0..=span))
            } else {
                let cell = (rng.random_range(0..grid), rng.random_range(0..grid));
                let near = cells
                    .iter()
                    .any(|q| q.0.abs_diff(cell.0).max(q.1.abs_diff(cell.1)) < separation);
                if near {
                    continue 'attempt;
                }
                cells.push(cell);
                (
                    corner(cell.0, rng.random_range(-1..=1)),
                    corner(cell.1, rng.random_range(-1..=1)),
                )
            };
            let p = Placement {
                character,
                row,
                col,
                flip_h: rng.random_bool(0.5),
                flip_v: rng.random_bool(0.5),
            };
            if out.iter().any(|q| q.overlaps(&p)) {
                continue 'attempt;
            }
            out.push(p);
        }
        return Some(out);
    }
    None
}

fn draw_sprite(img: &mut Image, p: &Placement) {
    let mask = sprite_mask(p.character);
    for r in 0..SPRITE {
        let sr = if p.flip_v { SPRITE - 1 - r } else { r };
        for c in 0..SPRITE {
            let sc = if p.flip_h { SPRITE - 1 - c } else { c };
            if let Some(rgb) = mask[sr * SPRITE + sc] {
                img.set(p.row + r, p.col + c, rgb);
            }
        }
    }
}

/// Render one scene from its stream seed.
pub(crate) fn causal_scene(config: &GenConfig, seed: u64) -> Result<CausalScene, SceneError> {
    let size = config.image_size;
    if size < SPRITE {
        return Err(SceneError::Config(format!(
            "image size {size} is smaller than a {SPRITE}px sprite"
        )));
    }
    let mut rng = rng::seeded(seed);
    for _ in 0..REGENERATIONS {
        let labels = draw_labels(config, &mut rng);
        let Some(placements) = place(&labels, size, config.separation, &mut rng) else {
            continue;
        };
        let mut image = background_for(config, 0, &mut rng);
        for p in &placements {
            draw_sprite(&mut image, p);
        }
        image.add_noise(config.noise, &mut rng);
        return Ok(CausalScene {
            image,
            labels,
            placements,
            seed,
        });
    }
    Err(SceneError::Placement(format!(
        "could not place characters without overlap in a {size}x{size} image \
         (scene seed {seed:#018x})"
    )))
}

pub fn generate_causal(
    config: &GenConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<CausalScene>, SceneError> {
    config.validate()?;
    if count == 0 {
        return Err(SceneError::Config("count must be at least 1".into()));
    }
    let grid = config.image_size / CELL;
    if config.separation >= grid {
        return Err(SceneError::Config(format!(
            "separation {} leaves no room for four characters on a {grid}x{grid} grid \
             (at most {})",
            config.separation,
            grid - 1
        )));
    }
    (0..count)
        .map(|i| causal_scene(config, rng::derive_seed(seed, &[label::CAUSAL, i as u64])))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sprites_are_square_and_distinct() {
        for c in Character::ALL {
            let rows = c.rows();
            assert!(rows.iter().all(|r| r.len() == SPRITE), "{}", c.name());
            assert!(rows.iter().all(|r| r.bytes().all(|b| b == b'.' || palette(b).is_some())));
        }
        for a in Character::ALL {
            for b in Character::ALL {
                if a != b {
                    assert_ne!(sprite_mask(a), sprite_mask(b));
                }
            }
        }
    }

    #[test]
    fn sprites_are_not_mirror_symmetric() {
        for c in Character::ALL {
            let m = sprite_mask(c);
            let flipped: Vec<_> = (0..SPRITE * SPRITE)
                .map(|i| m[(i / SPRITE) * SPRITE + SPRITE - 1 - i % SPRITE])
                .collect();
            assert_ne!(m, flipped, "{}", c.name());
        }
    }

    #[test]
    fn overlap_test_is_symmetric() {
        let p = |row, col| Placement {
            character: Character::Mario,
            row,
            col,
            flip_h: false,
            flip_v: false,
        };
        assert!(p(0, 0).overlaps(&p(11, 11)));
        assert!(!p(0, 0).overlaps(&p(12, 0)));
        assert!(!p(0, 12).overlaps(&p(0, 0)));
    }
}
