//! Synthetic textured sequences under rigid integer translation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image_io::{write_image, PixelFormat};
use super::manifest::{SceneEntry, SequenceManifest};
use crate::error::{io_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatternFamily {
    Gradients,
    Checkers,
    Blobs,
    Strokes,
    /// Each scene picks one of the other families.
    Mixed,
}

impl fmt::Display for PatternFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatternFamily::Gradients => "gradients",
            PatternFamily::Checkers => "checkers",
            PatternFamily::Blobs => "blobs",
            PatternFamily::Strokes => "strokes",
            PatternFamily::Mixed => "mixed",
        })
    }
}

impl FromStr for PatternFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradients" => Ok(PatternFamily::Gradients),
            "checkers" => Ok(PatternFamily::Checkers),
            "blobs" => Ok(PatternFamily::Blobs),
            "strokes" => Ok(PatternFamily::Strokes),
            "mixed" => Ok(PatternFamily::Mixed),
            _ => Err(Error::Invalid(format!("unknown pattern family `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDatasetConfig {
    pub num_scenes: usize,
    pub size: usize,
    pub frames: usize,
    /// Largest per-frame translation along each axis, in pixels.
    pub motion: usize,
    pub pattern: PatternFamily,
    pub seed: u64,
}

impl Default for ToyDatasetConfig {
    fn default() -> Self {
        Self {
            num_scenes: 16,
            size: 64,
            frames: 5,
            motion: 3,
            pattern: PatternFamily::Mixed,
            seed: 0,
        }
    }
}

const LOW: f64 = 0.12;
const HIGH: f64 = 0.92;

enum Texture {
    Gradients {
        a: f64,
        b: f64,
        waves: Vec<(f64, f64, f64, f64)>,
    },
    Checkers {
        cell: f64,
        phase: (f64, f64),
        levels: (f64, f64),
        shade: (f64, f64),
    },
    Blobs {
        background: f64,
        blobs: Vec<(f64, f64, f64, f64)>,
    },
    Strokes {
        background: f64,
        ink: f64,
        segments: Vec<(f64, f64, f64, f64, f64)>,
    },
}

fn pick_family(rng: &mut ChaCha8Rng, family: PatternFamily) -> PatternFamily {
    match family {
        PatternFamily::Mixed => [
            PatternFamily::Gradients,
            PatternFamily::Checkers,
            PatternFamily::Blobs,
            PatternFamily::Strokes,
        ][rng.random_range(0..4)],
        f => f,
    }
}

impl Texture {
    /// `extent` is the side of the square region the texture must cover.
    fn random(rng: &mut ChaCha8Rng, family: PatternFamily, extent: f64) -> Self {
        match pick_family(rng, family) {
            PatternFamily::Gradients => Texture::Gradients {
                a: rng.random_range(-1.0..1.0) / extent,
                b: rng.random_range(-1.0..1.0) / extent,
                waves: (0..3)
                    .map(|_| {
                        let freq = rng.random_range(0.08..0.5);
                        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                        (
                            freq * angle.cos(),
                            freq * angle.sin(),
                            rng.random_range(0.0..std::f64::consts::TAU),
                            rng.random_range(0.05..0.2),
                        )
                    })
                    .collect(),
            },
            PatternFamily::Checkers => Texture::Checkers {
                cell: rng.random_range(3.0..9.0),
                phase: (rng.random_range(0.0..8.0), rng.random_range(0.0..8.0)),
                levels: (rng.random_range(LOW..0.45), rng.random_range(0.55..HIGH)),
                shade: (rng.random_range(-0.1..0.1) / extent, rng.random_range(-0.1..0.1) / extent),
            },
            PatternFamily::Blobs => Texture::Blobs {
                background: rng.random_range(0.2..0.6),
                blobs: (0..(extent * extent / 60.0).ceil() as usize)
                    .map(|_| {
                        (
                            rng.random_range(0.0..extent),
                            rng.random_range(0.0..extent),
                            rng.random_range(1.5..6.0),
                            rng.random_range(-0.3..0.35),
                        )
                    })
                    .collect(),
            },
            PatternFamily::Strokes | PatternFamily::Mixed => {
                let n = (extent * extent / 40.0).ceil() as usize;
                Texture::Strokes {
                    background: rng.random_range(0.6..HIGH),
                    ink: rng.random_range(LOW..0.35),
                    segments: (0..n)
                        .map(|_| {
                            let (y, x) = (rng.random_range(0.0..extent), rng.random_range(0.0..extent));
                            let len = rng.random_range(3.0..10.0);
                            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                            (y, x, y + len * angle.sin(), x + len * angle.cos(), rng.random_range(0.5..1.4))
                        })
                        .collect(),
                }
            }
        }
    }

    fn eval(&self, u: f64, v: f64) -> f64 {
        let raw = match self {
            Texture::Gradients { a, b, waves } => {
                0.5 + 0.3 * (a * u + b * v)
                    + waves.iter().map(|&(fy, fx, ph, amp)| amp * (fy * u + fx * v + ph).sin()).sum::<f64>()
            }
            Texture::Checkers {
                cell,
                phase,
                levels,
                shade,
            } => {
                let cy = ((u + phase.0) / cell).floor() as i64;
                let cx = ((v + phase.1) / cell).floor() as i64;
                let base = if (cy + cx).rem_euclid(2) == 0 { levels.0 } else { levels.1 };
                base + shade.0 * u + shade.1 * v
            }
            Texture::Blobs { background, blobs } => {
                background
                    + blobs
                        .iter()
                        .map(|&(by, bx, r, amp)| {
                            let d2 = (u - by).powi(2) + (v - bx).powi(2);
                            amp * (-d2 / (2.0 * r * r)).exp()
                        })
                        .sum::<f64>()
            }
            Texture::Strokes {
                background,
                ink,
                segments,
            } => {
                let cover = segments
                    .iter()
                    .map(|&(y0, x0, y1, x1, w)| {
                        let d = segment_distance(u, v, y0, x0, y1, x1);
                        (1.0 - (d - w).max(0.0)).clamp(0.0, 1.0)
                    })
                    .fold(0.0, f64::max);
                background + (ink - background) * cover
            }
        };
        raw.clamp(LOW, HIGH)
    }
}

fn segment_distance(u: f64, v: f64, y0: f64, x0: f64, y1: f64, x1: f64) -> f64 {
    let (dy, dx) = (y1 - y0, x1 - x0);
    let len2 = dy * dy + dx * dx;
    let s = if len2 > 0.0 {
        (((u - y0) * dy + (v - x0) * dx) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((u - y0 - s * dy).powi(2) + (v - x0 - s * dx).powi(2)).sqrt()
}

/// A generated scene: display-referred frames `[L, H, W]` in `[0, 1]` and
/// the per-frame translation `(dy, dx)`. Frame `k` shows the texture moved
/// by `(k - c)·(dy, dx)` where `c` is the center frame.
#[derive(Clone, Debug)]
pub struct ToyScene {
    pub frames: Tensor,
    pub velocity: (i64, i64),
}

pub fn generate_scene(cfg: &ToyDatasetConfig, index: usize) -> Result<ToyScene> {
    if cfg.size == 0 || cfg.frames == 0 {
        return Err(Error::Invalid("toy scenes need a positive size and frame count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let m = cfg.motion as i64;
    let velocity = (rng.random_range(-m..=m), rng.random_range(-m..=m));
    let c = (cfg.frames / 2) as i64;
    let extent = (cfg.size + 2 * cfg.motion * cfg.frames) as f64;
    let texture = Texture::random(&mut rng, cfg.pattern, extent);
    let margin = (cfg.motion * cfg.frames) as f64;
    let (h, w) = (cfg.size, cfg.size);
    let mut data = Vec::with_capacity(cfg.frames * h * w);
    for k in 0..cfg.frames as i64 {
        let (sy, sx) = ((k - c) * velocity.0, (k - c) * velocity.1);
        for y in 0..h {
            for x in 0..w {
                let u = y as f64 - sy as f64 + margin;
                let v = x as f64 - sx as f64 + margin;
                data.push(texture.eval(u, v));
            }
        }
    }
    Ok(ToyScene {
        frames: Tensor::new(&[cfg.frames, h, w], data)?,
        velocity,
    })
}

/// Writes `num_scenes` scenes as 16-bit PNGs under `out_dir` plus
/// `out_dir/manifest.txt`.
pub fn make_toy_dataset(cfg: &ToyDatasetConfig, out_dir: &Path) -> Result<SequenceManifest> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut manifest = SequenceManifest::new(PixelFormat::Gray16, out_dir);
    for i in 0..cfg.num_scenes {
        let scene = generate_scene(cfg, i)?;
        let id = format!("scene_{i:04}");
        let dir = out_dir.join(&id);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut frames = Vec::with_capacity(cfg.frames);
        for k in 0..cfg.frames {
            let rel = PathBuf::from(&id).join(format!("f{k:03}.png"));
            write_image(&out_dir.join(&rel), &scene.frames.narrow0(k, k + 1)?, PixelFormat::Gray16)?;
            frames.push(rel);
        }
        manifest.scenes.push(SceneEntry { id, frames });
    }
    manifest.save(&out_dir.join("manifest.txt"))?;
    Ok(manifest)
}
