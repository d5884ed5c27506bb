//! Line-oriented sequence manifests.
//!
//! ```text
//! #format=gray16
//! #noise=0.0025,0.01
//! scene_000<TAB>scene_000/f0.png,scene_000/f1.png,...
//! ```
//!
//! `#key=value` lines are directives; other `#` lines are comments. Frame
//! paths are relative to the manifest's directory unless absolute.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::image_io::{read_image, PixelFormat};
use crate::color_noise::NoiseParams;
use crate::error::{io_err, shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneEntry {
    pub id: String,
    pub frames: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceManifest {
    pub format: PixelFormat,
    /// Noise parameters the frames were synthesized with, if known.
    pub noise: Option<NoiseParams>,
    pub scenes: Vec<SceneEntry>,
    /// Directory relative frame paths are resolved against.
    pub base_dir: PathBuf,
}

fn bad(detail: String) -> Error {
    Error::Format {
        what: "manifest",
        detail,
    }
}

impl SequenceManifest {
    pub fn new(format: PixelFormat, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            format,
            noise: None,
            scenes: Vec::new(),
            base_dir: base_dir.into(),
        }
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut m = Self::new(PixelFormat::Gray8, base_dir);
        let mut seen = HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim_end();
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.split_once('=') {
                    match k.trim() {
                        "format" => m.format = v.trim().parse()?,
                        "noise" => {
                            let (a, b) = v
                                .split_once(',')
                                .ok_or_else(|| bad(format!("line {}: bad noise directive", no + 1)))?;
                            let parse = |s: &str| {
                                s.trim()
                                    .parse::<f64>()
                                    .map_err(|_| bad(format!("line {}: bad noise value", no + 1)))
                            };
                            m.noise = Some(NoiseParams::new(parse(a)?, parse(b)?)?);
                        }
                        _ => {}
                    }
                }
                continue;
            }
            let (id, frames) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("line {}: expected `id<TAB>frames`", no + 1)))?;
            let frames: Vec<PathBuf> = frames
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(PathBuf::from)
                .collect();
            if frames.is_empty() {
                return Err(bad(format!("line {}: scene `{id}` has no frames", no + 1)));
            }
            if !seen.insert(id.to_string()) {
                return Err(bad(format!("duplicate scene id `{id}`")));
            }
            m.scenes.push(SceneEntry {
                id: id.to_string(),
                frames,
            });
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "#format={}", self.format);
        if let Some(n) = &self.noise {
            let _ = writeln!(s, "#noise={:?},{:?}", n.sigma_s, n.sigma_r);
        }
        for scene in &self.scenes {
            let frames: Vec<String> = scene
                .frames
                .iter()
                .map(|p| p.to_string_lossy().into_owned())
                .collect();
            let _ = writeln!(s, "{}\t{}", scene.id, frames.join(","));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Loads every frame of a scene as `[L, C, H, W]` planes, flattened to
    /// `[L·C, H, W]`; returns the tensor and the channel count.
    pub fn load_scene(&self, scene: &SceneEntry) -> Result<(Tensor, usize)> {
        let mut frames = Vec::with_capacity(scene.frames.len());
        for p in &scene.frames {
            let (t, _) = read_image(&self.resolve(p))?;
            if let Some(first) = frames.first() {
                let first: &Tensor = first;
                if first.shape() != t.shape() {
                    return Err(shape_err(
                        "load_scene",
                        format!(
                            "scene `{}`: frame {} is {:?}, expected {:?}",
                            scene.id,
                            p.display(),
                            t.shape(),
                            first.shape()
                        ),
                    ));
                }
            }
            frames.push(t);
        }
        let c = frames[0].shape()[0];
        let refs: Vec<&Tensor> = frames.iter().collect();
        Ok((Tensor::cat0(&refs)?, c))
    }

    /// Loads a grayscale scene as `[L, H, W]`.
    pub fn load_gray_scene(&self, scene: &SceneEntry) -> Result<Tensor> {
        let (t, c) = self.load_scene(scene)?;
        if c != 1 {
            return Err(Error::Format {
                what: "manifest",
                detail: format!("scene `{}` has {c} channels, expected grayscale", scene.id),
            });
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let text = "#format=gray16\n#noise=0.0025,0.01\n# comment\na\tx/0.png,x/1.png,x/2.png\nb\ty/0.png\n";
        let m = SequenceManifest::parse(text, Path::new("/data")).unwrap();
        assert_eq!(m.format, PixelFormat::Gray16);
        assert_eq!(m.noise, Some(NoiseParams::LOW));
        assert_eq!(m.scenes.len(), 2);
        assert_eq!(m.resolve(&m.scenes[0].frames[1]), Path::new("/data/x/1.png"));
        let again = SequenceManifest::parse(&m.to_text(), Path::new("/data")).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn malformed_lines() {
        let base = Path::new(".");
        assert!(SequenceManifest::parse("a x.png\n", base).is_err());
        assert!(SequenceManifest::parse("a\t\n", base).is_err());
        assert!(SequenceManifest::parse("a\tx.png\na\ty.png\n", base).is_err());
        assert!(SequenceManifest::parse("#format=cmyk\n", base).is_err());
    }
}
