//! PSNR and SSIM scoring.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Reported PSNR for identical inputs.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape("mse", b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.len() as f64)
}

/// `10·log10(peak² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" filtering with the SSIM window.
fn filter_valid(img: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

fn plane_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w] => Ok((1, *h, *w)),
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(shape_err("ssim", format!("expected [H, W] or [C, H, W], got {s:?}"))),
    }
}

/// Mean SSIM over all 11×11 Gaussian windows (σ = 1.5, dynamic range 1),
/// averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape("ssim", b)?;
    let (c, h, w) = plane_dims(a)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(shape_err(
            "ssim",
            format!("{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let n = h * w;
    let total: f64 = (0..c)
        .map(|k| plane_ssim(&a.data()[k * n..(k + 1) * n], &b.data()[k * n..(k + 1) * n], h, w))
        .sum();
    Ok(total / c as f64)
}

fn plane_ssim(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let win = gaussian_window();
    let prod = |f: &dyn Fn(usize) -> f64| (0..x.len()).map(f).collect::<Vec<_>>();
    let mu_x = filter_valid(x, h, w, &win);
    let mu_y = filter_valid(y, h, w, &win);
    let xx = filter_valid(&prod(&|i| x[i] * x[i]), h, w, &win);
    let yy = filter_valid(&prod(&|i| y[i] * y[i]), h, w, &win);
    let xy = filter_valid(&prod(&|i| x[i] * y[i]), h, w, &win);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    total / n as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub frames: Vec<FrameScore>,
}

impl QualityReport {
    /// Scores display-referred frame pairs and averages over frames.
    pub fn from_frames(id: impl Into<String>, pred: &[Tensor], truth: &[Tensor]) -> Result<Self> {
        if pred.len() != truth.len() || pred.is_empty() {
            return Err(shape_err(
                "QualityReport",
                format!("{} predicted vs {} reference frames", pred.len(), truth.len()),
            ));
        }
        let mut frames = Vec::with_capacity(pred.len());
        for (i, (p, t)) in pred.iter().zip(truth).enumerate() {
            frames.push(FrameScore {
                frame: i,
                psnr: psnr(p, t, 1.0)?,
                ssim: ssim(p, t)?,
            });
        }
        let n = frames.len() as f64;
        Ok(Self {
            id: id.into(),
            psnr: frames.iter().map(|f| f.psnr).sum::<f64>() / n,
            ssim: frames.iter().map(|f| f.ssim).sum::<f64>() / n,
            frames,
        })
    }
}
