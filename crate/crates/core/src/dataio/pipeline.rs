//! Whole-sequence inference and evaluation on display-referred frames.

use crate::autodiff::ParamStore;
use crate::color_noise::{gamma_forward, gamma_inverse, NoiseParams};
use crate::error::{shape_err, Result};
use crate::metrics::QualityReport;
use crate::network::{forward_denoise, NetConfig};
use crate::par::Exec;
use crate::tensor::Tensor;

/// Denoises every frame that has a full temporal window. Input and output
/// are display-referred `[L, H, W]`; the output has `L - 2·(T/2)` frames.
pub fn denoise_sequence(
    cfg: &NetConfig,
    store: &ParamStore,
    frames: &Tensor,
    noise: Option<&NoiseParams>,
    exec: Exec,
) -> Result<Tensor> {
    let (len, h, w) = frames.dims3()?;
    let t = cfg.frames();
    if len < t {
        return Err(shape_err(
            "denoise_sequence",
            format!("{len} frames, the network needs {t}"),
        ));
    }
    let linear = gamma_inverse(frames);
    let outs = exec.map_range(len - t + 1, |start| -> Result<Tensor> {
        let window = linear.narrow0(start, start + t)?;
        let d = forward_denoise(cfg, store, &window, noise)?;
        Ok(gamma_forward(&d.output))
    });
    let outs = outs.into_iter().collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = outs.iter().collect();
    Tensor::cat0(&refs)?.reshape(&[len - t + 1, h, w])
}

/// Channel-split color inference: `[L·3, H, W]` interleaved per frame
/// (R, G, B of frame 0, then frame 1, ...) is processed one channel at a
/// time with the grayscale network.
pub fn denoise_color_sequence(
    cfg: &NetConfig,
    store: &ParamStore,
    frames: &Tensor,
    noise: Option<&NoiseParams>,
    exec: Exec,
) -> Result<Tensor> {
    let (lc, h, w) = frames.dims3()?;
    if lc % 3 != 0 {
        return Err(shape_err("denoise_color_sequence", format!("{lc} planes is not a multiple of 3")));
    }
    let len = lc / 3;
    let mut per_channel = Vec::with_capacity(3);
    for c in 0..3 {
        let mut data = Vec::with_capacity(len * h * w);
        for k in 0..len {
            data.extend_from_slice(frames.plane(3 * k + c));
        }
        let channel = Tensor::new(&[len, h, w], data)?;
        per_channel.push(denoise_sequence(cfg, store, &channel, noise, exec)?);
    }
    let out_len = per_channel[0].shape()[0];
    let mut data = Vec::with_capacity(out_len * 3 * h * w);
    for k in 0..out_len {
        for ch in &per_channel {
            data.extend_from_slice(ch.plane(k));
        }
    }
    Tensor::new(&[out_len * 3, h, w], data)
}

/// Scores `pred` against the centered frames of `truth`: when `pred` is
/// shorter, the trimmed frames are split evenly between both ends.
pub fn evaluate_sequence(id: &str, pred: &Tensor, truth: &Tensor, channels: usize) -> Result<QualityReport> {
    let (lp, _, _) = pred.dims3()?;
    let (lt, _, _) = truth.dims3()?;
    if lp > lt || (lt - lp) % (2 * channels) != 0 {
        return Err(shape_err(
            "evaluate_sequence",
            format!("scene `{id}`: {lp} predicted planes against {lt} reference planes"),
        ));
    }
    let offset = (lt - lp) / 2;
    let frame = |t: &Tensor, k: usize| t.narrow0(k * channels, (k + 1) * channels);
    let n = lp / channels;
    let p = (0..n).map(|k| frame(pred, k)).collect::<Result<Vec<_>>>()?;
    let g = (0..n)
        .map(|k| frame(truth, k + offset / channels))
        .collect::<Result<Vec<_>>>()?;
    QualityReport::from_frames(id, &p, &g)
}
