//! Bilinear/trilinear sampling of a frame stack with the tent-kernel weights
//! `max(0, 1 - |d|)` per axis and their piecewise derivatives.
//!
//! Frame stacks are `[T, H, W]` with `T = 2τ + 1`; the temporal coordinate
//! is relative to the reference frame, so `t = 0` addresses plane `τ`.
//! Points outside the grid see implicit zeros. Bilinear sampling is the
//! `T = 1`, `t = 0` case.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePoint3 {
    pub y: f64,
    pub x: f64,
    pub t: f64,
}

impl SamplePoint3 {
    pub fn new(y: f64, x: f64, t: f64) -> Self {
        Self { y, x, t }
    }
}

/// Borrowed `[T, H, W]` view with `T` odd.
#[derive(Clone, Copy, Debug)]
pub struct Frames<'a> {
    pub data: &'a [f64],
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl<'a> Frames<'a> {
    pub fn new(t: &'a Tensor) -> Result<Self> {
        let (frames, height, width) = t.dims3()?;
        if frames % 2 == 0 {
            return Err(shape_err("Frames", format!("frame count {frames} is not 2τ+1")));
        }
        Ok(Self {
            data: t.data(),
            frames,
            height,
            width,
        })
    }

    pub fn tau(&self) -> usize {
        self.frames / 2
    }

    #[inline]
    fn index(&self, t: usize, y: usize, x: usize) -> usize {
        (t * self.height + y) * self.width + x
    }
}

/// Tent weight `max(0, 1 - |d|)`.
#[inline]
pub fn tent(d: f64) -> f64 {
    (1.0 - d.abs()).max(0.0)
}

/// Derivative of the tent weight w.r.t. the sample coordinate, with the
/// branch convention `0` for `|d| >= 1`, `+1` for `-1 < d < 0`, `-1` otherwise
/// (so `d = 0` takes `-1`).
#[inline]
pub fn tent_slope(d: f64) -> f64 {
    if d.abs() >= 1.0 {
        0.0
    } else if d < 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// The two lattice points that can carry non-zero weight or slope.
#[derive(Clone, Copy)]
struct AxisTaps {
    idx: [usize; 2],
    valid: [bool; 2],
    weight: [f64; 2],
    slope: [f64; 2],
}

#[inline]
fn axis_taps(p: f64, n: usize) -> AxisTaps {
    let base = p.floor();
    let mut out = AxisTaps {
        idx: [0; 2],
        valid: [false; 2],
        weight: [0.0; 2],
        slope: [0.0; 2],
    };
    for k in 0..2 {
        let i = base + k as f64;
        if i >= 0.0 && i < n as f64 {
            let d = p - i;
            out.idx[k] = i as usize;
            out.valid[k] = true;
            out.weight[k] = tent(d);
            out.slope[k] = tent_slope(d);
        }
    }
    out
}

/// Interpolated value at `p`; zero outside the grid.
pub fn sample_trilinear(frames: &Frames<'_>, p: SamplePoint3) -> f64 {
    let ay = axis_taps(p.y, frames.height);
    let ax = axis_taps(p.x, frames.width);
    let at = axis_taps(p.t + frames.tau() as f64, frames.frames);
    let mut acc = 0.0;
    for kt in 0..2 {
        if !at.valid[kt] || at.weight[kt] == 0.0 {
            continue;
        }
        for ky in 0..2 {
            if !ay.valid[ky] || ay.weight[ky] == 0.0 {
                continue;
            }
            let wty = at.weight[kt] * ay.weight[ky];
            let row = frames.index(at.idx[kt], ay.idx[ky], 0);
            for kx in 0..2 {
                if ax.valid[kx] {
                    acc += frames.data[row + ax.idx[kx]] * wty * ax.weight[kx];
                }
            }
        }
    }
    acc
}

/// Bilinear sampling of a single `[H, W]` plane.
pub fn sample_bilinear(frames: &Frames<'_>, y: f64, x: f64) -> f64 {
    sample_trilinear(frames, SamplePoint3 { y, x, t: 0.0 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrad {
    pub y: f64,
    pub x: f64,
    pub t: f64,
    /// `(flat index into the frame stack, gradient)` for each contributing
    /// lattice point.
    pub volume: Vec<(usize, f64)>,
}

/// Backward of [`sample_trilinear`] for an upstream gradient `upstream`.
///
/// Calls `scatter(index, g)` for each contributing lattice point and returns
/// the coordinate gradients `(dy, dx, dt)`.
#[inline]
pub(crate) fn sample_trilinear_backward_with(
    frames: &Frames<'_>,
    p: SamplePoint3,
    upstream: f64,
    mut scatter: impl FnMut(usize, f64),
) -> (f64, f64, f64) {
    let ay = axis_taps(p.y, frames.height);
    let ax = axis_taps(p.x, frames.width);
    let at = axis_taps(p.t + frames.tau() as f64, frames.frames);
    let (mut gy, mut gx, mut gt) = (0.0, 0.0, 0.0);
    for kt in 0..2 {
        if !at.valid[kt] {
            continue;
        }
        for ky in 0..2 {
            if !ay.valid[ky] {
                continue;
            }
            let row = frames.index(at.idx[kt], ay.idx[ky], 0);
            for kx in 0..2 {
                if !ax.valid[kx] {
                    continue;
                }
                let v = frames.data[row + ax.idx[kx]];
                let (wt, wy, wx) = (at.weight[kt], ay.weight[ky], ax.weight[kx]);
                gy += v * ay.slope[ky] * wx * wt;
                gx += v * wy * ax.slope[kx] * wt;
                gt += v * wy * wx * at.slope[kt];
                let w = wy * wx * wt;
                if w != 0.0 {
                    scatter(row + ax.idx[kx], upstream * w);
                }
            }
        }
    }
    (upstream * gy, upstream * gx, upstream * gt)
}

pub fn sample_trilinear_backward(frames: &Frames<'_>, p: SamplePoint3, upstream: f64) -> SampleGrad {
    let mut volume = Vec::with_capacity(8);
    let (y, x, t) =
        sample_trilinear_backward_with(frames, p, upstream, |i, g| volume.push((i, g)));
    SampleGrad { y, x, t, volume }
}
