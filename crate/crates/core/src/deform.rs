//! Rigid tap lattices, offset application and deformable filtering.
//!
//! Layouts (channel-first, matching the network heads):
//! * frames `X`: `[T, H, W]`, `T = 2τ + 1`, reference frame at plane `τ`;
//! * offsets `V`: `[N, D, H, W]` with components ordered `(x, y[, t])`;
//! * weights `F`: `[N, H, W]`;
//! * sampled taps `S`: `[N, H, W]`.
//!
//! Taps are ordered frame-major, then row, then column, so with `s`
//! groups of a `3×3×3` lattice each group is one temporal slice.

use std::ops::Range;

use crate::autodiff::{BackCtx, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::par::Exec;
use crate::resampling::{sample_trilinear, sample_trilinear_backward_with, Frames, SamplePoint3};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridKind {
    /// `kh × kw` taps on a single image.
    Spatial,
    /// Independent `kh × kw` taps on each of `2τ+1` frames; offsets are 2D.
    PerFrame,
    /// `kt × kh × kw` taps with 3D offsets.
    SpatioTemporal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tap {
    pub y: i32,
    pub x: i32,
    pub t: i32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RigidGrid {
    kind: GridKind,
    taps: Vec<Tap>,
}

fn half_extent(k: usize, what: &str) -> Result<i32> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::Invalid(format!("{what} kernel extent {k} must be odd")));
    }
    Ok((k / 2) as i32)
}

/// The `kh × kw (× kt)` integer lattice centred at the origin.
pub fn rigid_grid(kh: usize, kw: usize, kt: Option<usize>) -> Result<RigidGrid> {
    let (ry, rx) = (half_extent(kh, "height")?, half_extent(kw, "width")?);
    let (kind, rt) = match kt {
        Some(kt) => (GridKind::SpatioTemporal, half_extent(kt, "temporal")?),
        None => (GridKind::Spatial, 0),
    };
    Ok(RigidGrid::lattice(kind, ry, rx, rt))
}

impl RigidGrid {
    /// Spatio-temporal taps are row-major over `(y, x, t)`, so `t` varies
    /// fastest; per-frame taps are frame-major.
    fn lattice(kind: GridKind, ry: i32, rx: i32, rt: i32) -> Self {
        let mut taps = Vec::new();
        if kind == GridKind::PerFrame {
            for t in -rt..=rt {
                for y in -ry..=ry {
                    for x in -rx..=rx {
                        taps.push(Tap { y, x, t });
                    }
                }
            }
        } else {
            for y in -ry..=ry {
                for x in -rx..=rx {
                    for t in -rt..=rt {
                        taps.push(Tap { y, x, t });
                    }
                }
            }
        }
        Self { kind, taps }
    }

    /// A separate `kh × kw` lattice on every frame `-τ..=τ`.
    pub fn per_frame(kh: usize, kw: usize, tau: usize) -> Result<Self> {
        let (ry, rx) = (half_extent(kh, "height")?, half_extent(kw, "width")?);
        Ok(Self::lattice(GridKind::PerFrame, ry, rx, tau as i32))
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn taps(&self) -> &[Tap] {
        &self.taps
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Offset components per tap: 3 for spatio-temporal grids, else 2.
    pub fn offset_dims(&self) -> usize {
        match self.kind {
            GridKind::SpatioTemporal => 3,
            _ => 2,
        }
    }

    /// Index of the `(0, 0, 0)` tap.
    pub fn center(&self) -> usize {
        self.taps
            .iter()
            .position(|t| *t == Tap { y: 0, x: 0, t: 0 })
            .expect("lattices are symmetric about the origin")
    }

    /// Tap range of the 1-based group `index` out of `s` contiguous groups.
    pub fn group(&self, index: usize, s: usize) -> Result<Range<usize>> {
        if s == 0 || self.len() % s != 0 {
            return Err(Error::Invalid(format!(
                "{} taps cannot be split into {s} groups",
                self.len()
            )));
        }
        if index == 0 || index > s {
            return Err(Error::Invalid(format!("group index {index} not in 1..={s}")));
        }
        let size = self.len() / s;
        Ok((index - 1) * size..index * size)
    }
}

/// Per-pixel, per-tap displacements `[N, D, H, W]`, components `(x, y[, t])`.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField(pub Tensor);

impl OffsetField {
    pub fn zeros(grid: &RigidGrid, h: usize, w: usize) -> Self {
        Self(Tensor::zeros(&[grid.len(), grid.offset_dims(), h, w]))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    fn check(&self, grid: &RigidGrid, h: usize, w: usize) -> Result<()> {
        let want = [grid.len(), grid.offset_dims(), h, w];
        if self.0.shape() != want {
            return Err(shape_err(
                "offsets",
                format!("expected {want:?}, got {:?}", self.0.shape()),
            ));
        }
        Ok(())
    }
}

/// Per-pixel, per-tap averaging weights `[N, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelWeights(pub Tensor);

impl KernelWeights {
    /// One-hot on tap `n` at every pixel.
    pub fn one_hot(n_taps: usize, tap: usize, h: usize, w: usize) -> Self {
        let mut t = Tensor::zeros(&[n_taps, h, w]);
        t.plane_mut(tap).fill(1.0);
        Self(t)
    }

    pub fn uniform(n_taps: usize, h: usize, w: usize) -> Self {
        Self(Tensor::full(&[n_taps, h, w], 1.0 / n_taps as f64))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    fn check(&self, grid: &RigidGrid, h: usize, w: usize) -> Result<()> {
        let want = [grid.len(), h, w];
        if self.0.shape() != want {
            return Err(shape_err(
                "weights",
                format!("expected {want:?}, got {:?}", self.0.shape()),
            ));
        }
        Ok(())
    }
}

fn check_frames(grid: &RigidGrid, frames: &Frames<'_>) -> Result<()> {
    let tau = frames.tau() as i32;
    let reach = grid.taps.iter().map(|t| t.t.abs()).max().unwrap_or(0);
    if grid.kind == GridKind::Spatial && frames.frames != 1 {
        return Err(shape_err("filter", "spatial grid needs a single frame"));
    }
    if grid.kind == GridKind::PerFrame && reach != tau {
        return Err(shape_err(
            "filter",
            format!("per-frame grid spans ±{reach} frames, input has τ={tau}"),
        ));
    }
    Ok(())
}

/// Deformed sampling position of tap `n` for output pixel `(y, x)`.
#[inline]
fn tap_point(
    tap: Tap,
    y: usize,
    x: usize,
    offsets: Option<(&[f64], usize)>,
    n: usize,
    hw: usize,
    pix: usize,
) -> SamplePoint3 {
    let (mut py, mut px, mut pt) = (
        y as f64 + tap.y as f64,
        x as f64 + tap.x as f64,
        tap.t as f64,
    );
    if let Some((v, dims)) = offsets {
        let base = n * dims * hw + pix;
        px += v[base];
        py += v[base + hw];
        if dims == 3 {
            pt += v[base + 2 * hw];
        }
    }
    SamplePoint3::new(py, px, pt)
}

/// Samples every deformed tap: `S[n, y, x] = X(y + ỹ_n, x + x̃_n, t̃_n)`.
pub fn sample_taps(
    frames: &Tensor,
    grid: &RigidGrid,
    offsets: Option<&OffsetField>,
    exec: Exec,
) -> Result<Tensor> {
    let f = Frames::new(frames)?;
    check_frames(grid, &f)?;
    let (h, w) = (f.height, f.width);
    if let Some(v) = offsets {
        v.check(grid, h, w)?;
    }
    let hw = h * w;
    let dims = grid.offset_dims();
    let v = offsets.map(|o| (o.0.data(), dims));
    let mut out = vec![0.0; grid.len() * hw];
    exec.for_each_chunk(&mut out, hw, |n, plane| {
        let tap = grid.taps[n];
        for y in 0..h {
            for x in 0..w {
                let pix = y * w + x;
                plane[pix] = sample_trilinear(&f, tap_point(tap, y, x, v, n, hw, pix));
            }
        }
    });
    Tensor::new(&[grid.len(), h, w], out)
}

/// Backward of [`sample_taps`]: returns `(dX, dV)` for upstream `dS`.
pub fn sample_taps_backward(
    frames: &Tensor,
    grid: &RigidGrid,
    offsets: Option<&OffsetField>,
    grad: &Tensor,
    want_frames: bool,
    exec: Exec,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let f = Frames::new(frames)?;
    let (h, w) = (f.height, f.width);
    let hw = h * w;
    let n_taps = grid.len();
    if grad.shape() != [n_taps, h, w] {
        return Err(shape_err("sample_taps_backward", format!("{:?}", grad.shape())));
    }
    let dims = grid.offset_dims();
    let v = offsets.map(|o| (o.0.data(), dims));
    let g = grad.data();

    // One partial per tap, each holding [dV_n | dX_n], reduced in tap order.
    let vol = if want_frames { frames.len() } else { 0 };
    let part_len = dims * hw + vol;
    let partials = exec.map_range(n_taps, |n| {
        let tap = grid.taps[n];
        let mut part = vec![0.0; part_len];
        let (dv, dx) = part.split_at_mut(dims * hw);
        for y in 0..h {
            for x in 0..w {
                let pix = y * w + x;
                let up = g[n * hw + pix];
                if up == 0.0 {
                    continue;
                }
                let p = tap_point(tap, y, x, v, n, hw, pix);
                let (gy, gx, gt) = sample_trilinear_backward_with(&f, p, up, |i, gi| {
                    if want_frames {
                        dx[i] += gi;
                    }
                });
                dv[pix] = gx;
                dv[hw + pix] = gy;
                if dims == 3 {
                    dv[2 * hw + pix] = gt;
                }
            }
        }
        part
    });

    let dv = offsets.map(|_| {
        let mut data = Vec::with_capacity(n_taps * dims * hw);
        for part in &partials {
            data.extend_from_slice(&part[..dims * hw]);
        }
        Tensor::new(&[n_taps, dims, h, w], data)
    });
    let dx = want_frames.then(|| {
        let mut acc = vec![0.0; vol];
        for part in &partials {
            for (a, b) in acc.iter_mut().zip(&part[dims * hw..]) {
                *a += b;
            }
        }
        Tensor::new(frames.shape(), acc)
    });
    Ok((dx.transpose()?, dv.transpose()?))
}

/// `scale · Σ_{n ∈ taps} S[n] · F[n]` as an `[H, W]` image.
pub fn weighted_tap_sum(samples: &Tensor, weights: &Tensor, taps: Range<usize>, scale: f64) -> Result<Tensor> {
    samples.expect_same_shape("weighted_tap_sum", weights)?;
    let (n, h, w) = samples.dims3()?;
    if taps.end > n || taps.is_empty() {
        return Err(shape_err("weighted_tap_sum", format!("taps {taps:?} of {n}")));
    }
    let mut out = vec![0.0; h * w];
    for k in taps {
        for ((o, s), f) in out.iter_mut().zip(samples.plane(k)).zip(weights.plane(k)) {
            *o += s * f;
        }
    }
    if scale != 1.0 {
        out.iter_mut().for_each(|v| *v *= scale);
    }
    Tensor::new(&[h, w], out)
}

/// Deformable filtering of a single image `X: [H, W]` with a spatial grid.
pub fn filter2d_deformable(
    image: &Tensor,
    grid: &RigidGrid,
    offsets: &OffsetField,
    weights: &KernelWeights,
) -> Result<Tensor> {
    let (h, w) = image.dims2()?;
    if grid.kind != GridKind::Spatial {
        return Err(Error::Invalid("filter2d needs a spatial grid".into()));
    }
    let frames = image.clone().reshape(&[1, h, w])?;
    weights.check(grid, h, w)?;
    let s = sample_taps(&frames, grid, Some(offsets), Exec::default())?;
    weighted_tap_sum(&s, &weights.0, 0..grid.len(), 1.0)
}

/// Applies a spatial deformable kernel to every frame and sums the results.
pub fn filter2d_per_frame(
    frames: &Tensor,
    grid: &RigidGrid,
    offsets: &[OffsetField],
    weights: &[KernelWeights],
) -> Result<Tensor> {
    let (t, h, w) = frames.dims3()?;
    if offsets.len() != t || weights.len() != t {
        return Err(shape_err(
            "filter2d_per_frame",
            format!("{t} frames, {} offsets, {} weights", offsets.len(), weights.len()),
        ));
    }
    let mut acc = Tensor::zeros(&[h, w]);
    for k in 0..t {
        let frame = frames.narrow0(k, k + 1)?.reshape(&[h, w])?;
        acc.add_assign(&filter2d_deformable(&frame, grid, &offsets[k], &weights[k])?)?;
    }
    Ok(acc)
}

fn sample_checked(
    frames: &Tensor,
    grid: &RigidGrid,
    offsets: &OffsetField,
    weights: &KernelWeights,
) -> Result<Tensor> {
    let (_, h, w) = frames.dims3()?;
    offsets.check(grid, h, w)?;
    weights.check(grid, h, w)?;
    sample_taps(frames, grid, Some(offsets), Exec::default())
}

/// Spatio-temporal deformable filtering of `X: [T, H, W]` to `Y: [H, W]`.
pub fn filter3d_deformable(
    frames: &Tensor,
    grid: &RigidGrid,
    offsets: &OffsetField,
    weights: &KernelWeights,
) -> Result<Tensor> {
    let s = sample_checked(frames, grid, offsets, weights)?;
    weighted_tap_sum(&s, &weights.0, 0..grid.len(), 1.0)
}

/// Filtering result of the 1-based tap group `index` out of `s`, scaled by `s`.
pub fn filter_group(
    frames: &Tensor,
    grid: &RigidGrid,
    offsets: &OffsetField,
    weights: &KernelWeights,
    index: usize,
    s: usize,
) -> Result<Tensor> {
    let taps = grid.group(index, s)?;
    let samples = sample_checked(frames, grid, offsets, weights)?;
    weighted_tap_sum(&samples, &weights.0, taps, s as f64)
}

#[derive(Clone, Debug)]
pub struct FilterGrads {
    pub frames: Tensor,
    pub offsets: Tensor,
    pub weights: Tensor,
}

/// Gradients of `Σ dY ⊙ filter3d_deformable(X, V, F)` w.r.t. `X`, `V`, `F`.
pub fn filter3d_backward(
    frames: &Tensor,
    grid: &RigidGrid,
    offsets: &OffsetField,
    weights: &KernelWeights,
    grad: &Tensor,
) -> Result<FilterGrads> {
    let samples = sample_checked(frames, grid, offsets, weights)?;
    let (n, h, w) = samples.dims3()?;
    if grad.shape() != [h, w] {
        return Err(shape_err("filter3d_backward", format!("{:?}", grad.shape())));
    }
    let mut d_f = Tensor::zeros(&[n, h, w]);
    let mut d_s = Tensor::zeros(&[n, h, w]);
    for k in 0..n {
        for (i, g) in grad.data().iter().enumerate() {
            d_f.plane_mut(k)[i] = g * samples.plane(k)[i];
            d_s.plane_mut(k)[i] = g * weights.0.plane(k)[i];
        }
    }
    let (d_x, d_v) = sample_taps_backward(frames, grid, Some(offsets), &d_s, true, Exec::default())?;
    Ok(FilterGrads {
        frames: d_x.expect("requested"),
        offsets: d_v.expect("offsets given"),
        weights: d_f,
    })
}

impl Tape {
    /// Records [`sample_taps`]; `offsets` of `None` samples the rigid grid.
    /// Offsets may be `[N, D, H, W]` or the flat `[N·D, H, W]` a conv emits.
    pub fn deform_sample(&mut self, frames: Var, offsets: Option<Var>, grid: &RigidGrid) -> Result<Var> {
        self.check(frames)?;
        let (_, h, w) = self.value(frames).dims3()?;
        let v_shape = offsets.map(|o| self.value(o).shape().to_vec());
        let v = match offsets {
            Some(o) => {
                self.check(o)?;
                let full = self.value(o).clone();
                let want = [grid.len(), grid.offset_dims(), h, w];
                if full.len() != want.iter().product::<usize>() {
                    return Err(shape_err("offsets", format!("expected {want:?}, got {:?}", full.shape())));
                }
                Some(OffsetField(full.reshape(&want)?))
            }
            None => None,
        };
        let out = sample_taps(self.value(frames), grid, v.as_ref(), Exec::default())?;
        let grid = grid.clone();
        let mut inputs = vec![frames];
        inputs.extend(offsets);
        self.push("deform_sample", out, &inputs, move |ctx: &BackCtx<'_>| {
            let (dx, dv) = sample_taps_backward(
                ctx.inputs[0],
                &grid,
                v.as_ref(),
                ctx.grad,
                ctx.wants[0],
                Exec::default(),
            )?;
            let mut grads = vec![dx];
            if let Some(shape) = &v_shape {
                grads.push(dv.map(|d| d.reshape(shape)).transpose()?);
            }
            Ok(grads)
        })
    }

    /// Records [`weighted_tap_sum`]; the result is `[1, H, W]`.
    pub fn tap_sum(&mut self, samples: Var, weights: Var, taps: Range<usize>, scale: f64) -> Result<Var> {
        self.check(samples)?;
        self.check(weights)?;
        let y = weighted_tap_sum(self.value(samples), self.value(weights), taps.clone(), scale)?;
        let (h, w) = y.dims2()?;
        let out = y.reshape(&[1, h, w])?;
        self.push("tap_sum", out, &[samples, weights], move |ctx: &BackCtx<'_>| {
            let (s, f) = (ctx.inputs[0], ctx.inputs[1]);
            let g = ctx.grad.data();
            let mut ds = Tensor::zeros(s.shape());
            let mut df = Tensor::zeros(f.shape());
            for k in taps.clone() {
                let (sp, fp) = (s.plane(k), f.plane(k));
                for (i, gi) in g.iter().enumerate() {
                    ds.plane_mut(k)[i] = scale * gi * fp[i];
                    df.plane_mut(k)[i] = scale * gi * sp[i];
                }
            }
            Ok(vec![Some(ds), Some(df)])
        })
    }
}
