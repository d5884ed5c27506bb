//! 3×3, stride 1, zero-padded 2D cross-correlation via im2col + GEMM.

use super::tape::{BackCtx, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

const K: usize = 3;
const TAPS: usize = K * K;

/// `cols[(c*9 + ky*3 + kx), y*W + x] = x[c, y+ky-1, x+kx-1]` (0 outside).
fn im2col(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; c * TAPS * hw];
    for ch in 0..c {
        let src = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut cols[(ch * TAPS + ky * K + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[sy as usize * w..][..w];
                    let drow = &mut row[y * w..][..w];
                    match kx {
                        0 => drow[1..].copy_from_slice(&srow[..w - 1]),
                        1 => drow.copy_from_slice(srow),
                        _ => drow[..w - 1].copy_from_slice(&srow[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut x = vec![0.0; c * hw];
    for ch in 0..c {
        let dst = &mut x[ch * hw..(ch + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &cols[(ch * TAPS + ky * K + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let d = &mut dst[sy as usize * w..][..w];
                    let r = &row[y * w..][..w];
                    match kx {
                        0 => d[..w - 1].iter_mut().zip(&r[1..]).for_each(|(a, b)| *a += b),
                        1 => d.iter_mut().zip(r).for_each(|(a, b)| *a += b),
                        _ => d[1..].iter_mut().zip(&r[..w - 1]).for_each(|(a, b)| *a += b),
                    }
                }
            }
        }
    }
    x
}

/// `c[m×n] = beta*c + a[m×k]·b[k×n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides describe in-bounds views of `a` (m×k), `b` (k×n) and
    // the row-major `c` (m×n); the asserts above and the callers' shape
    // checks guarantee the extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_shapes(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (c_in, h, w) = x.dims3()?;
    let ws = weights.shape();
    if ws.len() != 4 || ws[1] != c_in || ws[2] != K || ws[3] != K {
        return Err(shape_err(
            "conv2d",
            format!("weights {ws:?} for input {:?}", x.shape()),
        ));
    }
    if bias.shape() != [ws[0]] {
        return Err(shape_err(
            "conv2d",
            format!("bias {:?} for {} output channels", bias.shape(), ws[0]),
        ));
    }
    Ok((c_in, ws[0], h, w))
}

/// Forward pass; also returns the im2col buffer for reuse in backward.
pub fn conv2d_forward(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (c_in, c_out, h, w) = check_shapes(x, weights, bias)?;
    let hw = h * w;
    let kk = c_in * TAPS;
    let cols = im2col(x.data(), c_in, h, w);
    let mut out = vec![0.0; c_out * hw];
    for (co, plane) in out.chunks_mut(hw).enumerate() {
        plane.fill(bias.data()[co]);
    }
    gemm(
        c_out,
        kk,
        hw,
        weights.data(),
        (kk as isize, 1),
        &cols,
        (hw as isize, 1),
        1.0,
        &mut out,
    );
    Ok((Tensor::new(&[c_out, h, w], out)?, cols))
}

pub fn conv2d(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    conv2d_forward(x, weights, bias).map(|(y, _)| y)
}

/// Gradients w.r.t. (input, weights, bias); `want_input` skips the col2im.
pub fn conv2d_backward(
    grad: &Tensor,
    cols: &[f64],
    x_shape: &[usize],
    weights: &Tensor,
    want_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let c_out = weights.shape()[0];
    let hw = h * w;
    let kk = c_in * TAPS;
    let g = grad.data();

    let mut dw = vec![0.0; c_out * kk];
    gemm(c_out, hw, kk, g, (hw as isize, 1), cols, (1, hw as isize), 0.0, &mut dw);
    let db: Vec<f64> = g.chunks(hw).map(|p| p.iter().sum()).collect();

    let dx = if want_input {
        let mut dcols = vec![0.0; kk * hw];
        gemm(kk, c_out, hw, weights.data(), (1, kk as isize), g, (hw as isize, 1), 0.0, &mut dcols);
        Some(Tensor::new(x_shape, col2im(&dcols, c_in, h, w))?)
    } else {
        None
    };
    Ok((
        dx,
        Tensor::new(weights.shape(), dw)?,
        Tensor::new(&[c_out], db)?,
    ))
}

impl Tape {
    /// Records `conv2d(x, weights, bias)` with `x: [C_in,H,W]`,
    /// `weights: [C_out,C_in,3,3]`, `bias: [C_out]`.
    pub fn conv2d(&mut self, x: Var, weights: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(weights)?;
        self.check(bias)?;
        let (out, cols) = conv2d_forward(self.value(x), self.value(weights), self.value(bias))?;
        self.push("conv2d", out, &[x, weights, bias], move |ctx: &BackCtx<'_>| {
            let (dx, dw, db) = conv2d_backward(
                ctx.grad,
                &cols,
                ctx.inputs[0].shape(),
                ctx.inputs[1],
                ctx.wants[0],
            )?;
            Ok(vec![dx, Some(dw), Some(db)])
        })
    }
}
