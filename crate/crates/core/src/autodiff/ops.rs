use super::tape::{BackCtx, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    Down,
    Up,
}

pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// 2×2 average pooling of a `[C, H, W]` tensor; H and W must be even.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err("resample2x(down)", format!("odd extents {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let s = &src[ch * h * w..];
        let o = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let r0 = 2 * y * w + 2 * xx;
                o[y * ow + xx] = 0.25 * (s[r0] + s[r0 + 1] + s[r0 + w] + s[r0 + w + 1]);
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// Nearest-neighbour 2× upsampling of a `[C, H, W]` tensor.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (oh, ow) = (h * 2, w * 2);
    let src = x.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let s = &src[ch * h * w..(ch + 1) * h * w];
        let o = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                o[y * ow + xx] = s[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

pub fn resample2x(x: &Tensor, dir: Resample) -> Result<Tensor> {
    match dir {
        Resample::Down => avg_pool2(x),
        Resample::Up => upsample2(x),
    }
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", out, &[a, b], |ctx: &BackCtx<'_>| {
            Ok(vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())])
        })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, &[a], |ctx: &BackCtx<'_>| {
            let g = ctx.grad.item();
            Ok(vec![Some(Tensor::full(ctx.inputs[0].shape(), g))])
        })
    }

    pub fn mul_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).scale(k);
        self.push("mul_scalar", out, &[a], move |ctx: &BackCtx<'_>| {
            Ok(vec![Some(ctx.grad.scale(k))])
        })
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", out, &[a, b], |ctx: &BackCtx<'_>| {
            let ga = ctx.grad.zip_map(ctx.inputs[1], |g, y| g * y)?;
            let gb = ctx.grad.zip_map(ctx.inputs[0], |g, x| g * x)?;
            Ok(vec![Some(ga), Some(gb)])
        })
    }

    /// ReLU uses a zero subgradient at exactly 0.
    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        self.check(a)?;
        match kind {
            Activation::Relu => {
                let out = self.value(a).map(relu);
                self.push("relu", out, &[a], |ctx: &BackCtx<'_>| {
                    Ok(vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, x| {
                        if x > 0.0 {
                            g
                        } else {
                            0.0
                        }
                    })?)])
                })
            }
            Activation::Tanh => {
                let out = self.value(a).map(f64::tanh);
                self.push("tanh", out, &[a], |ctx: &BackCtx<'_>| {
                    Ok(vec![Some(
                        ctx.grad.zip_map(ctx.output, |g, t| g * (1.0 - t * t))?,
                    )])
                })
            }
        }
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Relu)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Tanh)
    }

    /// Multiplies plane `c` (axis 0) of `a` by `factors[c]`.
    pub fn scale_planes(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        if x.shape()[0] != factors.len() {
            return Err(shape_err(
                "scale_planes",
                format!("{} factors for shape {:?}", factors.len(), x.shape()),
            ));
        }
        let scale = move |t: &Tensor| {
            let mut out = t.clone();
            for (c, k) in factors.iter().enumerate() {
                out.plane_mut(c).iter_mut().for_each(|v| *v *= k);
            }
            out
        };
        let out = scale(x);
        self.push("scale_planes", out, &[a], move |ctx: &BackCtx<'_>| {
            Ok(vec![Some(scale(ctx.grad))])
        })
    }

    /// Concatenation along axis 0 (channels).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let sizes: Vec<usize> = values.iter().map(|t| t.shape()[0]).collect();
        let out = Tensor::cat0(&values)?;
        self.push("concat", out, parts, move |ctx: &BackCtx<'_>| {
            let mut start = 0;
            let mut grads = Vec::with_capacity(sizes.len());
            for (i, &n) in sizes.iter().enumerate() {
                grads.push(if ctx.wants[i] {
                    Some(ctx.grad.narrow0(start, start + n)?)
                } else {
                    None
                });
                start += n;
            }
            Ok(grads)
        })
    }

    /// Planes `[start, end)` along axis 0.
    pub fn narrow(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).narrow0(start, end)?;
        self.push("narrow", out, &[a], move |ctx: &BackCtx<'_>| {
            let x = ctx.inputs[0];
            let mut g = Tensor::zeros(x.shape());
            let stride = x.len() / x.shape()[0];
            g.data_mut()[start * stride..end * stride].copy_from_slice(ctx.grad.data());
            Ok(vec![Some(g)])
        })
    }

    /// 2×2 average pool (`Down`) or nearest 2× upsample (`Up`).
    pub fn resample2x(&mut self, a: Var, dir: Resample) -> Result<Var> {
        self.check(a)?;
        let out = resample2x(self.value(a), dir)?;
        self.push("resample2x", out, &[a], move |ctx: &BackCtx<'_>| {
            // The two operators are adjoint up to a factor of 4.
            let g = match dir {
                Resample::Down => upsample2(ctx.grad)?.scale(0.25),
                Resample::Up => avg_pool2(ctx.grad)?.scale(4.0),
            };
            Ok(vec![Some(g)])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_tanh_values() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(&[3], vec![-1.5, 0.0, 2.0]).unwrap());
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let th = t.tanh(x).unwrap();
        assert_eq!(t.value(th).data()[1], 0.0);
        // relu subgradient at 0 is 0
        let loss = t.sum(r).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn resample_pair() {
        let one = Tensor::full(&[1, 2, 2], 1.0);
        assert_eq!(avg_pool2(&one).unwrap().data(), &[1.0]);
        let c = Tensor::full(&[1, 1, 1], 3.5);
        assert_eq!(upsample2(&c).unwrap().data(), &[3.5; 4]);
        let x = Tensor::from_fn(&[2, 3, 5], |i| (i as f64).sin());
        assert_eq!(avg_pool2(&upsample2(&x).unwrap()).unwrap(), x);
        assert!(avg_pool2(&Tensor::zeros(&[1, 3, 4])).is_err());
    }

    #[test]
    fn sum_and_half_square_gradients() {
        let p = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5);
        let mut t = Tape::new();
        let x = t.leaf(p.clone());
        let s = t.sum(x).unwrap();
        assert!(t.backward(s).unwrap().get(x).unwrap().data().iter().all(|&g| g == 1.0));

        let mut t = Tape::new();
        let x = t.leaf(p.clone());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let half = t.mul_scalar(s, 0.5).unwrap();
        assert_eq!(t.backward(half).unwrap().get(x).unwrap(), &p);
    }
}
