#![allow(dead_code)]

use dkdenoise::deform::RigidGrid;
use dkdenoise::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Direct evaluation of the interpolation sum over every lattice point
/// `(t, i, j)` of a `[T, H, W]` volume; `t` is relative to the middle frame.
pub fn naive_trilinear(vol: &Tensor, y: f64, x: f64, t: f64) -> f64 {
    let (nt, h, w) = vol.dims3().unwrap();
    let tau = (nt / 2) as f64;
    let k = |d: f64| (1.0 - d.abs()).max(0.0);
    let mut acc = 0.0;
    for ti in 0..nt {
        for i in 0..h {
            for j in 0..w {
                acc += vol.at3(ti, i, j) * k(y - i as f64) * k(x - j as f64) * k(t + tau - ti as f64);
            }
        }
    }
    acc
}

/// `Σ_n F[n] · X(p + tap_n + V_n)` at every pixel, sampled with [`naive_trilinear`].
pub fn brute_filter(frames: &Tensor, grid: &RigidGrid, v: &Tensor, f: &Tensor, taps: std::ops::Range<usize>) -> Tensor {
    let (_, h, w) = frames.dims3().unwrap();
    let dims = grid.offset_dims();
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for n in taps.clone() {
                let tap = grid.taps()[n];
                let off = |c: usize| v.data()[((n * dims + c) * h + y) * w + x];
                let (px, py) = (x as f64 + tap.x as f64 + off(0), y as f64 + tap.y as f64 + off(1));
                let pt = tap.t as f64 + if dims == 3 { off(2) } else { 0.0 };
                acc += f.at3(n, y, x) * naive_trilinear(frames, py, px, pt);
            }
            out.data_mut()[y * w + x] = acc;
        }
    }
    out
}
