//! Independent reference computations checked against the library.

mod common;

use common::{brute_filter, naive_trilinear, uniform};
use dkdenoise::autodiff::{conv2d, Activation, ParamStore, Tape};
use dkdenoise::color_noise::{
    gamma_forward, noise_level_map, sample_noise_params_with, synthesize_noise, GammaParams, NoiseParams,
    SIGMA_R_RANGE, SIGMA_S_RANGE,
};
use dkdenoise::dataio::{generate_scene, PatternFamily, ToyDatasetConfig};
use dkdenoise::deform::{
    filter2d_deformable, filter2d_per_frame, filter3d_deformable, rigid_grid, KernelWeights, OffsetField, RigidGrid,
};
use dkdenoise::gradcheck::rel_err;
use dkdenoise::losses::AnnealSchedule;
use dkdenoise::metrics::{psnr, ssim};
use dkdenoise::network::{build_network, network_input, predict_offsets, Net, NetConfig};
use dkdenoise::resampling::{sample_trilinear, sample_trilinear_backward, Frames, SamplePoint3};
use dkdenoise::trainer::{adam_step, crop_patch_with, lr_schedule, AdamState, TrainConfig};
use dkdenoise::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn brute_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (ci, h, wd) = x.dims3().unwrap();
    let co = b.len();
    let mut out = Tensor::zeros(&[co, h, wd]);
    for o in 0..co {
        for y in 0..h as i64 {
            for xx in 0..wd as i64 {
                let mut acc = b.data()[o];
                for c in 0..ci {
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let (sy, sx) = (y + ky - 1, xx + kx - 1);
                            if sy < 0 || sx < 0 || sy >= h as i64 || sx >= wd as i64 {
                                continue;
                            }
                            let wi = ((o * ci + c) * 3 + ky as usize) * 3 + kx as usize;
                            acc += w.data()[wi] * x.at3(c, sy as usize, sx as usize);
                        }
                    }
                }
                out.data_mut()[(o * h + y as usize) * wd + xx as usize] = acc;
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_direct_correlation() {
    let mut r = rng(1);
    let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let ones = Tensor::full(&[1, 1, 3, 3], 1.0);
    let zero = Tensor::zeros(&[1]);
    let want = brute_conv(&x, &ones, &zero);
    assert_eq!(want.data(), &[10.0, 10.0, 10.0, 10.0]);
    assert_eq!(conv2d(&x, &ones, &zero).unwrap(), want);
    for _ in 0..30 {
        let (ci, co) = (r.random_range(1..5), r.random_range(1..5));
        let (h, w) = (r.random_range(1..9), r.random_range(1..9));
        let x = uniform(&mut r, &[ci, h, w], -1.0, 1.0);
        let k = uniform(&mut r, &[co, ci, 3, 3], -1.0, 1.0);
        let b = uniform(&mut r, &[co], -1.0, 1.0);
        let got = conv2d(&x, &k, &b).unwrap();
        assert!(got.max_abs_diff(&brute_conv(&x, &k, &b)) < 1e-12);
    }
}

#[test]
fn tanh_gradient_matches_central_differences() {
    let mut r = rng(2);
    let x = uniform(&mut r, &[1, 4, 4], -3.0, 3.0);
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let y = tape.activation(v, Activation::Tanh).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    let g = g.get(v).unwrap();
    let h = 1e-5;
    for (i, &xi) in x.data().iter().enumerate() {
        let num = ((xi + h).tanh() - (xi - h).tanh()) / (2.0 * h);
        assert!(rel_err(g.data()[i], num, 1e-12) < 1e-8, "at {xi}");
    }
}

#[test]
fn two_layer_conv_stack_gradient() {
    let mut r = rng(3);
    let mut store = ParamStore::new();
    store.insert("c0.w", uniform(&mut r, &[3, 2, 3, 3], -0.5, 0.5));
    store.insert("c0.b", uniform(&mut r, &[3], -0.1, 0.1));
    store.insert("c1.w", uniform(&mut r, &[1, 3, 3, 3], -0.5, 0.5));
    store.insert("c1.b", uniform(&mut r, &[1], -0.1, 0.1));
    let x = uniform(&mut r, &[2, 5, 6], -1.0, 1.0);
    let proj = uniform(&mut r, &[1, 5, 6], -1.0, 1.0);
    let eval = |store: &ParamStore| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (w0, b0) = (tape.param(store, "c0.w").unwrap(), tape.param(store, "c0.b").unwrap());
        let (w1, b1) = (tape.param(store, "c1.w").unwrap(), tape.param(store, "c1.b").unwrap());
        let h = tape.conv2d(xv, w0, b0).unwrap();
        let h = tape.tanh(h).unwrap();
        let y = tape.conv2d(h, w1, b1).unwrap();
        let p = tape.constant(proj.clone());
        let m = tape.mul(y, p).unwrap();
        let loss = tape.sum(m).unwrap();
        let value = tape.value(loss).item();
        (value, tape.backward(loss).unwrap())
    };
    let (_, grads) = eval(&store);
    let analytic: Vec<(String, Tensor)> =
        grads.params().map(|(n, g)| (n.to_string(), g.unwrap().clone())).collect();
    assert_eq!(analytic.len(), 4);
    let h = 1e-5;
    for (name, g) in &analytic {
        for i in 0..g.len() {
            let mut plus = store.clone();
            plus.value_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = store.clone();
            minus.value_mut(name).unwrap().data_mut()[i] -= h;
            let num = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let err = (g.data()[i] - num).abs() / num.abs().max(1.0);
            assert!(err < 1e-4, "{name}[{i}]: {} vs {num}", g.data()[i]);
        }
    }
}

#[test]
fn sampler_matches_direct_sum() {
    let mut r = rng(4);
    for _ in 0..2000 {
        let t = [1, 3, 5][r.random_range(0..3)];
        let (h, w) = (r.random_range(1..=5), r.random_range(1..=5));
        let vol = uniform(&mut r, &[t, h, w], -1.0, 1.0);
        let f = Frames::new(&vol).unwrap();
        let tau = (t / 2) as f64;
        let (y, x, tt) = (
            r.random_range(-2.0..h as f64 + 1.0),
            r.random_range(-2.0..w as f64 + 1.0),
            r.random_range(-tau - 1.5..tau + 1.5),
        );
        let got = sample_trilinear(&f, SamplePoint3::new(y, x, tt));
        assert!((got - naive_trilinear(&vol, y, x, tt)).abs() < 1e-12);
    }
}

#[test]
fn sampler_coordinate_gradients_match_central_differences() {
    let mut r = rng(5);
    let frac = |r: &mut ChaCha8Rng, lo: i64, hi: i64| r.random_range(lo..hi) as f64 + r.random_range(0.01..0.99);
    for _ in 0..1000 {
        let vol = uniform(&mut r, &[3, 5, 5], 0.0, 1.0);
        let f = Frames::new(&vol).unwrap();
        let p = SamplePoint3::new(frac(&mut r, -1, 5), frac(&mut r, -1, 5), frac(&mut r, -2, 2));
        let g = sample_trilinear_backward(&f, p, 1.0);
        let h = 1e-6;
        let d = |q: SamplePoint3, q2: SamplePoint3| (sample_trilinear(&f, q) - sample_trilinear(&f, q2)) / (2.0 * h);
        let ny = d(SamplePoint3 { y: p.y + h, ..p }, SamplePoint3 { y: p.y - h, ..p });
        let nx = d(SamplePoint3 { x: p.x + h, ..p }, SamplePoint3 { x: p.x - h, ..p });
        let nt = d(SamplePoint3 { t: p.t + h, ..p }, SamplePoint3 { t: p.t - h, ..p });
        for (a, n) in [(g.y, ny), (g.x, nx), (g.t, nt)] {
            assert!((a - n).abs() / n.abs().max(1.0) < 1e-6, "{a} vs {n} at {p:?}");
        }
    }
}

fn random_offsets(r: &mut ChaCha8Rng, grid: &RigidGrid, h: usize, w: usize, reach: f64) -> OffsetField {
    OffsetField(uniform(r, &[grid.len(), grid.offset_dims(), h, w], -reach, reach))
}

#[test]
fn box_filter_on_ramp() {
    let x = Tensor::from_fn(&[5, 5], |i| i as f64);
    let grid = rigid_grid(3, 3, None).unwrap();
    let y = filter2d_deformable(&x, &grid, &OffsetField::zeros(&grid, 5, 5), &KernelWeights::uniform(9, 5, 5)).unwrap();
    for r in 0..5i64 {
        for c in 0..5i64 {
            let mut acc = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (yy, xx) = (r + dy, c + dx);
                    if (0..5).contains(&yy) && (0..5).contains(&xx) {
                        acc += (yy * 5 + xx) as f64;
                    }
                }
            }
            assert!((y.at2(r as usize, c as usize) - acc / 9.0).abs() < 1e-12);
        }
    }
}

#[test]
fn deformable_filters_match_brute_force() {
    let mut r = rng(6);
    for _ in 0..20 {
        let (h, w) = (r.random_range(2..=6), r.random_range(2..=6));
        let frames = uniform(&mut r, &[3, h, w], 0.0, 1.0);

        let g3 = rigid_grid(3, 3, Some(3)).unwrap();
        let v = random_offsets(&mut r, &g3, h, w, 2.0);
        let f = uniform(&mut r, &[27, h, w], -1.0, 1.0);
        let got = filter3d_deformable(&frames, &g3, &v, &KernelWeights(f.clone())).unwrap();
        assert!(got.max_abs_diff(&brute_filter(&frames, &g3, &v.0, &f, 0..27)) < 1e-12);

        let g2 = rigid_grid(3, 3, None).unwrap();
        let mut vs = Vec::new();
        let mut fs = Vec::new();
        let mut want = Tensor::zeros(&[h, w]);
        for k in 0..3 {
            let v = random_offsets(&mut r, &g2, h, w, 1.5);
            let f = uniform(&mut r, &[9, h, w], -1.0, 1.0);
            let frame = frames.narrow0(k, k + 1).unwrap();
            want.add_assign(&brute_filter(&frame, &g2, &v.0, &f, 0..9)).unwrap();
            vs.push(v);
            fs.push(KernelWeights(f));
        }
        let got = filter2d_per_frame(&frames, &g2, &vs, &fs).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
    }
}

fn brute_ssim(a: &Tensor, b: &Tensor) -> f64 {
    let (h, w) = a.dims2().unwrap();
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let norm: f64 = g.iter().sum::<f64>().powi(2);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for oy in 0..=h - 11 {
        for ox in 0..=w - 11 {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wt = g[i] * g[j] / norm;
                    let (x, y) = (a.at2(oy + i, ox + j), b.at2(oy + i, ox + j));
                    mx += wt * x;
                    my += wt * y;
                    sxx += wt * x * x;
                    syy += wt * y * y;
                    sxy += wt * x * y;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn ssim_matches_direct_window_evaluation() {
    let mut r = rng(7);
    for (h, w) in [(11, 11), (16, 13), (20, 24)] {
        let a = uniform(&mut r, &[h, w], 0.0, 1.0);
        let b = a.map(|v| (v + r.random_range(-0.2..0.2)).clamp(0.0, 1.0));
        assert!((ssim(&a, &b).unwrap() - brute_ssim(&a, &b)).abs() < 1e-12);
    }
    let bin = Tensor::from_fn(&[24, 24], |_| if r.random_bool(0.5) { 1.0 } else { 0.0 });
    let inv = bin.map(|v| 1.0 - v);
    let want = brute_ssim(&bin, &inv);
    assert!(want < 0.0);
    assert!((ssim(&bin, &inv).unwrap() - want).abs() < 1e-12);
}

#[test]
fn adam_with_constant_gradient_follows_closed_form() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::new(&[2], vec![0.5, -0.25]).unwrap());
    let mut state = AdamState::new(&store);
    let g = [3.0, -0.02];
    let lr = 1e-3;
    for _ in 0..10 {
        store.accumulate("w", &Tensor::new(&[2], g.to_vec()).unwrap()).unwrap();
        adam_step(&mut store, &mut state, lr).unwrap();
    }
    // bias-corrected moments equal g and g² exactly, so each step is lr·g/(|g|+ε)
    for (i, (&g, start)) in g.iter().zip([0.5, -0.25]).enumerate() {
        let want = start - 10.0 * lr * g / (g.abs() + 1e-8);
        assert!((store.value("w").unwrap().data()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn lr_floor_crossing() {
    let cfg = TrainConfig::default();
    let mut p = 0u64;
    while 2e-4 * 0.999991f64.powf(p as f64) > 1e-4 {
        p += 1;
    }
    assert_eq!(p, 77017);
    assert!(lr_schedule(&cfg, p - 1) > 1e-4);
    assert_eq!(lr_schedule(&cfg, p), 1e-4);
    assert_eq!(lr_schedule(&cfg, 10 * p), 1e-4);
}

#[test]
fn anneal_weight_crosses_one() {
    let s = AnnealSchedule::default();
    let p = (100f64.ln() / -(0.9998f64.ln())).ceil() as u64;
    assert_eq!(p, 23024);
    assert!(s.weight(p - 1) > 1.0);
    assert!(s.weight(p) <= 1.0);
}

#[test]
fn gamma_and_noise_closed_forms() {
    let phi = GammaParams::SRGB.encode(0.5);
    assert!((phi - (1.055 * 0.5f64.powf(1.0 / 2.4) - 0.055)).abs() < 1e-15);
    assert!((phi - 0.7353569830524495).abs() < 1e-12);
    let map = noise_level_map(&Tensor::full(&[2, 2], 1.0), &NoiseParams::HIGH).unwrap();
    for &v in map.data() {
        assert!((v - (4e-4f64 + 6.4e-3).sqrt()).abs() < 1e-15);
    }
}

#[test]
fn noise_moments_monte_carlo() {
    let n = 1_000_000;
    let clean = Tensor::full(&[1000, 1000], 0.25);
    let noisy = synthesize_noise(&clean, &NoiseParams::LOW, 11);
    let d: Vec<f64> = noisy.data().iter().map(|v| v - 0.25).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let want = 2.5e-3 * 0.25 + 1e-4;
    assert!((var - want).abs() / want < 0.02, "variance {var} vs {want}");
    assert!(mean.abs() < 3.0 * want.sqrt() / (n as f64).sqrt(), "mean {mean}");
}

#[test]
fn noise_parameter_draws_cover_log_ranges() {
    let mut r = rng(12);
    let draws: Vec<NoiseParams> = (0..100_000).map(|_| sample_noise_params_with(&mut r)).collect();
    for (range, pick) in [
        (SIGMA_S_RANGE, (|p: &NoiseParams| p.sigma_s) as fn(&NoiseParams) -> f64),
        (SIGMA_R_RANGE, |p: &NoiseParams| p.sigma_r),
    ] {
        let (lo, hi) = (range.0.ln(), range.1.ln());
        let vals: Vec<f64> = draws.iter().map(|p| pick(p).ln()).collect();
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(min >= lo && max <= hi);
        assert!((min - lo) < 0.05 * (hi - lo) && (hi - max) < 0.05 * (hi - lo));
    }
}

#[test]
fn crop_origins_are_uniform() {
    let seq = Tensor::zeros(&[1, 16, 16]);
    let mut r = rng(13);
    let mut counts = [[0usize; 9]; 9];
    let draws = 10_000;
    for _ in 0..draws {
        let (_, (y, x)) = crop_patch_with(&seq, 8, &mut r).unwrap();
        counts[y][x] += 1;
    }
    let expected = draws as f64 / 81.0;
    let chi2: f64 = counts.iter().flatten().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 80 degrees of freedom: mean 80, sd ≈ 12.6
    assert!(chi2 < 143.0, "chi-square {chi2}");
}

#[test]
fn psnr_falls_as_noise_variance_grows() {
    let clean = Tensor::from_fn(&[64, 64], |i| 0.2 + 0.6 * ((i % 64) as f64 / 63.0));
    let mut last = f64::INFINITY;
    for k in 0..24 {
        let sigma = 1e-3 * 1.25f64.powi(k);
        let noisy = synthesize_noise(&clean, &NoiseParams::new(0.0, sigma).unwrap(), 100 + k as u64);
        let p = psnr(&noisy, &clean, 1.0).unwrap();
        assert!(p < last, "level {k}: {p} !< {last}");
        last = p;
    }
}

/// Integer translation between two equally sized planes by phase correlation.
fn phase_correlation(a: &[f64], b: &[f64], n: usize) -> (i64, i64) {
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let fft2 = |data: &[f64]| {
        let mut buf: Vec<Complex<f64>> = data.iter().map(|&v| Complex::new(v, 0.0)).collect();
        for row in buf.chunks_mut(n) {
            fwd.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); n];
        for x in 0..n {
            for y in 0..n {
                col[y] = buf[y * n + x];
            }
            fwd.process(&mut col);
            for y in 0..n {
                buf[y * n + x] = col[y];
            }
        }
        buf
    };
    let (fa, fb) = (fft2(a), fft2(b));
    let mut r: Vec<Complex<f64>> = fa
        .iter()
        .zip(&fb)
        .map(|(x, y)| {
            let c = y * x.conj();
            c / c.norm().max(1e-12)
        })
        .collect();
    for row in r.chunks_mut(n) {
        inv.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = r[y * n + x];
        }
        inv.process(&mut col);
        for y in 0..n {
            r[y * n + x] = col[y];
        }
    }
    let best = (0..n * n).max_by(|&i, &j| r[i].re.total_cmp(&r[j].re)).unwrap();
    let wrap = |v: usize| if v > n / 2 { v as i64 - n as i64 } else { v as i64 };
    (wrap(best / n), wrap(best % n))
}

#[test]
fn toy_motion_registers_by_phase_correlation() {
    let cfg = ToyDatasetConfig {
        num_scenes: 12,
        size: 64,
        frames: 3,
        motion: 3,
        pattern: PatternFamily::Checkers,
        seed: 5,
    };
    let n = cfg.size;
    // Hann window suppresses the non-periodic borders.
    let hann: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect();
    for i in 0..cfg.num_scenes {
        let scene = generate_scene(&cfg, i).unwrap();
        let win = |k: usize| -> Vec<f64> {
            let p = scene.frames.plane(k);
            let mean = p.iter().sum::<f64>() / p.len() as f64;
            p.iter().enumerate().map(|(j, v)| (v - mean) * hann[j / n] * hann[j % n]).collect()
        };
        let (dy, dx) = phase_correlation(&win(0), &win(1), n);
        assert!(dy.unsigned_abs() <= 3 && dx.unsigned_abs() <= 3, "scene {i}: ({dy},{dx})");
        assert_eq!((dy, dx), scene.velocity, "scene {i}");
    }
}

#[test]
fn offset_gradient_of_early_conv_matches_finite_differences() {
    let cfg = NetConfig {
        width_scale: 0.1,
        levels: 3,
        max_disp: 4.0,
        ..NetConfig::default()
    };
    let store = build_network(&cfg, 21).unwrap();
    let mut r = rng(22);
    let frames = uniform(&mut r, &[5, 16, 16], 0.05, 0.95);
    let input = network_input(&cfg, &frames, Some(&NoiseParams::LOW)).unwrap();
    let proj = uniform(&mut r, &[27 * 3, 16, 16], -1.0, 1.0);
    let projected = |s: &ParamStore| -> f64 {
        let (v, _) = predict_offsets(&cfg, s, &input).unwrap();
        v.0.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
    };
    let net = Net::new(&cfg, &store).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let feats = net.features(&mut tape, x).unwrap();
    let v = net.offsets(&mut tape, feats).unwrap();
    let p = tape.constant(proj.clone());
    let m = tape.mul(v, p).unwrap();
    let loss = tape.sum(m).unwrap();
    let grads = tape.backward(loss).unwrap();
    let name = "offset.enc0.conv0.w";
    let g = grads.params().find(|(n, _)| *n == name).unwrap().1.unwrap().clone();
    let h = 1e-6;
    for _ in 0..12 {
        let i = r.random_range(0..g.len());
        let f = |d: f64| {
            let mut s = store.clone();
            s.value_mut(name).unwrap().data_mut()[i] += d;
            projected(&s)
        };
        let num = (f(h) - f(-h)) / (2.0 * h);
        assert!(rel_err(g.data()[i], num, 1e-6) < 1e-3, "{i}: {} vs {num}", g.data()[i]);
    }
}

#[test]
fn display_gamma_matches_piecewise_formula() {
    let lin = Tensor::from_fn(&[100], |i| i as f64 / 99.0);
    let enc = gamma_forward(&lin);
    for (&q, &e) in lin.data().iter().zip(enc.data()) {
        let want = if q <= 0.0031308 { 12.92 * q } else { 1.055 * q.powf(1.0 / 2.4) - 0.055 };
        assert!((e - want).abs() < 1e-15);
    }
}
