mod common;

use common::uniform;
use dkdenoise::autodiff::{conv2d, resample2x, ParamStore, Resample, Tape};
use dkdenoise::checkpoint::ModelCheckpoint;
use dkdenoise::color_noise::{noise_level_map, GammaParams, NoiseParams};
use dkdenoise::config::KvConfig;
use dkdenoise::dataio::{PixelFormat, SceneEntry, SequenceManifest};
use dkdenoise::deform::{
    filter3d_deformable, filter_group, rigid_grid, sample_taps, sample_taps_backward, KernelWeights, OffsetField,
};
use dkdenoise::losses::{l1_gamma_loss, total_loss, AnnealSchedule};
use dkdenoise::metrics::{psnr, ssim};
use dkdenoise::network::{build_network, forward_denoise, network_input, Mode, Net, NetConfig};
use dkdenoise::par::Exec;
use dkdenoise::resampling::{sample_trilinear, Frames, SamplePoint3};
use dkdenoise::trainer::{lr_schedule, AdamState, TrainConfig};
use dkdenoise::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_net() -> NetConfig {
    NetConfig {
        width_scale: 0.08,
        levels: 3,
        max_disp: 3.0,
        ..NetConfig::default()
    }
}

proptest! {
    #[test]
    fn conv_activation_resample_shapes(ci in 1usize..5, co in 1usize..5, h in 1usize..7, w in 1usize..7, seed: u64) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[ci, 2 * h, 2 * w], -1.0, 1.0);
        let k = uniform(&mut r, &[co, ci, 3, 3], -1.0, 1.0);
        let b = uniform(&mut r, &[co], -1.0, 1.0);
        let y = conv2d(&x, &k, &b).unwrap();
        prop_assert_eq!(y.shape(), &[co, 2 * h, 2 * w]);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let a = tape.relu(v).unwrap();
        let t = tape.tanh(v).unwrap();
        prop_assert_eq!(tape.value(a).shape(), x.shape());
        prop_assert_eq!(tape.value(t).shape(), x.shape());
        let down = resample2x(&x, Resample::Down).unwrap();
        prop_assert_eq!(down.shape(), &[ci, h, w]);
        let up = resample2x(&x, Resample::Up).unwrap();
        prop_assert_eq!(up.shape(), &[ci, 4 * h, 4 * w]);
        prop_assert_eq!(resample2x(&up, Resample::Down).unwrap(), x);
    }

    #[test]
    fn sampler_is_linear(seed: u64, alpha in -2.0f64..2.0, beta in -2.0f64..2.0,
                         y in -1.5f64..5.5, x in -1.5f64..5.5, t in -2.5f64..2.5) {
        let mut r = rng(seed);
        let a = uniform(&mut r, &[5, 5, 5], -1.0, 1.0);
        let b = uniform(&mut r, &[5, 5, 5], -1.0, 1.0);
        let mix = a.zip_map(&b, |u, v| alpha * u + beta * v).unwrap();
        let p = SamplePoint3::new(y, x, t);
        let s = |v: &Tensor| sample_trilinear(&Frames::new(v).unwrap(), p);
        prop_assert!((s(&mix) - (alpha * s(&a) + beta * s(&b))).abs() < 1e-12);
    }

    #[test]
    fn constant_volume_is_recovered_inside(c in -3.0f64..3.0, y in 0.0f64..4.0, x in 0.0f64..4.0, t in -2.0f64..2.0) {
        let v = Tensor::full(&[5, 5, 5], c);
        let got = sample_trilinear(&Frames::new(&v).unwrap(), SamplePoint3::new(y, x, t));
        prop_assert!((got - c).abs() < 1e-12);
    }

    #[test]
    fn groups_decompose_the_filter(seed: u64, h in 2usize..6, w in 2usize..6, s_idx in 0usize..4) {
        let s = [1, 3, 9, 27][s_idx];
        let mut r = rng(seed);
        let grid = rigid_grid(3, 3, Some(3)).unwrap();
        let x = uniform(&mut r, &[3, h, w], 0.0, 1.0);
        let v = OffsetField(uniform(&mut r, &[27, 3, h, w], -2.0, 2.0));
        let f = KernelWeights(uniform(&mut r, &[27, h, w], -1.0, 1.0));
        let full = filter3d_deformable(&x, &grid, &v, &f).unwrap();
        let mut acc = Tensor::zeros(&[h, w]);
        for i in 1..=s {
            acc.add_assign(&filter_group(&x, &grid, &v, &f, i, s).unwrap()).unwrap();
        }
        prop_assert!(acc.scale(1.0 / s as f64).max_abs_diff(&full) < 1e-12);
    }

    #[test]
    fn filter_is_linear_in_weights(seed: u64, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let mut r = rng(seed);
        let grid = rigid_grid(3, 3, Some(3)).unwrap();
        let x = uniform(&mut r, &[3, 4, 4], 0.0, 1.0);
        let v = OffsetField(uniform(&mut r, &[27, 3, 4, 4], -1.5, 1.5));
        let f1 = uniform(&mut r, &[27, 4, 4], -1.0, 1.0);
        let f2 = uniform(&mut r, &[27, 4, 4], -1.0, 1.0);
        let run = |f: Tensor| filter3d_deformable(&x, &grid, &v, &KernelWeights(f)).unwrap();
        let mixed = run(f1.zip_map(&f2, |a, b| alpha * a + beta * b).unwrap());
        let want = run(f1.clone()).scale(alpha).zip_map(&run(f2.clone()).scale(beta), |a, b| a + b).unwrap();
        prop_assert!(mixed.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn gamma_round_trips_and_increases(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let g = GammaParams::SRGB;
        prop_assert!((g.decode(g.encode(a)) - a).abs() < 1e-12);
        if a < b {
            prop_assert!(g.encode(a) < g.encode(b));
        }
    }

    #[test]
    fn schedules_are_monotone(p in 0u64..1_000_000) {
        let s = AnnealSchedule::default();
        prop_assert!(s.weight(p + 1) < s.weight(p));
        prop_assert!(s.weight(p + 1) > 0.0);
        let cfg = TrainConfig::default();
        prop_assert!(lr_schedule(&cfg, p + 1) <= lr_schedule(&cfg, p));
        prop_assert!(lr_schedule(&cfg, p) >= 1e-4);
    }

    #[test]
    fn noise_level_map_is_exact(ss in 1e-4f64..1e-2, sr in 1e-3f64..0.03, seed: u64) {
        let q = uniform(&mut rng(seed), &[4, 4], 0.0, 1.0);
        let p = NoiseParams::new(ss, sr).unwrap();
        let m = noise_level_map(&q, &p).unwrap();
        for (&l, &qi) in m.data().iter().zip(q.data()) {
            prop_assert!((l * l - (sr * sr + ss * qi)).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_bounds_plain_loss(seed: u64, p in 0u64..100_000) {
        let mut r = rng(seed);
        let y = uniform(&mut r, &[4, 4], -0.1, 1.1);
        let gt = uniform(&mut r, &[4, 4], 0.0, 1.0);
        let groups: Vec<Tensor> = (0..3).map(|_| uniform(&mut r, &[4, 4], -0.1, 1.1)).collect();
        let s = AnnealSchedule::default();
        prop_assert!(total_loss(&y, &groups, &gt, p, &s).unwrap() >= l1_gamma_loss(&y, &gt).unwrap());
    }

    #[test]
    fn metrics_are_symmetric_and_bounded(seed: u64, amp in 0.0f64..1.0) {
        let mut r = rng(seed);
        let a = uniform(&mut r, &[12, 14], 0.0, 1.0);
        let b = a.zip_map(&uniform(&mut r, &[12, 14], -amp, amp), |x, n| x + n).unwrap();
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        let s = ssim(&a, &b).unwrap();
        prop_assert_eq!(s, ssim(&b, &a).unwrap());
        prop_assert!((-1.0..=1.0).contains(&s));
        if amp > 1e-3 {
            prop_assert!(s < 1.0);
        }
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn kv_config_round_trips(tau in 1usize..4, ws in 0.05f64..1.0, levels in 2usize..6, disp in 0.5f64..20.0,
                             blind: bool, fixed: bool, dynamic: bool, mode_idx in 0usize..3) {
        let mode = [Mode::Image2d, Mode::Video2d, Mode::Video3d][mode_idx];
        let cfg = NetConfig { mode, tau, width_scale: ws, levels, max_disp: disp, blind,
                              fixed_grid: fixed, dynamic_weights: dynamic, ..NetConfig::default() };
        let kv = KvConfig::parse(&cfg.to_kv().to_text()).unwrap();
        prop_assert_eq!(NetConfig::from_kv(&kv).unwrap(), cfg);
    }

    #[test]
    fn manifest_round_trips(ids in proptest::collection::hash_set("[a-z][a-z0-9_]{0,8}", 1..5),
                            frames in 1usize..6, ss in 1e-4f64..1e-2, sr in 1e-3f64..0.03, with_noise: bool) {
        let mut m = SequenceManifest::new(PixelFormat::Gray16, "/data");
        if with_noise {
            m.noise = Some(NoiseParams::new(ss, sr).unwrap());
        }
        for id in &ids {
            m.scenes.push(SceneEntry {
                id: id.clone(),
                frames: (0..frames).map(|k| format!("{id}/f{k:03}.png").into()).collect(),
            });
        }
        let back = SequenceManifest::parse(&m.to_text(), std::path::Path::new("/data")).unwrap();
        prop_assert_eq!(back, m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoint_bytes_round_trip(seed: u64, iteration in 0u64..1_000_000) {
        let cfg = NetConfig { width_scale: 0.05, levels: 2, ..NetConfig::default() };
        let mut params = build_network(&cfg, seed).unwrap();
        let mut adam = AdamState::new(&params);
        adam.step = iteration;
        let mut r = rng(seed);
        for (_, (m, v)) in adam.moments.iter_mut() {
            *m = uniform(&mut r, m.shape(), -1.0, 1.0);
            *v = uniform(&mut r, v.shape(), 0.0, 1.0);
        }
        for (_, p) in params.iter_mut() {
            p.value = p.value.map(|x| x * 1.000_000_1 + 1e-300);
        }
        let ck = ModelCheckpoint { config: cfg, params, iteration, adam };
        let bytes = ck.to_bytes().unwrap();
        let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn sequential_and_parallel_agree(seed: u64, h in 2usize..10, w in 2usize..10) {
        let mut r = rng(seed);
        let grid = rigid_grid(3, 3, Some(3)).unwrap();
        let x = uniform(&mut r, &[5, h, w], 0.0, 1.0);
        let v = OffsetField(uniform(&mut r, &[27, 3, h, w], -2.5, 2.5));
        let g = uniform(&mut r, &[27, h, w], -1.0, 1.0);
        let seq = sample_taps(&x, &grid, Some(&v), Exec::Sequential).unwrap();
        let par = sample_taps(&x, &grid, Some(&v), Exec::Parallel).unwrap();
        prop_assert_eq!(seq, par);
        let bs = sample_taps_backward(&x, &grid, Some(&v), &g, true, Exec::Sequential).unwrap();
        let bp = sample_taps_backward(&x, &grid, Some(&v), &g, true, Exec::Parallel).unwrap();
        prop_assert_eq!(bs, bp);
    }

    #[test]
    fn offsets_respect_their_bounds(seed: u64, gain in 1.0f64..200.0, disp in 0.5f64..8.0) {
        let cfg = NetConfig { max_disp: disp, ..small_net() };
        let mut store = build_network(&cfg, seed).unwrap();
        // inflate the offset head so tanh saturates
        for name in ["offset.out.w", "offset.out.b"] {
            let t = store.value_mut(name).unwrap();
            *t = t.map(|x| x * gain + if name.ends_with('b') { gain * 0.1 } else { 0.0 });
        }
        let frames = uniform(&mut rng(seed ^ 1), &[5, 8, 8], -0.5, 1.5);
        let d = forward_denoise(&cfg, &store, &frames, Some(&NoiseParams::HIGH)).unwrap();
        let v = d.offsets.0;
        let hw = 64;
        for n in 0..27 {
            for c in 0..3 {
                let bound = if c < 2 { disp } else { cfg.tau as f64 };
                for &o in &v.data()[(n * 3 + c) * hw..(n * 3 + c + 1) * hw] {
                    prop_assert!(o.abs() <= bound);
                }
            }
        }
        prop_assert!(d.output.all_finite());
    }

    #[test]
    fn network_shape_contracts(seed: u64, hk in 1usize..5, wk in 1usize..5, odd in 0usize..3, mode_idx in 0usize..3) {
        let mode = [Mode::Image2d, Mode::Video2d, Mode::Video3d][mode_idx];
        let cfg = NetConfig { mode, ..small_net() };
        let store = build_network(&cfg, seed).unwrap();
        let (h, w) = (4 * hk + odd, 4 * wk);
        let frames = uniform(&mut rng(seed), &[cfg.frames(), h, w], 0.0, 1.0);
        let d = forward_denoise(&cfg, &store, &frames, Some(&NoiseParams::LOW)).unwrap();
        let grid = cfg.grid().unwrap();
        prop_assert_eq!(d.output.shape(), &[h, w]);
        prop_assert_eq!(d.offsets.0.shape(), &[grid.len(), grid.offset_dims(), h, w]);
        prop_assert_eq!(d.groups.len(), if mode == Mode::Video3d { 3 } else { 0 });
        let again = forward_denoise(&cfg, &store, &frames, Some(&NoiseParams::LOW)).unwrap();
        prop_assert_eq!(again.output, d.output);
    }

    #[test]
    fn weight_head_emits_both_signs(seed: u64) {
        let cfg = small_net();
        let mut store = build_network(&cfg, seed).unwrap();
        store.value_mut("weights.conv2.b").unwrap().data_mut().fill(0.0);
        let w = store.value_mut("weights.conv2.w").unwrap();
        *w = w.scale(50.0);
        let frames = uniform(&mut rng(seed), &[5, 8, 8], 0.0, 1.0);
        let input = network_input(&cfg, &frames, Some(&NoiseParams::LOW)).unwrap();
        let net = Net::new(&cfg, &store).unwrap();
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &input, false).unwrap();
        let f = tape.value(out.weights);
        prop_assert_eq!(f.shape(), &[27, 8, 8]);
        prop_assert!(f.data().iter().any(|&v| v < 0.0));
        prop_assert!(f.data().iter().any(|&v| v > 0.0));
    }

    #[test]
    fn identity_parameters_return_the_reference_frame(seed: u64, mode_idx in 0usize..3) {
        let mode = [Mode::Image2d, Mode::Video2d, Mode::Video3d][mode_idx];
        let cfg = NetConfig { mode, ..small_net() };
        let mut store: ParamStore = build_network(&cfg, seed).unwrap();
        for name in ["offset.out.w", "offset.out.b", "weights.conv2.w"] {
            store.value_mut(name).unwrap().data_mut().fill(0.0);
        }
        let center = cfg.grid().unwrap().center();
        let b = store.value_mut("weights.conv2.b").unwrap();
        b.data_mut().fill(0.0);
        b.data_mut()[center] = 1.0;
        let frames = uniform(&mut rng(seed), &[cfg.frames(), 8, 12], 0.0, 1.0);
        let d = forward_denoise(&cfg, &store, &frames, Some(&NoiseParams::LOW)).unwrap();
        let t = cfg.frames() / 2;
        prop_assert_eq!(d.output.data(), frames.plane(t));
    }
}

/// Wrap-shifts every plane of `[C, H, W]` by `(dy, dx)`.
fn roll(t: &Tensor, dy: usize, dx: usize) -> Tensor {
    let (c, h, w) = t.dims3().unwrap();
    Tensor::from_fn(&[c, h, w], |i| {
        let (k, y, x) = (i / (h * w), (i / w) % h, i % w);
        t.at3(k, (y + h - dy) % h, (x + w - dx) % w)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn translation_consistency(seed: u64, sy in 1usize..3, sx in 0usize..3) {
        let cfg = NetConfig { max_disp: 1.0, ..small_net() };
        let store = build_network(&cfg, seed).unwrap();
        let n = 112;
        let (dy, dx) = (4 * sy, 4 * sx);
        let frames = uniform(&mut rng(seed), &[5, n, n], 0.0, 1.0);
        let a = forward_denoise(&cfg, &store, &frames, Some(&NoiseParams::LOW)).unwrap().output;
        let b = forward_denoise(&cfg, &store, &roll(&frames, dy, dx), Some(&NoiseParams::LOW)).unwrap().output;
        // receptive field radius of the 3-level trunk plus both heads and the sampling reach
        let halo = 40;
        for y in dy.max(dx) + halo..n - halo {
            for x in dy.max(dx) + halo..n - halo {
                prop_assert!((b.at2(y, x) - a.at2(y - dy, x - dx)).abs() < 1e-12, "at ({}, {})", y, x);
            }
        }
    }
}
