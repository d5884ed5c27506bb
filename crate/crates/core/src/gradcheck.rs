//! Finite-difference checks of every differentiable operator.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, ParamStore, Resample, Tape, Var};
use crate::color_noise::NoiseParams;
use crate::deform::{filter3d_backward, filter3d_deformable, rigid_grid, KernelWeights, OffsetField};
use crate::error::Result;
use crate::losses::AnnealSchedule;
use crate::network::{build_network, network_input, Mode, Net, NetConfig};
use crate::resampling::{sample_trilinear, sample_trilinear_backward, Frames, SamplePoint3};
use crate::tensor::Tensor;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` at `x` along one coordinate.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub worst_rel_err: f64,
    pub threshold: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.worst_rel_err < self.threshold
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<OpCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(OpCheck::passed)
    }

    /// Tab-separated: operator, instances, worst relative error, threshold, status.
    pub fn to_text(&self) -> String {
        let mut s = String::from("op\tinstances\tworst_rel_err\tthreshold\tstatus\n");
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.3e}\t{:.0e}\t{}",
                c.op,
                c.instances,
                c.worst_rel_err,
                c.threshold,
                if c.passed() { "pass" } else { "FAIL" }
            );
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Random instances per low-level operator.
    pub instances: usize,
    /// Network parameters probed in the end-to-end check.
    pub e2e_probes: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 200,
            e2e_probes: 40,
        }
    }
}

const H: f64 = 1e-6;
const FLOOR: f64 = 1e-8;
const OP_TOL: f64 = 1e-4;
const E2E_TOL: f64 = 1e-3;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// A coordinate whose fractional part stays clear of the tent kinks.
fn off_lattice(rng: &mut ChaCha8Rng, lo: i64, hi: i64) -> f64 {
    rng.random_range(lo..hi) as f64 + rng.random_range(0.05..0.95)
}

/// Values bounded away from zero so ReLU and |·| kinks are not crossed.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn check_sampler(rng: &mut ChaCha8Rng, n: usize) -> OpCheck {
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let t = [1, 3, 5][rng.random_range(0..3)];
        let (hh, ww) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let vol = uniform(rng, &[t, hh, ww], -1.0, 1.0);
        let tau = (t / 2) as i64;
        let p = SamplePoint3::new(
            off_lattice(rng, -1, hh as i64),
            off_lattice(rng, -1, ww as i64),
            off_lattice(rng, -tau - 1, tau + 1),
        );
        let up = rng.random_range(0.5..2.0);
        let frames = Frames::new(&vol).expect("odd frame count");
        let g = sample_trilinear_backward(&frames, p, up);
        let eval = |p: SamplePoint3| up * sample_trilinear(&frames, p);
        let ny = central_diff(|v| eval(SamplePoint3 { y: v, ..p }), p.y, H);
        let nx = central_diff(|v| eval(SamplePoint3 { x: v, ..p }), p.x, H);
        let nt = central_diff(|v| eval(SamplePoint3 { t: v, ..p }), p.t, H);
        worst = worst
            .max(rel_err(g.y, ny, FLOOR))
            .max(rel_err(g.x, nx, FLOOR))
            .max(rel_err(g.t, nt, FLOOR));
        let mut dense = vec![0.0; vol.len()];
        for &(i, v) in &g.volume {
            dense[i] += v;
        }
        let i = rng.random_range(0..vol.len());
        let num = central_diff(
            |v| {
                let mut m = vol.clone();
                m.data_mut()[i] = v;
                up * sample_trilinear(&Frames::new(&m).expect("odd"), p)
            },
            vol.data()[i],
            H,
        );
        worst = worst.max(rel_err(dense[i], num, FLOOR));
    }
    OpCheck {
        op: "trilinear_sampler",
        instances: n,
        worst_rel_err: worst,
        threshold: OP_TOL,
    }
}

fn check_filter3d(rng: &mut ChaCha8Rng, n: usize) -> Result<OpCheck> {
    let grid = rigid_grid(3, 3, Some(3))?;
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (h, w) = (rng.random_range(2..=4), rng.random_range(2..=4));
        let frames = uniform(rng, &[3, h, w], 0.0, 1.0);
        let v = Tensor::from_fn(&[grid.len(), 3, h, w], |_| off_lattice(rng, -2, 2));
        let f = uniform(rng, &[grid.len(), h, w], -1.0, 1.0);
        let up = uniform(rng, &[h, w], -1.0, 1.0);
        let loss = |x: &Tensor, v: &Tensor, f: &Tensor| -> f64 {
            let out = filter3d_deformable(x, &grid, &OffsetField(v.clone()), &KernelWeights(f.clone()))
                .expect("shapes fixed");
            out.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let g = filter3d_backward(&frames, &grid, &OffsetField(v.clone()), &KernelWeights(f.clone()), &up)?;
        let probe = |t: &Tensor, i: usize, which: u8| {
            central_diff(
                |val| {
                    let mut m = t.clone();
                    m.data_mut()[i] = val;
                    match which {
                        0 => loss(&m, &v, &f),
                        1 => loss(&frames, &m, &f),
                        _ => loss(&frames, &v, &m),
                    }
                },
                t.data()[i],
                H,
            )
        };
        let ix = rng.random_range(0..frames.len());
        let iv = rng.random_range(0..v.len());
        let iff = rng.random_range(0..f.len());
        worst = worst
            .max(rel_err(g.frames.data()[ix], probe(&frames, ix, 0), FLOOR))
            .max(rel_err(g.offsets.data()[iv], probe(&v, iv, 1), FLOOR))
            .max(rel_err(g.weights.data()[iff], probe(&f, iff, 2), FLOOR));
    }
    Ok(OpCheck {
        op: "filter3d_deformable",
        instances: n,
        worst_rel_err: worst,
        threshold: OP_TOL,
    })
}

/// Checks a tape-built scalar function of its leaves against central
/// differences on `probes` randomly chosen leaf entries.
fn check_tape_fn(
    rng: &mut ChaCha8Rng,
    leaves: &[Tensor],
    probes: usize,
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let li = rng.random_range(0..leaves.len());
        let i = rng.random_range(0..leaves[li].len());
        let analytic = grads.get(vars[li]).map_or(0.0, |g| g.data()[i]);
        let x0 = leaves[li].data()[i];
        let f = |x: f64| -> Result<f64> {
            let mut vals = leaves.to_vec();
            vals[li].data_mut()[i] = x;
            eval(&vals)
        };
        let numeric = (f(x0 + H)? - f(x0 - H)?) / (2.0 * H);
        worst = worst.max(rel_err(analytic, numeric, FLOOR));
    }
    Ok(worst)
}

/// `Σ out ⊙ G` for a fixed random `G`, which exercises every output entry.
fn project(tape: &mut Tape, out: Var, g: &Tensor) -> Result<Var> {
    let g = tape.constant(g.clone());
    let m = tape.mul(out, g)?;
    tape.sum(m)
}

fn check_tape_ops(rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<OpCheck>> {
    let mut conv = 0.0f64;
    let mut act = 0.0f64;
    let mut resample = 0.0f64;
    let mut deform2d = 0.0f64;
    let mut l1 = 0.0f64;
    let grid2 = rigid_grid(3, 3, None)?;
    for _ in 0..n {
        let (ci, co) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let x = uniform(rng, &[ci, 4, 4], -1.0, 1.0);
        let w = uniform(rng, &[co, ci, 3, 3], -1.0, 1.0);
        let b = uniform(rng, &[co], -1.0, 1.0);
        let g = uniform(rng, &[co, 4, 4], -1.0, 1.0);
        conv = conv.max(check_tape_fn(rng, &[x, w, b], 3, &|t, v| {
            let out = t.conv2d(v[0], v[1], v[2])?;
            project(t, out, &g)
        })?);

        let a = away_from_zero(rng, &[2, 4, 4]);
        let g = uniform(rng, &[2, 4, 4], -1.0, 1.0);
        act = act.max(check_tape_fn(rng, &[a.clone()], 2, &|t, v| {
            let r = t.activation(v[0], Activation::Relu)?;
            let h = t.activation(r, Activation::Tanh)?;
            let th = t.activation(v[0], Activation::Tanh)?;
            let s = t.add(h, th)?;
            project(t, s, &g)
        })?);

        let g_down = uniform(rng, &[2, 2, 2], -1.0, 1.0);
        let g_up = uniform(rng, &[2, 8, 8], -1.0, 1.0);
        resample = resample.max(check_tape_fn(rng, &[a], 2, &|t, v| {
            let d = t.resample2x(v[0], Resample::Down)?;
            let u = t.resample2x(v[0], Resample::Up)?;
            let pd = project(t, d, &g_down)?;
            let pu = project(t, u, &g_up)?;
            t.add(pd, pu)
        })?);

        let img = uniform(rng, &[1, 4, 4], 0.0, 1.0);
        let off = Tensor::from_fn(&[grid2.len(), 2, 4, 4], |_| off_lattice(rng, -2, 2));
        let wts = uniform(rng, &[grid2.len(), 4, 4], -1.0, 1.0);
        let g = uniform(rng, &[1, 4, 4], -1.0, 1.0);
        let n_taps = grid2.len();
        deform2d = deform2d.max(check_tape_fn(rng, &[img, off, wts], 3, &|t, v| {
            let s = t.deform_sample(v[0], Some(v[1]), &grid2)?;
            let y = t.tap_sum(s, v[2], 0..n_taps, 1.0)?;
            project(t, y, &g)
        })?);

        let y = uniform(rng, &[1, 4, 4], 0.05, 0.95);
        let target = Tensor::from_fn(&[1, 4, 4], |i| {
            let d = rng.random_range(0.02..0.1);
            (y.data()[i] + if rng.random_bool(0.5) { d } else { -d }).clamp(0.0, 1.0)
        });
        l1 = l1.max(check_tape_fn(rng, &[y], 2, &|t, v| t.l1_gamma(v[0], &target))?);
    }
    let mk = |op, worst_rel_err| OpCheck {
        op,
        instances: n,
        worst_rel_err,
        threshold: OP_TOL,
    };
    Ok(vec![
        mk("conv2d", conv),
        mk("activations", act),
        mk("resample2x", resample),
        mk("deform_sample_2d", deform2d),
        mk("l1_gamma", l1),
    ])
}

/// Loss of the full network on one input, with parameter gradients.
pub fn end_to_end_loss(
    cfg: &NetConfig,
    store: &ParamStore,
    input: &Tensor,
    target: &Tensor,
    p: u64,
    schedule: &AnnealSchedule,
    want_grads: bool,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let net = Net::new(cfg, store)?;
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, input, schedule.weight(p) > 0.0)?;
    let loss = tape.total_loss(out.output, &out.groups, target, p, schedule)?;
    let value = tape.value(loss).item();
    let mut grads = BTreeMap::new();
    if want_grads {
        for (name, g) in tape.backward(loss)?.params() {
            if let Some(g) = g {
                grads.insert(name.to_string(), g.clone());
            }
        }
    }
    Ok((value, grads))
}

/// The configuration used by the end-to-end check: an 8×8 patch of three
/// frames through a narrow network.
pub fn toy_e2e_config() -> NetConfig {
    NetConfig {
        mode: Mode::Video3d,
        tau: 1,
        width_scale: 0.1,
        levels: 3,
        max_disp: 4.0,
        ..NetConfig::default()
    }
}

fn check_end_to_end(rng: &mut ChaCha8Rng, seed: u64, probes: usize) -> Result<OpCheck> {
    let cfg = toy_e2e_config();
    let store = build_network(&cfg, seed)?;
    let clean = uniform(rng, &[3, 8, 8], 0.05, 0.9);
    let noisy = clean.map(|v| v + rng.random_range(-0.03..0.03));
    let input = network_input(&cfg, &noisy, Some(&NoiseParams::LOW))?;
    let target = clean.narrow0(1, 2)?;
    let schedule = AnnealSchedule::default();
    let p = 5000;
    let (_, grads) = end_to_end_loss(&cfg, &store, &input, &target, p, &schedule, true)?;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let name = &names[rng.random_range(0..names.len())];
        let len = store.value(name).expect("listed").len();
        let i = rng.random_range(0..len);
        let analytic = grads.get(name).map_or(0.0, |g| g.data()[i]);
        let f = |delta: f64| -> Result<f64> {
            let mut s = store.clone();
            s.value_mut(name).expect("listed").data_mut()[i] += delta;
            Ok(end_to_end_loss(&cfg, &s, &input, &target, p, &schedule, false)?.0)
        };
        let numeric = (f(H)? - f(-H)?) / (2.0 * H);
        worst = worst.max(rel_err(analytic, numeric, 1e-6));
    }
    Ok(OpCheck {
        op: "end_to_end",
        instances: probes,
        worst_rel_err: worst,
        threshold: E2E_TOL,
    })
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.instances.max(1);
    let mut checks = vec![check_sampler(&mut rng, n), check_filter3d(&mut rng, n)?];
    checks.extend(check_tape_ops(&mut rng, n)?);
    checks.push(check_end_to_end(&mut rng, cfg.seed, cfg.e2e_probes.max(1))?);
    Ok(GradcheckReport { checks })
}
