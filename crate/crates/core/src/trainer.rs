//! Adam, the learning-rate schedule, patch sampling and the training loop.
//!
//! All randomness for iteration `p` comes from streams keyed on
//! `(seed, p, sample)`, so a resumed run replays the same trajectory and
//! batch samples can be generated and differentiated independently.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape};
use crate::checkpoint::ModelCheckpoint;
use crate::color_noise::{add_noise_with, sample_noise_params_with, NoiseParams};
use crate::error::{shape_err, Error, Result};
use crate::losses::{anneal_weight, l1_gamma_loss, AnnealSchedule};
use crate::network::{build_network, network_input, Mode, Net, NetConfig};
use crate::par::Exec;
use crate::tensor::Tensor;

/// How noise parameters are chosen for each training sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseSampling {
    /// Log-uniform over the training ranges.
    Random,
    Fixed(NoiseParams),
}

impl fmt::Display for NoiseSampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseSampling::Random => f.write_str("random"),
            NoiseSampling::Fixed(p) => write!(f, "{:?},{:?}", p.sigma_s, p.sigma_r),
        }
    }
}

impl FromStr for NoiseSampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "random" {
            return Ok(Self::Random);
        }
        if let Some(p) = NoiseParams::preset(s) {
            return Ok(Self::Fixed(p));
        }
        let parsed = s
            .split_once(',')
            .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)));
        match parsed {
            Some((ss, sr)) => Ok(Self::Fixed(NoiseParams::new(ss, sr)?)),
            None => Err(Error::Invalid(format!(
                "noise must be `random`, `low`, `high` or `sigma_s,sigma_r`, got `{s}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub patch: usize,
    pub lr_init: f64,
    pub lr_decay: f64,
    pub lr_floor: f64,
    pub max_iters: u64,
    pub seed: u64,
    pub anneal: AnnealSchedule,
    pub noise: NoiseSampling,
    /// Checkpoint period in iterations; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            patch: 32,
            lr_init: 2e-4,
            lr_decay: 0.999991,
            lr_floor: 1e-4,
            max_iters: 2000,
            seed: 0,
            anneal: AnnealSchedule::default(),
            noise: NoiseSampling::Random,
            checkpoint_every: 0,
            log_every: 1,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    /// Batch 32, 128-pixel patches, 2·10⁵ iterations.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 32,
            patch: 128,
            max_iters: 200_000,
            ..Self::default()
        }
    }
}

/// `max(lr_floor, lr_init · lr_decay^iter)`.
pub fn lr_schedule(cfg: &TrainConfig, iter: u64) -> f64 {
    (cfg.lr_init * cfg.lr_decay.powf(iter as f64)).max(cfg.lr_floor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps; also the iteration counter of the annealing schedule.
    pub step: u64,
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let moments = params
            .iter()
            .map(|(name, p)| {
                let z = Tensor::zeros(p.value.shape());
                (name.to_string(), (z.clone(), z))
            })
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments,
        }
    }
}

/// Bias-corrected Adam update; gradients are zeroed afterwards.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != state.moments.len() {
        return Err(Error::Incompatible(format!(
            "optimizer tracks {} tensors, model has {}",
            state.moments.len(),
            params.len()
        )));
    }
    let t = (state.step + 1) as f64;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    for (name, p) in params.iter_mut() {
        let (m, v) = state
            .moments
            .get_mut(name)
            .ok_or_else(|| Error::MissingGradient(name.to_string()))?;
        if m.shape() != p.value.shape() {
            return Err(shape_err("adam_step", format!("moments of `{name}`")));
        }
        let g = p.grad.data();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            md[i] = b1 * md[i] + (1.0 - b1) * g[i];
            vd[i] = b2 * vd[i] + (1.0 - b2) * g[i] * g[i];
            let mh = md[i] / c1;
            let vh = vd[i] / c2;
            *w -= lr * mh / (vh.sqrt() + eps);
        }
    }
    params.zero_grad();
    state.step += 1;
    Ok(())
}

/// The same `patch × patch` window from every frame of `[T, H, W]`.
pub fn crop_at(seq: &Tensor, patch: usize, y0: usize, x0: usize) -> Result<Tensor> {
    let (t, h, w) = seq.dims3()?;
    if y0 + patch > h || x0 + patch > w {
        return Err(shape_err(
            "crop_patch",
            format!("patch {patch} at ({y0},{x0}) exceeds {h}x{w}"),
        ));
    }
    let mut data = Vec::with_capacity(t * patch * patch);
    for k in 0..t {
        let p = seq.plane(k);
        for y in y0..y0 + patch {
            data.extend_from_slice(&p[y * w + x0..y * w + x0 + patch]);
        }
    }
    Tensor::new(&[t, patch, patch], data)
}

/// Uniformly placed crop; returns the patch and its origin.
pub fn crop_patch_with(seq: &Tensor, patch: usize, rng: &mut impl Rng) -> Result<(Tensor, (usize, usize))> {
    let (_, h, w) = seq.dims3()?;
    if patch == 0 || patch > h || patch > w {
        return Err(shape_err("crop_patch", format!("patch {patch} larger than {h}x{w}")));
    }
    let y0 = rng.random_range(0..=h - patch);
    let x0 = rng.random_range(0..=w - patch);
    Ok((crop_at(seq, patch, y0, x0)?, (y0, x0)))
}

pub fn crop_patch(seq: &Tensor, patch: usize, seed: u64) -> Result<Tensor> {
    crop_patch_with(seq, patch, &mut ChaCha8Rng::seed_from_u64(seed)).map(|(t, _)| t)
}

/// Clean linear-space sequences `[L, H, W]`, `L ≥ 2τ+1`.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub sequences: Vec<Tensor>,
}

impl Dataset {
    pub fn new(sequences: Vec<Tensor>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Invalid("empty dataset".into()));
        }
        for s in &sequences {
            s.dims3()?;
        }
        Ok(Self { sequences })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// One synthesized training example.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `[T+1, P, P]` network input (noisy frames + noise channel).
    pub input: Tensor,
    /// `[1, P, P]` clean reference frame.
    pub target: Tensor,
    pub noise: NoiseParams,
}

fn stream(seed: u64, iteration: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration.wrapping_mul(1 << 20).wrapping_add(index));
    rng
}

/// Draws the `index`-th sample of iteration `iteration`.
pub fn draw_sample(
    data: &Dataset,
    net: &NetConfig,
    cfg: &TrainConfig,
    iteration: u64,
    index: u64,
) -> Result<Sample> {
    let mut rng = stream(cfg.seed, iteration, index);
    let t = net.frames();
    let seq = &data.sequences[rng.random_range(0..data.len())];
    let (len, _, _) = seq.dims3()?;
    if len < t {
        return Err(shape_err("draw_sample", format!("sequence of {len} frames, need {t}")));
    }
    let start = rng.random_range(0..=len - t);
    let window = seq.narrow0(start, start + t)?;
    let (clean, _) = crop_patch_with(&window, cfg.patch, &mut rng)?;
    let noise = match cfg.noise {
        NoiseSampling::Random => sample_noise_params_with(&mut rng),
        NoiseSampling::Fixed(p) => p,
    };
    let noisy = add_noise_with(&clean, &noise, &mut rng);
    let input = network_input(net, &noisy, Some(&noise))?;
    Ok(Sample {
        input,
        target: clean.narrow0(t / 2, t / 2 + 1)?,
        noise,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub iteration: u64,
    pub lr: f64,
    /// Batch mean of the total (regularized) loss.
    pub loss: f64,
    /// Batch mean of the plain gamma-space L1 loss.
    pub l1: f64,
    pub reg_weight: f64,
    pub elapsed_s: f64,
}

impl StepStats {
    pub const LOG_HEADER: &'static str = "iteration\tlr\tloss\treg_weight\twall_clock_s";

    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:e}\t{:.8}\t{:e}\t{:.3}",
            self.iteration, self.lr, self.loss, self.reg_weight, self.elapsed_s
        )
    }
}

pub struct Trainer {
    pub net: NetConfig,
    pub cfg: TrainConfig,
    pub params: ParamStore,
    pub adam: AdamState,
    started: Instant,
}

struct SampleGrads {
    loss: f64,
    l1: f64,
    grads: Vec<(String, Tensor)>,
}

impl Trainer {
    pub fn new(net: NetConfig, cfg: TrainConfig) -> Result<Self> {
        let params = build_network(&net, cfg.seed)?;
        let adam = AdamState::new(&params);
        Ok(Self {
            net,
            cfg,
            params,
            adam,
            started: Instant::now(),
        })
    }

    pub fn from_checkpoint(ckpt: ModelCheckpoint, cfg: TrainConfig) -> Result<Self> {
        crate::network::check_params(&ckpt.config, &ckpt.params)?;
        if ckpt.adam.step != ckpt.iteration {
            return Err(Error::Incompatible(format!(
                "checkpoint iteration {} disagrees with optimizer step {}",
                ckpt.iteration, ckpt.adam.step
            )));
        }
        Ok(Self {
            net: ckpt.config,
            cfg,
            params: ckpt.params,
            adam: ckpt.adam,
            started: Instant::now(),
        })
    }

    pub fn iteration(&self) -> u64 {
        self.adam.step
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            config: self.net.clone(),
            params: self.params.clone(),
            iteration: self.adam.step,
            adam: self.adam.clone(),
        }
    }

    fn sample_grads(&self, data: &Dataset, p: u64, index: u64, schedule: &AnnealSchedule) -> Result<SampleGrads> {
        let sample = draw_sample(data, &self.net, &self.cfg, p, index)?;
        let net = Net::new(&self.net, &self.params)?;
        let mut tape = Tape::new();
        let with_groups = anneal_weight(schedule, p) > 0.0;
        let out = net.forward(&mut tape, &sample.input, with_groups)?;
        let loss = tape.total_loss(out.output, &out.groups, &sample.target, p, schedule)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let l1 = l1_gamma_loss(tape.value(out.output), &sample.target)?;
        let grads = tape.backward(loss)?;
        Ok(SampleGrads {
            loss: loss_value,
            l1,
            grads: grads
                .params()
                .filter_map(|(n, g)| g.map(|g| (n.to_string(), g.clone())))
                .collect(),
        })
    }

    /// One optimization step over a freshly drawn batch.
    ///
    /// On error the parameters are left untouched.
    pub fn step(&mut self, data: &Dataset) -> Result<StepStats> {
        let p = self.adam.step;
        let mut schedule = self.cfg.anneal;
        schedule.groups = self.net.groups;
        if self.net.mode != Mode::Video3d {
            schedule.enabled = false;
        }
        let batch = self.cfg.batch_size.max(1);
        let results = self
            .cfg
            .exec
            .map_range(batch, |b| self.sample_grads(data, p, b as u64, &schedule));

        self.params.zero_grad();
        let (mut loss, mut l1) = (0.0, 0.0);
        for r in results {
            let r = r?;
            loss += r.loss;
            l1 += r.l1;
            for (name, g) in &r.grads {
                self.params.accumulate(name, g)?;
            }
        }
        let inv = 1.0 / batch as f64;
        self.params.scale_grads(inv);
        let lr = lr_schedule(&self.cfg, p);
        adam_step(&mut self.params, &mut self.adam, lr)?;
        Ok(StepStats {
            iteration: p,
            lr,
            loss: loss * inv,
            l1: l1 * inv,
            reg_weight: anneal_weight(&schedule, p),
            elapsed_s: self.started.elapsed().as_secs_f64(),
        })
    }

    /// Steps until `max_iters`, calling `observe` after each step.
    pub fn run(
        &mut self,
        data: &Dataset,
        mut observe: impl FnMut(&StepStats, &Trainer) -> Result<()>,
    ) -> Result<()> {
        while self.adam.step < self.cfg.max_iters {
            let stats = self.step(data)?;
            observe(&stats, self)?;
        }
        Ok(())
    }
}

/// Trains from scratch for `cfg.max_iters` iterations.
pub fn train(data: &Dataset, cfg: &TrainConfig, net: &NetConfig) -> Result<ModelCheckpoint> {
    let mut trainer = Trainer::new(net.clone(), cfg.clone())?;
    trainer.run(data, |_, _| Ok(()))?;
    Ok(trainer.checkpoint())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(&cfg, 0), 2e-4);
        assert_eq!(lr_schedule(&cfg, 10_000_000), 1e-4);
        let mut prev = f64::INFINITY;
        for it in (0..200_000).step_by(997) {
            let lr = lr_schedule(&cfg, it);
            assert!(lr <= prev && lr >= 1e-4);
            prev = lr;
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(&[3], 0.7));
        let mut st = AdamState::new(&store);
        adam_step(&mut store, &mut st, 1e-2).unwrap();
        assert_eq!(store.value("w").unwrap().data(), &[0.7; 3]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε)
        for g in [3.0, -0.02] {
            let mut store = ParamStore::new();
            store.insert("w", Tensor::scalar(1.0));
            let mut st = AdamState::new(&store);
            store.accumulate("w", &Tensor::scalar(g)).unwrap();
            adam_step(&mut store, &mut st, 1e-3).unwrap();
            let want = 1.0 - 1e-3 * g / (f64::abs(g) + 1e-8);
            assert!((store.value("w").unwrap().item() - want).abs() < 1e-15);
            assert_eq!(store.grad("w").unwrap().item(), 0.0);
        }
    }

    #[test]
    fn adam_rejects_mismatched_state() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0));
        let mut st = AdamState::new(&ParamStore::new());
        assert!(adam_step(&mut store, &mut st, 1e-3).is_err());
    }

    #[test]
    fn crop_shares_origin_across_frames() {
        let seq = Tensor::from_fn(&[5, 10, 12], |i| (i / 120) as f64);
        let (p, (y0, x0)) = crop_patch_with(&seq, 4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(y0 <= 6 && x0 <= 8);
        for t in 0..5 {
            assert!(p.plane(t).iter().all(|&v| v == t as f64));
        }
        let full = crop_patch(&seq.narrow0(0, 1).unwrap().reshape(&[1, 10, 12]).unwrap(), 10, 0);
        assert!(full.is_ok());
        assert!(crop_patch(&seq, 11, 0).is_err());
        let square = Tensor::from_fn(&[2, 6, 6], |i| i as f64);
        assert_eq!(crop_patch(&square, 6, 9).unwrap(), square);
    }

    #[test]
    fn noise_sampling_parses() {
        assert_eq!("random".parse::<NoiseSampling>().unwrap(), NoiseSampling::Random);
        assert_eq!(
            "low".parse::<NoiseSampling>().unwrap(),
            NoiseSampling::Fixed(NoiseParams::LOW)
        );
        let s = NoiseSampling::Fixed(NoiseParams::new(1e-3, 2e-2).unwrap());
        assert_eq!(s.to_string().parse::<NoiseSampling>().unwrap(), s);
        assert!("loud".parse::<NoiseSampling>().is_err());
    }
}
