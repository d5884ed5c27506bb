//! U-Net offset predictor and the per-pixel kernel-weight head.
//!
//! The offset network is an encoder of 3-conv blocks with 2×2 average
//! pooling between levels and a decoder that upsamples (nearest), sums the
//! congruent encoder activations and refines. Its last layer emits
//! `N × D` channels through tanh, rescaled to pixels (spatial) and frames
//! (temporal). The weight head is three 3×3 convolutions over the sampled
//! taps, the network input and the last decoder features.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::color_noise::{noise_level_map, NoiseParams};
use crate::deform::{rigid_grid, KernelWeights, OffsetField, RigidGrid};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Feature widths of the five encoder levels at full scale.
pub const ENCODER_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];
/// Width of the full-resolution refinement block.
pub const REFINE_WIDTH: usize = 128;
/// Width of the two hidden layers of the weight head.
pub const WEIGHT_HEAD_WIDTH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Single image, spatial deformable kernel.
    Image2d,
    /// Independent spatial deformable kernels on every frame.
    Video2d,
    /// Spatio-temporal deformable kernel with 3D offsets.
    Video3d,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Image2d => "image2d",
            Mode::Video2d => "video2d",
            Mode::Video3d => "video3d",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image2d" => Ok(Mode::Image2d),
            "video2d" => Ok(Mode::Video2d),
            "video3d" => Ok(Mode::Video3d),
            _ => Err(Error::Invalid(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub mode: Mode,
    /// Frames on each side of the reference frame (ignored for `Image2d`).
    pub tau: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    /// Temporal kernel extent, used by `Video3d` only.
    pub kernel_t: usize,
    pub width_scale: f64,
    /// Resolution levels of the U-Net, 2..=5.
    pub levels: usize,
    /// Bound on spatial offsets in pixels.
    pub max_disp: f64,
    pub blind: bool,
    /// Rigid kernels: offsets are not predicted.
    pub fixed_grid: bool,
    /// When false the kernel weights are frozen to `1/N`.
    pub dynamic_weights: bool,
    /// Tap groups for the annealed regularizer.
    pub groups: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Video3d,
            tau: 2,
            kernel_h: 3,
            kernel_w: 3,
            kernel_t: 3,
            width_scale: 0.25,
            levels: 3,
            max_disp: 16.0,
            blind: false,
            fixed_grid: false,
            dynamic_weights: true,
            groups: 3,
        }
    }
}

impl NetConfig {
    /// Full-width, five-level network.
    pub fn full_scale() -> Self {
        Self {
            width_scale: 1.0,
            levels: 5,
            ..Self::default()
        }
    }

    pub fn frames(&self) -> usize {
        match self.mode {
            Mode::Image2d => 1,
            _ => 2 * self.tau + 1,
        }
    }

    pub fn grid(&self) -> Result<RigidGrid> {
        match self.mode {
            Mode::Image2d => rigid_grid(self.kernel_h, self.kernel_w, None),
            Mode::Video2d => RigidGrid::per_frame(self.kernel_h, self.kernel_w, self.tau),
            Mode::Video3d => rigid_grid(self.kernel_h, self.kernel_w, Some(self.kernel_t)),
        }
    }

    /// Spatial extents must be multiples of this.
    pub fn downsampling_factor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn input_channels(&self) -> usize {
        self.frames() + 1
    }

    pub fn scaled(&self, width: usize) -> usize {
        ((width as f64 * self.width_scale).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_scale > 0.0 && self.width_scale <= 1.0) {
            return Err(Error::Invalid(format!(
                "width_scale {} not in (0, 1]",
                self.width_scale
            )));
        }
        if !(2..=5).contains(&self.levels) {
            return Err(Error::Invalid(format!("levels {} not in 2..=5", self.levels)));
        }
        if !(self.max_disp > 0.0 && self.max_disp.is_finite()) {
            return Err(Error::Invalid(format!("max_disp {} must be positive", self.max_disp)));
        }
        if self.mode == Mode::Video3d && self.kernel_t > self.frames() {
            return Err(Error::Invalid(format!(
                "temporal kernel {} exceeds {} frames",
                self.kernel_t,
                self.frames()
            )));
        }
        let grid = self.grid()?;
        if self.mode == Mode::Video3d && (self.groups == 0 || grid.len() % self.groups != 0) {
            return Err(Error::Invalid(format!(
                "{} taps cannot be split into {} groups",
                grid.len(),
                self.groups
            )));
        }
        Ok(())
    }

    /// Per-channel scale turning tanh outputs into offsets.
    fn offset_scales(&self, grid: &RigidGrid) -> Vec<f64> {
        let per_tap: Vec<f64> = match grid.offset_dims() {
            3 => vec![self.max_disp, self.max_disp, self.tau as f64],
            _ => vec![self.max_disp, self.max_disp],
        };
        per_tap.iter().copied().cycle().take(grid.len() * per_tap.len()).collect()
    }

    fn encoder_widths(&self) -> Vec<usize> {
        ENCODER_WIDTHS[..self.levels].iter().map(|&w| self.scaled(w)).collect()
    }
}

/// One named 3×3 convolution: input and output channel counts.
#[derive(Clone, Debug)]
struct ConvSpec {
    name: String,
    c_in: usize,
    c_out: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Vec<Vec<ConvSpec>>,
    /// Decoder blocks from level `levels-2` down to 0.
    decoder: Vec<Vec<ConvSpec>>,
    offset_out: ConvSpec,
    weight_head: Vec<ConvSpec>,
}

fn conv(name: String, c_in: usize, c_out: usize) -> ConvSpec {
    ConvSpec { name, c_in, c_out }
}

fn layout(cfg: &NetConfig) -> Result<Layout> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let widths = cfg.encoder_widths();
    let mut encoder = Vec::new();
    let mut c = cfg.input_channels();
    for (lvl, &w) in widths.iter().enumerate() {
        let block = (0..3)
            .map(|k| {
                let spec = conv(format!("offset.enc{lvl}.conv{k}"), c, w);
                c = w;
                spec
            })
            .collect();
        encoder.push(block);
    }
    let mut decoder = Vec::new();
    for lvl in (0..cfg.levels - 1).rev() {
        let skip = widths[lvl];
        let mut block = vec![conv(format!("offset.dec{lvl}.conv0"), c, skip)];
        if lvl > 0 {
            block.push(conv(format!("offset.dec{lvl}.conv1"), skip, skip));
            block.push(conv(format!("offset.dec{lvl}.conv2"), skip, skip));
            c = skip;
        } else {
            let refine = cfg.scaled(REFINE_WIDTH);
            block.push(conv(format!("offset.dec{lvl}.conv1"), skip, refine));
            c = refine;
        }
        decoder.push(block);
    }
    let features = c;
    let offset_out = conv(
        "offset.out".to_string(),
        features,
        grid.len() * grid.offset_dims(),
    );
    let hidden = cfg.scaled(WEIGHT_HEAD_WIDTH);
    let head_in = grid.len() + cfg.input_channels() + features;
    let weight_head = vec![
        conv("weights.conv0".to_string(), head_in, hidden),
        conv("weights.conv1".to_string(), hidden, hidden),
        conv("weights.conv2".to_string(), hidden, grid.len()),
    ];
    Ok(Layout {
        encoder,
        decoder,
        offset_out,
        weight_head,
    })
}

fn init_conv(store: &mut ParamStore, spec: &ConvSpec, gain: f64, bias: f64, rng: &mut ChaCha8Rng) {
    let fan_in = (spec.c_in * 9) as f64;
    let bound = gain * (6.0 / fan_in).sqrt();
    let w = Tensor::from_fn(&[spec.c_out, spec.c_in, 3, 3], |_| {
        rng.random_range(-bound..bound)
    });
    store.insert(format!("{}.w", spec.name), w);
    store.insert(format!("{}.b", spec.name), Tensor::full(&[spec.c_out], bias));
}

/// Allocates and initializes all parameters; deterministic in `seed`.
///
/// Hidden layers use He-uniform bounds. The offset output starts small so
/// training begins near the rigid grid, and the weight head's output bias
/// starts at `1/N` (uniform averaging).
pub fn build_network(cfg: &NetConfig, seed: u64) -> Result<ParamStore> {
    let l = layout(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in l.encoder.iter().chain(&l.decoder).flatten() {
        init_conv(&mut store, spec, 1.0, 0.0, &mut rng);
    }
    init_conv(&mut store, &l.offset_out, 0.05, 0.0, &mut rng);
    let n = l.weight_head[2].c_out as f64;
    init_conv(&mut store, &l.weight_head[0], 1.0, 0.0, &mut rng);
    init_conv(&mut store, &l.weight_head[1], 1.0, 0.0, &mut rng);
    init_conv(&mut store, &l.weight_head[2], 0.01, 1.0 / n, &mut rng);
    Ok(store)
}

/// Checks that `store` holds exactly the parameters `cfg` needs.
pub fn check_params(cfg: &NetConfig, store: &ParamStore) -> Result<()> {
    let l = layout(cfg)?;
    let mut expected = 0;
    for spec in l
        .encoder
        .iter()
        .chain(&l.decoder)
        .flatten()
        .chain([&l.offset_out])
        .chain(&l.weight_head)
    {
        let w = store.value(&format!("{}.w", spec.name));
        if w.map(|w| w.shape()) != Some(&[spec.c_out, spec.c_in, 3, 3][..]) {
            return Err(Error::Incompatible(format!(
                "parameter `{}.w` missing or mis-shaped",
                spec.name
            )));
        }
        expected += 2;
    }
    if store.len() != expected {
        return Err(Error::Incompatible(format!(
            "expected {expected} parameter tensors, found {}",
            store.len()
        )));
    }
    Ok(())
}

/// Builds the `[T+1, H, W]` network input: frames plus a noise channel
/// (the noise-level map, or zeros when blind).
pub fn network_input(cfg: &NetConfig, frames: &Tensor, noise: Option<&NoiseParams>) -> Result<Tensor> {
    let (t, h, w) = frames.dims3()?;
    if t != cfg.frames() {
        return Err(shape_err(
            "network_input",
            format!("expected {} frames, got {t}", cfg.frames()),
        ));
    }
    let level = if cfg.blind {
        Tensor::zeros(&[1, h, w])
    } else {
        let p = noise.ok_or_else(|| {
            Error::Invalid("non-blind network needs noise parameters".into())
        })?;
        let reference = frames.narrow0(t / 2, t / 2 + 1)?;
        noise_level_map(&reference, &p.with_blind(false))?
    };
    Tensor::cat0(&[frames, &level])
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub input: Var,
    pub features: Var,
    /// `[N·D, H, W]`; `None` with a fixed grid.
    pub offsets: Option<Var>,
    pub samples: Var,
    pub weights: Var,
    /// Denoised reference frame `[1, H, W]`.
    pub output: Var,
    /// Per-group outputs, scaled by the group count.
    pub groups: Vec<Var>,
}

/// Parameters pulled onto a tape.
pub struct Net<'a> {
    cfg: &'a NetConfig,
    layout: Layout,
    grid: RigidGrid,
    store: &'a ParamStore,
}

impl<'a> Net<'a> {
    pub fn new(cfg: &'a NetConfig, store: &'a ParamStore) -> Result<Self> {
        let layout = layout(cfg)?;
        check_params(cfg, store)?;
        Ok(Self {
            cfg,
            layout,
            grid: cfg.grid()?,
            store,
        })
    }

    pub fn grid(&self) -> &RigidGrid {
        &self.grid
    }

    fn conv(&self, tape: &mut Tape, x: Var, spec: &ConvSpec) -> Result<Var> {
        let w = tape.param(self.store, &format!("{}.w", spec.name))?;
        let b = tape.param(self.store, &format!("{}.b", spec.name))?;
        tape.conv2d(x, w, b)
    }

    fn conv_relu(&self, tape: &mut Tape, x: Var, spec: &ConvSpec) -> Result<Var> {
        let y = self.conv(tape, x, spec)?;
        tape.relu(y)
    }

    /// U-Net trunk: returns the last decoder activations.
    pub fn features(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let (_, h, w) = tape.value(input).dims3()?;
        let f = self.cfg.downsampling_factor();
        if h % f != 0 || w % f != 0 {
            return Err(shape_err(
                "predict_offsets",
                format!("{h}x{w} is not divisible by {f}"),
            ));
        }
        let mut skips = Vec::new();
        let mut x = input;
        for (lvl, block) in self.layout.encoder.iter().enumerate() {
            if lvl > 0 {
                x = tape.resample2x(x, crate::autodiff::Resample::Down)?;
            }
            for spec in block {
                x = self.conv_relu(tape, x, spec)?;
            }
            skips.push(x);
        }
        skips.pop();
        for block in &self.layout.decoder {
            x = tape.resample2x(x, crate::autodiff::Resample::Up)?;
            x = self.conv_relu(tape, x, &block[0])?;
            let skip = skips.pop().expect("one skip per decoder level");
            x = tape.add(x, skip)?;
            for spec in &block[1..] {
                x = self.conv_relu(tape, x, spec)?;
            }
        }
        Ok(x)
    }

    /// Offsets `[N·D, H, W]` from the trunk features, bounded by tanh.
    pub fn offsets(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let raw = self.conv(tape, features, &self.layout.offset_out)?;
        let unit = tape.tanh(raw)?;
        tape.scale_planes(unit, self.cfg.offset_scales(&self.grid))
    }

    /// Kernel weights `[N, H, W]` from sampled taps, input and features.
    pub fn weights(&self, tape: &mut Tape, samples: Var, input: Var, features: Var) -> Result<Var> {
        let x = tape.concat(&[samples, input, features])?;
        let head = &self.layout.weight_head;
        let x = self.conv_relu(tape, x, &head[0])?;
        let x = self.conv_relu(tape, x, &head[1])?;
        self.conv(tape, x, &head[2])
    }

    /// Full forward pass on a `[T+1, H, W]` network input.
    pub fn forward(&self, tape: &mut Tape, input: &Tensor, with_groups: bool) -> Result<ForwardOut> {
        let (c, h, w) = input.dims3()?;
        if c != self.cfg.input_channels() {
            return Err(shape_err(
                "forward_denoise",
                format!("expected {} input channels, got {c}", self.cfg.input_channels()),
            ));
        }
        let t = self.cfg.frames();
        let input = tape.constant(input.clone());
        let frames = tape.narrow(input, 0, t)?;
        let features = self.features(tape, input)?;
        let offsets = if self.cfg.fixed_grid {
            None
        } else {
            Some(self.offsets(tape, features)?)
        };
        let samples = tape.deform_sample(frames, offsets, &self.grid)?;
        let weights = if self.cfg.dynamic_weights {
            self.weights(tape, samples, input, features)?
        } else {
            tape.constant(KernelWeights::uniform(self.grid.len(), h, w).0)
        };
        let n = self.grid.len();
        let output = tape.tap_sum(samples, weights, 0..n, 1.0)?;
        let mut groups = Vec::new();
        if with_groups {
            let s = self.cfg.groups;
            for i in 1..=s {
                let taps = self.grid.group(i, s)?;
                groups.push(tape.tap_sum(samples, weights, taps, s as f64)?);
            }
        }
        Ok(ForwardOut {
            input,
            features,
            offsets,
            samples,
            weights,
            output,
            groups,
        })
    }
}

/// Offsets and trunk features for a `[T+1, H, W]` input.
pub fn predict_offsets(cfg: &NetConfig, store: &ParamStore, input: &Tensor) -> Result<(OffsetField, Tensor)> {
    let net = Net::new(cfg, store)?;
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let features = net.features(&mut tape, x)?;
    let (_, h, w) = input.dims3()?;
    let grid = net.grid();
    let offsets = if cfg.fixed_grid {
        OffsetField::zeros(grid, h, w)
    } else {
        let v = net.offsets(&mut tape, features)?;
        OffsetField(tape.value(v).clone().reshape(&[grid.len(), grid.offset_dims(), h, w])?)
    };
    Ok((offsets, tape.value(features).clone()))
}

/// Kernel weights from sampled taps `[N, H, W]`, input and features.
pub fn predict_weights(
    cfg: &NetConfig,
    store: &ParamStore,
    samples: &Tensor,
    input: &Tensor,
    features: &Tensor,
) -> Result<KernelWeights> {
    let net = Net::new(cfg, store)?;
    let mut tape = Tape::new();
    let s = tape.constant(samples.clone());
    let x = tape.constant(input.clone());
    let f = tape.constant(features.clone());
    let out = net.weights(&mut tape, s, x, f)?;
    Ok(KernelWeights(tape.value(out).clone()))
}

#[derive(Clone, Debug)]
pub struct Denoised {
    /// `[H, W]` reference-frame estimate in linear space.
    pub output: Tensor,
    pub groups: Vec<Tensor>,
    /// `[N, D, H, W]`, zeros for a fixed grid.
    pub offsets: OffsetField,
}

/// Denoises one window. Inputs whose extents are not multiples of the
/// downsampling factor are reflect-padded and the result cropped back.
pub fn forward_denoise(
    cfg: &NetConfig,
    store: &ParamStore,
    frames: &Tensor,
    noise: Option<&NoiseParams>,
) -> Result<Denoised> {
    let (t, h, w) = frames.dims3()?;
    let f = cfg.downsampling_factor();
    let (ph, pw) = (h.div_ceil(f) * f, w.div_ceil(f) * f);
    let padded = if (ph, pw) == (h, w) {
        frames.clone()
    } else {
        reflect_pad(frames, ph, pw)?
    };
    let input = network_input(cfg, &padded, noise)?;
    let net = Net::new(cfg, store)?;
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, &input, cfg.mode == Mode::Video3d)?;
    let crop = |v: Var| crop_plane(tape.value(v), h, w);
    let output = crop(out.output)?;
    let groups = out.groups.iter().map(|&g| crop(g)).collect::<Result<_>>()?;
    let grid = net.grid();
    let offsets = match out.offsets {
        Some(v) => {
            let full = tape.value(v);
            let planes = full.shape()[0];
            let mut data = Vec::with_capacity(planes * h * w);
            for c in 0..planes {
                let p = full.plane(c);
                for y in 0..h {
                    data.extend_from_slice(&p[y * pw..y * pw + w]);
                }
            }
            OffsetField(Tensor::new(&[grid.len(), grid.offset_dims(), h, w], data)?)
        }
        None => OffsetField::zeros(grid, h, w),
    };
    debug_assert_eq!(t, cfg.frames());
    Ok(Denoised {
        output,
        groups,
        offsets,
    })
}

fn crop_plane(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, ph, pw) = t.dims3()?;
    debug_assert!(ph >= h);
    let src = t.plane(0);
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        data.extend_from_slice(&src[y * pw..y * pw + w]);
    }
    Tensor::new(&[h, w], data)
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Reflect-pads each plane of `[C, H, W]` at the bottom/right to `ph × pw`.
pub fn reflect_pad(t: &Tensor, ph: usize, pw: usize) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    let mut data = Vec::with_capacity(c * ph * pw);
    for k in 0..c {
        let p = t.plane(k);
        for y in 0..ph {
            let sy = reflect(y, h);
            for x in 0..pw {
                data.push(p[sy * w + reflect(x, w)]);
            }
        }
    }
    Tensor::new(&[c, ph, pw], data)
}
