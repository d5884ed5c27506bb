//! sRGB transfer curve, signal-dependent Gaussian noise and noise-level maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaParams {
    pub alpha: f64,
    pub threshold: f64,
    pub linear_slope: f64,
    pub exponent: f64,
}

impl Default for GammaParams {
    fn default() -> Self {
        Self::SRGB
    }
}

impl GammaParams {
    pub const SRGB: GammaParams = GammaParams {
        alpha: 0.055,
        threshold: 0.0031308,
        linear_slope: 12.92,
        exponent: 1.0 / 2.4,
    };

    /// Transfer without clamping: the linear branch also covers negatives.
    #[inline]
    pub fn encode(&self, y: f64) -> f64 {
        if y <= self.threshold {
            self.linear_slope * y
        } else {
            (1.0 + self.alpha) * y.powf(self.exponent) - self.alpha
        }
    }

    /// Derivative of [`GammaParams::encode`].
    #[inline]
    pub fn encode_slope(&self, y: f64) -> f64 {
        if y <= self.threshold {
            self.linear_slope
        } else {
            (1.0 + self.alpha) * self.exponent * y.powf(self.exponent - 1.0)
        }
    }

    #[inline]
    pub fn decode(&self, v: f64) -> f64 {
        if v <= self.linear_slope * self.threshold {
            v / self.linear_slope
        } else {
            ((v + self.alpha) / (1.0 + self.alpha)).powf(1.0 / self.exponent)
        }
    }
}

/// Linear to display-referred values; inputs are clamped to `[0, 1]` first.
pub fn gamma_forward(linear: &Tensor) -> Tensor {
    let g = GammaParams::SRGB;
    linear.map(|v| g.encode(v.clamp(0.0, 1.0)))
}

/// Display-referred to linear values; exact inverse of [`gamma_forward`] on `[0, 1]`.
pub fn gamma_inverse(srgb: &Tensor) -> Tensor {
    let g = GammaParams::SRGB;
    srgb.map(|v| g.decode(v))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseParams {
    /// Shot-noise coefficient, multiplies the clean linear intensity.
    pub sigma_s: f64,
    /// Read-noise standard deviation.
    pub sigma_r: f64,
    pub blind: bool,
}

pub const SIGMA_S_RANGE: (f64, f64) = (1e-4, 1e-2);
/// `[1e-3, 10^-1.5]`.
pub const SIGMA_R_RANGE: (f64, f64) = (1e-3, 0.031622776601683794);

impl NoiseParams {
    pub const LOW: NoiseParams = NoiseParams {
        sigma_s: 2.5e-3,
        sigma_r: 1e-2,
        blind: false,
    };

    pub const HIGH: NoiseParams = NoiseParams {
        sigma_s: 6.4e-3,
        sigma_r: 2e-2,
        blind: false,
    };

    pub fn new(sigma_s: f64, sigma_r: f64) -> Result<Self> {
        if !(sigma_s >= 0.0 && sigma_r >= 0.0 && sigma_s.is_finite() && sigma_r.is_finite()) {
            return Err(Error::Invalid(format!(
                "noise parameters must be finite and non-negative, got σs={sigma_s}, σr={sigma_r}"
            )));
        }
        Ok(Self {
            sigma_s,
            sigma_r,
            blind: false,
        })
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "low" => Some(Self::LOW),
            "high" => Some(Self::HIGH),
            _ => None,
        }
    }

    pub fn with_blind(mut self, blind: bool) -> Self {
        self.blind = blind;
        self
    }

    /// Noise variance at clean intensity `q`.
    #[inline]
    pub fn variance(&self, q: f64) -> f64 {
        self.sigma_s * q + self.sigma_r * self.sigma_r
    }
}

/// Adds `N(0, σs·q + σr²)` per pixel, `q` being the clean intensity.
pub fn synthesize_noise(clean: &Tensor, params: &NoiseParams, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    add_noise_with(clean, params, &mut rng)
}

pub fn add_noise_with(clean: &Tensor, params: &NoiseParams, rng: &mut impl Rng) -> Tensor {
    clean.map(|q| {
        let z: f64 = StandardNormal.sample(rng);
        q + params.variance(q).max(0.0).sqrt() * z
    })
}

/// `sqrt(σr² + σs·q_ref)` per pixel. Errors in blind mode.
pub fn noise_level_map(q_ref: &Tensor, params: &NoiseParams) -> Result<Tensor> {
    if params.blind {
        return Err(Error::Invalid("noise-level map requested in blind mode".into()));
    }
    Ok(q_ref.map(|q| params.variance(q).max(0.0).sqrt()))
}

/// Log-uniform draw of `(σs, σr)` from the training ranges.
pub fn sample_noise_params(seed: u64) -> NoiseParams {
    sample_noise_params_with(&mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn sample_noise_params_with(rng: &mut impl Rng) -> NoiseParams {
    let mut log_uniform = |(lo, hi): (f64, f64)| {
        let u: f64 = rng.random();
        let v = (lo.ln() + u * (hi.ln() - lo.ln())).exp();
        v.clamp(lo, hi)
    };
    let sigma_s = log_uniform(SIGMA_S_RANGE);
    let sigma_r = log_uniform(SIGMA_R_RANGE);
    NoiseParams {
        sigma_s,
        sigma_r,
        blind: false,
    }
}
