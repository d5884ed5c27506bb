//! L1 loss in gamma space and the annealed tap-group regularizer.

use crate::autodiff::{BackCtx, Tape, Var};
use crate::color_noise::GammaParams;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Coefficient `η·γ^p` of the group regularizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnealSchedule {
    pub eta: f64,
    pub gamma_decay: f64,
    /// Number of tap groups `s`.
    pub groups: usize,
    pub enabled: bool,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            eta: 100.0,
            gamma_decay: 0.9998,
            groups: 3,
            enabled: true,
        }
    }
}

impl AnnealSchedule {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn weight(&self, p: u64) -> f64 {
        anneal_weight(self, p)
    }
}

pub fn anneal_weight(schedule: &AnnealSchedule, p: u64) -> f64 {
    if !schedule.enabled {
        return 0.0;
    }
    schedule.eta * schedule.gamma_decay.powf(p as f64)
}

/// `mean |φ(Y) − φ(Y_gt)|`, with φ extended linearly below zero.
pub fn l1_gamma_loss(y: &Tensor, y_gt: &Tensor) -> Result<f64> {
    y.expect_same_shape("l1_gamma_loss", y_gt)?;
    let g = GammaParams::SRGB;
    let total: f64 = y
        .data()
        .iter()
        .zip(y_gt.data())
        .map(|(&a, &b)| (g.encode(a) - g.encode(b)).abs())
        .sum();
    Ok(total / y.len() as f64)
}

impl Tape {
    /// Records [`l1_gamma_loss`] of `y` against a fixed target.
    pub fn l1_gamma(&mut self, y: Var, target: &Tensor) -> Result<Var> {
        self.check(y)?;
        let loss = l1_gamma_loss(self.value(y), target)?;
        let encoded_target = target.map(|v| GammaParams::SRGB.encode(v));
        self.push("l1_gamma", Tensor::scalar(loss), &[y], move |ctx: &BackCtx<'_>| {
            let g = GammaParams::SRGB;
            let k = ctx.grad.item() / ctx.inputs[0].len() as f64;
            let grad = ctx.inputs[0].zip_map(&encoded_target, |a, t| {
                let d = g.encode(a) - t;
                let sign = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                k * sign * g.encode_slope(a)
            })?;
            Ok(vec![Some(grad)])
        })
    }

    /// `l(Y, Y_gt) + η·γ^p · mean_i l(Y_i, Y_gt)`.
    ///
    /// The regularizer is skipped when its weight is zero.
    pub fn total_loss(
        &mut self,
        y: Var,
        groups: &[Var],
        target: &Tensor,
        p: u64,
        schedule: &AnnealSchedule,
    ) -> Result<Var> {
        let base = self.l1_gamma(y, target)?;
        let weight = anneal_weight(schedule, p);
        if weight == 0.0 {
            return Ok(base);
        }
        if groups.len() != schedule.groups {
            return Err(Error::Invalid(format!(
                "expected {} group outputs, got {}",
                schedule.groups,
                groups.len()
            )));
        }
        let mut reg: Option<Var> = None;
        for &gi in groups {
            let li = self.l1_gamma(gi, target)?;
            reg = Some(match reg {
                Some(acc) => self.add(acc, li)?,
                None => li,
            });
        }
        let reg = reg.expect("at least one group");
        let reg = self.mul_scalar(reg, weight / groups.len() as f64)?;
        self.add(base, reg)
    }
}

/// Evaluates the total loss on plain tensors.
pub fn total_loss(
    y: &Tensor,
    groups: &[Tensor],
    target: &Tensor,
    p: u64,
    schedule: &AnnealSchedule,
) -> Result<f64> {
    let base = l1_gamma_loss(y, target)?;
    let weight = anneal_weight(schedule, p);
    if weight == 0.0 {
        return Ok(base);
    }
    if groups.len() != schedule.groups {
        return Err(shape_err(
            "total_loss",
            format!("expected {} groups, got {}", schedule.groups, groups.len()),
        ));
    }
    let mut reg = 0.0;
    for g in groups {
        reg += l1_gamma_loss(g, target)?;
    }
    Ok(base + weight * reg / groups.len() as f64)
}
