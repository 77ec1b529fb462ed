//! Adam with an exponentially decaying learning rate.
//!
//! The learning rate stays at `eps0` until `t0`, then decays geometrically to
//! `eps0 / 1000` at `t1`, where training stops. From `t0` on, Adam's first
//! moment decay `beta1` drops from 0.9 to 0.5. Moments are kept across the
//! drop and bias correction uses whatever `beta1` is current.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{GradBundle, MlpParams};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS_HAT: f64 = 1e-8;
pub const DECAYED_BETA1: f64 = 0.5;
/// Overall learning-rate decay factor reached at `t1`.
pub const DECAY_FACTOR: f64 = 0.001;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub eps0: f64,
    pub t0: u64,
    pub t1: u64,
}

impl Schedule {
    pub fn new(eps0: f64, t0: u64, t1: u64) -> Result<Self> {
        let s = Self { eps0, t0, t1 };
        s.validate()?;
        Ok(s)
    }

    /// Full-length schedule: 1e-3 base rate, decay from 15k to 25k iterations.
    pub fn full() -> Self {
        Self {
            eps0: 1e-3,
            t0: 15_000,
            t1: 25_000,
        }
    }

    /// Ten-fold shortened schedule used for desk-scale runs.
    pub fn desk() -> Self {
        Self {
            eps0: 1e-3,
            t0: 1_500,
            t1: 2_500,
        }
    }

    /// Lower base rate preset for warm-started networks.
    pub fn pretrained() -> Self {
        Self {
            eps0: 3e-4,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps0 > 0.0 && self.eps0.is_finite()) {
            return Err(Error::config(format!(
                "base learning rate must be positive, got {}",
                self.eps0
            )));
        }
        if !(0 < self.t0 && self.t0 < self.t1) {
            return Err(Error::config(format!(
                "schedule needs 0 < t0 < t1, got t0 = {}, t1 = {}",
                self.t0, self.t1
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, t: u64) -> Result<f64> {
        lr_at(self, t)
    }
}

/// Learning rate at iteration `t`.
pub fn lr_at(schedule: &Schedule, t: u64) -> Result<f64> {
    if t > schedule.t1 {
        return Err(Error::OutOfSchedule { t, t1: schedule.t1 });
    }
    if t <= schedule.t0 {
        return Ok(schedule.eps0);
    }
    let frac = (t - schedule.t0) as f64 / (schedule.t1 - schedule.t0) as f64;
    Ok(schedule.eps0 * DECAY_FACTOR.powf(frac))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: GradBundle,
    pub second_moment: GradBundle,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        Self {
            first_moment: GradBundle::zeros_like(params),
            second_moment: GradBundle::zeros_like(params),
            step_count: 0,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps_hat: DEFAULT_EPS_HAT,
        }
    }

    /// Switches to the decay-phase `beta1` once `t` reaches `t0`.
    pub fn apply_beta1_drop(&mut self, t: u64, schedule: &Schedule) {
        if t >= schedule.t0 {
            self.beta1 = DECAYED_BETA1;
        }
    }
}

pub fn beta1_drop(mut state: AdamState, t: u64, schedule: &Schedule) -> AdamState {
    state.apply_beta1_drop(t, schedule);
    state
}

/// One bias-corrected Adam update of `params` in place. The correction uses
/// whichever `beta1` is current, so it also follows the decay-phase drop.
pub fn adam_step(
    params: &mut MlpParams,
    grads: &GradBundle,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !grads.is_congruent(params)
        || !state.first_moment.is_congruent(params)
        || !state.second_moment.is_congruent(params)
    {
        return Err(Error::contract(
            "gradients, moments and parameters must have identical shapes",
        ));
    }
    if lr.is_nan() || lr <= 0.0 {
        return Err(Error::contract(format!("learning rate must be positive, got {lr}")));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps_hat);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);

    let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    };

    for (((layer, g), m), v) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.first_moment.layers)
        .zip(&mut state.second_moment.layers)
    {
        update(
            layer.weight.as_mut_slice(),
            g.weight.as_slice(),
            m.weight.as_mut_slice(),
            v.weight.as_mut_slice(),
        );
        update(&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::init_params;

    #[test]
    fn schedule_values() {
        let s = Schedule::full();
        assert_eq!(lr_at(&s, 0).unwrap(), 1e-3);
        assert_eq!(lr_at(&s, 15_000).unwrap(), 1e-3);
        assert!((lr_at(&s, 25_000).unwrap() - 1e-6).abs() < 1e-18);
        assert!((lr_at(&s, 20_000).unwrap() - 3.16228e-5).abs() < 1e-10);
        assert!(matches!(
            lr_at(&s, 25_001),
            Err(Error::OutOfSchedule { t: 25_001, .. })
        ));
    }

    #[test]
    fn schedule_is_non_increasing() {
        let s = Schedule::desk();
        let mut prev = f64::INFINITY;
        for t in 0..=s.t1 {
            let lr = lr_at(&s, t).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule::new(1e-3, 1, 1).is_err());
        assert!(Schedule::new(1e-3, 0, 10).is_err());
        assert!(Schedule::new(0.0, 1, 10).is_err());
        assert!(Schedule::new(1e-3, 1, 2).is_ok());
    }

    #[test]
    fn beta1_drop_at_t0() {
        let p = init_params(&[2, 2], 0.3, 0).unwrap();
        let s = Schedule::full();
        let st = beta1_drop(AdamState::new(&p), s.t0 - 1, &s);
        assert_eq!(st.beta1, 0.9);
        let st = beta1_drop(st, s.t0, &s);
        assert_eq!(st.beta1, 0.5);
        let twice = beta1_drop(st.clone(), s.t0 + 3, &s);
        assert_eq!(twice, st);
    }

    #[test]
    fn zero_gradients_leave_params() {
        let mut p = init_params(&[3, 4, 2], 0.3, 1).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let g = GradBundle::zeros_like(&p);
        adam_step(&mut p, &g, &mut st, 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = init_params(&[3, 4, 2], 0.3, 1).unwrap();
        let q = init_params(&[3, 5, 2], 0.3, 1).unwrap();
        let mut st = AdamState::new(&p);
        let g = GradBundle::zeros_like(&q);
        assert!(matches!(
            adam_step(&mut p, &g, &mut st, 1e-3),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn state_serializes_moments() {
        let p = init_params(&[2, 3], 0.3, 1).unwrap();
        let st = AdamState::new(&p);
        let v: serde_json::Value = serde_json::to_value(&st).unwrap();
        assert_eq!(v["first_moment"][0]["weight"][1].as_array().unwrap().len(), 3);
        assert_eq!(v["step_count"], 0);
        let back: AdamState = serde_json::from_value(v).unwrap();
        assert_eq!(back, st);
    }
}
