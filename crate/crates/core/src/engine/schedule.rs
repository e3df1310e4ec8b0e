//! Adaptive discriminator step frequency.
//!
//! Training starts at `n_D = 1`. Before every generator step the
//! discriminator's accuracy on the fresh fake batch is folded into a
//! `beta`-EMA; once the EMA is below the floor `d` and at least
//! `ceil(2 / (1 - beta))` generator steps have passed since the last change,
//! `n_D` moves one rung up the ladder `1, 2, 5, 10, 20, 50, ...`.
//! The rung never moves down.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Exponential moving average seeded with its first observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ema {
    pub beta: f64,
    pub value: Option<f64>,
}

impl Ema {
    pub fn new(beta: f64) -> Self {
        Ema { beta, value: None }
    }

    pub fn update(&mut self, x: f64) -> f64 {
        let v = match self.value {
            None => x,
            Some(prev) => self.beta * prev + (1.0 - self.beta) * x,
        };
        self.value = Some(v);
        v
    }
}

/// `1, 2, 5, 10, 20, 50, ...` up to the largest value that fits in a `u32`.
pub fn default_ladder() -> Vec<u32> {
    let mut v = Vec::new();
    let mut base: u64 = 1;
    'outer: loop {
        for m in [1u64, 2, 5] {
            let x = base * m;
            if x > u32::MAX as u64 {
                break 'outer;
            }
            v.push(x as u32);
        }
        base *= 10;
    }
    v
}

/// Grace period `2 / (1 - beta)` rounded up, tolerating representation error
/// (`2 / (1 - 0.99)` is `200.00000000000017` in binary).
pub fn grace_period(beta: f64) -> u64 {
    let g = 2.0 / (1.0 - beta);
    let r = libm::round(g);
    if (g - r).abs() < 1e-9 * r.max(1.0) {
        r as u64
    } else {
        libm::ceil(g) as u64
    }
}

/// Controller state for the adaptive step frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleState {
    pub beta: f64,
    /// Accuracy floor `d`.
    pub floor: f64,
    pub ladder: Vec<u32>,
    pub rung_index: usize,
    pub ema: Option<f64>,
    /// Generator steps since the last rung change (or since the start).
    pub steps_since_change: u64,
    pub grace: u64,
    /// Set once the top rung has been reported as exhausted.
    pub exhausted_warned: bool,
}

impl ScheduleState {
    pub fn new(beta: f64, floor: f64, ladder: Vec<u32>) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::config(format!("ema beta {beta} outside (0, 1)")));
        }
        if !(floor > 0.0 && floor < 1.0) {
            return Err(Error::config(format!("accuracy floor {floor} outside (0, 1)")));
        }
        if ladder.is_empty() || ladder[0] == 0 || ladder.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("ladder must be a strictly increasing list of positive integers"));
        }
        Ok(ScheduleState {
            beta,
            floor,
            ladder,
            rung_index: 0,
            ema: None,
            steps_since_change: 0,
            grace: grace_period(beta),
            exhausted_warned: false,
        })
    }

    /// Current discriminator steps per generator step.
    pub fn current(&self) -> u32 {
        self.ladder[self.rung_index]
    }

    /// Folds in one fake-batch accuracy and returns the frequency to use next.
    pub fn update(&mut self, fake_accuracy: f64) -> Result<u32> {
        if !(0.0..=1.0).contains(&fake_accuracy) {
            return Err(Error::config(format!("fake accuracy {fake_accuracy} outside [0, 1]")));
        }
        let mut ema = Ema { beta: self.beta, value: self.ema };
        let v = ema.update(fake_accuracy);
        self.ema = ema.value;
        self.steps_since_change += 1;
        if v < self.floor && self.steps_since_change >= self.grace {
            if self.rung_index + 1 < self.ladder.len() {
                self.rung_index += 1;
                self.steps_since_change = 0;
            } else if !self.exhausted_warned {
                self.exhausted_warned = true;
                log::warn!("adaptive ladder exhausted; staying at n_D = {}", self.current());
            }
        }
        Ok(self.current())
    }
}

/// Functional form of [`ScheduleState::update`].
pub fn adaptive_update(sched: &ScheduleState, fake_accuracy: f64) -> Result<(ScheduleState, u32)> {
    let mut s = sched.clone();
    let n = s.update(fake_accuracy)?;
    Ok((s, n))
}
