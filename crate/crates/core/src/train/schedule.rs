use std::fmt;
use std::str::FromStr;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScheduleKind {
    Const0,
    Const1,
    TwoStepLinear,
    Exponential,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 4] = [
        ScheduleKind::Const0,
        ScheduleKind::Const1,
        ScheduleKind::TwoStepLinear,
        ScheduleKind::Exponential,
    ];

    pub fn decays(self) -> bool {
        matches!(self, ScheduleKind::TwoStepLinear | ScheduleKind::Exponential)
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Const0 => "const0",
            ScheduleKind::Const1 => "const1",
            ScheduleKind::TwoStepLinear => "two-step",
            ScheduleKind::Exponential => "exponential",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "const0" | "zero" => Ok(ScheduleKind::Const0),
            "const1" | "one" => Ok(ScheduleKind::Const1),
            "two-step" | "two-step-linear" | "linear" => Ok(ScheduleKind::TwoStepLinear),
            "exponential" | "exp" => Ok(ScheduleKind::Exponential),
            other => Err(Error::Invalid(format!(
                "unknown schedule {other:?} (expected const0, const1, two-step or exponential)"
            ))),
        }
    }
}

/// Weight λ(t) of the reconstruction loss at update step `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaSchedule {
    kind: ScheduleKind,
    tau: u64,
    start: f64,
    knee: f64,
    divisor: f64,
    floor: f64,
}

impl LambdaSchedule {
    pub fn constant(kind: ScheduleKind) -> Self {
        Self {
            kind,
            tau: 1,
            start: 1.0,
            knee: 0.1,
            divisor: 9.0,
            floor: 0.01,
        }
    }

    pub fn new(kind: ScheduleKind, tau: u64) -> Result<Self> {
        if kind.decays() && tau == 0 {
            return Err(Error::Invalid(format!("schedule {kind} needs tau > 0")));
        }
        Ok(Self {
            tau: tau.max(1),
            ..Self::constant(kind)
        })
    }

    /// Override the two-step shape: value at 0, value at τ, the divisor of
    /// the post-τ slope, and the floor it settles at.
    pub fn with_two_step(mut self, start: f64, knee: f64, divisor: f64, floor: f64) -> Result<Self> {
        if !(start >= knee && knee >= floor && floor >= 0.0 && divisor > 0.0) {
            return Err(Error::Invalid(format!(
                "two-step schedule needs start ≥ knee ≥ floor ≥ 0 and divisor > 0, \
                 got {start}, {knee}, {floor}, {divisor}"
            )));
        }
        self.start = start;
        self.knee = knee;
        self.divisor = divisor;
        self.floor = floor;
        Ok(self)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn tau(&self) -> u64 {
        self.tau
    }

    pub fn at(&self, t: u64) -> f64 {
        let tau = self.tau as f64;
        let t = t as f64;
        match self.kind {
            ScheduleKind::Const0 => 0.0,
            ScheduleKind::Const1 => 1.0,
            ScheduleKind::Exponential => 0.1f64.powf(t / tau),
            ScheduleKind::TwoStepLinear => {
                if t <= tau {
                    // Written around the knee so that λ(τ) is the knee exactly.
                    self.knee + (self.start - self.knee) * (1.0 - t / tau)
                } else {
                    let slope = (self.knee - self.floor) / (self.divisor * tau);
                    (self.knee - slope * (t - tau)).max(self.floor)
                }
            }
        }
    }
}
