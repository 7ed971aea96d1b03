//! Time schedules for sampling and distillation.
//!
//! A schedule holds `N+1` strictly increasing noise levels from `t_min` to
//! `t_max`. Sampling walks it from the top down. Teacher solvers subdivide
//! each student segment into `K` sub-steps that follow the same spacing law
//! restricted to the segment, so the student's anchor points stay bit-exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spacing law for a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `t_n = (t_min^{1/ρ} + (n/N)(t_max^{1/ρ} − t_min^{1/ρ}))^ρ`.
    Polynomial { rho: f64 },
    /// Evenly spaced noise levels.
    Uniform,
}

/// Ordered timestamps `t_0 < t_1 < … < t_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSchedule {
    values: Vec<f64>,
    kind: ScheduleKind,
}

impl TimeSchedule {
    /// The polynomial-ρ schedule over `[t_min, t_max]` with `N` segments.
    /// Endpoints are assigned exactly rather than through the power formula.
    pub fn polynomial(n: usize, t_min: f64, t_max: f64, rho: f64) -> Result<Self> {
        if n < 1 {
            return Err(Error::invalid("schedule needs at least one segment"));
        }
        if !(t_min > 0.0 && t_max > t_min) {
            return Err(Error::invalid("schedule requires 0 < t_min < t_max"));
        }
        if !(rho > 0.0) {
            return Err(Error::invalid("schedule exponent rho must be positive"));
        }
        let mut values = Vec::with_capacity(n + 1);
        values.push(t_min);
        values.extend((1..n).map(|i| poly_point(t_min, t_max, i as f64 / n as f64, rho)));
        values.push(t_max);
        Ok(TimeSchedule {
            values,
            kind: ScheduleKind::Polynomial { rho },
        })
    }

    /// Evenly spaced schedule over `[t_min, t_max]` with `N` segments.
    pub fn uniform(n: usize, t_min: f64, t_max: f64) -> Result<Self> {
        if n < 1 {
            return Err(Error::invalid("schedule needs at least one segment"));
        }
        if !(t_min > 0.0 && t_max > t_min) {
            return Err(Error::invalid("schedule requires 0 < t_min < t_max"));
        }
        let mut values = Vec::with_capacity(n + 1);
        values.push(t_min);
        values.extend((1..n).map(|i| lerp(t_min, t_max, i as f64 / n as f64)));
        values.push(t_max);
        Ok(TimeSchedule {
            values,
            kind: ScheduleKind::Uniform,
        })
    }

    /// Ascending timestamps.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of segments `N`.
    pub fn segments(&self) -> usize {
        self.values.len() - 1
    }

    pub fn t_min(&self) -> f64 {
        self.values[0]
    }

    pub fn t_max(&self) -> f64 {
        *self.values.last().unwrap()
    }

    /// Replace every segment by `K` sub-segments following this schedule's
    /// spacing law restricted to the segment. Parent timestamps are preserved
    /// bit-exactly; the result has `N·K + 1` points.
    pub fn subdivide(&self, k: usize) -> Result<TimeSchedule> {
        if k < 1 {
            return Err(Error::invalid("subdivision factor must be >= 1"));
        }
        if k == 1 {
            return Ok(self.clone());
        }
        let mut values = Vec::with_capacity(self.segments() * k + 1);
        for seg in 0..self.segments() {
            let (a, b) = (self.values[seg], self.values[seg + 1]);
            values.push(a);
            values.extend(self.interior_points(a, b, k));
        }
        values.push(self.t_max());
        Ok(TimeSchedule {
            values,
            kind: self.kind,
        })
    }

    /// Sub-times inside one segment `t_hi → t_lo` (descending, `K+1` points,
    /// endpoints exact), following this schedule's spacing law.
    pub fn segment_subtimes(&self, t_hi: f64, t_lo: f64, k: usize) -> Result<Vec<f64>> {
        if k < 1 {
            return Err(Error::invalid("subdivision factor must be >= 1"));
        }
        if !(t_hi > t_lo) {
            return Err(Error::invalid("segment must run from high to low noise"));
        }
        let mut out = Vec::with_capacity(k + 1);
        out.push(t_hi);
        let mut interior = self.interior_points(t_lo, t_hi, k);
        interior.reverse();
        out.extend(interior);
        out.push(t_lo);
        Ok(out)
    }

    /// Ascending interior points of `[a, b]` under this schedule's law.
    fn interior_points(&self, a: f64, b: f64, k: usize) -> Vec<f64> {
        (1..k)
            .map(|j| {
                let frac = j as f64 / k as f64;
                match self.kind {
                    ScheduleKind::Polynomial { rho } => poly_point(a, b, frac, rho),
                    ScheduleKind::Uniform => lerp(a, b, frac),
                }
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.values).expect("timestamps serialize")
    }
}

fn poly_point(a: f64, b: f64, frac: f64, rho: f64) -> f64 {
    let inv = 1.0 / rho;
    (a.powf(inv) + frac * (b.powf(inv) - a.powf(inv))).powf(rho)
}

fn lerp(a: f64, b: f64, frac: f64) -> f64 {
    a + frac * (b - a)
}
