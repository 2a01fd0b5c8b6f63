//! Time schedules for few-step sampling.
//!
//! Times are stored in increasing order with `times[0] = t_min` and
//! `times[N] = t_max`. Generation walks the schedule backwards, from
//! `t_N` down to `t_0`.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_T_MIN: f64 = 0.002;
pub const DEFAULT_T_MAX: f64 = 80.0;
pub const DEFAULT_RHO: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Uniform,
    Polynomial,
    Logsnr,
    /// Anything not produced by [`make_schedule`], e.g. a refined teacher grid.
    Custom,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "polynomial" => Ok(Self::Polynomial),
            "logsnr" => Ok(Self::Logsnr),
            "custom" => Ok(Self::Custom),
            other => Err(Error::InvalidSchedule(format!(
                "unknown schedule kind {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Uniform => "uniform",
            Self::Polynomial => "polynomial",
            Self::Logsnr => "logsnr",
            Self::Custom => "custom",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSchedule {
    pub kind: ScheduleKind,
    pub rho: f64,
    times: Vec<f64>,
}

impl TimeSchedule {
    /// Wraps an explicit increasing list of times.
    pub fn from_times(kind: ScheduleKind, rho: f64, times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidSteps(times.len().saturating_sub(1)));
        }
        if times.iter().any(|t| !t.is_finite() || *t <= 0.0) {
            return Err(Error::InvalidSchedule(
                "times must be finite and positive".into(),
            ));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSchedule(
                "times must be strictly increasing".into(),
            ));
        }
        Ok(Self { kind, rho, times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of intervals.
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn t_min(&self) -> f64 {
        self.times[0]
    }

    pub fn t_max(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// `(t_cur, t_next)` for interval `n`, i.e. `(t_{n+1}, t_n)`.
    pub fn interval(&self, n: usize) -> (f64, f64) {
        (self.times[n + 1], self.times[n])
    }

    /// One time per line in shortest round-trip decimal form, preceded by a
    /// `#` comment line recording kind and rho.
    pub fn to_text(&self) -> String {
        let mut out = format!("# kind={} rho={}\n", self.kind, self.rho);
        for t in &self.times {
            let _ = writeln!(out, "{t:?}");
        }
        out
    }

    /// Parses [`TimeSchedule::to_text`] output. The comment header is
    /// optional; without it the schedule is [`ScheduleKind::Custom`].
    pub fn from_text(text: &str) -> Result<Self> {
        let mut kind = ScheduleKind::Custom;
        let mut rho = DEFAULT_RHO;
        let mut times = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(comment) = line.strip_prefix('#') {
                for field in comment.split_whitespace() {
                    match field.split_once('=') {
                        Some(("kind", v)) => kind = v.parse()?,
                        Some(("rho", v)) => {
                            rho = v
                                .parse()
                                .map_err(|_| Error::InvalidSchedule(format!("bad rho {v:?}")))?
                        }
                        _ => {}
                    }
                }
                continue;
            }
            let t: f64 = line
                .parse()
                .map_err(|_| Error::InvalidSchedule(format!("bad time {line:?}")))?;
            times.push(t);
        }
        Self::from_times(kind, rho, times)
    }
}

/// Builds an `n_steps`-interval schedule on `[t_min, t_max]`.
///
/// `rho` is only read for [`ScheduleKind::Polynomial`]. Endpoints are pinned
/// exactly.
pub fn make_schedule(
    kind: ScheduleKind,
    n_steps: usize,
    t_min: f64,
    t_max: f64,
    rho: f64,
) -> Result<TimeSchedule> {
    if !(t_min > 0.0 && t_min < t_max && t_max.is_finite()) {
        return Err(Error::InvalidRange { t_min, t_max });
    }
    if n_steps < 1 {
        return Err(Error::InvalidSteps(n_steps));
    }
    let n = n_steps as f64;
    let interior = |i: usize| -> f64 {
        let u = i as f64 / n;
        match kind {
            ScheduleKind::Uniform => t_min + u * (t_max - t_min),
            ScheduleKind::Polynomial => {
                let lo = t_min.powf(1.0 / rho);
                let hi = t_max.powf(1.0 / rho);
                (lo + u * (hi - lo)).powf(rho)
            }
            ScheduleKind::Logsnr => (t_min.ln() + u * (t_max.ln() - t_min.ln())).exp(),
            ScheduleKind::Custom => unreachable!(),
        }
    };
    match kind {
        ScheduleKind::Polynomial if !(rho >= 1.0 && rho.is_finite()) => {
            return Err(Error::InvalidSchedule(format!(
                "rho must be >= 1, got {rho}"
            )));
        }
        ScheduleKind::Custom => {
            return Err(Error::InvalidSchedule(
                "custom schedules need explicit times".into(),
            ));
        }
        _ => {}
    }
    let mut times = Vec::with_capacity(n_steps + 1);
    times.push(t_min);
    times.extend((1..n_steps).map(interior));
    times.push(t_max);
    TimeSchedule::from_times(kind, rho, times)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_midpoint() {
        let s = make_schedule(ScheduleKind::Uniform, 2, 0.002, 80.0, 1.0).unwrap();
        assert_eq!(s.times()[0], 0.002);
        assert!((s.times()[1] - 40.001).abs() < 1e-12);
        assert_eq!(s.times()[2], 80.0);
    }

    #[test]
    fn polynomial_pins_endpoints() {
        let s = make_schedule(ScheduleKind::Polynomial, 5, 0.002, 80.0, 7.0).unwrap();
        assert_eq!(s.times().len(), 6);
        assert_eq!(s.times()[0], 0.002);
        assert_eq!(s.times()[5], 80.0);
    }

    #[test]
    fn logsnr_is_geometric() {
        let s = make_schedule(ScheduleKind::Logsnr, 2, 0.01, 100.0, 1.0).unwrap();
        assert!((s.times()[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(matches!(
            make_schedule(ScheduleKind::Uniform, 3, 0.0, 80.0, 1.0),
            Err(Error::InvalidRange { .. })
        ));
        assert!(matches!(
            make_schedule(ScheduleKind::Uniform, 3, 80.0, 1.0, 1.0),
            Err(Error::InvalidRange { .. })
        ));
        assert!(matches!(
            make_schedule(ScheduleKind::Uniform, 0, 0.002, 80.0, 1.0),
            Err(Error::InvalidSteps(0))
        ));
        assert!(make_schedule(ScheduleKind::Polynomial, 3, 0.002, 80.0, 0.5).is_err());
    }

    #[test]
    fn text_round_trip_is_exact() {
        let s = make_schedule(ScheduleKind::Polynomial, 7, 0.002, 80.0, 7.0).unwrap();
        let back = TimeSchedule::from_text(&s.to_text()).unwrap();
        assert_eq!(back, s);
        let bare = TimeSchedule::from_text("0.5\n1\n2.25\n").unwrap();
        assert_eq!(bare.kind, ScheduleKind::Custom);
        assert_eq!(bare.times(), &[0.5, 1.0, 2.25]);
    }

    proptest! {
        #[test]
        fn schedules_are_strictly_increasing(
            n in 1usize..60,
            t_min in 1e-3f64..1.0,
            span in 1.0f64..200.0,
            kind_idx in 0usize..3,
        ) {
            let kind = [ScheduleKind::Uniform, ScheduleKind::Polynomial, ScheduleKind::Logsnr][kind_idx];
            let t_max = t_min + span;
            let s = make_schedule(kind, n, t_min, t_max, 7.0).unwrap();
            prop_assert_eq!(s.n_steps(), n);
            prop_assert_eq!(s.t_min(), t_min);
            prop_assert_eq!(s.t_max(), t_max);
            prop_assert!(s.times().windows(2).all(|w| w[0] < w[1]));
        }
    }
}
