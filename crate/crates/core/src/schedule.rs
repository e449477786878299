//! Cosine noise schedule and the closed-form algebra between `x0`, `eps`,
//! `v` and the noisy sample `x_n`.
//!
//! `alpha_bar[n]` is the cumulative signal retention at step `n`; the noisy
//! sample is `x_n = sqrt(abar) x0 + sqrt(1 - abar) eps` and the velocity target
//! is `v = sqrt(abar) eps - sqrt(1 - abar) x0`. Since `(x_n, v)` is a rotation
//! of `(x0, eps)`, both inverses below are exact.

use std::f64::consts::FRAC_PI_2;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{lincomb, Dense};

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    offset: f64,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// `abar_n = f(n) / f(0)` with `f(n) = cos^2(((n/N + s) / (1 + s)) * pi/2)`.
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(offset > 0.0 && offset.is_finite()) {
            return Err(Error::invalid(format!(
                "cosine offset must be positive, got {offset}"
            )));
        }
        let f = |n: usize| {
            let c = ((n as f64 / steps as f64 + offset) / (1.0 + offset) * FRAC_PI_2).cos();
            c * c
        };
        let f0 = f(0);
        let alpha_bar = (0..=steps).map(|n| f(n) / f0).collect();
        Ok(Self {
            steps,
            offset,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// `abar_n` for `n` in `0..=N`.
    pub fn alpha_bar(&self, n: usize) -> f64 {
        self.alpha_bar[n]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_step(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.steps {
            return Err(Error::invalid(format!(
                "step {n} outside 1..={}",
                self.steps
            )));
        }
        Ok(())
    }

    /// Manifest form: `kind=cosine N=<steps> s=<offset>`.
    pub fn descriptor(&self) -> ScheduleDescriptor {
        ScheduleDescriptor {
            steps: self.steps,
            offset: self.offset,
        }
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::cosine(DEFAULT_TRAIN_STEPS, DEFAULT_COSINE_OFFSET).expect("default schedule")
    }
}

/// Serializable description of a cosine schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleDescriptor {
    pub steps: usize,
    pub offset: f64,
}

impl ScheduleDescriptor {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.steps, self.offset)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kind = None;
        let mut steps = None;
        let mut offset = None;
        for tok in text.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad schedule token `{tok}`")))?;
            match k {
                "kind" => kind = Some(v.to_string()),
                "N" => steps = v.parse().ok(),
                "s" => offset = v.parse().ok(),
                _ => return Err(Error::Format(format!("unknown schedule key `{k}`"))),
            }
        }
        if kind.as_deref() != Some("cosine") {
            return Err(Error::Format(format!(
                "unsupported schedule kind {kind:?}"
            )));
        }
        match (steps, offset) {
            (Some(steps), Some(offset)) => Ok(Self { steps, offset }),
            _ => Err(Error::Format(format!("incomplete schedule `{text}`"))),
        }
    }
}

impl fmt::Display for ScheduleDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "kind=cosine N={} s={}", self.steps, self.offset)
    }
}

fn check_abar(abar: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&abar) {
        return Err(Error::invalid(format!("alpha_bar {abar} outside [0, 1]")));
    }
    Ok(())
}

/// `v = sqrt(abar) eps - sqrt(1 - abar) x0`.
pub fn velocity<T: Dense>(x0: &T, eps: &T, abar: f64) -> Result<T> {
    check_abar(abar)?;
    lincomb(abar.sqrt(), eps, -(1.0 - abar).sqrt(), x0)
}

/// `x0_hat = sqrt(abar) x_n - sqrt(1 - abar) v`.
pub fn x0_from_v<T: Dense>(x_n: &T, v: &T, abar: f64) -> Result<T> {
    check_abar(abar)?;
    lincomb(abar.sqrt(), x_n, -(1.0 - abar).sqrt(), v)
}

/// `eps_hat = sqrt(abar) v + sqrt(1 - abar) x_n`.
pub fn eps_from_v<T: Dense>(x_n: &T, v: &T, abar: f64) -> Result<T> {
    check_abar(abar)?;
    lincomb(abar.sqrt(), v, (1.0 - abar).sqrt(), x_n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::diffuse;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_endpoints_and_monotonicity() {
        let s = NoiseSchedule::cosine(1000, 0.008).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(1000) < 1e-3);
        assert!(s.alpha_bar(1000) > 0.0);
        for &a in s.alpha_bars() {
            let (x, y) = (a.sqrt(), (1.0 - a).sqrt());
            assert!((x * x + y * y - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_midpoint_matches_direct_evaluation() {
        let s = NoiseSchedule::cosine(1000, 0.008).unwrap();
        // independent evaluation: cos^2 of the two angles
        let angle = |n: f64| (n / 1000.0 + 0.008) / 1.008 * std::f64::consts::PI / 2.0;
        let expected = angle(500.0).cos().powi(2) / angle(0.0).cos().powi(2);
        assert!((s.alpha_bar(500) - expected).abs() < 1e-15);
    }

    #[test]
    fn cosine_rejects_bad_arguments() {
        assert!(NoiseSchedule::cosine(0, 0.008).is_err());
        assert!(NoiseSchedule::cosine(10, 0.0).is_err());
        assert!(NoiseSchedule::cosine(10, -1.0).is_err());
    }

    #[test]
    fn cosine_is_deterministic() {
        let a = NoiseSchedule::cosine(777, 0.01).unwrap();
        let b = NoiseSchedule::cosine(777, 0.01).unwrap();
        assert_eq!(a.alpha_bars(), b.alpha_bars());
    }

    #[test]
    fn descriptor_round_trip() {
        let d = NoiseSchedule::default().descriptor();
        assert_eq!(d.to_string(), "kind=cosine N=1000 s=0.008");
        assert_eq!(ScheduleDescriptor::parse(&d.to_string()).unwrap(), d);
        assert!(ScheduleDescriptor::parse("kind=linear N=3 s=1").is_err());
    }

    #[test]
    fn velocity_cases() {
        let eps = t(&[0.3, -2.0]);
        let x0 = t(&[1.0, 5.0]);
        assert_eq!(velocity(&x0, &eps, 1.0).unwrap(), eps);
        let zero = t(&[0.0, 0.0]);
        let v = velocity(&zero, &eps, 0.49).unwrap();
        assert!((v.data()[1] - 0.7 * -2.0).abs() < 1e-15);
        let v = velocity(&t(&[2.0]), &t(&[0.0]), 0.5).unwrap();
        assert!((v.data()[0] + 0.5f64.sqrt() * 2.0).abs() < 1e-15);
        assert!((v.data()[0] + 1.41421).abs() < 1e-5);
    }

    #[test]
    fn inverse_boundary_cases() {
        let xn = t(&[1.5, -0.5]);
        let v = t(&[0.25, 4.0]);
        assert_eq!(x0_from_v(&xn, &v, 1.0).unwrap(), xn);
        assert_eq!(eps_from_v(&xn, &v, 1.0).unwrap(), v);
        assert_eq!(eps_from_v(&xn, &v, 0.0).unwrap(), xn);
        let half = x0_from_v(&xn, &t(&[0.0, 0.0]), 0.25).unwrap();
        assert_eq!(half.data(), &[0.75, -0.25]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(velocity(&t(&[1.0]), &t(&[1.0, 2.0]), 0.5).is_err());
        assert!(x0_from_v(&t(&[1.0]), &t(&[1.0, 2.0]), 0.5).is_err());
        assert!(eps_from_v(&t(&[1.0]), &t(&[1.0, 2.0]), 0.5).is_err());
    }

    proptest! {
        #[test]
        fn round_trips_recover_x0_and_eps(
            x0 in proptest::collection::vec(-5.0f64..5.0, 6),
            eps in proptest::collection::vec(-5.0f64..5.0, 6),
            abar in 1e-6f64..=1.0,
        ) {
            let (x0, eps) = (t(&x0), t(&eps));
            let xn = diffuse(&x0, &eps, abar).unwrap();
            let v = velocity(&x0, &eps, abar).unwrap();
            let x0_hat = x0_from_v(&xn, &v, abar).unwrap();
            let eps_hat = eps_from_v(&xn, &v, abar).unwrap();
            for (a, b) in x0_hat.data().iter().zip(x0.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in eps_hat.data().iter().zip(eps.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
