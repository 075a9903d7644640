//! Variance schedules, half-log-SNR bookkeeping and reduced timestep grids.
//!
//! Timesteps are 1-based (`1..=T`); `t = 0` denotes the clean endpoint with
//! `alpha_bar(0) = 1` and an infinite half-log-SNR.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Linear,
    ScaledLinear,
}

impl ScheduleKind {
    fn tag(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::ScaledLinear => "scaled-linear",
        }
    }
}

/// Discrete-time variance schedule. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    half_log_snr: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule of `t_max` steps with betas running from `beta_min`
    /// to `beta_max`.
    pub fn build(kind: ScheduleKind, t_max: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::param(format!("schedule needs T >= 2, got {t_max}")));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::param(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let n = t_max as f64 - 1.0;
        let beta = (0..t_max)
            .map(|i| {
                let f = i as f64 / n;
                match kind {
                    ScheduleKind::Linear => beta_min + f * (beta_max - beta_min),
                    ScheduleKind::ScaledLinear => {
                        let (a, b) = (beta_min.sqrt(), beta_max.sqrt());
                        let s = a + f * (b - a);
                        s * s
                    }
                }
            })
            .collect();
        Self::from_betas(kind, beta)
    }

    /// Builds a schedule from an explicit beta sequence (`beta[0]` is `t = 1`).
    pub fn from_betas(kind: ScheduleKind, beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 {
            return Err(Error::param("schedule needs at least two betas"));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::param(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0f64;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        if alpha_bar.last().copied().unwrap_or(0.0) <= 0.0 {
            return Err(Error::param("alpha_bar underflows to zero"));
        }
        let half_log_snr = alpha_bar.iter().map(|&ab| half_log_snr(ab)).collect();
        Ok(Self {
            kind,
            beta,
            alpha,
            alpha_bar,
            half_log_snr,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[self.index(t)]
    }

    /// `alpha_bar(t)`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[self.index(t)]
        }
    }

    /// `lambda_t = ln sqrt(alpha_bar) - ln sqrt(1 - alpha_bar)`; `+inf` at `t = 0`.
    pub fn half_log_snr(&self, t: usize) -> f64 {
        if t == 0 {
            f64::INFINITY
        } else {
            self.half_log_snr[self.index(t)]
        }
    }

    fn index(&self, t: usize) -> usize {
        assert!(
            (1..=self.len()).contains(&t),
            "timestep {t} outside [1, {}]",
            self.len()
        );
        t - 1
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.len() {
            return Err(Error::param(format!(
                "timestep {t} outside [0, {}]",
                self.len()
            )));
        }
        Ok(())
    }

    /// Standard deviation of the generalised ancestral step from `t` to
    /// `t_prev`: `eta * sqrt(beta_tilde)`.
    pub fn sigma_ancestral(&self, t: usize, t_prev: usize, eta: f64) -> Result<f64> {
        self.check_step(t)?;
        if t <= t_prev {
            return Err(Error::param(format!(
                "ancestral step needs t > t_prev, got {t} -> {t_prev}"
            )));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::param(format!("eta {eta} outside [0, 1]")));
        }
        let ab_t = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t_prev);
        let beta_tilde = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev);
        Ok(eta * beta_tilde.max(0.0).sqrt())
    }

    /// Noise scale of the stochastic multistep step landing on `t_prev`:
    /// `sqrt(1 - alpha_bar(t_prev)) * sqrt(1 - exp(-2 h))` with `h` the
    /// half-log-SNR increment from `t` to `t_prev`.
    pub fn sigma_dpmpp(&self, t: usize, t_prev: usize) -> Result<f64> {
        let h = self.h_step(t_prev, t)?;
        let ab_prev = self.alpha_bar(t_prev);
        if ab_prev >= 1.0 {
            return Ok(0.0);
        }
        Ok((1.0 - ab_prev).sqrt() * (-(-2.0 * h).exp_m1()).max(0.0).sqrt())
    }

    /// `h = lambda(t) - lambda(t_next)` for `t <= t_next` (t is the less noisy
    /// end). Infinite when `t = 0`.
    pub fn h_step(&self, t: usize, t_next: usize) -> Result<f64> {
        self.check_step(t)?;
        self.check_step(t_next)?;
        if t > t_next {
            return Err(Error::param(format!(
                "h_step needs t <= t_next on the diffusion axis, got {t} > {t_next}"
            )));
        }
        if t == t_next {
            return Ok(0.0);
        }
        Ok(self.half_log_snr(t) - self.half_log_snr(t_next))
    }

    /// Content hash of the schedule family and beta sequence.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(b"schedule:");
        hasher.update(self.kind.tag().as_bytes());
        hasher.update((self.beta.len() as u64).to_le_bytes());
        for b in &self.beta {
            hasher.update(b.to_bits().to_le_bytes());
        }
        hasher.finalize().into()
    }
}

/// `ln sqrt(ab) - ln sqrt(1 - ab)`.
pub fn half_log_snr(alpha_bar: f64) -> f64 {
    0.5 * (alpha_bar.ln() - (1.0 - alpha_bar).ln())
}

/// Descending subsequence of `T..=1` executed at inference, with an optional
/// skipped high-noise prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepGrid {
    t_max: usize,
    steps: Vec<usize>,
    skip: f64,
    start_index: usize,
}

impl TimestepGrid {
    /// `n` uniformly spaced steps from `T` down to `1`.
    pub fn uniform(t_max: usize, n: usize, skip: f64) -> Result<Self> {
        if n == 0 || n > t_max {
            return Err(Error::param(format!("grid size {n} outside [1, {t_max}]")));
        }
        let steps = if n == 1 {
            vec![t_max]
        } else {
            let span = (t_max - 1) as f64 / (n - 1) as f64;
            (0..n)
                .map(|i| (t_max as f64 - i as f64 * span).round() as usize)
                .collect()
        };
        Self::from_steps(t_max, steps, skip)
    }

    pub fn from_steps(t_max: usize, steps: Vec<usize>, skip: f64) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::param("empty timestep grid"));
        }
        if steps.iter().any(|&s| s == 0 || s > t_max) {
            return Err(Error::param(format!("grid steps must lie in [1, {t_max}]")));
        }
        if steps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::param(
                "grid steps must be unique and strictly descending",
            ));
        }
        if !(0.0..1.0).contains(&skip) {
            return Err(Error::param(format!("skip fraction {skip} outside [0, 1)")));
        }
        let limit = ((1.0 - skip) * t_max as f64).round() as usize;
        let start_index = steps
            .iter()
            .position(|&s| s <= limit)
            .ok_or_else(|| Error::param(format!("skip {skip} leaves no executable grid step")))?;
        Ok(Self {
            t_max,
            steps,
            skip,
            start_index,
        })
    }

    /// Same steps, different skip.
    pub fn with_skip(&self, skip: f64) -> Result<Self> {
        Self::from_steps(self.t_max, self.steps.clone(), skip)
    }

    /// `T` of the schedule the grid was built for.
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn skip(&self) -> f64 {
        self.skip
    }

    pub fn start_index(&self) -> usize {
        self.start_index
    }

    /// First executed timestep.
    pub fn start_step(&self) -> usize {
        self.steps[self.start_index]
    }

    /// Target of the step leaving grid entry `i` (`0` after the last entry).
    pub fn prev_of(&self, i: usize) -> usize {
        self.steps.get(i + 1).copied().unwrap_or(0)
    }

    /// `(grid index, t, t_prev)` for every executed step.
    pub fn executed(&self) -> Vec<(usize, usize, usize)> {
        (self.start_index..self.steps.len())
            .map(|i| (i, self.steps[i], self.prev_of(i)))
            .collect()
    }

    pub fn executed_len(&self) -> usize {
        self.steps.len() - self.start_index
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_step() -> NoiseSchedule {
        NoiseSchedule::from_betas(ScheduleKind::Linear, vec![0.1, 0.2]).unwrap()
    }

    #[test]
    fn two_step_cumulative_product() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert_eq!(s, two_step());
    }

    #[test]
    fn default_linear_schedule_matches_running_product() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        // independent oracle: product recomputed from betas in log space
        let mut log_acc = 0.0f64;
        for t in 1..=1000 {
            log_acc += (1.0 - s.beta(t)).ln();
            let ab = s.alpha_bar(t);
            assert!((ab - log_acc.exp()).abs() <= 1e-12 * ab.max(1e-300) + 1e-15);
            if t > 1 {
                assert!(ab < s.alpha_bar(t - 1));
                assert!(s.half_log_snr(t) < s.half_log_snr(t - 1));
            }
        }
    }

    #[test]
    fn scaled_linear_endpoints() {
        let s = NoiseSchedule::build(ScheduleKind::ScaledLinear, 1000, 0.00085, 0.012).unwrap();
        assert!((s.beta(1) - 0.00085).abs() < 1e-15);
        assert!((s.beta(1000) - 0.012).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 1, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 10, 0.1, 1.0).is_err());
    }

    #[test]
    fn half_log_snr_zero_at_half() {
        assert_eq!(half_log_snr(0.5), 0.0);
    }

    #[test]
    fn ancestral_sigma_cases() {
        let s = two_step();
        assert_eq!(s.sigma_ancestral(2, 1, 0.0).unwrap(), 0.0);
        let expected = ((1.0 - 0.9) / (1.0 - 0.72) * (1.0 - 0.72 / 0.9f64)).sqrt();
        assert!((s.sigma_ancestral(2, 1, 1.0).unwrap() - expected).abs() < 1e-15);
        assert_eq!(s.sigma_ancestral(1, 0, 1.0).unwrap(), 0.0);
        assert!(s.sigma_ancestral(1, 1, 1.0).is_err());
        assert!(s.sigma_ancestral(2, 1, 1.5).is_err());
    }

    #[test]
    fn ancestral_sigma_is_ddpm_posterior_std() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap();
        for t in 2..=1000 {
            // single-step posterior variance: beta_t (1 - ab_{t-1}) / (1 - ab_t)
            let post = s.beta(t) * (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t));
            let got = s.sigma_ancestral(t, t - 1, 1.0).unwrap();
            assert!((got * got - post).abs() < 1e-12 * post.max(1e-12), "t={t}");
        }
    }

    #[test]
    fn dpmpp_sigma_cases() {
        let s = two_step();
        let lam = |ab: f64| 0.5 * (ab.ln() - (1.0 - ab).ln());
        let h = lam(0.9) - lam(0.72);
        let expected = (1.0 - 0.9f64).sqrt() * (1.0 - (-2.0 * h).exp()).sqrt();
        assert!((s.sigma_dpmpp(2, 1).unwrap() - expected).abs() < 1e-15);
        assert_eq!(s.sigma_dpmpp(1, 0).unwrap(), 0.0);
        assert_eq!(s.sigma_dpmpp(2, 2).unwrap(), 0.0);
    }

    #[test]
    fn h_step_values() {
        let s = two_step();
        assert_eq!(s.h_step(2, 2).unwrap(), 0.0);
        assert!(s.h_step(2, 1).is_err());
        let h = s.h_step(1, 2).unwrap();
        let hand =
            (0.9f64.sqrt().ln() - 0.1f64.sqrt().ln()) - (0.72f64.sqrt().ln() - 0.28f64.sqrt().ln());
        assert!((h - hand).abs() < 1e-14);
        assert!((h - 0.627).abs() < 1e-3);
        assert_eq!(s.h_step(0, 1).unwrap(), f64::INFINITY);
    }

    #[test]
    fn grid_skip_start() {
        let g = TimestepGrid::uniform(50, 50, 0.0).unwrap();
        assert_eq!(g.start_step(), 50);
        assert_eq!(g.steps().last(), Some(&1));
        let g = TimestepGrid::uniform(50, 50, 0.2).unwrap();
        assert_eq!(g.start_step(), 40);
        assert_eq!(g.start_index(), 10);
        assert_eq!(g.executed_len(), 40);
        let ex = g.executed();
        assert_eq!(ex[0], (10, 40, 39));
        assert_eq!(*ex.last().unwrap(), (49, 1, 0));
    }

    #[test]
    fn grid_rejects_invalid() {
        assert!(TimestepGrid::from_steps(10, vec![5, 5], 0.0).is_err());
        assert!(TimestepGrid::from_steps(10, vec![3, 7], 0.0).is_err());
        assert!(TimestepGrid::from_steps(10, vec![11, 3], 0.0).is_err());
        assert!(TimestepGrid::from_steps(10, vec![10, 3], 1.0).is_err());
        assert!(TimestepGrid::uniform(10, 11, 0.0).is_err());
    }

    #[test]
    fn reduced_grid_is_descending_and_ends_at_one() {
        for n in [1usize, 2, 7, 20, 50, 999, 1000] {
            let g = TimestepGrid::uniform(1000, n, 0.0).unwrap();
            assert_eq!(g.steps().len(), n);
            assert_eq!(g.steps()[0], 1000);
            if n > 1 {
                assert_eq!(*g.steps().last().unwrap(), 1);
            }
        }
    }
}
