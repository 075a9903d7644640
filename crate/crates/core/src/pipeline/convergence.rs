//! Strong-error reference for the stochastic solver on Gaussian data.
//!
//! With `tau = ab / (1 - ab)` and `Y = sqrt(ab) x / (1 - ab)`, the reverse SDE
//! for data `N(mu, s^2)` is the linear equation
//! `dY = (mu + s^2 Y) / (1 + s^2 tau) dtau + dB(tau)`, and one solver step
//! with noise `z` adds `sqrt(dtau) z` to `Y`. A single Brownian path sampled on
//! the full schedule therefore drives every coarse grid consistently, and
//! the exact solution along that path is available in closed form.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::field::{Field, Shape};
use crate::rng;
use crate::sampler::{NoiseSource, StepNoise};
use crate::schedule::NoiseSchedule;

fn tau(schedule: &NoiseSchedule, t: usize) -> f64 {
    let ab = schedule.alpha_bar(t);
    ab / (1.0 - ab)
}

/// Brownian increments and weighted integrals on every unit interval
/// `[t, t - 1]`, `t = T..2`, for each element of a field.
#[derive(Debug, Clone)]
pub struct BrownianPath {
    shape: Shape,
    /// `tau` at `t = 1..=T`, index `t - 1`.
    taus: Vec<f64>,
    /// Increment of `B` over `[t, t - 1]`, row `t - 2`.
    db: Vec<Vec<f64>>,
    /// Integral of `dB / (1 + s^2 tau)` over the same interval.
    weighted: Vec<Vec<f64>>,
    s: f64,
}

impl BrownianPath {
    pub fn sample(schedule: &NoiseSchedule, s: f64, shape: Shape, seed: u64) -> Result<Self> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::param("data scale must be positive"));
        }
        let t_max = schedule.len();
        let taus: Vec<f64> = (1..=t_max).map(|t| tau(schedule, t)).collect();
        let n = shape.0 * shape.1 * shape.2;
        let s2 = s * s;
        let mut db = Vec::with_capacity(t_max - 1);
        let mut weighted = Vec::with_capacity(t_max - 1);
        for t in 2..=t_max {
            // the interval runs from tau(t) (noisier) up to tau(t - 1)
            let (a, b) = (taus[t - 1], taus[t - 2]);
            let d = b - a;
            let (va, vb) = (1.0 + s2 * a, 1.0 + s2 * b);
            let var_j = (1.0 / va - 1.0 / vb) / s2;
            let cov = (vb / va).ln() / s2;
            let resid = (var_j - cov * cov / d).max(0.0).sqrt();
            let mut r = rng::stream(seed, rng::purpose::SAMPLING + t as u64);
            let mut row_b = Vec::with_capacity(n);
            let mut row_j = Vec::with_capacity(n);
            for _ in 0..n {
                let g1: f64 = StandardNormal.sample(&mut r);
                let g2: f64 = StandardNormal.sample(&mut r);
                row_b.push(d.sqrt() * g1);
                row_j.push(cov / d.sqrt() * g1 + resid * g2);
            }
            db.push(row_b);
            weighted.push(row_j);
        }
        Ok(Self {
            shape,
            taus,
            db,
            weighted,
            s,
        })
    }

    fn check(&self, t: usize, t_prev: usize) -> Result<()> {
        if t_prev == 0 || t <= t_prev || t > self.taus.len() {
            return Err(Error::param(format!(
                "no Brownian interval from t={t} to t={t_prev}"
            )));
        }
        Ok(())
    }

    /// Sum of the unit increments between `t` and `t_prev`.
    fn increment(&self, t: usize, t_prev: usize) -> Result<Vec<f64>> {
        self.check(t, t_prev)?;
        let mut acc = vec![0.0; self.db[0].len()];
        for u in (t_prev + 1)..=t {
            acc.iter_mut()
                .zip(&self.db[u - 2])
                .for_each(|(a, v)| *a += v);
        }
        Ok(acc)
    }

    /// Exact state at `t = 1` started from `x_start` at `t_start`, followed by
    /// the solver's final noiseless step to `t = 0`.
    pub fn exact_endpoint(
        &self,
        schedule: &NoiseSchedule,
        mu: &Field,
        x_start: &Field,
        t_start: usize,
    ) -> Result<Field> {
        mu.ensure_same_shape(x_start)?;
        if x_start.shape() != self.shape {
            return Err(Error::Shape {
                expected: self.shape,
                got: x_start.shape(),
            });
        }
        let s2 = self.s * self.s;
        let ab = schedule.alpha_bar(t_start);
        let tau_s = self.taus[t_start - 1];
        let tau_1 = self.taus[0];
        let (vs, v1) = (1.0 + s2 * tau_s, 1.0 + s2 * tau_1);
        let mut integral = vec![0.0; x_start.len()];
        for u in 2..=t_start {
            integral
                .iter_mut()
                .zip(&self.weighted[u - 2])
                .for_each(|(a, v)| *a += v);
        }
        let data = x_start
            .data()
            .iter()
            .zip(mu.data())
            .zip(&integral)
            .map(|((&x, &m), &i)| {
                let (x, m) = (x as f64, m as f64);
                let y_s = ab.sqrt() * x / (1.0 - ab);
                let y_1 = v1 * (y_s / vs + m / s2 * (1.0 / vs - 1.0 / v1) + i);
                ((m + s2 * y_1) / v1) as f32
            })
            .collect();
        Field::new(self.shape, data)
    }

    pub fn noise(&self) -> BrownianNoise<'_> {
        BrownianNoise { path: self }
    }
}

/// Solver noise read off a [`BrownianPath`].
pub struct BrownianNoise<'a> {
    path: &'a BrownianPath,
}

impl NoiseSource for BrownianNoise<'_> {
    fn next(&mut self, _k: usize, t: usize, t_prev: usize, shape: Shape) -> Result<StepNoise> {
        if shape != self.path.shape {
            return Err(Error::Shape {
                expected: self.path.shape,
                got: shape,
            });
        }
        if t_prev == 0 {
            return Ok(StepNoise {
                z: Field::zeros(shape),
                offset: None,
            });
        }
        let inc = self.path.increment(t, t_prev)?;
        let d = self.path.taus[t_prev - 1] - self.path.taus[t - 1];
        let z = inc.iter().map(|v| (v / d.sqrt()) as f32).collect();
        Ok(StepNoise {
            z: Field::new(shape, z)?,
            offset: None,
        })
    }
}
