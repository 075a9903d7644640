//! Reverse-diffusion steppers and the generation loop.
//!
//! Two step families are provided: the generalised ancestral step (DDIM at
//! `eta = 0`, DDPM at `eta = 1`) and the second-order multistep stochastic
//! DPM-Solver++ step. The multistep solver works on data predictions
//! `x0 = (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)` and reuses the previous
//! step's prediction, so it needs one model evaluation per step.

use crate::error::{Error, Result};
use crate::field::{Field, Shape};
use crate::rng;
use crate::schedule::{NoiseSchedule, TimestepGrid};

/// Data prediction implied by a noise estimate at timestep `t >= 1`.
pub fn data_prediction(
    schedule: &NoiseSchedule,
    x_t: &Field,
    eps: &Field,
    t: usize,
) -> Result<Field> {
    let ab = schedule.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(eps, |x, e| ((x as f64 - s * e as f64) / a) as f32)
}

/// Generalised ancestral step `x_{t_prev} = mu(x_t) + sigma z`.
pub fn step_ancestral(
    schedule: &NoiseSchedule,
    x_t: &Field,
    eps: &Field,
    t: usize,
    t_prev: usize,
    eta: f64,
    z: &Field,
) -> Result<Field> {
    x_t.ensure_same_shape(eps)?;
    x_t.ensure_same_shape(z)?;
    let sigma = schedule.sigma_ancestral(t, t_prev, eta)?;
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let dir2 = 1.0 - ab_prev - sigma * sigma;
    if dir2 < -1e-12 {
        return Err(Error::Internal(format!(
            "sigma^2 = {} exceeds 1 - alpha_bar(t_prev) = {}",
            sigma * sigma,
            1.0 - ab_prev
        )));
    }
    let dir = dir2.max(0.0).sqrt();
    let (a, s, a_prev) = (ab.sqrt(), (1.0 - ab).sqrt(), ab_prev.sqrt());
    let mut data: Vec<f32> = x_t
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| {
            let e = e as f64;
            let x0 = (x as f64 - s * e) / a;
            (a_prev * x0 + dir * e) as f32
        })
        .collect();
    if sigma > 0.0 {
        data.iter_mut()
            .zip(z.data())
            .for_each(|(v, &zi)| *v = (*v as f64 + sigma * zi as f64) as f32);
    }
    Field::new(x_t.shape(), data)
}

/// The previous step's data prediction, reused by the multistep solver.
#[derive(Debug, Clone, PartialEq)]
pub struct PrevEstimate {
    pub t: usize,
    pub x0: Field,
}

/// Scalar coefficients of one multistep step `t -> t_prev`:
/// `mu = x_coef x_t + d_coef D_t + corr_coef (D_t - D_{t_next})`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpmppCoeffs {
    pub x_coef: f64,
    pub d_coef: f64,
    pub corr_coef: f64,
    pub sigma: f64,
}

/// Coefficients for the step from `t` to `t_prev`, with `t_next` the grid
/// entry executed before `t` (if any). The correction term is dropped on the
/// first executed step and on the final step into `t = 0`, whose step size
/// is infinite.
pub fn dpmpp_coeffs(
    schedule: &NoiseSchedule,
    t: usize,
    t_prev: usize,
    t_next: Option<usize>,
) -> Result<DpmppCoeffs> {
    if t_prev >= t {
        return Err(Error::param(format!(
            "multistep step needs t > t_prev, got {t} -> {t_prev}"
        )));
    }
    let h = schedule.h_step(t_prev, t)?;
    if h <= 0.0 {
        return Err(Error::DegenerateGrid { t, t_prev });
    }
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let (s, a_prev, s_prev) = ((1.0 - ab).sqrt(), ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    // 1 - exp(-2h), exact at h = inf
    let one_minus = -(-2.0 * h).exp_m1();
    let x_coef = if s_prev == 0.0 {
        0.0
    } else {
        s_prev / s * (-h).exp()
    };
    let d_coef = a_prev * one_minus;
    let sigma = schedule.sigma_dpmpp(t, t_prev)?;
    let corr_coef = match t_next {
        Some(tn) if t_prev > 0 => {
            let h_last = schedule.h_step(t, tn)?;
            if h_last <= 0.0 {
                return Err(Error::DegenerateGrid { t: tn, t_prev: t });
            }
            0.5 * d_coef * (h / h_last)
        }
        _ => 0.0,
    };
    Ok(DpmppCoeffs {
        x_coef,
        d_coef,
        corr_coef,
        sigma,
    })
}

/// Deterministic part `mu` of the multistep step and its noise scale.
pub fn dpmpp_mean(
    schedule: &NoiseSchedule,
    x_t: &Field,
    eps_t: &Field,
    prev: Option<&PrevEstimate>,
    t: usize,
    t_prev: usize,
) -> Result<(Field, f64, Field)> {
    x_t.ensure_same_shape(eps_t)?;
    let c = dpmpp_coeffs(schedule, t, t_prev, prev.map(|p| p.t))?;
    let d = data_prediction(schedule, x_t, eps_t, t)?;
    let mut mu: Vec<f32> = x_t
        .data()
        .iter()
        .zip(d.data())
        .map(|(&x, &di)| (c.x_coef * x as f64 + c.d_coef * di as f64) as f32)
        .collect();
    if let (Some(p), true) = (prev, c.corr_coef != 0.0) {
        x_t.ensure_same_shape(&p.x0)?;
        for ((m, &di), &dl) in mu.iter_mut().zip(d.data()).zip(p.x0.data()) {
            let diff = di as f64 - dl as f64;
            if diff != 0.0 {
                *m = (*m as f64 + c.corr_coef * diff) as f32;
            }
        }
    }
    Ok((Field::new(x_t.shape(), mu)?, c.sigma, d))
}

/// `mu + sigma z` for the value returned by [`dpmpp_mean`].
pub fn add_noise(mu: &Field, sigma: f64, z: &Field) -> Result<Field> {
    mu.ensure_same_shape(z)?;
    if sigma == 0.0 {
        return Ok(mu.clone());
    }
    mu.zip_map(z, |m, zi| (m as f64 + sigma * zi as f64) as f32)
}

/// One second-order multistep SDE step. Returns the new state and the data
/// prediction to carry into the next step.
pub fn step_dpmpp_2m_sde(
    schedule: &NoiseSchedule,
    x_t: &Field,
    eps_t: &Field,
    prev: Option<&PrevEstimate>,
    t: usize,
    t_prev: usize,
    z: &Field,
) -> Result<(Field, PrevEstimate)> {
    let (mu, sigma, d) = dpmpp_mean(schedule, x_t, eps_t, prev, t, t_prev)?;
    Ok((add_noise(&mu, sigma, z)?, PrevEstimate { t, x0: d }))
}

/// Per-step noise for the generation loop.
#[derive(Debug, Clone)]
pub struct StepNoise {
    pub z: Field,
    /// Additive residual for steps whose noise scale is zero.
    pub offset: Option<Field>,
}

/// Bitwise comparison.
impl PartialEq for StepNoise {
    fn eq(&self, other: &Self) -> bool {
        self.z.bit_eq(&other.z)
            && match (&self.offset, &other.offset) {
                (None, None) => true,
                (Some(a), Some(b)) => a.bit_eq(b),
                _ => false,
            }
    }
}

pub trait NoiseSource {
    /// Noise for the `k`-th executed step (`t -> t_prev`).
    fn next(&mut self, k: usize, t: usize, t_prev: usize, shape: Shape) -> Result<StepNoise>;
}

/// Fresh standard normals keyed by `(seed, t)`.
#[derive(Debug, Clone, Copy)]
pub struct RngNoise {
    pub seed: u64,
}

impl NoiseSource for RngNoise {
    fn next(&mut self, _k: usize, t: usize, _t_prev: usize, shape: Shape) -> Result<StepNoise> {
        Ok(StepNoise {
            z: rng::normal_field(self.seed, rng::purpose::SAMPLING + t as u64, shape),
            offset: None,
        })
    }
}

/// All-zero noise: the drift-only trajectory of the SDE solver.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn next(&mut self, _k: usize, _t: usize, _t_prev: usize, shape: Shape) -> Result<StepNoise> {
        Ok(StepNoise {
            z: Field::zeros(shape),
            offset: None,
        })
    }
}

/// Replays a stored noise sequence.
pub struct StoredNoise<'a> {
    steps: &'a [StepNoise],
}

impl<'a> StoredNoise<'a> {
    pub fn new(steps: &'a [StepNoise]) -> Self {
        Self { steps }
    }
}

impl NoiseSource for StoredNoise<'_> {
    fn next(&mut self, k: usize, _t: usize, _t_prev: usize, shape: Shape) -> Result<StepNoise> {
        let s = self.steps.get(k).ok_or(Error::NoiseExhausted(k))?;
        if s.z.shape() != shape {
            return Err(Error::Shape {
                expected: shape,
                got: s.z.shape(),
            });
        }
        Ok(s.clone())
    }
}

/// Multistep solver state between steps.
#[derive(Debug, Clone)]
pub struct SolverState {
    pub x: Field,
    pub prev: Option<PrevEstimate>,
    pub step_index: usize,
}

/// Runs the multistep SDE solver over the executed part of `grid`, starting
/// from `x_start` at `grid.start_step()`. `eps_fn(x, t)` supplies the (possibly
/// guided) noise estimate at each step.
pub fn generate<F>(
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    x_start: Field,
    mut eps_fn: F,
    noise: &mut dyn NoiseSource,
) -> Result<Field>
where
    F: FnMut(&Field, usize) -> Result<Field>,
{
    check_grid(schedule, grid)?;
    let mut state = SolverState {
        x: x_start,
        prev: None,
        step_index: grid.start_index(),
    };
    for (k, (i, t, t_prev)) in grid.executed().into_iter().enumerate() {
        let eps = eps_fn(&state.x, t)?;
        let n = noise.next(k, t, t_prev, state.x.shape())?;
        let (mut x, prev) = step_dpmpp_2m_sde(
            schedule,
            &state.x,
            &eps,
            state.prev.as_ref(),
            t,
            t_prev,
            &n.z,
        )?;
        if let Some(off) = &n.offset {
            x = x.add(off)?;
        }
        state = SolverState {
            x,
            prev: Some(prev),
            step_index: i + 1,
        };
    }
    Ok(state.x)
}

/// Ancestral sampling over the executed part of `grid`.
pub fn generate_ancestral<F>(
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    x_start: Field,
    eta: f64,
    mut eps_fn: F,
    noise: &mut dyn NoiseSource,
) -> Result<Field>
where
    F: FnMut(&Field, usize) -> Result<Field>,
{
    check_grid(schedule, grid)?;
    let mut x = x_start;
    for (k, (_, t, t_prev)) in grid.executed().into_iter().enumerate() {
        let eps = eps_fn(&x, t)?;
        let n = noise.next(k, t, t_prev, x.shape())?;
        x = step_ancestral(schedule, &x, &eps, t, t_prev, eta, &n.z)?;
    }
    Ok(x)
}

pub(crate) fn check_grid(schedule: &NoiseSchedule, grid: &TimestepGrid) -> Result<()> {
    if grid.t_max() != schedule.len() {
        return Err(Error::param(format!(
            "grid built for T={} used with a T={} schedule",
            grid.t_max(),
            schedule.len()
        )));
    }
    Ok(())
}
