//! Isotropic Gaussian-mixture data model with an exact noise predictor.
//!
//! Under the forward process `x_t | k ~ N(sqrt(ab) mu_k, (ab s_k^2 + 1 - ab) I)`,
//! so the posterior mean `E[x0 | x_t]` and hence
//! `eps = (x_t - sqrt(ab) E[x0 | x_t]) / sqrt(1 - ab)` are available in
//! closed form. Conditioning restricts the mixture to a component subset.

use sha2::{Digest, Sha256};

use super::{Conditioning, Denoiser, DenoiserOutput};
use crate::error::{Error, Result};
use crate::field::{Field, Shape};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmComponent {
    pub mean: Field,
    pub scale: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmSpec {
    components: Vec<GmmComponent>,
}

impl GmmSpec {
    /// Validates and normalises the weights.
    pub fn new(mut components: Vec<GmmComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::param("mixture needs at least one component"))?;
        let shape = first.mean.shape();
        for (i, c) in components.iter().enumerate() {
            if c.mean.shape() != shape {
                return Err(Error::Shape {
                    expected: shape,
                    got: c.mean.shape(),
                });
            }
            if !(c.scale > 0.0 && c.scale.is_finite()) {
                return Err(Error::param(format!("component {i}: scale must be > 0")));
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::param(format!("component {i}: weight must be > 0")));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        for c in &mut components {
            c.weight /= total;
        }
        Ok(Self { components })
    }

    pub fn single(mean: Field, scale: f64) -> Result<Self> {
        Self::new(vec![GmmComponent {
            mean,
            scale,
            weight: 1.0,
        }])
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    pub fn shape(&self) -> Shape {
        self.components[0].mean.shape()
    }
}

/// Exact noise predictor for a [`GmmSpec`] under a fixed schedule.
#[derive(Debug, Clone)]
pub struct AnalyticGmm {
    spec: GmmSpec,
    schedule: NoiseSchedule,
    fingerprint: [u8; 32],
}

impl AnalyticGmm {
    pub fn new(spec: GmmSpec, schedule: NoiseSchedule) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"gmm:");
        hasher.update(schedule.fingerprint());
        for c in spec.components() {
            let (ch, h, w) = c.mean.shape();
            for d in [ch, h, w] {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in c.mean.data() {
                hasher.update(v.to_le_bytes());
            }
            hasher.update(c.scale.to_le_bytes());
            hasher.update(c.weight.to_le_bytes());
        }
        let fingerprint = hasher.finalize().into();
        Self {
            spec,
            schedule,
            fingerprint,
        }
    }

    pub fn spec(&self) -> &GmmSpec {
        &self.spec
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn active(&self, cond: Option<&Conditioning>) -> Result<Vec<usize>> {
        let n = self.spec.components.len();
        match cond {
            None => Ok((0..n).collect()),
            Some(c) => {
                if c.components.is_empty() {
                    return Err(Error::param(format!(
                        "conditioning '{}' selects no mixture components",
                        c.label
                    )));
                }
                if let Some(&k) = c.components.iter().find(|&&k| k >= n) {
                    return Err(Error::param(format!(
                        "component {k} out of range for a {n}-component mixture"
                    )));
                }
                Ok(c.components.clone())
            }
        }
    }

    /// Posterior responsibilities of the `active` components given `x_t`.
    pub fn responsibilities(&self, x: &Field, t: usize, active: &[usize]) -> Vec<f64> {
        let ab = self.schedule.alpha_bar(t);
        let a = ab.sqrt();
        let dim = x.len() as f64;
        let logp: Vec<f64> = active
            .iter()
            .map(|&k| {
                let c = &self.spec.components[k];
                let var = ab * c.scale * c.scale + (1.0 - ab);
                let sq: f64 = x
                    .data()
                    .iter()
                    .zip(c.mean.data())
                    .map(|(&xi, &mi)| {
                        let d = xi as f64 - a * mi as f64;
                        d * d
                    })
                    .sum();
                c.weight.ln() - 0.5 * dim * var.ln() - 0.5 * sq / var
            })
            .collect();
        let max = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logp.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|v| v / z).collect()
    }

    /// `E[x0 | x_t]` restricted to the conditioning's components, in f64.
    pub fn posterior_mean(
        &self,
        x: &Field,
        t: usize,
        cond: Option<&Conditioning>,
    ) -> Result<Vec<f64>> {
        if x.shape() != self.spec.shape() {
            return Err(Error::Shape {
                expected: self.spec.shape(),
                got: x.shape(),
            });
        }
        if t == 0 || t > self.schedule.len() {
            return Err(Error::param(format!(
                "timestep {t} outside [1, {}]",
                self.schedule.len()
            )));
        }
        let active = self.active(cond)?;
        let resp = self.responsibilities(x, t, &active);
        let ab = self.schedule.alpha_bar(t);
        let a = ab.sqrt();
        let mut mean = vec![0.0f64; x.len()];
        for (&k, &r) in active.iter().zip(&resp) {
            if r == 0.0 {
                continue;
            }
            let c = &self.spec.components[k];
            let s2 = c.scale * c.scale;
            let gain = a * s2 / (ab * s2 + 1.0 - ab);
            for ((m, &xi), &mi) in mean.iter_mut().zip(x.data()).zip(c.mean.data()) {
                let mi = mi as f64;
                *m += r * (mi + gain * (xi as f64 - a * mi));
            }
        }
        Ok(mean)
    }
}

impl Denoiser for AnalyticGmm {
    fn eps(&self, x: &Field, t: usize, cond: Option<&Conditioning>) -> Result<DenoiserOutput> {
        let mean = self.posterior_mean(x, t, cond)?;
        let ab = self.schedule.alpha_bar(t);
        let a = ab.sqrt();
        let s = (1.0 - ab).sqrt();
        let data = x
            .data()
            .iter()
            .zip(&mean)
            .map(|(&xi, &m)| ((xi as f64 - a * m) / s) as f32)
            .collect();
        Ok(DenoiserOutput {
            eps: Field::new(x.shape(), data)?,
            attn: None,
        })
    }

    fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleKind;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::build(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap()
    }

    fn probe(shape: Shape) -> Field {
        Field::from_fn(shape, |c, y, x| {
            ((c * 7 + y * 3 + x) as f32 * 0.37).sin() * 1.5
        })
    }

    #[test]
    fn standard_normal_data_gives_scaled_identity() {
        let shape = (1, 3, 3);
        let m = AnalyticGmm::new(
            GmmSpec::single(Field::zeros(shape), 1.0).unwrap(),
            schedule(),
        );
        let x = probe(shape);
        for t in [1, 10, 500, 1000] {
            let eps = m.eps(&x, t, None).unwrap().eps;
            let k = (1.0 - m.schedule().alpha_bar(t)).sqrt();
            for (e, xi) in eps.data().iter().zip(x.data()) {
                assert!((*e as f64 - k * *xi as f64).abs() < 1e-5, "t={t}");
            }
        }
    }

    #[test]
    fn point_mass_recovers_injected_noise() {
        let shape = (2, 2, 2);
        let mu = probe(shape);
        let m = AnalyticGmm::new(GmmSpec::single(mu.clone(), 1e-9).unwrap(), schedule());
        let noise = Field::from_fn(shape, |c, y, x| ((c + 2 * y + 3 * x) as f32 * 1.1).cos());
        for t in [1, 50, 999] {
            let ab = m.schedule().alpha_bar(t);
            let xt = mu
                .scale(ab.sqrt() as f32)
                .add(&noise.scale((1.0 - ab).sqrt() as f32))
                .unwrap();
            let eps = m.eps(&xt, t, None).unwrap().eps;
            assert!(crate::field::rmse(&eps, &noise).unwrap() < 1e-3, "t={t}");
        }
    }

    #[test]
    fn separated_components_give_vanishing_direction() {
        let shape = (1, 4, 4);
        let s = 0.05;
        let mu0 = Field::zeros(shape);
        // 20 sigma apart along every coordinate
        let mu1 = Field::filled(shape, (20.0 * s) as f32);
        let spec = GmmSpec::new(vec![
            GmmComponent {
                mean: mu0.clone(),
                scale: s,
                weight: 0.5,
            },
            GmmComponent {
                mean: mu1,
                scale: s,
                weight: 0.5,
            },
        ])
        .unwrap();
        let sched = schedule();
        let m = AnalyticGmm::new(spec, sched.clone());
        let t = 50;
        let x = mu0.scale(sched.alpha_bar(t).sqrt() as f32);
        let resp = m.responsibilities(&x, t, &[0, 1]);
        assert!(resp[1] < 1e-12);
        let cond = Conditioning::new("near", vec![1], vec![0]).unwrap();
        let c = m.eps(&x, t, Some(&cond)).unwrap().eps;
        let u = m.eps(&x, t, None).unwrap().eps;
        assert!(c.sub(&u).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn full_subset_equals_unconditional() {
        let shape = (1, 2, 3);
        let spec = GmmSpec::new(vec![
            GmmComponent {
                mean: Field::filled(shape, -1.0),
                scale: 0.3,
                weight: 1.0,
            },
            GmmComponent {
                mean: Field::filled(shape, 1.0),
                scale: 0.5,
                weight: 3.0,
            },
        ])
        .unwrap();
        let m = AnalyticGmm::new(spec, schedule());
        let cond = Conditioning::new("all", vec![1], vec![0, 1]).unwrap();
        let x = probe(shape);
        let c = m.eps(&x, 300, Some(&cond)).unwrap().eps;
        let u = m.eps(&x, 300, None).unwrap().eps;
        assert!(c.bit_eq(&u));
    }

    #[test]
    fn rejects_bad_conditioning_and_spec() {
        let shape = (1, 2, 2);
        let m = AnalyticGmm::new(
            GmmSpec::single(Field::zeros(shape), 1.0).unwrap(),
            schedule(),
        );
        let x = Field::zeros(shape);
        let empty = Conditioning {
            label: "e".into(),
            tokens: vec![1],
            components: vec![],
        };
        assert!(m.eps(&x, 10, Some(&empty)).is_err());
        let oob = Conditioning {
            label: "o".into(),
            tokens: vec![1],
            components: vec![3],
        };
        assert!(m.eps(&x, 10, Some(&oob)).is_err());
        assert!(m.eps(&Field::zeros((1, 3, 3)), 10, None).is_err());
        assert!(GmmSpec::single(Field::zeros(shape), 0.0).is_err());
    }

    #[test]
    fn weights_are_normalised() {
        let shape = (1, 1, 1);
        let spec = GmmSpec::new(vec![
            GmmComponent {
                mean: Field::zeros(shape),
                scale: 1.0,
                weight: 2.0,
            },
            GmmComponent {
                mean: Field::zeros(shape),
                scale: 1.0,
                weight: 6.0,
            },
        ])
        .unwrap();
        let w: Vec<f64> = spec.components().iter().map(|c| c.weight).collect();
        assert_eq!(w, vec![0.25, 0.75]);
    }
}
