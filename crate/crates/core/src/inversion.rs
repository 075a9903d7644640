//! Edit-friendly inversion.
//!
//! The input `x0` is noised independently at every grid step
//! (`x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps_t` with fresh `eps_t` per `t`),
//! then the multistep solver is run along that sequence and the noise map
//! `z_t = (x_{t_prev} - mu_t) / sigma_t` that lands exactly on the next
//! element is recorded. Replaying the maps with unguided estimates
//! reproduces `x0`.
//!
//! Steps whose noise scale is zero (the last step into `t = 0`) store `z = 0`
//! and carry the residual `x_{t_prev} - mu_t` as an additive offset.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::field::{Field, Shape};
use crate::model::{Conditioning, Denoiser};
use crate::rng;
use crate::sampler::{
    self, add_noise, dpmpp_mean, NoiseSource, PrevEstimate, StepNoise, StoredNoise,
};
use crate::schedule::{NoiseSchedule, TimestepGrid};

const MAGIC: &[u8; 4] = b"LPL1";

/// Inversion result: the auxiliary sequence, per-step noise maps and the
/// provenance needed to decide whether a cache may be reused.
#[derive(Debug, Clone, PartialEq)]
pub struct EditFriendlyLatents {
    pub x0: Field,
    /// One state per grid entry, aligned with `grid.steps()`.
    pub x_seq: Vec<Field>,
    /// One entry per executed step.
    pub noise: Vec<StepNoise>,
    pub seed: u64,
    pub schedule_fingerprint: [u8; 32],
    pub model_fingerprint: [u8; 32],
    pub grid: TimestepGrid,
    /// Conditioning used for the base estimate, if not unconditional.
    pub source: Option<Conditioning>,
}

/// `x_t` for every grid step, each with an independent noise draw keyed by
/// `(seed, t)`.
pub fn build_reconstruction_sequence(
    x0: &Field,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    seed: u64,
) -> Result<Vec<Field>> {
    sampler::check_grid(schedule, grid)?;
    if !x0.is_finite() {
        return Err(Error::param("input field has non-finite values"));
    }
    grid.steps()
        .par_iter()
        .map(|&t| {
            let eps = rng::normal_field(seed, rng::purpose::RECONSTRUCTION + t as u64, x0.shape());
            let ab = schedule.alpha_bar(t);
            let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
            x0.zip_map(&eps, |x, e| (a * x as f64 + s * e as f64) as f32)
        })
        .collect()
}

/// Noise maps that make the multistep solver follow `x_seq` and end on `x0`,
/// for the executed part of `grid`. One model evaluation per executed step.
pub fn extract_noise_maps<D: Denoiser + ?Sized>(
    x0: &Field,
    x_seq: &[Field],
    model: &D,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    source: Option<&Conditioning>,
) -> Result<Vec<StepNoise>> {
    if x_seq.len() != grid.steps().len() {
        return Err(Error::param(format!(
            "sequence has {} states for a {}-step grid",
            x_seq.len(),
            grid.steps().len()
        )));
    }
    let mut x = x_seq[grid.start_index()].clone();
    let mut prev: Option<PrevEstimate> = None;
    let mut out = Vec::with_capacity(grid.executed_len());
    for (i, t, t_prev) in grid.executed() {
        let eps = model.eps(&x, t, source)?.eps;
        let (mu, sigma, d) = dpmpp_mean(schedule, &x, &eps, prev.as_ref(), t, t_prev)?;
        let target = if t_prev == 0 { x0 } else { &x_seq[i + 1] };
        let step = if sigma > 0.0 {
            let z = target.zip_map(&mu, |a, m| ((a as f64 - m as f64) / sigma) as f32)?;
            StepNoise { z, offset: None }
        } else {
            StepNoise {
                z: Field::zeros(x.shape()),
                offset: Some(target.sub(&mu)?),
            }
        };
        // follow the state the generator will actually reach
        x = add_noise(&mu, sigma, &step.z)?;
        if let Some(off) = &step.offset {
            x = x.add(off)?;
        }
        prev = Some(PrevEstimate { t, x0: d });
        out.push(step);
    }
    Ok(out)
}

/// Full inversion of `x0` over `grid`.
pub fn invert<D: Denoiser + ?Sized>(
    x0: &Field,
    model: &D,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    seed: u64,
    source: Option<Conditioning>,
) -> Result<EditFriendlyLatents> {
    let x_seq = build_reconstruction_sequence(x0, schedule, grid, seed)?;
    let noise = extract_noise_maps(x0, &x_seq, model, schedule, grid, source.as_ref())?;
    Ok(EditFriendlyLatents {
        x0: x0.clone(),
        x_seq,
        noise,
        seed,
        schedule_fingerprint: schedule.fingerprint(),
        model_fingerprint: model.fingerprint(),
        grid: grid.clone(),
        source,
    })
}

impl EditFriendlyLatents {
    pub fn shape(&self) -> Shape {
        self.x0.shape()
    }

    /// State at the first executed step.
    pub fn start_state(&self) -> &Field {
        &self.x_seq[self.grid.start_index()]
    }

    pub fn noise_source(&self) -> StoredNoise<'_> {
        StoredNoise::new(&self.noise)
    }

    /// Rejects use with a different schedule or model.
    pub fn check_fingerprints(&self, schedule: &[u8; 32], model: &[u8; 32]) -> Result<()> {
        if &self.schedule_fingerprint != schedule {
            return Err(Error::StaleCache(format!(
                "schedule fingerprint {} does not match {}",
                hex(&self.schedule_fingerprint),
                hex(schedule)
            )));
        }
        if &self.model_fingerprint != model {
            return Err(Error::StaleCache(format!(
                "model fingerprint {} does not match {}",
                hex(&self.model_fingerprint),
                hex(model)
            )));
        }
        Ok(())
    }

    /// Replays the stored noise with unguided estimates.
    pub fn reconstruct<D: Denoiser + ?Sized>(
        &self,
        model: &D,
        schedule: &NoiseSchedule,
    ) -> Result<Field> {
        self.check_fingerprints(&schedule.fingerprint(), &model.fingerprint())?;
        let mut noise = self.noise_source();
        sampler::generate(
            schedule,
            &self.grid,
            self.start_state().clone(),
            |x, t| Ok(model.eps(x, t, self.source.as_ref())?.eps),
            &mut noise as &mut dyn NoiseSource,
        )
    }

    /// Mean of `|z|^2 / N` over stochastic steps.
    pub fn mean_z_energy(&self) -> f64 {
        let stochastic: Vec<&StepNoise> =
            self.noise.iter().filter(|s| s.offset.is_none()).collect();
        if stochastic.is_empty() {
            return 0.0;
        }
        stochastic
            .iter()
            .map(|s| s.z.sum_sq() / s.z.len() as f64)
            .sum::<f64>()
            / stochastic.len() as f64
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.bytes(&self.schedule_fingerprint);
        w.bytes(&self.model_fingerprint);
        w.u32(binio::to_u32(self.grid.t_max(), "T")?);
        w.u32(binio::to_u32(self.grid.steps().len(), "grid length")?);
        for &s in self.grid.steps() {
            w.u32(binio::to_u32(s, "grid step")?);
        }
        w.u64(self.grid.skip().to_bits());
        w.u32(binio::to_u32(self.grid.start_index(), "start index")?);
        w.u64(self.seed);
        match &self.source {
            None => w.u8(0),
            Some(c) => {
                w.u8(1);
                w.u32(binio::to_u32(c.label.len(), "label length")?);
                w.bytes(c.label.as_bytes());
                w.u32(binio::to_u32(c.tokens.len(), "token count")?);
                c.tokens.iter().for_each(|&t| w.u32(t));
                w.u32(binio::to_u32(c.components.len(), "component count")?);
                for &k in &c.components {
                    w.u32(binio::to_u32(k, "component")?);
                }
            }
        }
        let (c, h, wd) = self.shape();
        for d in [c, h, wd] {
            w.u32(binio::to_u32(d, "dimension")?);
        }
        w.f32s(self.x0.data());
        for x in &self.x_seq {
            w.f32s(x.data());
        }
        w.u32(binio::to_u32(self.noise.len(), "noise count")?);
        for s in &self.noise {
            w.f32s(s.z.data());
            match &s.offset {
                None => w.u8(0),
                Some(off) => {
                    w.u8(1);
                    w.f32s(off.data());
                }
            }
        }
        Ok(w.buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "LPL1");
        r.magic(MAGIC)?;
        let schedule_fingerprint = r.array32()?;
        let model_fingerprint = r.array32()?;
        let t_max = r.u32()? as usize;
        let n = r.u32()? as usize;
        if n.saturating_mul(4) > r.remaining() {
            return Err(Error::format("LPL1: grid length exceeds file size"));
        }
        let steps = (0..n)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let skip = f64::from_bits(r.u64()?);
        let start_index = r.u32()? as usize;
        let grid = TimestepGrid::from_steps(t_max, steps, skip)
            .map_err(|e| Error::format(format!("LPL1: invalid grid: {e}")))?;
        if grid.start_index() != start_index {
            return Err(Error::format("LPL1: start index inconsistent with skip"));
        }
        let seed = r.u64()?;
        let source = match r.u8()? {
            0 => None,
            1 => {
                let len = r.u32()? as usize;
                let label = String::from_utf8(r.bytes(len)?.to_vec())
                    .map_err(|_| Error::format("LPL1: label is not UTF-8"))?;
                let nt = r.u32()? as usize;
                if nt.saturating_mul(4) > r.remaining() {
                    return Err(Error::format("LPL1: token count exceeds file size"));
                }
                let tokens = (0..nt).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                let nc = r.u32()? as usize;
                if nc.saturating_mul(4) > r.remaining() {
                    return Err(Error::format("LPL1: component count exceeds file size"));
                }
                let components = (0..nc)
                    .map(|_| r.u32().map(|v| v as usize))
                    .collect::<Result<Vec<_>>>()?;
                Some(Conditioning {
                    label,
                    tokens,
                    components,
                })
            }
            f => return Err(Error::format(format!("LPL1: bad source flag {f}"))),
        };
        let shape = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let len = shape
            .0
            .checked_mul(shape.1)
            .and_then(|v| v.checked_mul(shape.2))
            .ok_or_else(|| Error::format("LPL1: field dims overflow"))?;
        let field = |r: &mut Reader| -> Result<Field> {
            Field::new(shape, r.f32s(len)?).map_err(|e| Error::format(format!("LPL1: {e}")))
        };
        let x0 = field(&mut r)?;
        let x_seq = (0..n).map(|_| field(&mut r)).collect::<Result<Vec<_>>>()?;
        let m = r.u32()? as usize;
        if m != grid.executed_len() {
            return Err(Error::format(format!(
                "LPL1: {m} noise maps for {} executed steps",
                grid.executed_len()
            )));
        }
        let mut noise = Vec::with_capacity(m);
        for _ in 0..m {
            let z = field(&mut r)?;
            let offset = match r.u8()? {
                0 => None,
                1 => Some(field(&mut r)?),
                f => return Err(Error::format(format!("LPL1: bad offset flag {f}"))),
            };
            noise.push(StepNoise { z, offset });
        }
        r.finish()?;
        Ok(Self {
            x0,
            x_seq,
            noise,
            seed,
            schedule_fingerprint,
            model_fingerprint,
            grid,
            source,
        })
    }
}

pub fn save_latents(latents: &EditFriendlyLatents, path: &Path) -> Result<()> {
    binio::write_atomic(path, &latents.encode()?)
}

pub fn load_latents(path: &Path) -> Result<EditFriendlyLatents> {
    EditFriendlyLatents::decode(&binio::read_file(path)?)
}

/// Loads a cache and rejects it if it was built for another schedule or model.
pub fn load_latents_for(
    path: &Path,
    schedule: &NoiseSchedule,
    model: &dyn Denoiser,
) -> Result<EditFriendlyLatents> {
    let l = load_latents(path)?;
    l.check_fingerprints(&schedule.fingerprint(), &model.fingerprint())?;
    Ok(l)
}

/// Short content hash of a field, used to name caches.
pub fn field_hash(x: &Field) -> String {
    let mut h = Sha256::new();
    let (c, hh, w) = x.shape();
    for d in [c, hh, w] {
        h.update((d as u64).to_le_bytes());
    }
    for v in x.data() {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize()[..8])
}

/// `<run>/latents/<input-hash>.lpl`
pub fn cache_path(run_dir: &Path, x0: &Field) -> PathBuf {
    run_dir
        .join("latents")
        .join(format!("{}.lpl", field_hash(x0)))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic DDIM inversion over a uniform `steps`-point grid, returning
/// the estimated `x_T`. The estimate at each increment is taken at the
/// current state with the target timestep.
pub fn ddim_invert<D: Denoiser + ?Sized>(
    x0: &Field,
    model: &D,
    schedule: &NoiseSchedule,
    steps: usize,
) -> Result<Field> {
    let grid = TimestepGrid::uniform(schedule.len(), steps, 0.0)?;
    let mut x = x0.clone();
    let mut t_prev = 0usize;
    for &t in grid.steps().iter().rev() {
        let eps = model.eps(&x, t, None)?.eps;
        let ab_prev = schedule.alpha_bar(t_prev);
        let ab = schedule.alpha_bar(t);
        let (ap, sp) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        x = x.zip_map(&eps, |xi, e| {
            let e = e as f64;
            let x0_hat = (xi as f64 - sp * e) / ap;
            (a * x0_hat + s * e) as f32
        })?;
        t_prev = t;
    }
    Ok(x)
}

/// DDIM round trip: invert with `steps` points, then regenerate with `eta = 0`
/// on the same grid.
pub fn ddim_round_trip<D: Denoiser + ?Sized>(
    x0: &Field,
    model: &D,
    schedule: &NoiseSchedule,
    steps: usize,
) -> Result<Field> {
    let x_t = ddim_invert(x0, model, schedule, steps)?;
    let grid = TimestepGrid::uniform(schedule.len(), steps, 0.0)?;
    sampler::generate_ancestral(
        schedule,
        &grid,
        x_t,
        0.0,
        |x, t| Ok(model.eps(x, t, None)?.eps),
        &mut sampler::ZeroNoise,
    )
}
