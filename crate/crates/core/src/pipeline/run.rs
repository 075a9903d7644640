//! Guided regeneration from a latent cache, with evaluation counting.

use crate::error::Result;
use crate::field::Field;
use crate::guidance::{guided_eps, EditInstruction};
use crate::inversion::EditFriendlyLatents;
use crate::masking::MaskPair;
use crate::model::{CountingDenoiser, Denoiser};
use crate::sampler::{self, NoiseSource};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub field: Field,
    /// Masks per executed step, one entry per concept.
    pub masks: Vec<Vec<MaskPair>>,
    pub evals: usize,
}

impl EditOutcome {
    /// Per-step binary intersections, for reuse as frozen masks.
    pub fn intersections(&self) -> Vec<Vec<Field>> {
        self.masks
            .iter()
            .map(|step| step.iter().map(MaskPair::intersection).collect())
            .collect()
    }
}

/// Replays the cached noise with the edited estimate. With `frozen`, concept
/// `i` at step `k` uses `frozen[k][i]` in place of its computed masks.
pub fn edit_from_latents(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    latents: &EditFriendlyLatents,
    edits: &[EditInstruction],
    frozen: Option<&[Vec<Field>]>,
) -> Result<EditOutcome> {
    latents.check_fingerprints(&schedule.fingerprint(), &model.fingerprint())?;
    for e in edits {
        e.validate(Some(latents.shape()))?;
    }
    let counted = CountingDenoiser::new(model);
    let mut masks = Vec::with_capacity(latents.grid.executed_len());
    let mut k = 0usize;
    let mut noise = latents.noise_source();
    let field = sampler::generate(
        schedule,
        &latents.grid,
        latents.start_state().clone(),
        |x, t| {
            let step_edits;
            let active = match frozen {
                Some(f) => {
                    let row = f.get(k).ok_or_else(|| {
                        crate::Error::param(format!("no frozen masks for step {k}"))
                    })?;
                    step_edits = edits
                        .iter()
                        .zip(row)
                        .map(|(e, m)| e.clone().with_user_mask(m.clone()))
                        .collect::<Vec<_>>();
                    &step_edits[..]
                }
                None => edits,
            };
            let g = guided_eps(&counted, x, t, k, latents.source.as_ref(), active)?;
            masks.push(g.concepts.into_iter().map(|c| c.masks).collect());
            k += 1;
            Ok(g.eps)
        },
        &mut noise as &mut dyn NoiseSource,
    )?;
    Ok(EditOutcome {
        field,
        masks,
        evals: counted.count(),
    })
}

/// `inv_steps + gen_steps * (1 + n_concepts)`.
pub fn expected_evals(inv_steps: usize, gen_steps: usize, n_concepts: usize) -> usize {
    inv_steps + gen_steps * (1 + n_concepts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::Direction;
    use crate::inversion::invert;
    use crate::model::{AnalyticGmm, Conditioning, GmmComponent, GmmSpec};
    use crate::schedule::{ScheduleKind, TimestepGrid};

    fn setup() -> (NoiseSchedule, AnalyticGmm, EditFriendlyLatents) {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap();
        let shape = (1, 4, 4);
        let spec = GmmSpec::new(vec![
            GmmComponent {
                mean: Field::filled(shape, -0.5),
                scale: 0.3,
                weight: 1.0,
            },
            GmmComponent {
                mean: Field::filled(shape, 0.8),
                scale: 0.3,
                weight: 1.0,
            },
        ])
        .unwrap();
        let m = AnalyticGmm::new(spec, s.clone());
        let g = TimestepGrid::uniform(1000, 12, 0.25).unwrap();
        let x0 = Field::from_fn(shape, |_, y, x| -0.5 + 0.1 * (y as f32 - x as f32));
        let l = invert(&x0, &m, &s, &g, 5, None).unwrap();
        (s, m, l)
    }

    #[test]
    fn zero_scale_matches_reconstruction_and_counts() {
        let (s, m, l) = setup();
        let rec = l.reconstruct(&m, &s).unwrap();
        let cond = Conditioning::new("b", vec![1], vec![1]).unwrap();
        let e = EditInstruction::new(cond, Direction::Positive, 0.0, 0.5).unwrap();
        let out = edit_from_latents(&m, &s, &l, &[e.clone(), e], None).unwrap();
        assert!(out.field.bit_eq(&rec));
        let gen = l.grid.executed_len();
        assert_eq!(out.evals, expected_evals(0, gen, 2));
        assert_eq!(out.masks.len(), gen);
    }

    #[test]
    fn frozen_masks_reproduce_computed_run() {
        let (s, m, l) = setup();
        let cond = Conditioning::new("b", vec![1], vec![1]).unwrap();
        let e = EditInstruction::new(cond, Direction::Positive, 3.0, 0.6).unwrap();
        let live = edit_from_latents(&m, &s, &l, std::slice::from_ref(&e), None).unwrap();
        let frozen = live.intersections();
        let again = edit_from_latents(&m, &s, &l, &[e], Some(&frozen)).unwrap();
        assert!(again.field.bit_eq(&live.field));
    }
}
