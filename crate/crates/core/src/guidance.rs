//! Edited noise estimates: classifier-free guidance, per-concept directions
//! and their masked sum.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Field, Shape};
use crate::masking::{self, MaskPair};
use crate::model::{tiny::NULL_TOKEN, Conditioning, Denoiser};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Positive,
    Negative,
}

impl Direction {
    pub fn flipped(self) -> Self {
        match self {
            Direction::Positive => Direction::Negative,
            Direction::Negative => Direction::Positive,
        }
    }
}

/// One concept to push towards or away from.
#[derive(Debug, Clone, PartialEq)]
pub struct EditInstruction {
    pub label: String,
    pub conditioning: Conditioning,
    pub direction: Direction,
    pub scale: f32,
    pub threshold: f64,
    pub user_mask: Option<Field>,
    /// Token positions whose attention forms `M1`; defaults to every
    /// non-null token.
    pub attention_tokens: Option<Vec<usize>>,
    /// Executed steps at the start of generation during which this concept
    /// contributes nothing.
    pub warmup: usize,
}

impl EditInstruction {
    pub fn new(
        conditioning: Conditioning,
        direction: Direction,
        scale: f32,
        threshold: f64,
    ) -> Result<Self> {
        let e = Self {
            label: conditioning.label.clone(),
            conditioning,
            direction,
            scale,
            threshold,
            user_mask: None,
            attention_tokens: None,
            warmup: 0,
        };
        e.validate(None)?;
        Ok(e)
    }

    pub fn with_user_mask(mut self, mask: Field) -> Self {
        self.user_mask = Some(mask);
        self
    }

    /// Checks the instruction against a field shape, if known.
    pub fn validate(&self, shape: Option<Shape>) -> Result<()> {
        self.conditioning.validate()?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::param(format!(
                "edit '{}': threshold {} outside (0, 1)",
                self.label, self.threshold
            )));
        }
        if !self.scale.is_finite() || self.scale < 0.0 {
            return Err(Error::param(format!(
                "edit '{}': scale must be finite and >= 0",
                self.label
            )));
        }
        if let Some(m) = &self.user_mask {
            if !masking::is_binary(m) {
                return Err(Error::param(format!(
                    "edit '{}': user mask must be binary",
                    self.label
                )));
            }
            if let Some((_, h, w)) = shape {
                if m.shape() != (1, h, w) {
                    return Err(Error::Shape {
                        expected: (1, h, w),
                        got: m.shape(),
                    });
                }
            }
        }
        if let Some(tokens) = &self.attention_tokens {
            if tokens.is_empty() {
                return Err(Error::param(format!(
                    "edit '{}': empty attention token list",
                    self.label
                )));
            }
            if let Some(&p) = tokens
                .iter()
                .find(|&&p| p >= self.conditioning.tokens.len())
            {
                return Err(Error::param(format!(
                    "edit '{}': attention token position {p} beyond the caption",
                    self.label
                )));
            }
        }
        Ok(())
    }

    pub fn token_positions(&self) -> Vec<usize> {
        if let Some(t) = &self.attention_tokens {
            return t.clone();
        }
        let tokens = &self.conditioning.tokens;
        let content: Vec<usize> = (0..tokens.len())
            .filter(|&i| tokens[i] != NULL_TOKEN)
            .collect();
        if content.is_empty() {
            (0..tokens.len()).collect()
        } else {
            content
        }
    }
}

/// `u + s_g (c - u)`, evaluated in f64 and rounded once.
pub fn cfg_eps(eps_uncond: &Field, eps_cond: &Field, s_g: f32) -> Result<Field> {
    let s = s_g as f64;
    eps_uncond.zip_map(eps_cond, |u, c| {
        let u = u as f64;
        (u + s * (c as f64 - u)) as f32
    })
}

pub fn psi(eps_uncond: &Field, eps_cond: &Field, direction: Direction) -> Result<Field> {
    match direction {
        Direction::Positive => eps_cond.sub(eps_uncond),
        Direction::Negative => eps_uncond.sub(eps_cond),
    }
}

pub fn gamma(psi_field: &Field, phi: &Field) -> Result<Field> {
    psi_field.mul_spatial(phi)
}

/// Ordered elementwise sum; an empty list gives zeros of `shape`.
pub fn combine_edits(gammas: &[Field], shape: Shape) -> Result<Field> {
    let Some((first, rest)) = gammas.split_first() else {
        return Ok(Field::zeros(shape));
    };
    let mut acc = first.clone();
    for g in rest {
        acc.add_assign(g)?;
    }
    Ok(acc)
}

/// Everything computed for one concept at one step.
#[derive(Debug, Clone)]
pub struct ConceptStep {
    pub eps_cond: Field,
    pub psi: Field,
    pub gamma: Field,
    pub masks: MaskPair,
}

#[derive(Debug, Clone)]
pub struct GuidedStep {
    pub eps: Field,
    pub concepts: Vec<ConceptStep>,
}

/// Masks and guidance term of one concept given both estimates.
pub fn concept_step(
    edit: &EditInstruction,
    eps_base: &Field,
    eps_cond: &Field,
    attn: Option<&crate::model::AttentionStash>,
    active: bool,
) -> Result<ConceptStep> {
    let (_, h, w) = eps_base.shape();
    let psi_field = psi(eps_base, eps_cond, edit.direction)?;
    let m2 = masking::mask_from_noise(&psi_field, edit.threshold)?;
    let m1 = match attn {
        Some(stash) => {
            let a = masking::aggregate_attention(stash, &edit.token_positions())?;
            masking::mask_from_attention(&masking::upsample_nearest(&a, (h, w))?, edit.threshold)?
        }
        None => Field::filled((1, h, w), 1.0),
    };
    let scale = if active { edit.scale } else { 0.0 };
    let phi = masking::phi_mask(&m1, &m2, scale, edit.user_mask.as_ref())?;
    let gamma_field = gamma(&psi_field, &phi)?;
    Ok(ConceptStep {
        eps_cond: eps_cond.clone(),
        psi: psi_field,
        gamma: gamma_field,
        masks: MaskPair::new(m1, m2, phi, edit.threshold),
    })
}

/// Edited estimate at `(x, t)`: one base evaluation plus one conditional
/// evaluation per concept. `step` is the index among executed steps.
pub fn guided_eps<D: Denoiser + ?Sized>(
    model: &D,
    x: &Field,
    t: usize,
    step: usize,
    base: Option<&Conditioning>,
    edits: &[EditInstruction],
) -> Result<GuidedStep> {
    let eps_base = model.eps(x, t, base)?.eps;
    if edits.is_empty() {
        return Ok(GuidedStep {
            eps: eps_base,
            concepts: Vec::new(),
        });
    }
    let concepts = edits
        .par_iter()
        .map(|e| {
            let out = model.eps(x, t, Some(&e.conditioning))?;
            concept_step(e, &eps_base, &out.eps, out.attn.as_ref(), step >= e.warmup)
        })
        .collect::<Result<Vec<_>>>()?;
    let terms: Vec<(&Field, &Field, Direction)> = concepts
        .iter()
        .zip(edits)
        .map(|(c, e)| (&c.eps_cond, &c.masks.phi, e.direction))
        .collect();
    Ok(GuidedStep {
        eps: apply_edits(&eps_base, &terms)?,
        concepts,
    })
}

/// `u + sum_i phi_i psi_i` with the sum accumulated in f64 in list order and
/// rounded once. Each term is `(eps_cond, phi, direction)`.
pub fn apply_edits(eps_base: &Field, terms: &[(&Field, &Field, Direction)]) -> Result<Field> {
    let (c, h, w) = eps_base.shape();
    let plane = h * w;
    let base = eps_base.data();
    let mut acc: Vec<f64> = base.iter().map(|&v| v as f64).collect();
    for (cond, phi, dir) in terms {
        eps_base.ensure_same_shape(cond)?;
        if phi.shape() != (1, h, w) {
            return Err(Error::Shape {
                expected: (1, h, w),
                got: phi.shape(),
            });
        }
        let cond = cond.data();
        for i in 0..c * plane {
            let p = phi.data()[i % plane] as f64;
            let (u, e) = (base[i] as f64, cond[i] as f64);
            acc[i] += match dir {
                Direction::Positive => p * (e - u),
                Direction::Negative => p * (u - e),
            };
        }
    }
    Field::new((c, h, w), acc.into_iter().map(|v| v as f32).collect())
}
