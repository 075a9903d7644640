//! Mask quality against ground-truth shape regions.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::Field;
use crate::guidance::{concept_step, Direction, EditInstruction};
use crate::inversion::build_reconstruction_sequence;
use crate::masking::iou;
use crate::model::tiny::NULL_TOKEN;
use crate::model::{Conditioning, Denoiser};
use crate::schedule::{NoiseSchedule, TimestepGrid};

use super::shapes::ShapeDataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaskEvalRow {
    pub sample: u64,
    pub kind: u32,
    pub t: usize,
    pub lambda: f64,
    pub iou_m1: f64,
    pub iou_m2: f64,
    pub iou_both: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskEvalSummary {
    pub rows: Vec<MaskEvalRow>,
    pub mean_m1: f64,
    pub mean_m2: f64,
    pub mean_both: f64,
}

impl MaskEvalSummary {
    pub fn intersection_wins(&self) -> bool {
        self.mean_both > self.mean_m1 && self.mean_both > self.mean_m2
    }
}

/// Grid indices with `t / T` in `[0.25, 0.75]`.
pub fn mid_range(grid: &TimestepGrid) -> Vec<usize> {
    let t_max = grid.t_max() as f64;
    grid.steps()
        .iter()
        .enumerate()
        .filter(|(_, &t)| (0.25..=0.75).contains(&(t as f64 / t_max)))
        .map(|(i, _)| i)
        .collect()
}

/// Threshold giving a selection the size of the region.
pub fn area_lambda(mask: &Field) -> f64 {
    let frac = crate::masking::count_selected(mask) as f64 / mask.len() as f64;
    (1.0 - frac).clamp(1e-3, 1.0 - 1e-3)
}

/// IoU of `M1`, `M2` and their product for every shape of every sample, at
/// every mid-range step, with noised states drawn as in inversion.
pub fn evaluate_masks<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    data: &ShapeDataset,
    samples: std::ops::Range<u64>,
    seed: u64,
) -> Result<MaskEvalSummary> {
    let steps = mid_range(grid);
    if steps.is_empty() {
        return Err(Error::param("grid has no mid-range steps"));
    }
    let per_sample: Vec<Vec<MaskEvalRow>> = samples
        .clone()
        .into_par_iter()
        .map(|idx| {
            let s = data.sample(idx);
            let x_seq =
                build_reconstruction_sequence(&s.field, schedule, grid, seed.wrapping_add(idx))?;
            let mut rows = Vec::new();
            for &kind in &s.caption()[1..] {
                let gt = s.mask(kind);
                let lambda = area_lambda(&gt);
                let cond =
                    Conditioning::new(format!("kind{kind}"), vec![NULL_TOKEN, kind], vec![])?;
                let edit = EditInstruction::new(cond, Direction::Positive, 1.0, lambda)?;
                for &i in &steps {
                    let t = grid.steps()[i];
                    let x = &x_seq[i];
                    let u = model.eps(x, t, None)?.eps;
                    let c = model.eps(x, t, Some(&edit.conditioning))?;
                    if c.attn.is_none() {
                        return Err(Error::Setup(
                            "mask evaluation needs a model with attention".into(),
                        ));
                    }
                    let step = concept_step(&edit, &u, &c.eps, c.attn.as_ref(), true)?;
                    rows.push(MaskEvalRow {
                        sample: idx,
                        kind,
                        t,
                        lambda,
                        iou_m1: iou(&step.masks.m1, &gt)?,
                        iou_m2: iou(&step.masks.m2, &gt)?,
                        iou_both: iou(&step.masks.intersection(), &gt)?,
                    });
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<MaskEvalRow> = per_sample.into_iter().flatten().collect();
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&MaskEvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(MaskEvalSummary {
        mean_m1: mean(|r| r.iou_m1),
        mean_m2: mean(|r| r.iou_m2),
        mean_both: mean(|r| r.iou_both),
        rows,
    })
}

/// Expected IoU of an independent random mask of density `p` against a
/// region of area fraction `a`.
pub fn random_mask_iou(p: f64, a: f64) -> f64 {
    p * a / (p + a - p * a)
}
