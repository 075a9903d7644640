//! The experiment commands behind the CLI. Each returns a [`Report`]; a
//! failed check is reported as a failure, not an error.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{rmse, Field};
use crate::guidance::EditInstruction;
use crate::inversion::{self, invert, EditFriendlyLatents};
use crate::model::tiny::train;
use crate::model::{save_weights, CountingDenoiser, Denoiser, GmmSpec};
use crate::sampler::{self, ZeroNoise};
use crate::schedule::{NoiseSchedule, TimestepGrid};

use super::config::{ModelConfig, Resolved, RunConfig};
use super::convergence::BrownianPath;
use super::io;
use super::mask_eval::{evaluate_masks, mid_range, MaskEvalSummary};
use super::run::{edit_from_latents, expected_evals, EditOutcome};
use super::shapes::ShapeDataset;

/// Per-run options that are not part of the config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: PathBuf,
    pub dump_masks: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub lines: Vec<String>,
    pub failure: Option<String>,
}

impl Report {
    fn line(&mut self, s: impl Into<String>) {
        self.lines.push(s.into());
    }

    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(e.to_string()))?;
    crate::binio::write_atomic(path, &bytes)
}

#[derive(Debug, Clone, Serialize)]
pub struct RunMetrics {
    pub config_hash: String,
    pub command: &'static str,
    pub seed: u64,
    pub rmse: f64,
    pub inversion_evals: usize,
    pub generation_evals: usize,
    pub model_eval_count: usize,
    pub expected_eval_count: usize,
    pub gen_steps: usize,
    pub n_concepts: usize,
    pub skip: f64,
    pub wall_time_s: f64,
}

/// Cache file for this input, seed and grid.
pub fn latent_cache_path(out: &Path, x0: &Field, seed: u64, grid: &TimestepGrid) -> PathBuf {
    out.join("latents").join(format!(
        "{}-s{seed}-n{}-k{}.lpl",
        inversion::field_hash(x0),
        grid.steps().len(),
        grid.start_step()
    ))
}

/// Loads the matching cache or inverts and stores it. Returns the latents and
/// the number of model evaluations spent.
pub fn obtain_latents(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    x0: &Field,
    seed: u64,
    source: Option<&crate::model::Conditioning>,
    out: &Path,
) -> Result<(EditFriendlyLatents, usize)> {
    let path = latent_cache_path(out, x0, seed, grid);
    if path.exists() {
        let l = inversion::load_latents_for(&path, schedule, model)?;
        if l.x0.bit_eq(x0) && l.source.as_ref() == source {
            return Ok((l, 0));
        }
        return Err(Error::StaleCache(format!(
            "{} was built for a different input or source",
            path.display()
        )));
    }
    let counted = CountingDenoiser::new(model);
    let l = invert(x0, &counted, schedule, grid, seed, source.cloned())?;
    inversion::save_latents(&l, &path)?;
    Ok((l, counted.count()))
}

fn setup(cfg: &RunConfig) -> Result<(Resolved, Field)> {
    let r = cfg.resolve()?;
    let x0 = cfg.build_input(r.model.as_ref())?;
    for e in &r.edits {
        e.validate(Some(x0.shape()))?;
    }
    Ok((r, x0))
}

pub fn cmd_invert(cfg: &RunConfig, opts: &RunOptions) -> Result<(Report, RunMetrics)> {
    let start = Instant::now();
    let (r, x0) = setup(cfg)?;
    let (l, evals) = obtain_latents(
        r.model.as_ref(),
        &r.schedule,
        &r.grid,
        &x0,
        cfg.seed,
        cfg.source.as_ref(),
        &opts.out,
    )?;
    let rec = l.reconstruct(r.model.as_ref(), &r.schedule)?;
    let err = rmse(&rec, &x0)?;
    let gen = r.grid.executed_len();
    let m = RunMetrics {
        config_hash: cfg.hash(),
        command: "invert",
        seed: cfg.seed,
        rmse: err,
        inversion_evals: evals,
        generation_evals: 0,
        model_eval_count: evals,
        expected_eval_count: if evals == 0 {
            0
        } else {
            expected_evals(gen, 0, 0)
        },
        gen_steps: gen,
        n_concepts: 0,
        skip: r.grid.skip(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    io::write_field(&opts.out.join("input.lpf"), &x0)?;
    write_csv(&opts.out.join("invert.csv"), std::slice::from_ref(&m))?;
    let mut rep = Report::default();
    rep.line(format!(
        "inverted {} steps from t={} ({} evaluations), reconstruction rmse {:.3e}",
        gen,
        r.grid.start_step(),
        evals,
        err
    ));
    if m.model_eval_count != m.expected_eval_count {
        rep.failure = Some(format!(
            "evaluation count {} differs from {}",
            m.model_eval_count, m.expected_eval_count
        ));
    }
    Ok((rep, m))
}

#[derive(Debug)]
pub struct EditResult {
    pub report: Report,
    pub metrics: RunMetrics,
    pub edited: EditOutcome,
    pub reconstruction: Field,
    pub input: Field,
}

pub fn cmd_edit(cfg: &RunConfig, opts: &RunOptions) -> Result<EditResult> {
    let start = Instant::now();
    let (r, x0) = setup(cfg)?;
    let (l, inv_evals) = obtain_latents(
        r.model.as_ref(),
        &r.schedule,
        &r.grid,
        &x0,
        cfg.seed,
        cfg.source.as_ref(),
        &opts.out,
    )?;
    let edited = edit_from_latents(r.model.as_ref(), &r.schedule, &l, &r.edits, None)?;
    let reconstruction = l.reconstruct(r.model.as_ref(), &r.schedule)?;
    let gen = r.grid.executed_len();
    let inv_steps = if inv_evals == 0 { 0 } else { gen };
    let metrics = RunMetrics {
        config_hash: cfg.hash(),
        command: "edit",
        seed: cfg.seed,
        rmse: rmse(&reconstruction, &x0)?,
        inversion_evals: inv_evals,
        generation_evals: edited.evals,
        model_eval_count: inv_evals + edited.evals,
        expected_eval_count: expected_evals(inv_steps, gen, r.edits.len()),
        gen_steps: gen,
        n_concepts: r.edits.len(),
        skip: r.grid.skip(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    io::write_field(&opts.out.join("edited.lpf"), &edited.field)?;
    io::write_preview(
        &opts.out.join(preview_name("edited", &edited.field)),
        &edited.field,
    )?;
    if opts.dump_masks {
        dump_masks(&opts.out.join("masks"), &edited, &r.edits, &l.grid)?;
    }
    write_csv(&opts.out.join("edit.csv"), std::slice::from_ref(&metrics))?;
    let mut report = Report::default();
    report.line(format!(
        "edited with {} concept(s) over {} steps; evaluations {} (inversion {}, generation {})",
        r.edits.len(),
        gen,
        metrics.model_eval_count,
        inv_evals,
        edited.evals
    ));
    report.line(format!(
        "change from reconstruction: rmse {:.4e}",
        rmse(&edited.field, &reconstruction)?
    ));
    if metrics.model_eval_count != metrics.expected_eval_count {
        report.failure = Some(format!(
            "evaluation count {} differs from {}",
            metrics.model_eval_count, metrics.expected_eval_count
        ));
    }
    Ok(EditResult {
        report,
        metrics,
        edited,
        reconstruction,
        input: x0,
    })
}

fn preview_name(stem: &str, f: &Field) -> String {
    let ext = if f.channels() == 3 { "ppm" } else { "pgm" };
    format!("{stem}.{ext}")
}

fn dump_masks(
    dir: &Path,
    out: &EditOutcome,
    edits: &[EditInstruction],
    grid: &TimestepGrid,
) -> Result<()> {
    let executed = grid.executed();
    for (k, step) in out.masks.iter().enumerate() {
        let t = executed[k].1;
        for (pair, e) in step.iter().zip(edits) {
            let label: String = e
                .conditioning
                .label
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
                .collect();
            let stem = format!("t{t:04}_{label}");
            io::write_mask(&dir.join(format!("{stem}_m1.pgm")), &pair.m1)?;
            io::write_mask(&dir.join(format!("{stem}_m2.pgm")), &pair.m2)?;
            io::write_mask(&dir.join(format!("{stem}_both.pgm")), &pair.intersection())?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct VariationRow {
    pub config_hash: String,
    pub seed: u64,
    pub control_rmse: f64,
    pub min_pairwise_rmse: f64,
}

/// One edit per seed; outputs must differ and every control must reproduce
/// the input.
pub fn cmd_variations(cfg: &RunConfig, opts: &RunOptions) -> Result<(Report, Vec<VariationRow>)> {
    let (r, x0) = setup(cfg)?;
    let seeds = &cfg.experiment.seeds;
    if seeds.len() < 2 {
        return Err(Error::Config("variations need at least two seeds".into()));
    }
    let runs = seeds
        .par_iter()
        .map(|&seed| {
            let l = invert(
                &x0,
                r.model.as_ref(),
                &r.schedule,
                &r.grid,
                seed,
                cfg.source.clone(),
            )?;
            let ed = edit_from_latents(r.model.as_ref(), &r.schedule, &l, &r.edits, None)?;
            let control = l.reconstruct(r.model.as_ref(), &r.schedule)?;
            Ok((seed, ed.field, rmse(&control, &x0)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let hash = cfg.hash();
    let mut rows = Vec::new();
    let mut rep = Report::default();
    for (i, (seed, f, control)) in runs.iter().enumerate() {
        let mut min_pair = f64::INFINITY;
        for (j, (_, g, _)) in runs.iter().enumerate() {
            if i != j {
                min_pair = min_pair.min(rmse(f, g)?);
            }
        }
        io::write_field(&opts.out.join(format!("variation_s{seed}.lpf")), f)?;
        rep.line(format!(
            "seed {seed}: control rmse {control:.3e}, nearest other output rmse {min_pair:.4e}"
        ));
        if *control > 1e-5 {
            rep.failure = Some(format!("seed {seed} control does not reproduce the input"));
        }
        if min_pair <= 0.0 {
            rep.failure = Some(format!("seed {seed} output equals another seed's output"));
        }
        rows.push(VariationRow {
            config_hash: hash.clone(),
            seed: *seed,
            control_rmse: *control,
            min_pairwise_rmse: min_pair,
        });
    }
    write_csv(&opts.out.join("variations.csv"), &rows)?;
    Ok((rep, rows))
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub config_hash: String,
    pub seed: u64,
    pub scale: f32,
    pub projection: f64,
}

/// Projection of `(edit - reconstruction)` onto the top-scale change, for
/// every scale and seed. With `freeze_masks`, every scale reuses the masks of
/// the scale-0 run.
pub fn cmd_sweep_scale(cfg: &RunConfig, opts: &RunOptions) -> Result<(Report, Vec<SweepRow>)> {
    let (r, x0) = setup(cfg)?;
    let scales = &cfg.experiment.scales;
    if scales.len() < 3 || !scales.contains(&0.0) {
        return Err(Error::Config(
            "scale sweep needs at least three scales including 0".into(),
        ));
    }
    if scales.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("scales must be strictly increasing".into()));
    }
    if r.edits.is_empty() {
        return Err(Error::Config("scale sweep needs at least one edit".into()));
    }
    let hash = cfg.hash();
    let per_seed = cfg
        .experiment
        .seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<SweepRow>> {
            let l = invert(
                &x0,
                r.model.as_ref(),
                &r.schedule,
                &r.grid,
                seed,
                cfg.source.clone(),
            )?;
            let at = |s: f32, frozen: Option<&[Vec<Field>]>| {
                let edits: Vec<EditInstruction> = r
                    .edits
                    .iter()
                    .map(|e| EditInstruction {
                        scale: s,
                        ..e.clone()
                    })
                    .collect();
                edit_from_latents(r.model.as_ref(), &r.schedule, &l, &edits, frozen)
            };
            let base = at(0.0, None)?;
            let frozen = cfg.experiment.freeze_masks.then(|| base.intersections());
            let outs = scales
                .par_iter()
                .map(|&s| Ok(at(s, frozen.as_deref())?.field))
                .collect::<Result<Vec<Field>>>()?;
            let zero = &outs[scales.iter().position(|&s| s == 0.0).expect("checked")];
            let dir = outs.last().expect("non-empty").sub(zero)?;
            let norm = dir.sum_sq().sqrt();
            outs.iter()
                .zip(scales)
                .map(|(f, &s)| {
                    let p = if norm > 0.0 {
                        f.sub(zero)?.dot(&dir)? / norm
                    } else {
                        0.0
                    };
                    Ok(SweepRow {
                        config_hash: hash.clone(),
                        seed,
                        scale: s,
                        projection: p,
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rep = Report::default();
    let mut offending = Vec::new();
    for rows in &per_seed {
        let ps: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.4}", r.projection))
            .collect();
        rep.line(format!("seed {}: {}", rows[0].seed, ps.join(" ")));
        for w in rows.windows(2) {
            if w[1].projection < w[0].projection - 1e-4 {
                offending.push(format!(
                    "seed {}: s={} -> {:.6} then s={} -> {:.6}",
                    w[0].seed, w[0].scale, w[0].projection, w[1].scale, w[1].projection
                ));
            }
        }
    }
    if !offending.is_empty() {
        rep.failure = Some(format!("projection decreases: {}", offending.join("; ")));
    }
    let rows: Vec<SweepRow> = per_seed.into_iter().flatten().collect();
    write_csv(&opts.out.join("sweep_scale.csv"), &rows)?;
    Ok((rep, rows))
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub config_hash: String,
    pub solver: &'static str,
    pub steps: usize,
    pub error: f64,
}

/// Drift-only endpoint of the stochastic solver for Gaussian data
/// `N(mu, s^2)` started from `x_t`.
pub fn sde_zero_noise_endpoint(mu: f64, s: f64, x_t: f64, alpha_bar: f64) -> f64 {
    let u = alpha_bar / (1.0 - alpha_bar);
    let w = x_t * (u * (1.0 + u)).sqrt();
    (mu + s * s * w) / (1.0 + s * s * u)
}

/// Probability-flow endpoint for Gaussian data `N(mu, s^2)` started from `x_t`.
pub fn ode_endpoint(mu: f64, s: f64, x_t: f64, alpha_bar: f64) -> f64 {
    mu + s * (x_t - alpha_bar.sqrt() * mu) / (alpha_bar * s * s + 1.0 - alpha_bar).sqrt()
}

/// Endpoint error against the exact solution for each step count: the
/// multistep solver driven by one shared Brownian path, and DDIM against the
/// probability-flow endpoint.
pub fn convergence_table(
    spec: &GmmSpec,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    step_counts: &[usize],
    seed: u64,
) -> Result<Vec<(&'static str, usize, f64)>> {
    let [c] = spec.components() else {
        return Err(Error::Config(
            "convergence needs a single-component mixture".into(),
        ));
    };
    let t_max = schedule.len();
    let ab = schedule.alpha_bar(t_max);
    let x_t = crate::rng::normal_field(seed, crate::rng::purpose::RECONSTRUCTION, c.mean.shape());
    let path = BrownianPath::sample(schedule, c.scale, c.mean.shape(), seed)?;
    let sde_ref = path.exact_endpoint(schedule, &c.mean, &x_t, t_max)?;
    let ode_ref = c.mean.zip_map(&x_t, |m, x| {
        ode_endpoint(m as f64, c.scale, x as f64, ab) as f32
    })?;
    let rows = step_counts
        .par_iter()
        .map(|&n| {
            let grid = TimestepGrid::uniform(t_max, n, 0.0)?;
            let eps = |x: &Field, t: usize| Ok(model.eps(x, t, None)?.eps);
            let sde = sampler::generate(schedule, &grid, x_t.clone(), eps, &mut path.noise())?;
            let ddim = sampler::generate_ancestral(
                schedule,
                &grid,
                x_t.clone(),
                0.0,
                eps,
                &mut ZeroNoise,
            )?;
            Ok(vec![
                ("dpmpp-2m-sde", n, rmse(&sde, &sde_ref)?),
                ("ddim", n, rmse(&ddim, &ode_ref)?),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rows.into_iter().flatten().collect())
}

pub fn cmd_convergence(
    cfg: &RunConfig,
    opts: &RunOptions,
) -> Result<(Report, Vec<ConvergenceRow>)> {
    let r = cfg.resolve()?;
    let ModelConfig::Gmm { components } = &cfg.model else {
        return Err(Error::Config("convergence needs an analytic model".into()));
    };
    let comps = components
        .iter()
        .map(|c| {
            Ok(crate::model::GmmComponent {
                mean: c.mean.build(&cfg.base_dir)?,
                scale: c.scale,
                weight: c.weight,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = GmmSpec::new(comps)?;
    let mut counts = cfg.experiment.step_counts.clone();
    counts.sort_unstable();
    let table = convergence_table(&spec, r.model.as_ref(), &r.schedule, &counts, cfg.seed)?;
    let hash = cfg.hash();
    let rows: Vec<ConvergenceRow> = table
        .iter()
        .map(|&(solver, steps, error)| ConvergenceRow {
            config_hash: hash.clone(),
            solver,
            steps,
            error,
        })
        .collect();
    let mut rep = Report::default();
    for row in &rows {
        rep.line(format!(
            "{:>13} {:>4} steps  error {:.3e}",
            row.solver, row.steps, row.error
        ));
    }
    let sde: Vec<&ConvergenceRow> = rows.iter().filter(|r| r.solver == "dpmpp-2m-sde").collect();
    if let Some(w) = sde.windows(2).find(|w| w[1].error >= w[0].error) {
        rep.failure = Some(format!(
            "error does not decrease from {} to {} steps ({:.3e} -> {:.3e})",
            w[0].steps, w[1].steps, w[0].error, w[1].error
        ));
    }
    write_csv(&opts.out.join("convergence.csv"), &rows)?;
    Ok((rep, rows))
}

#[derive(Debug, Clone, Serialize)]
pub struct MaskRow {
    pub config_hash: String,
    pub sample: u64,
    pub kind: u32,
    pub t: usize,
    pub lambda: f64,
    pub iou_m1: f64,
    pub iou_m2: f64,
    pub iou_both: f64,
}

pub fn cmd_eval_masks(cfg: &RunConfig, opts: &RunOptions) -> Result<(Report, MaskEvalSummary)> {
    let r = cfg.resolve()?;
    // training draws from `data_seed`; evaluate on the next stream
    let data = ShapeDataset::new(cfg.experiment.data_seed.wrapping_add(1));
    let summary = evaluate_masks(
        r.model.as_ref(),
        &r.schedule,
        &r.grid,
        &data,
        0..cfg.experiment.samples,
        cfg.seed,
    )?;
    let hash = cfg.hash();
    let rows: Vec<MaskRow> = summary
        .rows
        .iter()
        .map(|m| MaskRow {
            config_hash: hash.clone(),
            sample: m.sample,
            kind: m.kind,
            t: m.t,
            lambda: m.lambda,
            iou_m1: m.iou_m1,
            iou_m2: m.iou_m2,
            iou_both: m.iou_both,
        })
        .collect();
    write_csv(&opts.out.join("eval_masks.csv"), &rows)?;
    let mut rep = Report::default();
    for &i in &mid_range(&r.grid) {
        let t = r.grid.steps()[i];
        let at: Vec<&MaskRow> = rows.iter().filter(|m| m.t == t).collect();
        let n = at.len().max(1) as f64;
        let mean = |f: fn(&MaskRow) -> f64| at.iter().map(|m| f(m)).sum::<f64>() / n;
        rep.line(format!(
            "t={t:4}  M1 {:.3}  M2 {:.3}  M1*M2 {:.3}",
            mean(|m| m.iou_m1),
            mean(|m| m.iou_m2),
            mean(|m| m.iou_both)
        ));
    }
    rep.line(format!(
        "mean IoU over mid-range steps: M1 {:.3}  M2 {:.3}  M1*M2 {:.3}",
        summary.mean_m1, summary.mean_m2, summary.mean_both
    ));
    if !summary.intersection_wins() {
        rep.failure = Some(format!(
            "intersection IoU {:.3} does not exceed both M1 {:.3} and M2 {:.3}",
            summary.mean_both, summary.mean_m1, summary.mean_m2
        ));
    }
    Ok((rep, summary))
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub config_hash: String,
    pub phase: &'static str,
    pub steps: usize,
    pub evals: usize,
    pub expected: usize,
    pub wall_time_s: f64,
}

/// Inversion then a guided edit with a fresh cache, reporting counts and times.
pub fn cmd_bench_evals(cfg: &RunConfig, opts: &RunOptions) -> Result<(Report, Vec<BenchRow>)> {
    let (r, x0) = setup(cfg)?;
    let counted = CountingDenoiser::new(r.model.as_ref());
    let t0 = Instant::now();
    let l = invert(
        &x0,
        &counted,
        &r.schedule,
        &r.grid,
        cfg.seed,
        cfg.source.clone(),
    )?;
    let inv_time = t0.elapsed().as_secs_f64();
    let inv = counted.count();
    let t1 = Instant::now();
    let ed = edit_from_latents(r.model.as_ref(), &r.schedule, &l, &r.edits, None)?;
    let gen_time = t1.elapsed().as_secs_f64();
    let steps = r.grid.executed_len();
    let hash = cfg.hash();
    let rows = vec![
        BenchRow {
            config_hash: hash.clone(),
            phase: "inversion",
            steps,
            evals: inv,
            expected: expected_evals(steps, 0, 0),
            wall_time_s: inv_time,
        },
        BenchRow {
            config_hash: hash.clone(),
            phase: "generation",
            steps,
            evals: ed.evals,
            expected: expected_evals(0, steps, r.edits.len()),
            wall_time_s: gen_time,
        },
        BenchRow {
            config_hash: hash,
            phase: "total",
            steps,
            evals: inv + ed.evals,
            expected: expected_evals(steps, steps, r.edits.len()),
            wall_time_s: inv_time + gen_time,
        },
    ];
    let mut rep = Report::default();
    for b in &rows {
        rep.line(format!(
            "{:>10}: {} steps, {} evaluations (expected {}), {:.3} s",
            b.phase, b.steps, b.evals, b.expected, b.wall_time_s
        ));
        if b.evals != b.expected {
            rep.failure = Some(format!(
                "{} used {} evaluations, expected {}",
                b.phase, b.evals, b.expected
            ));
        }
    }
    write_csv(&opts.out.join("bench_evals.csv"), &rows)?;
    Ok((rep, rows))
}

/// Trains the tiny denoiser on the shape dataset and writes its weights to
/// the configured path.
pub fn cmd_train_tiny(cfg: &RunConfig, log_every: usize) -> Result<Report> {
    let path = cfg
        .weights_path()
        .ok_or_else(|| Error::Config("train-tiny needs a tiny model with a weights path".into()))?;
    let schedule = cfg.build_schedule()?;
    let tc = cfg.experiment.train.unwrap_or_default();
    let data = ShapeDataset::new(cfg.experiment.data_seed);
    let mut rep = Report::default();
    let mut recent = Vec::new();
    let model = train(
        cfg.tiny_config(),
        &schedule,
        &tc,
        |i| data.training_pair(i),
        |step, loss| {
            recent.push(loss);
            if log_every > 0 && (step + 1) % log_every == 0 {
                let mean = recent.iter().sum::<f64>() / recent.len() as f64;
                eprintln!("step {:6}  loss {mean:.4}", step + 1);
                recent.clear();
            }
        },
    )?;
    save_weights(&model.to_weights(), &path)?;
    rep.line(format!(
        "trained {} steps, weights written to {}",
        tc.steps,
        path.display()
    ));
    Ok(rep)
}
