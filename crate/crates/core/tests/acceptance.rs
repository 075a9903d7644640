//! The twelve acceptance criteria, each at its stated tolerance. Every
//! criterion is run and reported before the test fails on any of them.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use semedit::guidance::{cfg_eps, guided_eps, Direction, EditInstruction};
use semedit::inversion::{
    ddim_round_trip, invert, load_latents, load_latents_for, save_latents, EditFriendlyLatents,
};
use semedit::masking::threshold_mask;
use semedit::model::tiny::{train, TrainConfig};
use semedit::model::{
    load_weights, save_weights, AnalyticGmm, GmmComponent, GmmSpec, TinyConfig, TinyDenoiser,
    Weights,
};
use semedit::pipeline::commands::{
    cmd_bench_evals, cmd_convergence, cmd_edit, cmd_sweep_scale, cmd_variations, RunOptions,
};
use semedit::pipeline::config::RunConfig;
use semedit::pipeline::io::{decode_field, encode_field, read_field, write_field};
use semedit::pipeline::mask_eval::evaluate_masks;
use semedit::pipeline::run::expected_evals;
use semedit::pipeline::shapes::{ShapeDataset, VOCAB};
use semedit::rng::normal_field;
use semedit::sampler::{
    data_prediction, generate_ancestral, step_ancestral, step_dpmpp_2m_sde, PrevEstimate, RngNoise,
};
use semedit::{
    rmse, Conditioning, Denoiser, Error, Field, NoiseSchedule, ScheduleKind, TimestepGrid,
};

type Outcome = std::result::Result<String, String>;

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

fn load(name: &str) -> RunConfig {
    RunConfig::load(&configs().join(name)).expect("config loads")
}

fn linear(t_max: usize) -> NoiseSchedule {
    NoiseSchedule::build(ScheduleKind::Linear, t_max, 1e-4, 0.02).unwrap()
}

fn toy_gmm(s: &NoiseSchedule, shape: (usize, usize, usize)) -> AnalyticGmm {
    let spec = GmmSpec::new(vec![
        GmmComponent {
            mean: Field::from_fn(shape, |c, y, x| ((c + y * 3 + x) as f32 * 0.7).sin() * 0.6),
            scale: 0.3,
            weight: 1.0,
        },
        GmmComponent {
            mean: Field::from_fn(shape, |_, y, _| if y % 2 == 0 { -0.7 } else { 0.4 }),
            scale: 0.5,
            weight: 1.5,
        },
    ])
    .unwrap();
    AnalyticGmm::new(spec, s.clone())
}

fn perfect_inversion() -> Outcome {
    let start = Instant::now();
    let s = linear(1000);
    let gmm = toy_gmm(&s, (1, 32, 32));
    let tiny = TinyDenoiser::init(TinyConfig::toy(1, 32, 32, VOCAB, 1000), 3).unwrap();
    let models: [(&str, &dyn Denoiser); 2] = [("gmm", &gmm), ("tiny", &tiny)];
    let data = ShapeDataset::new(21);
    let mut cases = Vec::new();
    for (mi, _) in models.iter().enumerate() {
        for input in 0..20u64 {
            for steps in [20usize, 50] {
                for seed in 0..3u64 {
                    cases.push((mi, input, steps, seed));
                }
            }
        }
    }
    let worst = cases
        .par_iter()
        .map(|&(mi, input, steps, seed)| {
            let x0 = if input % 2 == 0 {
                data.sample(input).field
            } else {
                normal_field(input, 77, (1, 32, 32)).scale(0.8)
            };
            let g = TimestepGrid::uniform(1000, steps, 0.0).unwrap();
            let l = invert(&x0, models[mi].1, &s, &g, seed, None).unwrap();
            rmse(&l.reconstruct(models[mi].1, &s).unwrap(), &x0).unwrap()
        })
        .reduce(|| 0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("{} runs, worst rmse {worst:.2e}, {secs:.2} s", cases.len());
    if worst <= 1e-5 && secs < 10.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ddim_gap() -> Outcome {
    let s = linear(1000);
    let m = toy_gmm(&s, (1, 8, 8));
    let x0 = normal_field(4, 1, (1, 8, 8)).scale(0.5);
    let g = TimestepGrid::uniform(1000, 50, 0.0).unwrap();
    let ours = rmse(
        &invert(&x0, &m, &s, &g, 1, None)
            .unwrap()
            .reconstruct(&m, &s)
            .unwrap(),
        &x0,
    )
    .unwrap();
    let ddim: Vec<(usize, f64)> = [10usize, 20, 50, 100, 200]
        .iter()
        .map(|&n| {
            (
                n,
                rmse(&ddim_round_trip(&x0, &m, &s, n).unwrap(), &x0).unwrap(),
            )
        })
        .collect();
    let at50 = ddim.iter().find(|(n, _)| *n == 50).unwrap().1;
    let decreasing = ddim.windows(2).all(|w| w[1].1 < w[0].1);
    let curve: Vec<String> = ddim.iter().map(|(n, e)| format!("{n}:{e:.2e}")).collect();
    let detail = format!("ddim@50 {at50:.3e} vs {ours:.1e}; ddim {}", curve.join(" "));
    if at50 >= 10.0 * ours && decreasing {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn cfg_reduction() -> Outcome {
    let s = linear(1000);
    let m = toy_gmm(&s, (2, 4, 4));
    let mut mismatches = 0;
    for i in 0..100u64 {
        let x = normal_field(i, 5, (2, 4, 4));
        let t = 1 + (i as usize * 97) % 1000;
        let scale = 0.5 + (i % 13) as f32 * 1.25;
        let cond = Conditioning::new("c", vec![1], vec![(i % 2) as usize]).unwrap();
        // the smallest admissible threshold keeps every element
        let e = EditInstruction::new(cond.clone(), Direction::Positive, scale, 1e-9).unwrap();
        let g = guided_eps(&m, &x, t, 0, None, std::slice::from_ref(&e)).unwrap();
        assert!(g.concepts[0].masks.phi.data().iter().all(|&v| v == scale));
        let u = m.eps(&x, t, None).unwrap().eps;
        let c = m.eps(&x, t, Some(&cond)).unwrap().eps;
        if !g.eps.bit_eq(&cfg_eps(&u, &c, scale).unwrap()) {
            mismatches += 1;
        }
    }
    if mismatches == 0 {
        Ok("100/100 bitwise equal".into())
    } else {
        Err(format!("{mismatches}/100 differ"))
    }
}

fn solver_reductions() -> Outcome {
    let s = linear(1000);
    let mut bad = 0;
    for i in 0..50u64 {
        let shape = (1, 6, 6);
        let x = normal_field(i, 1, shape);
        let eps = normal_field(i, 2, shape);
        let z = normal_field(i, 3, shape);
        let t = 100 + (i as usize * 37) % 800;
        let tp = t - 40;
        let d = data_prediction(&s, &x, &eps, t).unwrap();
        let prev = PrevEstimate { t: t + 25, x0: d };
        let (a, _) = step_dpmpp_2m_sde(&s, &x, &eps, Some(&prev), t, tp, &z).unwrap();
        let (b, _) = step_dpmpp_2m_sde(&s, &x, &eps, None, t, tp, &z).unwrap();
        let z2 = normal_field(i, 4, shape);
        let c = step_ancestral(&s, &x, &eps, t, tp, 0.0, &z).unwrap();
        let e = step_ancestral(&s, &x, &eps, t, tp, 0.0, &z2).unwrap();
        if !a.bit_eq(&b) || !c.bit_eq(&e) {
            bad += 1;
        }
    }
    if bad == 0 {
        Ok("50/50 cases bitwise".into())
    } else {
        Err(format!("{bad}/50 cases differ"))
    }
}

fn ddpm_marginal() -> Outcome {
    let s = linear(200);
    let (mu, sd) = (0.4f64, 0.6f64);
    let shape = (1, 100, 100);
    let m = AnalyticGmm::new(
        GmmSpec::single(Field::filled(shape, mu as f32), sd).unwrap(),
        s.clone(),
    );
    let g = TimestepGrid::uniform(200, 200, 0.0).unwrap();
    let x_t = normal_field(9, 0, shape);
    let out = generate_ancestral(
        &s,
        &g,
        x_t,
        1.0,
        |x, t| Ok(m.eps(x, t, None)?.eps),
        &mut RngNoise { seed: 9 },
    )
    .unwrap();
    let n = out.len() as f64;
    let mean = out.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = out
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    let detail = format!(
        "mean {mean:.4} (data {mu}), variance {var:.4} (data {:.4})",
        sd * sd
    );
    if (mean - mu).abs() <= 0.05 && (var / (sd * sd) - 1.0).abs() <= 0.05 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn convergence() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = load("convergence.json");
    let opts = RunOptions {
        out: dir.path().into(),
        dump_masks: false,
    };
    let (rep, rows) = cmd_convergence(&cfg, &opts).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let sde: Vec<String> = rows
        .iter()
        .filter(|r| r.solver == "dpmpp-2m-sde")
        .map(|r| format!("{}:{:.3e}", r.steps, r.error))
        .collect();
    let detail = format!("{} ({secs:.2} s)", sde.join(" "));
    if rep.passed() && secs < 5.0 {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", rep.failure.unwrap_or_default()))
    }
}

fn monotonicity() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = load("edit_gmm.json");
    cfg.experiment.scales = vec![0.0, 2.0, 4.0, 8.0, 12.0, 16.0];
    cfg.experiment.seeds = vec![1, 2, 3, 4, 5];
    let opts = RunOptions {
        out: dir.path().into(),
        dump_masks: false,
    };
    let (rep, rows) = cmd_sweep_scale(&cfg, &opts).unwrap();
    let top: Vec<String> = rows
        .iter()
        .filter(|r| r.scale == 16.0)
        .map(|r| format!("{:.3}", r.projection))
        .collect();
    match rep.failure {
        None => Ok(format!(
            "5 seeds nondecreasing; top-scale projections {}",
            top.join(" ")
        )),
        Some(f) => Err(f),
    }
}

fn region_rmse(a: &Field, b: &Field, region: &Field) -> f64 {
    let (c, h, w) = a.shape();
    let mut acc = 0.0;
    let mut n = 0usize;
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                if region.get(0, y, x) != 0.0 {
                    acc += (a.get(ci, y, x) as f64 - b.get(ci, y, x) as f64).powi(2);
                    n += 1;
                }
            }
        }
    }
    (acc / n as f64).sqrt()
}

fn multi_edit_isolation() -> Outcome {
    let cfg = load("edit_gmm.json");
    let run = |edits: Vec<usize>| {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg.clone();
        c.edits = edits.iter().map(|&i| cfg.edits[i].clone()).collect();
        let opts = RunOptions {
            out: dir.path().into(),
            dump_masks: false,
        };
        let r = cmd_edit(&c, &opts).unwrap();
        r.edited.field.sub(&r.reconstruction).unwrap()
    };
    let joint = run(vec![0, 1]);
    let solo_a = run(vec![0]);
    let solo_b = run(vec![1]);
    let region = |y0: usize, x0: usize| {
        Field::from_fn((1, 8, 8), |_, y, x| {
            (y >= y0 && y < y0 + 4 && x >= x0 && x < x0 + 4) as u8 as f32
        })
    };
    let (ra, rb) = (region(0, 0), region(4, 4));
    let ea = region_rmse(&joint, &solo_a, &ra);
    let eb = region_rmse(&joint, &solo_b, &rb);
    let size_a = region_rmse(&solo_a, &Field::zeros(joint.shape()), &ra);
    let detail = format!("region rmse {ea:.2e} / {eb:.2e} (solo delta magnitude {size_a:.3})");
    if ea <= 1e-3 && eb <= 1e-3 && size_a > 0.1 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn percentile_law() -> Outcome {
    let mut bad = Vec::new();
    for &n in &[16usize, 1024, 1025] {
        let v = normal_field(n as u64, 0, (1, 1, n));
        for &pct in &[10usize, 50, 90, 99] {
            let m = threshold_mask(&v, pct as f64 / 100.0).unwrap();
            let got = m.data().iter().filter(|&&x| x != 0.0).count();
            let k = (pct * n).div_ceil(100);
            if got != n - k + 1 {
                bad.push(format!("N={n} lambda=0.{pct:02}: {got} vs {}", n - k + 1));
            }
        }
    }
    if bad.is_empty() {
        Ok("12/12 combinations exact".into())
    } else {
        Err(bad.join("; "))
    }
}

fn mask_intersection() -> Outcome {
    let s = linear(1000);
    let tc = TrainConfig {
        seed: 0,
        steps: 10_000,
        batch: 16,
        lr: 3e-3,
        cond_drop: 0.2,
    };
    let data = ShapeDataset::new(0);
    let start = Instant::now();
    let model = train(
        TinyConfig::toy(1, 32, 32, VOCAB, 1000),
        &s,
        &tc,
        |i| data.training_pair(i),
        |_, _| {},
    )
    .unwrap();
    let train_secs = start.elapsed().as_secs_f64();
    let g = TimestepGrid::uniform(1000, 20, 0.0).unwrap();
    let held_out = ShapeDataset::new(1);
    let summary = evaluate_masks(&model, &s, &g, &held_out, 0..32, 5).unwrap();
    let detail = format!(
        "mean IoU M1 {:.3}, M2 {:.3}, M1*M2 {:.3} ({} rows, trained {train_secs:.0} s)",
        summary.mean_m1,
        summary.mean_m2,
        summary.mean_both,
        summary.rows.len()
    );
    if summary.intersection_wins() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn eval_counts() -> Outcome {
    let mut checks = Vec::new();
    for (skip, n_edits) in [(0.0, 2usize), (0.2, 1), (0.25, 0), (0.0, 0)] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = load("edit_gmm.json");
        cfg.grid.skip = skip;
        cfg.edits.truncate(n_edits);
        let opts = RunOptions {
            out: dir.path().into(),
            dump_masks: false,
        };
        let first = cmd_edit(&cfg, &opts).unwrap().metrics;
        let gen = first.gen_steps;
        checks.push((first.model_eval_count, expected_evals(gen, gen, n_edits)));
        let reused = cmd_edit(&cfg, &opts).unwrap().metrics;
        checks.push((reused.model_eval_count, expected_evals(0, gen, n_edits)));
        let (_, bench) = cmd_bench_evals(&cfg, &opts).unwrap();
        checks.extend(bench.iter().map(|b| (b.evals, b.expected)));
    }
    let dir = tempfile::tempdir().unwrap();
    let cfg = load("edit_gmm.json");
    let opts = RunOptions {
        out: dir.path().into(),
        dump_masks: false,
    };
    let (rep, _) = cmd_variations(&cfg, &opts).unwrap();
    let bad: Vec<String> = checks
        .iter()
        .filter(|(a, b)| a != b)
        .map(|(a, b)| format!("{a} vs {b}"))
        .collect();
    if bad.is_empty() && rep.passed() {
        Ok(format!("{} instrumented runs match", checks.len()))
    } else {
        Err(format!("{}; {:?}", bad.join(", "), rep.failure))
    }
}

fn format_round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let f = normal_field(1, 2, (3, 5, 7));
    let p = dir.path().join("x.lpf");
    write_field(&p, &f).unwrap();
    let field_ok = read_field(&p).unwrap().bit_eq(&f)
        && encode_field(&decode_field(&encode_field(&f).unwrap()).unwrap()).unwrap()
            == encode_field(&f).unwrap();

    let s = linear(1000);
    let m = toy_gmm(&s, (3, 5, 7));
    let g = TimestepGrid::uniform(1000, 12, 0.2).unwrap();
    let src = Conditioning::new("src", vec![2], vec![1]).unwrap();
    let l = invert(&f, &m, &s, &g, 4, Some(src)).unwrap();
    let lp = dir.path().join("x.lpl");
    save_latents(&l, &lp).unwrap();
    let back: EditFriendlyLatents = load_latents(&lp).unwrap();
    let latents_ok = back.encode().unwrap() == l.encode().unwrap()
        && back.x_seq.iter().zip(&l.x_seq).all(|(a, b)| a.bit_eq(b))
        && back.noise == l.noise;

    let other_schedule = NoiseSchedule::build(ScheduleKind::Linear, 1000, 1e-4, 0.021).unwrap();
    let other_model = toy_gmm(&other_schedule, (3, 5, 7));
    let stale_schedule = matches!(
        load_latents_for(&lp, &other_schedule, &m),
        Err(Error::StaleCache(_))
    );
    let stale_model = matches!(
        load_latents_for(&lp, &s, &other_model),
        Err(Error::StaleCache(_))
    );

    let tiny = TinyDenoiser::init(TinyConfig::toy(1, 8, 8, 4, 100), 5).unwrap();
    let wp = dir.path().join("w.lpw");
    save_weights(&tiny.to_weights(), &wp).unwrap();
    let w: Weights = load_weights(&wp).unwrap();
    let reloaded = TinyDenoiser::from_weights(&w).unwrap();
    let weights_ok = w.encode().unwrap() == tiny.to_weights().encode().unwrap()
        && reloaded.fingerprint() == tiny.fingerprint();

    let detail = format!(
        "LPF1 {field_ok}, LPL1 {latents_ok}, LPW1 {weights_ok}, stale schedule rejected {stale_schedule}, stale model rejected {stale_model}"
    );
    if field_ok && latents_ok && weights_ok && stale_schedule && stale_model {
        Ok(detail)
    } else {
        Err(detail)
    }
}

type Criterion = (&'static str, fn() -> Outcome);

#[test]
fn acceptance() {
    let criteria: [Criterion; 12] = [
        ("perfect inversion", perfect_inversion),
        ("ddim inversion gap", ddim_gap),
        ("cfg reduction", cfg_reduction),
        ("solver reductions", solver_reductions),
        ("ddpm marginal", ddpm_marginal),
        ("convergence ordering", convergence),
        ("scale monotonicity", monotonicity),
        ("multi-edit isolation", multi_edit_isolation),
        ("percentile count law", percentile_law),
        ("mask intersection ordering", mask_intersection),
        ("eval-count contract", eval_counts),
        ("format round-trips", format_round_trips),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = f();
        match &outcome {
            Ok(d) => println!("[PASS] {:>2} {name}: {d}", i + 1),
            Err(d) => {
                println!("[FAIL] {:>2} {name}: {d}", i + 1);
                failed.push(*name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
