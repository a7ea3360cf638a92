//! Acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so every PASS/FAIL line is printed.
//! `ACCEPTANCE_ONLY=3,6` restricts the run to the listed criteria.

use std::panic;
use std::time::{Duration, Instant};

use rand::Rng;
use trupnet::data::{synth_dataset, Sample};
use trupnet::fps::{self, measure_fps, MonotonicClock, StubClock};
use trupnet::gradcheck;
use trupnet::metrics::{self, metrics_from_counts, MetricReport};
use trupnet::nn::bilinear_upsample;
use trupnet::params::ParamInit;
use trupnet::pvt::SpatialReductionAttention;
use trupnet::train::{TrainConfig, Trainer};
use trupnet::{rng, Ctx, Mode, ModelConfig, ParamStore, Tape, Tensor, TransRUPNet};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib<T>(r: trupnet::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn reporting_surface() -> Result<String, String> {
    // Reproducing the reported table values needs pretrained weights and the
    // clinical datasets; what is checked here is that every reported column
    // exists in the evaluation and throughput outputs.
    let report = lib(MetricReport::new(vec!["a".into()], vec![metrics_from_counts(3, 1, 1)]))?;
    let header = report.to_csv().lines().next().unwrap_or_default().to_string();
    ensure(header == "image,dice,iou,recall,precision,f2", || format!("csv header {header}"))?;
    let stats = lib(measure_fps(|_| Ok(()), &[1, 3, 4, 4], 0, 2, &mut StubClock::every_ms(10.0)))?;
    ensure(stats.to_kv().contains("fps="), || "fps.txt lacks fps".into())?;
    Ok("not reproduced by design; mDSC/mIoU/recall/precision/F2/FPS outputs present".into())
}

fn gradient_suite() -> Result<String, String> {
    let start = Instant::now();
    let rows = lib(gradcheck::run_suite(1000, 20, 10))?;
    let secs = start.elapsed().as_secs_f64();
    let worst = rows
        .iter()
        .max_by(|a, b| a.max_violation.total_cmp(&b.max_violation))
        .expect("non-empty suite");
    let failed: Vec<_> = rows.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    ensure(failed.is_empty(), || format!("failing ops: {failed:?}"))?;
    ensure(rows.iter().all(|r| r.seeds >= 20), || "fewer than 20 seeds".into())?;
    let model = rows.iter().find(|r| r.name == "tiny_model").expect("model row");
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{} ops + tiny model ({} params), 20 seeds each, worst {} at {:.2e}, {secs:.1}s",
        rows.len() - 1,
        model.checked,
        worst.name,
        worst.max_violation
    ))
}

fn metric_oracle() -> Result<String, String> {
    let mut r = rng::seeded(3);
    let (mut worst, mut worst_identity) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let density = r.random_range(0.0..1.0);
        let mut draw = || Tensor::from_fn(&[16, 16], |_| r.random_bool(density) as u8 as f32);
        let (pred, gt) = (draw(), draw());
        // independent per-pixel count over the 2D grid
        let (mut tp, mut fp, mut fneg) = (0.0f64, 0.0f64, 0.0f64);
        for y in 0..16 {
            for x in 0..16 {
                let (p, g) = (pred.data()[y * 16 + x] > 0.5, gt.data()[y * 16 + x] > 0.5);
                tp += (p && g) as u8 as f64;
                fp += (p && !g) as u8 as f64;
                fneg += (!p && g) as u8 as f64;
            }
        }
        let e = 1e-7;
        let prec = (tp + e) / (tp + fp + e);
        let rec = (tp + e) / (tp + fneg + e);
        let oracle = [
            (2.0 * tp + e) / (2.0 * tp + fp + fneg + e),
            (tp + e) / (tp + fp + fneg + e),
            rec,
            prec,
            (5.0 * prec * rec + e) / (4.0 * prec + rec + e),
        ];
        let m = lib(metrics::mask_metrics(&pred, &gt))?;
        for (a, b) in m.as_array().iter().zip(oracle) {
            worst = worst.max((a - b).abs());
        }
        worst_identity = worst_identity.max((m.dice - 2.0 * m.iou / (1.0 + m.iou)).abs());
    }
    ensure(worst <= 1e-6, || format!("metric deviation {worst:e}"))?;
    ensure(worst_identity <= 1e-5, || format!("dice/iou identity off by {worst_identity:e}"))?;
    Ok(format!("1000 pairs, max deviation {worst:.1e}, identity gap {worst_identity:.1e}"))
}

fn overfit() -> Result<String, String> {
    let start = Instant::now();
    let data: Vec<Sample> = lib(synth_dataset(8, 64, 0))?;
    let model = lib(TransRUPNet::new(ModelConfig::toy(), 0))?;
    let config = TrainConfig {
        lr: 1e-4,
        batch_size: 8,
        epochs: 300,
        seed: 0,
        checkpoint_every: 0,
        augment: false,
    };
    let mut trainer = lib(Trainer::new(model, config))?;
    let mut best = 0.0f64;
    for epoch in 1..=300 {
        lib(trainer.train_epoch(&data, None))?;
        if epoch % 5 == 0 {
            let dice = lib(trainer.mean_dice(&data))?;
            best = best.max(dice);
            if dice >= 0.95 {
                let secs = start.elapsed().as_secs_f64();
                ensure(secs < 600.0, || format!("reached {dice:.4} at epoch {epoch} but took {secs:.0}s"))?;
                return Ok(format!("train mDSC {dice:.4} at epoch {epoch}, {secs:.0}s"));
            }
        }
        if start.elapsed() > Duration::from_secs(600) {
            return Err(format!("time budget spent at epoch {epoch}, best mDSC {best:.4}"));
        }
    }
    Err(format!("best train mDSC {best:.4} after 300 epochs"))
}

fn shape_contract() -> Result<String, String> {
    let sizes = [32, 64, 96, 128];
    let toy = lib(TransRUPNet::new(ModelConfig::toy(), 1))?;
    let default = lib(TransRUPNet::new(ModelConfig::default(), 1))?;
    let mut checked = 0;
    for (model, pairs) in [
        (&toy, sizes.iter().flat_map(|&h| sizes.iter().map(move |&w| (h, w))).collect::<Vec<_>>()),
        (&default, sizes.iter().map(|&s| (s, s)).collect()),
    ] {
        let rc = model.config().reduce_channels;
        for (h, w) in pairs {
            let x = Tensor::uniform(&[2, 3, h, w], 0.0, 1.0, &mut rng::seeded((h * 1000 + w) as u64));
            let mut ctx = Ctx::inference(model.params());
            let xv = ctx.tape.constant(x);
            let tr = lib(model.trace(&mut ctx, xv))?;
            let out = ctx.tape.value(tr.probs);
            ensure(out.shape() == [2, 1, h, w], || format!("{h}x{w}: output {:?}", out.shape()))?;
            ensure(out.data().iter().all(|&p| p > 0.0 && p < 1.0), || format!("{h}x{w}: value outside (0,1)"))?;
            let cs = ctx.tape.shape(tr.concat);
            ensure(cs[1] == 4 * rc, || format!("{h}x{w}: concat has {} channels", cs[1]))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} (model, H, W) cases, concat = 4 x reduce"))
}

/// Direct evaluation of the half-pixel formula.
fn bilinear_oracle(x: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |i: usize, n_in: usize, n_out: usize| {
        let s = (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
        let s = s.clamp(0.0, (n_in - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(n_in - 1), s - lo as f64)
    };
    let mut out = Vec::new();
    for i in 0..oh {
        let (y0, y1, fy) = coord(i, h, oh);
        for j in 0..ow {
            let (x0, x1, fx) = coord(j, w, ow);
            let v = |y: usize, xx: usize| x[y * w + xx] as f64;
            out.push(
                (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1)),
            );
        }
    }
    out
}

fn bilinear() -> Result<String, String> {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        for (h, w, oh, ow) in [(2, 2, 4, 4), (3, 5, 7, 11)] {
            let x = Tensor::randn(&[1, 1, h, w], &mut rng::seeded(seed));
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = lib(bilinear_upsample(&mut tape, xv, oh, ow))?;
            for (a, b) in tape.value(y).data().iter().zip(bilinear_oracle(x.data(), h, w, oh, ow)) {
                worst = worst.max((*a as f64 - b).abs());
            }
        }
    }
    ensure(worst <= 1e-6, || format!("max deviation {worst:e}"))?;
    Ok(format!("2x2->4x4 and 3x5->7x11 over 50 seeds, max deviation {worst:.1e}"))
}

fn fps_harness() -> Result<String, String> {
    let stub = lib(measure_fps(|_| Ok(()), &[1, 3, 8, 8], 5, 100, &mut StubClock::every_ms(21.25)))?;
    ensure((stub.fps - 47.06).abs() <= 0.01, || format!("stub fps {}", stub.fps))?;
    let model = lib(TransRUPNet::new(ModelConfig::default(), 0))?;
    // 64x64 keeps two real runs within a few seconds on one core
    let run = || lib(fps::bench_model(&model, (64, 64), 2, 10, &mut MonotonicClock::default()));
    let (a, b) = (run()?, run()?);
    let spread = (a.fps - b.fps).abs() / a.fps.max(b.fps);
    ensure(spread <= 0.2, || format!("real runs {:.2} and {:.2} fps differ by {:.0}%", a.fps, b.fps, spread * 100.0))?;
    Ok(format!(
        "stub {:.4} fps; real 64x64 runs {:.2} / {:.2} fps ({:.1}% apart)",
        stub.fps,
        a.fps,
        b.fps,
        spread * 100.0
    ))
}

fn small_trainer(seed: u64) -> trupnet::Result<Trainer> {
    let model = TransRUPNet::new(ModelConfig::tiny(), seed)?;
    Trainer::new(
        model,
        TrainConfig {
            lr: 1e-3,
            batch_size: 3,
            epochs: 4,
            seed,
            checkpoint_every: 0,
            augment: true,
        },
    )
}

fn determinism() -> Result<String, String> {
    let data = lib(synth_dataset(6, 32, 4))?;
    let trace = || -> trupnet::Result<Vec<u32>> {
        let mut t = small_trainer(11)?;
        let mut losses = Vec::new();
        while losses.len() < 5 {
            losses.extend(t.train_epoch(&data, None)?.step_losses);
        }
        Ok(losses[..5].iter().map(|l| l.to_bits()).collect())
    };
    let (a, b) = (lib(trace())?, lib(trace())?);
    ensure(a == b, || "5-step loss traces differ".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut straight = lib(small_trainer(12))?;
    let mut first = lib(straight.train_epoch(&data, None))?.step_losses;
    first.extend(lib(straight.train_epoch(&data, None))?.step_losses);
    first.extend(lib(straight.train_epoch(&data, None))?.step_losses);

    let mut interrupted = lib(small_trainer(12))?;
    let mut second = lib(interrupted.train_epoch(&data, None))?.step_losses;
    lib(interrupted.save_checkpoint(dir.path()))?;
    drop(interrupted);
    let mut resumed = lib(Trainer::restore(dir.path()))?;
    second.extend(lib(resumed.train_epoch(&data, None))?.step_losses);
    second.extend(lib(resumed.train_epoch(&data, None))?.step_losses);

    let bits = |v: &[f32]| v.iter().map(|l| l.to_bits()).collect::<Vec<_>>();
    ensure(bits(&first) == bits(&second), || "resumed trace differs".into())?;
    let params_equal = straight
        .model
        .params()
        .ids()
        .all(|id| straight.model.params().get(id) == resumed.model.params().get(id));
    ensure(params_equal, || "final parameters differ".into())?;
    Ok(format!(
        "5-step trace bitwise equal; {} steps across a checkpoint after epoch 1 equal, params equal",
        first.len()
    ))
}

fn sra_equivalence() -> Result<String, String> {
    let d = 8;
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(seed);
        let attn = SpatialReductionAttention::new(&mut ParamInit { store: &mut store, rng: &mut r }, "a", d, 1, 1);
        // non-zero biases so they take part in the comparison
        for name in ["a.q.bias", "a.k.bias", "a.v.bias", "a.proj.bias"] {
            let id = store.find(name).expect("bias exists");
            lib(store.set(id, Tensor::randn(&[d], &mut r)))?;
        }
        let x = Tensor::randn(&[1, 8, d], &mut r);
        let mut ctx = Ctx::new(&store, Mode::Eval, false);
        let xv = ctx.tape.constant(x.clone());
        let y = lib(attn.forward(&mut ctx, xv, 2, 4))?;
        let got = ctx.tape.value(y).data().to_vec();

        let p = |n: &str| store.get(store.find(n).expect("param")).data().to_vec();
        let lin = |w: &[f32], b: &[f32], rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|row| (0..d).map(|o| b[o] as f64 + (0..d).map(|i| w[o * d + i] as f64 * row[i]).sum::<f64>()).collect())
                .collect()
        };
        let xs: Vec<Vec<f64>> = (0..8).map(|t| (0..d).map(|i| x.data()[t * d + i] as f64).collect()).collect();
        let q = lin(&p("a.q.weight"), &p("a.q.bias"), &xs);
        let k = lin(&p("a.k.weight"), &p("a.k.bias"), &xs);
        let v = lin(&p("a.v.weight"), &p("a.v.bias"), &xs);
        let mut ctx_rows = Vec::new();
        for qi in &q {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            ctx_rows.push((0..d).map(|c| e.iter().zip(&v).map(|(w, vj)| w / z * vj[c]).sum()).collect::<Vec<f64>>());
        }
        let want = lin(&p("a.proj.weight"), &p("a.proj.bias"), &ctx_rows);
        for (t, row) in want.iter().enumerate() {
            for c in 0..d {
                worst = worst.max((got[t * d + c] as f64 - row[c]).abs());
            }
        }
    }
    ensure(worst <= 1e-5, || format!("max deviation {worst:e}"))?;
    Ok(format!("20 seeds, 8 tokens, dim 8, max deviation {worst:.1e}"))
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let checks: [(usize, &str, Check); 9] = [
        (1, "reported-number reproduction (out of scope)", reporting_surface),
        (2, "gradient suite", gradient_suite),
        (3, "metric oracle", metric_oracle),
        (4, "overfit toy model", overfit),
        (5, "shape contract", shape_contract),
        (6, "bilinear oracle", bilinear),
        (7, "FPS harness", fps_harness),
        (8, "determinism and continuation", determinism),
        (9, "SRA equivalence", sra_equivalence),
    ];
    let mut failures = 0;
    for (n, name, check) in checks {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {n}: {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failures += 1;
                println!("FAIL criterion {n}: {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
