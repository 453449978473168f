//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs as a plain binary so criteria execute one after another in a single
//! process; the pathway check reads process-wide call counters.
//!
//! Criterion 9 needs a real corpus: set `ROADFUSION_REAL_DATA_ROOT` and
//! optionally `ROADFUSION_REAL_DATA_ADAPTER`, `ROADFUSION_REAL_DATA_EPOCHS`
//! and `ROADFUSION_REAL_DATA_CONFIG` (a TOML run config). The default
//! backbone expects pretrained weights under `ROADFUSION_WEIGHTS_DIR`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roadfusion::adaptation::{adaptor_b_calls, init_model, HeadConfig, ModelState};
use roadfusion::config::{LoadedConfig, RunConfig};
use roadfusion::dataset::{ImageRecord, Label};
use roadfusion::features::{aggregate_patch_features, BackboneSpec};
use roadfusion::metrics::{auroc, average_precision, MetricsReport};
use roadfusion::pipeline::{Run, RunOptions};
use roadfusion::synthesis::{build_triplet, generate_anomalous, synthesis_calls, MaskKind, Procedural, SynthesisConfig};
use roadfusion::toy::{road_texture, toy_run_config, write_toy_dataset, ToySpec};
use roadfusion::training::{truncated_l1, truncated_l1_loss, AnomalousMasking, LossConfig};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(
        elapsed <= Duration::from_secs(limit_s),
        format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 1

fn hinge_oracle(n: &Array2<f64>, a: &Array2<f64>, mask: Option<&Array2<u8>>, tp: f64, tm: f64) -> f64 {
    let mut total = 0.0;
    for ((idx, &dn), &da) in n.indexed_iter().zip(a.iter()) {
        total += (tp - dn).max(0.0);
        let defect = mask.is_none_or(|m| m[idx] > 0);
        total += if defect { (da - tm).max(0.0) } else { (tp - da).max(0.0) };
    }
    total / n.len() as f64
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let n = Array2::from_shape_fn((h, w), |_| rng.random_range(-2.0..2.0));
        let a = Array2::from_shape_fn((h, w), |_| rng.random_range(-2.0..2.0));
        let tp = rng.random_range(0.1..1.0);
        let tm = -rng.random_range(0.1..1.0);
        let all = LossConfig {
            tau_plus: tp,
            tau_minus: tm,
            anomalous_masking: AnomalousMasking::AllLocations,
            ..LossConfig::default()
        };
        let got = truncated_l1_loss(n.view(), a.view(), &all, None).map_err(|e| e.to_string())?;
        worst = worst.max((got - hinge_oracle(&n, &a, None, tp, tm)).abs());
        if i % 2 == 0 {
            let mask = Array2::from_shape_fn((h, w), |_| u8::from(rng.random_bool(0.3)));
            let masked = LossConfig {
                anomalous_masking: AnomalousMasking::MaskOnly,
                ..all
            };
            let got = truncated_l1_loss(n.view(), a.view(), &masked, Some(mask.view())).map_err(|e| e.to_string())?;
            worst = worst.max((got - hinge_oracle(&n, &a, Some(&mask), tp, tm)).abs());
        }
    }
    ensure(worst <= 1e-6, format!("max deviation {worst:e}"))?;
    within(start.elapsed(), 5)?;
    Ok(format!("50 field pairs, max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- 2

fn brute_aggregate(x: &Array3<f32>, p: usize) -> Array3<f32> {
    let (h, w, c) = x.dim();
    let r = (p / 2) as isize;
    Array3::from_shape_fn((h, w, c), |(i, j, k)| {
        let mut sum = 0.0f64;
        let mut n = 0;
        for di in -r..=r {
            for dj in -r..=r {
                let (y, z) = (i as isize + di, j as isize + dj);
                if y >= 0 && z >= 0 && (y as usize) < h && (z as usize) < w {
                    sum += f64::from(x[[y as usize, z as usize, k]]);
                    n += 1;
                }
            }
        }
        (sum / n as f64) as f32
    })
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f32;
    let mut cases = 0;
    for _ in 0..100 {
        let dims = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=4));
        let x = Array3::from_shape_fn(dims, |_| rng.random_range(-3.0f32..3.0));
        for p in [1, 3, 5] {
            let got = aggregate_patch_features(x.view(), p).map_err(|e| e.to_string())?;
            let want = brute_aggregate(&x, p);
            worst = got.iter().zip(&want).fold(worst, |m, (a, b)| m.max((a - b).abs()));
            cases += 1;
        }
    }
    ensure(worst <= 1e-5, format!("max deviation {worst:e}"))?;
    within(start.elapsed(), 10)?;
    Ok(format!("{cases} maps, max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- 3

fn loss_of(m: &ModelState, xn: &Array2<f64>, xa: &Array2<f64>, cfg: &LossConfig, mask: &Array1<u8>) -> (f64, Array1<f64>, Array1<f64>) {
    let mut m = m.clone();
    let pass = m.forward_train(xn.view(), xa.view(), roadfusion::Exec::Sequential).expect("forward");
    let out = truncated_l1(pass.scores_normal.view(), pass.scores_anomalous.view(), cfg, Some(mask.view())).expect("loss");
    (out.value, pass.scores_normal, pass.scores_anomalous)
}

/// Mutable views of every trainable tensor, in a fixed order.
fn params_mut(m: &mut ModelState) -> Vec<(&'static str, &mut [f64])> {
    let d = &mut m.discriminator;
    vec![
        ("a.weight", m.adaptor_a.weight.as_slice_mut().expect("contiguous")),
        ("b.weight", m.adaptor_b.weight.as_slice_mut().expect("contiguous")),
        ("d.layer1", d.layer1.as_slice_mut().expect("contiguous")),
        ("d.gamma", d.gamma.as_slice_mut().expect("contiguous")),
        ("d.beta", d.beta.as_slice_mut().expect("contiguous")),
        ("d.layer2", d.layer2.as_slice_mut().expect("contiguous")),
        ("d.bias", std::slice::from_mut(&mut d.bias)),
    ]
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let (c, hd, rows) = (8, 6, 4);
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut trials = 0;
    for masking in [AnomalousMasking::AllLocations, AnomalousMasking::MaskOnly] {
        let cfg = LossConfig {
            anomalous_masking: masking,
            ..LossConfig::default()
        };
        let mut accepted = 0;
        while accepted < 3 {
            trials += 1;
            if trials > 500 {
                return Err("could not sample points away from the hinge kinks".into());
            }
            let mut m = init_model(HeadConfig { channels: c, hidden: hd }, BackboneSpec::default(), "", rng.random())
                .map_err(|e| e.to_string())?;
            // move the adaptors away from identity so both paths matter
            m.adaptor_a.weight.mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
            m.adaptor_b.weight.mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
            m.discriminator.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
            m.discriminator.beta.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            let xn = Array2::from_shape_fn((rows, c), |_| rng.random_range(-1.0..1.0));
            let xa = Array2::from_shape_fn((rows, c), |_| rng.random_range(-1.0..1.0));
            let mask = Array1::from_shape_fn(rows, |i| u8::from(i % 2 == 0));
            let (_, sn, sa) = loss_of(&m, &xn, &xa, &cfg, &mask);
            let near = sn.iter().any(|s| (s - cfg.tau_plus).abs() <= 0.05)
                || sa.iter().enumerate().any(|(i, s)| {
                    let defect = masking == AnomalousMasking::AllLocations || mask[i] > 0;
                    let tau = if defect { cfg.tau_minus } else { cfg.tau_plus };
                    (s - tau).abs() <= 0.05
                });
            if near {
                continue;
            }
            accepted += 1;

            let mut mm = m.clone();
            let pass = mm.forward_train(xn.view(), xa.view(), roadfusion::Exec::Sequential).map_err(|e| e.to_string())?;
            let out = truncated_l1(pass.scores_normal.view(), pass.scores_anomalous.view(), &cfg, Some(mask.view()))
                .map_err(|e| e.to_string())?;
            let g = mm.backward(&pass, xn.view(), xa.view(), out.d_normal.view(), out.d_anomalous.view(), roadfusion::Exec::Sequential);
            let analytic: Vec<Vec<f64>> = vec![
                g.adaptor_a.iter().copied().collect(),
                g.adaptor_b.iter().copied().collect(),
                g.layer1.iter().copied().collect(),
                g.gamma.to_vec(),
                g.beta.to_vec(),
                g.layer2.to_vec(),
                vec![g.bias],
            ];
            let sizes: Vec<usize> = params_mut(&mut m.clone()).iter().map(|(_, s)| s.len()).collect();
            for (t, &size) in sizes.iter().enumerate() {
                for k in 0..size {
                    let mut plus = m.clone();
                    params_mut(&mut plus)[t].1[k] += h;
                    let mut minus = m.clone();
                    params_mut(&mut minus)[t].1[k] -= h;
                    let numeric = (loss_of(&plus, &xn, &xa, &cfg, &mask).0 - loss_of(&minus, &xn, &xa, &cfg, &mask).0) / (2.0 * h);
                    let a = analytic[t][k];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                    if rel > worst {
                        worst = rel;
                    }
                    checked += 1;
                }
            }
        }
    }
    ensure(worst < 1e-3, format!("max relative error {worst:e}"))?;
    within(start.elapsed(), 30)?;
    Ok(format!("{checked} partial derivatives, max relative error {worst:.1e}"))
}

// ---------------------------------------------------------------- 4

fn brute_auroc(s: &[f64], l: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in l.iter().enumerate() {
        for (j, &lj) in l.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if s[i] > s[j] {
                    wins += 1.0;
                } else if s[i] == s[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn brute_ap(s: &[f64], l: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = s.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let npos = l.iter().filter(|&&v| v).count() as f64;
    let mut prev_r = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let tp = s.iter().zip(l).filter(|(v, y)| **v >= t && **y).count() as f64;
        let fp = s.iter().zip(l).filter(|(v, y)| **v >= t && !**y).count() as f64;
        let r = tp / npos;
        ap += (r - prev_r) * tp / (tp + fp);
        prev_r = r;
    }
    ap
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut worst_mono = 0.0f64;
    for i in 0..200 {
        let n = rng.random_range(2..=100);
        let mut l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        l[0] = true;
        l[1] = false;
        // every third instance draws from a coarse grid to force ties
        let s: Vec<f64> = (0..n)
            .map(|_| if i % 3 == 0 { rng.random_range(0..5) as f64 / 4.0 } else { rng.random_range(-1.0..1.0) })
            .collect();
        let a = auroc(&s, &l).map_err(|e| e.to_string())?;
        let ap = average_precision(&s, &l).map_err(|e| e.to_string())?;
        worst = worst.max((a - brute_auroc(&s, &l)).abs()).max((ap - brute_ap(&s, &l)).abs());
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() + v.powi(3)).collect();
        worst_mono = worst_mono.max((auroc(&t, &l).map_err(|e| e.to_string())? - a).abs());
    }
    ensure(worst <= 1e-9, format!("oracle deviation {worst:e}"))?;
    ensure(worst_mono <= 1e-12, format!("monotone-transform deviation {worst_mono:e}"))?;
    within(start.elapsed(), 10)?;
    Ok(format!("200 instances, oracle deviation {worst:.1e}, monotone deviation {worst_mono:.1e}"))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut max_outside = 0.0f32;
    let mut min_inside = f64::INFINITY;
    for i in 0..100 {
        let size = [32, 48, 64][i % 3];
        let record = ImageRecord {
            id: format!("tex{i}"),
            image: road_texture(size, &mut rng),
            mask: None,
            label: Label::Normal,
            source: PathBuf::new(),
        };
        let cfg = SynthesisConfig {
            mask_kind: [MaskKind::Auto, MaskKind::Blob, MaskKind::Stroke][i % 3],
            ..SynthesisConfig::default()
        };
        let seed = rng.random();
        let t = build_triplet(&record, &cfg, seed).map_err(|e| e.to_string())?;
        let a = generate_anomalous(&t, &Procedural).map_err(|e| e.to_string())?;
        let t2 = build_triplet(&record, &cfg, seed).map_err(|e| e.to_string())?;
        let b = generate_anomalous(&t2, &Procedural).map_err(|e| e.to_string())?;
        let bitwise = a.image.iter().zip(b.image.iter()).all(|(x, y)| x.to_bits() == y.to_bits()) && a.mask == b.mask;
        ensure(bitwise, format!("sample {i} not reproducible"))?;
        let (mut inside, mut n) = (0.0f64, 0usize);
        for ((y, x, c), v) in a.image.indexed_iter() {
            let d = (v - record.image[[y, x, c]]).abs();
            if t.mask[[y, x]] > 0 {
                inside += f64::from(d);
                n += 1;
            } else {
                max_outside = max_outside.max(d);
            }
        }
        min_inside = min_inside.min(inside / n as f64);
    }
    ensure(max_outside <= 0.02, format!("outside-mask delta {max_outside}"))?;
    ensure(min_inside >= 0.01, format!("inside-mask mean delta {min_inside}"))?;
    within(start.elapsed(), 30)?;
    Ok(format!("100 samples, max outside delta {max_outside:.3}, min inside mean delta {min_inside:.3}"))
}

// ---------------------------------------------------------------- 6-8

struct ToyRun {
    run: Run,
    report: MetricsReport,
    digest: String,
    elapsed: Duration,
}

fn toy_run(data: &Path, out: &Path) -> Result<ToyRun, String> {
    let start = Instant::now();
    let run = Run::new(toy_run_config(data, out), RunOptions::default());
    run.generate().map_err(|e| format!("generate: {e}"))?;
    let digest = run.train().map_err(|e| format!("train: {e}"))?.checkpoint_digest;
    let report = run.evaluate().map_err(|e| format!("evaluate: {e}"))?;
    Ok(ToyRun {
        run,
        report,
        digest,
        elapsed: start.elapsed(),
    })
}

fn criterion_6(first: &Result<ToyRun, String>) -> Outcome {
    let t = first.as_ref().map_err(Clone::clone)?;
    let r = &t.report;
    ensure(r.n_images == 40, format!("expected 40 test images, got {}", r.n_images))?;
    ensure(
        r.i_auroc >= 0.90 && r.p_auroc >= 0.85,
        format!("I-AUROC {:.4} (need 0.90), P-AUROC {:.4} (need 0.85)", r.i_auroc, r.p_auroc),
    )?;
    within(t.elapsed, 600)?;
    Ok(format!(
        "I-AUROC {:.4}, P-AUROC {:.4}, {:.1}s",
        r.i_auroc,
        r.p_auroc,
        t.elapsed.as_secs_f64()
    ))
}

fn criterion_7(first: &Result<ToyRun, String>) -> Outcome {
    let t = first.as_ref().map_err(Clone::clone)?;
    ensure(adaptor_b_calls() > 0 && synthesis_calls() > 0, "instrumentation never fired during training")?;
    let (b0, s0) = (adaptor_b_calls(), synthesis_calls());
    let scored = t.run.infer(&[]).map_err(|e| e.to_string())?;
    t.run.evaluate().map_err(|e| e.to_string())?;
    let (db, ds) = (adaptor_b_calls() - b0, synthesis_calls() - s0);
    ensure(db == 0 && ds == 0, format!("{db} adaptor B calls, {ds} synthesis calls"))?;
    Ok(format!("{} test images scored, 0 adaptor B calls, 0 synthesis calls", scored.len()))
}

fn criterion_8(first: &Result<ToyRun, String>, data: &Path, out: &Path) -> Outcome {
    let a = first.as_ref().map_err(Clone::clone)?;
    let b = toy_run(data, out)?;
    ensure(a.digest == b.digest, format!("checkpoint digests differ: {} vs {}", a.digest, b.digest))?;
    ensure(
        a.report.to_key_value() == b.report.to_key_value(),
        "metric reports differ between reruns",
    )?;
    Ok(format!("checkpoint {} and report reproduced", &a.digest[..16]))
}

// ---------------------------------------------------------------- 9

fn criterion_9(out: &Path) -> Option<Outcome> {
    let root = std::env::var("ROADFUSION_REAL_DATA_ROOT").ok().filter(|s| !s.is_empty())?;
    Some((|| {
        let mut cfg = match std::env::var("ROADFUSION_REAL_DATA_CONFIG") {
            Ok(p) => LoadedConfig::load(Path::new(&p), &[]).map_err(|e| e.to_string())?.config,
            Err(_) => RunConfig::default(),
        };
        cfg.output_dir = out.to_string_lossy().into_owned();
        cfg.run_name = "real".into();
        cfg.dataset.root = root.clone();
        if let Ok(a) = std::env::var("ROADFUSION_REAL_DATA_ADAPTER") {
            cfg.dataset.adapter = a;
        }
        if let Some(e) = std::env::var("ROADFUSION_REAL_DATA_EPOCHS").ok().and_then(|s| s.parse().ok()) {
            cfg.train.epochs = e;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        let run = Run::new(cfg, RunOptions::default());
        run.generate().map_err(|e| format!("generate: {e}"))?;
        run.train().map_err(|e| format!("train: {e}"))?;
        let r = run.evaluate().map_err(|e| format!("evaluate: {e}"))?;
        let vals = r.values();
        ensure(
            vals.iter().all(|v| (0.0..=1.0).contains(v)),
            format!("metric outside [0, 1]: {vals:?}"),
        )?;
        Ok(format!("{root}: {vals:.3?}"))
    })())
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let data = tmp.path().join("toy-data");
    let mut lines: Vec<(usize, Option<Outcome>)> = Vec::new();
    let mut report = |n: usize, o: Option<Outcome>| {
        match &o {
            Some(Ok(m)) => println!("criterion {n}: PASS  {m}"),
            Some(Err(m)) => println!("criterion {n}: FAIL  {m}"),
            None => println!("criterion {n}: SKIP  set ROADFUSION_REAL_DATA_ROOT to run"),
        }
        lines.push((n, o));
    };
    report(1, Some(criterion_1()));
    report(2, Some(criterion_2()));
    report(3, Some(criterion_3()));
    report(4, Some(criterion_4()));
    report(5, Some(criterion_5()));
    let first = write_toy_dataset(&data, &ToySpec::default())
        .map_err(|e| e.to_string())
        .and_then(|_| toy_run(&data, &tmp.path().join("run-a")));
    report(6, Some(criterion_6(&first)));
    report(7, Some(criterion_7(&first)));
    report(8, Some(criterion_8(&first, &data, &tmp.path().join("run-b"))));
    report(9, criterion_9(&tmp.path().join("real")));
    let failed = lines.iter().filter(|(_, o)| matches!(o, Some(Err(_)))).count();
    println!("acceptance: {} passed, {failed} failed, {} skipped", lines.iter().filter(|(_, o)| matches!(o, Some(Ok(_)))).count(), lines.iter().filter(|(_, o)| o.is_none()).count());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
