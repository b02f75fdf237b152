//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. The benchmark criteria share a single three-seed ablation.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use disent::ablation::{ablation_suite, AblationConfig, AblationReport};
use disent::dataset::{generate_corpus, is_near_frontal, load_corpus, save_corpus, GenerationConfig, IdentitySplit, PoseLayout};
use disent::eval::{protocol_p1_on_embeddings, rank1, run_protocol_p1, Metric, ProtocolResult};
use disent::morphable::instantiate_shape;
use disent::nn::{save_checkpoint, Mat};
use disent::render::{render, Texture};
use disent::train::{check_objectives, identity_accuracy, train_stage2, train_stage3, Stage2Config, Stage3Config, TrainingSet};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(t: Instant, budget: Duration) -> Result<(), String> {
    ensure(t.elapsed() < budget, format!("took {:.1?}, budget {budget:?}", t.elapsed()))
}

fn shape_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let model = common::random_model(&mut rng);
        let p = common::random_params(&mut rng, &model);
        let got = instantiate_shape(&model, &p).map_err(|e| e.to_string())?;
        let want = common::dense_shape(&model, &p);
        let diff: f64 = got
            .points
            .iter()
            .enumerate()
            .map(|(v, pt)| (0..3).map(|c| (pt[c] - want[(c, v)]).powi(2)).sum::<f64>())
            .sum();
        worst = worst.max(diff.sqrt() / want.norm());
    }
    ensure(worst < 1e-10, format!("max relative error {worst:e}"))?;
    within(t, Duration::from_secs(10))?;
    Ok(format!("100 draws, max relative error {worst:.2e}"))
}

fn gradient_fidelity() -> Outcome {
    let t = Instant::now();
    let mut arch = common::tiny_arch();
    arch.image_size = 8;
    arch.conv_channels = vec![2, 3];
    arch.rich_dim = 6;
    arch.identity_dim = 4;
    arch.nonidentity_dim = 3;
    arch.landmark_dim = 4;
    arch.num_classes = 3;
    arch.recon_hidden = 5;
    let mut worst = Vec::new();
    for seed in 0..3 {
        for c in check_objectives(&arch, 4, 8, 1e-5, seed).map_err(|e| e.to_string())? {
            ensure(!c.report.tensors.is_empty(), format!("{} checked no tensors", c.objective))?;
            worst.push((c.objective, c.report.max_rel_error));
        }
    }
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    ensure(max < 1e-4, format!("max relative error {max:e}: {worst:?}"))?;
    within(t, Duration::from_secs(120))?;
    Ok(format!("multitask, reconstruction and l2 objectives, max relative error {max:.2e}"))
}

fn freeze_conservation(report: &AblationReport) -> Outcome {
    ensure(!report.freeze.is_empty(), "no fine-tuned rows recorded")?;
    let broken: Vec<_> = report.freeze.iter().filter(|f| !f.conserved).collect();
    ensure(broken.is_empty(), format!("frozen tensors changed: {broken:?}"))?;
    Ok(format!(
        "{} full fine-tuning runs kept backbone and identity classifier hashes",
        report.freeze.len()
    ))
}

fn random_scene(rng: &mut ChaCha8Rng, size: usize) -> (Vec<[f64; 2]>, Vec<f64>, Texture) {
    let n = rng.gen_range(1..150);
    let lim = size as f64 + 2.0;
    let points = (0..n).map(|_| [rng.gen_range(-2.0..lim), rng.gen_range(-2.0..lim)]).collect();
    let depth = (0..n).map(|_| rng.gen_range(0..8) as f64 * 0.5).collect();
    let tex = Texture {
        intensity: (0..n).map(|_| rng.gen_range(0.1..1.0)).collect(),
    };
    (points, depth, tex)
}

fn renderer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let err = |e: disent::Error| e.to_string();
    for i in 0..20 {
        let (pts, depth, tex) = random_scene(&mut rng, 16);
        let got = render(&pts, &depth, &tex, 16).map_err(err)?;
        ensure(
            got == common::brute_force_render(&pts, &depth, &tex, 16),
            format!("scene {i} differs from brute force"),
        )?;
    }
    for i in 0..200 {
        let (pts, depth, tex) = random_scene(&mut rng, 16);
        let mut idx: Vec<usize> = (0..pts.len()).collect();
        idx.shuffle(&mut rng);
        let shuffled = render(
            &idx.iter().map(|&k| pts[k]).collect::<Vec<_>>(),
            &idx.iter().map(|&k| depth[k]).collect::<Vec<_>>(),
            &Texture {
                intensity: idx.iter().map(|&k| tex.intensity[k]).collect(),
            },
            16,
        )
        .map_err(err)?;
        ensure(shuffled == render(&pts, &depth, &tex, 16).map_err(err)?, format!("order case {i} differs"))?;
    }
    for i in 0..200 {
        let (x, y) = (rng.gen_range(1.0..14.0), rng.gen_range(1.0..14.0));
        let near = rng.gen_range(0.1..10.0);
        let far = near - rng.gen_range(0.01..5.0);
        let (a, b) = (rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0));
        let img = render(&[[x, y], [x, y]], &[far, near], &Texture { intensity: vec![a, b] }, 16).map_err(err)?;
        let (c, r) = (f64::round(x) as usize, f64::round(y) as usize);
        ensure(img.get(r, c) == b as f32, format!("occlusion case {i}: nearer vertex hidden"))?;
    }
    Ok("20 scenes equal brute force, 200 order and 200 occlusion cases".into())
}

fn overfit() -> Outcome {
    let t = Instant::now();
    let mut cfg = GenerationConfig::base();
    cfg.num_identities = 10;
    cfg.poses = PoseLayout::FrontalHeavy { poses: 20, sigma_deg: 25.0 };
    let corpus = generate_corpus(&cfg, 5).map_err(|e| e.to_string())?;
    ensure(corpus.len() == 200, format!("corpus has {} images", corpus.len()))?;
    let set = TrainingSet::merge(&[&corpus]).map_err(|e| e.to_string())?;
    let s2 = Stage2Config {
        epochs: 200,
        decay_every: 1000,
        ..Stage2Config::default()
    };
    let (params, log) = train_stage2(&set, &AblationConfig::default().arch, &s2).map_err(|e| e.to_string())?;
    let acc = identity_accuracy(&params, &set).map_err(|e| e.to_string())?;
    let first = log
        .epochs
        .iter()
        .position(|e| e.train_acc.is_some_and(|a| a >= 0.99))
        .map_or("never".into(), |e| (e + 1).to_string());
    ensure(acc >= 0.99, format!("training identity accuracy {acc:.4}"))?;
    within(t, Duration::from_secs(180))?;
    Ok(format!(
        "accuracy {acc:.4} after 200 epochs, running batch accuracy first >= 0.99 at epoch {first}, {:.0?}",
        t.elapsed()
    ))
}

fn benchmark() -> Result<AblationReport, String> {
    let t = Instant::now();
    let base = generate_corpus(&GenerationConfig::base(), 1).map_err(|e| e.to_string())?;
    let target = generate_corpus(&GenerationConfig::target(), 2).map_err(|e| e.to_string())?;
    let report = ablation_suite(&base, &target, &[1, 2, 3], &AblationConfig::default(), &mut |m| {
        eprintln!("[{:>7.1}s] {m}", t.elapsed().as_secs_f64())
    })
    .map_err(|e| e.to_string())?;
    for r in &report.mean {
        let bins: Vec<String> = r.bins.iter().map(|b| b.map_or("-".into(), |v| format!("{v:.3}"))).collect();
        eprintln!("  {:8} {}  avg {:.4}", r.model, bins.join(" "), r.average);
    }
    for l in &report.leakage {
        eprintln!("  leakage {:8} seed {} ratio {:.3}", l.model, l.seed, l.result.ratio);
    }
    within(t, Duration::from_secs(45 * 60))?;
    Ok(report)
}

fn ablation_ordering(report: &AblationReport) -> Outcome {
    let avg = |m: &str| report.mean_row(m).map(|r| r.average).ok_or(format!("missing row {m}"));
    let (ss, msmt, l2, sr) = (avg("SS")?, avg("MSMT")?, avg("MSMT+L2")?, avg("MSMT+SR")?);
    let summary = format!("SS {ss:.4}, MSMT {msmt:.4}, MSMT+L2 {l2:.4}, MSMT+SR {sr:.4}");
    ensure(sr >= l2 && l2 >= msmt && msmt >= ss, format!("ordering violated: {summary}"))?;
    ensure(sr - msmt >= 0.01, format!("MSMT+SR leads MSMT by {:.4}: {summary}", sr - msmt))?;
    let (a, b) = (report.mean_row("MSMT+SR").unwrap(), report.mean_row("MSMT").unwrap());
    let gaps: Vec<f64> = a.bins.iter().zip(&b.bins).map(|(x, y)| x.unwrap_or(0.0) - y.unwrap_or(0.0)).collect();
    let widest = (0..gaps.len()).max_by(|&i, &j| gaps[i].total_cmp(&gaps[j])).unwrap();
    ensure(widest >= 4, format!("largest gain in the {}-degree bin: {gaps:?}", 15 * (widest + 1)))?;
    Ok(format!("{summary}, largest gain {:.3} in the {}-degree bin", gaps[widest], 15 * (widest + 1)))
}

fn disentanglement(report: &AblationReport) -> Outcome {
    let ratio = report.mean_leakage_ratio("MSMT+SR").ok_or("no MSMT+SR leakage rows")?;
    let msmt = report.mean_leakage_ratio("MSMT").unwrap_or(f64::NAN);
    ensure(ratio >= 2.0, format!("mean MSMT+SR leakage ratio {ratio:.3} (MSMT {msmt:.3})"))?;
    Ok(format!("mean MSMT+SR leakage ratio {ratio:.3} (MSMT {msmt:.3})"))
}

fn protocol_mechanics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let err = |e: disent::Error| e.to_string();
    let (e, labels, yaws) = common::random_embeddings(&mut rng, 6, 12, 8);
    for metric in [Metric::Cosine, Metric::Euclidean] {
        let r = rank1(&e, &labels, &e, &labels, &yaws, metric).map_err(err)?;
        ensure(r.bins.iter().all(|b| *b == Some(1.0)), format!("probe = gallery gave {:?}", r.bins))?;
    }
    let mut corpus = common::sweep_corpus(4, 2);
    corpus.samples.retain(|s| !(is_near_frontal(s.yaw()) && s.yaw() > 0.01));
    corpus.manifest.num_samples = corpus.samples.len();
    let noisy = Mat::from_vec(corpus.len(), 6, common::gaussian_vec(&mut rng, corpus.len() * 6, 1.0)).map_err(err)?;
    let forced = protocol_p1_on_embeddings(&noisy, &corpus, 10, &mut rng, Metric::Cosine).map_err(err)?;
    ensure(forced.std_average == 0.0, format!("forced galleries std {}", forced.std_average))?;
    ensure(
        forced.std_bins.iter().all(|s| *s == Some(0.0)),
        format!("forced galleries bin std {:?}", forced.std_bins),
    )?;
    for i in 0..5 {
        let ids = rng.gen_range(2..8);
        let (g, gl, _) = common::random_embeddings(&mut rng, ids, 2, 5);
        let (p, pl, py) = common::random_embeddings(&mut rng, ids, 9, 5);
        let got = rank1(&g, &gl, &p, &pl, &py, Metric::Cosine).map_err(err)?;
        ensure(
            got.bins == common::brute_force_rank1(&g, &gl, &p, &pl, &py, Metric::Cosine),
            format!("instance {i} differs from brute force"),
        )?;
    }
    Ok("probe = gallery scores 1.0 everywhere, forced P1 std 0, 5 instances equal brute force".into())
}

/// Generate, train and evaluate into `dir`; returns the three artifact paths.
fn pipeline(dir: &std::path::Path) -> Result<[std::path::PathBuf; 3], String> {
    let err = |e: disent::Error| e.to_string();
    let mut gen = common::small_generation("target", 10, PoseLayout::Sweep { step_deg: 5.0 }, 16);
    gen.texture_seed = 3;
    let corpus_path = dir.join("corpus.bin");
    save_corpus(&generate_corpus(&gen, 4).map_err(err)?, &corpus_path).map_err(err)?;
    let corpus = load_corpus(&corpus_path).map_err(err)?;
    let split = IdentitySplit::new(10, 2, 3, 0).map_err(err)?;
    let train = corpus.select_identities(&split.train);
    let set = TrainingSet::merge(&[&train]).map_err(err)?;
    let s2 = Stage2Config {
        epochs: 2,
        ..Stage2Config::default()
    };
    let (msmt, _) = train_stage2(&set, &common::tiny_arch(), &s2).map_err(err)?;
    let s3 = Stage3Config {
        max_epochs: 2,
        patience: 2,
        val_trials: 2,
        ..Stage3Config::default()
    };
    let (sr, _) = train_stage3(&msmt, &train, set.offsets[0], &corpus.select_identities(&split.validation), &s3).map_err(err)?;
    let ckpt = dir.join("checkpoint.bin");
    save_checkpoint(&sr, Default::default(), &ckpt).map_err(err)?;
    let result: ProtocolResult = run_protocol_p1(
        &corpus.select_identities(&split.test),
        &sr,
        5,
        &mut ChaCha8Rng::seed_from_u64(0),
        Metric::Cosine,
    )
    .map_err(err)?;
    let csv = dir.join("result.csv");
    result.write_csv("MSMT+SR", &csv).map_err(err)?;
    Ok([corpus_path, ckpt, csv])
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let (pa, pb) = (pipeline(a.path())?, pipeline(b.path())?);
    for (x, y) in pa.iter().zip(&pb) {
        let (bx, by) = (std::fs::read(x).map_err(|e| e.to_string())?, std::fs::read(y).map_err(|e| e.to_string())?);
        ensure(
            !bx.is_empty() && bx == by,
            format!("{} differs between runs", x.file_name().unwrap().to_string_lossy()),
        )?;
    }
    Ok("corpus, checkpoint and metric CSV are byte-identical across two runs".into())
}

fn invariances() -> Outcome {
    let err = |e: disent::Error| e.to_string();
    let corpus = common::sweep_corpus(4, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..10 {
        let dim = 6;
        let e = Mat::from_vec(corpus.len(), dim, common::gaussian_vec(&mut rng, corpus.len() * dim, 1.0)).map_err(err)?;
        let q = DMatrix::from_vec(dim, dim, common::gaussian_vec(&mut rng, dim * dim, 1.0)).qr().q();
        let x = DMatrix::from_row_slice(e.rows, e.cols, &e.data) * q;
        let rotated = Mat::from_vec(e.rows, e.cols, (0..e.rows).flat_map(|r| x.row(r).iter().copied().collect::<Vec<_>>()).collect()).map_err(err)?;
        let mut rescaled = e.clone();
        for r in 0..e.rows {
            let s = rng.gen_range(0.01..100.0);
            rescaled.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        for metric in [Metric::Cosine, Metric::Euclidean] {
            let run = |m: &Mat| protocol_p1_on_embeddings(m, &corpus, 4, &mut ChaCha8Rng::seed_from_u64(case), metric);
            ensure(
                run(&e).map_err(err)? == run(&rotated).map_err(err)?,
                format!("case {case}: rotation changed {metric:?} results"),
            )?;
        }
        let run = |m: &Mat| protocol_p1_on_embeddings(m, &corpus, 4, &mut ChaCha8Rng::seed_from_u64(case), Metric::Cosine);
        ensure(
            run(&e).map_err(err)? == run(&rescaled).map_err(err)?,
            format!("case {case}: rescaling changed cosine results"),
        )?;
    }
    Ok("10 random rotations and rescalings leave results unchanged".into())
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    })
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "shape oracle", guarded(shape_oracle)),
        (2, "gradient fidelity", guarded(gradient_fidelity)),
        (4, "renderer z-buffer", guarded(renderer)),
        (5, "overfit sanity", guarded(overfit)),
        (8, "protocol mechanics", guarded(protocol_mechanics)),
        (9, "determinism", guarded(determinism)),
        (10, "rank-1 invariances", guarded(invariances)),
    ];
    let report = catch_unwind(benchmark).unwrap_or_else(|_| Err("benchmark panicked".into()));
    let with_report = |f: fn(&AblationReport) -> Outcome| match &report {
        Ok(r) => guarded(|| f(r)),
        Err(e) => Err(format!("benchmark failed: {e}")),
    };
    results.push((3, "freeze conservation", with_report(freeze_conservation)));
    results.push((6, "ablation ordering", with_report(ablation_ordering)));
    results.push((7, "disentanglement direction", with_report(disentanglement)));
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, name, r) in &results {
        match r {
            Ok(m) => println!("PASS criterion {n:>2} {name}: {m}"),
            Err(m) => {
                failed += 1;
                println!("FAIL criterion {n:>2} {name}: {m}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", results.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", results.len());
}
