//! Subcommand implementations. Every command writes the resolved config into
//! each directory it produces.

use std::path::{Path, PathBuf};

use disent::ablation::ablation_suite;
use disent::container::{sha256_hex, Container};
use disent::dataset::{generate_corpus_with_model, load_corpus, save_corpus, Corpus, IdentitySplit, Protocol};
use disent::eval::{embed_corpus, export_embeddings, pose_leakage_probe, protocol_p1_on_embeddings, protocol_p2_on_embeddings};
use disent::morphable::{pose_sweep, FaceParams, MorphableModel};
use disent::nn::{params_from_container, save_checkpoint, ModelParams};
use disent::render::SampleRenderer;
use disent::train::{check_objectives, fine_tune_softmax, train_l2, train_stage2, train_stage3, Stage2Config, TrainingLog, TrainingSet};
use disent::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::{json, Map, Value};

use crate::config::ExperimentConfig;

type Result<T> = std::result::Result<T, Error>;

pub const CHECKPOINT: &str = "checkpoint.bin";

/// Trained model variants and the directory each lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Model {
    /// Single-source softmax on the base corpus.
    Ss,
    /// `ss` fine-tuned with softmax on the target training identities.
    Ssft,
    /// Multi-task model on base plus target training identities.
    Stage2,
    /// Stage 2 fine-tuned with self and cross reconstruction.
    Stage3,
    /// Stage 2 fine-tuned with the L2 pair baseline.
    L2,
}

impl Model {
    pub fn dir(self) -> &'static str {
        match self {
            Model::Ss => "ss",
            Model::Ssft => "ssft",
            Model::Stage2 => "stage2",
            Model::Stage3 => "stage3",
            Model::L2 => "l2",
        }
    }
}

struct Run {
    cfg: ExperimentConfig,
    root: PathBuf,
}

impl Run {
    fn new(cfg: ExperimentConfig) -> Result<Self> {
        let root = cfg.output_dir();
        cfg.snapshot(&root)?;
        Ok(Self { cfg, root })
    }

    fn dir(&self, rel: &str) -> Result<PathBuf> {
        let d = self.root.join(rel);
        self.cfg.snapshot(&d)?;
        Ok(d)
    }

    fn corpus(&self, name: &str) -> Result<Corpus> {
        let p = self.root.join("corpus").join(format!("{name}.bin"));
        if !p.exists() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{} not found; run `generate` first", p.display()),
            )));
        }
        let c = load_corpus(&p)?;
        let want = if name == "base" {
            &self.cfg.generation.base
        } else {
            &self.cfg.generation.target
        };
        if &c.manifest.generation != want {
            return Err(Error::Config(format!(
                "{} was generated with a different config; rerun `generate`",
                p.display()
            )));
        }
        Ok(c)
    }

    fn split(&self, target: &Corpus) -> Result<IdentitySplit> {
        let s = &self.cfg.split;
        IdentitySplit::new(target.num_identities(), s.validation_identities, s.test_identities, s.seed)
    }

    fn checkpoint_path(&self, model: Model) -> PathBuf {
        self.root.join(model.dir()).join(CHECKPOINT)
    }

    /// Loads a prerequisite checkpoint. Its absence is a configuration error:
    /// the command was asked to run out of order.
    fn require(&self, model: Model, why: &str) -> Result<(ModelParams, Map<String, Value>)> {
        let p = self.checkpoint_path(model);
        if !p.exists() {
            return Err(Error::Config(format!("{why} needs the `{}` checkpoint at {}", model.dir(), p.display())));
        }
        load_with_manifest(&p)
    }
}

fn load_with_manifest(path: &Path) -> Result<(ModelParams, Map<String, Value>)> {
    let c = Container::load(path)?;
    Ok((params_from_container(&c)?, c.manifest.clone()))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn save_model(run: &Run, model: Model, params: &ModelParams, log: &TrainingLog, extra: Map<String, Value>) -> Result<PathBuf> {
    let dir = run.dir(model.dir())?;
    let mut extra = extra;
    extra.insert("model".into(), model.dir().into());
    extra.insert("best_epoch".into(), json!(log.best_epoch));
    let path = dir.join(CHECKPOINT);
    save_checkpoint(params, extra, &path)?;
    log.write_csv(&dir.join("log.csv"))?;
    Ok(path)
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

pub fn generate(cfg: ExperimentConfig) -> Result<()> {
    let run = Run::new(cfg)?;
    let g = &run.cfg.generation;
    let model = MorphableModel::generate(&g.base.model)?;
    let dir = run.dir("corpus")?;
    for (name, gc, seed) in [("base", &g.base, g.base_seed), ("target", &g.target, g.target_seed)] {
        let c = generate_corpus_with_model(gc, &model, seed)?;
        let p = dir.join(format!("{name}.bin"));
        save_corpus(&c, &p)?;
        println!("corpus={name} samples={} identities={} sha256={}", c.len(), c.num_identities(), file_hash(&p)?);
    }
    let target = run.corpus("target")?;
    write_json(&dir.join("split.json"), &run.split(&target)?)?;
    Ok(())
}

fn stage2_extra(set: &TrainingSet, sources: &[&str]) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("sources".into(), json!(sources));
    m.insert("label_offsets".into(), json!(set.offsets));
    m
}

fn report_log(model: Model, path: &Path, log: &TrainingLog) -> Result<()> {
    let last = log.epochs.last();
    println!(
        "model={} epochs={} best_epoch={} loss={} checkpoint={} sha256={}",
        model.dir(),
        log.epochs.len(),
        log.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "-".into()),
        last.map(|e| format!("{:.6}", e.terms.total)).unwrap_or_default(),
        path.display(),
        file_hash(path)?
    );
    Ok(())
}

pub fn train(cfg: ExperimentConfig, model: Model) -> Result<()> {
    let run = Run::new(cfg)?;
    let c = &run.cfg;
    // Prerequisite checkpoints are checked before any corpus is read.
    let prior = match model {
        Model::Ssft => Some(run.require(Model::Ss, "train --stage ssft")?),
        Model::Stage3 => Some(run.require(Model::Stage2, "train --stage 3")?),
        Model::L2 => Some(run.require(Model::Stage2, "train --stage l2")?),
        _ => None,
    };
    let target = run.corpus("target")?;
    let split = run.split(&target)?;
    let target_train = target.select_identities(&split.train);
    let (params, log, extra) = match model {
        Model::Ss => {
            let base = run.corpus("base")?;
            let set = TrainingSet::merge(&[&base])?;
            let s2 = Stage2Config {
                lambda_p: 0.0,
                lambda_l: 0.0,
                ..c.stage2.clone()
            };
            let (p, log) = train_stage2(&set, &c.arch, &s2)?;
            (p, log, stage2_extra(&set, &["base"]))
        }
        Model::Ssft => {
            let (ss, _) = prior.expect("loaded above");
            let set = TrainingSet::merge(&[&target_train])?;
            let ft = Stage2Config {
                epochs: c.ssft.epochs,
                ..c.stage2.clone()
            };
            let (p, log) = fine_tune_softmax(&ss, &set, &ft)?;
            (p, log, stage2_extra(&set, &["target"]))
        }
        Model::Stage2 => {
            let base = run.corpus("base")?;
            let set = TrainingSet::merge(&[&base, &target_train])?;
            let (p, log) = train_stage2(&set, &c.arch, &c.stage2)?;
            (p, log, stage2_extra(&set, &["base", "target"]))
        }
        Model::Stage3 | Model::L2 => {
            let (msmt, manifest) = prior.expect("loaded above");
            let offset = manifest
                .get("label_offsets")
                .and_then(|v| v.get(1))
                .and_then(Value::as_u64)
                .ok_or_else(|| Error::Config("stage-2 checkpoint lacks the target label offset".into()))?;
            let validation = target.select_identities(&split.validation);
            let f = if model == Model::Stage3 { train_stage3 } else { train_l2 };
            let (p, log) = f(&msmt, &target_train, offset as u32, &validation, &c.stage3)?;
            (p, log, Map::new())
        }
    };
    let path = save_model(&run, model, &params, &log, extra)?;
    report_log(model, &path, &log)
}

fn resolve_checkpoint(run: &Run, model: Model, checkpoint: Option<&Path>) -> Result<(String, ModelParams)> {
    match checkpoint {
        Some(p) => {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into());
            Ok((name, load_with_manifest(p)?.0))
        }
        None => Ok((model.dir().to_string(), run.require(model, "this command")?.0)),
    }
}

pub fn eval(cfg: ExperimentConfig, model: Model, checkpoint: Option<&Path>) -> Result<()> {
    let run = Run::new(cfg)?;
    let (name, params) = resolve_checkpoint(&run, model, checkpoint)?;
    let target = run.corpus("target")?;
    let test = target.select_identities(&run.split(&target)?.test);
    let e = &run.cfg.eval;
    let b = embed_corpus(&params, &test)?;
    let result = match e.protocol {
        Protocol::P1 => protocol_p1_on_embeddings(&b.e_i, &test, e.trials, &mut ChaCha8Rng::seed_from_u64(e.seed), e.metric)?,
        Protocol::P2 => protocol_p2_on_embeddings(&b.e_i, &test, e.metric)?,
    };
    let yaw: Vec<f64> = test.samples.iter().map(|s| s.yaw()).collect();
    let leak = pose_leakage_probe(&b.e_i, &b.e_n, &yaw, e.leakage_lambda)?;
    let dir = run.dir(&format!("eval/{name}"))?;
    write_json(&dir.join("result.json"), &result)?;
    result.write_csv(&name, &dir.join("result.csv"))?;
    write_json(&dir.join("leakage.json"), &leak)?;
    let bins: Vec<String> = result.bins.iter().map(|v| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())).collect();
    println!("model={name} bins={} avg={:.4} std={:.4}", bins.join(","), result.average, result.std_average);
    println!("leakage mse_id={:.6} mse_nonid={:.6} ratio={:.4}", leak.mse_id, leak.mse_nonid, leak.ratio);
    Ok(())
}

pub fn export(cfg: ExperimentConfig, model: Model, checkpoint: Option<&Path>) -> Result<()> {
    let run = Run::new(cfg)?;
    let (name, params) = resolve_checkpoint(&run, model, checkpoint)?;
    let target = run.corpus("target")?;
    let test = target.select_identities(&run.split(&target)?.test);
    let dir = run.dir(&format!("export/{name}"))?;
    let bin = dir.join("embeddings.bin");
    let csv = export_embeddings(&params, &test, &bin)?;
    println!("embeddings={} csv={} rows={}", bin.display(), csv.display(), test.len());
    Ok(())
}

pub fn ablate(cfg: ExperimentConfig) -> Result<()> {
    let run = Run::new(cfg)?;
    let base = run.corpus("base")?;
    let target = run.corpus("target")?;
    let acfg = run.cfg.ablation_config();
    let report = ablation_suite(&base, &target, &run.cfg.ablation.seeds, &acfg, &mut |m| eprintln!("{m}"))?;
    let dir = run.dir("ablation")?;
    write_json(&dir.join("report.json"), &report)?;
    report.write_csv(&dir.join("report.csv"))?;
    for r in &report.mean {
        println!("model={} avg={:.4} std={:.4}", r.model, r.average, r.std_average);
    }
    for l in &report.leakage {
        println!("leakage model={} seed={} ratio={:.4}", l.model, l.seed, l.result.ratio);
    }
    Ok(())
}

/// Fails when any objective's worst relative error reaches the tolerance.
pub fn gradcheck(cfg: ExperimentConfig) -> Result<bool> {
    let run = Run::new(cfg)?;
    let g = &run.cfg.gradcheck;
    let checks = check_objectives(&g.arch, g.batch, g.per_tensor, g.epsilon, g.seed)?;
    let dir = run.dir("gradcheck")?;
    write_json(&dir.join("report.json"), &checks)?;
    let mut ok = true;
    for c in &checks {
        let pass = c.report.max_rel_error < g.tolerance;
        ok &= pass;
        println!(
            "objective={} max_rel_error={:.3e} mean_rel_error={:.3e} {}",
            c.objective,
            c.report.max_rel_error,
            c.report.mean_rel_error,
            if pass { "ok" } else { "FAILED" }
        );
    }
    Ok(ok)
}

/// Renders one random identity across a yaw sweep as PGM files.
pub fn render(cfg: ExperimentConfig, identity_seed: u64, step_deg: f64) -> Result<()> {
    let run = Run::new(cfg)?;
    let g = &run.cfg.generation.target;
    let model = MorphableModel::generate(&g.model)?;
    let renderer = SampleRenderer::new(&model, g.image_size, g.texture_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(identity_seed);
    let id = Normal::new(0.0, g.sigma_id).map_err(|e| Error::Config(e.to_string()))?;
    let mut base = FaceParams::neutral(&model);
    base.scale = g.image_size as f64 / 32.0;
    base.alpha_id = (0..model.id_dims).map(|_| id.sample(&mut rng)).collect();
    let views = pose_sweep(&base, (-90f64).to_radians(), 90f64.to_radians(), step_deg.to_radians())?;
    let dir = run.dir("render")?;
    for v in &views {
        let (img, _) = renderer.render(v)?;
        let deg = v.yaw.to_degrees().round() as i64;
        std::fs::write(dir.join(format!("yaw_{deg:+04}.pgm")), img.to_pgm())?;
    }
    println!("views={} dir={}", views.len(), dir.display());
    Ok(())
}
