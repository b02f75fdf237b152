//! The five-row baseline ladder on a base corpus and a target corpus.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Corpus, IdentitySplit, PoseBin};
use crate::error::{invalid, Error, Result};
use crate::eval::{csv_err, embed_corpus, pose_leakage_probe, protocol_p1_on_embeddings, LeakageResult, Metric, ProtocolResult};
use crate::nn::{ArchConfig, Group, ModelParams};
use crate::train::{fine_tune_softmax, train_l2, train_stage2, train_stage3, Stage2Config, Stage3Config, TrainingSet};

pub const ROWS: [&str; 5] = ["SS", "SS-FT", "MSMT", "MSMT+L2", "MSMT+SR"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub arch: ArchConfig,
    pub stage2: Stage2Config,
    /// Epochs of the softmax-only target fine-tune.
    pub ssft_epochs: usize,
    pub stage3: Stage3Config,
    pub validation_identities: usize,
    pub test_identities: usize,
    pub split_seed: u64,
    pub trials: usize,
    pub metric: Metric,
    pub leakage_lambda: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            stage2: Stage2Config::default(),
            ssft_epochs: 5,
            stage3: Stage3Config::default(),
            validation_identities: 10,
            test_identities: 20,
            split_seed: 0,
            trials: 10,
            metric: Metric::Cosine,
            leakage_lambda: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub seed: u64,
    pub result: ProtocolResult,
}

/// Seed-averaged row: mean and population std over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanRow {
    pub model: String,
    pub bins: Vec<Option<f64>>,
    pub average: f64,
    pub std_bins: Vec<Option<f64>>,
    pub std_average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageRow {
    pub model: String,
    pub seed: u64,
    pub result: LeakageResult,
}

/// Whether a fine-tuned row kept the stage-2 backbone and identity
/// classifier bit-identical.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeCheck {
    pub model: String,
    pub seed: u64,
    pub conserved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub config: AblationConfig,
    pub split: IdentitySplit,
    pub rows: Vec<AblationRow>,
    pub mean: Vec<MeanRow>,
    pub leakage: Vec<LeakageRow>,
    pub freeze: Vec<FreezeCheck>,
}

impl AblationReport {
    pub fn mean_row(&self, model: &str) -> Option<&MeanRow> {
        self.mean.iter().find(|r| r.model == model)
    }

    /// Leakage ratio averaged over seeds.
    pub fn mean_leakage_ratio(&self, model: &str) -> Option<f64> {
        let v: Vec<f64> = self.leakage.iter().filter(|l| l.model == model).map(|l| l.result.ratio).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Columns: model, seed (`mean` for averages), bin_15..bin_90, avg,
    /// std_15..std_90, std_avg. Per-seed std columns are over P1 trials.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["model".to_string(), "seed".to_string()];
        header.extend(PoseBin::all().map(|b| format!("bin_{}", b.end_degrees())));
        header.push("avg".into());
        header.extend(PoseBin::all().map(|b| format!("std_{}", b.end_degrees())));
        header.push("std_avg".into());
        w.write_record(&header).map_err(csv_err)?;
        let opt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut emit = |model: &str, seed: String, bins: &[Option<f64>], avg: f64, std: &[Option<f64>], std_avg: f64| {
            let mut rec = vec![model.to_string(), seed];
            rec.extend(bins.iter().map(opt));
            rec.push(avg.to_string());
            rec.extend(std.iter().map(opt));
            rec.push(std_avg.to_string());
            w.write_record(&rec).map_err(csv_err)
        };
        for r in &self.rows {
            let p = &r.result;
            emit(&r.model, r.seed.to_string(), &p.bins, p.average, &p.std_bins, p.std_average)?;
        }
        for r in &self.mean {
            emit(&r.model, "mean".into(), &r.bins, r.average, &r.std_bins, r.std_average)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Prefixes the failing row to message-carrying errors; other kinds pass
/// through unchanged.
fn named<T>(row: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("ablation row {row} failed: {m}")),
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("ablation row {row} failed: {m}")),
        other => other,
    })
}

/// Train and evaluate every ladder row for each seed. All rows of a seed share
/// the identity split and the P1 gallery draws.
pub fn ablation_suite(base: &Corpus, target: &Corpus, seeds: &[u64], cfg: &AblationConfig, progress: &mut dyn FnMut(&str)) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(invalid("ablation needs at least one seed"));
    }
    let split = IdentitySplit::new(target.num_identities(), cfg.validation_identities, cfg.test_identities, cfg.split_seed)?;
    let target_train = target.select_identities(&split.train);
    let validation = target.select_identities(&split.validation);
    let test = target.select_identities(&split.test);
    let base_set = TrainingSet::merge(&[base])?;
    let target_set = TrainingSet::merge(&[&target_train])?;
    let joint_set = TrainingSet::merge(&[base, &target_train])?;
    let target_offset = joint_set.offsets[1];

    let mut rows = Vec::new();
    let mut leakage = Vec::new();
    let mut freeze = Vec::new();
    for &seed in seeds {
        let s2 = Stage2Config { seed, ..cfg.stage2.clone() };
        let s3 = Stage3Config { seed, ..cfg.stage3.clone() };
        let mut evaluate = |model: &str, params: &ModelParams| -> Result<ProtocolResult> {
            let b = embed_corpus(params, &test)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7a1);
            let result = protocol_p1_on_embeddings(&b.e_i, &test, cfg.trials, &mut rng, cfg.metric)?;
            if model != "SS" && model != "SS-FT" {
                let yaw: Vec<f64> = test.samples.iter().map(|s| s.yaw()).collect();
                leakage.push(LeakageRow {
                    model: model.into(),
                    seed,
                    result: pose_leakage_probe(&b.e_i, &b.e_n, &yaw, cfg.leakage_lambda)?,
                });
            }
            progress(&format!("seed {seed} {model}: avg {:.4}", result.average));
            rows.push(AblationRow {
                model: model.into(),
                seed,
                result: result.clone(),
            });
            Ok(result)
        };

        let ss_cfg = Stage2Config {
            lambda_p: 0.0,
            lambda_l: 0.0,
            ..s2.clone()
        };
        let (ss, _) = named("SS", train_stage2(&base_set, &cfg.arch, &ss_cfg))?;
        named("SS", evaluate("SS", &ss))?;
        let ft_cfg = Stage2Config {
            epochs: cfg.ssft_epochs,
            ..s2.clone()
        };
        let (ssft, _) = named("SS-FT", fine_tune_softmax(&ss, &target_set, &ft_cfg))?;
        named("SS-FT", evaluate("SS-FT", &ssft))?;
        let (msmt, _) = named("MSMT", train_stage2(&joint_set, &cfg.arch, &s2))?;
        named("MSMT", evaluate("MSMT", &msmt))?;
        let (l2, _) = named("MSMT+L2", train_l2(&msmt, &target_train, target_offset, &validation, &s3))?;
        named("MSMT+L2", evaluate("MSMT+L2", &l2))?;
        let (sr, _) = named("MSMT+SR", train_stage3(&msmt, &target_train, target_offset, &validation, &s3))?;
        named("MSMT+SR", evaluate("MSMT+SR", &sr))?;
        for (model, p) in [("MSMT+L2", &l2), ("MSMT+SR", &sr)] {
            freeze.push(FreezeCheck {
                model: model.into(),
                seed,
                conserved: [Group::Backbone, Group::IdClassifier].iter().all(|&g| p.group_hash(g) == msmt.group_hash(g)),
            });
        }
    }
    let mean = ROWS.iter().map(|m| mean_row(m, &rows)).collect();
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        config: cfg.clone(),
        split,
        rows,
        mean,
        leakage,
        freeze,
    })
}

fn mean_row(model: &str, rows: &[AblationRow]) -> MeanRow {
    let rs: Vec<&ProtocolResult> = rows.iter().filter(|r| r.model == model).map(|r| &r.result).collect();
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt())
    };
    let per_bin: Vec<Option<(f64, f64)>> = (0..PoseBin::COUNT)
        .map(|k| rs.iter().map(|r| r.bins[k]).collect::<Option<Vec<f64>>>().map(|v| stats(&v)))
        .collect();
    let (average, std_average) = stats(&rs.iter().map(|r| r.average).collect::<Vec<_>>());
    MeanRow {
        model: model.into(),
        bins: per_bin.iter().map(|b| b.map(|x| x.0)).collect(),
        std_bins: per_bin.iter().map(|b| b.map(|x| x.1)).collect(),
        average,
        std_average,
    }
}
