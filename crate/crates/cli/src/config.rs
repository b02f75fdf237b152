//! Experiment configuration: defaults, JSON file, then `--set` overrides.

use std::path::{Path, PathBuf};

use disent::dataset::{GenerationConfig, Protocol};
use disent::eval::Metric;
use disent::nn::ArchConfig;
use disent::train::{Stage2Config, Stage3Config};
use disent::Error;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const OUTPUT_ROOT_ENV: &str = "DISENT_OUTPUT_ROOT";
pub const RESOLVED_CONFIG: &str = "config.resolved.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub generation: GenerationSection,
    pub arch: ArchConfig,
    pub stage2: Stage2Config,
    pub ssft: SsftSection,
    pub stage3: Stage3Config,
    pub split: SplitSection,
    pub eval: EvalSection,
    pub ablation: AblationSection,
    pub gradcheck: GradcheckSection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSection {
    pub base: GenerationConfig,
    pub base_seed: u64,
    pub target: GenerationConfig,
    pub target_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsftSection {
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub validation_identities: usize,
    pub test_identities: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub protocol: Protocol,
    pub trials: usize,
    pub metric: Metric,
    pub seed: u64,
    pub leakage_lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    pub arch: ArchConfig,
    pub batch: usize,
    pub per_tensor: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// Run directory, relative to the output root unless absolute.
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let ablation = disent::ablation::AblationConfig::default();
        Self {
            generation: GenerationSection {
                base: GenerationConfig::base(),
                base_seed: 1,
                target: GenerationConfig::target(),
                target_seed: 2,
            },
            arch: ablation.arch,
            stage2: ablation.stage2,
            ssft: SsftSection { epochs: ablation.ssft_epochs },
            stage3: ablation.stage3,
            split: SplitSection {
                validation_identities: ablation.validation_identities,
                test_identities: ablation.test_identities,
                seed: ablation.split_seed,
            },
            eval: EvalSection {
                protocol: Protocol::P1,
                trials: ablation.trials,
                metric: ablation.metric,
                seed: 0,
                leakage_lambda: ablation.leakage_lambda,
            },
            ablation: AblationSection { seeds: vec![1, 2, 3] },
            gradcheck: GradcheckSection {
                arch: ArchConfig {
                    image_size: 8,
                    conv_channels: vec![2, 3],
                    rich_dim: 6,
                    identity_dim: 4,
                    nonidentity_dim: 3,
                    pose_dim: 7,
                    landmark_dim: 4,
                    num_classes: 3,
                    recon_hidden: 5,
                },
                batch: 4,
                per_tensor: 8,
                epsilon: 1e-5,
                tolerance: 1e-4,
                seed: 0,
            },
            paths: PathsSection {
                output_dir: "runs/default".into(),
            },
        }
    }
}

impl ExperimentConfig {
    /// Defaults, overlaid by the optional JSON file, then by each
    /// `key.path=value` override. Values parse as JSON, else as strings.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, Error> {
        let mut value = serde_json::to_value(Self::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            let user: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, user);
        }
        for o in overrides {
            let (key, raw) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, key, v)?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let g = &self.generation;
        g.base.validate().map_err(|e| Error::Config(format!("generation.base: {e}")))?;
        g.target.validate().map_err(|e| Error::Config(format!("generation.target: {e}")))?;
        if g.base.image_size != g.target.image_size || g.base.image_size != self.arch.image_size {
            return Err(Error::Config(
                "generation.base.image_size, generation.target.image_size and arch.image_size must agree".into(),
            ));
        }
        if g.base.model != g.target.model || g.base.texture_seed != g.target.texture_seed {
            return Err(Error::Config("base and target corpora must share the shape model and texture seed".into()));
        }
        self.arch.validate().map_err(|e| Error::Config(format!("arch: {e}")))?;
        self.stage2.validate()?;
        self.stage3.validate()?;
        if self.eval.trials == 0 || !(self.eval.leakage_lambda >= 0.0) {
            return Err(Error::Config("eval needs trials > 0 and leakage_lambda >= 0".into()));
        }
        if self.split.validation_identities == 0 || self.split.test_identities == 0 {
            return Err(Error::Config("split needs validation and test identities".into()));
        }
        if self.split.validation_identities + self.split.test_identities >= g.target.num_identities {
            return Err(Error::Config("split leaves no target training identities".into()));
        }
        if self.ablation.seeds.is_empty() {
            return Err(Error::Config("ablation.seeds is empty".into()));
        }
        Ok(())
    }

    pub fn ablation_config(&self) -> disent::ablation::AblationConfig {
        disent::ablation::AblationConfig {
            arch: self.arch.clone(),
            stage2: self.stage2.clone(),
            ssft_epochs: self.ssft.epochs,
            stage3: self.stage3.clone(),
            validation_identities: self.split.validation_identities,
            test_identities: self.split.test_identities,
            split_seed: self.split.seed,
            trials: self.eval.trials,
            metric: self.eval.metric,
            leakage_lambda: self.eval.leakage_lambda,
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        let dir = Path::new(&self.paths.output_dir);
        if dir.is_absolute() {
            return dir.to_path_buf();
        }
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(dir),
            None => dir.to_path_buf(),
        }
    }

    /// Writes the resolved configuration into `dir`.
    pub fn snapshot(&self, dir: &Path) -> Result<(), Error> {
        std::fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.join(RESOLVED_CONFIG), text)?;
        Ok(())
    }
}

/// Recursive object merge. A tagged object whose `kind` changes is replaced
/// whole so stale variant fields do not survive.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            let kind_changes = matches!((b.get("kind"), o.get("kind")), (Some(x), Some(y)) if x != y);
            if kind_changes {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<(), Error> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{}` is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(Error::Config(format!("override `{key}`: unknown key")));
            }
            let slot = obj.get_mut(*part).expect("checked");
            merge(slot, v);
            return Ok(());
        }
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("override `{key}`: unknown section `{part}`")))?;
    }
    Err(Error::Config("empty override key".into()))
}
