use std::path::Path;

use serde_json::{json, Map, Value};

use super::params::{group_layout, ArchConfig, Group, ModelParams, ParamGroup, ParamTensor};
use crate::container::{Container, NamedArray};
use crate::error::{ContainerError, Result};

pub const CHECKPOINT_FORMAT: &str = "pdisent-checkpoint/1";

/// Every tensor as an f64 array named `group/tensor`, with the architecture
/// and frozen flags in the manifest. `extra` is merged into the manifest.
pub fn params_to_container(params: &ModelParams, extra: Map<String, Value>) -> Container {
    let frozen: Vec<&str> = params.groups.iter().filter(|g| g.frozen).map(|g| g.group.name()).collect();
    let mut manifest = Map::new();
    manifest.insert("format".into(), json!(CHECKPOINT_FORMAT));
    manifest.insert("arch".into(), serde_json::to_value(&params.arch).expect("arch serializes"));
    manifest.insert("frozen".into(), json!(frozen));
    manifest.extend(extra);
    let mut c = Container::new(manifest);
    for g in &params.groups {
        for t in &g.tensors {
            c.push(NamedArray::f64(format!("{}/{}", g.group.name(), t.name), t.shape.clone(), t.data.clone()));
        }
    }
    c
}

/// Rebuild parameters, checking every tensor against the stored architecture.
pub fn params_from_container(c: &Container) -> Result<ModelParams> {
    let corrupt = |m: String| ContainerError::CorruptHeader(m);
    if c.manifest.get("format").and_then(Value::as_str) != Some(CHECKPOINT_FORMAT) {
        return Err(corrupt("not a checkpoint file".into()).into());
    }
    let arch: ArchConfig =
        serde_json::from_value(c.manifest.get("arch").cloned().unwrap_or(Value::Null)).map_err(|e| corrupt(format!("checkpoint arch: {e}")))?;
    arch.validate()?;
    let frozen: Vec<String> =
        serde_json::from_value(c.manifest.get("frozen").cloned().unwrap_or(json!([]))).map_err(|e| corrupt(format!("checkpoint frozen list: {e}")))?;
    let mut groups = Vec::new();
    let mut expected = 0;
    for g in Group::ALL {
        let mut tensors = Vec::new();
        for (name, shape) in group_layout(&arch, g) {
            let full = format!("{}/{}", g.name(), name);
            let data = c.get_f64(&full, &shape).map_err(|e| match e {
                ContainerError::WrongShape { name, expected, found } => {
                    ContainerError::ManifestMismatch(format!("tensor `{name}` has shape {found:?}, architecture implies {expected:?}"))
                }
                other => other,
            })?;
            tensors.push(ParamTensor {
                name,
                shape,
                data: data.to_vec(),
            });
            expected += 1;
        }
        groups.push(ParamGroup {
            group: g,
            tensors,
            frozen: frozen.iter().any(|f| f == g.name()),
        });
    }
    if c.arrays.len() != expected {
        return Err(ContainerError::ManifestMismatch(format!("checkpoint holds {} tensors, architecture implies {expected}", c.arrays.len())).into());
    }
    Ok(ModelParams { arch, groups })
}

pub fn save_checkpoint(params: &ModelParams, extra: Map<String, Value>, path: impl AsRef<Path>) -> Result<()> {
    params_to_container(params, extra).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    params_from_container(&Container::load(path)?)
}
