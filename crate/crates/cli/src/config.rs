//! Run configuration: defaults, then a JSON config file, then flags.

use std::path::Path;

use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use heta_core::baselines::BaselineConfig;
use heta_core::heta::{HetaConfig, Variant};
use heta_core::info::MaskScheme;

use crate::error::CliError;

/// Resolved configuration of one run; written to `config.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig<A> {
    pub command: String,
    pub jobs: usize,
    pub heta: HetaConfig,
    pub baseline: BaselineConfig,
    pub args: A,
}

/// Flags mirroring [`HetaConfig`] field names.
#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct HetaFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// full, lr, ls, win, lr+win, gs, transition-only, hessian-only, kl-only,
    /// no-gate, uniform-gate
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    /// zero, mean or sentinel
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskScheme>,
    /// Hutchinson probes per token
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oversample: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    /// Comma-separated layer indices for the layer-subset variant
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer_subset: Option<Vec<usize>>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gauss_newton: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct BaselineFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ig_steps: Option<usize>,
    /// Reference input of IG: zero, mean or sentinel
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ig_baseline: Option<MaskScheme>,
}

/// Recursively overlay `top` onto `base`. Objects merge key by key; every
/// other value replaces. Keys unknown to `base` are rejected.
fn overlay(base: &mut Value, top: &Value, path: &str) -> Result<(), CliError> {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                let here = if path.is_empty() { k.clone() } else { format!("{}.{}", path, k) };
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => overlay(slot, v, &here)?,
                    Some(slot) => *slot = v.clone(),
                    None => return Err(CliError::Usage(format!("unknown configuration key {:?}", here))),
                }
            }
            Ok(())
        }
        (b, t) => {
            *b = t.clone();
            Ok(())
        }
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::Usage(e.to_string()))
}

pub fn read_config_file(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config file {}: {}", path.display(), e)))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config file {}: {}", path.display(), e)))?;
    if !v.is_object() {
        return Err(CliError::Usage("config file must hold a JSON object".into()));
    }
    Ok(v)
}

/// Defaults, then `file`, then flags. `command` fields in a file (as found
/// in config echoes) must match the command being run.
pub fn resolve<A>(
    command: &str,
    file: Option<&Value>,
    jobs: Option<usize>,
    heta: &HetaFlags,
    baseline: &BaselineFlags,
    args: Value,
) -> Result<RunConfig<A>, CliError>
where
    A: Serialize + DeserializeOwned + Default,
{
    let mut v = to_value(&RunConfig {
        command: command.to_string(),
        jobs: 1,
        heta: HetaConfig::default(),
        baseline: BaselineConfig::default(),
        args: A::default(),
    })?;
    if let Some(f) = file {
        if let Some(c) = f.get("command") {
            if c != command {
                return Err(CliError::Usage(format!("config file is for command {}, not {:?}", c, command)));
            }
        }
        overlay(&mut v, f, "")?;
    }
    let mut flags = Map::new();
    if let Some(j) = jobs {
        flags.insert("jobs".into(), j.into());
    }
    flags.insert("heta".into(), to_value(heta)?);
    flags.insert("baseline".into(), to_value(baseline)?);
    if args.is_object() {
        flags.insert("args".into(), args);
    }
    overlay(&mut v, &Value::Object(flags), "")?;
    let cfg: RunConfig<A> = serde_json::from_value(v).map_err(|e| CliError::Usage(format!("invalid configuration: {}", e)))?;
    if cfg.jobs == 0 {
        return Err(CliError::Usage("jobs must be at least 1".into()));
    }
    cfg.heta.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.baseline.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

/// Flag values that were given, as a JSON object.
#[derive(Default)]
pub struct FlagMap(Map<String, Value>);

impl FlagMap {
    pub fn put<T: Serialize>(mut self, key: &str, v: &Option<T>) -> Self {
        if let Some(v) = v {
            self.0.insert(key.into(), serde_json::to_value(v).expect("serializable flag"));
        }
        self
    }

    pub fn nest(mut self, key: &str, inner: FlagMap) -> Self {
        if !inner.0.is_empty() {
            self.0.insert(key.into(), Value::Object(inner.0));
        }
        self
    }

    pub fn value(self) -> Value {
        Value::Object(self.0)
    }
}
