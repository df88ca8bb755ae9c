//! Flat `key = value` run configuration.
//!
//! Keys are the field names of `ModelConfig` and `TrainConfig` (`problem`,
//! `size`, `epochs`, `lr`, `embed_dim`, `variant`, ...). `#` starts a
//! comment. Values are JSON literals or bare words; `milestones` also takes a
//! comma list and `gradient_clip` takes `none`.

use std::path::Path;

use eformer::instance::ProblemKind;
use eformer::model::ModelConfig;
use eformer::training::TrainConfig;
use eformer::{Error, Result};
use serde_json::{Map, Value};

pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse { line: i + 1, message: format!("expected `key = value`, got `{line}`") })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    parse_pairs(&text)
}

fn value_for(key: &str, raw: &str) -> Value {
    match key {
        "problem" => Value::String(raw.to_ascii_uppercase()),
        "variant" => Value::String(match raw {
            "edge" => "edge_input".into(),
            "node" => "node_input".into(),
            other => other.to_string(),
        }),
        "milestones" if !raw.starts_with('[') => {
            Value::Array(raw.split(',').filter(|s| !s.trim().is_empty()).map(|s| s.trim().parse::<u64>().map(Value::from).unwrap_or(Value::String(s.into()))).collect())
        }
        "gradient_clip" if raw == "none" => Value::Null,
        _ => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string())),
    }
}

/// Model and training configuration after applying `pairs` in order.
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn resolve(pairs: &[(String, String)]) -> Result<Self> {
        let mut problem = ProblemKind::Tsp;
        for (k, v) in pairs {
            if k == "problem" {
                problem = v.parse()?;
            }
        }
        let mut model = obj(serde_json::to_value(ModelConfig::new(problem)).expect("config serializes"));
        let mut train = obj(serde_json::to_value(TrainConfig::new(problem, 20)).expect("config serializes"));
        for (k, v) in pairs {
            let val = value_for(k, v);
            let mut known = false;
            for target in [&mut model, &mut train] {
                if target.contains_key(k) {
                    target.insert(k.clone(), val.clone());
                    known = true;
                }
            }
            if !known {
                return Err(Error::Config(format!("unknown configuration key `{k}`")));
            }
        }
        let model: ModelConfig = serde_json::from_value(Value::Object(model)).map_err(|e| Error::Config(format!("model configuration: {e}")))?;
        let train: TrainConfig = serde_json::from_value(Value::Object(train)).map_err(|e| Error::Config(format!("training configuration: {e}")))?;
        model.validate()?;
        train.validate()?;
        Ok(RunConfig { model, train })
    }

    /// Effective configuration as one JSON object.
    pub fn to_json(&self) -> Value {
        serde_json::json!({ "model": self.model, "train": self.train })
    }
}

fn obj(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => unreachable!("configs serialize to objects"),
    }
}
