use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Outcome of solving one instance, or an aggregate over a set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub instance: String,
    pub method: String,
    pub n_aug: usize,
    pub length: f64,
    /// Percent over `reference`; `None` when there is no reference.
    pub gap: Option<f64>,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub route: Vec<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl SolveReport {
    pub fn new(instance: impl Into<String>, method: impl Into<String>, n_aug: usize, length: f64, seconds: f64) -> Self {
        SolveReport {
            instance: instance.into(),
            method: method.into(),
            n_aug,
            length,
            gap: None,
            seconds,
            reference: None,
            route: Vec::new(),
            meta: BTreeMap::new(),
        }
    }
}
