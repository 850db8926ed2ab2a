//! JSON-configured toy runs: model builder arguments, synthetic data and [`TrainConfig`].

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{train_loop, Dataset, SyntheticSpec, TrainConfig, TrainError, TrainSummary};
use crate::graphir::{build_pokebnn_toy_with_classes, parse_multiplier};
use crate::nn::{Model, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModelSpec {
    /// Width multiplier, e.g. `"0.25"` or `"1/4"`.
    pub multiplier: String,
    /// Number of PokeConv groups (stages), at least 2.
    pub groups: usize,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for ToyModelSpec {
    fn default() -> Self {
        ToyModelSpec {
            multiplier: "0.25".into(),
            groups: 4,
            init_seed: 1,
        }
    }
}

/// Top-level config file: the [`TrainConfig`] keys plus `model` and `data` objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    #[serde(default)]
    pub model: ToyModelSpec,
    #[serde(default)]
    pub data: SyntheticSpec,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            model: ToyModelSpec::default(),
            data: SyntheticSpec::default(),
            train: TrainConfig {
                total_steps: 2000,
                ..TrainConfig::default()
            },
        }
    }
}

impl ToyConfig {
    /// Missing keys fall back to [`ToyConfig::default`].
    pub fn from_json(text: &str) -> Result<ToyConfig, TrainError> {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| TrainError::Config(format!("config: {e}")))?;
        let mut base = serde_json::to_value(ToyConfig::default()).expect("config serializes");
        // `flatten` swallows unknown keys, so the top level is checked by hand.
        if let (Some(known), Some(given)) = (base.as_object(), value.as_object()) {
            if let Some(k) = given.keys().find(|k| !known.contains_key(*k)) {
                return Err(TrainError::Config(format!("config: unknown field `{k}`")));
            }
        }
        merge(&mut base, value.take());
        serde_json::from_value(base).map_err(|e| TrainError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<ToyConfig, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        ToyConfig::from_json(&text)
    }

    pub fn build_model(&self) -> Result<Model, TrainError> {
        let m = parse_multiplier(&self.model.multiplier)
            .ok_or_else(|| TrainError::Config(format!("bad multiplier `{}`", self.model.multiplier)))?;
        let [h, w, c] = self.data.shape;
        let graph = build_pokebnn_toy_with_classes(m, self.model.groups, [h, w, c], self.data.classes)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(Model::new(graph, ModelConfig::default(), self.model.init_seed)?)
    }

    /// Builds model and data, then trains.
    pub fn run(&self, log: Option<&mut dyn Write>) -> Result<(Model, Dataset, TrainSummary), TrainError> {
        let data = Dataset::synthetic(&self.data)?;
        let mut model = self.build_model()?;
        let summary = train_loop(&mut model, &data, &self.train, log)?;
        Ok((model, data, summary))
    }
}

/// Overlays `patch` onto `base`, recursing into objects present in both.
fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}
