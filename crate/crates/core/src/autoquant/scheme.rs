//! Quantization scheme: a global configuration plus ordered per-layer overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::quant::{Granularity, RangeMethod};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FallbackPrecision {
    Fp16,
    Fp32,
}

/// Storage of embedding tables in the quantized model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TablePolicy {
    Fp32,
    Int8,
    /// The larger half of the tables (by row count) in int4, the rest int8.
    Int4TopHalf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalScheme {
    pub act_range: RangeMethod,
    pub weight_range: RangeMethod,
    pub weight_granularity: Granularity,
    pub skip_last_fc: bool,
    pub fallback: FallbackPrecision,
}

impl Default for GlobalScheme {
    fn default() -> Self {
        GlobalScheme {
            act_range: RangeMethod::MinMax,
            weight_range: RangeMethod::MinMax,
            weight_granularity: Granularity::PerTensor,
            skip_last_fc: false,
            fallback: FallbackPrecision::Fp16,
        }
    }
}

impl GlobalScheme {
    /// Number of refined (non min-max) range methods; used for tie-breaks.
    pub fn refined_methods(&self) -> usize {
        self.act_range.is_refined() as usize + self.weight_range.is_refined() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum LayerAction {
    PerChannelWeights,
    PercentileActs { q: f32 },
    L2MinActs,
    /// Per-batch min/max activation parameters for this layer.
    Dynamic,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOverride {
    pub node: String,
    #[serde(flatten)]
    pub action: LayerAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantScheme {
    pub global: GlobalScheme,
    #[serde(default)]
    pub overrides: Vec<LayerOverride>,
    #[serde(default = "default_tables")]
    pub tables: TablePolicy,
}

fn default_tables() -> TablePolicy {
    TablePolicy::Int8
}

/// Effective settings for one FC after applying the overrides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerConfig {
    pub act_range: RangeMethod,
    pub weight_range: RangeMethod,
    pub granularity: Granularity,
    pub dynamic: bool,
    pub skip: bool,
}

impl QuantScheme {
    pub fn new(global: GlobalScheme) -> QuantScheme {
        QuantScheme {
            global,
            overrides: Vec::new(),
            tables: TablePolicy::Int8,
        }
    }

    pub fn layer_config(&self, node: &str, is_last_fc: bool) -> LayerConfig {
        let g = &self.global;
        let mut c = LayerConfig {
            act_range: g.act_range,
            weight_range: g.weight_range,
            granularity: g.weight_granularity,
            dynamic: false,
            skip: g.skip_last_fc && is_last_fc,
        };
        for o in self.overrides.iter().filter(|o| o.node == node) {
            match o.action {
                LayerAction::PerChannelWeights => c.granularity = Granularity::PerChannel,
                LayerAction::PercentileActs { q } => c.act_range = RangeMethod::Percentile { q },
                LayerAction::L2MinActs => c.act_range = RangeMethod::L2Min,
                LayerAction::Dynamic => c.dynamic = true,
                LayerAction::Skip => c.skip = true,
            }
        }
        c
    }

    pub fn skipped_layers(&self, g: &ModelGraph) -> Vec<String> {
        let last = g.last_fc().map(|n| n.name.clone());
        g.nodes
            .iter()
            .filter(|n| n.is_fc())
            .filter(|n| self.layer_config(&n.name, Some(&n.name) == last.as_ref()).skip)
            .map(|n| n.name.clone())
            .collect()
    }

    /// Every override must name an FC of `g` and carry valid parameters.
    pub fn validate_for(&self, g: &ModelGraph) -> Result<()> {
        self.global.act_range.validate()?;
        self.global.weight_range.validate()?;
        if self.global.weight_granularity == Granularity::PerRow {
            return Err(Error::Config("weights cannot use per-row granularity".into()));
        }
        for o in &self.overrides {
            if !g.node(&o.node).is_some_and(|n| n.is_fc()) {
                return Err(Error::Config(format!("override names unknown FC `{}`", o.node)));
            }
            if let LayerAction::PercentileActs { q } = o.action {
                RangeMethod::Percentile { q }.validate()?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scheme serializes")
    }

    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("scheme serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<QuantScheme> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_in_order() {
        let mut s = QuantScheme::new(GlobalScheme::default());
        s.overrides.push(LayerOverride {
            node: "fc1".into(),
            action: LayerAction::PercentileActs { q: 0.99 },
        });
        s.overrides.push(LayerOverride {
            node: "fc1".into(),
            action: LayerAction::L2MinActs,
        });
        let c = s.layer_config("fc1", false);
        assert_eq!(c.act_range, RangeMethod::L2Min);
        assert!(!c.skip);
        assert!(!s.layer_config("fc2", false).skip);
        let mut s2 = s.clone();
        s2.global.skip_last_fc = true;
        assert!(s2.layer_config("fc2", true).skip);
    }

    #[test]
    fn json_roundtrip() {
        let mut s = QuantScheme::new(GlobalScheme::default());
        s.overrides.push(LayerOverride {
            node: "fc".into(),
            action: LayerAction::Skip,
        });
        let back: QuantScheme = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.hash(), s.hash());
    }
}
