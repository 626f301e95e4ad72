//! Training configuration and its flat `key = value` text form.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::par::Parallelism;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Generative replay with adaptive injection.
    #[default]
    Dgar,
    /// Plain fine-tuning.
    Ft,
    /// Reservoir experience replay.
    Er,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dgar" => Ok(Method::Dgar),
            "ft" => Ok(Method::Ft),
            "er" => Ok(Method::Er),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Dgar => "dgar",
            Method::Ft => "ft",
            Method::Er => "er",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    /// Replace prompts with uniformly drawn historical facts.
    pub no_hp: bool,
    /// No generation, no injection, no diffusion updates.
    pub no_gr: bool,
    /// Unweighted addition instead of the learned balance.
    pub no_ar: bool,
    /// Guidance strength forced to zero.
    pub no_guider: bool,
    /// Replay regularizer weight forced to zero.
    pub no_lr: bool,
}

impl Ablations {
    pub fn any(&self) -> bool {
        self.no_hp || self.no_gr || self.no_ar || self.no_guider || self.no_lr
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [
            (self.no_hp, "no-hp"),
            (self.no_gr, "no-gr"),
            (self.no_ar, "no-ar"),
            (self.no_guider, "no-guider"),
            (self.no_lr, "no-lr"),
        ] {
            if on {
                parts.push(name);
            }
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    #[serde(flatten)]
    pub ablations: Ablations,
    pub seed: u64,
    /// Embedding width `d`.
    pub dim: usize,
    /// Aggregation layers per snapshot.
    pub layers: usize,
    /// Number of past snapshots the reasoner reads.
    pub window: usize,
    /// Prompt times sampled per query entity.
    pub k: usize,
    /// Guidance strength.
    pub gamma: f64,
    /// Replay regularizer weight.
    pub mu: f64,
    /// Softmax temperature of the guidance scorer.
    pub temperature: f64,
    pub lr: f64,
    /// Maximum epochs per task.
    pub epochs: usize,
    /// Early-stopping patience on validation MRR.
    pub patience: usize,
    pub dm_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub dm_layers: usize,
    pub dm_epochs: usize,
    pub dm_batch: usize,
    pub dm_lr: f64,
    pub dm_ce_weight: f64,
    pub dm_subject_weight: f64,
    /// Reservoir capacity of the replay buffer baseline.
    pub er_capacity: usize,
    /// Reverse chains per denoiser call.
    pub gen_batch: usize,
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Dgar,
            ablations: Ablations::default(),
            seed: 0,
            dim: 200,
            layers: 3,
            window: 3,
            k: 35,
            gamma: 1.0,
            mu: 1.0,
            temperature: 0.5,
            lr: 1e-3,
            epochs: 30,
            patience: 3,
            dm_steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            dm_layers: 2,
            dm_epochs: 10,
            dm_batch: 128,
            dm_lr: 1e-3,
            dm_ce_weight: 1.0,
            dm_subject_weight: 1.0,
            er_capacity: 5000,
            gen_batch: 64,
            parallelism: Parallelism::default(),
        }
    }
}

impl TrainConfig {
    /// Small settings sized for the synthetic stream.
    pub fn toy() -> Self {
        Self {
            dim: 24,
            layers: 2,
            window: 3,
            k: 3,
            lr: 0.01,
            epochs: 40,
            patience: 3,
            dm_steps: 20,
            beta_end: 0.2,
            dm_epochs: 15,
            dm_batch: 64,
            dm_lr: 3e-3,
            er_capacity: 1000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method != Method::Dgar && self.ablations.any() {
            return Err(Error::Config(format!(
                "ablation flags apply to dgar only, not {}",
                self.method
            )));
        }
        let positive = [
            ("dim", self.dim),
            ("layers", self.layers),
            ("window", self.window),
            ("dm_steps", self.dm_steps),
            ("dm_batch", self.dm_batch),
            ("gen_batch", self.gen_batch),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("gamma", self.gamma), ("mu", self.mu)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        for (name, v) in [("lr", self.lr), ("dm_lr", self.dm_lr), ("temperature", self.temperature)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Guidance strength after ablations.
    pub fn effective_gamma(&self) -> f64 {
        if self.ablations.no_guider {
            0.0
        } else {
            self.gamma
        }
    }

    /// Replay regularizer weight after ablations.
    pub fn effective_mu(&self) -> f64 {
        if self.ablations.no_lr {
            0.0
        } else {
            self.mu
        }
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config is serializable")
    }

    /// Sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Value::Object(map) = self.to_json() {
            for (k, v) in map {
                let v = match v {
                    Value::String(s) => s,
                    other => other.to_string(),
                };
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    /// SHA-256 of the canonical text form.
    pub fn digest(&self) -> String {
        crate::checkpoint::sha256_hex(self.to_text().as_bytes())
    }

    /// Overrides fields from `(key, value)` strings, then validates.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let mut json = self.to_json();
        let map = json.as_object_mut().expect("config is an object");
        for (key, raw) in pairs {
            let slot = map
                .get_mut(key)
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
            *slot = coerce(key, slot, raw)?;
        }
        *self = serde_json::from_value(json).map_err(|e| Error::Config(e.to_string()))?;
        self.validate()
    }
}

fn coerce(key: &str, like: &Value, raw: &str) -> Result<Value> {
    let bad = || Error::Config(format!("bad value {raw:?} for {key}"));
    Ok(match like {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
        Value::Number(_) => {
            let v: f64 = raw.parse().map_err(|_| bad())?;
            serde_json::Number::from_f64(v).map(Value::Number).ok_or_else(bad)?
        }
        _ => Value::String(raw.to_string()),
    })
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::toy();
        cfg.ablations.no_lr = true;
        cfg.gamma = 0.25;
        let pairs = parse_pairs(&cfg.to_text()).unwrap();
        let mut back = TrainConfig::default();
        back.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn rejects_unknown_and_conflicting() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.apply([("nope", "1")]).is_err());
        assert!(cfg.apply([("dim", "x")]).is_err());
        let mut cfg = TrainConfig::default();
        assert!(cfg.apply([("method", "ft"), ("no_gr", "true")]).is_err());
    }
}
