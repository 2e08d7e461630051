//! Experiment configuration: named profiles, JSON files and dotted
//! `key=value` overrides. Unknown keys are rejected everywhere.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{BatchOptions, SynthConfig};
use crate::error::{Error, Result};
use crate::networks::NetworkConfig;
use crate::spectral::StftConfig;
use crate::training::{StageSetup, TrainingRunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { snr_db: 0.0, seed: 2024 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: SynthConfig,
    pub corpus_seed: u64,
    pub network: NetworkConfig,
    pub stft: StftConfig,
    pub training: TrainingRunConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: SynthConfig::default(),
            corpus_seed: 7,
            network: NetworkConfig::default(),
            stft: StftConfig::default(),
            training: TrainingRunConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

pub const PROFILES: [&str; 2] = ["paper", "desk"];

impl ExperimentConfig {
    /// Full-size architecture and schedule.
    pub fn paper() -> Self {
        Self::default()
    }

    /// Small channels, latent and corpus with a short schedule for CPU runs.
    pub fn desk() -> Self {
        Self {
            corpus: SynthConfig {
                speakers: 40,
                test_speakers: 4,
                utterances_per_speaker: 8,
                noise_sources: 40,
                test_noise_sources: 4,
                utterances_per_noise: 8,
                split_fractions: [0.5, 0.4, 0.1],
                min_secs: 1.0,
                max_secs: 2.0,
            },
            corpus_seed: 7,
            network: NetworkConfig::desk(),
            stft: StftConfig::default(),
            training: TrainingRunConfig {
                lr: 1e-3,
                disc_lr: 2.7e-4,
                max_epochs: 40,
                batch: BatchOptions {
                    batch_size: 4,
                    snr_range: (-10.0, 15.0),
                    segment_secs: Some(0.5),
                },
                ..TrainingRunConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!(
                "unknown profile {other:?}; expected one of {PROFILES:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.corpus.validate().map_err(wrap)?;
        self.network.validate().map_err(wrap)?;
        self.stft.validate().map_err(wrap)?;
        self.training.validate().map_err(wrap)?;
        if self.stft.num_bins() != crate::networks::CONV_BINS + 1 {
            return Err(Error::Config(format!(
                "networks need fft_length {} (257 bins), got {}",
                2 * crate::networks::CONV_BINS,
                self.stft.fft_length
            )));
        }
        Ok(())
    }

    pub fn setup(&self) -> StageSetup {
        StageSetup {
            run: self.training.clone(),
            network: self.network.clone(),
            stft: self.stft,
        }
    }

    fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    fn from_value(v: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overlays a JSON document onto `self`. Every key must already exist.
    pub fn merge_json(&self, doc: &Value) -> Result<Self> {
        let mut base = self.to_value();
        merge(&mut base, doc, "")?;
        Self::from_value(base)
    }

    pub fn merge_file(&self, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let doc: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.merge_json(&doc)
    }

    /// Applies one `dotted.key=value` override. The value is parsed as JSON
    /// and falls back to a plain string.
    pub fn with_override(&self, assignment: &str) -> Result<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = value;
        for part in key.split('.').rev() {
            if part.is_empty() {
                return Err(Error::Config(format!("empty key segment in {key:?}")));
            }
            doc = Value::Object([(part.to_string(), doc)].into_iter().collect());
        }
        self.merge_json(&doc)
    }

    /// Every leaf key in dotted form with its JSON value.
    pub fn flat_keys(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        flatten(&self.to_value(), "", &mut out);
        out
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn merge(base: &mut Value, doc: &Value, path: &str) -> Result<()> {
    match (base, doc) {
        (Value::Object(b), Value::Object(d)) => {
            for (k, v) in d {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &sub)?,
                    None => return Err(Error::Config(format!("unknown config key {sub}"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            if slot.is_object() && !v.is_object() {
                return Err(Error::Config(format!("config key {path} is a section, not a value")));
            }
            *slot = v.clone();
            Ok(())
        }
    }
}

fn flatten(v: &Value, path: &str, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                flatten(v, &sub, out);
            }
        }
        other => out.push((path.to_string(), other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_defaults() {
        let c = ExperimentConfig::paper();
        assert_eq!(c.training.weights.beta, 0.01);
        assert_eq!(c.training.weights.alpha, 1.0);
        assert_eq!(c.training.lr, 3e-4);
        assert_eq!(c.training.disc_lr, 8e-5);
        assert_eq!(c.training.batch.batch_size, 15);
        assert_eq!((c.training.lr_halving_patience, c.training.early_stop_patience), (3, 20));
        assert_eq!(c.network.latent_dim, 128);
        assert_eq!(c.network.channels, vec![32, 64, 128, 128, 256, 256]);
        c.validate().unwrap();
        ExperimentConfig::desk().validate().unwrap();
    }

    #[test]
    fn overrides_apply_and_reject_unknown_keys() {
        let c = ExperimentConfig::desk();
        let d = c.with_override("training.weights.beta=0.5").unwrap();
        assert_eq!(d.training.weights.beta, 0.5);
        let d = d.with_override("training.stage=finetune_adv").unwrap();
        assert_eq!(d.training.stage, crate::training::Stage::FinetuneAdv);
        let d = d.with_override("training.batch.segment_secs=null").unwrap();
        assert_eq!(d.training.batch.segment_secs, None);
        for bad in ["training.weights.gamma=1", "nope=3", "training=4", "training.lr", "training.lr=-1"] {
            assert!(matches!(c.with_override(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn flat_keys_cover_nested_sections() {
        let keys: Vec<String> = ExperimentConfig::paper().flat_keys().into_iter().map(|(k, _)| k).collect();
        for k in ["training.weights.beta", "network.latent_dim", "stft.hop", "corpus.speakers", "eval.snr_db"] {
            assert!(keys.iter().any(|x| x == k), "{k}");
        }
    }

    #[test]
    fn json_round_trip() {
        let c = ExperimentConfig::desk();
        let v: Value = serde_json::from_str(&c.to_json_pretty()).unwrap();
        assert_eq!(ExperimentConfig::paper().merge_json(&v).unwrap(), c);
    }
}
