//! Experiment files: defaults, then the preset, then the file's own keys.

use super::presets::preset;
use crate::error::{Error, Result};
use crate::harness::{MetricsConfig, RunConfig, TaskSchedule};
use crate::metrics::ScoreTable;
use crate::moe::MoENetworkConfig;
use crate::ppo::PPOConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub preset: Option<String>,
    #[serde(deserialize_with = "seeds_de")]
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Written into manifests; ignored on load.
    pub code_version: Option<String>,
    pub schedule: TaskSchedule,
    pub network: MoENetworkConfig,
    pub ppo: PPOConfig,
    pub metrics: MetricsConfig,
    pub scores: ScoreTable,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_run(RunConfig::default())
    }
}

impl ExperimentConfig {
    fn from_run(run: RunConfig) -> Self {
        Self {
            preset: None,
            seeds: vec![0],
            out: PathBuf::from("runs"),
            code_version: None,
            schedule: run.schedule,
            network: run.network,
            ppo: run.ppo,
            metrics: run.metrics,
            scores: run.scores,
        }
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            schedule: self.schedule.clone(),
            network: self.network.clone(),
            ppo: self.ppo.clone(),
            metrics: self.metrics.clone(),
            scores: self.scores.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        if s.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("seeds must be distinct"));
        }
        self.run_config().validate()
    }
}

/// Parses `"3"`, `"0..9"` (inclusive), `"0..=9"` or `"1,4,7"`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::config(format!("seeds: cannot parse `{s}`"));
    let num = |t: &str| t.trim().parse::<u64>().map_err(|_| bad());
    if let Some((a, b)) = s.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let (a, b) = (num(a)?, num(b)?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(num).collect()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SeedsEntry {
    List(Vec<u64>),
    One(u64),
    Text(String),
}

fn seeds_de<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<u64>, D::Error> {
    match SeedsEntry::deserialize(d)? {
        SeedsEntry::List(v) => Ok(v),
        SeedsEntry::One(s) => Ok(vec![s]),
        SeedsEntry::Text(t) => parse_seeds(&t).map_err(serde::de::Error::custom),
    }
}

/// Maps whose keys are data rather than field names; replaced wholesale.
const OPAQUE: [&str; 2] = ["reference", "random"];

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if !OPAQUE.contains(&k.as_str()) => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Resolves a JSON document against its preset. `cli_preset` takes
/// precedence over the document's own `preset` key.
pub fn resolve(doc: Value, cli_preset: Option<&str>) -> Result<ExperimentConfig> {
    if !doc.is_object() {
        return Err(Error::config("config must be a JSON object"));
    }
    let name = match cli_preset {
        Some(p) => Some(p.to_string()),
        None => match doc.get("preset") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(Error::config("preset must be a string")),
        },
    };
    let mut base = match &name {
        Some(n) => ExperimentConfig::from_run(preset(n)?),
        None => ExperimentConfig::default(),
    };
    base.preset = name.clone();
    let mut merged = serde_json::to_value(&base)?;
    merge(&mut merged, doc);
    if let Some(n) = name {
        merged["preset"] = Value::String(n);
    }
    let cfg: ExperimentConfig = serde_json::from_value(merged).map_err(|e| Error::config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, cli_preset: Option<&str>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    resolve(doc, cli_preset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::GameId;
    use crate::moe::{Architecture, RouterKind};
    use serde_json::json;

    #[test]
    fn empty_object_gives_defaults() {
        let c = resolve(json!({}), None).unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.ppo.num_envs, 128);
        assert_eq!(c.ppo.rollout_steps, 64);
        assert_eq!(c.ppo.update_epochs, 10);
        assert_eq!(c.ppo.num_minibatches, 8);
        assert_eq!(c.ppo.gae_gamma, 0.99);
        assert_eq!(c.ppo.gae_lambda, 0.7);
        assert_eq!(c.ppo.clip_eps, 0.2);
        assert_eq!(c.ppo.entropy_coef, 0.01);
        assert_eq!(c.ppo.vf_coef, 0.5);
        assert_eq!(c.ppo.max_grad_norm, 1.9);
        assert_eq!(c.ppo.lr, 9e-4);
        assert!(c.ppo.anneal);
        assert_eq!(c.network.layer_size, 64);
        assert_eq!(c.network.num_experts, 3);
        assert_eq!(c.ppo.total_timesteps, 10_000_000);
    }

    #[test]
    fn file_overrides_preset() {
        let c = resolve(json!({"preset": "crl-big-softmoe", "ppo": {"total_timesteps": 1200000}}), None).unwrap();
        assert_eq!(c.network.architecture, Architecture::Big);
        assert_eq!(c.ppo.total_timesteps, 1_200_000);
        assert_eq!(c.ppo.num_envs, 128);
        let c = resolve(json!({"preset": "crl-baseline"}), Some("mtrl-big-topk")).unwrap();
        assert_eq!(c.preset.as_deref(), Some("mtrl-big-topk"));
        assert!(c.network.uses(RouterKind::TopK));
    }

    #[test]
    fn errors_name_the_key() {
        let e = resolve(json!({"ppo": {"num_minibatches": 7}}), None).unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("num_minibatches")), "{e}");
        let e = resolve(json!({"ppo": {"learning_rate": 1.0}}), None).unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("learning_rate")), "{e}");
        assert!(resolve(json!({"bogus": 1}), None).is_err());
        assert!(resolve(json!({"preset": "crl-nope"}), None).is_err());
    }

    #[test]
    fn score_maps_are_replaced() {
        let c = resolve(json!({"scores": {"reference": {"SI": 10.0, "BO": 2.0, "Ast": 4.0}}}), None).unwrap();
        assert_eq!(c.scores.reference.len(), 3);
        assert_eq!(c.scores.reference[&GameId::SpaceInvaders], 10.0);
        let e = resolve(json!({"scores": {"reference": {"SI": 10.0}}}), None).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn seeds_forms() {
        assert_eq!(parse_seeds("0..9").unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(parse_seeds("2..=4").unwrap(), vec![2, 3, 4]);
        assert_eq!(parse_seeds("5").unwrap(), vec![5]);
        assert_eq!(parse_seeds("1,4, 7").unwrap(), vec![1, 4, 7]);
        assert!(parse_seeds("4..1").is_err());
        assert!(parse_seeds("a").is_err());
        assert_eq!(resolve(json!({"seeds": "0..2"}), None).unwrap().seeds, vec![0, 1, 2]);
        assert_eq!(resolve(json!({"seeds": [3, 1]}), None).unwrap().seeds, vec![3, 1]);
        assert!(resolve(json!({"seeds": [1, 1]}), None).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = resolve(json!({"preset": "crl-all-topk-re", "seeds": "0..2"}), None).unwrap();
        let again = resolve(serde_json::to_value(&c).unwrap(), None).unwrap();
        assert_eq!(c, again);
    }
}
