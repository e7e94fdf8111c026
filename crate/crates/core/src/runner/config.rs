//! Flat `key = value` experiment configuration.
//!
//! Values are strings, numbers, booleans, comma lists or inclusive integer
//! ranges `a..b`. Command-line flags are applied on top of the file by
//! inserting into the same map before it is resolved.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::envs::EnvName;
use crate::error::{Error, Result};
use crate::geometry::RegularizerKind;
use crate::learners::{Algorithm, TrainConfig, UpdateConfig};

/// Keys that a config file or manifest may set.
pub const KEYS: &[&str] = &[
    "env",
    "algo",
    "seeds",
    "steps",
    "epsilon",
    "beta",
    "lambda_pen",
    "regularizer",
    "entropy_coef",
    "saturation_c",
    "lr",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "batch_size",
    "rollout_len",
    "gamma",
    "gae_lambda",
    "epochs",
    "minibatch_size",
    "value_coef",
    "max_grad_norm",
    "normalize_advantages",
    "per_minibatch_norm",
    "allow_zero_beta",
    "hidden",
    "eval_every",
    "eval_episodes",
    "out",
];

/// Manifest bookkeeping keys, accepted and ignored when a manifest is read back as a config.
pub const METADATA_KEYS: &[&str] = &["status", "started_unix", "finished_unix", "code_version", "code_hash", "error", "final_eval"];

/// Ordered key/value pairs as read from text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`, got '{raw}'", lineno + 1)))?;
            let key = key.trim().replace('-', "_");
            if !KEYS.contains(&key.as_str()) && !METADATA_KEYS.contains(&key.as_str()) {
                return Err(Error::Parse(format!("line {}: unknown key '{key}'", lineno + 1)));
            }
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Parse(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
        }
        Ok(ConfigMap { entries })
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(Error::invalid(format!("unknown config key '{key}'")));
        }
        self.entries.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Parse(format!("{key} = '{v}': {e}")))
            })
            .transpose()
    }
}

/// Parses `a..b` (inclusive), `a, b, c` or a single integer.
pub fn parse_seed_list(text: &str) -> Result<Vec<u64>> {
    let text = text.trim();
    let int = |s: &str| {
        s.trim()
            .parse::<u64>()
            .map_err(|e| Error::Parse(format!("seed '{}': {e}", s.trim())))
    };
    let seeds = if let Some((a, b)) = text.split_once("..") {
        let (a, b) = (int(a)?, int(b.trim_start_matches('='))?);
        if b < a {
            return Err(Error::Parse(format!("empty seed range '{text}'")));
        }
        (a..=b).collect()
    } else {
        text.split(',').map(int).collect::<Result<Vec<_>>>()?
    };
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err(Error::invalid(format!("seeds must be distinct: '{text}'")));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("at least one seed is required"));
    }
    Ok(seeds)
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Parse(format!("{key} = '{v}': expected a boolean"))),
    }
}

/// A fully resolved experiment: one training configuration run under several seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub output_root: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Resolves a key map against the defaults.
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        let env: EnvName = map
            .parsed("env")?
            .ok_or_else(|| Error::invalid("missing required setting 'env'"))?;
        let algorithm: Algorithm = map
            .parsed("algo")?
            .ok_or_else(|| Error::invalid("missing required setting 'algo'"))?;
        let mut update = UpdateConfig::new(algorithm);
        let s = &mut update.surrogate;
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = map.parsed($key)? {
                    $field = v;
                }
            };
        }
        set!("epsilon", s.epsilon);
        set!("beta", s.beta);
        set!("lambda_pen", s.lambda_pen);
        set!("entropy_coef", s.entropy_coef);
        if let Some(v) = map.get("saturation_c") {
            s.saturation_c = match v {
                "" | "none" | "off" => None,
                v => Some(v.parse().map_err(|e| Error::Parse(format!("saturation_c = '{v}': {e}")))?),
            };
        }
        if let Some(kind) = map.parsed::<RegularizerKind>("regularizer")? {
            s.regularizer_kind = kind;
        }
        set!("lr", update.adam.learning_rate);
        set!("adam_beta1", update.adam.beta1);
        set!("adam_beta2", update.adam.beta2);
        set!("adam_eps", update.adam.eps);
        set!("epochs", update.epochs);
        set!("minibatch_size", update.minibatch_size);
        set!("value_coef", update.value_coef);
        set!("max_grad_norm", update.max_grad_norm);
        for (key, field) in [
            ("normalize_advantages", &mut update.normalize_advantages),
            ("per_minibatch_norm", &mut update.per_minibatch_norm),
            ("allow_zero_beta", &mut update.allow_zero_beta),
        ] {
            if let Some(v) = map.get(key) {
                *field = parse_bool(key, v)?;
            }
        }

        let mut train = TrainConfig::new(env, update);
        set!("steps", train.total_steps);
        set!("gamma", train.gamma);
        set!("gae_lambda", train.gae_lambda);
        set!("eval_every", train.eval_every);
        set!("eval_episodes", train.eval_episodes);
        let bs: Option<usize> = map.parsed("batch_size")?;
        let rl: Option<usize> = map.parsed("rollout_len")?;
        train.rollout_len = match (bs, rl) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::invalid(format!(
                    "batch_size ({a}) and rollout_len ({b}) name the same setting and disagree"
                )))
            }
            (Some(a), _) | (None, Some(a)) => a,
            (None, None) => train.rollout_len,
        };
        if let Some(h) = map.get("hidden") {
            train.hidden = h
                .split(',')
                .map(|w| {
                    w.trim()
                        .parse::<usize>()
                        .map_err(|e| Error::Parse(format!("hidden = '{h}': {e}")))
                })
                .collect::<Result<_>>()?;
        }
        train.validate()?;

        let seeds = parse_seed_list(map.get("seeds").unwrap_or("0"))?;
        Ok(ExperimentConfig {
            train,
            seeds,
            output_root: map.get("out").map(PathBuf::from),
        })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_map(&ConfigMap::parse(text)?)
    }

    /// Key/value text that resolves back to this configuration. Floats use
    /// Rust's shortest round-trip formatting, so the snapshot is exact.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let u = &t.update;
        let s = &u.surrogate;
        let seeds = self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(", ");
        let hidden = t.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(", ");
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("env", t.env.as_str().into());
        kv("algo", u.algorithm.as_str().into());
        kv("seeds", seeds);
        kv("steps", t.total_steps.to_string());
        kv("epsilon", format!("{:?}", s.epsilon));
        kv("beta", format!("{:?}", s.beta));
        kv("lambda_pen", format!("{:?}", s.lambda_pen));
        kv("regularizer", s.regularizer_kind.to_string());
        kv("entropy_coef", format!("{:?}", s.entropy_coef));
        kv(
            "saturation_c",
            s.saturation_c.map_or("none".into(), |c| format!("{c:?}")),
        );
        kv("lr", format!("{:?}", u.adam.learning_rate));
        kv("adam_beta1", format!("{:?}", u.adam.beta1));
        kv("adam_beta2", format!("{:?}", u.adam.beta2));
        kv("adam_eps", format!("{:?}", u.adam.eps));
        kv("rollout_len", t.rollout_len.to_string());
        kv("gamma", format!("{:?}", t.gamma));
        kv("gae_lambda", format!("{:?}", t.gae_lambda));
        kv("epochs", u.epochs.to_string());
        kv("minibatch_size", u.minibatch_size.to_string());
        kv("value_coef", format!("{:?}", u.value_coef));
        kv("max_grad_norm", format!("{:?}", u.max_grad_norm));
        kv("normalize_advantages", u.normalize_advantages.to_string());
        kv("per_minibatch_norm", u.per_minibatch_norm.to_string());
        kv("allow_zero_beta", u.allow_zero_beta.to_string());
        kv("hidden", hidden);
        kv("eval_every", t.eval_every.to_string());
        kv("eval_episodes", t.eval_episodes.to_string());
        out
    }

    /// Identity of the configuration with the seeds left out; runs sharing it
    /// are aggregated together.
    pub fn cell_key(&self) -> String {
        self.to_text()
            .lines()
            .filter(|l| !l.starts_with("seeds "))
            .collect::<Vec<_>>()
            .join("; ")
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        ExperimentConfig {
            seeds: vec![seed],
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seed_list("0..3").unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(parse_seed_list("5").unwrap(), vec![5]);
        assert_eq!(parse_seed_list("1, 4,9").unwrap(), vec![1, 4, 9]);
        assert!(parse_seed_list("3..1").is_err());
        assert!(parse_seed_list("1,1").is_err());
        assert!(parse_seed_list("a").is_err());
    }

    #[test]
    fn parses_file_with_comments_and_defaults() {
        let cfg = ExperimentConfig::from_text(
            "# cartpole baseline\nenv = cartpole\nalgo = btrpo\nseeds = 0..3\nsteps = 4096\nbeta = 0.5 # weaker\nhidden = 32, 32\n",
        )
        .unwrap();
        assert_eq!(cfg.seeds, vec![0, 1, 2, 3]);
        assert_eq!(cfg.train.total_steps, 4096);
        assert_eq!(cfg.train.update.surrogate.beta, 0.5);
        assert_eq!(cfg.train.hidden, vec![32, 32]);
        assert_eq!(cfg.train.rollout_len, 2048);
        assert_eq!(cfg.train.update.surrogate.epsilon, 0.2);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ConfigMap::parse("env cartpole").is_err());
        assert!(ConfigMap::parse("colour = red").is_err());
        assert!(ConfigMap::parse("env = a\nenv = b").is_err());
        assert!(ExperimentConfig::from_text("env = cartpole\nalgo = sac").is_err());
        assert!(ExperimentConfig::from_text("algo = ppo").is_err());
        assert!(ExperimentConfig::from_text("env = cartpole\nalgo = ppo\nbatch_size = 64\nrollout_len = 128").is_err());
        assert!(ExperimentConfig::from_text("env = cartpole\nalgo = ppo\nsteps = 10").is_err());
    }

    #[test]
    fn text_round_trip_is_exact() {
        let cfg = ExperimentConfig::from_text(
            "env = mountaincar_continuous\nalgo = bppo_reg\nregularizer = bc\nlambda_pen = 0.03\nlr = 0.0003\nentropy_coef = 0.01\nsaturation_c = 10\nseeds = 2, 7\nsteps = 8192\nbatch_size = 1024\n",
        )
        .unwrap();
        let back = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert!(!cfg.cell_key().contains("seeds"));
        assert_eq!(cfg.with_seed(2).cell_key(), cfg.cell_key());
    }
}
