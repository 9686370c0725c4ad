//! Line-oriented `key = value` run configuration with per-key provenance.
//!
//! ```text
//! # Dungeon Run, independent learners
//! algorithm = ppo
//! env = dungeon_run
//! seed = 3
//! dungeon_run.pink_dragons = 1
//! ```

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

use crate::envs::{
    BatonRelay, BatonRelayConfig, DungeonRun, DungeonRunConfig, GroupEnv, SimpleSpread, SimpleSpreadConfig,
};
use crate::trainer::{Algorithm, Hyperparameters, TrainSetup};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{0}` given twice")]
    Duplicate(String),
    #[error("key `{key}`: invalid value {value:?} ({reason})")]
    Invalid {
        key: String,
        value: String,
        reason: String,
    },
    #[error("key `{key}` only applies to attention critics, not {algorithm}")]
    AttentionKey { key: String, algorithm: &'static str },
}

/// One `key = value` line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits text into entries. Blank lines and `#` comments are skipped;
/// a `#` after a value starts a trailing comment.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            message: format!("expected `key = value`, got {line:?}"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                message: "empty key or value".into(),
            });
        }
        if out.iter().any(|e| e.key == key) {
            return Err(ConfigError::Duplicate(key.into()));
        }
        out.push(Entry {
            line: i + 1,
            key: key.into(),
            value: value.into(),
        });
    }
    Ok(out)
}

/// Parses `key=value` command-line overrides.
pub fn parse_overrides<S: AsRef<str>>(pairs: &[S]) -> Result<Vec<Entry>, ConfigError> {
    parse_entries(&pairs.iter().map(|p| p.as_ref()).collect::<Vec<_>>().join("\n"))
}

/// Later entries replace earlier ones with the same key.
pub fn merge_entries(base: Vec<Entry>, overrides: Vec<Entry>) -> Vec<Entry> {
    let mut out: Vec<Entry> = base
        .into_iter()
        .filter(|b| !overrides.iter().any(|o| o.key == b.key))
        .collect();
    out.extend(overrides);
    out
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Invalid {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

pub(crate) fn invalid(key: &str, value: impl Display, reason: &str) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        value: value.to_string(),
        reason: reason.into(),
    }
}

/// Whether a resolved key came from the built-in defaults or the user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Source {
    Default,
    User,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Default => "default",
            Source::User => "user",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EnvConfig {
    SimpleSpread(SimpleSpreadConfig),
    DungeonRun(DungeonRunConfig),
    BatonRelay(BatonRelayConfig),
}

impl EnvConfig {
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "simple_spread" => Some(EnvConfig::SimpleSpread(SimpleSpreadConfig::default())),
            "dungeon_run" => Some(EnvConfig::DungeonRun(DungeonRunConfig::default())),
            "baton_relay" => Some(EnvConfig::BatonRelay(BatonRelayConfig::default())),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::SimpleSpread(_) => "simple_spread",
            EnvConfig::DungeonRun(_) => "dungeon_run",
            EnvConfig::BatonRelay(_) => "baton_relay",
        }
    }

    pub fn build(&self) -> Box<dyn GroupEnv> {
        match *self {
            EnvConfig::SimpleSpread(c) => Box::new(SimpleSpread::new(c)),
            EnvConfig::DungeonRun(c) => Box::new(DungeonRun::new(c)),
            EnvConfig::BatonRelay(c) => Box::new(BatonRelay::new(c)),
        }
    }

    pub fn hyperparameters(&self) -> Hyperparameters {
        match self {
            EnvConfig::SimpleSpread(_) => Hyperparameters::simple_spread(),
            _ => Hyperparameters::general(),
        }
    }

    pub fn default_max_steps(&self) -> u64 {
        match self {
            EnvConfig::SimpleSpread(_) => 100_000,
            _ => 150_000,
        }
    }

    fn entries(&self) -> Vec<(String, String)> {
        let p = self.name();
        let kv = |k: &str, v: String| (format!("{p}.{k}"), v);
        match self {
            EnvConfig::SimpleSpread(c) => vec![
                kv("agents", c.agents.to_string()),
                kv("landmarks", c.landmarks.to_string()),
                kv("episode_length", c.episode_length.to_string()),
                kv("agent_size", c.agent_size.to_string()),
                kv("collision_penalty", c.collision_penalty.to_string()),
            ],
            EnvConfig::DungeonRun(c) => vec![
                kv("size", c.size.to_string()),
                kv("agents", c.agents.to_string()),
                kv("dragon_move_prob", c.dragon_move_prob.to_string()),
                kv("min_portal_distance", c.min_portal_distance.to_string()),
                kv("time_limit", c.time_limit.to_string()),
                kv("pink_dragons", c.pink_dragons.to_string()),
                kv("pink_move_prob", c.pink_move_prob.to_string()),
            ],
            EnvConfig::BatonRelay(c) => vec![
                kv("size", c.size.to_string()),
                kv("orbs", c.orbs.to_string()),
                kv("time_limit", c.time_limit.to_string()),
                kv("agent_penalty", c.agent_penalty.to_string()),
            ],
        }
    }

    fn apply(&mut self, key: &str, field: &str, value: &str) -> Result<(), ConfigError> {
        let unknown = || ConfigError::UnknownKey(key.into());
        match self {
            EnvConfig::SimpleSpread(c) => match field {
                "agents" => c.agents = parse_value(key, value)?,
                "landmarks" => c.landmarks = parse_value(key, value)?,
                "episode_length" => c.episode_length = parse_value(key, value)?,
                "agent_size" => c.agent_size = parse_value(key, value)?,
                "collision_penalty" => c.collision_penalty = parse_value(key, value)?,
                _ => return Err(unknown()),
            },
            EnvConfig::DungeonRun(c) => match field {
                "size" => c.size = parse_value(key, value)?,
                "agents" => c.agents = parse_value(key, value)?,
                "dragon_move_prob" => c.dragon_move_prob = parse_value(key, value)?,
                "min_portal_distance" => c.min_portal_distance = parse_value(key, value)?,
                "time_limit" => c.time_limit = parse_value(key, value)?,
                "pink_dragons" => c.pink_dragons = parse_value(key, value)?,
                "pink_move_prob" => c.pink_move_prob = parse_value(key, value)?,
                _ => return Err(unknown()),
            },
            EnvConfig::BatonRelay(c) => match field {
                "size" => c.size = parse_value(key, value)?,
                "orbs" => c.orbs = parse_value(key, value)?,
                "time_limit" => c.time_limit = parse_value(key, value)?,
                "agent_penalty" => c.agent_penalty = parse_value(key, value)?,
                _ => return Err(unknown()),
            },
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let p = self.name();
        let key = |k: &str| format!("{p}.{k}");
        let prob = |k: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(invalid(&key(k), v, "must lie in [0, 1]"))
            }
        };
        match *self {
            EnvConfig::SimpleSpread(c) => {
                if c.agents == 0 {
                    return Err(invalid(&key("agents"), c.agents, "need at least one agent"));
                }
                if c.landmarks == 0 {
                    return Err(invalid(&key("landmarks"), c.landmarks, "need at least one landmark"));
                }
                if c.episode_length == 0 {
                    return Err(invalid(&key("episode_length"), 0, "must be positive"));
                }
                if !(c.agent_size > 0.0 && c.agent_size.is_finite()) {
                    return Err(invalid(&key("agent_size"), c.agent_size, "must be positive"));
                }
                if !(c.collision_penalty >= 0.0 && c.collision_penalty.is_finite()) {
                    return Err(invalid(&key("collision_penalty"), c.collision_penalty, "must be non-negative"));
                }
            }
            EnvConfig::DungeonRun(c) => {
                if c.size < 4 {
                    return Err(invalid(&key("size"), c.size, "grid must be at least 4 wide"));
                }
                if c.agents == 0 {
                    return Err(invalid(&key("agents"), c.agents, "need at least one agent"));
                }
                if c.min_portal_distance < 0 || c.min_portal_distance > 2 * (c.size - 1) {
                    return Err(invalid(
                        &key("min_portal_distance"),
                        c.min_portal_distance,
                        "must fit inside the grid",
                    ));
                }
                if c.agents + c.pink_dragons + 3 > (c.size * c.size) as usize {
                    return Err(invalid(&key("agents"), c.agents, "too many entities for the grid"));
                }
                if c.time_limit == 0 {
                    return Err(invalid(&key("time_limit"), 0, "must be positive"));
                }
                prob("dragon_move_prob", c.dragon_move_prob)?;
                prob("pink_move_prob", c.pink_move_prob)?;
            }
            EnvConfig::BatonRelay(c) => {
                if c.size < 3 {
                    return Err(invalid(&key("size"), c.size, "grid must be at least 3 wide"));
                }
                if c.orbs == 0 {
                    return Err(invalid(&key("orbs"), 0, "need at least one orb"));
                }
                if c.time_limit == 0 {
                    return Err(invalid(&key("time_limit"), 0, "must be positive"));
                }
                if !(c.agent_penalty >= 0.0 && c.agent_penalty.is_finite()) {
                    return Err(invalid(&key("agent_penalty"), c.agent_penalty, "must be non-negative"));
                }
            }
        }
        Ok(())
    }
}

const ATTENTION_KEYS: [&str; 3] = ["embedding", "attention_layers", "heads"];

/// A fully resolved training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub env: EnvConfig,
    pub seed: u64,
    pub max_steps: u64,
    pub hyper: Hyperparameters,
    /// Residual self-attention blocks; only one is supported.
    pub attention_layers: usize,
    pub n_max: Option<usize>,
    pub output_dir: Option<String>,
}

/// A config together with where each key's value came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub config: RunConfig,
    pub provenance: BTreeMap<String, Source>,
}

impl RunConfig {
    pub fn defaults(algorithm: Algorithm, env: EnvConfig) -> Self {
        RunConfig {
            algorithm,
            env,
            seed: 0,
            max_steps: env.default_max_steps(),
            hyper: env.hyperparameters(),
            attention_layers: 1,
            n_max: None,
            output_dir: None,
        }
    }

    pub fn parse(text: &str) -> Result<Resolved, ConfigError> {
        Self::from_entries(&parse_entries(text)?)
    }

    pub fn from_entries(entries: &[Entry]) -> Result<Resolved, ConfigError> {
        let lookup = |k: &str| entries.iter().find(|e| e.key == k).map(|e| e.value.as_str());
        let algorithm = match lookup("algorithm") {
            Some(v) => v.parse().map_err(|e: String| invalid("algorithm", v, &e))?,
            None => Algorithm::Mapoca,
        };
        let env_name = lookup("env").unwrap_or("simple_spread");
        let env = EnvConfig::by_name(env_name).ok_or_else(|| invalid("env", env_name, "unknown environment"))?;
        let mut cfg = RunConfig::defaults(algorithm, env);
        for e in entries {
            if e.key == "algorithm" || e.key == "env" {
                continue;
            }
            if !algorithm.uses_attention() && ATTENTION_KEYS.contains(&e.key.as_str()) {
                return Err(ConfigError::AttentionKey {
                    key: e.key.clone(),
                    algorithm: algorithm.name(),
                });
            }
            cfg.apply(&e.key, &e.value)?;
        }
        cfg.validate()?;
        let provenance = cfg
            .to_entries()
            .into_iter()
            .map(|(k, _)| {
                let src = if lookup(&k).is_some() { Source::User } else { Source::Default };
                (k, src)
            })
            .collect();
        Ok(Resolved { config: cfg, provenance })
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let h = &mut self.hyper;
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "max_steps" => self.max_steps = parse_value(key, value)?,
            "minibatch" => h.minibatch = parse_value(key, value)?,
            "buffer" => h.buffer = parse_value(key, value)?,
            "epochs" => h.epochs = parse_value(key, value)?,
            "lr" => h.learning_rate = parse_value(key, value)?,
            "beta" => h.beta = parse_value(key, value)?,
            "epsilon" => h.epsilon = parse_value(key, value)?,
            "lambda" => h.lambda = parse_value(key, value)?,
            "gamma" => h.gamma = parse_value(key, value)?,
            "hidden_units" => h.hidden_units = parse_value(key, value)?,
            "hidden_layers" => h.hidden_layers = parse_value(key, value)?,
            "embedding" => h.embedding = parse_value(key, value)?,
            "heads" => h.heads = parse_value(key, value)?,
            "attention_layers" => self.attention_layers = parse_value(key, value)?,
            "normalize_advantages" => h.normalize_advantages = parse_value(key, value)?,
            "n_max" => self.n_max = Some(parse_value(key, value)?),
            "output_dir" => self.output_dir = Some(value.to_string()),
            _ => {
                let (prefix, field) = key.split_once('.').ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
                if prefix != self.env.name() {
                    return Err(ConfigError::UnknownKey(key.into()));
                }
                self.env.apply(key, field, value)?;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let h = &self.hyper;
        for (k, v) in [
            ("minibatch", h.minibatch),
            ("buffer", h.buffer),
            ("epochs", h.epochs),
            ("hidden_units", h.hidden_units),
            ("hidden_layers", h.hidden_layers),
        ] {
            if v == 0 {
                return Err(invalid(k, v, "must be positive"));
            }
        }
        if !(h.learning_rate > 0.0 && h.learning_rate.is_finite()) {
            return Err(invalid("lr", h.learning_rate, "must be positive"));
        }
        if !(h.beta >= 0.0 && h.beta.is_finite()) {
            return Err(invalid("beta", h.beta, "must be non-negative"));
        }
        if !(h.epsilon > 0.0 && h.epsilon < 1.0) {
            return Err(invalid("epsilon", h.epsilon, "must lie in (0, 1)"));
        }
        for (k, v) in [("lambda", h.lambda), ("gamma", h.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(k, v, "must lie in [0, 1]"));
            }
        }
        if self.algorithm.uses_attention() {
            if h.embedding == 0 || h.heads == 0 || !h.embedding.is_multiple_of(h.heads) {
                return Err(invalid("heads", h.heads, "must divide the embedding size"));
            }
            if self.attention_layers != 1 {
                return Err(invalid("attention_layers", self.attention_layers, "only one attention block is supported"));
            }
        }
        if let Some(n) = self.n_max {
            if self.algorithm != Algorithm::Coma {
                return Err(invalid("n_max", n, "only used by coma"));
            }
            let needed = self.env.build().reset(0).agents.len();
            if n < needed {
                return Err(invalid("n_max", n, "smaller than the initial population"));
            }
        }
        self.env.validate()
    }

    /// Every key with its resolved value, in a stable order.
    pub fn to_entries(&self) -> Vec<(String, String)> {
        let h = &self.hyper;
        let mut out: Vec<(String, String)> = vec![
            ("algorithm".into(), self.algorithm.name().into()),
            ("env".into(), self.env.name().into()),
            ("seed".into(), self.seed.to_string()),
            ("max_steps".into(), self.max_steps.to_string()),
            ("minibatch".into(), h.minibatch.to_string()),
            ("buffer".into(), h.buffer.to_string()),
            ("epochs".into(), h.epochs.to_string()),
            ("lr".into(), h.learning_rate.to_string()),
            ("beta".into(), h.beta.to_string()),
            ("epsilon".into(), h.epsilon.to_string()),
            ("lambda".into(), h.lambda.to_string()),
            ("gamma".into(), h.gamma.to_string()),
            ("hidden_units".into(), h.hidden_units.to_string()),
            ("hidden_layers".into(), h.hidden_layers.to_string()),
        ];
        if self.algorithm.uses_attention() {
            out.push(("embedding".into(), h.embedding.to_string()));
            out.push(("attention_layers".into(), self.attention_layers.to_string()));
            out.push(("heads".into(), h.heads.to_string()));
        }
        out.push(("normalize_advantages".into(), h.normalize_advantages.to_string()));
        if let Some(n) = self.n_max {
            out.push(("n_max".into(), n.to_string()));
        }
        if let Some(d) = &self.output_dir {
            out.push(("output_dir".into(), d.clone()));
        }
        out.extend(self.env.entries());
        out
    }

    pub fn to_text(&self) -> String {
        self.to_entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            algorithm: self.algorithm,
            hyper: self.hyper,
            seed: self.seed,
            max_steps: self.max_steps,
            n_max: self.n_max,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn general_defaults() {
        let r = RunConfig::parse("env = dungeon_run").unwrap();
        let h = r.config.hyper;
        assert_eq!(
            (h.minibatch, h.buffer, h.epochs, h.hidden_units, h.hidden_layers, h.heads, h.embedding),
            (1024, 10240, 3, 256, 2, 4, 256)
        );
        assert_eq!((h.learning_rate, h.gamma, h.lambda, h.epsilon, h.beta), (0.0003, 0.99, 0.95, 0.2, 0.01));
        assert_eq!(r.provenance["env"], Source::User);
        assert_eq!(r.provenance["buffer"], Source::Default);
    }

    #[test]
    fn simple_spread_defaults() {
        let h = RunConfig::parse("").unwrap().config.hyper;
        assert_eq!((h.minibatch, h.buffer, h.hidden_units, h.embedding), (512, 5120, 128, 128));
    }

    #[test]
    fn rejections_name_the_key() {
        let cases = [
            ("bogus = 1", "bogus"),
            ("gamma = 1.5", "gamma"),
            ("algorithm = ppo\nheads = 2", "heads"),
            ("algorithm = coma\nembedding = 64", "embedding"),
            ("env = dungeon_run\nbaton_relay.orbs = 3", "baton_relay.orbs"),
            ("minibatch = lots", "minibatch"),
            ("heads = 3", "heads"),
            ("env = dungeon_run\ndungeon_run.dragon_move_prob = 2", "dungeon_run.dragon_move_prob"),
        ];
        for (text, key) in cases {
            let err = RunConfig::parse(text).unwrap_err().to_string();
            assert!(err.contains(key), "{text:?} gave {err}");
        }
        assert!(matches!(RunConfig::parse("seed = 1\nseed = 2"), Err(ConfigError::Duplicate(_))));
        assert!(matches!(RunConfig::parse("no equals"), Err(ConfigError::Syntax { line: 1, .. })));
    }

    #[test]
    fn text_round_trips() {
        let text = "algorithm = coma\nenv = baton_relay\nseed = 9\nlr = 0.00025\nn_max = 4\n# note\nbaton_relay.orbs = 3 # fewer\n";
        let a = RunConfig::parse(text).unwrap();
        assert_eq!(a.config.n_max, Some(4));
        let b = RunConfig::parse(&a.config.to_text()).unwrap();
        assert_eq!(a.config, b.config);
        assert_eq!(a.provenance["baton_relay.orbs"], Source::User);
        assert_eq!(a.provenance["baton_relay.size"], Source::Default);
    }

    #[test]
    fn overrides_replace_file_values() {
        let base = parse_entries("seed = 1\nenv = dungeon_run").unwrap();
        let o = parse_overrides(&["seed=5"]).unwrap();
        let r = RunConfig::from_entries(&merge_entries(base, o)).unwrap();
        assert_eq!(r.config.seed, 5);
        assert!(matches!(r.config.env, EnvConfig::DungeonRun(_)));
    }
}
