//! Experiment configuration in `key = value` text form.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, Signed};
use thiserror::Error;

use crate::fedavg::{TrainConfig, DEFAULT_BATCH, DEFAULT_EPOCHS, DEFAULT_ETA, DEFAULT_OFFSET};
use crate::fixedpoint::{format_decimal, parse_decimal, FixedPointCodec, DEFAULT_KAPPA, DEFAULT_ROUNDING};
use crate::pctd::PublicKey;
use crate::protocols::{MaskingParams, DEFAULT_SIGMA};
use crate::rewards::{RewardConfig, DEFAULT_REWARD_KAPPA};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: `{key}` given twice")]
    DuplicateKey { line: usize, key: String },
    #[error("`{key}`: cannot parse `{value}`")]
    Value { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Discard,
    Retransmit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardSchedule {
    PerRound,
    Final,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Memory,
    Socket,
}

macro_rules! keyword_enum {
    ($ty:ty, $($variant:path => $text:literal),+) => {
        impl FromStr for $ty {
            type Err = ();
            fn from_str(s: &str) -> Result<Self, ()> {
                match s {
                    $($text => Ok($variant),)+
                    _ => Err(()),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $text,)+ })
            }
        }
    };
}

keyword_enum!(Strategy, Strategy::Discard => "discard", Strategy::Retransmit => "retransmit");
keyword_enum!(RewardSchedule, RewardSchedule::PerRound => "per_round", RewardSchedule::Final => "final", RewardSchedule::Off => "off");
keyword_enum!(TransportKind, TransportKind::Memory => "memory", TransportKind::Socket => "socket");

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n: usize,
    pub rounds: u32,
    pub model_dim: usize,
    pub zeta: u32,
    pub rounding: u32,
    pub kappa: u32,
    pub sigma: u32,
    pub eta: f64,
    pub batch: usize,
    pub epochs: usize,
    pub budget: BigRational,
    pub reward_kappa: u32,
    pub rewards: RewardSchedule,
    pub dropout_rate: f64,
    pub strategy: Strategy,
    pub retransmit_success_rate: f64,
    pub window_ticks: u64,
    pub offset: u32,
    pub samples: usize,
    pub noise: f64,
    pub transport: TransportKind,
    pub timing: bool,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n: 4,
            rounds: 3,
            model_dim: 3,
            zeta: 256,
            rounding: DEFAULT_ROUNDING,
            kappa: DEFAULT_KAPPA,
            sigma: DEFAULT_SIGMA,
            eta: DEFAULT_ETA,
            batch: DEFAULT_BATCH,
            epochs: DEFAULT_EPOCHS,
            budget: BigRational::from_integer(36.into()),
            reward_kappa: DEFAULT_REWARD_KAPPA,
            rewards: RewardSchedule::PerRound,
            dropout_rate: 0.0,
            strategy: Strategy::Discard,
            retransmit_success_rate: 0.5,
            window_ticks: 10,
            offset: DEFAULT_OFFSET,
            samples: 100,
            noise: 0.1,
            transport: TransportKind::Memory,
            timing: false,
            seed: 1,
        }
    }
}

pub const KEYS: [&str; 23] = [
    "n",
    "T",
    "model_dim",
    "zeta",
    "L",
    "kappa",
    "sigma",
    "eta",
    "B",
    "E",
    "b_t",
    "reward_kappa",
    "rewards",
    "dropout_rate",
    "strategy",
    "retransmit_success_rate",
    "window_ticks",
    "offset",
    "samples",
    "noise",
    "transport",
    "timing",
    "seed",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Value {
        key: key.into(),
        value: value.into(),
    })
}

impl ExperimentConfig {
    /// Starts from the defaults and applies every `key = value` line.
    /// Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line: i + 1,
                    key: key.into(),
                });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey {
                    line: i + 1,
                    key: key.into(),
                });
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "n" => self.n = parse(key, value)?,
            "T" => self.rounds = parse(key, value)?,
            "model_dim" => self.model_dim = parse(key, value)?,
            "zeta" => self.zeta = parse(key, value)?,
            "L" => self.rounding = parse(key, value)?,
            "kappa" => self.kappa = parse(key, value)?,
            "sigma" => self.sigma = parse(key, value)?,
            "eta" => self.eta = parse(key, value)?,
            "B" => self.batch = parse(key, value)?,
            "E" => self.epochs = parse(key, value)?,
            "b_t" => {
                self.budget = parse_decimal(value).map_err(|_| ConfigError::Value {
                    key: key.into(),
                    value: value.into(),
                })?
            }
            "reward_kappa" => self.reward_kappa = parse(key, value)?,
            "rewards" => self.rewards = parse(key, value)?,
            "dropout_rate" => self.dropout_rate = parse(key, value)?,
            "strategy" => self.strategy = parse(key, value)?,
            "retransmit_success_rate" => self.retransmit_success_rate = parse(key, value)?,
            "window_ticks" => self.window_ticks = parse(key, value)?,
            "offset" => self.offset = parse(key, value)?,
            "samples" => self.samples = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            "transport" => self.transport = parse(key, value)?,
            "timing" => self.timing = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: 0,
                    key: key.into(),
                })
            }
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n", self.n.to_string()),
            ("T", self.rounds.to_string()),
            ("model_dim", self.model_dim.to_string()),
            ("zeta", self.zeta.to_string()),
            ("L", self.rounding.to_string()),
            ("kappa", self.kappa.to_string()),
            ("sigma", self.sigma.to_string()),
            ("eta", self.eta.to_string()),
            ("B", self.batch.to_string()),
            ("E", self.epochs.to_string()),
            ("b_t", format_decimal(&self.budget, self.rounding)),
            ("reward_kappa", self.reward_kappa.to_string()),
            ("rewards", self.rewards.to_string()),
            ("dropout_rate", self.dropout_rate.to_string()),
            ("strategy", self.strategy.to_string()),
            ("retransmit_success_rate", self.retransmit_success_rate.to_string()),
            ("window_ticks", self.window_ticks.to_string()),
            ("offset", self.offset.to_string()),
            ("samples", self.samples.to_string()),
            ("noise", self.noise.to_string()),
            ("transport", self.transport.to_string()),
            ("timing", self.timing.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            eta: self.eta,
            batch: self.batch,
            epochs: self.epochs,
        }
    }

    pub fn masking(&self) -> MaskingParams {
        MaskingParams::new(self.sigma, self.kappa, self.rounding)
    }

    pub fn reward_config(&self) -> Result<RewardConfig, ConfigError> {
        let mut rc = RewardConfig::new(self.budget.clone(), self.rounding)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        rc.kappa = self.reward_kappa;
        rc.sigma = self.sigma;
        Ok(rc)
    }

    /// Cross-field checks, evaluated against the smallest modulus a
    /// `ζ`-bit key pair can produce.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.n == 0 || self.rounds == 0 || self.model_dim == 0 || self.samples == 0 {
            return bad("n, T, model_dim and samples must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) || !(0.0..=1.0).contains(&self.retransmit_success_rate) {
            return bad("rates must lie in [0, 1]".into());
        }
        if self.window_ticks == 0 {
            return bad("window_ticks must be positive".into());
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return bad("noise must be a nonnegative number".into());
        }
        if !self.budget.is_positive() {
            return bad("b_t must be positive".into());
        }
        self.train().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.zeta < 16 {
            return bad(format!("zeta = {} is below 16", self.zeta));
        }
        let smallest = (BigUint::one() << (2 * self.zeta as usize - 2)) + 1u32;
        let pk = PublicKey::from_modulus(smallest).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        FixedPointCodec::for_key(&pk, self.rounding, self.kappa)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.masking()
            .validate(&pk)
            .map_err(|e| ConfigError::Invalid(format!("zeta = {}: {e}", self.zeta)))?;
        if self.rewards != RewardSchedule::Off {
            self.reward_config()?
                .masking()
                .validate(&pk)
                .map_err(|e| ConfigError::Invalid(format!("rewards with zeta = {}: {e}", self.zeta)))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_text() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.to_pairs().len(), KEYS.len());
    }

    #[test]
    fn parses_and_rejects() {
        let cfg = ExperimentConfig::parse("# demo\nn = 5\nT=2 # two rounds\nstrategy = retransmit\nb_t = 36.5\n").unwrap();
        assert_eq!((cfg.n, cfg.rounds, cfg.strategy), (5, 2, Strategy::Retransmit));
        assert_eq!(cfg.budget, parse_decimal("36.5").unwrap());
        assert!(matches!(ExperimentConfig::parse("n 5"), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(ExperimentConfig::parse("m = 5"), Err(ConfigError::UnknownKey { .. })));
        assert!(matches!(ExperimentConfig::parse("n=1\nn=2"), Err(ConfigError::DuplicateKey { line: 2, .. })));
        assert!(matches!(ExperimentConfig::parse("n = x"), Err(ConfigError::Value { .. })));
        assert!(ExperimentConfig::parse("dropout_rate = 1.5").is_err());
        assert!(ExperimentConfig::parse("n = 0").is_err());
    }

    #[test]
    fn cross_field_constraints() {
        // 10^10 does not fit below 2^32
        assert!(ExperimentConfig::parse("L = 10").is_err());
        // too small for the division masks
        assert!(ExperimentConfig::parse("zeta = 64\nrewards = off").is_err());
        assert!(ExperimentConfig::parse("zeta = 128\nrewards = off").is_ok());
        // rewards need a larger modulus
        assert!(ExperimentConfig::parse("zeta = 128").is_err());
    }
}
