//! Training configuration and its flat `key = value` file format.
//!
//! One pair per line, `#` starts a comment, blank lines are ignored and
//! unknown keys are rejected. Keys not mentioned keep their defaults.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fact::FactConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaSchedule {
    Constant,
    /// `λ(t) = λ0 · t / T` over the `T` optimizer steps.
    LinearRamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmlInput {
    /// Lifted loss on the (augmented) logits of the metric head.
    Logits,
    /// Lifted loss directly on the shared features.
    Features,
}

impl FromStr for LambdaSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LambdaSchedule::Constant),
            "linear-ramp" => Ok(LambdaSchedule::LinearRamp),
            _ => Err(Error::Config(format!("unknown lambda schedule '{s}'"))),
        }
    }
}

impl fmt::Display for LambdaSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LambdaSchedule::Constant => "constant",
            LambdaSchedule::LinearRamp => "linear-ramp",
        })
    }
}

impl FromStr for DmlInput {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logits" => Ok(DmlInput::Logits),
            "features" => Ok(DmlInput::Features),
            _ => Err(Error::Config(format!("unknown dml input '{s}'"))),
        }
    }
}

impl fmt::Display for DmlInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DmlInput::Logits => "logits",
            DmlInput::Features => "features",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lambda0: f64,
    pub lambda_schedule: LambdaSchedule,
    pub margin: f64,
    pub fact: FactConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dml_input: DmlInput,
    pub isda_enabled: bool,
    /// Hidden layer widths; the last one is the feature dimension.
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            lambda0: 0.5,
            lambda_schedule: LambdaSchedule::LinearRamp,
            margin: 1.0,
            fact: FactConfig::default(),
            lr: 0.02,
            epochs: 30,
            batch_size: 64,
            seed: 0,
            dml_input: DmlInput::Logits,
            isda_enabled: true,
            hidden: vec![128, 64],
        }
    }
}

pub const KEYS: [&str; 15] = [
    "alpha",
    "lambda0",
    "lambda_schedule",
    "margin",
    "beta",
    "eta_max",
    "teacher_momentum",
    "temperature",
    "lr",
    "epochs",
    "batch_size",
    "seed",
    "dml_input",
    "isda_enabled",
    "hidden",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            return bad(format!("lambda0 must be >= 0, got {}", self.lambda0));
        }
        if !self.margin.is_finite() {
            return bad("margin must be finite".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad(format!("invalid hidden widths {:?}", self.hidden));
        }
        self.fact.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "alpha" => self.alpha = parse(key, value)?,
            "lambda0" => self.lambda0 = parse(key, value)?,
            "lambda_schedule" => self.lambda_schedule = value.parse()?,
            "margin" => self.margin = parse(key, value)?,
            "beta" => self.fact.beta = parse(key, value)?,
            "eta_max" => self.fact.eta_max = parse(key, value)?,
            "teacher_momentum" => self.fact.teacher_momentum = parse(key, value)?,
            "temperature" => self.fact.temperature = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "dml_input" => self.dml_input = value.parse()?,
            "isda_enabled" => self.isda_enabled = parse(key, value)?,
            "hidden" => {
                self.hidden = value
                    .split(',')
                    .map(|w| parse(key, w.trim()))
                    .collect::<Result<_>>()?
            }
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults and validates the result.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_str(&fs::read_to_string(path)?)
    }

    /// ISDA strength at step `step` of `total`.
    pub fn lambda_at(&self, step: usize, total: usize) -> f64 {
        if !self.isda_enabled {
            return 0.0;
        }
        match self.lambda_schedule {
            LambdaSchedule::Constant => self.lambda0,
            LambdaSchedule::LinearRamp => self.lambda0 * step as f64 / total.max(1) as f64,
        }
    }
}

impl fmt::Display for TrainConfig {
    /// The config in its file format; parsing the output gives back `self`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hidden: Vec<String> = self.hidden.iter().map(|w| w.to_string()).collect();
        writeln!(f, "alpha = {}", self.alpha)?;
        writeln!(f, "lambda0 = {}", self.lambda0)?;
        writeln!(f, "lambda_schedule = {}", self.lambda_schedule)?;
        writeln!(f, "margin = {}", self.margin)?;
        writeln!(f, "beta = {}", self.fact.beta)?;
        writeln!(f, "eta_max = {}", self.fact.eta_max)?;
        writeln!(f, "teacher_momentum = {}", self.fact.teacher_momentum)?;
        writeln!(f, "temperature = {}", self.fact.temperature)?;
        writeln!(f, "lr = {}", self.lr)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "dml_input = {}", self.dml_input)?;
        writeln!(f, "isda_enabled = {}", self.isda_enabled)?;
        writeln!(f, "hidden = {}", hidden.join(","))
    }
}
