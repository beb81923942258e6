//! Plain `key = value` run configuration files.
//!
//! ```text
//! # design 4 at 64 hidden nodes
//! algo = oselm-l2-lipschitz
//! hidden = 64
//! delta = 0.5
//! terminal_reward = -1
//! store_terminal = true
//! ```
//!
//! Keys use the CLI flag names with `_` or `-`. Blank lines and `#` comments
//! are ignored. A later [`Settings`] layered with [`Settings::overlay`] wins.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::harness::{Algo, RunConfig};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    pub algo: Option<Algo>,
    pub hidden: Option<usize>,
    pub seed: Option<u64>,
    pub trials: Option<u32>,
    pub max_episodes: Option<u32>,
    pub delta: Option<f64>,
    pub eps1: Option<f64>,
    pub eps2: Option<f64>,
    pub gamma: Option<f64>,
    pub update_step: Option<u32>,
    /// `Some(None)` explicitly disables the override.
    pub terminal_reward: Option<Option<f64>>,
    pub store_terminal: Option<bool>,
    pub reset_after: Option<u32>,
    pub solve_threshold: Option<f64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {raw:?}: {e}")))
}

/// `none`/empty disables; anything else must be a number.
pub fn parse_optional_f64(raw: &str) -> Result<Option<f64>> {
    match raw.trim() {
        "" | "none" | "None" => Ok(None),
        v => parse_value("terminal_reward", v).map(Some),
    }
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            s.set(key.trim(), value.trim())?;
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Settings::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key.replace('-', "_").as_str() {
            "algo" => self.algo = Some(v.parse()?),
            "hidden" | "n_tilde" => self.hidden = Some(parse_value(key, v)?),
            "seed" => self.seed = Some(parse_value(key, v)?),
            "trials" => self.trials = Some(parse_value(key, v)?),
            "max_episodes" => self.max_episodes = Some(parse_value(key, v)?),
            "delta" => self.delta = Some(parse_value(key, v)?),
            "eps1" => self.eps1 = Some(parse_value(key, v)?),
            "eps2" => self.eps2 = Some(parse_value(key, v)?),
            "gamma" => self.gamma = Some(parse_value(key, v)?),
            "update_step" => self.update_step = Some(parse_value(key, v)?),
            "terminal_reward" => self.terminal_reward = Some(parse_optional_f64(v)?),
            "store_terminal" => self.store_terminal = Some(parse_value(key, v)?),
            "reset_after" => self.reset_after = Some(parse_value(key, v)?),
            "solve_threshold" => self.solve_threshold = Some(parse_value(key, v)?),
            "workers" => self.workers = Some(parse_value(key, v)?),
            "out" => self.out = Some(PathBuf::from(v)),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Fields set in `top` replace those in `self`.
    pub fn overlay(self, top: Settings) -> Settings {
        Settings {
            algo: top.algo.or(self.algo),
            hidden: top.hidden.or(self.hidden),
            seed: top.seed.or(self.seed),
            trials: top.trials.or(self.trials),
            max_episodes: top.max_episodes.or(self.max_episodes),
            delta: top.delta.or(self.delta),
            eps1: top.eps1.or(self.eps1),
            eps2: top.eps2.or(self.eps2),
            gamma: top.gamma.or(self.gamma),
            update_step: top.update_step.or(self.update_step),
            terminal_reward: top.terminal_reward.or(self.terminal_reward),
            store_terminal: top.store_terminal.or(self.store_terminal),
            reset_after: top.reset_after.or(self.reset_after),
            solve_threshold: top.solve_threshold.or(self.solve_threshold),
            workers: top.workers.or(self.workers),
            out: top.out.or(self.out),
        }
    }

    /// Starts from the canonical configuration of the chosen design and
    /// applies every field that is set. Returns the config and base seed.
    pub fn to_run_config(&self) -> Result<(RunConfig, u64)> {
        let algo = self.algo.ok_or_else(|| Error::Config("algo is required".into()))?;
        let mut cfg = RunConfig::canonical(algo, self.hidden.unwrap_or(64));
        let a = &mut cfg.agent;
        if let Some(v) = self.delta {
            a.delta = v;
        }
        if let Some(v) = self.eps1 {
            a.eps1 = v;
        }
        if let Some(v) = self.eps2 {
            a.eps2 = v;
        }
        if let Some(v) = self.gamma {
            a.gamma = v;
        }
        if let Some(v) = self.update_step {
            a.update_step = v;
        }
        if let Some(v) = self.terminal_reward {
            a.terminal_reward = v;
        }
        if let Some(v) = self.store_terminal {
            a.store_terminal = v;
        }
        if let Some(v) = self.trials {
            cfg.trials = v;
        }
        if let Some(v) = self.max_episodes {
            cfg.max_episodes = v;
        }
        if let Some(v) = self.reset_after {
            cfg.reset_after = v;
        }
        if let Some(v) = self.solve_threshold {
            cfg.solve_threshold = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        cfg.out_dir.clone_from(&self.out);
        cfg.validate()?;
        Ok((cfg, self.seed.unwrap_or(0)))
    }
}
