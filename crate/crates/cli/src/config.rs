//! `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mixrec_core::cf::CfMode;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub items: Option<PathBuf>,
    pub interactions: Option<PathBuf>,

    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub bottleneck: usize,
    pub max_item_tokens: usize,
    pub max_len: usize,
    pub collab_keys: usize,
    pub replace_every: usize,
    pub adapter_activation: bool,

    pub epochs: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,

    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
    pub n_s: usize,
    pub n_cl: usize,

    pub bo_iterations: usize,
    pub bo_init: usize,
    pub bo_fraction: f64,
    pub bo_epochs: usize,

    pub d_cf: usize,
    pub cf_mode: CfMode,
    pub cf_epochs: usize,
    pub cf_lr: f64,

    pub hard_ratio: f64,
    pub hard_dim: usize,
    pub hard_mf_epochs: usize,

    pub eval_cutoff: usize,
    pub genome: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            items: None,
            interactions: None,
            d_model: 32,
            layers: 2,
            heads: 1,
            ffn_dim: 64,
            bottleneck: 64,
            max_item_tokens: 30,
            max_len: 512,
            collab_keys: 1,
            replace_every: 1,
            adapter_activation: false,
            epochs: 40,
            lr: 5e-5,
            warmup_fraction: 0.06,
            weight_decay: 0.0,
            batch_size: 5,
            seed: 0,
            lambda1: 0.1,
            lambda2: 1e-6,
            lambda3: 0.001,
            tau: 1.0,
            n_s: 1,
            n_cl: 5,
            bo_iterations: 30,
            bo_init: 5,
            bo_fraction: 0.04,
            bo_epochs: 3,
            d_cf: 16,
            cf_mode: CfMode::Joint,
            cf_epochs: 20,
            cf_lr: 0.05,
            hard_ratio: 0.005,
            hard_dim: 64,
            hard_mf_epochs: 20,
            eval_cutoff: 10,
            genome: None,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> CliResult<T> {
    raw.parse::<T>().map_err(|_| CliError::Config {
        key: key.into(),
        message: format!("cannot parse {raw:?}"),
    })
}

fn range(key: &str, ok: bool, message: &str) -> CliResult<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config {
            key: key.into(),
            message: message.into(),
        })
    }
}

macro_rules! config_fields {
    ($m:ident) => {
        $m!(d_model, layers, heads, ffn_dim, bottleneck, max_item_tokens, max_len, collab_keys, replace_every,
            adapter_activation, epochs, lr, warmup_fraction, weight_decay, batch_size, seed, lambda1, lambda2,
            lambda3, tau, n_s, n_cl, bo_iterations, bo_init, bo_fraction, bo_epochs, d_cf, cf_mode, cf_epochs,
            cf_lr, hard_ratio, hard_dim, hard_mf_epochs, eval_cutoff)
    };
}

impl RunConfig {
    pub fn parse_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            key: "--config".into(),
            message: format!("{}: {e}", path.display()),
        })?;
        Self::parse_str(&text)
    }

    /// Blank lines and `#` comments are ignored; omitted keys keep defaults.
    pub fn parse_str(text: &str) -> CliResult<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CliError::Config {
                key: format!("line {}", lineno + 1),
                message: "expected key=value".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), ()).is_some() {
                return Err(CliError::Config {
                    key: key.into(),
                    message: "duplicate key".into(),
                });
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        macro_rules! assign {
            ($($f:ident),*) => {
                match key {
                    $(stringify!($f) => { self.$f = parse_value(key, value)?; return Ok(()); })*
                    _ => {}
                }
            };
        }
        config_fields!(assign);
        match key {
            "items" => self.items = Some(PathBuf::from(value)),
            "interactions" => self.interactions = Some(PathBuf::from(value)),
            "genome" => self.genome = (!value.is_empty()).then(|| value.to_string()),
            _ => {
                return Err(CliError::Config {
                    key: key.into(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        for (key, v) in [
            ("d_model", self.d_model),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("bottleneck", self.bottleneck),
            ("max_item_tokens", self.max_item_tokens),
            ("max_len", self.max_len),
            ("replace_every", self.replace_every),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("n_s", self.n_s),
            ("n_cl", self.n_cl),
            ("bo_init", self.bo_init),
            ("bo_epochs", self.bo_epochs),
            ("d_cf", self.d_cf),
            ("hard_dim", self.hard_dim),
            ("eval_cutoff", self.eval_cutoff),
        ] {
            range(key, v >= 1, "must be at least 1")?;
        }
        range("heads", self.d_model.is_multiple_of(self.heads), "must divide d_model")?;
        range("collab_keys", matches!(self.collab_keys, 1 | 2), "must be 1 or 2")?;
        range("lr", self.lr > 0.0 && self.lr.is_finite(), "must be positive")?;
        range("cf_lr", self.cf_lr > 0.0 && self.cf_lr.is_finite(), "must be positive")?;
        range("tau", self.tau > 0.0 && self.tau.is_finite(), "must be positive")?;
        range("warmup_fraction", (0.0..1.0).contains(&self.warmup_fraction), "must be in [0, 1)")?;
        range("weight_decay", self.weight_decay >= 0.0, "must be non-negative")?;
        for (key, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            range(key, v >= 0.0 && v.is_finite(), "must be non-negative")?;
        }
        range("bo_fraction", self.bo_fraction > 0.0 && self.bo_fraction <= 1.0, "must be in (0, 1]")?;
        range("hard_ratio", self.hard_ratio > 0.0 && self.hard_ratio <= 1.0, "must be in (0, 1]")?;
        if let Some(g) = &self.genome {
            range("genome", !g.is_empty() && g.chars().all(|c| c == '0' || c == '1'), "must be a 0/1 string")?;
            range("genome", g.len() % 3 == 0, "length must be a multiple of 3")?;
        }
        Ok(())
    }

    /// Canonical `key = value` text; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(p) = &self.items {
            let _ = writeln!(out, "items = {}", p.display());
        }
        if let Some(p) = &self.interactions {
            let _ = writeln!(out, "interactions = {}", p.display());
        }
        out.push_str(&self.hashed_text());
        out
    }

    /// Canonical text without input paths.
    fn hashed_text(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($($f:ident),*) => { $( let _ = writeln!(out, "{} = {}", stringify!($f), self.$f); )* };
        }
        config_fields!(emit);
        if let Some(g) = &self.genome {
            let _ = writeln!(out, "genome = {g}");
        }
        out
    }

    /// SHA-256 of the canonical settings. Input paths are excluded so that
    /// the same data under another directory hashes identically.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.hashed_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.epochs, c.lr, c.bottleneck), (40, 5e-5, 64));
        assert_eq!((c.n_s, c.n_cl, c.tau, c.replace_every, c.max_item_tokens), (1, 5, 1.0, 1, 30));
        assert_eq!((c.lambda1, c.lambda2, c.lambda3), (0.1, 1e-6, 0.001));
        assert_eq!((c.batch_size, c.bo_fraction, c.bo_iterations), (5, 0.04, 30));
        assert_eq!(c.warmup_fraction, 0.06);
    }

    #[test]
    fn keys_and_errors() {
        let c = RunConfig::parse_str("lambda1=0.1\n# note\n epochs = 7 \ncf_mode = frozen").unwrap();
        assert_eq!((c.lambda1, c.epochs, c.cf_mode), (0.1, 7, CfMode::Frozen));
        let key_of = |text: &str| match RunConfig::parse_str(text) {
            Err(CliError::Config { key, .. }) => key,
            other => panic!("{other:?}"),
        };
        assert_eq!(key_of("epochs=-3"), "epochs");
        assert_eq!(key_of("epochs=0"), "epochs");
        assert_eq!(key_of("nonsense=1"), "nonsense");
        assert_eq!(key_of("bo_fraction=1.5"), "bo_fraction");
        assert_eq!(key_of("lambda2=-1"), "lambda2");
        assert_eq!(key_of("genome=0101"), "genome");
        assert_eq!(key_of("epochs=3\nepochs=4"), "epochs");
    }

    #[test]
    fn hash_ignores_paths() {
        let a = RunConfig::parse_str("items = /a/items.jsonl\nepochs = 3").unwrap();
        let b = RunConfig::parse_str("items = /b/items.jsonl\nepochs = 3").unwrap();
        let c = RunConfig::parse_str("items = /a/items.jsonl\nepochs = 4").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
