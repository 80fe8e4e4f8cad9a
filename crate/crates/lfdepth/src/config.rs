//! Run configuration: a flat `key = value` text format with strict keys.
//!
//! Every run resolves to a canonical text form whose FNV-1a hash is the
//! config fingerprint; artifacts embed it so results can be traced back to
//! the exact settings. Unknown keys are rejected rather than ignored.

use crate::error::{LfError, Result};
use crate::net::NetConfig;
use crate::numerics::tensor::Precision;
use crate::refocus::default_shift_set;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Everything a run needs: network architecture, training hyperparameters,
/// augmentation, and synthetic-data settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub precision: Precision,
    /// Single-threaded, fixed-order execution (the engine always runs this
    /// way; the flag is recorded so runs state their determinism contract).
    pub deterministic: bool,

    pub width: usize,
    pub orm_enabled: bool,
    pub orm_embed: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub channels: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,

    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Halve the learning rate after each third of the iterations.
    pub lr_halving: bool,
    pub weight_decay: f64,
    pub rho: f64,
    pub eps: f64,
    pub pool_size: usize,
    pub val_fraction: f64,
    pub log_every: usize,
    pub checkpoint_every: usize,

    pub epir_enabled: bool,
    pub shifts: Vec<f32>,

    pub synth_scenes: usize,
    pub synth_spatial: usize,
    pub disp_min: f32,
    pub disp_max: f32,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            precision: Precision::Single,
            deterministic: true,
            width: 32,
            orm_enabled: true,
            orm_embed: 16,
            patch_h: 9,
            patch_w: 29,
            channels: 3,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
            iterations: 5000,
            batch_size: 128,
            lr: 1e-4,
            lr_halving: true,
            weight_decay: 1e-5,
            rho: 0.9,
            eps: 1e-8,
            pool_size: 20000,
            val_fraction: 0.1,
            log_every: 100,
            checkpoint_every: 0,
            epir_enabled: true,
            shifts: default_shift_set(),
            synth_scenes: 24,
            synth_spatial: 64,
            disp_min: -2.0,
            disp_max: 2.0,
        }
    }
}

impl Config {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Apply `key = value` lines on top of the current settings.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                LfError::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| LfError::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse::<T>()
                .map_err(|e| LfError::Config(format!("{key}: cannot parse `{value}`: {e}")))
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "precision" => {
                self.precision = match value {
                    "single" => Precision::Single,
                    "double" => Precision::Double,
                    other => {
                        return Err(LfError::Config(format!(
                            "precision must be `single` or `double`, got `{other}`"
                        )))
                    }
                }
            }
            "deterministic" => self.deterministic = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "orm_enabled" => self.orm_enabled = parse(key, value)?,
            "orm_embed" => self.orm_embed = parse(key, value)?,
            "patch_h" => self.patch_h = parse(key, value)?,
            "patch_w" => self.patch_w = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "bn_eps" => self.bn_eps = parse(key, value)?,
            "bn_momentum" => self.bn_momentum = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_halving" => self.lr_halving = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "rho" => self.rho = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "pool_size" => self.pool_size = parse(key, value)?,
            "val_fraction" => self.val_fraction = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "epir_enabled" => self.epir_enabled = parse(key, value)?,
            "shifts" => {
                let mut shifts = Vec::new();
                for part in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                    shifts.push(parse::<f32>(key, part)?);
                }
                self.shifts = shifts;
            }
            "synth_scenes" => self.synth_scenes = parse(key, value)?,
            "synth_spatial" => self.synth_spatial = parse(key, value)?,
            "disp_min" => self.disp_min = parse(key, value)?,
            "disp_max" => self.disp_max = parse(key, value)?,
            other => return Err(LfError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(LfError::Config("iterations must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(LfError::Config("batch_size must be >= 2 for batch norm".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(LfError::Config("val_fraction must be in [0, 1)".into()));
        }
        if !(self.disp_min < self.disp_max) {
            return Err(LfError::Config("disp_min must be below disp_max".into()));
        }
        self.net_config().validate()
    }

    /// The architecture this config describes.
    pub fn net_config(&self) -> NetConfig {
        let mut net = NetConfig::with_width(self.width);
        net.patch_h = self.patch_h;
        net.patch_w = self.patch_w;
        net.channels = self.channels;
        net.orm_count = if self.orm_enabled { 2 } else { 0 };
        net.orm_embed = self.orm_embed;
        net.bn_eps = self.bn_eps;
        net.bn_momentum = self.bn_momentum;
        net
    }

    /// Full canonical `key = value` text, keys sorted, all fields present.
    pub fn canonical_text(&self) -> String {
        let shifts = self
            .shifts
            .iter()
            .map(|s| format!("{s}"))
            .collect::<Vec<_>>()
            .join(",");
        let mut pairs: Vec<(&str, String)> = vec![
            ("batch_size", self.batch_size.to_string()),
            ("bn_eps", format!("{}", self.bn_eps)),
            ("bn_momentum", format!("{}", self.bn_momentum)),
            ("channels", self.channels.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("deterministic", self.deterministic.to_string()),
            ("disp_max", format!("{}", self.disp_max)),
            ("disp_min", format!("{}", self.disp_min)),
            ("epir_enabled", self.epir_enabled.to_string()),
            ("eps", format!("{}", self.eps)),
            ("iterations", self.iterations.to_string()),
            ("log_every", self.log_every.to_string()),
            ("lr", format!("{}", self.lr)),
            ("lr_halving", self.lr_halving.to_string()),
            ("orm_embed", self.orm_embed.to_string()),
            ("orm_enabled", self.orm_enabled.to_string()),
            ("patch_h", self.patch_h.to_string()),
            ("patch_w", self.patch_w.to_string()),
            ("pool_size", self.pool_size.to_string()),
            ("precision", self.precision.name().to_string()),
            ("rho", format!("{}", self.rho)),
            ("seed", self.seed.to_string()),
            ("shifts", shifts),
            ("synth_scenes", self.synth_scenes.to_string()),
            ("synth_spatial", self.synth_spatial.to_string()),
            ("val_fraction", format!("{}", self.val_fraction)),
            ("weight_decay", format!("{}", self.weight_decay)),
            ("width", self.width.to_string()),
        ];
        pairs.sort_by_key(|(k, _)| *k);
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Fingerprint of the whole run configuration.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.canonical_text().as_bytes())
    }

    /// Fingerprint of just the architecture plus numeric precision: the part
    /// a checkpoint must agree on before inference will accept it.
    pub fn arch_fingerprint(&self) -> u64 {
        let text = format!("{} precision={}", self.net_config().canonical_text(), self.precision.name());
        fnv1a(text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trip() {
        let mut cfg = Config::default();
        cfg.width = 16;
        cfg.shifts = vec![-0.5, 0.5, 1.25];
        cfg.lr = 3e-4;
        let text = cfg.canonical_text();
        let parsed = Config::from_text(&text).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = Config::from_text("widht = 16\n").unwrap_err();
        assert!(matches!(err, LfError::Config(_)));
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = Config::from_text("# a comment\n\nwidth = 8 # trailing\n").unwrap();
        assert_eq!(cfg.width, 8);
    }

    #[test]
    fn arch_fingerprint_tracks_architecture_only() {
        let base = Config::default();
        let mut lr_changed = base.clone();
        lr_changed.lr = 0.9;
        assert_eq!(base.arch_fingerprint(), lr_changed.arch_fingerprint());
        assert_ne!(base.fingerprint(), lr_changed.fingerprint());
        let mut wider = base.clone();
        wider.width = 64;
        assert_ne!(base.arch_fingerprint(), wider.arch_fingerprint());
        let mut orm_off = base.clone();
        orm_off.orm_enabled = false;
        assert_ne!(base.arch_fingerprint(), orm_off.arch_fingerprint());
    }

    #[test]
    fn invalid_values_error() {
        assert!(Config::from_text("batch_size = 1\n").is_err());
        assert!(Config::from_text("precision = half\n").is_err());
        assert!(Config::from_text("width\n").is_err());
    }
}
