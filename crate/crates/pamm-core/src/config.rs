//! Experiment configuration: host-network and training hyperparameters,
//! the umbrella config tying all modules together, and its canonical
//! key=value text form used for hashing, checkpoints, and config files.

use crate::fusion::{AffineConfig, GateConfig};
use crate::motif::MotifConfig;
use crate::util::{fmt_f64, fnv1a64, parse_f64};
use crate::variant::Variant;
use crate::{Error, Result};

/// Host network shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HostConfig {
    /// message-passing layers
    pub layers: usize,
    /// node state width
    pub d_n: usize,
    /// edge state width
    pub d_e: usize,
    /// radial basis count
    pub n_rb: usize,
    /// species embedding width
    pub d_sp: usize,
    /// neighbor cutoff, Å; must match the motif distance range
    pub cutoff: f64,
}

impl Default for HostConfig {
    fn default() -> Self {
        HostConfig { layers: 2, d_n: 16, d_e: 16, n_rb: 8, d_sp: 8, cutoff: 3.5 }
    }
}

impl HostConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("host.layers", self.layers),
            ("host.d_n", self.d_n),
            ("host.d_e", self.d_e),
            ("host.n_rb", self.n_rb),
            ("host.d_sp", self.d_sp),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be ≥ 1")));
            }
        }
        if !(self.cutoff > 0.0 && self.cutoff.is_finite()) {
            return Err(Error::Config(format!("host.cutoff must be positive, got {}", self.cutoff)));
        }
        Ok(())
    }
}

/// Optimization hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// structures per batch
    pub batch_size: usize,
    pub base_lr: f64,
    /// learning-rate multiplier for the lookup/gate group (γ)
    pub lr_scale: f64,
    /// weight on per-atom energy MAE
    pub w_energy: f64,
    /// weight on force MAE
    pub w_force: f64,
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 4,
            base_lr: 0.003,
            lr_scale: 0.1,
            w_energy: 1.0,
            w_force: 10.0,
            eval_interval: 250,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // steps = 0 is allowed: it yields the initial evaluation only
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be ≥ 1".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("train.eval_interval must be ≥ 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("train.base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.lr_scale > 0.0 && self.lr_scale <= 1.0) {
            return Err(Error::Config(format!(
                "train.lr_scale must be in (0, 1], got {}",
                self.lr_scale
            )));
        }
        if !(self.w_energy >= 0.0 && self.w_force >= 0.0) {
            return Err(Error::Config("loss weights must be ≥ 0".into()));
        }
        if self.w_energy == 0.0 && self.w_force == 0.0 {
            return Err(Error::Config("at least one loss weight must be nonzero".into()));
        }
        Ok(())
    }
}

/// Everything a run needs, minus file paths.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub motif: MotifConfig,
    pub host: HostConfig,
    pub gate: GateConfig,
    pub affine: AffineConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = ExperimentConfig {
            variant: Variant::PammGate,
            motif: MotifConfig::default(),
            host: HostConfig::default(),
            gate: GateConfig::default(),
            affine: AffineConfig::default(),
            train: TrainConfig::default(),
        };
        cfg.apply_variant_flags();
        cfg
    }
}

impl ExperimentConfig {
    /// Derive the motif source flags from the variant. Flags are never set
    /// directly; this keeps config text and variant consistent by
    /// construction.
    pub fn apply_variant_flags(&mut self) {
        let f = self.variant.flags();
        self.motif.pair_enabled = f.pair;
        self.motif.triplet_enabled = f.triplet;
        self.motif.random_bucket = f.random_bucket;
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self.apply_variant_flags();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.motif.validate()?;
        self.host.validate()?;
        self.gate.validate()?;
        self.affine.validate()?;
        self.train.validate()?;
        if self.host.cutoff != self.motif.r_max {
            return Err(Error::Config(format!(
                "host.cutoff ({}) must equal motif.r_max ({}): the neighbor graph and the \
                 distance quantizer must agree on the distance range",
                self.host.cutoff, self.motif.r_max
            )));
        }
        let f = self.variant.flags();
        if self.motif.pair_enabled != f.pair
            || self.motif.triplet_enabled != f.triplet
            || self.motif.random_bucket != f.random_bucket
        {
            return Err(Error::Config(
                "motif source flags disagree with the variant; use apply_variant_flags".into(),
            ));
        }
        Ok(())
    }

    /// Canonical serialization: one `key=value` per line, sorted by key,
    /// floats in exact round-trip form. This text is what gets hashed and
    /// embedded in checkpoints.
    pub fn canonical_text(&self) -> String {
        let mut kv: Vec<(String, String)> = Vec::new();
        let mut s = |k: &str, v: String| kv.push((k.to_string(), v));

        s("variant", self.variant.name().to_string());

        s("motif.r_max", fmt_f64(self.motif.r_max));
        s("motif.b_r", self.motif.b_r.to_string());
        s("motif.b_theta", self.motif.b_theta.to_string());
        s("motif.h", self.motif.h.to_string());
        s("motif.m_pair", self.motif.m_pair.to_string());
        s("motif.m_tri", self.motif.m_tri.to_string());
        s("motif.d", self.motif.d.to_string());
        s("motif.p", self.motif.p.to_string());
        s("motif.random_seed", self.motif.random_seed.to_string());

        s("host.layers", self.host.layers.to_string());
        s("host.d_n", self.host.d_n.to_string());
        s("host.d_e", self.host.d_e.to_string());
        s("host.n_rb", self.host.n_rb.to_string());
        s("host.d_sp", self.host.d_sp.to_string());
        s("host.cutoff", fmt_f64(self.host.cutoff));

        s("gate.d_gate", self.gate.d_gate.to_string());
        s("gate.lambda", fmt_f64(self.gate.lambda));
        s("gate.g_min", fmt_f64(self.gate.g_min));
        s("gate.g_max", fmt_f64(self.gate.g_max));
        s("gate.clip_c", fmt_f64(self.gate.clip_c));

        s("affine.alpha_aff", fmt_f64(self.affine.alpha_aff));
        s("affine.beta_aff", fmt_f64(self.affine.beta_aff));
        s("affine.hidden", self.affine.hidden.to_string());
        s("affine.shared", self.affine.shared.to_string());

        s("train.steps", self.train.steps.to_string());
        s("train.batch_size", self.train.batch_size.to_string());
        s("train.base_lr", fmt_f64(self.train.base_lr));
        s("train.lr_scale", fmt_f64(self.train.lr_scale));
        s("train.w_energy", fmt_f64(self.train.w_energy));
        s("train.w_force", fmt_f64(self.train.w_force));
        s("train.eval_interval", self.train.eval_interval.to_string());
        s("train.seed", self.train.seed.to_string());

        kv.sort();
        let mut out = String::new();
        for (k, v) in kv {
            out.push_str(&k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Hash binding records and checkpoints to the exact configuration.
    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a64(self.canonical_text().as_bytes()))
    }

    /// Apply `key=value` overrides (config-file contents) on top of `self`.
    /// Unknown keys and malformed values are rejected. Lines starting with
    /// `#` and blank lines are ignored. The variant key, if present, is
    /// applied first so source flags land consistently.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut pairs: Vec<(usize, &str, &str)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            pairs.push((lineno + 1, k.trim(), v.trim()));
        }
        // variant first: it resets the derived source flags
        pairs.sort_by_key(|&(_, k, _)| k != "variant");
        for (lineno, k, v) in pairs {
            self.apply_one(k, v)
                .map_err(|e| Error::Config(format!("config line {lineno}: {e}")))?;
        }
        self.apply_variant_flags();
        Ok(())
    }

    fn apply_one(&mut self, key: &str, value: &str) -> Result<()> {
        fn float(v: &str) -> Result<f64> {
            parse_f64(v).ok_or_else(|| Error::Config(format!("bad float '{v}'")))
        }
        fn uint(v: &str) -> Result<usize> {
            v.parse().map_err(|_| Error::Config(format!("bad integer '{v}'")))
        }
        fn u64v(v: &str) -> Result<u64> {
            v.parse().map_err(|_| Error::Config(format!("bad integer '{v}'")))
        }
        fn boolean(v: &str) -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config(format!("bad bool '{v}'"))),
            }
        }
        match key {
            "variant" => {
                self.variant = Variant::from_name(value)?;
                self.apply_variant_flags();
            }
            "motif.r_max" => self.motif.r_max = float(value)?,
            "motif.b_r" => self.motif.b_r = uint(value)?,
            "motif.b_theta" => self.motif.b_theta = uint(value)?,
            "motif.h" => self.motif.h = uint(value)?,
            "motif.m_pair" => self.motif.m_pair = uint(value)?,
            "motif.m_tri" => self.motif.m_tri = uint(value)?,
            "motif.d" => self.motif.d = uint(value)?,
            "motif.p" => self.motif.p = u64v(value)?,
            "motif.random_seed" => self.motif.random_seed = u64v(value)?,
            "host.layers" => self.host.layers = uint(value)?,
            "host.d_n" => self.host.d_n = uint(value)?,
            "host.d_e" => self.host.d_e = uint(value)?,
            "host.n_rb" => self.host.n_rb = uint(value)?,
            "host.d_sp" => self.host.d_sp = uint(value)?,
            "host.cutoff" => self.host.cutoff = float(value)?,
            "gate.d_gate" => self.gate.d_gate = uint(value)?,
            "gate.lambda" => self.gate.lambda = float(value)?,
            "gate.g_min" => self.gate.g_min = float(value)?,
            "gate.g_max" => self.gate.g_max = float(value)?,
            "gate.clip_c" => self.gate.clip_c = float(value)?,
            "affine.alpha_aff" => self.affine.alpha_aff = float(value)?,
            "affine.beta_aff" => self.affine.beta_aff = float(value)?,
            "affine.hidden" => self.affine.hidden = uint(value)?,
            "affine.shared" => self.affine.shared = boolean(value)?,
            "train.steps" => self.train.steps = uint(value)?,
            "train.batch_size" => self.train.batch_size = uint(value)?,
            "train.base_lr" => self.train.base_lr = float(value)?,
            "train.lr_scale" => self.train.lr_scale = float(value)?,
            "train.w_energy" => self.train.w_energy = float(value)?,
            "train.w_force" => self.train.w_force = float(value)?,
            "train.eval_interval" => self.train.eval_interval = uint(value)?,
            "train.seed" => self.train.seed = u64v(value)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parse a complete canonical text (checkpoint echo) into a config.
    pub fn from_text(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
        for v in Variant::ALL {
            ExperimentConfig::default().with_variant(v).validate().unwrap();
        }
    }

    #[test]
    fn canonical_text_round_trips_exactly() {
        let mut cfg = ExperimentConfig::default().with_variant(Variant::PammAffine);
        cfg.train.base_lr = 0.004_712_338_811;
        cfg.motif.m_pair = 8192;
        cfg.apply_variant_flags();
        let text = cfg.canonical_text();
        let back = ExperimentConfig::from_text(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.canonical_text(), text);
    }

    #[test]
    fn canonical_text_is_sorted_and_stable() {
        let text = ExperimentConfig::default().canonical_text();
        let keys: Vec<&str> = text.lines().map(|l| l.split('=').next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        // hash is a pure function of the text
        let c1 = ExperimentConfig::default();
        let c2 = ExperimentConfig::default();
        assert_eq!(c1.hash(), c2.hash());
    }

    #[test]
    fn hash_changes_with_any_field() {
        let base = ExperimentConfig::default();
        let mut other = base.clone();
        other.train.seed = 1;
        assert_ne!(base.hash(), other.hash());
        let affine = base.clone().with_variant(Variant::PammAffine);
        assert_ne!(base.hash(), affine.hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected_with_line_numbers() {
        let mut cfg = ExperimentConfig::default();
        let err = cfg.apply_text("train.steps=100\nbogus.key=1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(err.to_string().contains("bogus.key"), "{err}");

        let mut cfg = ExperimentConfig::default();
        let err = cfg.apply_text("train.base_lr=fast\n").unwrap_err();
        assert!(err.to_string().contains("bad float"), "{err}");

        let mut cfg = ExperimentConfig::default();
        let err = cfg.apply_text("no equals sign here\n").unwrap_err();
        assert!(err.to_string().contains("key=value"), "{err}");
    }

    #[test]
    fn overrides_apply_on_top_of_defaults_with_comments_ignored() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text("# tuning\n\ntrain.steps=500\nvariant=no-gate\nmotif.m_pair=64\n").unwrap();
        assert_eq!(cfg.train.steps, 500);
        assert_eq!(cfg.variant, Variant::NoGate);
        assert_eq!(cfg.motif.m_pair, 64);
        // flags follow the variant, not the default
        assert!(cfg.motif.pair_enabled && cfg.motif.triplet_enabled);
        cfg.validate().unwrap();
    }

    #[test]
    fn cutoff_and_distance_range_must_agree() {
        let mut cfg = ExperimentConfig::default();
        cfg.host.cutoff = 4.0;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("motif.r_max"), "{err}");
    }

    #[test]
    fn variant_key_order_does_not_matter() {
        // flag derivation must win regardless of where `variant` appears
        let mut a = ExperimentConfig::default();
        a.apply_text("motif.m_pair=64\nvariant=triplet-only\n").unwrap();
        let mut b = ExperimentConfig::default();
        b.apply_text("variant=triplet-only\nmotif.m_pair=64\n").unwrap();
        assert_eq!(a, b);
        assert!(!a.motif.pair_enabled && a.motif.triplet_enabled);
    }
}
