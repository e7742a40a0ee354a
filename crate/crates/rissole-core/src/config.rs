//! Flat key=value run configuration.
//!
//! Every key has a default; unknown keys are a hard error so typos surface
//! immediately. The fully resolved config is echoed into the run directory
//! as `resolved.cfg`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::denoiser::CondMode;
use crate::error::{Error, Result};
use crate::retrieval::QueryMode;

const DEFAULTS: &[(&str, &str)] = &[
    ("data.n", "256"),
    ("data.c", "1"),
    ("data.h", "12"),
    ("data.w", "12"),
    ("data.pattern", "discs"),
    ("data.seed", "1"),
    ("codec.f", "2"),
    ("codec.c_latent", "4"),
    ("codec.epochs", "300"),
    ("codec.step", "0.2"),
    ("codec.seed", "2"),
    ("schedule.t", "100"),
    ("schedule.beta_start", "0.0001"),
    ("schedule.beta_end", "0.02"),
    ("blocks.b", "4"),
    ("retrieval.k", "5"),
    ("retrieval.query_mode", "first_block"),
    ("retrieval.exclude_self", "true"),
    ("model.r", "2"),
    ("model.d_t", "16"),
    ("model.cond_mode", "rag"),
    ("model.pos_enabled", "false"),
    ("model.seed", "3"),
    ("train.epochs", "20"),
    ("train.step", "0.004"),
    ("train.batch", "16"),
    ("train.seed", "7"),
    ("train.parallel", "false"),
    ("sampler.n_samples", "160"),
    ("sampler.seed", "11"),
    ("sampler.noise_at_t1", "false"),
    ("sampler.parallel", "false"),
    ("eval.m", "160"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            cfg.set_checked(key.trim(), value.trim(), Some(lineno + 1))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        RunConfig::from_text(&text)
    }

    /// Apply one `key=value` override (the `--set` flag).
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            Error::Config(format!("override `{assignment}`: expected key=value"))
        })?;
        self.set_checked(key.trim(), value.trim(), None)
    }

    fn set_checked(&mut self, key: &str, value: &str, line: Option<usize>) -> Result<()> {
        if !self.values.contains_key(key) {
            let at = line.map(|l| format!(" (line {l})")).unwrap_or_default();
            return Err(Error::Config(format!("unknown key `{key}`{at}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key `{key}` has no default"))
    }

    pub fn usize_at(&self, key: &str) -> Result<usize> {
        self.parse(key)
    }

    pub fn u64_at(&self, key: &str) -> Result<u64> {
        self.parse(key)
    }

    pub fn f64_at(&self, key: &str) -> Result<f64> {
        self.parse(key)
    }

    pub fn bool_at(&self, key: &str) -> Result<bool> {
        self.parse(key)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key);
        raw.parse()
            .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{raw}`")))
    }

    pub fn cond_mode(&self) -> Result<CondMode> {
        CondMode::parse(self.get("model.cond_mode"))
    }

    pub fn query_mode(&self) -> Result<QueryMode> {
        QueryMode::parse(self.get("retrieval.query_mode"))
    }

    /// Cross-key invariants, reported with the constraint spelled out.
    pub fn validate(&self) -> Result<()> {
        let b = self.usize_at("blocks.b")?;
        let g = (b as f64).sqrt().round() as usize;
        if b == 0 || g * g != b {
            return Err(Error::Config(format!(
                "blocks.b={b}: block count must be a perfect square"
            )));
        }
        let (h, w, f) = (
            self.usize_at("data.h")?,
            self.usize_at("data.w")?,
            self.usize_at("codec.f")?,
        );
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Config(format!(
                "codec.f={f}: image {h}x{w} must be divisible by the downsampling factor"
            )));
        }
        if (h / f) % g != 0 || (w / f) % g != 0 {
            return Err(Error::Config(format!(
                "blocks.b={b}: latent {}x{} must be divisible by grid side {g}",
                h / f,
                w / f
            )));
        }
        let t = self.usize_at("schedule.t")?;
        if t == 0 {
            return Err(Error::Config("schedule.t: must be >= 1".into()));
        }
        let (bs, be) = (
            self.f64_at("schedule.beta_start")?,
            self.f64_at("schedule.beta_end")?,
        );
        if !(bs > 0.0 && bs <= be && be < 1.0) {
            return Err(Error::Config(format!(
                "schedule.beta_start/end=({bs},{be}): need 0 < start <= end < 1"
            )));
        }
        let mode = self.cond_mode()?;
        let k = self.usize_at("retrieval.k")?;
        if mode.uses_retrieval() && k < 1 {
            return Err(Error::Config(
                "retrieval.k: must be >= 1 unless model.cond_mode=no_rag".into(),
            ));
        }
        let d_t = self.usize_at("model.d_t")?;
        if d_t == 0 || d_t % 2 != 0 {
            return Err(Error::Config(format!(
                "model.d_t={d_t}: time embedding width must be even and positive"
            )));
        }
        self.query_mode()?;
        let pattern = self.get("data.pattern");
        if !["discs", "gradients", "stripes"].contains(&pattern) {
            return Err(Error::Config(format!(
                "data.pattern=`{pattern}`: expected discs, gradients, or stripes"
            )));
        }
        Ok(())
    }

    /// Sorted key=value text, one per line: the `resolved.cfg` payload.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.resolved_text())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}
