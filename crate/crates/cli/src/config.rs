//! Layered run configuration: a TOML file supplies defaults, explicit
//! command-line flags override them, and built-in defaults fill the rest.
//!
//! Keys are the snake_case flag names (`seed`, `r`, `tol`, `max_sweeps`,
//! `ratio`, ...); the gamma-prior groups live in nested tables named
//! `[alpha]`, `[beta]`, `[phi]`, `[gamma]`, and `[delta]`, each accepting
//! `shape`, `rate_shape`, and `rate_rate`. Keys a subcommand does not read
//! are ignored, so one file can configure a whole pipeline. The run
//! manifest always echoes the fully resolved values, never the file.

use std::path::{Path, PathBuf};

use bplink::model::{GammaGroup, Hyperparameters};
use bplink::{Error, Result};

/// Parsed `--config` file; an empty table when the flag is absent.
pub struct FileConfig {
    table: toml::Table,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let table = match path {
            None => toml::Table::new(),
            Some(p) => std::fs::read_to_string(p)?
                .parse::<toml::Table>()
                .map_err(|e| {
                    Error::InvalidArgument(format!("config {}: {e}", p.display()))
                })?,
        };
        Ok(FileConfig { table })
    }

    fn bad_type(key: &str, want: &str) -> Error {
        Error::InvalidArgument(format!("config key '{key}' must be {want}"))
    }

    pub fn u64(&self, key: &str) -> Result<Option<u64>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(toml::Value::Integer(i)) if *i >= 0 => Ok(Some(*i as u64)),
            Some(_) => Err(Self::bad_type(key, "a non-negative integer")),
        }
    }

    pub fn usize(&self, key: &str) -> Result<Option<usize>> {
        Ok(self.u64(key)?.map(|v| v as usize))
    }

    pub fn i64(&self, key: &str) -> Result<Option<i64>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(toml::Value::Integer(i)) => Ok(Some(*i)),
            Some(_) => Err(Self::bad_type(key, "an integer")),
        }
    }

    pub fn f64(&self, key: &str) -> Result<Option<f64>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(toml::Value::Float(f)) => Ok(Some(*f)),
            Some(toml::Value::Integer(i)) => Ok(Some(*i as f64)),
            Some(_) => Err(Self::bad_type(key, "a number")),
        }
    }

    pub fn string(&self, key: &str) -> Result<Option<String>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(Self::bad_type(key, "a string")),
        }
    }

    pub fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.string(key)?.map(PathBuf::from))
    }

    /// Gamma-prior settings from a nested table, starting from `base` so a
    /// file may override any subset of the three constants.
    pub fn gamma_group(&self, key: &str, mut base: GammaGroup) -> Result<GammaGroup> {
        let Some(value) = self.table.get(key) else {
            return Ok(base);
        };
        let table = value
            .as_table()
            .ok_or_else(|| Self::bad_type(key, "a table of gamma-prior settings"))?;
        for (field, v) in table {
            let num = match v {
                toml::Value::Float(f) => *f,
                toml::Value::Integer(i) => *i as f64,
                _ => return Err(Self::bad_type(&format!("{key}.{field}"), "a number")),
            };
            match field.as_str() {
                "shape" => base.shape = num,
                "rate_shape" => base.rate_shape = num,
                "rate_rate" => base.rate_rate = num,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "config key '{key}.{other}' is not a gamma-prior setting \
                         (use shape, rate_shape, rate_rate)"
                    )));
                }
            }
        }
        Ok(base)
    }

    /// Static-model hyperparameters: `r` plus the alpha/beta/phi groups.
    pub fn hyperparameters(&self, r: usize) -> Result<Hyperparameters> {
        let base = Hyperparameters::with_r(r);
        let hyper = Hyperparameters {
            r,
            alpha: self.gamma_group("alpha", base.alpha)?,
            beta: self.gamma_group("beta", base.beta)?,
            phi: self.gamma_group("phi", base.phi)?,
        };
        hyper.validate()?;
        Ok(hyper)
    }
}

/// Flag > config file > built-in default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Flag > config file, with no default.
pub fn pick_opt<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

pub fn require<T>(value: Option<T>, what: &str) -> Result<T> {
    value.ok_or_else(|| Error::InvalidArgument(format!("{what} is required")))
}
