//! Flat `key = value` configuration with command-line overrides.
//!
//! Each command consumes the keys it understands; [`RunConfig::finish`]
//! rejects whatever is left, so typos surface as errors instead of being
//! silently ignored.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn valid_key(k: &str) -> bool {
    !k.is_empty()
        && k.chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected `key = value`", n + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !valid_key(k) {
                return Err(CliError::Config(format!(
                    "line {}: invalid key `{k}`",
                    n + 1
                )));
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(CliError::Config(format!(
                    "line {}: duplicate key `{k}`",
                    n + 1
                )));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
        Self::parse(&text)
    }

    /// Applies a `key=value` override.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
        let k = k.trim();
        if !valid_key(k) {
            return Err(CliError::Config(format!("invalid key `{k}`")));
        }
        self.values.insert(k.to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| CliError::Config(format!("key `{key}`: cannot parse `{v}`: {e}"))),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub fn take_grid(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        self.values
            .remove(key)
            .map(|v| parse_grid(&v).map_err(|e| CliError::Config(format!("key `{key}`: {e}"))))
            .transpose()
    }

    /// Fails on any key no one consumed.
    pub fn finish(self) -> Result<()> {
        if self.values.is_empty() {
            Ok(())
        } else {
            let keys: Vec<&str> = self.values.keys().map(String::as_str).collect();
            Err(CliError::Config(format!(
                "unknown key(s): {}",
                keys.join(", ")
            )))
        }
    }
}

/// `start:stop:count` (inclusive, evenly spaced) or a comma-separated list.
/// An empty string is an empty grid. Grids must be strictly monotone.
pub fn parse_grid(s: &str) -> std::result::Result<Vec<f64>, String> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(vec![]);
    }
    let grid = if s.contains(':') {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let [a, b, n] = parts[..] else {
            return Err(format!("range `{s}` must be start:stop:count"));
        };
        let a: f64 = a.parse().map_err(|e| format!("start `{a}`: {e}"))?;
        let b: f64 = b.parse().map_err(|e| format!("stop `{b}`: {e}"))?;
        let n: usize = n.parse().map_err(|e| format!("count `{n}`: {e}"))?;
        match n {
            0 => vec![],
            1 => vec![a],
            _ => (0..n)
                .map(|k| a + (b - a) * k as f64 / (n - 1) as f64)
                .collect(),
        }
    } else {
        s.split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|e| format!("value `{}`: {e}", t.trim()))
            })
            .collect::<std::result::Result<_, _>>()?
    };
    if grid.iter().any(|v: &f64| !v.is_finite()) {
        return Err("grid values must be finite".into());
    }
    let up = grid.windows(2).all(|w| w[1] > w[0]);
    let down = grid.windows(2).all(|w| w[1] < w[0]);
    if !(up || down) {
        return Err("grid must be strictly monotone".into());
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let mut c = RunConfig::parse("# header\nfwhm = 2.5  # MHz\n\naxis=delta\n").unwrap();
        c.set_override("fwhm=3").unwrap();
        assert_eq!(c.take_or("fwhm", 0.0).unwrap(), 3.0);
        assert_eq!(c.take_str("axis").as_deref(), Some("delta"));
        c.finish().unwrap();
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("a = 1\na = 2").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
        assert!(RunConfig::parse("Bad-Key = 1").is_err());
        let mut c = RunConfig::parse("fwhm = wide").unwrap();
        let e = c.take::<f64>("fwhm").unwrap_err();
        assert!(e.to_string().contains("fwhm"));
        let c = RunConfig::parse("typo_key = 1").unwrap();
        assert!(c.finish().unwrap_err().to_string().contains("typo_key"));
    }

    #[test]
    fn grids() {
        assert_eq!(parse_grid("").unwrap(), Vec::<f64>::new());
        assert_eq!(parse_grid("-1:1:3").unwrap(), vec![-1.0, 0.0, 1.0]);
        assert_eq!(parse_grid("3, 2, 1").unwrap(), vec![3.0, 2.0, 1.0]);
        assert_eq!(parse_grid("5:9:1").unwrap(), vec![5.0]);
        assert!(parse_grid("1,3,2").is_err());
        assert!(parse_grid("1:2").is_err());
    }
}
