//! Option resolution: command-line flag, then config file, then default.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::ValueEnum;
use posemap::{KappaTable, WindowConfig};

pub const KAPPA_ENV: &str = "POSEMAP_KAPPA_TABLE";

/// Keys accepted in a config file; they mirror the long flag names.
const KNOWN_KEYS: &[&str] = &[
    "alpha",
    "balance-seed",
    "bins",
    "blur-sigma",
    "format",
    "grid-h",
    "grid-w",
    "iterations",
    "jobs",
    "kappa",
    "kappa-table",
    "method",
    "normalizer",
    "padding",
    "presence-threshold",
    "scale",
    "seed",
    "step",
    "strength-max",
    "strength-min",
    "t-grid",
];

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation: exit code 1.
    Usage(String),
    /// Unreadable or invalid data, failed computation: exit code 2.
    Data(anyhow::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Data(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Data(e)
    }
}

impl From<posemap::Error> for CliError {
    fn from(e: posemap::Error) -> Self {
        CliError::Data(e.into())
    }
}

impl From<posemap::interop::InteropError> for CliError {
    fn from(e: posemap::interop::InteropError) -> Self {
        CliError::Data(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// `key = value` lines; `#` starts a comment.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
    source: String,
}

impl ConfigFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, source: &str) -> CliResult<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(usage(format!("{source}:{}: expected key=value", i + 1)));
            };
            let key = key.trim().replace('_', "-");
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(usage(format!("{source}:{}: unknown key '{key}'", i + 1)));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(Self { values, source: source.to_string() })
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }
}

/// Resolves options against an optional config file.
#[derive(Debug, Clone, Default)]
pub struct Resolver {
    file: ConfigFile,
}

impl Resolver {
    pub fn new(config: Option<&Path>) -> CliResult<Self> {
        let file = match config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        Ok(Self { file })
    }

    #[cfg(test)]
    pub fn from_file(file: ConfigFile) -> Self {
        Self { file }
    }

    pub fn opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> CliResult<Option<T>>
    where
        T::Err: fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| usage(format!("{}: invalid value '{v}' for {key}: {e}", self.file.source))),
        }
    }

    pub fn get<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> CliResult<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.opt(flag, key)?.unwrap_or(default))
    }

    pub fn choice<T: ValueEnum>(&self, flag: Option<T>, key: &str, default: T) -> CliResult<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.file.raw(key) {
            None => Ok(default),
            Some(v) => T::from_str(v, true)
                .map_err(|e| usage(format!("{}: invalid value '{v}' for {key}: {e}", self.file.source))),
        }
    }

    pub fn required<T: FromStr>(&self, flag: Option<T>, key: &str) -> CliResult<T>
    where
        T::Err: fmt::Display,
    {
        self.opt(flag, key)?.ok_or_else(|| usage(format!("--{key} is required")))
    }

    pub fn window(
        &self,
        padding: Option<f64>,
        grid_w: Option<usize>,
        grid_h: Option<usize>,
    ) -> CliResult<WindowConfig> {
        let d = WindowConfig::default();
        let cfg = WindowConfig {
            padding: self.get(padding, "padding", d.padding)?,
            grid_w: self.get(grid_w, "grid-w", d.grid_w)?,
            grid_h: self.get(grid_h, "grid-h", d.grid_h)?,
        };
        if !(cfg.padding >= 1.0 && cfg.padding.is_finite()) {
            return Err(usage(format!("padding {} must be at least 1", cfg.padding)));
        }
        if cfg.grid_w == 0 || cfg.grid_h == 0 {
            return Err(usage("grid sizes must be positive"));
        }
        Ok(cfg)
    }

    /// Flag, then config file, then the environment, then built-in values.
    pub fn kappa_table(&self, flag: Option<PathBuf>) -> CliResult<KappaTable> {
        let path = self.opt(flag, "kappa-table")?.or_else(|| std::env::var_os(KAPPA_ENV).map(PathBuf::from));
        let Some(path) = path else {
            return Ok(KappaTable::default());
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Data(anyhow::anyhow!("cannot read kappa table {}: {e}", path.display())))?;
        log::info!("kappa table from {}", path.display());
        text.parse().map_err(|e: posemap::Error| CliError::Data(anyhow::anyhow!("kappa table {}: {e}", path.display())))
    }
}

/// `lo:hi:n` (log-spaced, inclusive) or a comma-separated list.
pub fn parse_t_grid(s: &str) -> CliResult<Vec<f64>> {
    let bad = || usage(format!("invalid temperature grid '{s}'"));
    let grid: Vec<f64> = if let [lo, hi, n] = s.split(':').collect::<Vec<_>>()[..] {
        let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
        let n: usize = n.trim().parse().map_err(|_| bad())?;
        if n < 2 || !(lo > 0.0 && hi > lo) {
            return Err(bad());
        }
        let (a, b) = (lo.ln(), hi.ln());
        (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
    } else {
        s.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| bad())).collect::<CliResult<_>>()?
    };
    if grid.is_empty() || grid.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
        return Err(bad());
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file = ConfigFile::parse("padding = 1.5\n# comment\nseed=9  # trailing\n", "test").unwrap();
        let r = Resolver::from_file(file);
        assert_eq!(r.get(Some(2.0), "padding", 1.25).unwrap(), 2.0);
        assert_eq!(r.get(None, "padding", 1.25).unwrap(), 1.5);
        assert_eq!(r.get(None::<u64>, "seed", 0).unwrap(), 9);
        assert_eq!(r.get(None, "alpha", 0.02).unwrap(), 0.02);
    }

    #[test]
    fn bad_config_is_a_usage_error() {
        assert!(matches!(ConfigFile::parse("nonsense", "t"), Err(CliError::Usage(_))));
        assert!(matches!(ConfigFile::parse("colour=red", "t"), Err(CliError::Usage(_))));
        let r = Resolver::from_file(ConfigFile::parse("seed=x", "t").unwrap());
        assert!(matches!(r.opt(None::<u64>, "seed"), Err(CliError::Usage(_))));
    }

    #[test]
    fn t_grid_forms() {
        assert_eq!(parse_t_grid("0.5,1,2").unwrap(), vec![0.5, 1.0, 2.0]);
        let g = parse_t_grid("0.25:4:5").unwrap();
        assert_eq!(g.len(), 5);
        assert!((g[2] - 1.0).abs() < 1e-12);
        assert!(parse_t_grid("1:0.5:3").is_err());
        assert!(parse_t_grid("0,1").is_err());
    }
}
