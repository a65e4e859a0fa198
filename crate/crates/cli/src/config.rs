//! Flat `key = value` run configuration with flag overrides.

use std::collections::BTreeMap;
use std::fmt::{self, Display, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{CliError, Result};

/// Parsed config file: keys are flag names without the leading dashes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    pub entries: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            let k = k.trim().to_string();
            if k.is_empty() {
                return Err(CliError::Usage(format!("{origin}:{}: empty key", n + 1)));
            }
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(CliError::Usage(format!("{origin}:{}: duplicate key `{k}`", n + 1)));
            }
        }
        Ok(ConfigFile { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Merges flags over the config file and records what was used.
pub struct Resolver {
    file: ConfigFile,
    used: Vec<String>,
    effective: Vec<(String, String)>,
}

impl Resolver {
    pub fn new(config: Option<&Path>) -> Result<Self> {
        let file = match config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        Ok(Resolver {
            file,
            used: Vec::new(),
            effective: Vec::new(),
        })
    }

    fn lookup<T: FromStr>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.used.push(key.to_string());
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.entries.get(key) {
            None => Ok(None),
            Some(text) => text
                .parse()
                .map(Some)
                .map_err(|e| CliError::Usage(format!("config key `{key}`: {e}"))),
        }
    }

    fn record(&mut self, key: &str, value: String) {
        self.effective.push((key.to_string(), value));
    }

    /// Flag, else config value, else `default`.
    pub fn value<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self.lookup(key, flag)?.unwrap_or(default);
        self.record(key, v.to_string());
        Ok(v)
    }

    /// Like [`value`](Self::value) but with no default.
    pub fn required<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self
            .lookup(key, flag)?
            .ok_or_else(|| CliError::Usage(format!("missing required option --{key}")))?;
        self.record(key, v.to_string());
        Ok(v)
    }

    pub fn optional<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let v = self.lookup(key, flag)?;
        if let Some(v) = &v {
            self.record(key, v.to_string());
        }
        Ok(v)
    }

    pub fn path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
        Ok(self.required::<Arg<PathBuf>>(key, flag.map(Arg))?.0)
    }

    pub fn optional_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>> {
        Ok(self.optional::<Arg<PathBuf>>(key, flag.map(Arg))?.map(|a| a.0))
    }

    pub fn flag(&mut self, key: &str, set: bool) -> Result<bool> {
        let v = if set { true } else { self.lookup::<bool>(key, None)?.unwrap_or(false) };
        self.record(key, v.to_string());
        Ok(v)
    }

    /// Fail on config keys this command does not understand.
    pub fn finish(&self) -> Result<()> {
        if let Some(k) = self.file.entries.keys().find(|k| !self.used.contains(k)) {
            return Err(CliError::Usage(format!("unknown config key `{k}`")));
        }
        Ok(())
    }

    /// The effective configuration, loadable again with `--config`.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.effective {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| nodule_cascade::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let p = dir.join("config.txt");
        fs::write(&p, self.echo()).map_err(|e| nodule_cascade::Error::Io { path: p, source: e })?;
        Ok(())
    }
}

/// Display and parse a path through the config layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Arg<T>(pub T);

impl FromStr for Arg<PathBuf> {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(Arg(PathBuf::from(s)))
    }
}

impl Display for Arg<PathBuf> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.display())
    }
}

/// Comma-separated list of `N` numbers, e.g. `64,64,32`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct List<T, const N: usize>(pub [T; N]);

impl<T: FromStr + Copy + Default, const N: usize> FromStr for List<T, N>
where
    T::Err: Display,
{
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != N {
            return Err(format!("expected {N} comma-separated values, got `{s}`"));
        }
        let mut out = [T::default(); N];
        for (o, p) in out.iter_mut().zip(parts) {
            *o = p.parse().map_err(|e| format!("`{p}`: {e}"))?;
        }
        Ok(List(out))
    }
}

impl<T: Display, const N: usize> Display for List<T, N> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}
