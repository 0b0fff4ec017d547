//! Flat `key = value` configuration files and flag resolution.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Keys are long flag names without the leading dashes. A flag on
//! the command line wins over the file, the file wins over the default.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", i + 1)))?;
            let key = k.trim().trim_start_matches("--").to_string();
            if key.is_empty() {
                return Err(CliError::Usage(format!("config line {}: empty key", i + 1)));
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(CliError::Usage(format!("config line {}: `{key}` set twice", i + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Resolves settings for one command and records every effective value.
pub struct Resolver<'a> {
    file: &'a ConfigFile,
    snapshot: BTreeMap<String, String>,
}

impl<'a> Resolver<'a> {
    pub fn new(file: &'a ConfigFile) -> Self {
        Self {
            file,
            snapshot: BTreeMap::new(),
        }
    }

    /// Flag, then config file, then nothing.
    pub fn optional<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(raw) => Some(
                    raw.parse::<T>()
                        .map_err(|e| CliError::Usage(format!("config key `{key}`: {e}")))?,
                ),
                None => None,
            },
        };
        if let Some(v) = &value {
            self.snapshot.insert(key.to_string(), v.to_string());
        }
        Ok(value)
    }

    pub fn value<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        match self.optional(key, flag)? {
            Some(v) => Ok(v),
            None => {
                self.snapshot.insert(key.to_string(), default.to_string());
                Ok(default)
            }
        }
    }

    pub fn required<T>(&mut self, key: &str, flag: Option<T>) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.optional(key, flag)?
            .ok_or_else(|| CliError::Usage(format!("missing required flag --{key}")))
    }

    /// A switch that is on when given on the command line or set to `true`
    /// in the file.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool, CliError> {
        let on = if flag {
            true
        } else {
            match self.file.get(key) {
                None => false,
                Some(raw) => raw
                    .parse::<bool>()
                    .map_err(|_| CliError::Usage(format!("config key `{key}`: expected true or false")))?,
            }
        };
        self.snapshot.insert(key.to_string(), on.to_string());
        Ok(on)
    }

    /// Comma-separated list.
    pub fn list<T>(&mut self, key: &str, flag: Option<String>, default: &str) -> Result<Vec<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let raw = self.value(key, flag, default.to_string())?;
        parse_list(&raw).map_err(|e| CliError::Usage(format!("--{key}: {e}")))
    }

    /// Records a value that does not come from a flag.
    pub fn note(&mut self, key: &str, value: impl Display) {
        self.snapshot.insert(key.to_string(), value.to_string());
    }

    /// Config keys this command never asked for.
    pub fn unused_keys(&self) -> Vec<String> {
        self.file
            .keys()
            .filter(|k| !self.snapshot.contains_key(*k))
            .map(str::to_string)
            .collect()
    }

    pub fn into_snapshot(self) -> BTreeMap<String, String> {
        self.snapshot
    }
}

pub fn parse_list<T>(raw: &str) -> Result<Vec<T>, String>
where
    T: FromStr,
    T::Err: Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| format!("`{s}`: {e}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let c = ConfigFile::parse("# sweep\n\nsteps = 20\n --lr=0.5 \n").unwrap();
        assert_eq!(c.get("steps"), Some("20"));
        assert_eq!(c.get("lr"), Some("0.5"));
        assert!(ConfigFile::parse("steps 20").is_err());
        assert!(ConfigFile::parse("a = 1\na = 2").is_err());
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let c = ConfigFile::parse("steps = 20\nlr = 0.5").unwrap();
        let mut r = Resolver::new(&c);
        assert_eq!(r.value("steps", Some(7usize), 1).unwrap(), 7);
        assert_eq!(r.value("lr", None, 0.1f64).unwrap(), 0.5);
        assert_eq!(r.value("batch-size", None, 16usize).unwrap(), 16);
        let snap = r.into_snapshot();
        assert_eq!(snap["steps"], "7");
        assert_eq!(snap["batch-size"], "16");
    }

    #[test]
    fn bad_values_name_the_key() {
        let c = ConfigFile::parse("steps = many").unwrap();
        let err = Resolver::new(&c).value("steps", None, 1usize).unwrap_err();
        assert!(err.to_string().contains("steps"), "{err}");
    }

    #[test]
    fn lists_and_switches() {
        let c = ConfigFile::parse("seeds = 0, 1,2\nembed-tables = true").unwrap();
        let mut r = Resolver::new(&c);
        assert_eq!(r.list::<u64>("seeds", None, "5").unwrap(), [0, 1, 2]);
        assert!(r.switch("embed-tables", false).unwrap());
        assert!(!r.switch("fully-loaded", false).unwrap());
        assert!(r.list::<u64>("other", Some("1,x".into()), "").is_err());
    }
}
