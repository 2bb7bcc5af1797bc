//! `key=value` config files and flag/file/default resolution.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use trcl_core::Error;

pub const KEYS: &[&str] = &[
    "adam_eps",
    "batch_size",
    "beta1",
    "beta2",
    "classes",
    "data_root",
    "epochs",
    "layers",
    "log_every_iteration",
    "lr",
    "lr_floor",
    "manifest",
    "out",
    "plateau_window",
    "prefetch",
    "roi",
    "seed",
    "synthetic",
    "val_fraction",
];

/// Values from a config file plus the effective values chosen so far.
#[derive(Default)]
pub struct Resolver {
    file: BTreeMap<String, String>,
    effective: BTreeMap<String, String>,
}

impl Resolver {
    pub fn from_file(path: Option<&Path>) -> Result<Self, Error> {
        let mut file = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
                let k = k.trim().replace('-', "_");
                if !KEYS.contains(&k.as_str()) {
                    return Err(Error::Config(format!("{}:{}: unknown key {k}", path.display(), n + 1)));
                }
                file.insert(k, v.trim().to_string());
            }
        }
        Ok(Resolver { file, effective: BTreeMap::new() })
    }

    /// Flag value if given, else the config file's, else `default`.
    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, Error>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = self.get_opt(key, flag)?.unwrap_or(default);
        self.effective.insert(key.into(), v.to_string());
        Ok(v)
    }

    pub fn get_opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, Error>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(raw) => Some(raw.parse().map_err(|e| Error::Config(format!("config key {key}={raw}: {e}")))?),
                None => None,
            },
        };
        if let Some(v) = &v {
            self.effective.insert(key.into(), v.to_string());
        }
        Ok(v)
    }

    /// Effective configuration as sorted `key=value` lines.
    pub fn render(&self) -> String {
        self.effective.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

/// `CxN`, e.g. `8x250`: C classes with N training images each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
}

impl FromStr for SyntheticSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (c, n) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected CxN, got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("expected CxN, got {s:?}"));
        Ok(SyntheticSpec { classes: parse(c)?, per_class: parse(n)? })
    }
}

impl Display for SyntheticSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.classes, self.per_class)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "# comment\nepochs = 4\nlr=0.01\n").unwrap();
        let mut r = Resolver::from_file(Some(&p)).unwrap();
        assert_eq!(r.get("epochs", Some(2usize), 30).unwrap(), 2);
        assert_eq!(r.get("lr", None, 1e-4).unwrap(), 0.01);
        assert_eq!(r.get("seed", None, 5u64).unwrap(), 5);
        assert_eq!(r.render(), "epochs=2\nlr=0.01\nseed=5\n");
    }

    #[test]
    fn bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "nonsense\n").unwrap();
        assert!(Resolver::from_file(Some(&p)).is_err());
        std::fs::write(&p, "colour=red\n").unwrap();
        assert!(Resolver::from_file(Some(&p)).is_err());
        std::fs::write(&p, "epochs=many\n").unwrap();
        let mut r = Resolver::from_file(Some(&p)).unwrap();
        assert!(r.get("epochs", None, 1usize).is_err());
    }

    #[test]
    fn synthetic_spec() {
        assert_eq!("8x250".parse::<SyntheticSpec>().unwrap(), SyntheticSpec { classes: 8, per_class: 250 });
        assert!("8by250".parse::<SyntheticSpec>().is_err());
    }
}
