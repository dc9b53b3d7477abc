//! Flat `key = value` text files used for configuration, calibration and
//! synthetic scene specs. Keys may carry dotted section prefixes
//! (`tracker.knn_k = 10`); `#` starts a comment.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::se3::{Pose, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    source: String,
    entries: Vec<Entry>,
}

impl KeyValues {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(format!("{source}:{}", n + 1), "expected `key = value`"))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::parse(format!("{source}:{}", n + 1), "empty key"));
            }
            entries.push(Entry {
                key: key.to_string(),
                value: value.trim().to_string(),
                line: n + 1,
            });
        }
        Ok(Self {
            source: source.to_string(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingAsset(vec![path.to_path_buf()]));
        }
        Self::parse(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn location(&self, e: &Entry) -> String {
        format!("{}:{}", self.source, e.line)
    }

    /// The last entry for `key`.
    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().rev().find(|e| e.key == key)
    }

    pub fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a Entry> + 'a {
        self.entries.iter().filter(move |e| e.key == key)
    }

    /// Error on any key outside `known` (exact names or `prefix.` wildcards
    /// ending in a dot).
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        for e in &self.entries {
            let ok = known
                .iter()
                .any(|k| if k.ends_with('.') { e.key.starts_with(k) } else { e.key == *k });
            if !ok {
                return Err(Error::parse(self.location(e), format!("unknown key `{}`", e.key)));
            }
        }
        Ok(())
    }

    pub fn parse_entry<T: FromStr>(&self, e: &Entry) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        e.value
            .parse()
            .map_err(|err| Error::parse(self.location(e), format!("`{}`: {err}", e.key)))
    }

    pub fn value<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key).map(|e| self.parse_entry(e)).transpose()
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.value(key)?
            .ok_or_else(|| Error::parse(self.source.clone(), format!("missing key `{key}`")))
    }

    /// Overwrite `slot` when `key` is present.
    pub fn set<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.value(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn floats_of(&self, e: &Entry) -> Result<Vec<f64>> {
        e.value
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|err| Error::parse(self.location(e), format!("`{}`: {err}", e.key)))
    }

    pub fn floats(&self, key: &str, n: usize) -> Result<Option<Vec<f64>>> {
        let Some(e) = self.get(key) else {
            return Ok(None);
        };
        let v = self.floats_of(e)?;
        if v.len() != n {
            return Err(Error::parse(
                self.location(e),
                format!("`{key}` needs {n} numbers, got {}", v.len()),
            ));
        }
        Ok(Some(v))
    }

    pub fn vec3(&self, key: &str) -> Result<Option<Vec3>> {
        Ok(self.floats(key, 3)?.map(|v| Vec3::new(v[0], v[1], v[2])))
    }

    /// A pose written as `tx ty tz qx qy qz qw`.
    pub fn pose(&self, key: &str) -> Result<Option<Pose>> {
        match self.floats(key, 7)? {
            None => Ok(None),
            Some(v) => Pose::from_tum(&v)
                .map(Some)
                .map_err(|err| Error::parse(self.location(self.get(key).unwrap()), err.to_string())),
        }
    }

    pub fn boolean(&self, key: &str) -> Result<Option<bool>> {
        let Some(e) = self.get(key) else {
            return Ok(None);
        };
        match e.value.as_str() {
            "true" | "1" | "yes" | "on" => Ok(Some(true)),
            "false" | "0" | "no" | "off" => Ok(Some(false)),
            other => Err(Error::parse(self.location(e), format!("`{}`: not a boolean: {other}", e.key))),
        }
    }
}
