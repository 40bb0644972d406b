//! `--config` files and the flag > file > default merge.
//!
//! The file is TOML. Top-level keys apply to every subcommand; a table named
//! after the subcommand (`[train]`, `[gradcheck]`, ...) overrides them.
//! Keys use the flag spelling with `-` or `_`.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{Map, Value};

use crate::Failure;

/// Every key a config file may set.
const KNOWN_KEYS: &[&str] = &[
    "seed",
    "precision",
    "reinforcer",
    "lm",
    "layers",
    "embed_dim",
    "heads",
    "kernel_size",
    "shift_size",
    "max_len",
    "ffn_dim",
    "no_positional",
    "no_reinforcer_bias",
    "lr",
    "batch_size",
    "label_smoothing",
    "epochs",
    "eval_every",
    "freeze",
    "no_split",
    "h",
    "tol",
    "sentences",
    "n",
    "ratios",
];

const SUBCOMMANDS: &[&str] = &[
    "lexicon",
    "stats",
    "synth",
    "split",
    "train",
    "eval",
    "convert",
    "gradcheck",
    "attn",
    "casestudy",
    "convert-databaker",
    "convert_databaker",
];

#[derive(Default)]
pub struct FileConfig {
    values: BTreeMap<String, toml::Value>,
}

fn normalize(key: &str) -> String {
    key.replace('-', "_")
}

impl FileConfig {
    pub fn load(path: &Path, subcommand: &str) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        Self::parse(&text, subcommand).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str, subcommand: &str) -> Result<Self, String> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.message().to_string())?;
        let mut values = BTreeMap::new();
        let mut section = None;
        for (key, value) in table {
            match value {
                toml::Value::Table(t) if SUBCOMMANDS.contains(&key.as_str()) => {
                    if normalize(&key) == normalize(subcommand) {
                        section = Some(t);
                    }
                }
                toml::Value::Table(_) => return Err(format!("unknown section `[{key}]`")),
                v => {
                    values.insert(normalize(&key), v);
                }
            }
        }
        for (key, value) in section.into_iter().flatten() {
            values.insert(normalize(&key), value);
        }
        if let Some(bad) = values.keys().find(|k| !KNOWN_KEYS.contains(&k.as_str())) {
            return Err(format!("unknown key `{bad}`"));
        }
        Ok(FileConfig { values })
    }
}

/// Conversion from a TOML value, with a JSON rendering for the echo.
pub trait Setting: Sized + Clone {
    fn from_toml(v: &toml::Value) -> Option<Self>;
    fn to_json(&self) -> Value;
}

impl Setting for f64 {
    fn from_toml(v: &toml::Value) -> Option<Self> {
        v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
    }
    fn to_json(&self) -> Value {
        Value::from(*self)
    }
}

impl Setting for usize {
    fn from_toml(v: &toml::Value) -> Option<Self> {
        v.as_integer().and_then(|i| usize::try_from(i).ok())
    }
    fn to_json(&self) -> Value {
        Value::from(*self)
    }
}

impl Setting for u64 {
    fn from_toml(v: &toml::Value) -> Option<Self> {
        v.as_integer().and_then(|i| u64::try_from(i).ok())
    }
    fn to_json(&self) -> Value {
        Value::from(*self)
    }
}

impl Setting for bool {
    fn from_toml(v: &toml::Value) -> Option<Self> {
        v.as_bool()
    }
    fn to_json(&self) -> Value {
        Value::from(*self)
    }
}

impl Setting for String {
    fn from_toml(v: &toml::Value) -> Option<Self> {
        v.as_str().map(str::to_string)
    }
    fn to_json(&self) -> Value {
        Value::from(self.as_str())
    }
}

/// Resolves settings and records every resolved value for the echo.
pub struct Resolver {
    file: FileConfig,
    resolved: Map<String, Value>,
}

impl Resolver {
    pub fn new(file: FileConfig) -> Self {
        Resolver {
            file,
            resolved: Map::new(),
        }
    }

    pub fn get<T: Setting>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, Failure> {
        let value = self.optional(key, flag)?.unwrap_or(default);
        self.resolved.insert(key.to_string(), value.to_json());
        Ok(value)
    }

    /// Flag, else file, else `None`; only recorded when set.
    pub fn optional<T: Setting>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, Failure> {
        let value = match flag {
            Some(v) => Some(v),
            None => match self.file.values.get(key) {
                Some(raw) => Some(
                    T::from_toml(raw)
                        .ok_or_else(|| Failure::Usage(format!("config key `{key}` has the wrong type: {raw}")))?,
                ),
                None => None,
            },
        };
        if let Some(v) = &value {
            self.resolved.insert(key.to_string(), v.to_json());
        }
        Ok(value)
    }

    /// A flag that is either set on the command line or in the file.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool, Failure> {
        self.get(key, flag.then_some(true), false)
    }

    /// Records a value that has no file or default layer (paths, text).
    pub fn note(&mut self, key: &str, value: impl Into<Value>) {
        self.resolved.insert(key.to_string(), value.into());
    }

    pub fn echo(&self, subcommand: &str) -> String {
        let mut m = Map::new();
        m.insert("command".into(), Value::from(subcommand));
        m.extend(self.resolved.clone());
        Value::Object(m).to_string()
    }
}
