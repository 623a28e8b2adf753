use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::CliError;

/// Resolves a job config: defaults, then the JSON file, then flags that
/// were given on the command line. Unknown file keys are rejected.
pub fn resolve<T>(file: Option<&Path>, flags: Map<String, Value>) -> Result<T, CliError>
where
    T: Serialize + DeserializeOwned + Default,
{
    let mut base = match serde_json::to_value(T::default()).expect("defaults serialize") {
        Value::Object(m) => m,
        _ => unreachable!("job configs are structs"),
    };
    let label = file.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("<flags>"));
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let Value::Object(obj) = v else {
            return Err(CliError::Config {
                path: path.to_path_buf(),
                message: "top level must be an object".into(),
            });
        };
        overlay(&mut base, obj, &label)?;
    }
    overlay(&mut base, flags, &label)?;
    serde_json::from_value(Value::Object(base)).map_err(|e| CliError::Config {
        path: label,
        message: e.to_string(),
    })
}

fn overlay(base: &mut Map<String, Value>, top: Map<String, Value>, label: &Path) -> Result<(), CliError> {
    for (k, v) in top {
        match base.get_mut(&k) {
            None => {
                return Err(CliError::Config {
                    path: label.to_path_buf(),
                    message: format!("unknown key `{k}`"),
                })
            }
            Some(slot) => {
                merge(slot, v);
            }
        }
    }
    Ok(())
}

/// Objects merge key by key so a file may set only part of a nested value.
fn merge(slot: &mut Value, v: Value) {
    match (slot, v) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                match a.get_mut(&k) {
                    Some(s) => merge(s, v),
                    None => {
                        a.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Collects flags that were actually given into an overlay object.
#[derive(Default)]
pub struct Flags(Map<String, Value>);

impl Flags {
    pub fn set<V: Serialize>(&mut self, key: &str, v: Option<V>) -> &mut Self {
        if let Some(v) = v {
            self.0
                .insert(key.to_string(), serde_json::to_value(v).expect("flag serializes"));
        }
        self
    }

    pub fn flag(&mut self, key: &str, on: bool) -> &mut Self {
        if on {
            self.0.insert(key.to_string(), Value::Bool(true));
        }
        self
    }

    pub fn into_map(self) -> Map<String, Value> {
        self.0
    }
}

pub fn require<'a>(v: &'a Option<PathBuf>, name: &str) -> Result<&'a Path, CliError> {
    v.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing required --{name} (flag or config key)")))
}
