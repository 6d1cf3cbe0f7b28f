//! Layered configuration: defaults, then a TOML file, then `section.key=value` overrides.

use std::path::Path;

use anyhow::{anyhow, Context};
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::UsageError;

/// Effective config plus its canonical TOML text.
pub struct Merged<T> {
    pub value: T,
    pub text: String,
}

pub fn merge<T: Serialize + DeserializeOwned>(
    base: &T,
    file: Option<&Path>,
    sets: &[String],
) -> anyhow::Result<Merged<T>> {
    let mut table = Table::try_from(base).context("serializing defaults")?;
    let mut requested: Vec<Vec<String>> = Vec::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let user: Table = toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        leaf_paths(&user, &mut Vec::new(), &mut requested);
        deep_merge(&mut table, user);
    }
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| UsageError(format!("override '{s}' is not of the form key=value")))?;
        let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
        set_path(&mut table, &path, parse_value(raw.trim()))?;
        requested.push(path);
    }
    let value: T = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| UsageError(format!("invalid config: {e}")))?;
    let round = Table::try_from(&value).context("serializing merged config")?;
    for path in &requested {
        if !has_path(&round, path) {
            return Err(UsageError(format!("unknown config key '{}'", path.join("."))).into());
        }
    }
    let text = toml::to_string(&value).context("serializing merged config")?;
    Ok(Merged { value, text })
}

/// TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn deep_merge(dst: &mut Table, src: Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(Value::Table(d)), Value::Table(s)) => deep_merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

fn set_path(table: &mut Table, path: &[String], v: Value) -> anyhow::Result<()> {
    let (last, parents) = path.split_last().ok_or_else(|| anyhow!("empty key"))?;
    let mut cur = table;
    for p in parents {
        cur = match cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(t) => t,
            _ => return Err(UsageError(format!("'{p}' in '{}' is not a section", path.join("."))).into()),
        };
    }
    cur.insert(last.clone(), v);
    Ok(())
}

fn leaf_paths(t: &Table, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    for (k, v) in t {
        prefix.push(k.clone());
        match v {
            Value::Table(inner) if !inner.is_empty() => leaf_paths(inner, prefix, out),
            _ => out.push(prefix.clone()),
        }
        prefix.pop();
    }
}

fn has_path(t: &Table, path: &[String]) -> bool {
    match path.split_first() {
        None => true,
        Some((k, rest)) => match t.get(k) {
            Some(Value::Table(inner)) => has_path(inner, rest),
            Some(_) => rest.is_empty(),
            None => false,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    #[serde(default)]
    struct Inner {
        lr: f64,
        name: String,
    }

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    #[serde(default)]
    struct Outer {
        seed: u64,
        opt: Inner,
    }

    impl Default for Inner {
        fn default() -> Self {
            Self { lr: 0.1, name: "a".into() }
        }
    }

    impl Default for Outer {
        fn default() -> Self {
            Self { seed: 1, opt: Inner::default() }
        }
    }

    #[test]
    fn overrides_apply_in_order() {
        let m = merge(&Outer::default(), None, &["opt.lr=0.5".into(), "opt.name=bee".into(), "seed=9".into()]).unwrap();
        assert_eq!(m.value, Outer { seed: 9, opt: Inner { lr: 0.5, name: "bee".into() } });
    }

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 3\n[opt]\nlr = 0.2\n").unwrap();
        let m = merge(&Outer::default(), Some(&p), &["opt.lr=0.3".into()]).unwrap();
        assert_eq!(m.value.seed, 3);
        assert_eq!(m.value.opt.lr, 0.3);
        assert_eq!(m.value.opt.name, "a");
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let e = merge(&Outer::default(), None, &["opt.lrr=1".into()]).err().unwrap();
        assert!(e.downcast_ref::<UsageError>().is_some());
        let e = merge(&Outer::default(), None, &["seed".into()]).err().unwrap();
        assert!(e.downcast_ref::<UsageError>().is_some());
    }
}
