//! Turns a `--config` TOML file into command-line arguments.
//!
//! File values are inserted before the user's own arguments so that flags
//! given on the command line win.

use std::ffi::OsString;
use std::fs;

use anyhow::{bail, Context, Result};

const SUBCOMMANDS: &[&str] = &[
    "gen-data",
    "train",
    "eval",
    "minimal-verify",
    "probe",
    "intervene",
    "sweep-grid",
    "appendix-b",
    "evolution",
    "random-init",
    "eos-stats",
    "correlation",
    "export",
];

pub fn expand_args(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&argv) else { return Ok(argv) };
    let text = fs::read_to_string(&path).with_context(|| format!("reading {path}"))?;
    let table: toml::Table = text.parse().with_context(|| format!("parsing {path}"))?;

    let sub_pos = argv.iter().position(|a| a.to_str().is_some_and(|s| SUBCOMMANDS.contains(&s)));
    let sub_name = sub_pos.and_then(|i| argv[i].to_str()).unwrap_or_default().to_string();

    let mut global = Vec::new();
    let mut local = Vec::new();
    for (key, value) in &table {
        match value {
            toml::Value::Table(t) if SUBCOMMANDS.contains(&key.as_str()) => {
                if *key == sub_name {
                    for (k, v) in t {
                        push_flag(&mut local, k, v)?;
                    }
                }
            }
            _ => push_flag(&mut global, key, value)?,
        }
    }

    let mut out = Vec::with_capacity(argv.len() + global.len() + local.len());
    let mut iter = argv.into_iter();
    out.extend(iter.next());
    out.extend(global);
    match sub_pos {
        Some(p) => {
            let rest: Vec<OsString> = iter.collect();
            out.extend(rest[..p].iter().cloned());
            out.extend(local);
            out.extend(rest[p..].iter().cloned());
        }
        None => out.extend(iter),
    }
    Ok(out)
}

fn config_path(argv: &[OsString]) -> Option<String> {
    let mut it = argv.iter().filter_map(|a| a.to_str());
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().map(str::to_string);
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

fn push_flag(out: &mut Vec<OsString>, key: &str, value: &toml::Value) -> Result<()> {
    let flag = format!("--{}", key.replace('_', "-"));
    match value {
        toml::Value::Boolean(true) => out.push(flag.into()),
        toml::Value::Boolean(false) => {}
        toml::Value::String(s) => out.extend([flag.into(), s.into()]),
        toml::Value::Integer(i) => out.extend([flag.into(), i.to_string().into()]),
        toml::Value::Float(f) => out.extend([flag.into(), f.to_string().into()]),
        toml::Value::Array(items) => {
            out.push(flag.into());
            for item in items {
                match item {
                    toml::Value::String(s) => out.push(s.into()),
                    toml::Value::Integer(i) => out.push(i.to_string().into()),
                    toml::Value::Float(f) => out.push(f.to_string().into()),
                    other => bail!("unsupported array element for `{key}`: {other}"),
                }
            }
        }
        other => bail!("unsupported value for `{key}`: {other}"),
    }
    Ok(())
}
