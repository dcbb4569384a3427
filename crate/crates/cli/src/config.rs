//! `--config` support: a JSON object whose keys are long flag names of the
//! chosen subcommand. Values fill in flags absent from the command line, so
//! the precedence is command line, then config file, then `NEBULA_SEED`,
//! then built-in defaults.

use std::ffi::OsString;
use std::path::Path;

use clap::parser::ValueSource;
use clap::{ArgMatches, Command};
use serde_json::Value;

/// Appends config-file values to `argv` for flags the user did not pass.
pub fn apply(cmd: &Command, argv: &[OsString], matches: &ArgMatches) -> Result<Vec<OsString>, String> {
    let Some(path) = matches.get_one::<std::path::PathBuf>("config") else {
        return Ok(argv.to_vec());
    };
    let Some((name, sub)) = matches.subcommand() else {
        return Ok(argv.to_vec());
    };
    let sub_cmd = cmd.find_subcommand(name).expect("parsed subcommand exists");
    let values = load(path)?;
    let mut out = argv.to_vec();
    for (key, value) in values {
        let arg = sub_cmd
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && a.get_long() != Some("config"))
            .ok_or_else(|| format!("{}: `{key}` is not a flag of `{name}`", path.display()))?;
        let id = arg.get_id().as_str();
        if sub.value_source(id) == Some(ValueSource::CommandLine) {
            continue;
        }
        let flag = format!("--{key}");
        let items = match value {
            Value::Array(items) => items,
            v => vec![v],
        };
        for item in items {
            match item {
                Value::Bool(true) => out.push(flag.clone().into()),
                Value::Bool(false) | Value::Null => {}
                Value::String(s) => out.push(format!("{flag}={s}").into()),
                Value::Number(n) => out.push(format!("{flag}={n}").into()),
                other => return Err(format!("{}: unsupported value for `{key}`: {other}", path.display())),
            }
        }
    }
    Ok(out)
}

fn load(path: &Path) -> Result<serde_json::Map<String, Value>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(format!("{}: config must be a JSON object", path.display())),
        Err(e) => Err(format!("{}: {e}", path.display())),
    }
}
