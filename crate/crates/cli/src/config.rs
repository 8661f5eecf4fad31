//! key=value config files and the resolved-config echo.

use std::path::Path;

use clap::{ArgAction, ArgMatches, Command};

use crate::error::CliError;

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_config(text: &str, path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!(
                "{}:{}: expected key=value, got '{line}'",
                path.display(),
                i + 1
            )));
        };
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[String]) -> Option<String> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

/// Splices the entries of a `--config` file in front of the explicit flags,
/// so flags given on the command line win.
pub fn expand(argv: Vec<String>, cmd: &Command) -> Result<Vec<String>, CliError> {
    if argv.len() < 2 {
        return Ok(argv);
    }
    let Some(path) = config_path(&argv[2..]) else {
        return Ok(argv);
    };
    let Some(sub) = cmd.find_subcommand(&argv[1]) else {
        return Ok(argv);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))?;
    let mut injected = Vec::new();
    for (key, value) in parse_config(&text, path)? {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| CliError::Usage(format!("{}: unknown key '{key}' for {}", path.display(), argv[1])))?;
        if key == "config" {
            return Err(CliError::Usage(format!("{}: config files cannot include other config files", path.display())));
        }
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value.as_str() {
                "true" => injected.push(format!("--{key}")),
                "false" => {}
                other => {
                    return Err(CliError::Usage(format!(
                        "{}: '{key}' expects true or false, got '{other}'",
                        path.display()
                    )))
                }
            }
        } else {
            injected.push(format!("--{key}={value}"));
        }
    }
    let mut out = argv[..2].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[2..]);
    Ok(out)
}

/// Every effective flag value of the subcommand as a config file that
/// reproduces the run (output location excluded).
pub fn echo(cmd: &Command, sub_name: &str, m: &ArgMatches) -> String {
    let mut s = format!("# dfnas {}\n# command: {sub_name}\n", env!("CARGO_PKG_VERSION"));
    let sub = cmd.find_subcommand(sub_name).expect("parsed subcommand exists");
    for arg in sub.get_arguments() {
        let Some(long) = arg.get_long() else { continue };
        if matches!(long, "config" | "out" | "name" | "help" | "version") {
            continue;
        }
        let id = arg.get_id().as_str();
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            s += &format!("{long} = {}\n", m.get_flag(id));
        } else if let Some(vals) = m.get_raw(id) {
            let vals: Vec<String> = vals.map(|v| v.to_string_lossy().into_owned()).collect();
            s += &format!("{long} = {}\n", vals.join(","));
        }
    }
    s
}
