//! Config-file expansion: a `key = value` text file mirrors every long
//! flag of the subcommand it is passed to. Values given both in the file
//! and on the command line must agree, otherwise the run aborts naming the
//! flag and both values.

use std::fs;
use std::path::Path;

use crate::CliError;

fn parse_config_file(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::user(format!(
                "{}:{}: expected 'key = value'",
                path.display(),
                lineno + 1
            ))
        })?;
        let key = key.trim().trim_start_matches("--").to_string();
        let value = value.trim().trim_matches('"').to_string();
        if key.is_empty() {
            return Err(CliError::user(format!(
                "{}:{}: empty key",
                path.display(),
                lineno + 1
            )));
        }
        out.push((key, value));
    }
    Ok(out)
}

/// Expands `--config FILE` into explicit flags. Returns the effective
/// argument vector (binary name excluded) with the `--config` pair removed.
pub fn expand_config_args(raw: &[String]) -> Result<Vec<String>, CliError> {
    let mut args: Vec<String> = raw.to_vec();
    let Some(pos) = args.iter().position(|a| a == "--config") else {
        return Ok(args);
    };
    if pos + 1 >= args.len() {
        return Err(CliError::user("--config needs a file path"));
    }
    let path = args[pos + 1].clone();
    args.drain(pos..=pos + 1);
    let entries = parse_config_file(Path::new(&path))?;

    // Values already present on the command line must not disagree.
    let mut cli_values: std::collections::HashMap<String, String> = Default::default();
    let mut i = 0;
    while i < args.len() {
        if let Some(flag) = args[i].strip_prefix("--") {
            if let Some((k, v)) = flag.split_once('=') {
                cli_values.insert(k.to_string(), v.to_string());
            } else if i + 1 < args.len() && !args[i + 1].starts_with("--") {
                cli_values.insert(flag.to_string(), args[i + 1].clone());
                i += 1;
            } else {
                cli_values.insert(flag.to_string(), "true".to_string());
            }
        }
        i += 1;
    }

    let mut injected = Vec::new();
    for (key, value) in entries {
        if let Some(cli) = cli_values.get(&key) {
            if cli != &value {
                return Err(CliError::user(format!(
                    "conflicting values for --{key}: '{cli}' on the command line vs '{value}' in {path}"
                )));
            }
            continue;
        }
        match value.as_str() {
            "true" => injected.push(format!("--{key}")),
            "false" => {}
            v => {
                injected.push(format!("--{key}"));
                injected.push(v.to_string());
            }
        }
    }

    // Config values go after the subcommand, before explicit flags.
    let insert_at = if args.is_empty() { 0 } else { 1 };
    let mut out = args;
    for (offset, arg) in injected.into_iter().enumerate() {
        out.insert(insert_at + offset, arg);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn expands_keys_into_flags() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "max-steps = 50\n# comment\nno-shuffle = true\nlr = 0.001").unwrap();
        let raw = strings(&[
            "train",
            "--config",
            f.path().to_str().unwrap(),
            "--out",
            "x.ckpt",
        ]);
        let got = expand_config_args(&raw).unwrap();
        assert_eq!(
            got,
            strings(&[
                "train",
                "--max-steps",
                "50",
                "--no-shuffle",
                "--lr",
                "0.001",
                "--out",
                "x.ckpt"
            ])
        );
    }

    #[test]
    fn agreeing_duplicate_is_fine_conflicting_is_fatal() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "max-steps = 50").unwrap();
        let ok = strings(&[
            "train",
            "--config",
            f.path().to_str().unwrap(),
            "--max-steps",
            "50",
        ]);
        assert_eq!(
            expand_config_args(&ok).unwrap(),
            strings(&["train", "--max-steps", "50"])
        );
        let bad = strings(&[
            "train",
            "--config",
            f.path().to_str().unwrap(),
            "--max-steps",
            "99",
        ]);
        let err = expand_config_args(&bad).unwrap_err();
        assert!(err.message.contains("max-steps"));
        assert!(err.message.contains("99") && err.message.contains("50"));
        assert_eq!(err.code, 2);
    }

    #[test]
    fn no_config_flag_is_identity() {
        let raw = strings(&["train", "--max-steps", "5"]);
        assert_eq!(expand_config_args(&raw).unwrap(), raw);
    }
}
