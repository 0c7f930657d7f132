//! `key = value` config files, merged into the command line so that explicit
//! flags win.
//!
//! Blank lines and lines starting with `#` are ignored. A bare key applies to
//! every subcommand that has a flag of that name; `train.lr = 0.01` applies
//! to one subcommand only. Boolean flags take `true` or `false`.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use clap::{ArgAction, Command};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub scope: Option<String>,
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse(text: &str) -> Result<Vec<Entry>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
        let k = k.trim();
        let (scope, key) = match k.split_once('.') {
            Some((s, k)) => (Some(s.trim().to_string()), k.trim()),
            None => (None, k),
        };
        if key.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        out.push(Entry {
            scope,
            key: key.replace('_', "-"),
            value: v.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

/// Flags for `sub` derived from the config entries, to be placed before the
/// user's own arguments.
pub fn to_args(entries: &[Entry], root: &Command, sub: &str) -> Result<Vec<OsString>, String> {
    let cmd = root
        .find_subcommand(sub)
        .ok_or_else(|| format!("unknown subcommand `{sub}`"))?;
    let mut args = Vec::new();
    for e in entries {
        if e.scope.as_deref().is_some_and(|s| s != sub) {
            if root.find_subcommand(e.scope.as_deref().unwrap()).is_none() {
                return Err(format!("line {}: unknown section `{}`", e.line, e.scope.as_deref().unwrap()));
            }
            continue;
        }
        let Some(arg) = cmd.get_arguments().find(|a| a.get_long() == Some(e.key.as_str())) else {
            let known_elsewhere = root
                .get_subcommands()
                .any(|c| c.get_arguments().any(|a| a.get_long() == Some(e.key.as_str())));
            if e.scope.is_some() || !known_elsewhere {
                return Err(format!("line {}: unknown key `{}`", e.line, e.key));
            }
            continue;
        };
        match arg.get_action() {
            ArgAction::SetTrue => match e.value.as_str() {
                "true" => args.push(format!("--{}", e.key).into()),
                "false" => {}
                v => return Err(format!("line {}: `{}` expects true or false, got `{v}`", e.line, e.key)),
            },
            _ => args.push(format!("--{}={}", e.key, e.value).into()),
        }
    }
    Ok(args)
}

/// Rewrites `argv` so values from `--config FILE` (given before the
/// subcommand) precede the subcommand's own flags.
pub fn merge(argv: Vec<OsString>, root: &Command) -> Result<Vec<OsString>, String> {
    let mut config = None;
    let mut head = Vec::new();
    let mut iter = argv.into_iter();
    head.extend(iter.next());
    let mut sub = None;
    while let Some(a) = iter.next() {
        let s = a.to_string_lossy().into_owned();
        if s == "--config" {
            config = Some(iter.next().ok_or("--config needs a path")?);
        } else if let Some(p) = s.strip_prefix("--config=") {
            config = Some(p.into());
        } else if s.starts_with('-') {
            head.push(a);
        } else {
            sub = Some(a);
            break;
        }
    }
    let rest: Vec<OsString> = iter.collect();
    let Some(sub) = sub else {
        return Ok(head);
    };
    let mut out = head;
    out.push(sub.clone());
    if let Some(path) = config {
        let path = Path::new(&path);
        let text = fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let entries = parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        if let Some(name) = sub.to_str().filter(|n| root.find_subcommand(n).is_some()) {
            out.extend(to_args(&entries, root, name).map_err(|e| format!("{}: {e}", path.display()))?);
        }
    }
    out.extend(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Arg;

    fn root() -> Command {
        Command::new("t")
            .subcommand(
                Command::new("train")
                    .arg(Arg::new("lr").long("lr"))
                    .arg(Arg::new("batch").long("batch"))
                    .arg(Arg::new("synthetic").long("synthetic").action(ArgAction::SetTrue)),
            )
            .subcommand(Command::new("demo").arg(Arg::new("steps").long("steps")))
    }

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn parses_scopes_comments_and_underscores() {
        let e = parse("# c\n\nlr = 0.5\ndemo.steps=64\nfwd_iters = 2\n").unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!(e[1].scope.as_deref(), Some("demo"));
        assert_eq!(e[2].key, "fwd-iters");
        assert!(parse("lr 0.5").is_err());
    }

    #[test]
    fn bare_keys_apply_where_they_exist() {
        let entries = parse("lr = 0.5\nsteps = 64\nsynthetic = true\n").unwrap();
        assert_eq!(to_args(&entries, &root(), "train").unwrap(), os(&["--lr=0.5", "--synthetic"]));
        assert_eq!(to_args(&entries, &root(), "demo").unwrap(), os(&["--steps=64"]));
        assert!(to_args(&parse("nope = 1").unwrap(), &root(), "demo").is_err());
        assert!(to_args(&parse("demo.lr = 1").unwrap(), &root(), "demo").is_err());
    }

    #[test]
    fn merged_flags_precede_user_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        fs::write(&path, "lr = 0.5\nbatch = 7\n").unwrap();
        let argv = os(&["t", "--config", path.to_str().unwrap(), "train", "--lr", "0.1"]);
        let merged = merge(argv, &root()).unwrap();
        assert_eq!(merged, os(&["t", "train", "--lr=0.5", "--batch=7", "--lr", "0.1"]));
    }
}
