//! Merges a flat `key = value` file into the argument list. Flags given on
//! the command line win.

use std::ffi::OsString;
use std::path::PathBuf;

use nasproxy::harness::parse_config_file;

/// Removes `--config <path>` / `--config=<path>` from `args`.
fn take_config(args: &mut Vec<OsString>) -> Option<PathBuf> {
    let mut i = 0;
    while i < args.len() {
        let a = args[i].to_string_lossy().into_owned();
        if a == "--config" && i + 1 < args.len() {
            let p = args.remove(i + 1);
            args.remove(i);
            return Some(PathBuf::from(p));
        }
        if let Some(p) = a.strip_prefix("--config=") {
            args.remove(i);
            return Some(PathBuf::from(p));
        }
        i += 1;
    }
    None
}

fn given(args: &[OsString], key: &str) -> bool {
    let flag = format!("--{key}");
    let prefix = format!("{flag}=");
    args.iter().any(|a| {
        let a = a.to_string_lossy();
        a == flag.as_str() || a.starts_with(&prefix)
    })
}

/// Returns `args` with config entries spliced in after the subcommand name.
pub fn merge(mut args: Vec<OsString>, subcommands: &[&str]) -> nasproxy::Result<Vec<OsString>> {
    let Some(path) = take_config(&mut args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| {
        nasproxy::Error::Config(format!("cannot read config {}: {e}", path.display()))
    })?;
    let entries = parse_config_file(&text)?;
    let at = args
        .iter()
        .position(|a| subcommands.contains(&a.to_string_lossy().as_ref()))
        .map_or(args.len(), |i| i + 1);
    let mut extra = Vec::new();
    for (key, value) in entries {
        if given(&args, &key) {
            continue;
        }
        match value.as_str() {
            "true" => extra.push(OsString::from(format!("--{key}"))),
            "false" => {}
            _ => {
                extra.push(OsString::from(format!("--{key}")));
                extra.push(OsString::from(value));
            }
        }
    }
    args.splice(at..at, extra);
    Ok(args)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn flags_win_over_file() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "seed = 3\nn = 20\ninclude-pred-bias = true\nverbose = false").unwrap();
        let path = f.path().to_string_lossy().into_owned();
        let args = os(&["nasproxy", "random-search", "--config", &path, "--seed", "9"]);
        let merged = merge(args, &["random-search"]).unwrap();
        assert_eq!(
            merged,
            os(&["nasproxy", "random-search", "--n", "20", "--include-pred-bias", "--seed", "9"])
        );
    }

    #[test]
    fn no_config_is_identity() {
        let args = os(&["nasproxy", "score", "--genotype", "0|0|0|0|0|0"]);
        assert_eq!(merge(args.clone(), &["score"]).unwrap(), args);
    }
}
