//! Merging command-line flags with a TOML defaults file.
//!
//! The file holds one table per subcommand (`[train]`, `[build-dataset]`,
//! ...) whose keys are the flag names with dashes replaced by underscores.
//! A key set both ways to different values is a conflict unless `--force`
//! is given, in which case the flag wins.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::cli::CliError;

pub fn load_file(path: &Path) -> Result<toml::Table, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    text.parse::<toml::Table>().map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// `flags` overlaid on the `section` table of `file`.
pub fn merge<T>(flags: T, section: &str, file: Option<&toml::Table>, force: bool) -> Result<T, CliError>
where
    T: Serialize + DeserializeOwned,
{
    let Some(table) = file.and_then(|f| f.get(section)) else { return Ok(flags) };
    let from_file: T = table
        .clone()
        .try_into()
        .map_err(|e| CliError::Usage(format!("config section [{section}]: {e}")))?;
    let mut merged = serde_json::to_value(&flags).expect("settings serialize");
    let file_value = serde_json::to_value(&from_file).expect("settings serialize");
    let (Value::Object(dst), Value::Object(src)) = (&mut merged, file_value) else {
        return Ok(flags);
    };
    let mut conflicts = Vec::new();
    for (key, fv) in src {
        if fv.is_null() {
            continue;
        }
        match dst.get(&key) {
            None | Some(Value::Null) => {
                dst.insert(key, fv);
            }
            Some(flag) if *flag != fv => conflicts.push(format!("{key} (flag {flag}, file {fv})")),
            Some(_) => {}
        }
    }
    if !conflicts.is_empty() && !force {
        return Err(CliError::Usage(format!(
            "flags conflict with config section [{section}]: {}; pass --force to let flags win",
            conflicts.join(", ")
        )));
    }
    Ok(serde_json::from_value(merged).expect("merged settings deserialize"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    struct S {
        epochs: Option<usize>,
        lr: Option<f64>,
        out: Option<String>,
    }

    fn file(text: &str) -> toml::Table {
        text.parse().unwrap()
    }

    #[test]
    fn file_fills_missing_flags() {
        let f = file("[train]\nepochs = 3\nlr = 0.5\n");
        let s = merge(S { out: Some("x".into()), ..S::default() }, "train", Some(&f), false).unwrap();
        assert_eq!(s, S { epochs: Some(3), lr: Some(0.5), out: Some("x".into()) });
    }

    #[test]
    fn conflicts_need_force() {
        let f = file("[train]\nepochs = 3\n");
        let flags = S { epochs: Some(4), ..S::default() };
        assert!(matches!(merge(flags, "train", Some(&f), false), Err(CliError::Usage(_))));
        let s = merge(S { epochs: Some(4), ..S::default() }, "train", Some(&f), true).unwrap();
        assert_eq!(s.epochs, Some(4));
        let same = merge(S { epochs: Some(3), ..S::default() }, "train", Some(&f), false).unwrap();
        assert_eq!(same.epochs, Some(3));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let f = file("[train]\nepochz = 3\n");
        assert!(matches!(merge(S::default(), "train", Some(&f), false), Err(CliError::Usage(_))));
        assert_eq!(merge(S::default(), "eval", Some(&f), false).unwrap(), S::default());
    }
}
