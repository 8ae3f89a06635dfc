//! Config resolution: defaults, then the TOML file, then `--key value` flags.

use std::path::Path;

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches};
use tmepsr::model::{ExperimentConfig, CONFIG_KEYS};

use crate::CliError;

/// One optional `--<key> <VALUE>` flag per config key.
#[derive(Clone, Debug, Default)]
pub struct ConfigOverrides {
    pub values: Vec<(String, String)>,
}

impl FromArgMatches for ConfigOverrides {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let mut out = ConfigOverrides::default();
        out.update_from_arg_matches(m)?;
        Ok(out)
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        for key in CONFIG_KEYS {
            if let Some(v) = m.get_one::<String>(key) {
                self.values.retain(|(k, _)| k != key);
                self.values.push((key.to_string(), v.clone()));
            }
        }
        Ok(())
    }
}

impl Args for ConfigOverrides {
    fn augment_args(cmd: Command) -> Command {
        CONFIG_KEYS.iter().fold(cmd, |cmd, &key| {
            cmd.arg(
                Arg::new(key)
                    .long(key)
                    .value_name("VALUE")
                    .help_heading("Config overrides")
                    .help(format!("Override config key `{key}`")),
            )
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

fn unknown_key(key: &str, origin: &str) -> CliError {
    CliError::Usage(format!(
        "unknown config key `{key}` in {origin}; valid keys: {}",
        CONFIG_KEYS.join(", ")
    ))
}

/// A flag value as a TOML scalar: numbers and booleans keep their type, any
/// other text becomes a string.
fn flag_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn resolve_config(file: Option<&Path>, overrides: &ConfigOverrides) -> Result<ExperimentConfig, CliError> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    let origin = file.map_or_else(String::new, |p| p.display().to_string());
    if let Some(key) = table.keys().find(|k| !CONFIG_KEYS.contains(&k.as_str())) {
        return Err(unknown_key(key, &origin));
    }
    for (key, raw) in &overrides.values {
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(unknown_key(key, "flags"));
        }
        table.insert(key.clone(), flag_value(raw));
    }
    let config: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("invalid config: {}", e.message())))?;
    config.validate().map_err(CliError::Usage)?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn overrides(pairs: &[(&str, &str)]) -> ConfigOverrides {
        ConfigOverrides {
            values: pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    fn config_file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn defaults_without_file() {
        assert_eq!(resolve_config(None, &ConfigOverrides::default()).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn flags_override_file() {
        let f = config_file("d = 60\nH = 3\nalpha = 0.7\ntime_strategy = \"adj_only\"\n");
        let c = resolve_config(Some(f.path()), &overrides(&[("alpha", "0.5"), ("lru_mode", "sequential")])).unwrap();
        assert_eq!((c.d, c.heads, c.alpha), (60, 3, 0.5));
        assert_eq!(c.time_strategy.to_string(), "adj_only");
        assert_eq!(c.lru_mode.to_string(), "sequential");
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let f = config_file("d = 60\nlearning_rat = 0.1\n");
        match resolve_config(Some(f.path()), &ConfigOverrides::default()) {
            Err(CliError::Usage(m)) => {
                assert!(m.contains("learning_rat"));
                assert!(CONFIG_KEYS.iter().all(|k| m.contains(k)));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_values_are_usage_errors() {
        for (k, v) in [("d", "fifty"), ("H", "3"), ("mi_mode", "strong"), ("alpha", "2")] {
            assert!(matches!(resolve_config(None, &overrides(&[(k, v)])), Err(CliError::Usage(_))), "{k}={v}");
        }
    }

    #[test]
    fn resolution_is_pure() {
        let f = config_file("beta = 0.3\n");
        let o = overrides(&[("seed", "5")]);
        let a = resolve_config(Some(f.path()), &o).unwrap();
        let b = resolve_config(Some(f.path()), &o).unwrap();
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn typed_flag_values() {
        assert_eq!(flag_value("3"), toml::Value::Integer(3));
        assert_eq!(flag_value("0.5"), toml::Value::Float(0.5));
        assert_eq!(flag_value("true"), toml::Value::Boolean(true));
        assert_eq!(flag_value("sampled:5"), toml::Value::String("sampled:5".into()));
    }
}
