//! Experiment configuration: a flat JSON document whose keys mirror
//! `FederationConfig`, with command-line overrides applied on top of the file
//! before anything is validated, so one config file plus a few flags fully
//! determines a run.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cgfedrec::dataset::LogFormat;
use cgfedrec::federation::FederationConfig;
use serde_json::Value;

/// Where the interaction log comes from.
#[derive(Clone, Debug)]
pub enum DataSource {
    /// The built-in seeded generator with MovieLens-100K marginals.
    Synthetic { seed: u64 },
    /// A `user <sep> item <sep> rating [<sep> timestamp]` log on disk.
    File { path: PathBuf, format: LogFormat },
}

/// Everything a command needs: the science config plus dataset and
/// evaluation plumbing.
#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub federation: FederationConfig,
    pub data: DataSource,
    /// Users with this many interactions or fewer are dropped before the
    /// split (0 keeps everyone).
    pub min_interactions: usize,
    /// Cutoff K of HR@K and NDCG@K.
    pub eval_k: usize,
    /// Stop when validation HR@K has not improved for this many consecutive
    /// rounds; 0 disables early stopping and always runs all rounds.
    pub early_stop_patience: u32,
}

/// Loads the federation config: file values (if any) underneath `key=value`
/// overrides, then one typed parse so unknown keys and bad values fail with
/// the offending field named.
pub fn load_config(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<FederationConfig> {
    let mut doc: Value = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", p.display()))?
        }
        None => Value::Object(Default::default()),
    };
    let Value::Object(map) = &mut doc else {
        bail!("config must be a JSON object with FederationConfig keys");
    };
    for (key, value) in overrides {
        map.insert(key.clone(), value.clone());
    }
    let cfg: FederationConfig =
        serde_json::from_value(doc).context("invalid federation config")?;
    cfg.validate().context("invalid federation config")?;
    Ok(cfg)
}

/// Parses one `--set key=value` override. The value is taken as JSON when it
/// parses as JSON (numbers, booleans), and as a bare string otherwise (so
/// `--set mode=labels_only` works without quoting).
pub fn parse_override(arg: &str) -> Result<(String, Value)> {
    let Some((key, raw)) = arg.split_once('=') else {
        bail!("override {arg:?} is not of the form key=value");
    };
    if key.is_empty() {
        bail!("override {arg:?} has an empty key");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Log format from an explicit name, or from the file extension when absent
/// (`.csv` means comma-separated, anything else tab-separated).
pub fn resolve_format(name: Option<&str>, path: &Path) -> Result<LogFormat> {
    match name {
        Some("tab") => Ok(LogFormat::TabSeparated),
        Some("comma") => Ok(LogFormat::CommaSeparated),
        Some(other) => bail!("unknown format {other:?} (expected tab or comma)"),
        None => Ok(
            if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
                LogFormat::CommaSeparated
            } else {
                LogFormat::TabSeparated
            },
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cgfedrec::federation::BroadcastMode;

    #[test]
    fn overrides_beat_file_values() {
        let dir = std::env::temp_dir().join("cgfedrec-spec-test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("config.json");
        fs::write(&path, r#"{"rounds": 50, "lambda": 0.1}"#).unwrap();
        let overrides = vec![
            parse_override("lambda=0.25").unwrap(),
            parse_override("mode=embeddings_only").unwrap(),
        ];
        let cfg = load_config(Some(&path), &overrides).unwrap();
        assert_eq!(cfg.rounds, 50);
        assert_eq!(cfg.lambda, 0.25);
        assert_eq!(cfg.mode, BroadcastMode::EmbeddingsOnly);
        // Untouched keys keep their defaults.
        assert_eq!(cfg.gamma, FederationConfig::default().gamma);
    }

    #[test]
    fn unknown_keys_name_the_field() {
        let overrides = vec![parse_override("lambda_typo=0.25").unwrap()];
        let err = load_config(None, &overrides).unwrap_err();
        assert!(format!("{err:#}").contains("lambda_typo"), "{err:#}");
    }

    #[test]
    fn override_value_parsing() {
        assert_eq!(
            parse_override("rounds=7").unwrap().1,
            Value::Number(7.into())
        );
        assert_eq!(
            parse_override("mode=labels_only").unwrap().1,
            Value::String("labels_only".into())
        );
        assert!(parse_override("no-equals-sign").is_err());
        assert!(parse_override("=5").is_err());
    }

    #[test]
    fn format_resolution() {
        let csv = Path::new("ratings.csv");
        let tsv = Path::new("u.data");
        assert!(matches!(
            resolve_format(None, csv).unwrap(),
            LogFormat::CommaSeparated
        ));
        assert!(matches!(
            resolve_format(None, tsv).unwrap(),
            LogFormat::TabSeparated
        ));
        assert!(matches!(
            resolve_format(Some("comma"), tsv).unwrap(),
            LogFormat::CommaSeparated
        ));
        assert!(resolve_format(Some("pipe"), tsv).is_err());
    }
}
