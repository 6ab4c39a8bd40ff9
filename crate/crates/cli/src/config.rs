use std::fs;
use std::path::Path;

use anyhow::Context;
use clap::ValueEnum;
use dreampaint_core::catalog::BenchmarkConfig;
use dreampaint_core::eval::{BenchmarkOptions, ScorerTrainConfig};
use dreampaint_core::{FinetuneConfig, PretrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ConfigError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    #[default]
    Toy,
    PaperScale,
}

/// Every tunable of every command. A config file may set any subset; flags
/// given on the command line win over it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub profile: Profile,
    pub dataset: BenchmarkConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub scorer: ScorerTrainConfig,
    pub benchmark: BenchmarkOptions,
}

impl CliConfig {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            profile,
            dataset: BenchmarkConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: match profile {
                Profile::Toy => FinetuneConfig::toy(),
                Profile::PaperScale => FinetuneConfig::paper_scale(),
            },
            scorer: ScorerTrainConfig::default(),
            benchmark: BenchmarkOptions::default(),
        }
    }

    /// Profile defaults overlaid with the file, if any. `profile` on the
    /// command line beats the file's `profile` key.
    pub fn resolve(profile: Option<Profile>, file: Option<&Path>) -> anyhow::Result<Self> {
        let overlay = match file {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let v: Value = serde_json::from_str(&text)
                    .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
                if !v.is_object() {
                    return Err(ConfigError(format!("{}: top level must be an object", path.display())).into());
                }
                v
            }
            None => Value::Object(Default::default()),
        };
        let profile = match profile {
            Some(p) => p,
            None => match overlay.get("profile") {
                Some(p) => serde_json::from_value(p.clone()).map_err(|e| ConfigError(format!("profile: {e}")))?,
                None => Profile::Toy,
            },
        };
        let mut merged = serde_json::to_value(Self::for_profile(profile))?;
        merge(&mut merged, overlay);
        merged["profile"] = serde_json::to_value(profile)?;
        serde_json::from_value(merged).map_err(|e| ConfigError(e.to_string()).into())
    }
}

/// Recursive object merge; non-object values in `over` replace.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(json: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        fs::write(f.path(), json).unwrap();
        f
    }

    #[test]
    fn profiles_select_finetune_defaults() {
        let toy = CliConfig::resolve(None, None).unwrap();
        assert_eq!((toy.finetune.steps, toy.finetune.learning_rate), (400, 1e-3));
        let scaled = CliConfig::resolve(Some(Profile::PaperScale), None).unwrap();
        assert_eq!((scaled.finetune.steps, scaled.finetune.learning_rate), (500, 5e-6));
        assert_eq!(scaled.benchmark.guidance, 10.0);
    }

    #[test]
    fn file_overlays_nested_keys() {
        let f = write(r#"{"profile": "paper-scale", "pretrain": {"denoiser": {"width": 8}}}"#);
        let c = CliConfig::resolve(None, Some(f.path())).unwrap();
        assert_eq!(c.profile, Profile::PaperScale);
        assert_eq!(c.finetune.steps, 500);
        assert_eq!(c.pretrain.denoiser.width, 8);
        assert_eq!(c.pretrain.denoiser.depth, 2);
        let c = CliConfig::resolve(Some(Profile::Toy), Some(f.path())).unwrap();
        assert_eq!(c.finetune.steps, 400);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for json in [
            r#"{"pretrian": {}}"#,
            r#"{"finetune": {"stpes": 3}}"#,
            r#"{"pretrain": {"masks": {"jitter": {"radius": 1}}}}"#,
        ] {
            let f = write(json);
            let err = CliConfig::resolve(None, Some(f.path())).unwrap_err();
            assert!(err.downcast_ref::<ConfigError>().is_some(), "{json}: {err}");
        }
    }
}
