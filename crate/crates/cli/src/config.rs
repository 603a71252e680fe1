//! Run configuration: a TOML file with `[model]`, `[train]` and `[data]`
//! tables, plus `key=value` overrides from the command line.

use std::path::{Path, PathBuf};

use ggpfn::model::GgpfnConfig;
use ggpfn::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training volumes. Relative paths resolve against the config file.
    pub train: Vec<PathBuf>,
    /// Validation volumes, disjoint from `train`.
    pub val: Vec<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: GgpfnConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `overrides` and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, Failure> {
        // Layering the file over the serialized defaults keeps per-stage
        // defaults for keys a partial table leaves out.
        let mut table: toml::Table =
            Self::default().to_toml()?.parse().map_err(|e: toml::de::Error| Failure::usage(e.to_string()))?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
            let file = text.parse::<toml::Table>().map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
            merge(&mut table, file);
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        // Round-trip through text so that errors carry the offending key.
        let text = toml::to_string(&table).map_err(|e| Failure::usage(e.to_string()))?;
        let mut run: RunConfig =
            toml::from_str(&text).map_err(|e| Failure::usage(format!("invalid configuration: {}", e.message())))?;
        if let Some(base) = path.and_then(Path::parent) {
            run.data.resolve(base);
        }
        run.model.validate()?;
        run.train.validate()?;
        Ok(run)
    }

    pub fn to_toml(&self) -> Result<String, Failure> {
        toml::to_string(self).map_err(|e| Failure::usage(e.to_string()))
    }
}

impl DataConfig {
    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.train.iter_mut().chain(self.val.iter_mut()).for_each(join);
        if let Some(p) = self.out_dir.as_mut() {
            join(p);
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets a dotted key such as `train.pfn.epochs=20`. The value is read as a
/// TOML value, falling back to a bare string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), Failure> {
    let (key, raw) =
        spec.split_once('=').ok_or_else(|| Failure::usage(format!("override '{spec}' is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Failure::usage(format!("bad override key '{key}'")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Failure::usage(format!("override key '{key}': '{part}' is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let text = RunConfig::default().to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, RunConfig::default());
    }

    #[test]
    fn overrides_apply_and_parse_types() {
        let run = RunConfig::load(
            None,
            &["train.lr=0.005".into(), "model.view=sagittal".into(), "train.pfn.epochs=7".into()],
        )
        .unwrap();
        assert_eq!(run.train.lr, 0.005);
        assert_eq!(run.model.view, ggpfn::volume::ViewPlane::Sagittal);
        assert_eq!(run.train.pfn.epochs, 7);
    }

    #[test]
    fn partial_stage_tables_keep_stage_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[train.pfn]\nepochs = 3\n[train.global]\nalpha = 0.25\n").unwrap();
        let run = RunConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(run.train.pfn.epochs, 3);
        assert_eq!(run.train.pfn.batch_size, TrainConfig::default().pfn.batch_size);
        assert_eq!(run.train.global.alpha, Some(0.25));
        assert_eq!(run.train.global.batch_size, 32);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::load(None, &["train.learning_rate=0.1".into()]).unwrap_err();
        assert_eq!(err.code, 1);
        assert!(err.message.contains("learning_rate"), "{}", err.message);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let err = RunConfig::load(None, &["model.group_convs=[1,1,1,1]".into()]).unwrap_err();
        assert_eq!(err.code, 1);
        assert!(RunConfig::load(None, &["nokey".into()]).is_err());
    }

    #[test]
    fn relative_data_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[data]\ntrain = [\"a.vol\"]\nval = [\"/abs/b.vol\"]\nout_dir = \"out\"\n").unwrap();
        let run = RunConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(run.data.train, vec![dir.path().join("a.vol")]);
        assert_eq!(run.data.val, vec![PathBuf::from("/abs/b.vol")]);
        assert_eq!(run.data.out_dir, Some(dir.path().join("out")));
    }
}
