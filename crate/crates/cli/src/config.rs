//! Pipeline configuration: TOML or JSON, with dotted-key overrides.
//!
//! Precedence, lowest first: built-in defaults, the config file, `--set`
//! overrides, the `SURGPHASE_OUTPUT_ROOT` environment variable (output root
//! only), then dedicated flags such as `--out` and `--seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use surgphase_core::data::{AnnotationFormat, DatasetSplit, SplitOrdering, SyntheticSpec};
use surgphase_core::encoder::{BackboneSpec, LogitHead, ToyConfig};
use surgphase_core::features::FeatureDtype;
use surgphase_core::params::digest_bytes;
use surgphase_core::prompt::{default_reference_indices, PromptBankConfig, PromptVariant};
use surgphase_core::stage1::Stage1Config;
use surgphase_core::tcn::TcnConfig;
use surgphase_core::{Error, Result};

pub const OUTPUT_ROOT_ENV: &str = "SURGPHASE_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Canonical dataset root. Defaults to `<out>/data` when a synthetic
    /// spec is given.
    pub root: Option<PathBuf>,
    pub format: AnnotationFormat,
    /// Train, validation and test video counts.
    pub split: [usize; 3],
    pub ordering: SplitOrdering,
    /// Generate this synthetic dataset into `root` before running.
    pub synthetic: Option<SyntheticSpec>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            root: None,
            format: AnnotationFormat::CanonicalTsv,
            split: [32, 8, 40],
            ordering: SplitOrdering::NaturalId,
            synthetic: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Section {
    pub backbone: String,
    pub weights: Option<PathBuf>,
    pub toy: ToyConfig,
    pub variant: PromptVariant,
    /// Context tokens after the first token.
    pub context_tokens: usize,
    /// Reference count for the ordinal variant.
    pub references: usize,
    /// Explicit 1-based reference ids; derived from `references` when absent.
    pub reference_indices: Option<Vec<usize>>,
    pub shared_context: bool,
    pub head: LogitHead,
    /// Pick the learning rate from `lr_grid` on the validation split.
    pub lr_search: bool,
    pub feature_dtype: FeatureDtype,
    #[serde(flatten)]
    pub train: Stage1Config,
}

impl Default for Stage1Section {
    fn default() -> Self {
        Self {
            backbone: "clip-resnet50".into(),
            weights: None,
            toy: ToyConfig::default(),
            variant: PromptVariant::Ordinal,
            context_tokens: 6,
            references: 3,
            reference_indices: None,
            shared_context: true,
            head: LogitHead::default(),
            lr_search: true,
            feature_dtype: FeatureDtype::F64,
            train: Stage1Config::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Section {
    pub lr_search: bool,
    #[serde(flatten)]
    pub tcn: TcnConfig,
}

impl Default for Stage2Section {
    fn default() -> Self {
        Self {
            lr_search: true,
            tcn: TcnConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Output root for every stage.
    pub out: PathBuf,
    pub ribbons: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/default"),
            ribbons: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub stage1: Stage1Section,
    pub stage2: Stage2Section,
    pub eval: EvalSection,
}

/// Keys that are set from the top-level `seed`.
const DERIVED_KEYS: [&str; 3] = ["stage1.seed", "stage1.toy.seed", "stage2.seed"];

fn parse_text(text: &str, path: &Path) -> Result<toml::Table> {
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        let v: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::Table::try_from(v).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    } else {
        text.parse::<toml::Table>()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Parses a `--set` value the way TOML would, falling back to a string.
fn parse_scalar(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_scalar(raw.trim()));
    Ok(())
}

fn collect_keys(prefix: &str, table: &toml::Table, out: &mut Vec<String>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => collect_keys(&key, t, out),
            _ => out.push(key),
        }
    }
}

fn has_key(table: &toml::Table, key: &str) -> bool {
    let mut cur = table;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        match cur.get(*part) {
            Some(toml::Value::Table(t)) if i + 1 < parts.len() => cur = t,
            Some(_) if i + 1 == parts.len() => return true,
            Some(toml::Value::Table(_)) => return true,
            _ => return false,
        }
    }
    false
}

impl PipelineConfig {
    /// Builds a config from an optional file plus overrides. Relative paths
    /// in a file are resolved against the file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                parse_text(&text, p)?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut keys = Vec::new();
        collect_keys("", &table, &mut keys);
        if let Some(k) = keys.iter().find(|k| DERIVED_KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("`{k}` is derived from the top-level `seed`; set that instead")));
        }
        let mut cfg: PipelineConfig = toml::Value::Table(table.clone())
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let roundtrip = toml::Table::try_from(&cfg).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(k) = keys.iter().find(|k| !has_key(&roundtrip, k)) {
            return Err(Error::Config(format!("unknown configuration key `{k}`")));
        }
        if let Some(dir) = path.and_then(Path::parent) {
            cfg.resolve_relative(dir);
        }
        cfg.propagate_seed();
        Ok(cfg)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(r) = self.dataset.root.as_mut() {
            fix(r);
        }
        if let Some(w) = self.stage1.weights.as_mut() {
            fix(w);
        }
        fix(&mut self.eval.out);
    }

    pub fn propagate_seed(&mut self) {
        self.stage1.train.seed = self.seed;
        self.stage1.toy.seed = self.seed;
        self.stage2.tcn.seed = self.seed;
    }

    /// Applies the environment override of the output root.
    pub fn apply_env(&mut self) {
        if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV).filter(|v| !v.is_empty()) {
            self.eval.out = PathBuf::from(root);
        }
    }

    pub fn out(&self) -> &Path {
        &self.eval.out
    }

    pub fn dataset_root(&self) -> Result<PathBuf> {
        match (&self.dataset.root, &self.dataset.synthetic) {
            (Some(r), _) => Ok(r.clone()),
            (None, Some(_)) => Ok(self.eval.out.join("data")),
            (None, None) => Err(Error::Config("dataset.root is required".into())),
        }
    }

    pub fn backbone(&self) -> BackboneSpec {
        BackboneSpec {
            name: self.stage1.backbone.clone(),
            weights: self.stage1.weights.clone(),
            toy: self.stage1.toy.clone(),
        }
    }

    pub fn reference_indices(&self, phases: usize) -> Result<Vec<usize>> {
        match (&self.stage1.variant, &self.stage1.reference_indices) {
            (PromptVariant::Independent, _) => Ok(Vec::new()),
            (PromptVariant::Ordinal, Some(r)) => Ok(r.clone()),
            (PromptVariant::Ordinal, None) => default_reference_indices(phases, self.stage1.references),
        }
    }

    pub fn prompt_config(&self, phases: usize, token_dim: usize) -> Result<PromptBankConfig> {
        let cfg = PromptBankConfig {
            phases,
            context_tokens: self.stage1.context_tokens,
            token_dim,
            variant: self.stage1.variant,
            reference_indices: self.reference_indices(phases)?,
            shared_context: self.stage1.shared_context,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything that does not need the dataset on disk.
    pub fn validate(&self) -> Result<()> {
        self.stage1.train.validate()?;
        self.stage2.tcn.validate()?;
        if let Some(s) = &self.dataset.synthetic {
            s.validate()?;
        }
        if self.stage1.backbone == "toy" {
            self.stage1.toy.validate()?;
        }
        if let Some(w) = &self.stage1.weights {
            if !w.is_file() {
                return Err(Error::Config(format!("backbone weights {} do not exist", w.display())));
            }
        }
        if let Some(r) = &self.dataset.root {
            if self.dataset.synthetic.is_none() && !r.is_dir() {
                return Err(Error::Config(format!("dataset root {} does not exist", r.display())));
            }
        }
        Ok(())
    }

    pub fn split_counts(&self) -> (usize, usize, usize) {
        let [a, b, c] = self.dataset.split;
        (a, b, c)
    }

    /// Canonical JSON of the configuration, minus the output root.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(eval) = v.get_mut("eval").and_then(|e| e.as_object_mut()) {
            eval.remove("out");
        }
        v.to_string()
    }

    pub fn digest(&self) -> String {
        digest_bytes(self.canonical_json().as_bytes())
    }
}

/// Convenience for harnesses: the split implied by `cfg` over `videos`.
pub fn split_for(cfg: &PipelineConfig, videos: &[surgphase_core::data::VideoAnnotation]) -> Result<DatasetSplit> {
    surgphase_core::data::make_split(videos, cfg.split_counts(), cfg.dataset.ordering)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_protocol() {
        let c = PipelineConfig::default();
        assert_eq!(c.stage1.train.epochs, 50);
        assert_eq!(c.stage2.tcn.epochs, 25);
        assert_eq!((c.stage2.tcn.stages, c.stage2.tcn.layers, c.stage2.tcn.hidden_dim), (1, 8, 256));
        assert_eq!(c.stage1.references, 3);
        assert_eq!(c.dataset.split, [32, 8, 40]);
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 3\n[stage1]\nepochs = 4\nvariant = \"independent\"\n").unwrap();
        let c = PipelineConfig::load(Some(&path), &["stage2.hidden_dim=16".into(), "stage1.head.normalize=false".into()])
            .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.stage1.train.seed, 3);
        assert_eq!(c.stage1.train.epochs, 4);
        assert_eq!(c.stage2.tcn.hidden_dim, 16);
        assert!(!c.stage1.head.normalize);
        assert_eq!(c.eval.out, dir.path().join("runs/default"));
        let err = PipelineConfig::load(Some(&path), &["stage1.epoch=4".into()]).unwrap_err();
        assert!(err.to_string().contains("stage1.epoch"), "{err}");
        assert!(PipelineConfig::load(None, &["stage1.seed=2".into()]).is_err());
        assert!(PipelineConfig::load(None, &["stage1.variant=\"sideways\"".into()]).is_err());
    }

    #[test]
    fn json_matches_toml() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        let j = dir.path().join("c.json");
        std::fs::write(&t, "[stage2]\nlayers = 5\n").unwrap();
        std::fs::write(&j, r#"{"stage2": {"layers": 5}}"#).unwrap();
        assert_eq!(PipelineConfig::load(Some(&t), &[]).unwrap(), PipelineConfig::load(Some(&j), &[]).unwrap());
    }

    #[test]
    fn ordinal_reference_ids() {
        let c = PipelineConfig::default();
        assert_eq!(c.reference_indices(7).unwrap(), vec![1, 4, 7]);
    }
}
