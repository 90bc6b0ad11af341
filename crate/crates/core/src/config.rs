//! Run configuration: a TOML file, overridden by `CDST_*` environment
//! variables, overridden by command-line values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{BackendKind, ChatMode, HttpConfig, DEFAULT_PARAMS};
use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::prompt::{ParseMode, PromptFamily, PromptStyle};

pub const ENV_PREFIX: &str = "CDST_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub split: u64,
    pub demos: u64,
    pub noise: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LmKind {
    Http,
    OracleNoise,
    Echo,
    Replay,
}

/// One language-model backend as written in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmSpec {
    pub kind: LmKind,
    /// Corruption rate for `oracle-noise`.
    #[serde(default)]
    pub p: Option<f64>,
    /// Defaults to `seeds.noise`.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Model parameter count for FLOP estimates.
    #[serde(default = "default_params")]
    pub params: u64,
    #[serde(default)]
    pub url: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub mode: Option<ChatMode>,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub timeout_secs: Option<u64>,
    #[serde(default)]
    pub max_attempts: Option<u32>,
    #[serde(default)]
    pub backoff_ms: Option<u64>,
    /// Recording file for `replay`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Record every response of this backend into the given file.
    #[serde(default)]
    pub record: Option<PathBuf>,
    /// Serve this backend from a recording instead.
    #[serde(default)]
    pub replay: Option<PathBuf>,
}

fn default_params() -> u64 {
    DEFAULT_PARAMS
}

impl LmSpec {
    pub fn oracle(p: f64) -> Self {
        Self {
            kind: LmKind::OracleNoise,
            p: Some(p),
            seed: None,
            params: DEFAULT_PARAMS,
            url: None,
            model: None,
            mode: None,
            api_key_env: None,
            timeout_secs: None,
            max_attempts: None,
            backoff_ms: None,
            path: None,
            record: None,
            replay: None,
        }
    }

    pub fn echo() -> Self {
        Self {
            kind: LmKind::Echo,
            p: None,
            ..Self::oracle(0.0)
        }
    }

    fn base_kind(&self, key: &str, default_seed: u64, max_concurrency: usize) -> Result<BackendKind> {
        let need = |v: &Option<String>, field: &str| {
            v.clone()
                .ok_or_else(|| Error::Config(format!("backends.{key}.{field} is required for kind {:?}", self.kind)))
        };
        Ok(match self.kind {
            LmKind::Http => {
                let mut cfg = HttpConfig::new(&need(&self.url, "url")?, &need(&self.model, "model")?);
                cfg.mode = self.mode.unwrap_or_default();
                cfg.api_key_env = self.api_key_env.clone();
                cfg.max_concurrency = max_concurrency;
                if let Some(t) = self.timeout_secs {
                    cfg.timeout_secs = t;
                }
                if let Some(a) = self.max_attempts {
                    cfg.max_attempts = a;
                }
                if let Some(b) = self.backoff_ms {
                    cfg.backoff_ms = b;
                }
                BackendKind::Http(cfg)
            }
            LmKind::OracleNoise => {
                let p = self.p.unwrap_or(0.0);
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config(format!("backends.{key}.p must be in [0, 1], got {p}")));
                }
                BackendKind::OracleNoise {
                    p,
                    seed: self.seed.unwrap_or(default_seed),
                }
            }
            LmKind::Echo => BackendKind::Echo,
            LmKind::Replay => BackendKind::Replay(
                self.path
                    .clone()
                    .ok_or_else(|| Error::Config(format!("backends.{key}.path is required for kind replay")))?,
            ),
        })
    }

    /// Resolve into a backend kind, applying `replay` / `record` wrapping.
    pub fn to_kind(&self, key: &str, default_seed: u64, max_concurrency: usize) -> Result<BackendKind> {
        if let Some(path) = &self.replay {
            return Ok(BackendKind::Replay(path.clone()));
        }
        let base = self.base_kind(key, default_seed, max_concurrency)?;
        Ok(match &self.record {
            Some(path) => BackendKind::Record(Box::new(base), path.clone()),
            None => base,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    Hash,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSpec {
    pub kind: EmbeddingKind,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub url: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub api_key_env: Option<String>,
}

fn default_dim() -> usize {
    256
}

impl Default for EmbeddingSpec {
    fn default() -> Self {
        Self {
            kind: EmbeddingKind::Hash,
            dim: default_dim(),
            seed: 0,
            url: None,
            model: None,
            api_key_env: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    pub inference: LmSpec,
    pub correction: LmSpec,
    #[serde(default)]
    pub embedding: EmbeddingSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: PathBuf,
    pub eval: PathBuf,
    pub schema: PathBuf,
    #[serde(default)]
    pub synonyms: Option<PathBuf>,
    /// Prompt family; inference and correction styles follow from it.
    pub style: PromptFamily,
    /// Exemplars per prompt; defaults by style (10 / 3).
    #[serde(default)]
    pub k: Option<usize>,
    /// Context width in exchanges; defaults by style (1 / 3).
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    pub seeds: Seeds,
    pub backends: BackendsConfig,
    #[serde(default)]
    pub parse_mode: ParseMode,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    pub output_dir: PathBuf,
    /// Optional instruction preamble for correction prompts.
    #[serde(default)]
    pub instruction: Option<String>,
    /// Collect demonstrations and export correction-tuning sequences during `run`.
    #[serde(default = "default_true")]
    pub export_training: bool,
    /// Treat gold state / belief mismatches in the data as errors.
    #[serde(default)]
    pub strict_consistency: bool,
    #[serde(default = "default_pairs")]
    pub retriever_pairs_per_anchor: usize,
}

fn default_fraction() -> f64 {
    0.05
}

fn default_concurrency() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn default_pairs() -> usize {
    4
}

impl RunConfig {
    pub fn k(&self) -> usize {
        self.k.unwrap_or_else(|| self.style.default_k())
    }

    pub fn width(&self) -> usize {
        self.width.unwrap_or_else(|| self.style.default_width())
    }

    pub fn inference_style(&self) -> PromptStyle {
        self.style.inference()
    }

    pub fn correction_style(&self) -> PromptStyle {
        self.style.correction()
    }

    pub fn inference_kind(&self) -> Result<BackendKind> {
        self.backends
            .inference
            .to_kind("inference", self.seeds.noise, self.max_concurrency)
    }

    pub fn correction_kind(&self) -> Result<BackendKind> {
        self.backends
            .correction
            .to_kind("correction", self.seeds.noise, self.max_concurrency)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("fraction must be in (0, 1], got {}", self.fraction)));
        }
        if self.k() == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.width() == 0 {
            return Err(Error::Config("width must be >= 1".into()));
        }
        if self.max_concurrency == 0 {
            return Err(Error::Config("max_concurrency must be >= 1".into()));
        }
        if self.retriever_pairs_per_anchor == 0 {
            return Err(Error::Config("retriever_pairs_per_anchor must be >= 1".into()));
        }
        if self.backends.embedding.dim == 0 {
            return Err(Error::Config("backends.embedding.dim must be >= 1".into()));
        }
        if self.backends.embedding.kind == EmbeddingKind::Http && self.backends.embedding.url.is_none() {
            return Err(Error::Config("backends.embedding.url is required for kind http".into()));
        }
        self.inference_kind()?;
        self.correction_kind()?;
        Ok(())
    }

    /// Make every path absolute, relative ones taken against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let abs = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        abs(&mut self.train);
        abs(&mut self.eval);
        abs(&mut self.schema);
        abs(&mut self.output_dir);
        if let Some(p) = self.synonyms.as_mut() {
            abs(p);
        }
        for spec in [&mut self.backends.inference, &mut self.backends.correction] {
            for p in [&mut spec.path, &mut spec.record, &mut spec.replay].into_iter().flatten() {
                abs(p);
            }
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).unwrap_or_default().as_bytes())
    }
}

/// Parse a scalar override: anything TOML accepts as a value, else a bare string.
pub fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Set `a.b.c = value`, creating intermediate tables.
pub fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("invalid override key {key:?}")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// `CDST_SEEDS__SPLIT=3` becomes `seeds.split = 3`.
pub fn env_overrides<I>(vars: I) -> Vec<(String, toml::Value)>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut out: Vec<(String, toml::Value)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            let key = rest.to_lowercase().replace("__", ".");
            Some((key, parse_override_value(&v)))
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Merge file < env < flags and deserialize, naming the offending key on error.
/// Relative paths are resolved against the config file's directory (or `cwd`
/// without a file).
pub fn load_config(
    file: Option<&Path>,
    env: &[(String, toml::Value)],
    flags: &[(String, toml::Value)],
    cwd: &Path,
) -> Result<RunConfig> {
    let (mut table, base) = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let table: toml::Table = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let dir = if dir.is_relative() { cwd.join(dir) } else { dir.to_path_buf() };
            (table, dir)
        }
        None => (toml::Table::new(), cwd.to_path_buf()),
    };
    for (key, value) in env.iter().chain(flags) {
        set_dotted(&mut table, key, value.clone())?;
    }
    let mut cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("{path}: {}", e.into_inner()))
    })?;
    cfg.resolve_paths(&base);
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
train = "train.jsonl"
eval = "test.jsonl"
schema = "schema.json"
style = "mwoz"
k = 10
output_dir = "out"

[seeds]
split = 1
demos = 2
noise = 3

[backends.inference]
kind = "oracle-noise"
p = 0.2

[backends.correction]
kind = "echo"
"#;

    fn write(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, text).unwrap();
        (dir, path)
    }

    #[test]
    fn precedence_file_env_flags() {
        let (dir, path) = write(BASE);
        let cfg = load_config(Some(&path), &[], &[], Path::new("/")).unwrap();
        assert_eq!(cfg.k(), 10);
        assert_eq!(cfg.width(), 1);
        assert_eq!(cfg.fraction, 0.05);
        assert_eq!(cfg.train, dir.path().join("train.jsonl"));
        let env = env_overrides([("CDST_K".to_string(), "5".to_string()), ("HOME".into(), "x".into())]);
        assert_eq!(load_config(Some(&path), &env, &[], Path::new("/")).unwrap().k(), 5);
        let flags = vec![("k".to_string(), toml::Value::Integer(3))];
        let cfg = load_config(Some(&path), &env, &flags, Path::new("/")).unwrap();
        assert_eq!(cfg.k(), 3);
        let env = env_overrides([("CDST_SEEDS__NOISE".to_string(), "11".to_string())]);
        let cfg = load_config(Some(&path), &env, &[], Path::new("/")).unwrap();
        assert_eq!(cfg.seeds.noise, 11);
        assert_eq!(
            cfg.inference_kind().unwrap(),
            BackendKind::OracleNoise { p: 0.2, seed: 11 }
        );
    }

    #[test]
    fn unknown_key_is_named() {
        let (_d, path) = write(&format!("kk = 1\n{BASE}"));
        let err = load_config(Some(&path), &[], &[], Path::new("/")).unwrap_err();
        assert!(err.to_string().contains("kk"), "{err}");
        let (_d, path) = write(&BASE.replace("p = 0.2", "p = 0.2\npp = 1"));
        let err = load_config(Some(&path), &[], &[], Path::new("/")).unwrap_err();
        assert!(err.to_string().contains("pp"), "{err}");
    }

    #[test]
    fn missing_required_key_is_named() {
        let (_d, path) = write(&BASE.replace("train = \"train.jsonl\"\n", ""));
        let err = load_config(Some(&path), &[], &[], Path::new("/")).unwrap_err();
        assert!(err.to_string().contains("train"), "{err}");
        let (_d, path) = write(&BASE.replace("demos = 2\n", ""));
        let err = load_config(Some(&path), &[], &[], Path::new("/")).unwrap_err();
        assert!(err.to_string().contains("demos"), "{err}");
    }

    #[test]
    fn type_mismatch_and_range() {
        let flags = vec![("k".to_string(), parse_override_value("many"))];
        let (_d, path) = write(BASE);
        let err = load_config(Some(&path), &[], &flags, Path::new("/")).unwrap_err();
        assert!(err.to_string().starts_with("config: k"), "{err}");
        let flags = vec![("fraction".to_string(), toml::Value::Float(0.0))];
        assert!(load_config(Some(&path), &[], &flags, Path::new("/")).is_err());
        let flags = vec![("backends.inference.p".to_string(), toml::Value::Float(1.5))];
        assert!(load_config(Some(&path), &[], &flags, Path::new("/")).is_err());
    }

    #[test]
    fn replay_and_record_wrap() {
        let (_d, path) = write(BASE);
        let flags = vec![(
            "backends.correction.record".to_string(),
            toml::Value::String("/tmp/r.jsonl".into()),
        )];
        let cfg = load_config(Some(&path), &[], &flags, Path::new("/")).unwrap();
        assert_eq!(
            cfg.correction_kind().unwrap(),
            BackendKind::Record(Box::new(BackendKind::Echo), PathBuf::from("/tmp/r.jsonl"))
        );
        let flags = vec![("backends.inference.replay".to_string(), toml::Value::String("rec.jsonl".into()))];
        let cfg = load_config(Some(&path), &[], &flags, Path::new("/")).unwrap();
        assert!(matches!(cfg.inference_kind().unwrap(), BackendKind::Replay(p) if p.is_absolute()));
    }

    #[test]
    fn hash_is_stable() {
        let (_d, path) = write(BASE);
        let a = load_config(Some(&path), &[], &[], Path::new("/")).unwrap();
        let b = load_config(Some(&path), &[], &[], Path::new("/")).unwrap();
        assert_eq!(a.hash(), b.hash());
        let flags = vec![("k".to_string(), toml::Value::Integer(4))];
        assert_ne!(a.hash(), load_config(Some(&path), &[], &flags, Path::new("/")).unwrap().hash());
    }
}
