//! Declarative pipeline configuration (TOML).
//!
//! Relative paths are resolved against the directory holding the config
//! file. Secrets are never read from the file: backends name an environment
//! variable via `auth_token_env`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::answers::DEFAULT_TOP_K;
use crate::bench::EvalMode;
use crate::corpus::{SourceKind, DEFAULT_LTG_TOKENS, DEFAULT_RAG_TOKENS};
use crate::llm::BackendConfig;
use crate::qlora::nf4::{DEFAULT_BLOCK_SIZE, DEFAULT_SCALE_GROUP};
use crate::questions::{FilterRules, DEFAULT_QUESTIONS_PER_CHUNK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSource {
    pub root: PathBuf,
    pub kind: SourceKind,
    /// Defaults to the kind's standard globs when empty.
    #[serde(default)]
    pub include: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChunkingConfig {
    pub rag_tokens: usize,
    pub ltg_tokens: usize,
    pub separators: Vec<String>,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        ChunkingConfig {
            rag_tokens: DEFAULT_RAG_TOKENS,
            ltg_tokens: DEFAULT_LTG_TOKENS,
            separators: crate::corpus::DEFAULT_SEPARATORS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentsConfig {
    pub question: BackendConfig,
    pub answer: BackendConfig,
    pub embedder: BackendConfig,
    pub eval: BackendConfig,
}

impl Default for AgentsConfig {
    fn default() -> Self {
        let named = |model: &str, endpoint: &str| BackendConfig {
            model_name: model.to_string(),
            endpoint_url: endpoint.to_string(),
            ..BackendConfig::default()
        };
        AgentsConfig {
            question: named("mistral", "mock:agent?seed=1"),
            answer: named("qwen2.5", "mock:agent?seed=2"),
            embedder: named("bge-small-en-v1.5", "mock:hash?seed=3&dim=64"),
            eval: named("eval-target", "mock:random?seed=4"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub n_per_chunk: usize,
    pub k: usize,
    pub filter: FilterRules,
    /// Directory overriding the bundled prompt templates.
    pub templates_dir: Option<PathBuf>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            n_per_chunk: DEFAULT_QUESTIONS_PER_CHUNK,
            k: DEFAULT_TOP_K,
            filter: FilterRules::default(),
            templates_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub file: Option<PathBuf>,
    pub per_category: usize,
    pub seed: u64,
    pub mode: EvalMode,
    pub k: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { file: None, per_category: 500, seed: 0, mode: EvalMode::Plain, k: DEFAULT_TOP_K }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    pub track: bool,
    pub interval_ms: u64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig { track: false, interval_ms: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QloraConfig {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub alpha: f64,
    pub batch: usize,
    pub block_size: usize,
    pub scale_group_size: usize,
    pub seed: u64,
}

impl Default for QloraConfig {
    fn default() -> Self {
        QloraConfig {
            rows: 256,
            cols: 128,
            rank: 16,
            alpha: 32.0,
            batch: 8,
            block_size: DEFAULT_BLOCK_SIZE,
            scale_group_size: DEFAULT_SCALE_GROUP,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub run_dir: PathBuf,
    pub corpus: Vec<CorpusSource>,
    pub chunking: ChunkingConfig,
    pub agents: AgentsConfig,
    pub generation: GenerationConfig,
    pub bench: BenchConfig,
    pub energy: EnergyConfig,
    pub qlora: QloraConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            run_dir: PathBuf::from("run"),
            corpus: Vec::new(),
            chunking: ChunkingConfig::default(),
            agents: AgentsConfig::default(),
            generation: GenerationConfig::default(),
            bench: BenchConfig::default(),
            energy: EnergyConfig::default(),
            qlora: QloraConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("cannot parse config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        let mut cfg: PipelineConfig = toml::from_str(&text)
            .map_err(|e| ConfigError::Parse { path: path.display().to_string(), message: e.to_string() })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolve(&self.run_dir)
    }

    /// Collects every problem instead of stopping at the first.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        for (i, c) in self.corpus.iter().enumerate() {
            if !self.resolve(&c.root).is_dir() {
                problems.push(format!("corpus[{i}].root {} is not a directory", c.root.display()));
            }
        }
        if self.chunking.rag_tokens == 0 || self.chunking.ltg_tokens == 0 {
            problems.push("chunk budgets must be positive".into());
        }
        if self.chunking.separators.iter().any(String::is_empty) {
            problems.push("chunking.separators must not contain empty strings".into());
        }
        if self.generation.k == 0 || self.bench.k == 0 {
            problems.push("k must be at least 1".into());
        }
        if self.generation.n_per_chunk == 0 {
            problems.push("generation.n_per_chunk must be positive".into());
        }
        if self.generation.filter.min_tokens > self.generation.filter.max_tokens {
            problems.push("generation.filter.min_tokens exceeds max_tokens".into());
        }
        if let Some(d) = &self.generation.templates_dir {
            if !self.resolve(d).is_dir() {
                problems.push(format!("generation.templates_dir {} is not a directory", d.display()));
            }
        }
        if let Some(f) = &self.bench.file {
            if !self.resolve(f).is_file() {
                problems.push(format!("bench.file {} does not exist", f.display()));
            }
        }
        if self.bench.per_category == 0 {
            problems.push("bench.per_category must be positive".into());
        }
        if self.energy.interval_ms == 0 {
            problems.push("energy.interval_ms must be positive".into());
        }
        let q = &self.qlora;
        if q.rows == 0 || q.cols == 0 || q.batch == 0 || q.rank == 0 || q.rank > q.rows.min(q.cols) {
            problems.push("qlora shape must be positive with 1 <= rank <= min(rows, cols)".into());
        }
        if q.block_size < 2 || q.scale_group_size == 0 {
            problems.push("qlora.block_size must be >= 2 and scale_group_size positive".into());
        }
        for (name, b) in [
            ("question", &self.agents.question),
            ("answer", &self.agents.answer),
            ("embedder", &self.agents.embedder),
            ("eval", &self.agents.eval),
        ] {
            if let Err(e) = b.validate() {
                problems.push(format!("agents.{name}: {e}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    /// Hex sha256 of the canonical JSON form (paths as written).
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_takes_defaults() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("spec")).unwrap();
        let path = dir.path().join("p.toml");
        fs::write(&path, "[[corpus]]\nroot = \"spec\"\nkind = \"oran\"\n").unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.chunking.rag_tokens, 1024);
        assert_eq!(cfg.chunking.ltg_tokens, 4096);
        assert_eq!(cfg.generation.k, 3);
        assert_eq!(cfg.corpus[0].kind, SourceKind::Spec);
        assert_eq!(cfg.run_dir(), dir.path().join("run"));
    }

    #[test]
    fn validation_lists_every_problem() {
        let mut cfg = PipelineConfig::default();
        cfg.corpus.push(CorpusSource { root: "/definitely/missing".into(), kind: SourceKind::Code, include: vec![] });
        cfg.generation.k = 0;
        cfg.chunking.rag_tokens = 0;
        match cfg.validate() {
            Err(ConfigError::Invalid(p)) => assert_eq!(p.len(), 3, "{p:?}"),
            other => panic!("expected invalid, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.toml");
        fs::write(&path, "[chunking]\nrag_tokenz = 5\n").unwrap();
        assert!(matches!(PipelineConfig::load(&path), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn hash_ignores_base_dir() {
        let mut a = PipelineConfig::default();
        let b = a.clone();
        a.base_dir = "/elsewhere".into();
        assert_eq!(a.hash(), b.hash());
    }
}
