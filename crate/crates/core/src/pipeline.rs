//! Stage orchestration over a run directory.
//!
//! Every stage reads the artifacts of earlier stages from the run directory,
//! writes its own, and records a `manifest.<stage>.json` listing the config
//! hash, tool version, parameters and sha256 of every input and output.
//! Manifests carry no timestamps, so rerunning a stage on unchanged inputs
//! with deterministic backends reproduces every file byte for byte.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::answers::{self, AnswerContext, ChunkStore, DatasetMetrics};
use crate::bench::{self, BenchError, EvalMode, RagContext, RunRecord, ScoreTable};
use crate::config::{ConfigError, PipelineConfig};
use crate::corpus::{
    corpus_stats, ingest_corpus, recursive_split, whole_file_chunk, Chunk, ChunkKind, ChunkRecord, CorpusError,
    CorpusStats, Document, FileError, RegexTokenCounter, SourceKind,
};
use crate::energy::{EnergyError, EnergyReport, HostSampler, Phase, PhaseTracker, PowerSample};
use crate::exec::{self, Exec};
use crate::index::{build_index, load_index, save_index, IndexError, IndexStats, VectorIndex};
use crate::llm::{BackendConfig, LlmClient, LlmError};
use crate::prompts::PromptTemplates;
use crate::qlora::{self, DenseMatrix, LoraAdapter, QloraError, ScaleMode};
use crate::questions::{deduplicate, filter_valid, generate_all, QuestionRecord};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// File names inside the run directory.
pub mod artifacts {
    pub const DOCUMENTS: &str = "documents.jsonl";
    pub const INGEST_ERRORS: &str = "ingest_errors.jsonl";
    pub const CORPUS_STATS: &str = "corpus_stats.json";
    pub const RAG_CHUNKS: &str = "chunks.rag.jsonl";
    pub const LTG_CHUNKS: &str = "chunks.ltg.jsonl";
    pub const INDEX: &str = "index.bin";
    pub const QUESTIONS_VALID: &str = "questions.valid.jsonl";
    pub const QUESTIONS_REJECTED: &str = "questions.rejected.jsonl";
    pub const GENQ_SKIPPED: &str = "genq_skipped.jsonl";
    pub const DATASET: &str = "dataset.jsonl";
    pub const FAILED_PAIRS: &str = "failed_pairs.jsonl";
    pub const DATASET_METRICS: &str = "dataset_metrics.json";
    pub const BENCH_SCORES: &str = "bench_scores.json";
    pub const QLORA_DEMO: &str = "qlora_demo.json";
    pub const QLORA_WEIGHTS: &str = "qlora_weights.nf4";

    pub fn bench_run(mode: super::EvalMode) -> String {
        format!("bench_run.{}.json", if mode == super::EvalMode::Rag { "rag" } else { "plain" })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing artifact {path}; run `{stage}` first")]
    MissingArtifact { path: String, stage: &'static str },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Qlora(#[from] QloraError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
}

impl PipelineError {
    /// True for problems with the user's inputs (exit code 1) as opposed
    /// to failures while doing the work (exit code 2).
    pub fn is_validation(&self) -> bool {
        match self {
            PipelineError::Config(_)
            | PipelineError::MissingArtifact { .. }
            | PipelineError::Invalid(_)
            | PipelineError::Corpus(_) => true,
            PipelineError::Llm(e) => matches!(e, LlmError::InvalidConfig(_)),
            PipelineError::Bench(e) => !matches!(e, BenchError::Io { .. }),
            PipelineError::Index(e) => matches!(e, IndexError::Integrity { .. } | IndexError::DimensionHeader { .. }),
            PipelineError::Io { .. } | PipelineError::Qlora(_) | PipelineError::Energy(_) => false,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub params: Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

pub fn manifest_path(run_dir: &Path, stage: &str) -> PathBuf {
    run_dir.join(format!("manifest.{}.json", stage.replace(' ', "_")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Invalid(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Serialize)]
pub struct IngestSummary {
    pub per_kind: Vec<(SourceKind, CorpusStats)>,
    pub total: CorpusStats,
    pub errors: Vec<FileError>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitSummary {
    pub rag_chunks: usize,
    pub ltg_chunks: usize,
    pub hard_cut: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenqSummary {
    pub chunks: usize,
    pub skipped_chunks: usize,
    pub parsed: usize,
    pub duplicates: usize,
    pub filtered_out: usize,
    pub valid: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenaSummary {
    pub questions: usize,
    pub failed: usize,
    pub metrics: DatasetMetrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineSummary {
    pub ingest: IngestSummary,
    pub split: SplitSummary,
    pub index: IndexStats,
    pub genq: GenqSummary,
    pub gena: GenaSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRunOutput {
    pub run: RunRecord,
    pub accuracy: f64,
    pub unparsed: usize,
    pub errored: usize,
    pub scores: Option<ScoreTable>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QloraDemoReport {
    pub shape: (usize, usize),
    pub rank: usize,
    pub scaling: f64,
    pub block_size: usize,
    pub scale_group_size: usize,
    pub max_roundtrip_error: f64,
    pub mean_roundtrip_error: f64,
    /// Largest ratio of observed error to its per-block analytic bound.
    pub worst_bound_ratio: f64,
    pub forward_max_rel_diff: f64,
    pub container_bytes: usize,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    exec: Exec,
    run_dir: PathBuf,
    templates: PromptTemplates,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, exec: Exec) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let templates = match &cfg.generation.templates_dir {
            Some(d) => {
                let d = cfg.resolve(d);
                PromptTemplates::load_dir(&d).map_err(io_err(&d))?
            }
            None => PromptTemplates::default(),
        };
        let run_dir = cfg.run_dir();
        Ok(Pipeline { cfg, exec, run_dir, templates })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }

    fn ensure_run_dir(&self) -> Result<(), PipelineError> {
        fs::create_dir_all(&self.run_dir).map_err(io_err(&self.run_dir))
    }

    fn upstream(&self, name: &str, stage: &'static str) -> Result<PathBuf, PipelineError> {
        let p = self.artifact(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(PipelineError::MissingArtifact { path: p.display().to_string(), stage })
        }
    }

    fn digest(&self, path: &Path) -> Result<FileDigest, PipelineError> {
        let shown = path.strip_prefix(&self.run_dir).unwrap_or(path);
        let shown = shown.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        Ok(FileDigest { path: shown, sha256: sha256_file(path).map_err(io_err(path))? })
    }

    fn write_manifest(
        &self,
        stage: &str,
        params: Value,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> Result<(), PipelineError> {
        let m = Manifest {
            stage: stage.to_string(),
            tool: "ranstruct".into(),
            version: VERSION.into(),
            config_hash: self.cfg.hash(),
            params,
            inputs: inputs.iter().map(|p| self.digest(p)).collect::<Result<_, _>>()?,
            outputs: outputs.iter().map(|p| self.digest(p)).collect::<Result<_, _>>()?,
        };
        write_json(&manifest_path(&self.run_dir, stage), &m)
    }

    fn client(&self, b: &BackendConfig) -> Result<LlmClient, PipelineError> {
        let mut b = b.clone();
        b.resolve_secrets();
        Ok(LlmClient::from_config(b)?)
    }

    pub fn ingest(&self) -> Result<IngestSummary, PipelineError> {
        if self.cfg.corpus.is_empty() {
            return Err(PipelineError::Invalid("config lists no corpus sources".into()));
        }
        self.ensure_run_dir()?;
        let mut docs = Vec::new();
        let mut errors = Vec::new();
        let mut per_kind: Vec<(SourceKind, CorpusStats)> = Vec::new();
        for src in &self.cfg.corpus {
            let got = ingest_corpus(&self.cfg.resolve(&src.root), src.kind, &src.include)?;
            for e in &got.errors {
                log::warn!("skipping {}: {}", e.path, e.message);
            }
            per_kind.push((src.kind, corpus_stats(&got.documents)));
            docs.extend(got.documents);
            errors.extend(got.errors);
        }
        let mut seen = HashMap::new();
        for d in &docs {
            if let Some(prev) = seen.insert(d.id.clone(), &d.path) {
                return Err(PipelineError::Invalid(format!(
                    "two {} documents share the relative path {} ({prev})",
                    d.source_kind.as_str(),
                    d.path
                )));
            }
        }
        let summary = IngestSummary { per_kind, total: corpus_stats(&docs), errors };
        let (docs_path, err_path, stats_path) = (
            self.artifact(artifacts::DOCUMENTS),
            self.artifact(artifacts::INGEST_ERRORS),
            self.artifact(artifacts::CORPUS_STATS),
        );
        answers::write_jsonl(&docs_path, &docs).map_err(io_err(&docs_path))?;
        answers::write_jsonl(&err_path, &summary.errors).map_err(io_err(&err_path))?;
        write_json(&stats_path, &summary)?;
        let params = json!({ "corpus": self.cfg.corpus });
        self.write_manifest("ingest", params, &[], &[docs_path, err_path, stats_path])?;
        log::info!("ingest: {} documents, {} unreadable", summary.total.doc_count, summary.errors.len());
        Ok(summary)
    }

    pub fn load_documents(&self) -> Result<Vec<Document>, PipelineError> {
        let p = self.upstream(artifacts::DOCUMENTS, "ingest")?;
        answers::read_jsonl(&p).map_err(io_err(&p))
    }

    pub fn split(&self) -> Result<SplitSummary, PipelineError> {
        let docs = self.load_documents()?;
        let seps: Vec<&str> = self.cfg.chunking.separators.iter().map(String::as_str).collect();
        let (rag_budget, ltg_budget) = (self.cfg.chunking.rag_tokens, self.cfg.chunking.ltg_tokens);
        let per_doc = exec::map(self.exec, &docs, |d| match d.source_kind {
            SourceKind::Code => {
                let c = whole_file_chunk(d, &RegexTokenCounter);
                (vec![c.clone()], vec![c])
            }
            SourceKind::Spec => (
                recursive_split(d, ChunkKind::Rag, rag_budget, &seps, &RegexTokenCounter),
                recursive_split(d, ChunkKind::Ltg, ltg_budget, &seps, &RegexTokenCounter),
            ),
        });
        let (mut rag, mut ltg) = (Vec::new(), Vec::new());
        for (r, l) in per_doc {
            rag.extend(r.iter().map(Chunk::manifest_record));
            ltg.extend(l.iter().map(Chunk::manifest_record));
        }
        let hard_cut = rag.iter().chain(&ltg).filter(|c| c.hard_cut).count();
        if hard_cut > 0 {
            log::warn!("{hard_cut} chunks were hard-cut at token boundaries");
        }
        let (rag_path, ltg_path) = (self.artifact(artifacts::RAG_CHUNKS), self.artifact(artifacts::LTG_CHUNKS));
        answers::write_jsonl(&rag_path, &rag).map_err(io_err(&rag_path))?;
        answers::write_jsonl(&ltg_path, &ltg).map_err(io_err(&ltg_path))?;
        let params =
            json!({ "rag_tokens": rag_budget, "ltg_tokens": ltg_budget, "separators": seps, "token_counter": "regex" });
        self.write_manifest("split", params, &[self.artifact(artifacts::DOCUMENTS)], &[rag_path, ltg_path])?;
        log::info!("split: {} rag / {} ltg chunks", rag.len(), ltg.len());
        Ok(SplitSummary { rag_chunks: rag.len(), ltg_chunks: ltg.len(), hard_cut })
    }

    /// Documents plus the chunks listed in `file`, rebuilt from their byte ranges.
    pub fn load_chunks(&self, file: &str) -> Result<(Vec<Document>, Vec<Chunk>), PipelineError> {
        let docs = self.load_documents()?;
        let p = self.upstream(file, "split")?;
        let records: Vec<ChunkRecord> = answers::read_jsonl(&p).map_err(io_err(&p))?;
        let by_id: HashMap<&str, &Document> = docs.iter().map(|d| (d.id.as_str(), d)).collect();
        let chunks = records
            .iter()
            .map(|r| {
                by_id.get(r.doc_id.as_str()).and_then(|d| r.resolve(d)).ok_or_else(|| {
                    PipelineError::Invalid(format!(
                        "{}: chunk {}:{} does not match the ingested documents; rerun `split`",
                        p.display(),
                        r.doc_id,
                        r.seq
                    ))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok((docs, chunks))
    }

    pub fn index_build(&self) -> Result<IndexStats, PipelineError> {
        let (_, chunks) = self.load_chunks(artifacts::RAG_CHUNKS)?;
        let embedder = self.client(&self.cfg.agents.embedder)?;
        let index = build_index(&chunks, &embedder, self.exec)?;
        let path = self.artifact(artifacts::INDEX);
        save_index(&index, &path)?;
        let params =
            json!({ "embedder": self.cfg.agents.embedder.endpoint_url, "model": self.cfg.agents.embedder.model_name });
        self.write_manifest(
            "index",
            params,
            &[self.artifact(artifacts::DOCUMENTS), self.artifact(artifacts::RAG_CHUNKS)],
            &[path],
        )?;
        log::info!("index: {} vectors of dim {}", index.len(), index.dim());
        Ok(index.stats())
    }

    pub fn load_index(&self) -> Result<VectorIndex, PipelineError> {
        let p = self.upstream(artifacts::INDEX, "index build")?;
        Ok(load_index(&p)?)
    }

    pub fn index_stats(&self) -> Result<IndexStats, PipelineError> {
        Ok(self.load_index()?.stats())
    }

    pub fn genq(&self) -> Result<GenqSummary, PipelineError> {
        let (_, chunks) = self.load_chunks(artifacts::LTG_CHUNKS)?;
        let client = self.client(&self.cfg.agents.question)?;
        let generated = generate_all(&chunks, &client, self.cfg.generation.n_per_chunk, &self.templates, self.exec);
        let parsed = generated.records.len();
        let deduped = deduplicate(generated.records);
        let filtered = filter_valid(deduped.kept, &self.cfg.generation.filter);
        let rejected: Vec<&QuestionRecord> = deduped.removed.iter().chain(&filtered.removed).collect();
        let skipped: Vec<Value> = generated.skipped.iter().map(|(r, e)| json!({ "chunk": r, "error": e })).collect();

        let (valid_path, rej_path, skip_path) = (
            self.artifact(artifacts::QUESTIONS_VALID),
            self.artifact(artifacts::QUESTIONS_REJECTED),
            self.artifact(artifacts::GENQ_SKIPPED),
        );
        answers::write_jsonl(&valid_path, &filtered.kept).map_err(io_err(&valid_path))?;
        answers::write_jsonl(&rej_path, &rejected).map_err(io_err(&rej_path))?;
        answers::write_jsonl(&skip_path, &skipped).map_err(io_err(&skip_path))?;
        let params = json!({
            "agent": self.cfg.agents.question.endpoint_url,
            "model": self.cfg.agents.question.model_name,
            "n_per_chunk": self.cfg.generation.n_per_chunk,
            "filter": self.cfg.generation.filter,
            "templates_sha256": templates_hash(&self.templates),
        });
        self.write_manifest(
            "genq",
            params,
            &[self.artifact(artifacts::DOCUMENTS), self.artifact(artifacts::LTG_CHUNKS)],
            &[valid_path, rej_path, skip_path],
        )?;
        log::info!("genq: {} valid of {parsed} parsed questions", filtered.kept.len());
        Ok(GenqSummary {
            chunks: chunks.len(),
            skipped_chunks: generated.skipped.len(),
            parsed,
            duplicates: deduped.removed.len(),
            filtered_out: filtered.removed.len(),
            valid: filtered.kept.len(),
        })
    }

    pub fn load_valid_questions(&self) -> Result<Vec<QuestionRecord>, PipelineError> {
        let p = self.upstream(artifacts::QUESTIONS_VALID, "genq")?;
        answers::read_jsonl(&p).map_err(io_err(&p))
    }

    fn chunk_store(&self) -> Result<ChunkStore, PipelineError> {
        let (docs, chunks) = self.load_chunks(artifacts::RAG_CHUNKS)?;
        Ok(ChunkStore::new(&docs, &chunks))
    }

    pub fn gena(&self) -> Result<GenaSummary, PipelineError> {
        let questions = self.load_valid_questions()?;
        let index = self.load_index()?;
        let store = self.chunk_store()?;
        let embedder = self.client(&self.cfg.agents.embedder)?;
        check_embedder_dim(&index, &embedder)?;
        let chat = self.client(&self.cfg.agents.answer)?;
        let ctx = AnswerContext {
            index: &index,
            store: &store,
            embedder: &embedder,
            chat: &chat,
            templates: &self.templates,
            k: self.cfg.generation.k,
        };
        let answered = answers::answer_all(&questions, &ctx, self.exec);
        let (ds_path, failed_path, metrics_path) = (
            self.artifact(artifacts::DATASET),
            self.artifact(artifacts::FAILED_PAIRS),
            self.artifact(artifacts::DATASET_METRICS),
        );
        let metrics = answers::build_dataset(&answered.pairs, &ds_path).map_err(io_err(&ds_path))?;
        answers::write_failed(&failed_path, &answered.failed).map_err(io_err(&failed_path))?;
        write_json(&metrics_path, &metrics)?;
        let params = json!({
            "agent": self.cfg.agents.answer.endpoint_url,
            "model": self.cfg.agents.answer.model_name,
            "k": self.cfg.generation.k,
            "templates_sha256": templates_hash(&self.templates),
        });
        self.write_manifest(
            "gena",
            params,
            &[
                self.artifact(artifacts::QUESTIONS_VALID),
                self.artifact(artifacts::INDEX),
                self.artifact(artifacts::DOCUMENTS),
                self.artifact(artifacts::RAG_CHUNKS),
            ],
            &[ds_path, failed_path, metrics_path],
        )?;
        log::info!("gena: {} pairs, {} failed", metrics.total_pairs, answered.failed.len());
        Ok(GenaSummary { questions: questions.len(), failed: answered.failed.len(), metrics })
    }

    /// Metrics recomputed from a dataset file (the run's own by default).
    pub fn dataset_stats(&self, path: Option<&Path>) -> Result<DatasetMetrics, PipelineError> {
        let p = match path {
            Some(p) => p.to_path_buf(),
            None => self.upstream(artifacts::DATASET, "gena")?,
        };
        answers::metrics_from_file(&p).map_err(io_err(&p))
    }

    pub fn all(&self) -> Result<PipelineSummary, PipelineError> {
        let ingest = self.ingest()?;
        let split = self.split()?;
        let index = self.index_build()?;
        let genq = self.genq()?;
        let gena = self.gena()?;
        Ok(PipelineSummary { ingest, split, index, genq, gena })
    }

    pub fn bench_run(&self) -> Result<BenchRunOutput, PipelineError> {
        let b = &self.cfg.bench;
        let file = b.file.as_ref().ok_or_else(|| PipelineError::Invalid("bench.file is not set".into()))?;
        let file = self.cfg.resolve(file);
        let loaded = bench::load_bench(&file)?;
        let items = bench::sample_subset(&loaded.items, b.per_category, b.seed);
        let chat = self.client(&self.cfg.agents.eval)?;
        let mut inputs = vec![file];
        let run = match b.mode {
            EvalMode::Plain => bench::evaluate(&items, &chat, EvalMode::Plain, None, self.exec)?,
            EvalMode::Rag => {
                let index = self.load_index()?;
                let store = self.chunk_store()?;
                let embedder = self.client(&self.cfg.agents.embedder)?;
                check_embedder_dim(&index, &embedder)?;
                let rag = RagContext { index: &index, store: &store, embedder: &embedder, k: b.k };
                inputs.push(self.artifact(artifacts::INDEX));
                bench::evaluate(&items, &chat, EvalMode::Rag, Some(&rag), self.exec)?
            }
        };
        let scores = bench::score(std::slice::from_ref(&run)).ok();
        let out = BenchRunOutput {
            accuracy: run.accuracy(),
            unparsed: run.unparsed_count(),
            errored: run.errored_count(),
            scores,
            run,
        };
        self.ensure_run_dir()?;
        let path = self.artifact(&artifacts::bench_run(b.mode));
        write_json(&path, &out)?;
        let params = json!({
            "target": self.cfg.agents.eval.endpoint_url,
            "model": self.cfg.agents.eval.model_name,
            "mode": b.mode,
            "k": b.k,
            "per_category": b.per_category,
            "seed": b.seed,
            "rejected_lines": loaded.errors.len(),
        });
        self.write_manifest(
            &format!("bench_{}", if b.mode == EvalMode::Rag { "rag" } else { "plain" }),
            params,
            &inputs,
            &[path],
        )?;
        Ok(out)
    }

    pub fn qlora_demo(&self) -> Result<QloraDemoReport, PipelineError> {
        let q = &self.cfg.qlora;
        let mut rng = ChaCha8Rng::seed_from_u64(q.seed);
        let w = DenseMatrix::random(q.rows, q.cols, &mut rng);
        let x = DenseMatrix::random(q.batch, q.rows, &mut rng);
        let a = DenseMatrix::random(q.rows, q.rank, &mut rng);
        let bm = DenseMatrix::random(q.rank, q.cols, &mut rng);
        let adapter = LoraAdapter::with_alpha(a, bm, q.alpha)?;
        let mode = ScaleMode::Double { group_size: q.scale_group_size };
        let quant = qlora::nf4_quantize(&w, q.block_size, mode, self.exec)?;
        let deq = qlora::nf4_dequantize(&quant, self.exec);

        let half_gap = qlora::nf4::max_level_gap() / 2.0;
        let dq_err = quant.scales().scale_error_bound();
        let (mut max_err, mut sum_err, mut worst_ratio) = (0.0f64, 0.0f64, 0.0f64);
        for (orig, back) in w.data().chunks(q.block_size).zip(deq.data().chunks(q.block_size)) {
            let absmax = orig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let bound = half_gap * absmax + dq_err + 1e-12;
            for (o, r) in orig.iter().zip(back) {
                let e = (o - r).abs();
                max_err = max_err.max(e);
                sum_err += e;
                worst_ratio = worst_ratio.max(e / bound);
            }
        }
        let y_q = qlora::qlora_forward(&x, &quant, &adapter, self.exec)?;
        let y_d = qlora::dense_forward(&x, &deq, Some(&adapter), self.exec)?;
        let rel = y_q.max_abs_diff(&y_d) / y_d.max_abs().max(f64::MIN_POSITIVE);

        self.ensure_run_dir()?;
        let bytes = quant.encode();
        let wpath = self.artifact(artifacts::QLORA_WEIGHTS);
        fs::write(&wpath, &bytes).map_err(io_err(&wpath))?;
        let report = QloraDemoReport {
            shape: (q.rows, q.cols),
            rank: q.rank,
            scaling: adapter.scaling(),
            block_size: q.block_size,
            scale_group_size: q.scale_group_size,
            max_roundtrip_error: max_err,
            mean_roundtrip_error: sum_err / w.data().len() as f64,
            worst_bound_ratio: worst_ratio,
            forward_max_rel_diff: rel,
            container_bytes: bytes.len(),
        };
        let rpath = self.artifact(artifacts::QLORA_DEMO);
        write_json(&rpath, &report)?;
        self.write_manifest("qlora_demo", json!(q), &[], &[wpath, rpath])?;
        Ok(report)
    }

    /// Runs `work` under a host power tracker when energy tracking is on,
    /// writing `energy.<stage>.json` and its sample trace.
    pub fn with_energy<R>(
        &self,
        stage: &str,
        force: bool,
        work: impl FnOnce() -> Result<R, PipelineError>,
    ) -> Result<R, PipelineError> {
        if !(force || self.cfg.energy.track) {
            return work();
        }
        let sampler = HostSampler::probe();
        let caps = sampler.capabilities();
        if !caps.any() {
            log::warn!("no power counters available; energy report will list every device as unavailable");
        }
        let tracker = PhaseTracker::start(
            Phase::Custom(stage.replace(' ', "_")),
            Box::new(sampler),
            Duration::from_millis(self.cfg.energy.interval_ms),
        )?;
        let out = work();
        match tracker.stop() {
            Ok((report, samples)) => {
                self.ensure_run_dir()?;
                let name = stage.replace(' ', "_");
                write_json(&self.artifact(&format!("energy.{name}.json")), &report)?;
                let tpath = self.artifact(&format!("energy.{name}.trace.jsonl"));
                answers::write_jsonl(&tpath, &samples).map_err(io_err(&tpath))?;
            }
            Err(e) => log::warn!("energy tracking for {stage} produced no report: {e}"),
        }
        out
    }
}

/// Fails fast when the configured embedder no longer matches the index on
/// disk, instead of failing every query.
fn check_embedder_dim(index: &VectorIndex, embedder: &LlmClient) -> Result<(), PipelineError> {
    let probe = embedder.embed_one("dimension probe")?;
    index.expect_dim(probe.len()).map_err(|_| {
        PipelineError::Invalid(format!(
            "index has dimension {} but the embedder produces {}; rerun `index build`",
            index.dim(),
            probe.len()
        ))
    })
}

fn templates_hash(t: &PromptTemplates) -> String {
    let mut h = Sha256::new();
    for part in [&t.question_system, &t.question_user, &t.answer_system, &t.answer_user] {
        h.update(part.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// Reads a line-delimited power trace.
pub fn read_trace(path: &Path) -> Result<Vec<PowerSample>, PipelineError> {
    answers::read_jsonl(path).map_err(io_err(path))
}

pub fn energy_report_from_trace(phase: Phase, path: &Path) -> Result<EnergyReport, PipelineError> {
    Ok(EnergyReport::from_trace(phase, &read_trace(path)?)?)
}

/// Scores run records stored as `bench run` outputs or bare run records.
pub fn score_run_files(paths: &[PathBuf]) -> Result<ScoreTable, PipelineError> {
    let mut runs = Vec::new();
    for p in paths {
        let v: Value = read_json(p)?;
        let run = if v.get("run").is_some() { v["run"].clone() } else { v };
        let run: RunRecord =
            serde_json::from_value(run).map_err(|e| PipelineError::Invalid(format!("{}: {e}", p.display())))?;
        runs.push(run);
    }
    Ok(bench::score(&runs)?)
}
