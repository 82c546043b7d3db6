use std::fs;
use std::path::{Path, PathBuf};

use ranstruct_core::bench::EvalMode;
use ranstruct_core::config::PipelineConfig;
use ranstruct_core::exec::Exec;
use ranstruct_core::pipeline::{
    artifacts, manifest_path, score_run_files, sha256_file, Manifest, Pipeline, PipelineError,
};

fn sample_config(run_dir: &Path) -> PipelineConfig {
    let mut cfg =
        PipelineConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../sample/pipeline.toml")).unwrap();
    cfg.run_dir = run_dir.to_path_buf();
    cfg
}

fn read_manifest(run_dir: &Path, stage: &str) -> Manifest {
    serde_json::from_str(&fs::read_to_string(manifest_path(run_dir, stage)).unwrap()).unwrap()
}

#[test]
fn stages_refuse_to_run_without_upstream_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let p = Pipeline::new(sample_config(tmp.path()), Exec::Sequential).unwrap();
    for (result, stage) in [
        (p.split().map(|_| ()), "ingest"),
        (p.index_build().map(|_| ()), "ingest"),
        (p.genq().map(|_| ()), "ingest"),
        (p.gena().map(|_| ()), "genq"),
    ] {
        match result {
            Err(e @ PipelineError::MissingArtifact { stage: s, .. }) => {
                assert_eq!(s, stage);
                assert!(e.is_validation());
            }
            other => panic!("expected missing artifact, got {other:?}"),
        }
    }
}

#[test]
fn manifests_hash_what_is_on_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let p = Pipeline::new(sample_config(tmp.path()), Exec::Parallel).unwrap();
    p.all().unwrap();
    for stage in ["ingest", "split", "index", "genq", "gena"] {
        let m = read_manifest(tmp.path(), stage);
        assert_eq!(m.stage, stage);
        assert_eq!(m.config_hash, p.config().hash());
        assert!(!m.outputs.is_empty(), "{stage} lists no outputs");
        for f in m.inputs.iter().chain(&m.outputs) {
            let path = if Path::new(&f.path).is_absolute() { PathBuf::from(&f.path) } else { tmp.path().join(&f.path) };
            assert_eq!(sha256_file(&path).unwrap(), f.sha256, "{stage}: {}", f.path);
        }
    }
    let gena = read_manifest(tmp.path(), "gena");
    assert!(gena.outputs.iter().any(|f| f.path == artifacts::DATASET));
    assert!(gena.inputs.iter().any(|f| f.path == artifacts::QUESTIONS_VALID));
}

#[test]
fn stale_index_dimension_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = sample_config(tmp.path());
    let p = Pipeline::new(cfg.clone(), Exec::Parallel).unwrap();
    p.ingest().unwrap();
    p.split().unwrap();
    p.index_build().unwrap();
    cfg.agents.embedder.endpoint_url = "mock:hash?seed=3&dim=32".into();
    let p = Pipeline::new(cfg, Exec::Parallel).unwrap();
    p.genq().unwrap();
    let err = p.gena().unwrap_err();
    assert!(err.is_validation(), "{err}");
    assert!(err.to_string().contains("index build"), "{err}");
}

#[test]
fn rag_and_plain_bench_runs_score_together() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = sample_config(tmp.path());
    let p = Pipeline::new(cfg.clone(), Exec::Parallel).unwrap();
    let plain = p.bench_run().unwrap();
    assert_eq!(plain.run.items.len(), 12);
    assert!(plain.scores.is_some());

    cfg.bench.mode = EvalMode::Rag;
    let rag_pipeline = Pipeline::new(cfg, Exec::Parallel).unwrap();
    assert!(matches!(rag_pipeline.bench_run(), Err(PipelineError::MissingArtifact { .. })));
    rag_pipeline.ingest().unwrap();
    rag_pipeline.split().unwrap();
    rag_pipeline.index_build().unwrap();
    let rag = rag_pipeline.bench_run().unwrap();
    assert_eq!(rag.run.mode, EvalMode::Rag);
    assert_eq!(rag.run.k, 3);

    let table = score_run_files(&[tmp.path().join(artifacts::bench_run(EvalMode::Rag))]).unwrap();
    assert_eq!(Some(table), rag.scores);
}

#[test]
fn invalid_config_is_rejected_up_front() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = sample_config(tmp.path());
    cfg.generation.k = 0;
    cfg.bench.per_category = 0;
    match Pipeline::new(cfg, Exec::Sequential) {
        Err(e) => assert!(e.is_validation()),
        Ok(_) => panic!("config should not validate"),
    }
}
