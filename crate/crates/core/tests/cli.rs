//! End-to-end runs of the `facemotion` binary on the smoke configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use facemotion::app::RunConfig;
use facemotion::eval_suite::EvalReport;
use serde_json::Value;

fn facemotion(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facemotion"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(config: &Path, args: &[&str]) -> Value {
    let out = facemotion(config, args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn summary(root: &Path, command: &str) -> Value {
    let text = fs::read_to_string(root.join("out").join(command).join("summary.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn config_errors_are_listed_together() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::smoke(dir.path());
    cfg.vqvae.model.kernel_width = 4;
    cfg.l2m.transformer.heads = 3;
    cfg.eval.temperature = -1.0;
    let path = dir.path().join("bad.json");
    cfg.save(&path).unwrap();
    let out = facemotion(&path, &["corpus-gen"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("kernel_width") && err.contains("heads") && err.contains("temperature"), "{err}");
}

#[test]
fn missing_stage_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    RunConfig::smoke(dir.path()).save(&path).unwrap();
    let out = facemotion(&path, &["train-vqvae"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("corpus-gen"));

    ok(&path, &["corpus-gen"]);
    let out = facemotion(&path, &["train-m2l"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("vqvae") && err.contains("train-vqvae"), "{err}");
}

#[test]
fn full_pipeline_on_smoke_config() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg_path = root.join("config.json");
    let cfg = RunConfig::smoke(root);
    cfg.save(&cfg_path).unwrap();

    let corpus = ok(&cfg_path, &["corpus-gen"]);
    assert_eq!(corpus["clips"], 96);
    let vq = ok(&cfg_path, &["train-vqvae"]);
    assert!(vq["quality"]["ratio"].as_f64().unwrap().is_finite());
    ok(&cfg_path, &["train-m2l"]);
    ok(&cfg_path, &["train-l2m", "--epochs", "0"]);

    let s = summary(root, "train-l2m");
    assert_eq!(s["config"]["l2m"]["training"]["epochs"], 0);
    assert_eq!(s["seeds"]["l2m"], cfg.l2m.training.seed);

    let eval = ok(&cfg_path, &["eval"]);
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(root.join("out/eval/report.json")).unwrap()).unwrap();
    let chance = 1.0 / (cfg.vqvae.model.codebook_size + 1) as f64;
    assert!(report.tok_teacher_forced <= 3.0 * chance, "untrained accuracy {}", report.tok_teacher_forced);
    assert_eq!(report.counts.retrieval_pairs, cfg.eval.retrieval_pairs);
    assert!(eval["controls"]["fd_shuffled"].as_f64().unwrap() >= 0.0);

    let prompt = "a young woman grinning intensely while nodding";
    let args = ["generate", "--prompt", prompt, "--seed", "3", "--temperature", "0"];
    let first = ok(&cfg_path, &args);
    let frames_a = fs::read(root.join("out/generate/frames.bin")).unwrap();
    ok(&cfg_path, &args);
    let frames_b = fs::read(root.join("out/generate/frames.bin")).unwrap();
    assert_eq!(frames_a, frames_b);

    // Replaying from the summary's embedded config reproduces the output.
    let s = summary(root, "generate");
    let replay = root.join("replay.json");
    fs::write(&replay, serde_json::to_string(&s["config"]).unwrap()).unwrap();
    let again = ok(&replay, &args);
    assert_eq!(first["tokens"], again["tokens"]);

    let tokens: Vec<String> = first["tokens"].as_array().unwrap().iter().map(|t| t.to_string()).collect();
    let described = ok(&cfg_path, &["describe", "--tokens", &tokens.join(",")]);
    assert!(described["text"].is_string());
    let described = ok(&cfg_path, &["describe", "--frames", root.join("out/generate/frames.bin").to_str().unwrap()]);
    assert!(described["text"].is_string());

    let tok = ok(&cfg_path, &["tokenize", "--input", root.join("out/generate/frames.bin").to_str().unwrap()]);
    assert_eq!(tok["tokens"].as_array().unwrap().len(), first["frames"].as_u64().unwrap() as usize);

    ok(&cfg_path, &["sweep"]);
    let csv = fs::read_to_string(root.join("out/sweep/sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("model_dim,step,accuracy"));
    let dims: std::collections::BTreeSet<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(dims.into_iter().collect::<Vec<_>>(), ["16", "32"]);

    ok(&cfg_path, &["export-embeddings", "--split", "test"]);
    let csv = fs::read_to_string(root.join("out/export-embeddings/embeddings.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("clip_id,label,e1,"));
    assert!(header.ends_with(&format!(",e{}", cfg.retrieval.embed_dim)));

    let bad = facemotion(&cfg_path, &["export-embeddings", "--split", "nope"]);
    assert!(!bad.status.success());
}

#[test]
fn shipped_configs_match_code_defaults() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    assert_eq!(RunConfig::load(&dir.join("desk.json")).unwrap(), RunConfig::default());
    assert_eq!(RunConfig::load(&dir.join("smoke.json")).unwrap(), RunConfig::smoke(Path::new("work/smoke")));
}
