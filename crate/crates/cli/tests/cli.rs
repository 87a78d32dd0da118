use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use peerkt::config::RunConfig;
use serde_json::Value;

const ENV_VARS: [&str; 6] = [
    "PEERKT_API_BASE",
    "PEERKT_API_KEY",
    "PEERKT_MODEL",
    "PEERKT_TOP_K",
    "PEERKT_SEEDS",
    "PEERKT_THRESHOLD",
];

fn peerkt(args: &[&str]) -> Output {
    peerkt_env(args, &[])
}

fn peerkt_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_peerkt"));
    for v in ENV_VARS {
        cmd.env_remove(v);
    }
    cmd.args(args).envs(env.iter().copied());
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(o: &Output) -> Value {
    assert!(o.status.success(), "failed: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn error_line(o: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&o.stderr);
    let line = stderr.lines().last().expect("error line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {line}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    bundle: PathBuf,
    root: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    let sim_cfg = root.join("sim.toml");
    fs::write(
        &sim_cfg,
        "seed = 9\nn_students = 30\nn_questions = 20\nn_concepts = 4\nresponses_per_student = 30\n",
    )
    .unwrap();
    json(&peerkt(&["simulate", "--config", s(&sim_cfg), "--out", s(&data)]));
    let bundle = root.join("bundle");
    json(&peerkt(&[
        "build",
        s(&data.join("src0.toml")),
        s(&data.join("src1.toml")),
        "--out",
        s(&bundle),
    ]));
    Fixture {
        _dir: dir,
        data,
        bundle,
        root,
    }
}

#[test]
fn help_lists_defaults_that_match_the_configuration() {
    let d = RunConfig::default();
    let expect = |cmd: &str, needles: &[String]| {
        let out = peerkt(&[cmd, "--help"]);
        assert!(out.status.success());
        let text = stdout(&out);
        for n in needles {
            assert!(text.contains(n.as_str()), "{cmd} --help lacks {n:?}:\n{text}");
        }
    };
    let retrieval = vec![
        format!("[default: {}]", d.retrieval.top_k),
        format!("[default: {}]", d.retrieval.hops),
        format!("[default: {}]", d.retrieval.alpha),
        "[default: 4:3:3]".to_string(),
        "[default: similarity]".to_string(),
    ];
    expect("retrieve", &retrieval);
    let mut predict = retrieval.clone();
    predict.extend([format!("[default: {}]", d.threshold), "[default: heuristic]".to_string()]);
    expect("predict", &predict);
    let seeds: Vec<String> = d.seeds.iter().map(u64::to_string).collect();
    let mut evaluate = predict.clone();
    evaluate.extend([
        format!("[default: {}]", seeds.join(",")),
        format!("[default: {}]", d.n_test),
        format!("[default: {}]", d.seq_len),
    ]);
    expect("evaluate", &evaluate);
    expect("build", &[format!("[default: {}]", d.build.seed)]);
    expect("simulate", &["--config".to_string(), "--seed".to_string()]);
    let w = d.retrieval.weights;
    assert_eq!((w.behavior, w.structure, w.ability), (0.4, 0.3, 0.3));
}

#[test]
fn build_is_reproducible_and_reports_counts() {
    let f = fixture();
    let again = f.root.join("bundle2");
    let out = json(&peerkt(&[
        "build",
        s(&f.data.join("src0.toml")),
        s(&f.data.join("src1.toml")),
        "--out",
        s(&again),
    ]));
    assert!(out["nodes"].as_u64().unwrap() > 0);
    assert!(out["question_groups"].as_u64().unwrap() > 0);
    assert_eq!(out["students"].as_u64(), Some(60));
    let sums = |d: &Path| fs::read(d.join("checksums.sha256")).unwrap();
    assert_eq!(sums(&f.bundle), sums(&again));
}

#[test]
fn missing_input_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.toml");
    fs::write(
        &manifest,
        "source_id = \"A\"\ninteractions_path = \"absent.csv\"\n[column_map]\nstudent = \"s\"\nquestion = \"q\"\nconcept = \"k\"\ncorrect = \"c\"\n",
    )
    .unwrap();
    let out = peerkt(&["build", s(&manifest), "--out", s(&dir.path().join("b"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_line(&out);
    assert_eq!(err["error"], "UnreadableFile");
    assert_eq!(err["class"], "data");
}

#[test]
fn retrieve_honors_top_k_and_names_unresolved_concepts() {
    let f = fixture();
    let base = ["retrieve", "--bundle", s(&f.bundle), "--student", "src0-u0001"];
    let two = json(&peerkt(&[&base[..], &["--question", "src0-q0003"]].concat()));
    assert_eq!(two["similarities"].as_array().unwrap().len(), 2);
    assert_eq!(two["context"]["peers"].as_array().unwrap().len(), 2);
    let one = json(&peerkt(&[&base[..], &["--question", "src0-q0003", "-k", "1"]].concat()));
    assert_eq!(one["similarities"].as_array().unwrap().len(), 1);

    let out = peerkt(&[&base[..], &["--concept", "volcano studies", "--no-matcher"]].concat());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "ConceptUnresolved");
}

#[test]
fn configuration_precedence_is_defaults_file_flags_env() {
    let f = fixture();
    let cfg = f.root.join("run.toml");
    fs::write(&cfg, "threshold = 0.6\n[retrieval]\ntop_k = 4\nhops = 3\n").unwrap();
    let base = [
        "retrieve",
        "--bundle",
        s(&f.bundle),
        "--student",
        "src0-u0001",
        "--question",
        "src0-q0003",
        "--config",
        s(&cfg),
    ];
    let file_only = json(&peerkt(&base));
    assert_eq!(file_only["config"]["retrieval"]["top_k"], 4);
    assert_eq!(file_only["config"]["retrieval"]["hops"], 3);
    assert_eq!(file_only["config"]["retrieval"]["cap"], 10);
    let flag = json(&peerkt(&[&base[..], &["-k", "1"]].concat()));
    assert_eq!(flag["config"]["retrieval"]["top_k"], 1);
    let env = json(&peerkt_env(&[&base[..], &["-k", "1"]].concat(), &[("PEERKT_TOP_K", "3")]));
    assert_eq!(env["config"]["retrieval"]["top_k"], 3);
    assert_eq!(env["config"]["threshold"].as_f64(), Some(0.6));
}

#[test]
fn predict_offline_and_prompt_dump() {
    let f = fixture();
    let base = [
        "predict",
        "--bundle",
        s(&f.bundle),
        "--student",
        "src1-u0002",
        "--question",
        "src1-q0005",
    ];
    let out = json(&peerkt(&base));
    let p = out["result"]["probability"].as_f64().unwrap();
    assert!((0.01..=0.99).contains(&p));
    assert_eq!(out["backend"], "heuristic");

    let dump = peerkt(&[&base[..], &["--dump-prompt", "--backend", "remote"]].concat());
    assert!(dump.status.success(), "{}", String::from_utf8_lossy(&dump.stderr));
    let text = stdout(&dump);
    assert!(text.contains("src1-q0005") || text.contains("concept-"), "{text}");
    assert!(!text.contains("{{"), "unfilled slot in:\n{text}");
}

#[test]
fn remote_backend_without_credentials_is_a_config_error() {
    let f = fixture();
    let out = peerkt(&[
        "predict",
        "--bundle",
        s(&f.bundle),
        "--student",
        "src1-u0002",
        "--question",
        "src1-q0005",
        "--backend",
        "remote",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_line(&out);
    assert_eq!(err["error"], "ConfigError");
    assert_eq!(err["class"], "config");
    assert!(err["message"].as_str().unwrap().contains("PEERKT_API_BASE"));
}

#[test]
fn five_seed_protocol_reports_each_seed_and_the_mean() {
    let f = fixture();
    let out_dir = f.root.join("eval");
    let run = || {
        peerkt(&[
            "evaluate",
            "--manifest",
            s(&f.data.join("src0.toml")),
            s(&f.data.join("src1.toml")),
            "--n-test",
            "20",
            "--out",
            s(&out_dir),
        ])
    };
    let first = run();
    let doc = json(&first);
    let runs = doc["protocol"]["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 5);
    let seeds: Vec<u64> = runs.iter().map(|r| r["seed"].as_u64().unwrap()).collect();
    assert_eq!(seeds, vec![0, 1, 2, 3, 4]);
    assert!(doc["protocol"]["mean"]["acc"].as_f64().is_some());
    assert_eq!(doc["protocol"]["mean"]["seeds"], 5);
    for seed in 0..5 {
        let tsv = fs::read_to_string(out_dir.join(format!("records_seed{seed}.tsv"))).unwrap();
        assert!(tsv.starts_with("sequence_id\t"));
    }
    assert_eq!(fs::read(out_dir.join("report.json")).unwrap(), first.stdout);
    assert_eq!(run().stdout, first.stdout);
}

#[test]
fn cold_start_against_an_overlapping_source_fails() {
    let f = fixture();
    let out = peerkt(&[
        "evaluate",
        "--bundle",
        s(&f.bundle),
        "--test",
        s(&f.data.join("src1.toml")),
        "--cold-start",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "SourceOverlap");
}

#[test]
fn simulate_build_evaluate_cold_start_end_to_end() {
    let f = fixture();
    let bundle_a = f.root.join("bundle_a");
    json(&peerkt(&["build", s(&f.data.join("src0.toml")), "--out", s(&bundle_a)]));
    let doc = json(&peerkt(&[
        "evaluate",
        "--bundle",
        s(&bundle_a),
        "--test",
        s(&f.data.join("src1.toml")),
        "--cold-start",
    ]));
    let report = &doc["report"];
    assert_eq!(report["n_failed"], 0);
    assert!(report["n_sequences"].as_u64().unwrap() > 0);
    assert!(report["metrics"]["auc"].as_f64().is_some());
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(peerkt(&["build"]).status.code(), Some(1));
    assert_eq!(peerkt(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(peerkt(&["--help"]).status.code(), Some(0));
}

#[test]
fn shipped_samples_load() {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let cfg = RunConfig::load(Some(&data.join("run.toml"))).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.retrieval, RunConfig::default().retrieval);
    let kc = peerkt::graph::load_kc_graph(&data.join("kc_graph.csv")).unwrap();
    assert_eq!(kc.prereq.len(), 10);
    assert_eq!(kc.assoc.len(), 4);
}
