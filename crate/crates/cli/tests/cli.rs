use std::path::{Path, PathBuf};
use std::process::Command;

use atgen_cli::{cmd_bon, cmd_code_reward, cmd_eval, cmd_tier, cmd_train_rollouts, RunConfig, SuiteSource};
use atgen_core::gateway::{BackendKind, GeneratorSpec};
use atgen_core::protocol::canonical_code_completion;
use atgen_core::testkit::{self, B3, P2_GOLD};
use atgen_core::{Corpus, Tier};
use serde_json::json;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(corpus: &Corpus) -> Self {
        let dir = tempfile::tempdir().unwrap();
        corpus.snapshot(&dir.path().join("corpus.jsonl")).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, out: &str) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.paths.corpus = Some(self.path("corpus.jsonl"));
        cfg.paths.out_dir = Some(self.path(out));
        cfg.seed = 17;
        cfg.apply_overrides(None, None);
        cfg
    }

    fn read(&self, rel: &str) -> Vec<u8> {
        std::fs::read(self.path(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }
}

fn p2_only(instances: &[(&str, &str)]) -> Corpus {
    let mut c = Corpus::new();
    c.add_problem(testkit::p2()).unwrap();
    for (id, src) in instances {
        c.add_instance(testkit::instance(id, "P2", src)).unwrap();
    }
    c
}

fn atgen(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_atgen")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn eval_with_oracle_is_fully_accurate_and_reproducible() {
    let ws = Workspace::new(&testkit::fixture_corpus());
    let cfg = ws.config("a");
    cmd_eval(&cfg).unwrap();
    let report: serde_json::Value = serde_json::from_slice(&ws.read("a/eval_report.json")).unwrap();
    assert_eq!(report["overall"]["io_acc"], 100.0);
    assert_eq!(report["generator"], "oracle");
    cmd_eval(&ws.config("b")).unwrap();
    assert_eq!(ws.read("a/eval_report.json"), ws.read("b/eval_report.json"));
}

#[test]
fn tiering_assigns_and_is_stable() {
    let ws = Workspace::new(&testkit::fixture_corpus());
    cmd_tier(&ws.config("a")).unwrap();
    cmd_tier(&ws.config("b")).unwrap();
    assert_eq!(ws.read("a/tiered.jsonl"), ws.read("b/tiered.jsonl"));
    let tiers: Vec<serde_json::Value> = serde_json::from_slice(&ws.read("a/tiers.json")).unwrap();
    let labels: Vec<&str> = tiers.iter().map(|t| t["tier"].as_str().unwrap()).collect();
    assert_eq!(labels, vec!["easy", "medium", "hard"]);
    // B3 needs a > 100, which the sampler never draws.
    assert_eq!(tiers[2]["instance_id"], "B3");
    let text = String::from_utf8(ws.read("a/tiered.jsonl")).unwrap();
    let reparsed = Corpus::parse(&text).unwrap();
    assert_eq!(reparsed.instance("B3").unwrap().tier, Some(Tier::Hard));
}

#[test]
fn tiering_rejects_small_corpus_with_exit_2() {
    let ws = Workspace::new(&p2_only(&[("B3", B3)]));
    let err = cmd_tier(&ws.config("a")).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn recorded_rollouts_replay_byte_identically() {
    let ws = Workspace::new(&testkit::fixture_corpus());
    let mut rec = ws.config("recorded");
    rec.paths.record_dir = Some(ws.path("fixtures"));
    rec.rollout.group_size = 4;
    cmd_train_rollouts(&rec, 2).unwrap();

    let replay = |out: &str| {
        let mut cfg = ws.config(out);
        cfg.rollout.group_size = 4;
        cfg.gateway.test_gen = GeneratorSpec::replay(ws.path("fixtures/test_gen.replay.jsonl"));
        cfg.gateway.code_gen = GeneratorSpec::replay(ws.path("fixtures/code_gen.replay.jsonl"));
        cmd_train_rollouts(&cfg, 2).unwrap()
    };
    let s1 = replay("r1");
    let s2 = replay("r2");
    assert!(s1.flagged.is_empty(), "{:?}", s1.flagged);
    assert_eq!(s1, s2);
    for f in ["rollouts.jsonl", "curriculum.jsonl", "decisions.jsonl", "corpus.jsonl"] {
        assert_eq!(ws.read(&format!("r1/{f}")), ws.read(&format!("r2/{f}")), "{f}");
        assert_eq!(ws.read(&format!("recorded/{f}")), ws.read(&format!("r1/{f}")), "{f}");
    }
    let lines = String::from_utf8(ws.read("r1/rollouts.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 2 * 3 * 4);
}

#[test]
fn adaptive_without_attacking_tests_never_replaces() {
    let ws = Workspace::new(&p2_only(&[("B3", B3), ("B3b", B3)]));
    let cfg = ws.config("a");
    let s = cmd_train_rollouts(&cfg, 2).unwrap();
    assert_eq!(s.adversarial_ratio, Some(0.0));
    assert!(String::from_utf8(ws.read("a/curriculum.jsonl")).unwrap().is_empty());
}

#[test]
fn unconditional_ratio_follows_candidate_rotation() {
    // The code pool per problem is [gold, B3], served in rotation across
    // both instances: B2's single attempt draws gold, B3's draws B3.
    let ws = Workspace::new(&p2_only(&[("B2", testkit::B2), ("B3", B3)]));
    let mut cfg = ws.config("a");
    cfg.adversary.search.mode = atgen_core::adversary::SearchMode::Unconditional;
    cfg.adversary.search.max_retries = 1;
    cfg.gateway.code_gen.oracle.mutants.insert("P2".into(), vec![B3.into()]);
    let s = cmd_train_rollouts(&cfg, 1).unwrap();
    assert_eq!(s.adversarial_ratio, Some(0.5));
    let decisions = String::from_utf8(ws.read("a/decisions.jsonl")).unwrap();
    assert!(decisions.lines().next().unwrap().contains("\"kept-original\""));
    assert!(decisions.lines().nth(1).unwrap().contains("\"replaced\""));
}

#[test]
fn bon_with_oracle_reaches_upper_bound() {
    let ws = Workspace::new(&testkit::fixture_corpus());
    let mut cfg = ws.config("a");
    cfg.gateway.code_gen.oracle.mutants.insert("P1".into(), vec![testkit::B1.into()]);
    cfg.gateway.code_gen.oracle.mutants.insert("P2".into(), vec![testkit::B2.into(), B3.into()]);
    assert_eq!(cmd_bon(&cfg, 3, 6).unwrap(), 100.0);
    cfg.gateway.code_gen.oracle.exclude_gold = true;
    assert_eq!(cmd_bon(&cfg, 3, 6).unwrap(), 0.0);
    assert_eq!(cmd_bon(&cfg, 3, 0).unwrap_err().exit_code(), 2);
}

#[test]
fn code_reward_scores_fixture_completions() {
    let ws = Workspace::new(&testkit::fixture_corpus());
    let lines = [
        json!({"problem_id": "P2", "completion": canonical_code_completion("sum", P2_GOLD)}),
        json!({"problem_id": "P2", "completion": canonical_code_completion("sum", B3)}),
        json!({"problem_id": "P2", "completion": "zzz ??"}),
    ];
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(ws.path("completions.jsonl"), text).unwrap();
    let cfg = ws.config("a");
    let out = cmd_code_reward(&cfg, &ws.path("completions.jsonl")).unwrap();
    let totals: Vec<f64> = out.iter().map(|l| l.total).collect();
    assert!((totals[0] - 1.0).abs() < 1e-9);
    assert!((totals[1] - 2.5 / 3.0).abs() < 1e-9);
    assert_eq!(totals[2], 0.0);

    let mut generated = ws.config("b");
    generated.eval.code_reward_suite = SuiteSource::Generated;
    generated.eval.k_test = 4;
    let out = cmd_code_reward(&generated, &ws.path("completions.jsonl")).unwrap();
    assert_eq!(out[0].suite_size, 4);
    assert_eq!(out[0].total, 1.0);
}

fn write_config(ws: &Workspace, value: serde_json::Value) -> PathBuf {
    let p = ws.path("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    p
}

#[test]
fn binary_reports_config_errors_with_exit_2() {
    let ws = Workspace::new(&testkit::fixture_corpus());
    let cfg = write_config(&ws, json!({"paths": {"corpus": "missing.jsonl"}}));
    let (code, _, err) = atgen(&["eval", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("missing.jsonl"));

    let cfg = write_config(&ws, json!({"paths": {"corpus": "corpus.jsonl"}, "bogus": 1}));
    assert_eq!(atgen(&["eval", "--config", cfg.to_str().unwrap()]).0, 2);
    assert_eq!(atgen(&["frobnicate"]).0, 2);
}

#[test]
fn binary_runs_eval_from_config_file() {
    let ws = Workspace::new(&testkit::fixture_corpus());
    let cfg = write_config(
        &ws,
        json!({
            "seed": 3,
            "paths": {"corpus": "corpus.jsonl", "out_dir": "out"},
            "gateway": {"test_gen": {"backend": "oracle"}, "code_gen": {"backend": "oracle"}},
            "eval": {"attempts": 2}
        }),
    );
    let (code, stdout, err) = atgen(&["eval", "--config", cfg.to_str().unwrap(), "--seed", "4"]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("IO Acc"));
    assert!(stdout.contains("Medium"));
    assert!(ws.path("out/eval_report.json").exists());
}

fn exec(ws: &Workspace, program: &str, extra: &[&str]) -> (i32, serde_json::Value) {
    let prog = ws.path("prog.py");
    std::fs::write(&prog, program).unwrap();
    std::fs::write(ws.path("in.txt"), "ping").unwrap();
    let mut args = vec!["exec", "--program", prog.to_str().unwrap()];
    let input = ws.path("in.txt");
    args.extend(["--input", input.to_str().unwrap()]);
    args.extend(extra);
    let (code, stdout, _) = atgen(&args);
    (code, serde_json::from_str(&stdout).unwrap())
}

#[test]
fn exec_prints_outcomes() {
    let ws = Workspace::new(&testkit::fixture_corpus());
    let (code, out) = exec(&ws, testkit::P1_GOLD, &[]);
    assert_eq!(code, 0);
    assert_eq!(out["status"], "ok");
    assert_eq!(out["stdout"], "ping\n");

    let (code, out) = exec(&ws, testkit::P1_GOLD, &["--language", "cobol"]);
    assert_eq!(code, 1);
    assert_eq!(out["status"], "spawn-failure");

    let cfg = write_config(&ws, json!({"sandbox": {"time_limit_s": 1.0}}));
    let (code, out) = exec(&ws, testkit::SPINNER, &["--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert_eq!(out["status"], "timeout");
}

#[test]
fn relative_paths_resolve_against_config_dir() {
    let ws = Workspace::new(&testkit::fixture_corpus());
    let p = write_config(
        &ws,
        json!({"paths": {"corpus": "corpus.jsonl"}, "gateway": {"test_gen": {"backend": "replay", "fixture": "fx.jsonl"}, "code_gen": {"backend": "oracle"}}}),
    );
    let cfg = RunConfig::load(&p).unwrap();
    assert_eq!(cfg.paths.corpus.as_deref(), Some(ws.path("corpus.jsonl").as_path()));
    assert_eq!(cfg.gateway.test_gen.backend, BackendKind::Replay);
    assert_eq!(cfg.gateway.test_gen.fixture.as_deref(), Some(ws.path("fx.jsonl").as_path()));
    // The fixture does not exist, so every command refuses to start.
    assert_eq!(cmd_eval(&cfg).unwrap_err().exit_code(), 2);
    assert!(Path::new(&ws.path("corpus.jsonl")).exists());
}
