//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs entirely on fixtures with replay and oracle generators.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use atgen_cli::{cmd_code_reward, cmd_train_rollouts, RunConfig};
use atgen_core::adversary::{
    adversarial_ratio, is_valid_adversarial, Adversary, AdversarySearchConfig, CurriculumAction,
    SearchMethod, SearchMode,
};
use atgen_core::eval::{BestOfN, Evaluator};
use atgen_core::gateway::{GeneratorSpec, OracleOptions};
use atgen_core::protocol::{canonical_code_completion, canonical_test_completion};
use atgen_core::reward::{Judge, RewardConfig};
use atgen_core::rollout::compute_advantages;
use atgen_core::testkit::{self, ReplayFixture, B1, B2, B3, P1_GOLD, P2_GOLD, SPINNER};
use atgen_core::{
    outputs_match, CodeArtifact, Corpus, ExecStatus, ExecutionLimits, InputSampler, Problem,
    Sandbox, SandboxConfig, TemplateSet, TestCase, Tier,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, budget: Duration) -> Result<(), String> {
    ensure(elapsed <= budget, || format!("took {elapsed:?}, budget {budget:?}"))
}

/// Splits `items` across threads, preserving order.
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = std::thread::available_parallelism().map_or(4, |n| n.get()).min(16);
    let chunk = items.len().div_ceil(threads).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    })
}

// 1. check_attack / input_attack against a brute-force arithmetic oracle.
fn reward_oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let sb = testkit::sandbox();
    let judge = Judge::new(&sb, testkit::limits());
    let p2 = testkit::p2();
    let bugs: [(&str, &str, fn(i64, i64) -> i64); 2] = [
        ("B2", B2, |a, b| a - b),
        ("B3", B3, |a, b| if a > 100 { a + b + 1 } else { a + b }),
    ];
    let inputs: Vec<(i64, i64)> = (-3..=3).flat_map(|a| (-3..=3).map(move |b| (a, b))).collect();
    let mut cases = Vec::new();
    for (name, src, f) in bugs {
        for &(a, b) in &inputs {
            cases.push((name, src, f, a, b));
        }
    }
    let mismatches: Vec<String> = par_map(&cases, |&(name, src, f, a, b)| {
        let input = format!("{a} {b}");
        let gold = a + b;
        let expected_attack = f(a, b) != gold;
        let mut errs = Vec::new();

        let r = judge.check_attack(&p2, src, &TestCase::new(&input, gold.to_string()));
        if !r.io_correct || r.attacked != expected_attack {
            errs.push(format!("{name} check_attack({input}) = {}/{}", r.io_correct, r.attacked));
        }
        // Wrong expected output: never accurate, never an attack.
        let r = judge.check_attack(&p2, src, &TestCase::new(&input, (gold + 7).to_string()));
        if r.io_correct || r.attacked {
            errs.push(format!("{name} check_attack({input}, wrong) attacked"));
        }
        let r = judge.input_attack(&p2, src, &input);
        if !r.valid || r.attacked != expected_attack {
            errs.push(format!("{name} input_attack({input}) = {}/{}", r.valid, r.attacked));
        }
        errs
    })
    .into_iter()
    .flatten()
    .collect();
    ensure(mismatches.is_empty(), || mismatches.join("; "))?;
    within(started.elapsed(), Duration::from_secs(60))?;
    Ok(format!("{} input/bug pairs agree", cases.len()))
}

// 2. Gating and reward lattice over synthesized completions.
fn synth_completion(rng: &mut StdRng) -> String {
    let a: i64 = if rng.random_bool(0.2) {
        rng.random_range(101..=130)
    } else {
        rng.random_range(-5..=5)
    };
    let b: i64 = rng.random_range(-5..=5);
    let input = match rng.random_range(0..10) {
        0 => "seven".to_string(),
        _ => format!("{a} {b}"),
    };
    let output = match rng.random_range(0..10) {
        0..=5 => (a + b).to_string(),
        6..=8 => (a + b + rng.random_range(1..=2)).to_string(),
        _ => "x".to_string(),
    };
    let json = serde_json::json!({"input": input, "output": output}).to_string();
    match rng.random_range(0..12) {
        0..=4 => canonical_test_completion("reasoning", &TestCase::new(input, output)),
        5 => format!("<think>r\n<answer>\n```json\n{json}\n```\n</answer>"),
        6 => format!("<think>r</think><answer>a</answer><answer>\n```json\n{json}\n```\n</answer>"),
        7 => format!("<answer>\n```json\n{json}\n```\n</answer><think>r</think>"),
        8 => format!("<think>r</think><answer>{json}</answer>"),
        9 => "<think>r</think><answer>\n```json\n{\"input\": 1 2}\n```\n</answer>".to_string(),
        10 => format!("<think>r</think><answer>\n```json\n{{\"input\": {a}, \"output\": \"{output}\"}}\n```\n</answer>"),
        _ => format!("Sure! input {input} output {output}"),
    }
}

fn gating_invariant() -> Outcome {
    let started = Instant::now();
    let sb = testkit::sandbox();
    let judge = Judge::new(&sb, testkit::limits());
    let p2 = testkit::p2();
    let cfg = RewardConfig::three_combined();
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let bugs = [B2, B3, P2_GOLD, testkit::CRASHER];
    let cases: Vec<(String, &str)> = (0..1200)
        .map(|_| (synth_completion(&mut rng), bugs[rng.random_range(0..bugs.len())]))
        .collect();
    let lattice = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
    let results = par_map(&cases, |(text, bug)| {
        let parsed = atgen_core::parse_completion(text);
        judge.compute_test_reward(&parsed, &p2, bug, &cfg)
    });
    let mut seen = BTreeMap::new();
    for (r, (text, _)) in results.iter().zip(&cases) {
        ensure(r.r_attack <= r.r_acc, || format!("gating violated for {text:?}"))?;
        ensure(lattice.contains(&r.total), || format!("total {} for {text:?}", r.total))?;
        *seen.entry(format!("{:.3}", r.total)).or_insert(0usize) += 1;
    }
    ensure(seen.len() == 4, || format!("lattice not fully exercised: {seen:?}"))?;
    within(started.elapsed(), Duration::from_secs(300))?;
    Ok(format!("{} completions, totals {seen:?}", cases.len()))
}

// Shared rollout workspace for 3 and 10.
struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(corpus: &Corpus) -> Self {
        let dir = tempfile::tempdir().unwrap();
        corpus.snapshot(&dir.path().join("corpus.jsonl")).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn read(&self, rel: &str) -> Vec<u8> {
        std::fs::read(self.path(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }

    /// Unconditional curriculum with oracle generators and mutant pools that
    /// contain genuine adversarial candidates.
    fn config(&self, out: &str, seed: u64) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.paths.corpus = Some(self.path("corpus.jsonl"));
        cfg.paths.out_dir = Some(self.path(out));
        cfg.rollout.group_size = 3;
        cfg.adversary.search = AdversarySearchConfig {
            mode: SearchMode::Unconditional,
            method: SearchMethod::Sampling,
            max_retries: 3,
        };
        let mutants = &mut cfg.gateway.code_gen.oracle.mutants;
        mutants.insert(
            "P1".into(),
            vec![B1.into(), "s = input()\nprint(s if ' ' not in s else s.replace(' ', '_'))\n".into()],
        );
        mutants.insert("P2".into(), vec![B2.into(), B3.into()]);
        cfg.apply_overrides(None, None);
        cfg
    }
}

// 3. Every adversarial artifact in the curriculum log re-verifies.
fn adversarial_validity() -> Outcome {
    let started = Instant::now();
    let ws = Workspace::new(&testkit::fixture_corpus());
    let cfg = ws.config("out", 5);
    cmd_train_rollouts(&cfg, 3).map_err(|e| e.to_string())?;
    let snapshot = Corpus::parse(&String::from_utf8(ws.read("out/corpus.jsonl")).unwrap())
        .map_err(|e| e.to_string())?;
    let sb = testkit::sandbox();
    let lim = testkit::limits();
    let judge = Judge::new(&sb, lim.clone());
    let log = String::from_utf8(ws.read("out/curriculum.jsonl")).unwrap();
    let mut checked = 0;
    for line in log.lines() {
        let e: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let prov = e["new_provenance"].as_str().unwrap_or_default();
        if !prov.starts_with("adversarial-") {
            continue;
        }
        let inst = snapshot.instance(e["instance_id"].as_str().unwrap()).unwrap();
        let problem = snapshot.problem_of(inst);
        let src = e["source"].as_str().ok_or("entry without source")?;
        let t: TestCase = serde_json::from_value(e["t_gen"].clone()).map_err(|e| e.to_string())?;
        // Direct execution, independent of the validity filter.
        let on_t = sb.execute(src, &problem.language_tag, &t.input, &lim);
        ensure(on_t.is_ok() && outputs_match(&on_t.stdout, &t.output), || {
            format!("{}: fails its recorded t_gen", e["artifact_id"])
        })?;
        let fails_gold = problem.gold_tests.iter().any(|g| {
            let o = sb.execute(src, &problem.language_tag, &g.input, &lim);
            !(o.is_ok() && outputs_match(&o.stdout, &g.output))
        });
        ensure(fails_gold, || format!("{}: passes all gold tests", e["artifact_id"]))?;
        ensure(
            is_valid_adversarial(&judge, problem, src, &t).map_err(|e| e.to_string())?,
            || "validity filter disagrees".into(),
        )?;
        checked += 1;
    }
    ensure(checked > 0, || "no adversarial artifacts produced".into())?;
    within(started.elapsed(), Duration::from_secs(120))?;
    Ok(format!("{checked} adversarial artifacts re-verified"))
}

// 4. Adaptive searches exactly where t_gen attacks; unconditional everywhere.
fn mode_semantics() -> Outcome {
    let sb = testkit::sandbox();
    let templates = TemplateSet::builtin();
    let build = || {
        let mut c = Corpus::new();
        let mut mutants = BTreeMap::new();
        for (k, bug) in [B2, B2, B3, B3, B2, B3].iter().enumerate() {
            let pid = format!("S{k}");
            c.add_problem(testkit::sum_variant(&pid)).unwrap();
            c.add_instance(testkit::instance(&format!("I{k}"), &pid, bug)).unwrap();
            mutants.insert(pid, vec![B3.to_string()]);
        }
        (c, mutants)
    };
    let t_gen = TestCase::new("1 2", "3");
    let mut searched = BTreeMap::new();
    for mode in [SearchMode::Adaptive, SearchMode::Unconditional] {
        let (mut corpus, mutants) = build();
        let gw = testkit::oracle_gateway(
            1,
            OracleOptions {
                mutants,
                exclude_gold: false,
            },
        );
        let adv = Adversary::new(
            Judge::new(&sb, testkit::limits()),
            &gw,
            &templates,
            AdversarySearchConfig {
                mode,
                method: SearchMethod::Sampling,
                max_retries: 4,
            },
        )
        .map_err(|e| e.to_string())?;
        let ids: Vec<String> = corpus.instances().iter().map(|i| i.instance_id.clone()).collect();
        let mut hit = Vec::new();
        for id in &ids {
            let d = adv
                .curriculum_step(&mut corpus, id, Some(&t_gen), 0)
                .map_err(|e| e.to_string())?;
            if d.searched {
                hit.push(id.clone());
            }
            if mode == SearchMode::Adaptive && !d.searched {
                ensure(d.action == CurriculumAction::TriggerSkipped, || format!("{id}: {:?}", d.action))?;
            }
        }
        searched.insert(format!("{mode:?}"), hit);
    }
    let adaptive = &searched["Adaptive"];
    let uncond = &searched["Unconditional"];
    ensure(adaptive == &vec!["I0".to_string(), "I1".into(), "I4".into()], || {
        format!("adaptive searched {adaptive:?}")
    })?;
    ensure(uncond.len() == 6, || format!("unconditional searched {uncond:?}"))?;
    Ok("adaptive 3/6, unconditional 6/6".into())
}

// 5. Adversarial ratio is monotone in max_retries on a fixed stream.
fn retry_monotonicity() -> Outcome {
    let sb = testkit::sandbox();
    let templates = TemplateSet::builtin();
    let t_gen = TestCase::new("1 2", "3");
    // Position (1-based) of the first adversarial candidate per instance.
    let first_valid: [Option<usize>; 8] = [Some(2), Some(9), Some(14), Some(20), Some(26), Some(31), Some(38), None];
    let problems: Vec<Problem> = (0..first_valid.len()).map(|k| testkit::sum_variant(&format!("S{k}"))).collect();
    let mut fixture = ReplayFixture::new();
    for (p, pos) in problems.iter().zip(first_valid) {
        let mut stream = vec![P2_GOLD.to_string(); 40];
        if let Some(pos) = pos {
            stream[pos - 1] = B3.to_string();
            // Candidates that fail t_gen itself never qualify.
            for j in 0..pos.saturating_sub(1) {
                if j % 3 == 1 {
                    stream[j] = B2.to_string();
                }
            }
        }
        fixture.add_owned(&templates.adversary_sample(p), stream);
    }
    let mut ratios = Vec::new();
    for retries in [10u32, 20, 30] {
        let mut corpus = Corpus::new();
        for (k, p) in problems.iter().enumerate() {
            corpus.add_problem(p.clone()).unwrap();
            corpus.add_instance(testkit::instance(&format!("I{k}"), &p.id, B2)).unwrap();
        }
        let gw = testkit::replay_gateway(&fixture);
        let adv = Adversary::new(
            Judge::new(&sb, testkit::limits()),
            &gw,
            &templates,
            AdversarySearchConfig {
                mode: SearchMode::Adaptive,
                method: SearchMethod::Sampling,
                max_retries: retries,
            },
        )
        .map_err(|e| e.to_string())?;
        let mut decisions = Vec::new();
        for k in 0..problems.len() {
            decisions.push(
                adv.curriculum_step(&mut corpus, &format!("I{k}"), Some(&t_gen), 0)
                    .map_err(|e| e.to_string())?,
            );
        }
        let ratio = adversarial_ratio(&decisions).map_err(|e| e.to_string())?;
        let expected = first_valid.iter().filter(|p| p.is_some_and(|p| p <= retries as usize)).count() as f64
            / first_valid.len() as f64;
        ensure(ratio == expected, || format!("retries {retries}: ratio {ratio}, expected {expected}"))?;
        ratios.push(ratio);
    }
    ensure(ratios[0] <= ratios[1] && ratios[1] <= ratios[2], || format!("{ratios:?}"))?;
    Ok(format!("ratios at 10/20/30 retries: {ratios:?}"))
}

// 6. Group-normalized advantages.
fn advantage_properties() -> Outcome {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(6);
    let lattice = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
    let mut worst_center: f64 = 0.0;
    let mut worst_shift: f64 = 0.0;
    for trial in 0..5000 {
        let n = rng.random_range(2..=16);
        let rewards: Vec<f64> = if trial % 2 == 0 {
            (0..n).map(|_| lattice[rng.random_range(0..4)]).collect()
        } else {
            (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
        };
        let a = compute_advantages(&rewards).map_err(|e| e.to_string())?;
        let mean = a.iter().sum::<f64>() / n as f64;
        worst_center = worst_center.max(mean.abs());

        // Independent arithmetic oracle.
        let m = rewards.iter().sum::<f64>() / n as f64;
        let sd = (rewards.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / n as f64).sqrt();
        let all_equal = rewards.iter().all(|r| *r == rewards[0]);
        for (x, r) in a.iter().zip(&rewards) {
            let want = if all_equal { 0.0 } else { (r - m) / (sd + 1e-8) };
            ensure((x - want).abs() < 1e-9, || format!("{rewards:?}: {x} vs {want}"))?;
        }

        let k = f64::from(rng.random_range(-3i32..=3));
        let shifted: Vec<f64> = rewards.iter().map(|r| r + k).collect();
        let b = compute_advantages(&shifted).map_err(|e| e.to_string())?;
        for (x, y) in a.iter().zip(&b) {
            worst_shift = worst_shift.max((x - y).abs());
        }
    }
    ensure(worst_center < 1e-9, || format!("centering {worst_center:e}"))?;
    ensure(worst_shift < 1e-12, || format!("shift {worst_shift:e}"))?;
    let zeros = compute_advantages(&[2.0 / 3.0; 6]).map_err(|e| e.to_string())?;
    ensure(zeros.iter().all(|z| *z == 0.0), || format!("{zeros:?}"))?;
    let two = compute_advantages(&[1.0, 0.0]).map_err(|e| e.to_string())?;
    ensure((two[0] - 1.0).abs() < 1e-6 && (two[1] + 1.0).abs() < 1e-6, || format!("{two:?}"))?;
    within(started.elapsed(), Duration::from_secs(10))?;
    Ok(format!("max |mean| {worst_center:.1e}, max shift delta {worst_shift:.1e}"))
}

// 7. Tiering sizes, ordering and determinism.
fn tiering() -> Outcome {
    let sb = testkit::sandbox();
    let templates = TemplateSet::builtin();
    let bugs = [
        B2,
        B3,
        "a, b = map(int, input().split())\nprint(a + b if a >= 0 else a - b)\n",
        "a, b = map(int, input().split())\nprint(a + b if b != 3 else 0)\n",
        "a, b = map(int, input().split())\nprint(abs(a + b))\n",
        "a, b = map(int, input().split())\nprint(a + b if a != b else 2 * a + 1)\n",
        "a, b = map(int, input().split())\nprint(a * b)\n",
    ];
    let build = || {
        let mut c = Corpus::new();
        for (k, bug) in bugs.iter().enumerate() {
            let pid = format!("S{k}");
            c.add_problem(testkit::sum_variant(&pid)).unwrap();
            c.add_instance(testkit::instance(&format!("I{k}"), &pid, bug)).unwrap();
        }
        c
    };
    let run = |seed: u64| {
        let mut corpus = build();
        let gw = testkit::oracle_gateway(seed, OracleOptions::default());
        let ev = Evaluator {
            judge: Judge::new(&sb, testkit::limits()),
            gateway: &gw,
            templates: &templates,
            seed: None,
        };
        let a = ev.tier_partition(&mut corpus, 8).map_err(|e| e.to_string())?;
        Ok::<_, String>((a, corpus.to_jsonl()))
    };
    let (a1, snap1) = run(21)?;
    let (a2, snap2) = run(21)?;
    ensure(a1 == a2 && snap1 == snap2, || "tiering not deterministic under a fixed seed".into())?;

    let mut sizes = BTreeMap::new();
    let mut sums = BTreeMap::new();
    for t in &a1 {
        *sizes.entry(t.tier).or_insert(0usize) += 1;
        *sums.entry(t.tier).or_insert(0.0) += t.attack_rate;
    }
    let counts: Vec<usize> = Tier::ALL.iter().map(|t| sizes[t]).collect();
    ensure(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1, || format!("{counts:?}"))?;
    let means: Vec<f64> = Tier::ALL.iter().map(|t| sums[t] / sizes[t] as f64).collect();
    ensure(means[0] >= means[1] && means[1] >= means[2], || format!("means {means:?}"))?;
    Ok(format!("sizes {counts:?}, mean attack rates {means:.3?}"))
}

// 8. Best-of-N with oracle tests: 100% with a correct candidate, 0% without.
fn bon_upper_bound() -> Outcome {
    let sb = testkit::sandbox();
    let templates = TemplateSet::builtin();
    // Samplers cover each bug's failure region so the oracle suite can see it.
    let wide = testkit::p2_with_sampler(InputSampler::Ints {
        count: 2,
        min: -3,
        max: 300,
    });
    let mut p1 = testkit::p1();
    p1.id = "E".into();
    let problems: Vec<(Problem, &str, Vec<&str>)> = vec![
        (p1, P1_GOLD, vec![B1, "print(input()[::-1])\n"]),
        (wide, P2_GOLD, vec![B2, B3, "a, b = map(int, input().split())\nprint(a * b)\n"]),
    ];
    let mut corpus = Corpus::new();
    for (p, _, _) in &problems {
        corpus.add_problem(p.clone()).unwrap();
    }
    let mut rng = StdRng::seed_from_u64(8);
    let gw = testkit::oracle_gateway(8, OracleOptions::default());
    let bon = BestOfN {
        judge: Judge::new(&sb, testkit::limits()),
        test_gen: &gw,
        templates: &templates,
        seed: None,
    };
    let mut reports = Vec::new();
    for with_gold in [true, false] {
        for round in 0..5 {
            let mut sets = BTreeMap::new();
            for (p, gold, bugs) in &problems {
                let mut cands: Vec<&str> = bugs.clone();
                if with_gold {
                    cands.insert(rng.random_range(0..=cands.len()), gold);
                }
                let arts = cands
                    .iter()
                    .enumerate()
                    .map(|(i, s)| CodeArtifact::candidate(format!("{}#{round}.{i}", p.id), *s))
                    .collect();
                sets.insert(p.id.clone(), arts);
            }
            let r = bon.bon_evaluate(&corpus, &sets, 10).map_err(|e| e.to_string())?;
            let want = if with_gold { 100.0 } else { 0.0 };
            ensure(r.pass_at_1 == want, || format!("with_gold={with_gold} round {round}: {r:?}"))?;
            if with_gold {
                // Dominance: the chosen candidate is perfect on the oracle suite.
                for (p, _, _) in &problems {
                    let sel = bon.bon_select(p, &sets[&p.id], 10).map_err(|e| e.to_string())?;
                    ensure(sel.pass_rates[sel.selected_index] == 1.0, || format!("{sel:?}"))?;
                }
            }
            reports.push(r.pass_at_1);
        }
    }
    Ok(format!("pass@1 over 10 rounds: {reports:?}"))
}

// 9. Timeouts fire within 1.5 s of wall clock.
fn sandbox_timing() -> Outcome {
    let sb = Sandbox::new(SandboxConfig::default());
    let limits = ExecutionLimits::new(1.0, 1 << 20).map_err(|e| e.to_string())?;
    let mut worst = Duration::ZERO;
    for i in 0..20 {
        let t = Instant::now();
        let out = sb.execute(SPINNER, "python", "", &limits);
        let wall = t.elapsed();
        worst = worst.max(wall);
        ensure(out.status == ExecStatus::Timeout, || format!("run {i}: {:?}", out.status))?;
        ensure(wall <= Duration::from_millis(1500), || format!("run {i}: {wall:?}"))?;
    }
    Ok(format!("20 timeouts, slowest {worst:?}"))
}

// 10. Replayed rollouts are byte-identical.
fn determinism() -> Outcome {
    let ws = Workspace::new(&testkit::fixture_corpus());
    let mut rec = ws.config("recorded", 9);
    rec.paths.record_dir = Some(ws.path("fixtures"));
    cmd_train_rollouts(&rec, 3).map_err(|e| e.to_string())?;
    let replay = |out: &str| {
        let mut cfg = ws.config(out, 9);
        cfg.gateway.test_gen = GeneratorSpec::replay(ws.path("fixtures/test_gen.replay.jsonl"));
        cfg.gateway.code_gen = GeneratorSpec::replay(ws.path("fixtures/code_gen.replay.jsonl"));
        cfg.apply_overrides(None, None);
        cmd_train_rollouts(&cfg, 3).map_err(|e| e.to_string())
    };
    let s1 = replay("run1")?;
    let s2 = replay("run2")?;
    ensure(s1.groups == s2.groups, || "group counts differ".into())?;
    ensure(s1.flagged.is_empty(), || format!("replay misses: {:?}", s1.flagged))?;
    for f in ["rollouts.jsonl", "curriculum.jsonl"] {
        let (a, b) = (ws.read(&format!("run1/{f}")), ws.read(&format!("run2/{f}")));
        ensure(a == b, || format!("{f} differs between runs"))?;
        ensure(!a.is_empty(), || format!("{f} is empty"))?;
    }
    let lines = String::from_utf8(ws.read("run1/curriculum.jsonl")).unwrap().lines().count();
    Ok(format!("{} groups, {lines} curriculum entries, identical bytes", s1.groups))
}

// 11. Code reward = (format + tag_count + pass_rate) / 3.
fn code_reward_composition() -> Outcome {
    let ws = Workspace::new(&testkit::fixture_corpus());
    let lines = [
        serde_json::json!({"problem_id": "P2", "completion": canonical_code_completion("sum", P2_GOLD)}),
        serde_json::json!({"problem_id": "P2", "completion": canonical_code_completion("sum", B3)}),
        serde_json::json!({"problem_id": "P2", "completion": "qwerty uiop"}),
    ];
    let path = ws.path("completions.jsonl");
    std::fs::write(&path, lines.iter().map(|l| format!("{l}\n")).collect::<String>()).unwrap();
    let mut cfg = RunConfig::default();
    cfg.paths.corpus = Some(ws.path("corpus.jsonl"));
    cfg.paths.out_dir = Some(ws.path("out"));
    let out = cmd_code_reward(&cfg, Path::new(&path)).map_err(|e| e.to_string())?;
    let expected = [(1.0 + 1.0 + 1.0) / 3.0, (1.0 + 1.0 + 0.5) / 3.0, 0.0];
    for (got, want) in out.iter().zip(expected) {
        ensure((got.total - want).abs() < 1e-9, || format!("{got:?} vs {want}"))?;
    }
    let totals: Vec<f64> = out.iter().map(|l| l.total).collect();
    Ok(format!("totals {totals:.4?}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("reward-oracle equivalence", reward_oracle_equivalence),
        ("gating invariant", gating_invariant),
        ("adversarial validity", adversarial_validity),
        ("mode semantics", mode_semantics),
        ("retry monotonicity", retry_monotonicity),
        ("advantage properties", advantage_properties),
        ("tiering", tiering),
        ("best-of-n upper bound", bon_upper_bound),
        ("sandbox timing", sandbox_timing),
        ("determinism", determinism),
        ("code-reward composition", code_reward_composition),
    ];
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if filter.as_ref().is_some_and(|s| !name.contains(s.as_str())) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {:>2}. {name} ({secs:.1}s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2}. {name} ({secs:.1}s): {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
