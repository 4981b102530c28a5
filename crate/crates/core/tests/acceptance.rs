//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use common::{drive, ingest, open, scripted, snapshot, Counting, KillSwitch};
use thematic_core::gateway::{CallTag, Field, GatewayError, Schema, Script, ScriptEntry, ScriptedBackend};
use thematic_core::pipeline::StageKey;
use thematic_core::synthetic::Scenario;
use thematic_core::tokens::{pack_items, truncate_to_fit, TRUNCATION_MARKER};
use thematic_core::*;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("batching invariants over 1000 random datasets", batching),
        ("head/tail truncation property", truncation),
        ("golden corpus end to end, deterministic rerun", golden_end_to_end),
        ("recall@k against a brute-force oracle", recall_oracle),
        ("quality tallies match reference counts", quality_fixtures),
        ("feedback reaches the next coding prompt", feedback_contract),
        ("crash after any batch resumes to identical output", crash_resume),
        ("gold labels never reach the model", gold_isolation),
        ("structured output repair and audit", structured_repair),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        let ms = started.elapsed().as_millis();
        match outcome {
            Ok(detail) => println!("PASS  {name} ({detail}; {ms} ms)"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn random_text(rng: &mut ChaCha8Rng, max_words: usize) -> String {
    const ALPHABET: &[char] = &['a', 'e', 'k', 'o', 'r', 't', 'ž', 'é', 'ß', '7'];
    let words = rng.random_range(0..=max_words);
    let mut s = String::new();
    for w in 0..words {
        if w > 0 {
            s.push_str([" ", "  ", "\n", "\t "][rng.random_range(0..4)]);
        }
        for _ in 0..rng.random_range(1..12) {
            s.push(ALPHABET[rng.random_range(0..ALPHABET.len())]);
        }
    }
    s
}

fn batching() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xba7c);
    let mut batches_seen = 0;
    let mut truncated_seen = 0;
    for case in 0..1000 {
        let counter: &dyn TokenCounter = if case % 2 == 0 { &HeuristicCounter } else { &WordCounter };
        let n = rng.random_range(1..40);
        let max_words = if rng.random_bool(0.2) { 400 } else { 60 };
        let items: Vec<(String, String)> =
            (0..n).map(|i| (format!("id{i:02}"), random_text(&mut rng, max_words))).collect();
        let capacity = rng.random_range(12..600);
        let per_item = rng.random_range(0..8);
        let Ok(budget) = TokenBudget::with_capacity(capacity, per_item) else {
            return Err(format!("case {case}: budget rejected"));
        };
        let marker = counter.count(TRUNCATION_MARKER);
        if budget.item_limit() <= marker {
            continue;
        }
        let batches = pack_items(items.clone(), &budget, counter).map_err(|e| format!("case {case}: {e}"))?;
        batches_seen += batches.len();

        let original: BTreeMap<&str, &str> = items.iter().map(|(i, t)| (i.as_str(), t.as_str())).collect();
        let mut seen = BTreeSet::new();
        let mut previous: Option<(usize, String)> = None;
        for (b, batch) in batches.iter().enumerate() {
            ensure!(batch.index == b, "case {case}: batch {b} has index {}", batch.index);
            ensure!(!batch.items.is_empty(), "case {case}: empty batch {b}");
            let cost: usize = batch.items.iter().map(|i| counter.count(&i.text) + per_item).sum();
            ensure!(cost <= capacity, "case {case}: batch {b} costs {cost} > {capacity}");
            for item in &batch.items {
                ensure!(seen.insert(item.id.clone()), "case {case}: {} packed twice", item.id);
                let text = original[item.id.as_str()];
                let tokens = counter.count(text);
                if item.truncated {
                    truncated_seen += 1;
                    ensure!(tokens + per_item > capacity, "case {case}: {} truncated needlessly", item.id);
                    ensure!(item.text.contains(TRUNCATION_MARKER), "case {case}: no marker in {}", item.id);
                } else {
                    ensure!(item.text == text, "case {case}: {} altered", item.id);
                }
                let key = (tokens, item.id.clone());
                ensure!(
                    previous.as_ref().is_none_or(|p| *p < key),
                    "case {case}: {} out of shortest-first order",
                    item.id
                );
                previous = Some(key);
            }
            if let Some(next) = batches.get(b + 1) {
                let first = counter.count(&next.items[0].text) + per_item;
                ensure!(cost + first > capacity, "case {case}: batch {b} closed with room left");
            }
        }
        ensure!(seen.len() == items.len(), "case {case}: {} of {} ids packed", seen.len(), items.len());
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("{batches_seen} batches, {truncated_seen} truncated items"))
}

fn truncation() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    let text = "[a-zé ]{0,6}( ?[a-zž7]{1,9}[ \n]{1,2}){0,80}";
    let strategy = (text, 3usize..120, any::<bool>());
    let cut = std::cell::Cell::new(0u32);
    let result = runner.run(&strategy, |(text, limit, words)| {
        let counter: &dyn TokenCounter = if words { &WordCounter } else { &HeuristicCounter };
        let out = truncate_to_fit(counter, &text, limit).expect("limit above marker cost");
        let n = counter.count(&text);
        if n <= limit {
            prop_assert_eq!(&out, &text);
            return Ok(());
        }
        cut.set(cut.get() + 1);
        let m = counter.count(TRUNCATION_MARKER);
        prop_assert!(counter.count(&out) <= limit, "{} tokens > {limit}", counter.count(&out));
        let at = out.find(TRUNCATION_MARKER).expect("marker present");
        let (head, tail) = (&out[..at], &out[at + TRUNCATION_MARKER.len()..]);
        prop_assert!(text.starts_with(head));
        prop_assert!(text.ends_with(tail));
        let h = (limit - m) / 2;
        prop_assert_eq!(counter.count(head), h);
        prop_assert_eq!(counter.count(tail), limit - m - h);
        Ok(())
    });
    result.map_err(|e| e.to_string())?;
    Ok(format!("1000 cases, {} truncated", cut.get()))
}

fn full_run(dir: &Path, s: &Scenario) -> Result<Run, RunError> {
    let run = open(ingest(dir, s), scripted(s));
    drive(&run)?;
    Ok(run)
}

fn golden_end_to_end() -> Outcome {
    let s = Scenario::golden();
    let tmp = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let run = full_run(&tmp.path().join("a"), &s).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let themes = run.store().approved_themes().unwrap().expect("approved").themes;
    ensure!(themes.len() == 3, "{} themes", themes.len());
    let labels: BTreeSet<String> = themes.labels().into_iter().collect();
    let planted: BTreeSet<String> = s.themes.iter().cloned().collect();
    ensure!(labels == planted, "themes {labels:?}");
    let report = run.view().evaluate(3).map_err(|e| e.to_string())?;
    let recall = report.recall.expect("recall");
    ensure!(recall.overall.r_at_1 == 1.0, "overall R@1 = {}", recall.overall.r_at_1);
    ensure!(elapsed < Duration::from_secs(5), "run took {elapsed:?}");
    drop(run);

    full_run(&tmp.path().join("b"), &s).map_err(|e| e.to_string())?;
    let (a, b) = (snapshot(&tmp.path().join("a")), snapshot(&tmp.path().join("b")));
    ensure!(a.keys().eq(b.keys()), "file sets differ: {:?} vs {:?}", a.keys(), b.keys());
    for (name, bytes) in &a {
        ensure!(b[name] == *bytes, "{name} differs between runs");
    }
    Ok(format!("R@1 = 1.0, {} files identical", a.len()))
}

fn recall_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ec4);
    for case in 0..200 {
        let pool: Vec<String> = (0..rng.random_range(3..8)).map(|i| format!("theme {i}")).collect();
        let n = rng.random_range(1..60);
        let mut gold = BTreeMap::new();
        let mut assignments = Vec::new();
        for i in 0..n {
            let id = format!("p{i}");
            gold.insert(id.clone(), pool[rng.random_range(0..pool.len())].clone());
            let mut ranked = pool.clone();
            for j in (1..ranked.len()).rev() {
                ranked.swap(j, rng.random_range(0..=j));
            }
            assignments.push(ThemeAssignment {
                data_point_id: id,
                ranked_themes: ranked,
            });
        }
        for k in [1, 3] {
            let report = recall_at_k(&assignments, &gold, k, None).map_err(|e| format!("case {case}: {e}"))?;
            let (mut support, mut h1, mut hk) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
            for a in &assignments {
                let g = &gold[&a.data_point_id];
                *support.entry(g.clone()).or_insert(0usize) += 1;
                let top1 = usize::from(a.ranked_themes[0] == *g);
                let topk = usize::from(a.ranked_themes.iter().take(k).any(|t| t == g));
                *h1.entry(g.clone()).or_insert(0usize) += top1;
                *hk.entry(g.clone()).or_insert(0usize) += topk;
            }
            ensure!(report.per_theme.len() == support.len(), "case {case}: row count");
            for row in &report.per_theme {
                let s = support[&row.theme];
                ensure!(row.support == s, "case {case}: support of {}", row.theme);
                ensure!(row.r_at_1 == h1[&row.theme] as f64 / s as f64, "case {case}: R@1 of {}", row.theme);
                ensure!(row.r_at_k == hk[&row.theme] as f64 / s as f64, "case {case}: R@{k} of {}", row.theme);
                ensure!(row.r_at_1 <= row.r_at_k, "case {case}: R@1 > R@{k}");
            }
            let total_hits: usize = hk.values().sum();
            ensure!(
                report.overall.r_at_k == total_hits as f64 / n as f64,
                "case {case}: overall R@{k}"
            );
        }
    }
    Ok("200 instances, k = 1 and 3".into())
}

fn quality_fixtures() -> Outcome {
    let annotations = |not_how: usize, not_what: usize, ok: usize| -> Vec<QualityAnnotation> {
        [(Verdict::NotHow, not_how), (Verdict::NotWhat, not_what), (Verdict::Ok, ok)]
            .into_iter()
            .flat_map(|(v, n)| std::iter::repeat_n(v, n))
            .enumerate()
            .map(|(i, verdict)| QualityAnnotation {
                data_point_id: format!("c{i}"),
                round: 1,
                verdict,
            })
            .collect()
    };
    let close = |got: f64, want: f64| (got - want).abs() <= 0.05;
    for ((nh, nw, ok), want) in [
        ((104, 111, 570), [13.2, 14.1, 72.6, 27.4]),
        ((16, 72, 697), [2.0, 9.2, 88.8, 11.2]),
    ] {
        let t = tally_quality(&annotations(nh, nw, ok)).map_err(|e| e.to_string())?;
        let got = [t.not_how.percent, t.not_what.percent, t.ok.percent, t.not_ok_percent].map(f64::from);
        for (g, w) in got.iter().zip(want) {
            ensure!(close(*g, w), "({nh}, {nw}, {ok}): got {got:?}, want {want:?}");
        }
        ensure!(t.total == 785, "total {}", t.total);
    }
    Ok("both fixtures within 0.05".into())
}

fn feedback_contract() -> Outcome {
    let s = Scenario::golden();
    let tmp = tempfile::tempdir().unwrap();
    let run = open(ingest(tmp.path(), &s), scripted(&s));
    run.code(None, None).map_err(|e| e.to_string())?;
    let feedback = Feedback {
        positive: ["target", "modus operandi", "seriousness", "intent"].map(String::from).to_vec(),
        negative: [
            "multiplicity",
            "degree of completion",
            "co-responsibility",
            "value of stolen goods",
        ]
        .map(String::from)
        .to_vec(),
        exemplars: vec!["vehicle theft with forceful entry and disassembly of vehicles".into()],
    };
    let round = run.feedback(&feedback).map_err(|e| e.to_string())?;
    ensure!(round == 2, "feedback opened round {round}");
    run.code(None, None).map_err(|e| e.to_string())?;
    let prompts: Vec<String> = run
        .store()
        .audit_events()
        .unwrap()
        .into_iter()
        .filter(|e| e.record.stage == Stage::Coding && e.record.round == 2)
        .map(|e| format!("{}\n{}", e.record.system, e.record.user))
        .collect();
    ensure!(!prompts.is_empty(), "no round 2 coding prompts");
    let items: Vec<&String> = feedback.positive.iter().chain(&feedback.negative).chain(&feedback.exemplars).collect();
    for (i, p) in prompts.iter().enumerate() {
        for item in &items {
            ensure!(p.contains(item.as_str()), "round 2 prompt {i} lacks {item:?}");
        }
    }
    Ok(format!("9 items in all {} round 2 coding prompts", prompts.len()))
}

/// Appends half a line to the first stage file that is not complete.
fn tear_open_stage(store: &RunStore) {
    for stage in Stage::ALL {
        let key = StageKey::new(stage, 1);
        if let Some(p) = store.stage_progress(key).unwrap() {
            if !p.is_complete() {
                let path = store.dir().join(format!("{}.jsonl", key.file_stem()));
                let mut bytes = std::fs::read(&path).unwrap();
                bytes.extend_from_slice(br#"{"batch":{"index":"#);
                std::fs::write(&path, bytes).unwrap();
                return;
            }
        }
    }
}

fn committed_batches(store: &RunStore) -> usize {
    Stage::ALL
        .iter()
        .filter_map(|s| store.stage_progress(StageKey::new(*s, 1)).unwrap())
        .map(|p| p.outputs.len())
        .sum()
}

fn crash_resume() -> Outcome {
    let s = Scenario::golden();
    let tmp = tempfile::tempdir().unwrap();
    let reference_dir = tmp.path().join("reference");
    let run = full_run(&reference_dir, &s).map_err(|e| e.to_string())?;
    let total = run.store().audit_events().unwrap().len();
    drop(run);
    let reference = snapshot(&reference_dir);

    for kill_at in 0..total {
        let dir = tmp.path().join(format!("kill-{kill_at}"));
        let store = ingest(&dir, &s);
        let run = open(store, Arc::new(KillSwitch::new(scripted(&s), kill_at)));
        ensure!(drive(&run).is_err(), "kill at call {kill_at} did not interrupt the run");
        let committed = committed_batches(run.store());
        ensure!(committed <= kill_at, "kill at {kill_at}: {committed} batches committed");
        tear_open_stage(run.store());
        drop(run);

        let store = Arc::new(RunStore::open(&dir).map_err(|e| e.to_string())?);
        let counting = Arc::new(Counting::new(scripted(&s)));
        let run = open(store, counting.clone());
        drive(&run).map_err(|e| format!("resume after kill at {kill_at}: {e}"))?;
        ensure!(
            counting.count() == total - committed,
            "kill at {kill_at}: resume made {} calls, expected {}",
            counting.count(),
            total - committed
        );
        drop(run);
        let resumed = snapshot(&dir);
        ensure!(resumed.keys().eq(reference.keys()), "kill at {kill_at}: file sets differ");
        for (name, bytes) in &reference {
            ensure!(resumed[name] == *bytes, "kill at {kill_at}: {name} differs from the uninterrupted run");
        }
    }
    Ok(format!("{total} kill points across all four stages"))
}

fn gold_isolation() -> Outcome {
    let sentinel = "GOLD-SENTINEL-7f3a";
    let s = Scenario::golden().with_gold(|id, _| format!("{sentinel}-{id}"));
    let tmp = tempfile::tempdir().unwrap();
    let run = open(ingest(tmp.path(), &s), scripted(&s));
    drive(&run).map_err(|e| e.to_string())?;
    run.feedback(&Feedback {
        positive: vec!["what was taken".into()],
        ..Feedback::default()
    })
    .map_err(|e| e.to_string())?;
    run.code(None, None).map_err(|e| e.to_string())?;
    let stored = std::fs::read_to_string(tmp.path().join(thematic_core::store::DATASET)).unwrap();
    ensure!(stored.contains(sentinel), "sentinel missing from the stored dataset");
    let audit = run.store().audit_events().unwrap();
    for e in &audit {
        ensure!(
            !e.record.system.contains(sentinel) && !e.record.user.contains(sentinel),
            "sentinel sent in {} round {} batch {}",
            e.record.stage,
            e.record.round,
            e.record.batch
        );
    }
    Ok(format!("{} model requests checked", audit.len()))
}

fn structured_repair() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let s = Scenario::golden();
    let store = Arc::new(RunStore::create(tmp.path(), &s.dataset, s.settings.clone()).map_err(|e| e.to_string())?);
    let schema = Schema::array_of(Schema::object(vec![
        Field::required("id", Schema::NonEmptyString),
        Field::required("code", Schema::NonEmptyString),
    ]));
    let valid = r#"[{"id": "doc-001", "code": "concealed goods"}]"#;
    let script = Script::default()
        .respond("coding:0", ScriptEntry::sequence(["Sure! Here are the codes.", valid]))
        .respond("coding:1", ScriptEntry::sequence(["{not json", "[{\"id\": 3}]", "still not json"]));
    let gateway = Gateway::new(Arc::new(ScriptedBackend::new(script)), Arc::new(HeuristicCounter), store.clone())
        .with_retry(RetryPolicy::immediate());
    let req = CompletionRequest {
        system_message: "system".into(),
        user_message: "user".into(),
        params: GenerationParams::with_max_tokens(200),
    };

    let ok = gateway
        .complete_structured(&req, &CallTag::new(Stage::Coding, 1, 0), &schema)
        .map_err(|e| e.to_string())?;
    ensure!(ok.retry_count == 1, "retry_count {}", ok.retry_count);
    ensure!(ok.value == serde_json::from_str::<Value>(valid).unwrap(), "parsed value differs");

    let err = gateway.complete_structured(&req, &CallTag::new(Stage::Coding, 1, 1), &schema);
    let Err(GatewayError::Structured { attempts, .. }) = err else {
        return Err(format!("expected a structured output error, got {err:?}"));
    };
    ensure!(attempts.len() == 3, "{} attempts", attempts.len());
    let audited: Vec<_> = store
        .audit_events()
        .unwrap()
        .into_iter()
        .filter(|e| e.record.batch == 1)
        .collect();
    ensure!(audited.len() == 3, "{} audit records for the failing call", audited.len());
    for (i, e) in audited.iter().enumerate() {
        ensure!(e.record.repair == i as u32, "record {i} has repair {}", e.record.repair);
        ensure!(e.record.response.as_deref() == Some(attempts[i].as_str()), "record {i} response differs");
        ensure!(
            i == 0 || e.record.user.contains("Reply with only the requested JSON"),
            "repair {i} lacks the corrective message"
        );
    }
    Ok("1 repair recovered, 3 failed attempts audited".into())
}
