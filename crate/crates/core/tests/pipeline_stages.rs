use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde_json::{json, Value};
use thematic_core::gateway::{IdTable, MemoryAudit, Script, ScriptEntry, ScriptedBackend};
use thematic_core::synthetic::Scenario;
use thematic_core::tokens::pack_items;
use thematic_core::*;

fn pipeline(script: Script, settings: &RunSettings) -> (Pipeline, Arc<MemoryAudit>) {
    let audit = Arc::new(MemoryAudit::new());
    let gateway = Gateway::new(
        Arc::new(ScriptedBackend::new(script)),
        settings.tokenizer.counter(),
        audit.clone(),
    )
    .with_retry(RetryPolicy::immediate());
    (Pipeline::new(gateway, settings.prompt_builder().unwrap()), audit)
}

fn context() -> AnalysisContext {
    AnalysisContext::new(vec!["What happened?".into()]).unwrap()
}

fn table(field: &str, values: BTreeMap<String, Value>) -> IdTable {
    IdTable {
        field: field.into(),
        values,
        template: None,
    }
}

fn code(id: &str, text: &str) -> InitialCode {
    InitialCode {
        data_point_id: id.into(),
        code_text: text.into(),
        round: 1,
    }
}

/// Lines listed under `header` in `message`, up to the next blank line.
fn listed_under(message: &str, header: &str) -> Vec<String> {
    let Some(start) = message.find(header) else {
        return Vec::new();
    };
    message[start + header.len()..]
        .lines()
        .skip(1)
        .take_while(|l| !l.is_empty())
        .map(|l| l.trim_start_matches("- ").to_string())
        .collect()
}

#[test]
fn collation_carries_the_twenty_most_frequent_candidates() {
    let mut settings = RunSettings::default();
    settings.params.collation.context_limit = 4000;
    settings.params.collation.max_tokens = 1500;
    let (p, _) = pipeline(Script::default(), &settings);
    let ctx = context();
    let codes: Vec<InitialCode> = (0..200).map(|i| code(&format!("c{i:03}"), &format!("initial code number {i:03}"))).collect();

    let budget = p
        .prompts()
        .collation_budget(&ctx, codes.iter().map(|c| c.data_point_id.as_str()))
        .unwrap();
    let plan = pack_items(
        codes.iter().map(|c| (c.data_point_id.clone(), c.code_text.clone())),
        &budget,
        p.prompts().counter().as_ref(),
    )
    .unwrap();
    assert!(plan.len() >= 2, "need two batches, got {}", plan.len());
    assert!(plan[0].items.len() >= 25);

    // 25 distinct candidates in the first batch with uneven frequencies.
    let mut labels = BTreeMap::new();
    for (i, item) in plan[0].items.iter().enumerate() {
        labels.insert(item.id.clone(), json!(format!("candidate {:02}", if i < 25 { i } else { i % 5 })));
    }
    for b in &plan[1..] {
        for item in &b.items {
            labels.insert(item.id.clone(), json!("late candidate"));
        }
    }
    let first_batch: Vec<String> = plan[0].items.iter().map(|i| labels[&i.id].as_str().unwrap().to_string()).collect();
    let distinct: BTreeSet<&String> = first_batch.iter().collect();
    assert!(distinct.len() >= 25, "{} distinct candidates", distinct.len());

    let script = Script::default().table("collation", table("theme", labels));
    let (p, audit) = pipeline(script, &settings);
    let collation = p.run_code_collation(&codes, &ctx, 1).unwrap();
    assert_eq!(collation.candidate_of.len(), 200);

    let mut freq: BTreeMap<&String, usize> = BTreeMap::new();
    for l in &first_batch {
        *freq.entry(l).or_default() += 1;
    }
    let mut expected: Vec<(&String, usize)> = freq.into_iter().collect();
    expected.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let expected: Vec<String> = expected.into_iter().take(20).map(|(l, _)| l.clone()).collect();

    let events = audit.events();
    let second = events
        .iter()
        .find(|e| e.record.stage == Stage::Collation && e.record.batch == 1)
        .expect("second collation batch");
    assert_eq!(listed_under(&second.record.user, "Most common potential themes so far:"), expected);
    let first = events.iter().find(|e| e.record.batch == 0).unwrap();
    assert!(listed_under(&first.record.user, "Most common potential themes so far:").is_empty());
}

fn thirty_candidates() -> Vec<(String, usize)> {
    (0..30).map(|i| (format!("candidate {i:02}"), 30 - i)).collect()
}

fn eight_groups(groups: usize) -> Value {
    let mut rows = Vec::new();
    for g in 0..groups {
        let subs: Vec<String> = (0..30).filter(|i| i % groups == g).map(|i| format!("candidate {i:02}")).collect();
        rows.push(json!({"theme": format!("Theme {g}"), "sub_themes": subs}));
    }
    Value::Array(rows)
}

#[test]
fn merge_reduces_thirty_candidates_to_eight_themes() {
    let settings = RunSettings::default();
    let script = Script::default().respond("merge", ScriptEntry::text(eight_groups(8).to_string()));
    let (p, audit) = pipeline(script, &settings);
    let set = p.run_theme_merge(&thirty_candidates(), &context(), 1).unwrap();
    assert_eq!(set.len(), 8);
    let covered: BTreeSet<String> = set.themes.iter().flat_map(|t| t.sub_themes.clone()).collect();
    let all: BTreeSet<String> = thirty_candidates().into_iter().map(|(l, _)| l).collect();
    assert_eq!(covered, all);
    let user = &audit.events()[0].record.user;
    assert!(user.contains("- candidate 00 (30)"));
    assert!(user.contains("- candidate 29 (1)"));
}

#[test]
fn merge_over_the_theme_limit_is_reprompted_once() {
    let mut settings = RunSettings::default();
    settings.limits.max_themes = 8;
    let script = Script::default().respond(
        "merge",
        ScriptEntry::sequence([eight_groups(10).to_string(), eight_groups(8).to_string()]),
    );
    let (p, audit) = pipeline(script, &settings);
    let set = p.run_theme_merge(&thirty_candidates(), &context(), 1).unwrap();
    assert_eq!(set.len(), 8);
    let events = audit.events();
    assert_eq!(events.len(), 2);
    assert!(events[1].record.user.contains("at most 8"));

    let script = Script::default().respond("merge", ScriptEntry::text(eight_groups(10).to_string()));
    let (p, _) = pipeline(script, &settings);
    let err = p.run_theme_merge(&thirty_candidates(), &context(), 1).unwrap_err();
    assert!(matches!(err, PipelineError::InvalidOutput { .. }), "{err}");
}

#[test]
fn merge_must_partition_the_candidates() {
    let settings = RunSettings::default();
    let mut rows = eight_groups(8);
    rows[0]["sub_themes"].as_array_mut().unwrap().pop();
    let script = Script::default().respond("merge", ScriptEntry::text(rows.to_string()));
    let (p, audit) = pipeline(script, &settings);
    let err = p.run_theme_merge(&thirty_candidates(), &context(), 1).unwrap_err();
    assert!(matches!(err, PipelineError::InvalidOutput { .. }), "{err}");
    assert_eq!(audit.events().len(), 2);
}

#[test]
fn classification_against_eight_themes_maps_fourteen_gold_themes() {
    let gold_labels: Vec<String> = (0..14).map(|i| format!("gold {i:02}")).collect();
    let themes: Vec<String> = (0..8).map(|i| format!("Theme {i}")).collect();
    let mut points = Vec::new();
    let mut ranks = BTreeMap::new();
    for i in 0..112 {
        let id = format!("p{i:03}");
        let g = i % 14;
        points.push(DataPoint {
            id: id.clone(),
            text: format!("Record {i}: a short description of an event."),
            gold_theme: Some(gold_labels[g].clone()),
        });
        let ranked: Vec<&String> = (0..3).map(|r| &themes[(g + i / 14 + r) % 8]).collect();
        ranks.insert(id, json!(ranked));
    }
    let ds = Dataset::new("fourteen", points).unwrap();
    let script = Script::default().table("classification", table("themes", ranks));
    let (p, _) = pipeline(script, &RunSettings::default());
    let assignments = p.run_classification(&ds, &themes, 3, 4, 1).unwrap();
    assert_eq!(assignments.len(), 112);
    assert!(assignments.iter().all(|a| a.ranked_themes.len() == 3));

    let gold = ds.gold();
    let m = theme_mapping(&assignments, &gold).unwrap();
    assert_eq!((m.rows.len(), m.columns.len()), (14, 8));
    assert_eq!(m.total(), 112);
    assert!(m.row_sums().iter().all(|s| *s == 8));
    let r = recall_at_k(&assignments, &gold, 3, None).unwrap();
    assert_eq!(r.per_theme.len(), 14);
    assert_eq!(r.overall.r_at_1, 0.0);
}

#[test]
fn classification_k1_asks_for_one_label() {
    let s = Scenario::golden();
    let (p, audit) = pipeline(s.script(), &s.settings);
    let assignments = p.run_classification(&s.dataset, &s.themes, 1, 2, 1).unwrap();
    assert!(assignments.iter().all(|a| a.ranked_themes.len() == 1));
    assert!(audit.events()[0].record.user.contains("exactly one theme label"));
    let r = recall_at_k(&assignments, &s.dataset.gold(), 1, Some(&s.themes)).unwrap();
    assert_eq!(r.overall.r_at_1, 1.0);
}

#[test]
fn end_to_end_in_memory_recovers_planted_themes() {
    let s = Scenario::golden();
    let (p, _) = pipeline(s.script(), &s.settings);
    let (themes, assignments) = p.run_end_to_end(&s.dataset, &s.context, 7, 3, 4).unwrap();
    assert_eq!(themes.labels(), s.themes);
    let r = recall_at_k(&assignments, &s.dataset.gold(), 3, Some(&s.themes)).unwrap();
    assert_eq!((r.overall.r_at_1, r.overall.r_at_k), (1.0, 1.0));

    let (p1, _) = pipeline(s.script(), &s.settings);
    let (_, sequential) = p1.run_end_to_end(&s.dataset, &s.context, 7, 3, 1).unwrap();
    assert_eq!(sequential, assignments);
}

#[test]
fn coding_prompts_are_reproducible() {
    let s = Scenario::golden();
    let prompts = |_: ()| {
        let (p, audit) = pipeline(s.script(), &s.settings);
        p.run_initial_coding(&s.dataset, &s.context, 1, 7).unwrap();
        audit.events().into_iter().map(|e| e.record.user).collect::<Vec<_>>()
    };
    assert_eq!(prompts(()), prompts(()));
}

#[test]
fn misses_lower_recall_at_one_only() {
    let s = Scenario::golden();
    let misses = ["doc-001", "doc-002", "doc-003"];
    let (p, _) = pipeline(s.script_with_misses(&misses), &s.settings);
    let assignments = p.run_classification(&s.dataset, &s.themes, 3, 4, 1).unwrap();
    let r = recall_at_k(&assignments, &s.dataset.gold(), 3, Some(&s.themes)).unwrap();
    assert_eq!(r.overall.hits_at_1, 27);
    assert_eq!(r.overall.hits_at_k, 30);
    for row in &r.per_theme {
        assert_eq!((row.support, row.hits_at_1), (10, 9));
    }
}
