mod common;

use std::sync::Arc;

use common::{drive, ingest, open, scripted, snapshot, Counting, KillSwitch};
use thematic_core::pipeline::StageKey;
use thematic_core::store::ThemeStatus;
use thematic_core::synthetic::Scenario;
use thematic_core::*;

#[test]
fn kill_after_collation_resumes_at_merge() {
    let s = Scenario::golden();
    let tmp = tempfile::tempdir().unwrap();
    let reference = tmp.path().join("reference");
    drive(&open(ingest(&reference, &s), scripted(&s))).unwrap();

    let dir = tmp.path().join("killed");
    let calls_through_collation = 4 + 7;
    let run = open(ingest(&dir, &s), Arc::new(KillSwitch::new(scripted(&s), calls_through_collation)));
    assert!(drive(&run).is_err());
    assert!(run.view().collation(1).unwrap().is_some());
    assert!(run.store().approved_themes().unwrap().is_none());
    drop(run);

    let counting = Arc::new(Counting::new(scripted(&s)));
    let run = open(Arc::new(RunStore::open(&dir).unwrap()), counting.clone());
    let before = run.store().audit_events().unwrap().len();
    drive(&run).unwrap();
    let resumed: Vec<Stage> = run.store().audit_events().unwrap()[before..]
        .iter()
        .map(|e| e.record.stage)
        .collect();
    assert!(resumed.iter().all(|s| matches!(s, Stage::Merge | Stage::Classification)), "{resumed:?}");
    assert_eq!(counting.count(), 1 + 8);
    drop(run);
    assert_eq!(snapshot(&dir), snapshot(&reference));
}

#[test]
fn reader_sees_committed_batches_while_a_writer_holds_the_lock() {
    let s = Scenario::golden();
    let tmp = tempfile::tempdir().unwrap();
    let run = open(ingest(tmp.path(), &s), Arc::new(KillSwitch::new(scripted(&s), 2)));
    assert!(run.code(None, None).is_err());
    assert!(matches!(RunStore::open(tmp.path()), Err(StoreError::Locked(_))));
    let reader = RunStore::open_read(tmp.path()).unwrap();
    let p = reader.stage_progress(StageKey::new(Stage::Coding, 1)).unwrap().unwrap();
    assert_eq!((p.outputs.len(), p.plan.batches.len()), (2, 4));
    assert!(matches!(reader.log_event("x", serde_json::json!({})), Err(StoreError::ReadOnly(_))));
}

#[test]
fn classification_waits_for_approval() {
    let s = Scenario::golden();
    let tmp = tempfile::tempdir().unwrap();
    let run = open(ingest(tmp.path(), &s), scripted(&s));
    run.code(None, None).unwrap();
    run.collate(None).unwrap();
    run.merge(None).unwrap();
    assert!(matches!(run.classify(None, None, false), Err(RunError::ThemesUnapproved)));
    assert_eq!(run.classify(None, None, true).unwrap().len(), 30);
    let record = run.approve_themes(None).unwrap();
    assert_eq!(record.status, ThemeStatus::Approved);
    assert!(!record.edited);
}

#[test]
fn edited_approval_is_recorded_and_used() {
    let s = Scenario::golden();
    let tmp = tempfile::tempdir().unwrap();
    let run = open(ingest(tmp.path(), &s), scripted(&s));
    run.code(None, None).unwrap();
    run.collate(None).unwrap();
    let mut set = run.merge(None).unwrap();
    set.themes[2].label = "vehicle theft".into();
    let record = run.approve_themes(Some(set.clone())).unwrap();
    assert!(record.edited);
    assert_eq!(run.store().approved_themes().unwrap().unwrap().themes, set);

    // The script answers with the planted spelling; labels match by key.
    let assignments = run.classify(Some(1), None, false).unwrap();
    assert!(assignments.iter().any(|a| a.ranked_themes == ["vehicle theft"]));
    let dup = ThemeSet::flat(&["A".into(), "a ".into()]);
    assert!(matches!(run.approve_themes(Some(dup)), Err(RunError::Validation(_))));
}

#[test]
fn evaluation_report_covers_recall_quality_and_mapping() {
    let s = Scenario::golden();
    let tmp = tempfile::tempdir().unwrap();
    let run = open(ingest(tmp.path(), &s), scripted(&s));
    drive(&run).unwrap();
    let codes = run.view().codes(1).unwrap();
    assert_eq!(codes.first().unwrap().data_point_id, "doc-001");
    let annotations: Vec<QualityAnnotation> = codes
        .iter()
        .enumerate()
        .map(|(i, c)| QualityAnnotation {
            data_point_id: c.data_point_id.clone(),
            round: 1,
            verdict: [Verdict::Ok, Verdict::Ok, Verdict::NotHow][i % 3],
        })
        .collect();
    run.store().append_annotations(&annotations).unwrap();
    assert!(run.store().append_annotations(&annotations[..1]).is_err());

    let report = run.view().evaluate(3).unwrap();
    let tally = report.quality[&1];
    assert_eq!((tally.ok.count, tally.not_how.count, tally.total), (20, 10, 30));
    assert_eq!(tally.ok.percent.to_string(), "66.7");
    let mapping = report.mapping.clone().unwrap();
    assert_eq!(mapping.rows, mapping.columns);
    assert_eq!(mapping.total(), 30);
    let text = report.to_text();
    assert!(text.contains("Recall (k = 3)"));
    assert!(text.contains("66.7"));
}

#[test]
fn second_round_codes_are_kept_apart() {
    let s = Scenario::golden();
    let tmp = tempfile::tempdir().unwrap();
    let run = open(ingest(tmp.path(), &s), scripted(&s));
    run.code(None, None).unwrap();
    let round = run
        .feedback(&Feedback {
            negative: vec!["the place".into()],
            ..Feedback::default()
        })
        .unwrap();
    assert_eq!(round, 2);
    assert!(run.feedback(&Feedback::default()).is_err());
    let second = run.code(None, None).unwrap();
    assert!(second.iter().all(|c| c.round == 2));
    assert_eq!(run.view().latest_coded_round().unwrap(), Some(2));
    assert_eq!(run.store().stage_rounds(Stage::Coding).unwrap(), vec![1, 2]);
    let ctx = run.store().context(2).unwrap().unwrap();
    assert!(ctx.extends(&run.store().context(1).unwrap().unwrap()));
    assert_eq!(ctx.custom_requirements.last().unwrap(), "do not encode: the place");
}
