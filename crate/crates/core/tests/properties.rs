use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use thematic_core::evaluation::Percent;
use thematic_core::pipeline::interim_sample;
use thematic_core::tokens::{pack_items, truncate_to_fit, TRUNCATION_MARKER};
use thematic_core::*;

fn text() -> impl Strategy<Value = String> {
    "[a-zA-Zéž0-9 .,\n]{0,400}"
}

fn labeled(labels: usize, max_points: usize) -> impl Strategy<Value = Vec<(usize, Vec<usize>)>> {
    let ranking = Just((0..labels).collect::<Vec<_>>()).prop_shuffle();
    prop::collection::vec((0..labels, ranking), 1..max_points)
}

fn instance(rows: &[(usize, Vec<usize>)]) -> (Vec<ThemeAssignment>, BTreeMap<String, String>) {
    let mut gold = BTreeMap::new();
    let assignments = rows
        .iter()
        .enumerate()
        .map(|(i, (g, ranked))| {
            gold.insert(format!("p{i}"), format!("t{g}"));
            ThemeAssignment {
                data_point_id: format!("p{i}"),
                ranked_themes: ranked.iter().map(|r| format!("t{r}")).collect(),
            }
        })
        .collect();
    (assignments, gold)
}

proptest! {
    #[test]
    fn heuristic_count_is_subadditive(a in text(), b in text()) {
        let c = HeuristicCounter;
        let joined = a.clone() + &b;
        prop_assert!(c.count(&joined) <= c.count(&a) + c.count(&b));
        prop_assert_eq!(c.token_spans(&a).len(), c.count(&a));
    }

    #[test]
    fn word_spans_are_ordered_and_disjoint(a in text()) {
        let spans = WordCounter.token_spans(&a);
        for w in spans.windows(2) {
            prop_assert!(w[0].end <= w[1].start);
        }
        prop_assert!(spans.iter().all(|s| s.start < s.end && s.end <= a.len()));
    }

    #[test]
    fn packing_is_a_cost_and_size_bounded_partition(
        texts in prop::collection::vec(text(), 1..30),
        capacity in 8usize..300,
        per_item in 0usize..6,
        words in any::<bool>(),
        cap in prop::option::of(1usize..8),
    ) {
        let counter: &dyn TokenCounter = if words { &WordCounter } else { &HeuristicCounter };
        let mut budget = TokenBudget::with_capacity(capacity, per_item).unwrap();
        budget.max_items = cap;
        prop_assume!(budget.item_limit() > counter.count(TRUNCATION_MARKER));
        let items: Vec<(String, String)> =
            texts.iter().enumerate().map(|(i, t)| (format!("d{i}"), t.clone())).collect();
        let batches = pack_items(items.clone(), &budget, counter).unwrap();
        let mut ids = Vec::new();
        for b in &batches {
            prop_assert!(b.cost(counter, per_item) <= capacity);
            prop_assert!(b.items.len() <= cap.unwrap_or(usize::MAX));
            ids.extend(b.ids());
        }
        ids.sort();
        let mut expected: Vec<String> = items.into_iter().map(|(i, _)| i).collect();
        expected.sort();
        prop_assert_eq!(ids, expected);
    }

    #[test]
    fn truncation_is_idempotent(t in text(), limit in 3usize..60) {
        let once = truncate_to_fit(&HeuristicCounter, &t, limit).unwrap();
        let twice = truncate_to_fit(&HeuristicCounter, &once, limit).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn recall_at_one_never_exceeds_recall_at_k(rows in labeled(5, 40), k in 1usize..=5) {
        let (assignments, gold) = instance(&rows);
        let r = recall_at_k(&assignments, &gold, k, None).unwrap();
        prop_assert!(r.overall.r_at_1 <= r.overall.r_at_k);
        for row in &r.per_theme {
            prop_assert!(row.hits_at_1 <= row.hits_at_k && row.hits_at_k <= row.support);
        }
        let support: usize = r.per_theme.iter().map(|row| row.support).sum();
        prop_assert_eq!(support, gold.len());
        if k == 5 {
            prop_assert_eq!(r.overall.r_at_k, 1.0);
        }
    }

    #[test]
    fn recall_ignores_assignment_order(rows in labeled(4, 30), seed in any::<u64>()) {
        let (mut assignments, gold) = instance(&rows);
        let before = recall_at_k(&assignments, &gold, 3, None).unwrap();
        let n = assignments.len();
        for i in (1..n).rev() {
            assignments.swap(i, (seed as usize).wrapping_mul(i + 7) % (i + 1));
        }
        prop_assert_eq!(recall_at_k(&assignments, &gold, 3, None).unwrap(), before);
    }

    #[test]
    fn mapping_rows_sum_to_gold_support(rows in labeled(6, 50)) {
        let (assignments, gold) = instance(&rows);
        let m = theme_mapping(&assignments, &gold).unwrap();
        let mut support: BTreeMap<&String, usize> = BTreeMap::new();
        for g in gold.values() {
            *support.entry(g).or_default() += 1;
        }
        prop_assert_eq!(m.row_sums(), support.values().copied().collect::<Vec<_>>());
        prop_assert_eq!(m.total(), gold.len());
        let weights: usize = m.flows().iter().map(|f| f.weight).sum();
        prop_assert_eq!(weights, gold.len());
    }

    #[test]
    fn tally_percentages_round_half_up(not_how in 0usize..900, not_what in 0usize..900, ok in 0usize..900) {
        let t = QualityTally::from_counts(not_how, not_what, ok);
        let total = not_how + not_what + ok;
        prop_assume!(total > 0);
        for (count, p) in [(not_how, t.not_how.percent), (not_what, t.not_what.percent), (ok, t.ok.percent)] {
            let exact = 100.0 * count as f64 / total as f64;
            prop_assert!((p.value() - exact).abs() <= 0.05 + 1e-9, "{} vs {exact}", p.value());
        }
        prop_assert_eq!(t.ok.percent.0 + t.not_ok_percent.0, 1000);
        prop_assert_eq!(Percent::of(total, total).0, 1000);
    }

    #[test]
    fn feedback_only_extends_the_context(
        positive in prop::collection::vec("[a-z ]{0,12}", 0..5),
        negative in prop::collection::vec("[a-z ]{0,12}", 0..5),
        exemplars in prop::collection::vec("[a-z ]{0,12}", 0..3),
    ) {
        let ctx = AnalysisContext::new(vec!["q".into()]).unwrap();
        let fb = Feedback { positive, negative, exemplars };
        match apply_feedback(&ctx, &fb) {
            Ok(next) => {
                prop_assert!(next.extends(&ctx));
                prop_assert_eq!(&next.research_questions, &ctx.research_questions);
                let added = next.custom_requirements.len() + next.positive_exemplars.len();
                let nonblank = fb.positive.iter().chain(&fb.negative).chain(&fb.exemplars)
                    .filter(|s| !s.trim().is_empty()).count();
                prop_assert_eq!(added, nonblank);
            }
            Err(_) => prop_assert!(fb.is_empty()),
        }
    }

    #[test]
    fn interim_sample_is_an_ordered_subset(n in 0usize..60, size in 0usize..30, seed in any::<u64>(), batch in 0usize..20) {
        let codes: Vec<InitialCode> = (0..n)
            .map(|i| InitialCode { data_point_id: format!("d{i}"), code_text: format!("code {i}"), round: 1 })
            .collect();
        let a = interim_sample(&codes, size, seed, 1, batch);
        prop_assert_eq!(a.len(), size.min(n));
        let positions: Vec<usize> = a.iter().map(|c| codes.iter().position(|x| x == c).unwrap()).collect();
        prop_assert!(positions.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(a, interim_sample(&codes, size, seed, 1, batch));
    }

    #[test]
    fn label_key_is_idempotent(label in "[ a-zA-ZÉéž\t]{0,20}") {
        let k = label_key(&label);
        prop_assert_eq!(label_key(&k), k.clone());
        prop_assert_eq!(label_key(&label.to_uppercase()), label_key(&label.to_lowercase()));
    }

    #[test]
    fn dataset_jsonl_round_trip(texts in prop::collection::vec("[a-z][a-z \"\\\\é\n]{0,40}", 1..10)) {
        let points: Vec<DataPoint> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| DataPoint { id: format!("x-{i}"), text: t.clone(), gold_theme: (i % 2 == 0).then(|| "g".to_string()) })
            .collect();
        let ds = Dataset::new("d", points).unwrap();
        let back = parse_dataset("d", ds.to_jsonl().as_bytes()).unwrap();
        prop_assert_eq!(back.points(), ds.points());
        let ids: BTreeSet<&str> = back.ids().collect();
        prop_assert_eq!(ids.len(), texts.len());
    }
}
