use proptest::prelude::*;

use spanfix_core::analytics::{average_ranks, pearson, spearman};
use spanfix_core::markup::{escape_text, parse_marked, serialize_marked};
use spanfix_core::metrics::{chrf, levenshtein_similarity, ChrfParams};
use spanfix_core::model::{char_len, validate_spans, ErrorSpan, Severity};
use spanfix_core::parser::{parse_output_lenient, unescape_entities};
use spanfix_core::prompting::render_output;
use spanfix_core::router::{mean_routed_objective, tune_on_scores, ItemScores};
use spanfix_core::run::fix_rate;

const ALPHABET: &[char] = &[
    'a', 'b', 'Z', ' ', '<', '>', '&', ';', '"', '\'', '汉', '字', 'ש', 'ל', 'ö', '\u{301}', '🙂', '\n',
];

fn text_strategy(max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(ALPHABET), 0..max).prop_map(|v| v.into_iter().collect())
}

fn severity() -> impl Strategy<Value = Severity> {
    prop::sample::select(vec![Severity::Minor, Severity::Major, Severity::Critical])
}

/// Random text plus sorted, non-overlapping, non-empty spans over it.
fn text_and_spans() -> impl Strategy<Value = (String, Vec<ErrorSpan>)> {
    text_strategy(40)
        .prop_flat_map(|text| {
            let len = char_len(&text);
            let cuts = prop::collection::btree_set(0..=len, 0..=len.min(8));
            (Just(text), cuts, prop::collection::vec(severity(), 8))
        })
        .prop_map(|(text, cuts, sevs)| {
            let cuts: Vec<usize> = cuts.into_iter().collect();
            let spans = cuts
                .chunks_exact(2)
                .zip(sevs)
                .filter(|(c, _)| c[0] < c[1])
                .map(|(c, sev)| ErrorSpan::over(&text, c[0], c[1], sev).unwrap())
                .collect();
            (text, spans)
        })
}

fn strip_tags(marked: &str) -> String {
    let mut out = String::new();
    let mut in_tag = false;
    for c in marked.chars() {
        match c {
            '<' => in_tag = true,
            '>' if in_tag => in_tag = false,
            c if !in_tag => out.push(c),
            _ => {}
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn markup_round_trips((text, spans) in text_and_spans()) {
        prop_assert!(validate_spans(&text, &spans).is_empty());
        let marked = serialize_marked(&text, &spans).unwrap();
        let parsed = parse_marked(marked.as_str()).unwrap();
        prop_assert_eq!(&parsed.translation, &text);
        prop_assert_eq!(&parsed.spans, &spans);
        prop_assert!(parsed.diagnostics.is_empty());
        prop_assert_eq!(unescape_entities(&strip_tags(marked.as_str())), text);
    }

    #[test]
    fn escape_then_unescape_is_identity(text in text_strategy(60)) {
        let mut escaped = String::new();
        escape_text(&text, &mut escaped);
        prop_assert_eq!(unescape_entities(&escaped), text);
    }

    #[test]
    fn levenshtein_is_symmetric(a in text_strategy(20), b in text_strategy(20)) {
        let ab = levenshtein_similarity(&a, &b);
        prop_assert_eq!(ab, levenshtein_similarity(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab == 1.0, a == b);
    }

    #[test]
    fn levenshtein_triangle_on_equal_lengths(
        v in prop::collection::vec((prop::sample::select(ALPHABET), prop::sample::select(ALPHABET), prop::sample::select(ALPHABET)), 1..16)
    ) {
        let a: String = v.iter().map(|t| t.0).collect();
        let b: String = v.iter().map(|t| t.1).collect();
        let c: String = v.iter().map(|t| t.2).collect();
        let n = v.len() as f64;
        let d_ab = (1.0 - levenshtein_similarity(&a, &b)) * n;
        let diff = (levenshtein_similarity(&a, &c) - levenshtein_similarity(&b, &c)).abs();
        prop_assert!(diff <= d_ab / n + 1e-12);
    }

    #[test]
    fn chrf_self_is_perfect(x in text_strategy(30)) {
        prop_assume!(x.chars().any(|c| !c.is_whitespace()));
        prop_assert_eq!(chrf(&x, &x, &ChrfParams::default()), 100.0);
        let padded = format!("  {x}\t ");
        prop_assert_eq!(chrf(&padded, &x, &ChrfParams::default()), chrf(&x, &x, &ChrfParams::default()));
    }

    #[test]
    fn spearman_without_ties_is_pearson_on_ranks(v in prop::collection::btree_set(-1000i32..1000, 3..30), w in prop::collection::btree_set(-1000i32..1000, 3..30)) {
        let n = v.len().min(w.len());
        let x: Vec<f64> = v.iter().take(n).map(|&a| f64::from(a)).collect();
        // Reverse order on one side so the pairing is non-trivial.
        let y: Vec<f64> = w.iter().rev().take(n).map(|&a| f64::from(a)).collect();
        prop_assert_eq!(spearman(&x, &y), pearson(&average_ranks(&x), &average_ranks(&y)));
    }

    #[test]
    fn parser_never_panics_and_preserves_raw(raw in "(?s)[a-zA-Z0-9 :*_\\-\\n]{0,200}", expected in 0usize..5) {
        let report = parse_output_lenient(&raw, expected);
        prop_assert_eq!(&report.raw, &raw);
    }

    #[test]
    fn tuned_tau_beats_always_compare(rows in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..40)) {
        let scores: Vec<ItemScores> = rows.iter().map(|&(a, b, c, d)| ItemScores {
            m_original: a, m_correction: b, objective_original: c, objective_correction: d,
        }).collect();
        let best = tune_on_scores(&scores).unwrap();
        prop_assert!(best.objective_mean >= mean_routed_objective(&scores, f64::INFINITY));
        prop_assert!(best.objective_mean >= mean_routed_objective(&scores, f64::NEG_INFINITY));
    }
}

#[test]
fn demo_output_renders_losslessly() {
    let explanations = vec![
        "First explanation.".to_string(),
        "Second one, with \"quotes\".".to_string(),
    ];
    let rendered = render_output(&explanations, "Korrigierte Übersetzung.");
    let report = parse_output_lenient(&rendered, 2);
    assert!(report.diagnostics.is_empty());
    let again: Vec<String> = report.explanations.values().cloned().collect();
    assert_eq!(render_output(&again, report.correction.as_deref().unwrap()), rendered);
}

#[test]
fn fix_rate_hand_counted_fixture() {
    use spanfix_core::run::{DetectionResult, PipelineRun};
    use std::collections::BTreeMap;
    // Ten spans over four runs; fixed spans marked by hand below.
    type Case<'a> = (&'a str, &'a [(usize, usize)], &'a str);
    let cases: [Case<'_>; 4] = [
        // "Der Hund bellt laut." spans "Hund"(fixed), "laut"(not fixed)
        ("Der Hund bellt laut.", &[(4, 8), (15, 19)], "Die Katze bellt laut."),
        // "ab ab ab" spans each "ab": count 3 -> 2, all three fixed
        ("ab ab ab", &[(0, 2), (3, 5), (6, 8)], "ab ab"),
        // casing: "Haus" -> "haus" fixed; "Baum" unchanged not fixed
        ("Haus und Baum", &[(0, 4), (9, 13)], "haus und Baum"),
        // three spans, only "xyz" removed
        ("xyz qq rr", &[(0, 3), (4, 6), (7, 9)], "qq rr"),
    ];
    let runs: Vec<PipelineRun> = cases
        .iter()
        .map(|(mt, spans, corr)| PipelineRun {
            sample_id: mt.to_string(),
            translation: mt.to_string(),
            detection: Some(DetectionResult {
                spans: spans
                    .iter()
                    .map(|&(s, e)| ErrorSpan::over(mt, s, e, Severity::Minor).unwrap())
                    .collect(),
                score: None,
                provenance: "fixture".into(),
                source_tag: "human".into(),
            }),
            quality: None,
            prompt: None,
            report: Some(spanfix_core::ExplanationReport {
                explanations: BTreeMap::new(),
                correction: Some(corr.to_string()),
                raw: String::new(),
                diagnostics: vec![],
            }),
            failure: None,
            timings: Default::default(),
        })
        .collect();
    // fixed: 1 + 3 + 1 + 1 = 6 of 10
    assert_eq!(fix_rate(&runs).unwrap(), 0.6);
}
