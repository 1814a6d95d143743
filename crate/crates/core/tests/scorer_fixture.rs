//! Span scorer against counts frozen from a conlleval-compatible reference
//! (seqeval) on a fixture with malformed predicted sequences.

use std::path::Path;

use gti_core::eval::{micro_f1, EvalReport};

fn load() -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/scorer_5.txt");
    let text = std::fs::read_to_string(path).unwrap();
    let (mut gold, mut pred) = (Vec::new(), Vec::new());
    for block in text.split("\n\n").filter(|b| !b.trim().is_empty()) {
        let rows: Vec<Vec<&str>> = block.lines().map(|l| l.split_whitespace().collect()).collect();
        gold.push(rows.iter().map(|r| r[1].to_string()).collect());
        pred.push(rows.iter().map(|r| r[2].to_string()).collect());
    }
    (gold, pred)
}

fn report() -> EvalReport {
    let (gold, pred) = load();
    micro_f1(&gold, &pred).unwrap()
}

#[test]
fn fixture_has_five_sentences() {
    assert_eq!(load().0.len(), 5);
}

#[test]
fn overall_counts_and_rates() {
    let r = report();
    assert_eq!((r.overall.gold, r.overall.predicted, r.overall.correct), (11, 14, 10));
    assert!((r.precision() - 10.0 / 14.0).abs() < 1e-12);
    assert!((r.recall() - 10.0 / 11.0).abs() < 1e-12);
    assert!((r.f1() - 0.8).abs() < 1e-12);
}

#[test]
fn per_type_counts() {
    let r = report();
    let want = [("LOC", 4, 5, 4), ("MISC", 3, 4, 3), ("ORG", 2, 2, 1), ("PER", 2, 3, 2)];
    assert_eq!(r.per_type.len(), want.len());
    for (ty, g, p, c) in want {
        let got = r.per_type[ty];
        assert_eq!((got.gold, got.predicted, got.correct), (g, p, c), "{ty}");
    }
}

#[test]
fn report_text_round_trips() {
    let r = report();
    let back = EvalReport::from_kv(&r.to_kv()).unwrap();
    assert_eq!(back, r);
}

#[test]
fn perfect_prediction_scores_one() {
    let (gold, _) = load();
    let r = micro_f1(&gold, &gold).unwrap();
    assert_eq!(r.f1(), 1.0);
    assert_eq!(r.token_accuracy(), 1.0);
}
