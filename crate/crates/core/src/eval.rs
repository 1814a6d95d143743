//! Span-level micro-averaged precision/recall/F1 with conlleval chunk
//! semantics, plus token accuracy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::data::scheme::{split_tag, Prefix};
use crate::error::{GtiError, Result};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub label: String,
    /// Inclusive token bounds.
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(label: &str, start: usize, end: usize) -> Self {
        Span {
            label: label.to_string(),
            start,
            end,
        }
    }
}

fn chunk_ends(prev: Prefix, tag: Prefix, prev_ty: &str, ty: &str) -> bool {
    matches!(prev, Prefix::E | Prefix::S)
        || (matches!(prev, Prefix::B | Prefix::I) && matches!(tag, Prefix::B | Prefix::S | Prefix::O))
        || (prev != Prefix::O && prev_ty != ty)
}

fn chunk_starts(prev: Prefix, tag: Prefix, prev_ty: &str, ty: &str) -> bool {
    matches!(tag, Prefix::B | Prefix::S)
        || (matches!(prev, Prefix::E | Prefix::S | Prefix::O) && matches!(tag, Prefix::E | Prefix::I))
        || (tag != Prefix::O && prev_ty != ty)
}

/// Extracts spans from IOBES (or IOB) tags. Ill-formed runs are closed and
/// reopened the way the conlleval scorer does, so every input yields a
/// deterministic, non-overlapping span set.
pub fn spans_from_tags<S: AsRef<str>>(tags: &[S]) -> Result<BTreeSet<Span>> {
    let mut spans = BTreeSet::new();
    let mut open: Option<(String, usize)> = None;
    let (mut prev, mut prev_ty) = (Prefix::O, String::new());
    for (i, tag) in tags.iter().enumerate() {
        let (p, ty) = split_tag(tag.as_ref())?;
        if open.is_some() && chunk_ends(prev, p, &prev_ty, ty) {
            let (label, s) = open.take().expect("checked");
            spans.insert(Span {
                label,
                start: s,
                end: i - 1,
            });
        }
        if chunk_starts(prev, p, &prev_ty, ty) {
            open = Some((ty.to_string(), i));
        }
        prev = p;
        prev_ty = ty.to_string();
    }
    if let Some((label, s)) = open {
        spans.insert(Span {
            label,
            start: s,
            end: tags.len() - 1,
        });
    }
    Ok(spans)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.gold)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn add(&mut self, other: Counts) {
        self.gold += other.gold;
        self.predicted += other.predicted;
        self.correct += other.correct;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub overall: Counts,
    pub per_type: BTreeMap<String, Counts>,
    pub tokens: usize,
    pub correct_tokens: usize,
}

impl EvalReport {
    pub fn precision(&self) -> f64 {
        self.overall.precision()
    }

    pub fn recall(&self) -> f64 {
        self.overall.recall()
    }

    pub fn f1(&self) -> f64 {
        self.overall.f1()
    }

    pub fn token_accuracy(&self) -> f64 {
        ratio(self.correct_tokens, self.tokens)
    }

    /// Headline number: F1 for span tasks, accuracy otherwise.
    pub fn score(&self, span: bool) -> f64 {
        if span {
            self.f1()
        } else {
            self.token_accuracy()
        }
    }

    /// Machine-readable `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        line("gold", self.overall.gold.to_string());
        line("predicted", self.overall.predicted.to_string());
        line("correct", self.overall.correct.to_string());
        line("precision", self.precision().to_string());
        line("recall", self.recall().to_string());
        line("f1", self.f1().to_string());
        line("tokens", self.tokens.to_string());
        line("correct_tokens", self.correct_tokens.to_string());
        line("token_accuracy", self.token_accuracy().to_string());
        for (ty, c) in &self.per_type {
            line(&format!("type.{ty}.gold"), c.gold.to_string());
            line(&format!("type.{ty}.predicted"), c.predicted.to_string());
            line(&format!("type.{ty}.correct"), c.correct.to_string());
            line(&format!("type.{ty}.f1"), c.f1().to_string());
        }
        out
    }

    /// Parses [`EvalReport::to_kv`] output. Derived ratios are recomputed
    /// from the counts and checked against the stored values.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut report = EvalReport::default();
        let mut stored_f1 = None;
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let err = |m: &str| GtiError::Parse {
                line: i + 1,
                message: m.to_string(),
            };
            let (key, value) = raw.split_once('=').ok_or_else(|| err("missing `=`"))?;
            let int = || value.parse::<usize>().map_err(|e| err(&e.to_string()));
            match key {
                "gold" => report.overall.gold = int()?,
                "predicted" => report.overall.predicted = int()?,
                "correct" => report.overall.correct = int()?,
                "tokens" => report.tokens = int()?,
                "correct_tokens" => report.correct_tokens = int()?,
                "f1" => stored_f1 = Some(value.parse::<f64>().map_err(|e| err(&e.to_string()))?),
                "precision" | "recall" | "token_accuracy" => {}
                k => {
                    let rest = k.strip_prefix("type.").ok_or_else(|| err("unknown key"))?;
                    let (ty, field) = rest.rsplit_once('.').ok_or_else(|| err("bad type key"))?;
                    let c = report.per_type.entry(ty.to_string()).or_default();
                    match field {
                        "gold" => c.gold = int()?,
                        "predicted" => c.predicted = int()?,
                        "correct" => c.correct = int()?,
                        "f1" => {}
                        _ => return Err(err("unknown type field")),
                    }
                }
            }
        }
        if let Some(f1) = stored_f1 {
            if f1 != report.f1() {
                return Err(GtiError::Format(format!("stored f1 {f1} disagrees with counts")));
            }
        }
        Ok(report)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "processed {} tokens with {} phrases; found: {} phrases; correct: {}.",
            self.tokens, self.overall.gold, self.overall.predicted, self.overall.correct
        )?;
        writeln!(
            f,
            "accuracy: {:6.2}%; precision: {:6.2}%; recall: {:6.2}%; FB1: {:6.2}",
            100.0 * self.token_accuracy(),
            100.0 * self.precision(),
            100.0 * self.recall(),
            100.0 * self.f1()
        )?;
        for (ty, c) in &self.per_type {
            writeln!(
                f,
                "{ty:>17}: precision: {:6.2}%; recall: {:6.2}%; FB1: {:6.2}  {}",
                100.0 * c.precision(),
                100.0 * c.recall(),
                100.0 * c.f1(),
                c.predicted
            )?;
        }
        Ok(())
    }
}

/// Micro-averaged span scores pooled over all sentences and types. A
/// predicted span is correct iff its type and both boundaries match a gold
/// span.
pub fn micro_f1<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<EvalReport> {
    if gold.len() != pred.len() {
        return Err(GtiError::arg(format!(
            "{} gold sentences vs {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let mut report = EvalReport::default();
    for (g, p) in gold.iter().zip(pred) {
        if g.len() != p.len() {
            return Err(GtiError::arg(format!(
                "sentence lengths differ: {} vs {}",
                g.len(),
                p.len()
            )));
        }
        report.tokens += g.len();
        report.correct_tokens += g.iter().zip(p).filter(|(a, b)| a.as_ref() == b.as_ref()).count();
        let gs = spans_from_tags(g)?;
        let ps = spans_from_tags(p)?;
        let mut local: BTreeMap<&str, Counts> = BTreeMap::new();
        for s in &gs {
            local.entry(&s.label).or_default().gold += 1;
        }
        for s in &ps {
            let c = local.entry(&s.label).or_default();
            c.predicted += 1;
            if gs.contains(s) {
                c.correct += 1;
            }
        }
        for (ty, c) in local {
            report.overall.add(c);
            report.per_type.entry(ty.to_string()).or_default().add(c);
        }
    }
    Ok(report)
}

/// Span scores for span tasks; token counts only for per-token tasks.
pub fn task_report<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>], span: bool) -> Result<EvalReport> {
    if span {
        return micro_f1(gold, pred);
    }
    if gold.len() != pred.len() {
        return Err(GtiError::arg("task_report inputs differ in sentence count"));
    }
    let mut report = EvalReport::default();
    for (g, p) in gold.iter().zip(pred) {
        if g.len() != p.len() {
            return Err(GtiError::arg(format!(
                "sentence lengths differ: {} vs {}",
                g.len(),
                p.len()
            )));
        }
        report.tokens += g.len();
        report.correct_tokens += g.iter().zip(p).filter(|(a, b)| a.as_ref() == b.as_ref()).count();
    }
    Ok(report)
}

/// Fraction of equal positions. With a mask, only `true` positions count.
pub fn token_accuracy<T: PartialEq>(gold: &[Vec<T>], pred: &[Vec<T>], mask: Option<&[Vec<bool>]>) -> Result<f64> {
    if gold.len() != pred.len() || mask.is_some_and(|m| m.len() != gold.len()) {
        return Err(GtiError::arg("token_accuracy inputs differ in sentence count"));
    }
    let (mut total, mut correct) = (0usize, 0usize);
    for (s, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(GtiError::arg(format!("sentence {s}: {} vs {} tags", g.len(), p.len())));
        }
        let m = mask.map(|m| &m[s]);
        if m.is_some_and(|m| m.len() != g.len()) {
            return Err(GtiError::arg(format!("sentence {s}: mask length differs")));
        }
        for (i, (a, b)) in g.iter().zip(p).enumerate() {
            if m.is_none_or(|m| m[i]) {
                total += 1;
                correct += usize::from(a == b);
            }
        }
    }
    Ok(ratio(correct, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scheme::chunks_to_iobes;
    use proptest::prelude::*;

    fn v(tags: &[&str]) -> Vec<String> {
        tags.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn span_examples() {
        let s = spans_from_tags(&["S-LOC", "O"]).unwrap();
        assert_eq!(s.into_iter().collect::<Vec<_>>(), vec![Span::new("LOC", 0, 0)]);
        let s = spans_from_tags(&["B-PER", "E-PER", "O", "S-ORG"]).unwrap();
        assert_eq!(
            s.into_iter().collect::<Vec<_>>(),
            vec![Span::new("ORG", 3, 3), Span::new("PER", 0, 1)]
        );
        assert!(matches!(spans_from_tags(&["Z-PER"]), Err(GtiError::Tag(_))));
    }

    #[test]
    fn lenient_malformed_runs() {
        // unclosed B followed by O, orphan I, type switch inside a run
        let s: Vec<Span> = spans_from_tags(&["B-PER", "O", "I-LOC", "E-LOC", "B-ORG", "I-MISC", "E-MISC"])
            .unwrap()
            .into_iter()
            .collect();
        assert_eq!(
            s,
            vec![
                Span::new("LOC", 2, 3),
                Span::new("MISC", 5, 6),
                Span::new("ORG", 4, 4),
                Span::new("PER", 0, 0),
            ]
        );
    }

    #[test]
    fn f1_examples() {
        let gold = vec![v(&["B-PER", "E-PER", "O", "S-LOC"])];
        let r = micro_f1(&gold, &gold).unwrap();
        assert_eq!((r.precision(), r.recall(), r.f1()), (1.0, 1.0, 1.0));

        let pred = vec![v(&["B-PER", "E-PER", "S-ORG", "O"])];
        let r = micro_f1(&gold, &pred).unwrap();
        assert_eq!((r.precision(), r.recall(), r.f1()), (0.5, 0.5, 0.5));

        assert!(micro_f1(&gold, &[]).is_err());
        let empty = micro_f1::<String>(&[], &[]).unwrap();
        assert_eq!(empty.f1(), 0.0);
    }

    #[test]
    fn report_kv_round_trip() {
        let gold = vec![v(&["B-PER", "E-PER", "O", "S-LOC"]), v(&["S-ORG"])];
        let pred = vec![v(&["B-PER", "E-PER", "S-ORG", "O"]), v(&["S-ORG"])];
        let r = micro_f1(&gold, &pred).unwrap();
        let back = EvalReport::from_kv(&r.to_kv()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.f1(), r.f1());
        assert!(r.to_string().contains("FB1"));
    }

    #[test]
    fn accuracy_examples() {
        let g = vec![vec![1, 2, 3, 4]];
        assert_eq!(token_accuracy(&g, &g, None).unwrap(), 1.0);
        let p = vec![vec![1, 2, 0, 4]];
        assert_eq!(token_accuracy(&g, &p, None).unwrap(), 0.75);
        // padded positions excluded from the denominator
        let g = vec![vec![1, 2, 0, 0], vec![5, 0, 0, 0]];
        let p = vec![vec![1, 3, 7, 7], vec![5, 9, 9, 9]];
        let mask = vec![vec![true, true, false, false], vec![true, false, false, false]];
        assert!((token_accuracy(&g, &p, Some(&mask)).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(token_accuracy(&g, &p[..1], None).is_err());
    }

    #[test]
    fn per_token_task_report() {
        let g = vec![v(&["NN", "VBD", "DT"])];
        let p = vec![v(&["NN", "VBZ", "DT"])];
        let r = task_report(&g, &p, false).unwrap();
        assert_eq!((r.tokens, r.correct_tokens), (3, 2));
        assert_eq!(r.overall, Counts::default());
        assert!((r.score(false) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(task_report(&g, &g, false).unwrap().score(false), 1.0);
    }

    fn legal_iobes() -> impl Strategy<Value = Vec<String>> {
        // chunks of (gap, type, length) laid out left to right
        prop::collection::vec((0usize..3, 0usize..3, 1usize..4), 0..6).prop_map(|parts| {
            let mut chunks = Vec::new();
            let mut pos = 0;
            for (gap, ty, len) in parts {
                pos += gap;
                chunks.push((["PER", "LOC", "ORG"][ty].to_string(), pos, pos + len - 1));
                pos += len;
            }
            chunks_to_iobes(pos.max(1), &chunks)
        })
    }

    proptest! {
        #[test]
        fn spans_tags_spans_identity(tags in legal_iobes()) {
            let spans = spans_from_tags(&tags).unwrap();
            let chunks: Vec<_> = spans.iter().map(|s| (s.label.clone(), s.start, s.end)).collect();
            let again = chunks_to_iobes(tags.len(), &chunks);
            prop_assert_eq!(&again, &tags);
            prop_assert_eq!(spans_from_tags(&again).unwrap(), spans);
        }

        #[test]
        fn scores_bounded_and_permutation_invariant(
            gold in prop::collection::vec(legal_iobes(), 1..5),
            seed in 0u64..1000,
        ) {
            // prediction: gold with some sentences rotated
            let pred: Vec<Vec<String>> = gold.iter().enumerate().map(|(i, g)| {
                let mut p = g.clone();
                if (seed + i as u64).is_multiple_of(2) {
                    p.rotate_left(1);
                }
                p
            }).collect();
            let r = micro_f1(&gold, &pred).unwrap();
            for x in [r.precision(), r.recall(), r.f1()] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
            prop_assert!(r.overall.correct <= r.overall.gold.min(r.overall.predicted));
            let mut g2 = gold.clone();
            let mut p2 = pred.clone();
            g2.reverse();
            p2.reverse();
            prop_assert_eq!(micro_f1(&g2, &p2).unwrap().overall, r.overall);
            // an all-O sentence changes nothing but the token count
            g2.push(v(&["O", "O"]));
            p2.push(v(&["O", "O"]));
            let r3 = micro_f1(&g2, &p2).unwrap();
            prop_assert_eq!(r3.overall, r.overall);
            prop_assert_eq!(r3.per_type, r.per_type);
        }
    }
}
