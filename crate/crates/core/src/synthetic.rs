//! Deterministic toy corpus in CoNLL-2003 column layout.
//!
//! Entities are lexically separable: person names are a first name followed
//! by a surname, locations come from a closed list of city names, and
//! organisations are the only all-uppercase tokens. POS and chunk columns are
//! fixed per template, so every column is learnable from surface cues alone.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{convert_to_iobes, DataFormat, Featurizer, RawSentence, Sentence, TaskLayout};
use crate::error::Result;
use crate::model::{GtiConfig, Variant};

const FIRST: [&str; 6] = ["Alice", "Boris", "Carla", "Dmitri", "Elena", "Farid"];
const LAST: [&str; 4] = ["Smith", "Jones", "Novak", "Ito"];
const CITIES: [&str; 6] = ["Paris", "Oslo", "Lima", "Kyoto", "Nairobi", "Quito"];
const ORGS: [&str; 5] = ["ACME", "NASA", "UNICEF", "FIFA", "OPEC"];

#[derive(Clone, Copy)]
enum Item {
    Word(&'static str, &'static str),
    Per,
    Loc,
    Org,
}

use Item::{Loc, Org, Per, Word as W};

/// A template is a list of chunks; `None` marks tokens outside any chunk.
type Template = &'static [(Option<&'static str>, &'static [Item])];

const TEMPLATES: [Template; 8] = [
    &[
        (Some("NP"), &[Per]),
        (Some("VP"), &[W("visited", "VBD")]),
        (Some("NP"), &[Loc]),
        (Some("ADVP"), &[W("yesterday", "RB")]),
        (None, &[W(".", ".")]),
    ],
    &[
        (Some("NP"), &[Per]),
        (Some("VP"), &[W("joined", "VBD")]),
        (Some("NP"), &[Org]),
        (Some("PP"), &[W("in", "IN")]),
        (Some("NP"), &[Loc]),
        (None, &[W(".", ".")]),
    ],
    &[
        (Some("NP"), &[W("the", "DT"), W("team", "NN")]),
        (Some("PP"), &[W("of", "IN")]),
        (Some("NP"), &[Org]),
        (Some("VP"), &[W("met", "VBD")]),
        (Some("NP"), &[Per]),
        (Some("PP"), &[W("at", "IN")]),
        (Some("NP"), &[Loc]),
        (None, &[W(".", ".")]),
    ],
    &[
        (Some("NP"), &[Per]),
        (None, &[W("and", "CC")]),
        (Some("NP"), &[Per]),
        (Some("VP"), &[W("signed", "VBD")]),
        (Some("NP"), &[W("a", "DT"), W("deal", "NN")]),
        (Some("PP"), &[W("with", "IN")]),
        (Some("NP"), &[Org]),
        (None, &[W(".", ".")]),
    ],
    &[
        (Some("NP"), &[W("she", "PRP")]),
        (Some("VP"), &[W("praised", "VBD")]),
        (Some("NP"), &[W("the", "DT"), W("report", "NN")]),
        (Some("PP"), &[W("from", "IN")]),
        (Some("NP"), &[Org]),
        (Some("ADVP"), &[W("today", "RB")]),
        (None, &[W(".", ".")]),
    ],
    &[
        (Some("NP"), &[Org]),
        (Some("VP"), &[W("left", "VBD")]),
        (Some("NP"), &[Loc]),
        (None, &[W(",", ",")]),
        (Some("NP"), &[Per]),
        (Some("VP"), &[W("criticised", "VBD")]),
        (Some("NP"), &[W("the", "DT"), W("talks", "NNS")]),
        (None, &[W(".", ".")]),
    ],
    &[
        (Some("NP"), &[W("a", "DT"), W("meeting", "NN")]),
        (Some("PP"), &[W("in", "IN")]),
        (Some("NP"), &[Loc]),
        (Some("VP"), &[W("ended", "VBD")]),
        (Some("ADVP"), &[W("today", "RB")]),
        (None, &[W(".", ".")]),
    ],
    &[
        (Some("NP"), &[W("he", "PRP")]),
        (Some("VP"), &[W("sold", "VBD")]),
        (Some("NP"), &[W("the", "DT"), W("company", "NN")]),
        (Some("PP"), &[W("to", "TO")]),
        (Some("NP"), &[Org]),
        (Some("PP"), &[W("from", "IN")]),
        (Some("NP"), &[Loc]),
        (None, &[W(".", ".")]),
    ],
];

/// `n` sentences cycling through the templates with seeded slot fillers.
/// Columns are POS, IOB2 chunk and IOB2 NER.
pub fn corpus(n: usize, seed: u64) -> Vec<RawSentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| render(TEMPLATES[i % TEMPLATES.len()], &mut rng))
        .collect()
}

/// A toy corpus converted to IOBES and encoded for one task layout.
#[derive(Clone, Debug)]
pub struct ToyTask {
    pub raw: Vec<RawSentence>,
    pub layout: TaskLayout,
    pub featurizer: Featurizer,
    pub sentences: Vec<Sentence>,
}

impl ToyTask {
    pub fn new(n: usize, seed: u64, main: &str, aux: &[&str]) -> Result<Self> {
        let mut raw = corpus(n, seed);
        convert_to_iobes(&mut raw, DataFormat::Conll2003)?;
        let aux: Vec<String> = aux.iter().map(|a| a.to_string()).collect();
        let layout = TaskLayout::build(DataFormat::Conll2003, main, &aux, &raw)?;
        let featurizer = Featurizer::build(&raw, [], false);
        let sentences = layout.encode_all(&featurizer, &raw, true)?;
        Ok(ToyTask {
            raw,
            layout,
            featurizer,
            sentences,
        })
    }

    /// Small dimensions (8-d words, characters and labels) for fast tests.
    pub fn config(&self, variant: Variant, state_size: usize) -> GtiConfig {
        let mut c = GtiConfig::new(
            self.layout.main.clone(),
            self.layout.aux.clone(),
            self.featurizer.words.len(),
            self.featurizer.chars.len(),
        );
        c.d_word = 8;
        c.d_char = 8;
        c.n_char_filters = 8;
        c.d_label = 8;
        c.state_size = state_size;
        c.variant = variant;
        c
    }
}

fn render(t: Template, rng: &mut ChaCha8Rng) -> RawSentence {
    let mut tokens = Vec::new();
    let (mut pos, mut chunk, mut ner) = (Vec::new(), Vec::new(), Vec::new());
    for &(ty, items) in t {
        let chunk_start = tokens.len();
        for item in items {
            let (words, entity): (Vec<&str>, Option<&str>) = match *item {
                W(w, p) => {
                    pos.push(p.to_string());
                    (vec![w], None)
                }
                Per => {
                    pos.extend(["NNP".to_string(), "NNP".to_string()]);
                    (vec![pick(&FIRST, rng), pick(&LAST, rng)], Some("PER"))
                }
                Loc => {
                    pos.push("NNP".to_string());
                    (vec![pick(&CITIES, rng)], Some("LOC"))
                }
                Org => {
                    pos.push("NNP".to_string());
                    (vec![pick(&ORGS, rng)], Some("ORG"))
                }
            };
            for (j, w) in words.iter().enumerate() {
                tokens.push(w.to_string());
                ner.push(match entity {
                    Some(e) if j == 0 => format!("B-{e}"),
                    Some(e) => format!("I-{e}"),
                    None => "O".to_string(),
                });
            }
        }
        for k in chunk_start..tokens.len() {
            chunk.push(match ty {
                Some(c) if k == chunk_start => format!("B-{c}"),
                Some(c) => format!("I-{c}"),
                None => "O".to_string(),
            });
        }
    }
    RawSentence {
        tokens,
        columns: vec![pos, chunk, ner],
    }
}

fn pick(words: &[&'static str], rng: &mut ChaCha8Rng) -> &'static str {
    words.choose(rng).expect("non-empty word list")
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::data::{classify_word_format, FormatCategory};
    use crate::eval::spans_from_tags;

    #[test]
    fn columns_align_and_are_seeded() {
        let a = corpus(30, 7);
        assert_eq!(a, corpus(30, 7));
        assert_ne!(a, corpus(30, 8));
        for s in &a {
            assert!(s.columns.iter().all(|c| c.len() == s.len()));
        }
    }

    #[test]
    fn vocabulary_and_entity_types() {
        let c = corpus(30, 1);
        let vocab: BTreeSet<_> = c.iter().flat_map(|s| s.tokens.iter()).collect();
        assert!((40..=70).contains(&vocab.len()), "vocab {}", vocab.len());
        let types: BTreeSet<String> = c
            .iter()
            .flat_map(|s| spans_from_tags(&s.columns[2]).unwrap())
            .map(|sp| sp.label)
            .collect();
        assert_eq!(types.into_iter().collect::<Vec<_>>(), ["LOC", "ORG", "PER"]);
    }

    #[test]
    fn organisations_are_the_only_uppercase_tokens() {
        for s in corpus(30, 3) {
            for (tok, tag) in s.tokens.iter().zip(&s.columns[2]) {
                let upper = classify_word_format(tok).unwrap() == FormatCategory::AllUpper;
                assert_eq!(upper, tag == "B-ORG", "{tok}");
            }
        }
    }
}
