//! Corpus ingestion and feature encoding.

pub mod batch;
pub mod conll;
pub mod embeddings;
pub mod format;
pub mod scheme;
pub mod vocab;

use serde::{Deserialize, Serialize};

pub use batch::{make_batches, split_validation, Batch};
pub use conll::{parse_conll, read_conll_file, write_conll, DataFormat, RawSentence};
pub use embeddings::{load_embeddings_file, load_pretrained_embeddings, random_embeddings, EmbeddingStats};
pub use format::{classify_word_format, FormatCategory};
pub use scheme::{split_tag, to_iobes, Prefix, TagScheme};
pub use vocab::Vocab;

use crate::error::{GtiError, Result};

/// A sentence with every id resolved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub words: Vec<usize>,
    pub chars: Vec<Vec<usize>>,
    pub formats: Vec<usize>,
    pub main: Option<Vec<usize>>,
    /// Gold tags per auxiliary task, in model order.
    pub aux: Vec<Option<Vec<usize>>>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn truncated(&self, n: usize) -> Sentence {
        Sentence {
            tokens: self.tokens[..n].to_vec(),
            words: self.words[..n].to_vec(),
            chars: self.chars[..n].to_vec(),
            formats: self.formats[..n].to_vec(),
            main: self.main.as_ref().map(|t| t[..n].to_vec()),
            aux: self.aux.iter().map(|a| a.as_ref().map(|t| t[..n].to_vec())).collect(),
        }
    }
}

/// A task's name and tag inventory. Span tasks use IOBES tags.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub tags: Vec<String>,
    pub span: bool,
}

impl TaskSpec {
    pub fn new(name: &str, tags: Vec<String>, span: bool) -> Self {
        TaskSpec {
            name: name.to_string(),
            tags,
            span,
        }
    }

    /// Collects the inventory of one tag column: `O` first, then sorted.
    pub fn from_column<'a, I>(name: &str, sentences: I, column: usize, span: bool) -> Self
    where
        I: IntoIterator<Item = &'a RawSentence>,
    {
        let mut tags: Vec<String> = sentences
            .into_iter()
            .flat_map(|s| s.columns[column].iter().cloned())
            .collect();
        tags.sort();
        tags.dedup();
        if let Some(p) = tags.iter().position(|t| t == "O") {
            let o = tags.remove(p);
            tags.insert(0, o);
        }
        TaskSpec::new(name, tags, span)
    }

    pub fn n_tags(&self) -> usize {
        self.tags.len()
    }

    pub fn tag_id(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }

    pub fn encode(&self, tags: &[String]) -> Result<Vec<usize>> {
        tags.iter()
            .map(|t| {
                self.tag_id(t)
                    .ok_or_else(|| GtiError::ConfigMismatch(format!("tag `{t}` not in the `{}` inventory", self.name)))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tags[i].clone()).collect()
    }
}

/// Whether a task's tags delimit spans (and so are converted to IOBES).
pub fn is_span_task(name: &str) -> bool {
    matches!(name, "chunk" | "ner")
}

/// Rewrites the span-task columns of `format` to IOBES in place.
pub fn convert_to_iobes(sentences: &mut [RawSentence], format: DataFormat) -> Result<()> {
    for task in format.tasks() {
        if !is_span_task(task) {
            continue;
        }
        let col = format.task_column(task).expect("listed task");
        for s in sentences.iter_mut() {
            s.columns[col] = to_iobes(&s.columns[col])?;
        }
    }
    Ok(())
}

/// Which columns feed the main and auxiliary tasks, with their inventories.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskLayout {
    pub format: DataFormat,
    pub main: TaskSpec,
    pub aux: Vec<TaskSpec>,
}

impl TaskLayout {
    /// Tag inventories come from every labelled sentence given. Span tasks
    /// are completed to the full `B/I/E/S` set of each observed type so that
    /// any legal sequence over those types is encodable.
    pub fn build<'a>(
        format: DataFormat,
        main: &str,
        aux: &[String],
        labelled: impl IntoIterator<Item = &'a RawSentence> + Clone,
    ) -> Result<Self> {
        let mut seen = vec![main.to_string()];
        for a in aux {
            if seen.contains(a) {
                return Err(GtiError::arg(format!("task `{a}` listed twice")));
            }
            seen.push(a.clone());
        }
        let spec = |name: &str| -> Result<TaskSpec> {
            let col = format
                .task_column(name)
                .ok_or_else(|| GtiError::arg(format!("task `{name}` not available in {format:?} data")))?;
            let span = is_span_task(name);
            let mut t = TaskSpec::from_column(name, labelled.clone(), col, span);
            if span {
                t = complete_span_inventory(&t)?;
            }
            Ok(t)
        };
        Ok(TaskLayout {
            format,
            main: spec(main)?,
            aux: aux.iter().map(|a| spec(a)).collect::<Result<_>>()?,
        })
    }

    pub fn main_column(&self) -> usize {
        self.format.task_column(&self.main.name).expect("validated at build")
    }

    pub fn aux_columns(&self) -> Vec<usize> {
        self.aux
            .iter()
            .map(|t| self.format.task_column(&t.name).expect("validated at build"))
            .collect()
    }

    /// Encodes sentences; gold tags are read only when `labelled`.
    pub fn encode_all(&self, feats: &Featurizer, raw: &[RawSentence], labelled: bool) -> Result<Vec<Sentence>> {
        let col = |c: usize| labelled.then_some(c);
        let aux_cols = self.aux_columns();
        let aux: Vec<_> = self.aux.iter().zip(&aux_cols).map(|(t, &c)| (t, col(c))).collect();
        raw.iter()
            .map(|r| feats.encode(r, (&self.main, col(self.main_column())), &aux))
            .collect()
    }
}

fn complete_span_inventory(task: &TaskSpec) -> Result<TaskSpec> {
    let mut types = std::collections::BTreeSet::new();
    for t in &task.tags {
        let (prefix, ty) = split_tag(t)?;
        if prefix != Prefix::O {
            types.insert(ty.to_string());
        }
    }
    let mut tags = vec!["O".to_string()];
    for ty in &types {
        for p in ["B", "E", "I", "S"] {
            tags.push(format!("{p}-{ty}"));
        }
    }
    Ok(TaskSpec::new(&task.name, tags, true))
}

/// Word and character vocabularies plus token normalisation options.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Featurizer {
    pub words: Vocab,
    pub chars: Vocab,
    #[serde(default)]
    pub normalize_digits: bool,
}

impl Featurizer {
    /// Words from every given sentence; characters from the first group only
    /// (the training data).
    pub fn build<'a>(
        train: &'a [RawSentence],
        extra: impl IntoIterator<Item = &'a RawSentence>,
        normalize_digits: bool,
    ) -> Self {
        let norm = |t: &str| normalize(t, normalize_digits);
        let mut words = Vocab::new();
        let mut chars = Vocab::new();
        for s in train {
            for t in &s.tokens {
                words.add(&norm(t));
                for c in t.chars() {
                    chars.add(c.encode_utf8(&mut [0; 4]));
                }
            }
        }
        for s in extra {
            for t in &s.tokens {
                words.add(&norm(t));
            }
        }
        words.freeze();
        chars.freeze();
        Featurizer {
            words,
            chars,
            normalize_digits,
        }
    }

    pub fn word_id(&self, token: &str) -> usize {
        self.words.get(&normalize(token, self.normalize_digits))
    }

    pub fn char_ids(&self, token: &str) -> Vec<usize> {
        token
            .chars()
            .map(|c| self.chars.get(c.encode_utf8(&mut [0; 4])))
            .collect()
    }

    /// Encodes tokens plus the gold tags found at the given columns.
    pub fn encode(
        &self,
        raw: &RawSentence,
        main: (&TaskSpec, Option<usize>),
        aux: &[(&TaskSpec, Option<usize>)],
    ) -> Result<Sentence> {
        let tags = |(task, col): (&TaskSpec, Option<usize>)| -> Result<Option<Vec<usize>>> {
            match col {
                Some(c) => {
                    let column = raw
                        .columns
                        .get(c)
                        .ok_or_else(|| GtiError::Feature(format!("no column {c} for task `{}`", task.name)))?;
                    task.encode(column).map(Some)
                }
                None => Ok(None),
            }
        };
        Ok(Sentence {
            tokens: raw.tokens.clone(),
            words: raw.tokens.iter().map(|t| self.word_id(t)).collect(),
            chars: raw.tokens.iter().map(|t| self.char_ids(t)).collect(),
            formats: raw
                .tokens
                .iter()
                .map(|t| classify_word_format(t).map(FormatCategory::index))
                .collect::<Result<_>>()?,
            main: tags(main)?,
            aux: aux.iter().map(|&a| tags(a)).collect::<Result<_>>()?,
        })
    }
}

fn normalize(token: &str, digits: bool) -> String {
    if digits {
        token
            .chars()
            .map(|c| if c.is_ascii_digit() { '0' } else { c })
            .collect()
    } else {
        token.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "\
The DT B-NP O
Fed NNP I-NP I-ORG
rose VBD B-VP O
5 CD B-NP O

Paris NNP B-NP I-LOC
";

    #[test]
    fn encode_round() {
        let mut raw = parse_conll(TEXT.as_bytes(), 4).unwrap();
        convert_to_iobes(&mut raw, DataFormat::Conll2003).unwrap();
        assert_eq!(raw[0].columns[1], vec!["B-NP", "E-NP", "S-VP", "S-NP"]);
        assert_eq!(raw[1].columns[2], vec!["S-LOC"]);

        let feats = Featurizer::build(&raw[..1], &raw[1..], false);
        let ner = TaskSpec::from_column("ner", &raw, 2, true);
        assert_eq!(ner.tags, vec!["O", "S-LOC", "S-ORG"]);
        let pos = TaskSpec::from_column("pos", &raw, 0, false);
        let s = feats.encode(&raw[0], (&ner, Some(2)), &[(&pos, Some(0))]).unwrap();
        assert_eq!(s.main.as_deref(), Some(&[0, 2, 0, 0][..]));
        assert_eq!(s.formats[3], FormatCategory::Numeric.index());
        assert_ne!(feats.word_id("Paris"), Vocab::UNK);
        // characters only come from training sentences
        assert_eq!(feats.char_ids("P")[0], Vocab::UNK);

        let other = TaskSpec::new("ner", vec!["O".into()], true);
        assert!(matches!(
            feats.encode(&raw[0], (&other, Some(2)), &[]),
            Err(GtiError::ConfigMismatch(_))
        ));
    }

    #[test]
    fn layout_completes_span_inventories() {
        let mut raw = parse_conll(TEXT.as_bytes(), 4).unwrap();
        convert_to_iobes(&mut raw, DataFormat::Conll2003).unwrap();
        let layout = TaskLayout::build(DataFormat::Conll2003, "ner", &["chunk".into(), "pos".into()], &raw).unwrap();
        assert_eq!(
            layout.main.tags,
            vec!["O", "B-LOC", "E-LOC", "I-LOC", "S-LOC", "B-ORG", "E-ORG", "I-ORG", "S-ORG"]
        );
        assert_eq!(layout.aux_columns(), vec![1, 0]);
        assert!(!layout.aux[1].span);
        let feats = Featurizer::build(&raw, [], false);
        let enc = layout.encode_all(&feats, &raw, false).unwrap();
        assert!(enc[0].main.is_none() && enc[0].aux.iter().all(Option::is_none));
        let enc = layout.encode_all(&feats, &raw, true).unwrap();
        assert_eq!(enc[1].main.as_deref(), Some(&[4][..]));

        let dup = TaskLayout::build(DataFormat::Conll2003, "ner", &["ner".into()], &raw);
        assert!(matches!(dup, Err(GtiError::Argument(_))));
        let missing = TaskLayout::build(DataFormat::Conll2000, "ner", &[], &raw);
        assert!(matches!(missing, Err(GtiError::Argument(_))));
    }

    #[test]
    fn digit_normalisation_flag() {
        let raw = parse_conll("1999 CD B-NP\n".as_bytes(), 3).unwrap();
        let on = Featurizer::build(&raw, [], true);
        assert_eq!(on.word_id("2000"), on.word_id("1999"));
        let off = Featurizer::build(&raw, [], false);
        assert_eq!(off.word_id("2000"), Vocab::UNK);
    }
}
