//! Whitespace-separated column corpora (CoNLL-2000 / CoNLL-2003).

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GtiError, Result};

/// A tokenized sentence with one tag column per annotation layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawSentence {
    pub tokens: Vec<String>,
    /// `columns[c][i]` is the `c`-th column after the token for token `i`.
    pub columns: Vec<Vec<String>>,
}

impl RawSentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    /// `TOKEN POS CHUNK`
    Conll2000,
    /// `TOKEN POS CHUNK NER`
    Conll2003,
}

impl DataFormat {
    pub fn n_columns(self) -> usize {
        match self {
            DataFormat::Conll2000 => 3,
            DataFormat::Conll2003 => 4,
        }
    }

    /// Tag column index (after the token) for a task name.
    pub fn task_column(self, task: &str) -> Option<usize> {
        match (self, task) {
            (_, "pos") => Some(0),
            (_, "chunk") => Some(1),
            (DataFormat::Conll2003, "ner") => Some(2),
            _ => None,
        }
    }

    pub fn tasks(self) -> &'static [&'static str] {
        match self {
            DataFormat::Conll2000 => &["pos", "chunk"],
            DataFormat::Conll2003 => &["pos", "chunk", "ner"],
        }
    }
}

impl std::str::FromStr for DataFormat {
    type Err = GtiError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "conll2000" => Ok(DataFormat::Conll2000),
            "conll2003" => Ok(DataFormat::Conll2003),
            _ => Err(GtiError::arg(format!("unknown data format `{s}`"))),
        }
    }
}

/// Reads sentences separated by blank lines. Each non-blank line needs at
/// least `n_columns` whitespace-separated fields; extra fields are ignored.
/// `-DOCSTART-` lines are skipped.
pub fn parse_conll<R: Read>(reader: R, n_columns: usize) -> Result<Vec<RawSentence>> {
    if n_columns == 0 {
        return Err(GtiError::arg("n_columns must be at least 1"));
    }
    let mut out = Vec::new();
    let mut cur = RawSentence {
        tokens: Vec::new(),
        columns: vec![Vec::new(); n_columns - 1],
    };
    let flush = |cur: &mut RawSentence, out: &mut Vec<RawSentence>| {
        if !cur.tokens.is_empty() {
            let empty = RawSentence {
                tokens: Vec::new(),
                columns: vec![Vec::new(); n_columns - 1],
            };
            out.push(std::mem::replace(cur, empty));
        }
    };
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            flush(&mut cur, &mut out);
            continue;
        }
        if fields[0] == "-DOCSTART-" {
            continue;
        }
        if fields.len() < n_columns {
            return Err(GtiError::Parse {
                line: lineno + 1,
                message: format!("expected {n_columns} columns, found {}", fields.len()),
            });
        }
        cur.tokens.push(fields[0].to_string());
        for (c, col) in cur.columns.iter_mut().enumerate() {
            col.push(fields[c + 1].to_string());
        }
    }
    flush(&mut cur, &mut out);
    Ok(out)
}

/// Renders sentences back to column text, one blank line after each.
pub fn write_conll(sentences: &[RawSentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        for (i, tok) in s.tokens.iter().enumerate() {
            out.push_str(tok);
            for col in &s.columns {
                out.push(' ');
                out.push_str(&col[i]);
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

pub fn read_conll_file(path: &Path, n_columns: usize) -> Result<Vec<RawSentence>> {
    parse_conll(File::open(path)?, n_columns)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file() {
        let s = parse_conll("Dog NN B-NP\n\n".as_bytes(), 3).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].tokens, vec!["Dog"]);
        assert_eq!(s[0].columns, vec![vec!["NN"], vec!["B-NP"]]);
    }

    #[test]
    fn docstart_dropped_and_no_trailing_blank_needed() {
        let text = "-DOCSTART- -X- O O\n\nEU NNP B-NP S-ORG\nrejects VBZ B-VP O";
        let s = parse_conll(text.as_bytes(), 4).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].tokens, vec!["EU", "rejects"]);
        assert_eq!(s[0].columns[2], vec!["S-ORG", "O"]);
    }

    #[test]
    fn write_then_parse_round_trips() {
        let text = "EU NNP B-NP S-ORG\nrejects VBZ B-VP O\n\nOK UH O O\n\n";
        let s = parse_conll(text.as_bytes(), 4).unwrap();
        assert_eq!(write_conll(&s), text);
    }

    #[test]
    fn empty_input() {
        assert!(parse_conll("".as_bytes(), 3).unwrap().is_empty());
        assert!(parse_conll("\n\n\n".as_bytes(), 3).unwrap().is_empty());
    }

    #[test]
    fn short_line_reports_line_number() {
        let err = parse_conll("a B C\nb C\n".as_bytes(), 3).unwrap_err();
        assert!(matches!(err, GtiError::Parse { line: 2, .. }), "{err}");
    }
}
