//! Chunk tag schemes and conversion to IOBES.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{GtiError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TagScheme {
    Iob1,
    Iob2,
    Iobes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Prefix {
    B,
    I,
    E,
    S,
    O,
}

/// Splits `B-LOC` into `(B, "LOC")`. `O` has an empty type.
pub fn split_tag(tag: &str) -> Result<(Prefix, &str)> {
    if tag == "O" {
        return Ok((Prefix::O, ""));
    }
    let (p, ty) = tag.split_once('-').ok_or_else(|| GtiError::Tag(tag.to_string()))?;
    if ty.is_empty() {
        return Err(GtiError::Tag(tag.to_string()));
    }
    let prefix = match p {
        "B" => Prefix::B,
        "I" => Prefix::I,
        "E" => Prefix::E,
        "S" => Prefix::S,
        _ => return Err(GtiError::Tag(tag.to_string())),
    };
    Ok((prefix, ty))
}

/// Chunk `(type, start, end)` triples (inclusive) read from an IOB1/IOB2
/// sequence. An `I-X` that does not continue an `X` chunk opens a new one.
pub fn iob_chunks(tags: &[String]) -> Result<Vec<(String, usize, usize)>> {
    let mut chunks: Vec<(String, usize, usize)> = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let (prefix, ty) = split_tag(tag)?;
        match prefix {
            Prefix::O => {
                if let Some((t, s)) = open.take() {
                    chunks.push((t, s, i - 1));
                }
            }
            Prefix::I | Prefix::E if open.as_ref().is_some_and(|(t, _)| t == ty) => {
                if prefix == Prefix::E {
                    let (t, s) = open.take().expect("checked above");
                    chunks.push((t, s, i));
                }
            }
            _ => {
                if let Some((t, s)) = open.take() {
                    chunks.push((t, s, i - 1));
                }
                match prefix {
                    Prefix::S => chunks.push((ty.to_string(), i, i)),
                    Prefix::E => {
                        debug!("orphan {tag} at position {i} repaired as single-token chunk");
                        chunks.push((ty.to_string(), i, i));
                    }
                    _ => {
                        if prefix == Prefix::I {
                            debug!("orphan {tag} at position {i} repaired as chunk start");
                        }
                        open = Some((ty.to_string(), i));
                    }
                }
            }
        }
    }
    if let Some((t, s)) = open {
        chunks.push((t, s, tags.len() - 1));
    }
    Ok(chunks)
}

/// Writes chunks back out as IOBES tags.
pub fn chunks_to_iobes(len: usize, chunks: &[(String, usize, usize)]) -> Vec<String> {
    let mut out = vec!["O".to_string(); len];
    for (ty, s, e) in chunks {
        if s == e {
            out[*s] = format!("S-{ty}");
        } else {
            out[*s] = format!("B-{ty}");
            for tag in &mut out[s + 1..*e] {
                *tag = format!("I-{ty}");
            }
            out[*e] = format!("E-{ty}");
        }
    }
    out
}

/// Converts an IOB1 or IOB2 sequence to IOBES. Orphan `I-X` tags are
/// treated as chunk starts.
pub fn to_iobes(tags: &[String]) -> Result<Vec<String>> {
    let chunks = iob_chunks(tags)?;
    Ok(chunks_to_iobes(tags.len(), &chunks))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(tags: &[&str]) -> Vec<String> {
        tags.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn scheme_examples() {
        assert_eq!(to_iobes(&v(&["B-PER", "I-PER"])).unwrap(), v(&["B-PER", "E-PER"]));
        assert_eq!(to_iobes(&v(&["B-LOC"])).unwrap(), v(&["S-LOC"]));
        assert_eq!(
            to_iobes(&v(&["O", "I-ORG", "I-ORG", "O"])).unwrap(),
            v(&["O", "B-ORG", "E-ORG", "O"])
        );
    }

    #[test]
    fn iob1_adjacent_chunks_split_on_b() {
        // IOB1 uses B- only between adjacent same-type chunks
        assert_eq!(
            to_iobes(&v(&["I-PER", "I-PER", "B-PER", "O", "I-LOC"])).unwrap(),
            v(&["B-PER", "E-PER", "S-PER", "O", "S-LOC"])
        );
        assert_eq!(
            to_iobes(&v(&["B-NP", "I-NP", "I-VP", "I-VP"])).unwrap(),
            v(&["B-NP", "E-NP", "B-VP", "E-VP"])
        );
    }

    #[test]
    fn malformed_tag_rejected() {
        assert!(matches!(split_tag("X-LOC"), Err(GtiError::Tag(_))));
        assert!(matches!(split_tag("B-"), Err(GtiError::Tag(_))));
        assert!(matches!(split_tag("NN"), Err(GtiError::Tag(_))));
        assert_eq!(split_tag("I-MISC").unwrap(), (Prefix::I, "MISC"));
    }
}
