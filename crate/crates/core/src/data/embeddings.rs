//! Pre-trained word vectors in the plain-text `token v1 … vd` layout.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::vocab::Vocab;
use crate::error::{GtiError, Result};
use crate::tensor::Tensor;

/// Bound of the uniform distribution used for rows missing from the file.
pub const OOV_INIT_BOUND: f64 = 0.25;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EmbeddingStats {
    pub dim: usize,
    pub exact: usize,
    pub case_folded: usize,
    pub sampled: usize,
}

/// Builds a `[vocab.len(), d]` table. Tokens are matched exactly, then by
/// their lowercase form; remaining rows are drawn from `U[-0.25, 0.25]`.
/// The PAD row is zero.
pub fn load_pretrained_embeddings<R: Read, G: Rng + ?Sized>(
    reader: R,
    vocab: &Vocab,
    rng: &mut G,
) -> Result<(Tensor, EmbeddingStats)> {
    let mut wanted: HashSet<String> = HashSet::new();
    for (_, tok) in vocab.iter() {
        wanted.insert(tok.to_string());
        wanted.insert(tok.to_lowercase());
    }

    let mut vectors: HashMap<String, Vec<f64>> = HashMap::new();
    let mut dim: Option<usize> = None;
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let mut fields = line.split(' ').filter(|f| !f.is_empty());
        let Some(token) = fields.next() else { continue };
        let rest: Vec<&str> = fields.collect();
        // word2vec-style "count dim" header
        if lineno == 0 && rest.len() == 1 && token.parse::<usize>().is_ok() && rest[0].parse::<usize>().is_ok() {
            continue;
        }
        match dim {
            None => dim = Some(rest.len()),
            Some(d) if d != rest.len() => {
                return Err(GtiError::Format(format!(
                    "line {}: {} values, expected {d}",
                    lineno + 1,
                    rest.len()
                )))
            }
            _ => {}
        }
        if !wanted.contains(token) || vectors.contains_key(token) {
            continue;
        }
        let values = rest
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| GtiError::Format(format!("line {}: {e}", lineno + 1)))?;
        vectors.insert(token.to_string(), values);
    }
    let dim = dim
        .filter(|&d| d > 0)
        .ok_or_else(|| GtiError::Format("no vectors in embedding file".into()))?;

    let mut table = Tensor::zeros(&[vocab.len(), dim]);
    let mut stats = EmbeddingStats {
        dim,
        ..Default::default()
    };
    for (id, tok) in vocab.iter() {
        if id == Vocab::PAD {
            continue;
        }
        let row = table.row_mut(id);
        if let Some(v) = vectors.get(tok) {
            row.copy_from_slice(v);
            stats.exact += 1;
        } else if let Some(v) = vectors.get(&tok.to_lowercase()) {
            row.copy_from_slice(v);
            stats.case_folded += 1;
        } else {
            for x in row.iter_mut() {
                *x = rng.gen_range(-OOV_INIT_BOUND..=OOV_INIT_BOUND);
            }
            stats.sampled += 1;
        }
    }
    Ok((table, stats))
}

/// [`load_pretrained_embeddings`] on a file, sampling missing rows from a
/// ChaCha8 stream seeded with `seed`.
pub fn load_embeddings_file(path: &Path, vocab: &Vocab, seed: u64) -> Result<(Tensor, EmbeddingStats)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    load_pretrained_embeddings(File::open(path)?, vocab, &mut rng)
}

/// Table of `[n_rows, dim]` with every non-PAD row drawn from `U[-0.25, 0.25]`.
pub fn random_embeddings<G: Rng + ?Sized>(n_rows: usize, dim: usize, rng: &mut G) -> Tensor {
    let mut t = Tensor::zeros(&[n_rows, dim]);
    for r in 1..n_rows {
        for x in t.row_mut(r) {
            *x = rng.gen_range(-OOV_INIT_BOUND..=OOV_INIT_BOUND);
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const FILE: &str = "the 0.1 0.2 0.3\nlondon -1 0 1\ncat 0.5 0.5 0.5\n";

    #[test]
    fn exact_case_folded_and_sampled_rows() {
        let vocab = Vocab::from_tokens(["the", "London", "zebra"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (t, stats) = load_pretrained_embeddings(FILE.as_bytes(), &vocab, &mut rng).unwrap();
        assert_eq!(t.shape(), &[5, 3]);
        assert_eq!(t.row(vocab.get("the")), &[0.1, 0.2, 0.3]);
        assert_eq!(t.row(vocab.get("London")), &[-1.0, 0.0, 1.0]);
        assert!(t.row(vocab.get("zebra")).iter().all(|x| (-0.25..=0.25).contains(x)));
        assert_eq!(t.row(Vocab::PAD), &[0.0, 0.0, 0.0]);
        assert_eq!(
            stats,
            EmbeddingStats {
                dim: 3,
                exact: 1,
                case_folded: 1,
                sampled: 2
            }
        );
    }

    #[test]
    fn inconsistent_dims_rejected() {
        let vocab = Vocab::from_tokens(["a"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = "a 1 2\nb 1 2 3\n";
        assert!(matches!(
            load_pretrained_embeddings(bad.as_bytes(), &vocab, &mut rng),
            Err(GtiError::Format(_))
        ));
    }

    #[test]
    fn word2vec_header_skipped() {
        let vocab = Vocab::from_tokens(["a"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (t, _) = load_pretrained_embeddings("1 2\na 3 4\n".as_bytes(), &vocab, &mut rng).unwrap();
        assert_eq!(t.row(vocab.get("a")), &[3.0, 4.0]);
    }
}
