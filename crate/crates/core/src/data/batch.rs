//! Validation splitting and padded mini-batches.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::vocab::Vocab;
use crate::data::Sentence;
use crate::error::{GtiError, Result};

/// Moves a seeded uniform sample of `n` items into a dev set. Both halves
/// keep their original relative order.
pub fn split_validation<T>(items: Vec<T>, n: usize, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() <= n {
        return Err(GtiError::arg(format!(
            "cannot hold out {n} of {} sentences",
            items.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_dev = vec![false; items.len()];
    for i in sample(&mut rng, items.len(), n) {
        is_dev[i] = true;
    }
    let (mut train, mut dev) = (Vec::new(), Vec::new());
    for (item, d) in items.into_iter().zip(is_dev) {
        if d {
            dev.push(item);
        } else {
            train.push(item);
        }
    }
    Ok((train, dev))
}

/// Sentences padded to a common length; `mask[r][i]` marks real tokens.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Positions of the member sentences in the source slice.
    pub indices: Vec<usize>,
    pub rows: Vec<Sentence>,
    pub mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn padded_len(&self) -> usize {
        self.rows.first().map_or(0, Sentence::len)
    }

    /// Row `r` with padding stripped.
    pub fn unpadded(&self, r: usize) -> Sentence {
        let n = self.mask[r].iter().filter(|&&m| m).count();
        self.rows[r].truncated(n)
    }
}

fn pad(s: &Sentence, len: usize) -> Sentence {
    let extra = len - s.len();
    let mut p = s.clone();
    p.tokens.extend(std::iter::repeat_n("<pad>".to_string(), extra));
    p.words.extend(std::iter::repeat_n(Vocab::PAD, extra));
    p.chars.extend(std::iter::repeat_n(vec![Vocab::PAD], extra));
    p.formats.extend(std::iter::repeat_n(0, extra));
    for tags in p.main.iter_mut().chain(p.aux.iter_mut().flatten()) {
        tags.extend(std::iter::repeat_n(0, extra));
    }
    p
}

/// Shuffles (seeded) and groups sentences into padded batches.
pub fn make_batches<G: Rng + ?Sized>(sentences: &[Sentence], batch_size: usize, rng: &mut G) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(GtiError::arg("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    order.shuffle(rng);
    Ok(order
        .chunks(batch_size)
        .map(|idx| {
            let max = idx.iter().map(|&i| sentences[i].len()).max().unwrap_or(0);
            Batch {
                indices: idx.to_vec(),
                rows: idx.iter().map(|&i| pad(&sentences[i], max)).collect(),
                mask: idx
                    .iter()
                    .map(|&i| (0..max).map(|p| p < sentences[i].len()).collect())
                    .collect(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sent(n: usize) -> Sentence {
        Sentence {
            tokens: (0..n).map(|i| format!("w{i}")).collect(),
            words: (0..n).map(|i| i + 2).collect(),
            chars: vec![vec![2, 3]; n],
            formats: vec![2; n],
            main: Some(vec![1; n]),
            aux: vec![Some(vec![3; n])],
        }
    }

    #[test]
    fn split_counts_and_determinism() {
        let items: Vec<usize> = (0..1100).collect();
        let (train, dev) = split_validation(items.clone(), 1000, 7).unwrap();
        assert_eq!((train.len(), dev.len()), (100, 1000));
        assert!(train.iter().all(|t| !dev.contains(t)));
        assert!(train.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(split_validation(items.clone(), 1000, 7).unwrap().1, dev);
        assert!(split_validation((0..1000).collect::<Vec<_>>(), 1000, 1).is_err());

        let big: Vec<usize> = (0..2000).collect();
        let d1 = split_validation(big.clone(), 1000, 1).unwrap().1;
        let d2 = split_validation(big, 1000, 2).unwrap().1;
        assert_ne!(d1, d2);
    }

    #[test]
    fn batch_sizes_and_padding() {
        let sents: Vec<Sentence> = (0..25).map(|i| sent(1 + i % 4)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = make_batches(&sents, 10, &mut rng).unwrap();
        let sizes: Vec<usize> = batches.iter().map(Batch::len).collect();
        assert_eq!(sizes, vec![10, 10, 5]);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..25).collect::<Vec<_>>());

        let pair = [sent(3), sent(5)];
        let b = &make_batches(&pair, 10, &mut rng).unwrap()[0];
        assert_eq!(b.padded_len(), 5);
        let mut sums: Vec<usize> = b.mask.iter().map(|m| m.iter().filter(|&&x| x).count()).collect();
        sums.sort();
        assert_eq!(sums, vec![3, 5]);
        for r in 0..2 {
            assert_eq!(b.unpadded(r), pair[b.indices[r]]);
        }
        assert!(make_batches(&pair, 0, &mut rng).is_err());
    }
}
