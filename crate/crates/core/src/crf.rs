//! Linear-chain CRF: sequence scoring, the forward algorithm, marginals,
//! negative log-likelihood and Viterbi decoding.
//!
//! Transition matrices are `(t + 2) × (t + 2)` and indexed `[from, to]`; the
//! two extra states are the virtual START (`t`) and STOP (`t + 1`). Moves into
//! START or out of STOP are never scored.

use crate::data::scheme::{split_tag, Prefix};
use crate::error::{GtiError, Result};
use crate::graph::{logsumexp, Graph, Var};
use crate::tensor::Tensor;

/// Stand-in for −∞ on differentiable paths.
pub const FORBIDDEN_PENALTY: f64 = -1e4;

/// Which transitions a tag scheme permits, over the `(t + 2)²` state pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintMask {
    size: usize,
    allowed: Vec<bool>,
}

impl ConstraintMask {
    pub fn allow_all(n_tags: usize) -> Self {
        let size = n_tags + 2;
        ConstraintMask {
            size,
            allowed: vec![true; size * size],
        }
    }

    pub fn n_tags(&self) -> usize {
        self.size - 2
    }

    pub fn allows(&self, from: usize, to: usize) -> bool {
        self.allowed[from * self.size + to]
    }

    fn set(&mut self, from: usize, to: usize, ok: bool) {
        self.allowed[from * self.size + to] = ok;
    }

    /// Additive transition penalty: 0 where permitted, [`FORBIDDEN_PENALTY`]
    /// elsewhere.
    pub fn penalty(&self) -> Tensor {
        let data = self
            .allowed
            .iter()
            .map(|&ok| if ok { 0.0 } else { FORBIDDEN_PENALTY })
            .collect();
        Tensor::matrix(self.size, self.size, data).expect("square by construction")
    }
}

/// Transition mask for the IOBES scheme over the given tag inventory.
pub fn build_iobes_mask(tag_names: &[String]) -> Result<ConstraintMask> {
    let parsed = tag_names.iter().map(|t| split_tag(t)).collect::<Result<Vec<_>>>()?;
    let t = tag_names.len();
    let (start, stop) = (t, t + 1);
    let mut mask = ConstraintMask {
        size: t + 2,
        allowed: vec![false; (t + 2) * (t + 2)],
    };
    // a chunk may open after START or after a closed position
    let opens = |p: Prefix| matches!(p, Prefix::O | Prefix::B | Prefix::S);
    for (to, &(tp, _)) in parsed.iter().enumerate() {
        mask.set(start, to, opens(tp));
    }
    for (from, &(fp, fty)) in parsed.iter().enumerate() {
        let closed = matches!(fp, Prefix::O | Prefix::E | Prefix::S);
        mask.set(from, stop, closed);
        for (to, &(tp, tty)) in parsed.iter().enumerate() {
            let ok = if closed {
                opens(tp)
            } else {
                matches!(tp, Prefix::I | Prefix::E) && tty == fty
            };
            mask.set(from, to, ok);
        }
    }
    Ok(mask)
}

/// One CRF output layer: transitions plus an optional hard constraint mask.
#[derive(Clone, Debug)]
pub struct CrfHead {
    pub n_tags: usize,
    pub transitions: Tensor,
    pub constraint_mask: Option<ConstraintMask>,
}

impl CrfHead {
    pub fn new(transitions: Tensor, constraint_mask: Option<ConstraintMask>) -> Result<Self> {
        let size = transitions.rows();
        if transitions.shape().len() != 2 || transitions.cols() != size || size < 3 {
            return Err(GtiError::Dimension {
                op: "crf head",
                left: transitions.shape().to_vec(),
                right: vec![],
            });
        }
        if let Some(m) = &constraint_mask {
            if m.size != size {
                return Err(GtiError::Dimension {
                    op: "crf mask",
                    left: vec![size, size],
                    right: vec![m.size, m.size],
                });
            }
        }
        Ok(CrfHead {
            n_tags: size - 2,
            transitions,
            constraint_mask,
        })
    }

    pub fn zeros(n_tags: usize) -> Self {
        CrfHead {
            n_tags,
            transitions: Tensor::zeros(&[n_tags + 2, n_tags + 2]),
            constraint_mask: None,
        }
    }

    pub fn start(&self) -> usize {
        self.n_tags
    }

    pub fn stop(&self) -> usize {
        self.n_tags + 1
    }

    /// Transitions with forbidden moves set to exact −∞.
    fn decode_transitions(&self) -> Tensor {
        let mut t = self.transitions.clone();
        if let Some(mask) = &self.constraint_mask {
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                if !mask.allowed[i] {
                    *x = f64::NEG_INFINITY;
                }
            }
        }
        t
    }
}

fn check_emissions(em: &Tensor, trans: &Tensor) -> Result<(usize, usize)> {
    let (n, t) = (em.rows(), em.cols());
    if em.shape().len() != 2 || n == 0 || trans.shape() != [t + 2, t + 2] {
        return Err(GtiError::Dimension {
            op: "crf emissions",
            left: em.shape().to_vec(),
            right: trans.shape().to_vec(),
        });
    }
    Ok((n, t))
}

/// Unnormalised score of `tags` under raw emissions and transitions.
pub(crate) fn score_with(em: &Tensor, trans: &Tensor, tags: &[usize]) -> Result<f64> {
    let (n, t) = check_emissions(em, trans)?;
    if tags.len() != n {
        return Err(GtiError::arg(format!("{} tags for {n} tokens", tags.len())));
    }
    if let Some(&bad) = tags.iter().find(|&&y| y >= t) {
        return Err(GtiError::arg(format!("tag id {bad} out of range for {t} tags")));
    }
    let (start, stop) = (t, t + 1);
    let mut s = trans.get(start, tags[0]) + trans.get(tags[n - 1], stop);
    for (i, &y) in tags.iter().enumerate() {
        s += em.get(i, y);
        if i > 0 {
            s += trans.get(tags[i - 1], y);
        }
    }
    Ok(s)
}

/// `T[START, y₁] + Σ em[i, yᵢ] + Σ T[yᵢ₋₁, yᵢ] + T[yₙ, STOP]`.
pub fn score_sequence(em: &Tensor, tags: &[usize], head: &CrfHead) -> Result<f64> {
    score_with(em, &head.decode_transitions(), tags)
}

/// Forward recursion: `alpha[i][y]` is the log-sum of all prefixes ending in
/// `y` at position `i`.
fn forward(em: &Tensor, trans: &Tensor) -> Result<(Tensor, f64)> {
    let (n, t) = check_emissions(em, trans)?;
    let (start, stop) = (t, t + 1);
    let mut alpha = Tensor::zeros(&[n, t]);
    for y in 0..t {
        alpha.set(0, y, trans.get(start, y) + em.get(0, y));
    }
    let mut buf = vec![0.0; t];
    for i in 1..n {
        for y in 0..t {
            for (yp, b) in buf.iter_mut().enumerate() {
                *b = alpha.get(i - 1, yp) + trans.get(yp, y);
            }
            alpha.set(i, y, em.get(i, y) + logsumexp(&buf)?);
        }
    }
    for (y, b) in buf.iter_mut().enumerate() {
        *b = alpha.get(n - 1, y) + trans.get(y, stop);
    }
    let log_z = logsumexp(&buf)?;
    Ok((alpha, log_z))
}

/// Exact log-partition function over all `tⁿ` tag sequences.
pub fn log_partition(em: &Tensor, head: &CrfHead) -> Result<f64> {
    Ok(forward(em, &head.decode_transitions())?.1)
}

pub(crate) struct ForwardBackward {
    pub log_z: f64,
    /// Per-position tag marginals, `[n, t]`.
    pub unary: Tensor,
    /// Expected transition counts, `[t + 2, t + 2]`.
    pub pairwise: Tensor,
}

pub(crate) fn forward_backward(em: &Tensor, trans: &Tensor) -> Result<ForwardBackward> {
    let (alpha, log_z) = forward(em, trans)?;
    if !log_z.is_finite() {
        return Err(GtiError::Numerical("CRF partition function is not finite".into()));
    }
    let (n, t) = (em.rows(), em.cols());
    let (start, stop) = (t, t + 1);

    let mut beta = Tensor::zeros(&[n, t]);
    for y in 0..t {
        beta.set(n - 1, y, trans.get(y, stop));
    }
    let mut buf = vec![0.0; t];
    for i in (0..n - 1).rev() {
        for y in 0..t {
            for (yn, b) in buf.iter_mut().enumerate() {
                *b = trans.get(y, yn) + em.get(i + 1, yn) + beta.get(i + 1, yn);
            }
            beta.set(i, y, logsumexp(&buf)?);
        }
    }

    let mut unary = Tensor::zeros(&[n, t]);
    for i in 0..n {
        for y in 0..t {
            unary.set(i, y, (alpha.get(i, y) + beta.get(i, y) - log_z).exp());
        }
    }
    let mut pairwise = Tensor::zeros(&[t + 2, t + 2]);
    for y in 0..t {
        pairwise.set(start, y, unary.get(0, y));
        pairwise.set(y, stop, unary.get(n - 1, y));
    }
    for i in 1..n {
        for yp in 0..t {
            let a = alpha.get(i - 1, yp);
            for y in 0..t {
                let p = (a + trans.get(yp, y) + em.get(i, y) + beta.get(i, y) - log_z).exp();
                let cur = pairwise.get(yp, y);
                pairwise.set(yp, y, cur + p);
            }
        }
    }
    Ok(ForwardBackward { log_z, unary, pairwise })
}

/// Negative log-likelihood of `gold` as a graph node, differentiable with
/// respect to both the emissions and the transition parameter. Forbidden
/// moves under `mask` cost [`FORBIDDEN_PENALTY`].
pub fn nll_loss(g: &mut Graph, em: Var, trans: Var, gold: &[usize], mask: Option<&ConstraintMask>) -> Result<Var> {
    let penalty = mask.map(ConstraintMask::penalty);
    // validates shapes and tag ids before the fused op runs
    score_with(g.value(em), g.value(trans), gold)?;
    g.crf_nll(em, trans, gold, penalty.as_ref())
}

/// Highest-scoring tag sequence and its score. Ties go to the lower tag id.
pub fn viterbi_decode(em: &Tensor, head: &CrfHead) -> Result<(Vec<usize>, f64)> {
    let trans = head.decode_transitions();
    let (n, t) = check_emissions(em, &trans)?;
    let (start, stop) = (t, t + 1);
    let mut delta = vec![0.0; t];
    for (y, d) in delta.iter_mut().enumerate() {
        *d = trans.get(start, y) + em.get(0, y);
    }
    let mut back = vec![vec![0usize; t]; n];
    let mut next = vec![0.0; t];
    for i in 1..n {
        for y in 0..t {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for (yp, d) in delta.iter().enumerate() {
                let s = d + trans.get(yp, y);
                if s > best {
                    best = s;
                    arg = yp;
                }
            }
            next[y] = best + em.get(i, y);
            back[i][y] = arg;
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let mut best = f64::NEG_INFINITY;
    let mut last = 0;
    for (y, d) in delta.iter().enumerate() {
        let s = d + trans.get(y, stop);
        if s > best {
            best = s;
            last = y;
        }
    }
    let mut tags = vec![last; n];
    for i in (1..n).rev() {
        tags[i - 1] = back[i][tags[i]];
    }
    Ok((tags, best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for x in t.data_mut() {
            *x = rng.gen_range(-2.0..2.0);
        }
        t
    }

    fn all_sequences(n: usize, t: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..n {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..t).map(move |y| {
                        let mut q = p.clone();
                        q.push(y);
                        q
                    })
                })
                .collect();
        }
        out
    }

    /// Direct summation, independent of `score_with`.
    fn hand_score(em: &Tensor, tr: &Tensor, tags: &[usize]) -> f64 {
        let t = em.cols();
        let mut s = 0.0;
        let mut prev = t;
        for (i, &y) in tags.iter().enumerate() {
            s += tr.get(prev, y) + em.get(i, y);
            prev = y;
        }
        s + tr.get(prev, t + 1)
    }

    #[test]
    fn score_examples() {
        let head = CrfHead::zeros(2);
        assert_eq!(score_sequence(&Tensor::zeros(&[3, 2]), &[1, 0, 1], &head).unwrap(), 0.0);
        let em = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(score_sequence(&em, &[1], &head).unwrap(), 2.0);
        assert!(score_sequence(&em, &[2], &head).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let em = random(&mut rng, &[3, 2]);
        let head = CrfHead::new(random(&mut rng, &[4, 4]), None).unwrap();
        for tags in all_sequences(3, 2) {
            let s = score_sequence(&em, &tags, &head).unwrap();
            assert!((s - hand_score(&em, &head.transitions, &tags)).abs() < 1e-12);
        }
    }

    #[test]
    fn log_partition_examples() {
        let head = CrfHead::zeros(2);
        let z = log_partition(&Tensor::zeros(&[3, 2]), &head).unwrap();
        assert!((z - 3.0 * 2f64.ln()).abs() < 1e-12);
        assert!((z - 2.079_442).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let em = random(&mut rng, &[1, 3]);
        let head = CrfHead::new(random(&mut rng, &[5, 5]), None).unwrap();
        let closed: Vec<f64> = (0..3)
            .map(|y| head.transitions.get(3, y) + em.get(0, y) + head.transitions.get(y, 4))
            .collect();
        assert!((log_partition(&em, &head).unwrap() - logsumexp(&closed).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn log_partition_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let em = random(&mut rng, &[4, 3]);
        let head = CrfHead::new(random(&mut rng, &[5, 5]), None).unwrap();
        let seqs = all_sequences(4, 3);
        assert_eq!(seqs.len(), 81);
        let scores: Vec<f64> = seqs.iter().map(|s| hand_score(&em, &head.transitions, s)).collect();
        let brute = logsumexp(&scores).unwrap();
        assert!((log_partition(&em, &head).unwrap() - brute).abs() < 1e-9);
    }

    #[test]
    fn nll_examples() {
        let store = ParamStore::new(0);
        let mut g = Graph::new(&store);
        let em = g.constant(Tensor::zeros(&[2, 2]));
        let tr = g.constant(Tensor::zeros(&[4, 4]));
        let l = nll_loss(&mut g, em, tr, &[0, 1], None).unwrap();
        assert!((g.value(l).item() - 2.0 * 2f64.ln()).abs() < 1e-12);

        let gold = [1, 0, 1];
        let mut e = Tensor::zeros(&[3, 2]);
        for (i, &y) in gold.iter().enumerate() {
            e.set(i, y, 100.0);
        }
        let em = g.constant(e);
        let tr = g.constant(Tensor::zeros(&[4, 4]));
        let l = nll_loss(&mut g, em, tr, &gold, None).unwrap();
        let v = g.value(l).item();
        assert!((0.0..1e-10).contains(&v), "{v}");
    }

    #[test]
    fn nll_gradient_is_marginals_minus_gold() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, t) = (3, 3);
        let em0 = random(&mut rng, &[n, t]);
        let tr0 = random(&mut rng, &[t + 2, t + 2]);
        let gold = [2, 0, 1];

        let store = ParamStore::new(0);
        let mut g = Graph::new(&store);
        let em = g.input(em0.clone());
        let tr = g.input(tr0.clone());
        let l = nll_loss(&mut g, em, tr, &gold, None).unwrap();
        let grads = g.backward_inputs(l, &[em, tr]).unwrap();

        // marginals by enumeration
        let seqs = all_sequences(n, t);
        let scores: Vec<f64> = seqs.iter().map(|s| hand_score(&em0, &tr0, s)).collect();
        let z = logsumexp(&scores).unwrap();
        let mut marg = Tensor::zeros(&[n, t]);
        let mut trans_exp = Tensor::zeros(&[t + 2, t + 2]);
        for (s, sc) in seqs.iter().zip(&scores) {
            let p = (sc - z).exp();
            let mut prev = t;
            for (i, &y) in s.iter().enumerate() {
                marg.set(i, y, marg.get(i, y) + p);
                trans_exp.set(prev, y, trans_exp.get(prev, y) + p);
                prev = y;
            }
            trans_exp.set(prev, t + 1, trans_exp.get(prev, t + 1) + p);
        }
        let mut prev = t;
        for (i, &y) in gold.iter().enumerate() {
            marg.set(i, y, marg.get(i, y) - 1.0);
            trans_exp.set(prev, y, trans_exp.get(prev, y) - 1.0);
            prev = y;
        }
        trans_exp.set(prev, t + 1, trans_exp.get(prev, t + 1) - 1.0);
        assert!(grads[0].max_abs_diff(&marg) < 1e-10);
        assert!(grads[1].max_abs_diff(&trans_exp) < 1e-10);
    }

    #[test]
    fn viterbi_examples() {
        let head = CrfHead::zeros(3);
        let em = Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(viterbi_decode(&em, &head).unwrap().0, vec![1, 0, 2]);
        let (tags, score) = viterbi_decode(&Tensor::zeros(&[4, 3]), &head).unwrap();
        assert_eq!(tags, vec![0, 0, 0, 0]);
        assert_eq!(score, 0.0);
    }

    #[test]
    fn viterbi_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let em = random(&mut rng, &[5, 4]);
        let head = CrfHead::new(random(&mut rng, &[6, 6]), None).unwrap();
        let seqs = all_sequences(5, 4);
        assert_eq!(seqs.len(), 1024);
        let best = seqs
            .iter()
            .max_by(|a, b| {
                hand_score(&em, &head.transitions, a)
                    .partial_cmp(&hand_score(&em, &head.transitions, b))
                    .unwrap()
            })
            .unwrap();
        let (tags, score) = viterbi_decode(&em, &head).unwrap();
        assert_eq!(&tags, best);
        assert!((score - hand_score(&em, &head.transitions, best)).abs() < 1e-12);
    }

    fn names(tags: &[&str]) -> Vec<String> {
        tags.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn iobes_mask_examples() {
        let tags = names(&[
            "O", "B-LOC", "I-LOC", "E-LOC", "S-LOC", "B-PER", "E-PER", "I-MISC", "I-ORG",
        ]);
        let m = build_iobes_mask(&tags).unwrap();
        let idx = |s: &str| tags.iter().position(|t| t == s).unwrap();
        let stop = tags.len() + 1;
        let start = tags.len();
        assert!(!m.allows(idx("B-LOC"), idx("I-MISC")));
        assert!(m.allows(idx("B-PER"), idx("E-PER")));
        assert!(!m.allows(idx("I-ORG"), stop));
        assert!(m.allows(idx("B-LOC"), idx("I-LOC")));
        assert!(m.allows(idx("E-LOC"), idx("B-PER")));
        assert!(!m.allows(idx("O"), idx("I-LOC")));
        assert!(m.allows(start, idx("S-LOC")));
        assert!(!m.allows(start, idx("E-LOC")));
        assert!(m.allows(idx("S-LOC"), stop));
        assert!(matches!(build_iobes_mask(&names(&["O", "Q-X"])), Err(GtiError::Tag(t)) if t == "Q-X"));
    }

    #[test]
    fn masked_decode_respects_constraints() {
        let tags = names(&["O", "B-A", "I-A", "E-A", "S-A", "B-B", "E-B"]);
        let mask = build_iobes_mask(&tags).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n = rng.gen_range(1..8);
            let em = random(&mut rng, &[n, tags.len()]);
            let head = CrfHead::new(random(&mut rng, &[9, 9]), Some(mask.clone())).unwrap();
            let (seq, score) = viterbi_decode(&em, &head).unwrap();
            assert!(score.is_finite());
            assert!(mask.allows(7, seq[0]));
            assert!(mask.allows(seq[n - 1], 8));
            for w in seq.windows(2) {
                assert!(mask.allows(w[0], w[1]));
            }
        }
    }
}
