//! The gated task interaction network and its ablation variants.
//!
//! Data flow for one sentence of `n` tokens (row vectors, so `W x` is
//! computed as `X Wᵀ` over all positions at once):
//!
//! ```text
//! x        = [w(x_i); charCNN(x_i); F(x_i)]                      n × d_x
//! S_m      = BiLSTM_m(dropout(x))                                n × 2d_h
//! S_aux^k  = BiLSTM_k(dropout(x))                                n × 2d_h
//! A^k      = W_A^k S_aux^k + b_A^k,  Y^k = viterbi(A^k)          n × t_k
//! L^k      = Lemb^k(Y^k),  h_a^k = Trans^k(L^k)                  n × 2d_h
//! ĝ_k      = W_k h_a^k + U_k S_m,  g_k = σ(ĝ_k) ⊙ h_a^k
//! z_f      = W_f Σ_k g_k
//! h_f^m    = tanh(W_m S_m + z_f),  h^m = BiLSTM(dropout(h_f^m))
//! A^m      = W_A h^m + b_A,  Y^m = viterbi(A^m)
//! J        = L_m + Σ_k L_k
//! ```
//!
//! `Y^k` is a discrete decode, so no gradient flows from the interaction
//! layer back into the auxiliary heads.

pub mod config;

use rand::Rng;

pub use config::{GtiConfig, Variant, STATE_SIZE_SWEEP};

use crate::crf::{self, build_iobes_mask, ConstraintMask, CrfHead};
use crate::data::{random_embeddings, Sentence, TaskSpec};
use crate::error::{GtiError, Result};
use crate::graph::{Graph, Var};
use crate::layers::{apply_dropout, BiLstm, CharCnn, Linear, Mode};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Linear emission layer plus CRF transitions for one task.
#[derive(Clone, Debug)]
pub struct TaskHead {
    pub proj: Linear,
    pub transitions: ParamId,
    pub mask: Option<ConstraintMask>,
}

impl TaskHead {
    fn register(store: &mut ParamStore, prefix: &str, task: &TaskSpec, d_in: usize, use_mask: bool) -> Result<Self> {
        let proj = Linear::register(store, &format!("{prefix}.proj"), task.n_tags(), d_in, true)?;
        let t = task.n_tags() + 2;
        let transitions = store.register(&format!("{prefix}.crf.transitions"), Tensor::zeros(&[t, t]))?;
        let mask = if use_mask && task.span {
            Some(build_iobes_mask(&task.tags)?)
        } else {
            None
        };
        Ok(TaskHead {
            proj,
            transitions,
            mask,
        })
    }

    pub fn crf_head(&self, store: &ParamStore) -> CrfHead {
        CrfHead::new(store.value(self.transitions).clone(), self.mask.clone())
            .expect("transition shape fixed at registration")
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.proj.weight];
        ids.extend(self.proj.bias);
        ids.push(self.transitions);
        ids
    }
}

/// Interaction-layer parameters for one auxiliary task.
#[derive(Clone, Debug)]
pub struct GilBranch {
    pub label_table: ParamId,
    pub trans: BiLstm,
    pub w: ParamId,
    pub u: ParamId,
}

#[derive(Clone, Debug)]
pub struct Gil {
    pub branches: Vec<GilBranch>,
    pub w_f: ParamId,
}

impl Gil {
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for b in &self.branches {
            ids.push(b.label_table);
            ids.extend(b.trans.param_ids());
            ids.push(b.w);
            ids.push(b.u);
        }
        ids.push(self.w_f);
        ids
    }
}

/// Graph handles of every intermediate quantity of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    pub x: Option<Var>,
    pub s_m: Option<Var>,
    pub s_aux: Vec<Var>,
    pub aux_emissions: Vec<Var>,
    pub aux_pred: Vec<Vec<usize>>,
    pub aux_losses: Vec<Var>,
    pub label_emb: Vec<Var>,
    pub h_a: Vec<Var>,
    pub g_hat: Vec<Var>,
    pub g: Vec<Var>,
    pub z_f: Option<Var>,
    pub h_f: Option<Var>,
    pub h_m: Option<Var>,
    pub main_emissions: Option<Var>,
    pub main_pred: Vec<usize>,
    pub main_loss: Option<Var>,
    pub j_loss: Option<Var>,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions<'o> {
    /// Use these auxiliary tag sequences instead of decoding them.
    pub aux_override: Option<&'o [Vec<usize>]>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub main: Vec<usize>,
    pub aux: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct GtiModel {
    pub config: GtiConfig,
    pub params: ParamStore,
    pub word_table: ParamId,
    pub format_table: ParamId,
    pub char_cnn: CharCnn,
    pub main_encoder: BiLstm,
    pub aux_encoders: Vec<BiLstm>,
    pub aux_heads: Vec<TaskHead>,
    /// Tag-embedding tables feeding the main encoder (SINGLE2, PIPELINE).
    pub label_features: Vec<ParamId>,
    pub gil: Option<Gil>,
    pub w_m: ParamId,
    pub main_lstm: BiLstm,
    pub main_head: TaskHead,
}

/// Bound for randomly initialised label embeddings.
const LABEL_INIT_BOUND: f64 = 0.5;

impl GtiModel {
    /// Builds and initialises every parameter. `word_table` (frozen) is
    /// sampled from `U[-0.25, 0.25]` when not supplied.
    pub fn new(config: GtiConfig, seed: u64, word_table: Option<Tensor>) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut ps = ParamStore::new(seed);
        let d2 = 2 * c.state_size;

        let table = match word_table {
            Some(t) => {
                if t.shape() != [c.word_vocab_size, c.d_word] {
                    return Err(GtiError::Dimension {
                        op: "word table",
                        left: t.shape().to_vec(),
                        right: vec![c.word_vocab_size, c.d_word],
                    });
                }
                t
            }
            None => random_embeddings(c.word_vocab_size, c.d_word, ps.init_rng()),
        };
        let word_table = ps.register("embed.word", table)?;
        ps.set_frozen(word_table, true);
        let format_table = ps.register(
            "embed.format",
            Tensor::eye(crate::data::FormatCategory::COUNT, c.d_format),
        )?;
        let char_cnn = CharCnn::register(
            &mut ps,
            "embed.char",
            c.char_vocab_size,
            c.d_char,
            c.n_char_filters,
            c.char_kernel,
        )?;

        let k = c.k();
        let main_in = c.token_dim()
            + if c.variant.uses_label_features() {
                k * c.d_label
            } else {
                0
            };
        let main_encoder = BiLstm::register(&mut ps, "encoder.main", main_in, c.state_size)?;

        let mut aux_encoders = Vec::new();
        let mut aux_heads = Vec::new();
        if c.variant.has_aux_heads() {
            for (i, task) in c.aux.iter().enumerate() {
                aux_encoders.push(BiLstm::register(
                    &mut ps,
                    &format!("encoder.aux{i}"),
                    c.token_dim(),
                    c.state_size,
                )?);
                aux_heads.push(TaskHead::register(
                    &mut ps,
                    &format!("aux{i}"),
                    task,
                    d2,
                    c.use_iobes_mask,
                )?);
            }
        }

        let mut label_features = Vec::new();
        if c.variant.uses_label_features() {
            for (i, task) in c.aux.iter().enumerate() {
                label_features.push(ps.register_uniform(
                    &format!("features.aux{i}.label"),
                    &[task.n_tags(), c.d_label],
                    LABEL_INIT_BOUND,
                )?);
            }
        }

        let gil = if c.variant.has_interaction() || c.variant == Variant::Vanilla {
            let mut branches = Vec::new();
            for (i, task) in c.aux.iter().enumerate() {
                let p = format!("gil.aux{i}");
                let label_table =
                    ps.register_uniform(&format!("{p}.label"), &[task.n_tags(), c.d_label], LABEL_INIT_BOUND)?;
                let trans = BiLstm::register(&mut ps, &format!("{p}.trans"), c.d_label, c.state_size)?;
                let w = ps.register_glorot(&format!("{p}.compose.w"), d2, d2)?;
                let u = ps.register_glorot(&format!("{p}.compose.u"), d2, d2)?;
                branches.push(GilBranch {
                    label_table,
                    trans,
                    w,
                    u,
                });
            }
            let w_f = ps.register_glorot("gil.sum.w_f", d2, d2)?;
            let gil = Gil { branches, w_f };
            // VANILLA keeps the layer only as a disconnected reference
            if c.variant == Variant::Vanilla {
                for id in gil.param_ids() {
                    ps.set_active(id, false);
                }
            }
            Some(gil)
        } else {
            None
        };

        let w_m = ps.register_glorot("main.w_m", d2, d2)?;
        let main_lstm = BiLstm::register(&mut ps, "main.lstm", d2, c.state_size)?;
        let main_head = TaskHead::register(&mut ps, "main", &c.main, d2, c.use_iobes_mask)?;

        Ok(GtiModel {
            config,
            params: ps,
            word_table,
            format_table,
            char_cnn,
            main_encoder,
            aux_encoders,
            aux_heads,
            label_features,
            gil,
            w_m,
            main_lstm,
            main_head,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Scalar count over parameters wired into this variant's computation.
    pub fn parameter_count(&self) -> usize {
        self.params.active_count()
    }

    pub fn gil_param_ids(&self) -> Vec<ParamId> {
        self.gil.as_ref().map(Gil::param_ids).unwrap_or_default()
    }

    /// `x_i = [w(x_i); charCNN(x_i); F(x_i)]` for every token, as `[n, d_x]`.
    pub fn embed_tokens(&self, g: &mut Graph, s: &Sentence) -> Result<Var> {
        let n = s.len();
        if n == 0 {
            return Err(GtiError::Feature("empty sentence".into()));
        }
        if s.chars.len() != n || s.formats.len() != n {
            return Err(GtiError::Feature(format!(
                "sentence has {n} words but {} char lists and {} formats",
                s.chars.len(),
                s.formats.len()
            )));
        }
        let vocab = self.config.word_vocab_size;
        if let Some(&bad) = s.words.iter().find(|&&w| w >= vocab) {
            return Err(GtiError::Feature(format!(
                "word id {bad} outside vocabulary of {vocab}"
            )));
        }
        if let Some(&bad) = s.formats.iter().find(|&&f| f >= crate::data::FormatCategory::COUNT) {
            return Err(GtiError::Feature(format!("unknown format id {bad}")));
        }
        let wt = g.param(self.word_table);
        let words = g.gather(wt, &s.words)?;
        let char_vecs = s
            .chars
            .iter()
            .map(|cs| self.char_cnn.forward(g, cs))
            .collect::<Result<Vec<_>>>()?;
        let chars = g.stack_rows(&char_vecs)?;
        let ft = g.param(self.format_table);
        let formats = g.gather(ft, &s.formats)?;
        g.concat(&[words, chars, formats])
    }

    /// Full forward pass. Losses are attached wherever gold tags are present.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        s: &Sentence,
        mode: Mode,
        rng: &mut R,
        opts: &ForwardOptions,
    ) -> Result<ForwardTrace> {
        let c = &self.config;
        let rate = c.dropout_rate;
        let mut tr = ForwardTrace::default();
        let x = self.embed_tokens(g, s)?;
        tr.x = Some(x);

        // auxiliary tasks
        for (k, (enc, head)) in self.aux_encoders.iter().zip(&self.aux_heads).enumerate() {
            let xin = apply_dropout(g, x, rate, mode, rng)?;
            let s_aux = enc.forward(g, xin)?;
            let em = head.proj.forward(g, s_aux)?;
            let pred = match opts.aux_override {
                Some(o) => o
                    .get(k)
                    .cloned()
                    .ok_or_else(|| GtiError::arg(format!("no override for auxiliary task {k}")))?,
                None => crf::viterbi_decode(g.value(em), &head.crf_head(&self.params))?.0,
            };
            if pred.len() != s.len() {
                return Err(GtiError::arg("auxiliary override length differs from sentence"));
            }
            if let Some(Some(gold)) = s.aux.get(k) {
                let trans = g.param(head.transitions);
                tr.aux_losses
                    .push(crf::nll_loss(g, em, trans, gold, head.mask.as_ref())?);
            }
            tr.s_aux.push(s_aux);
            tr.aux_emissions.push(em);
            tr.aux_pred.push(pred);
        }

        // main encoder, optionally with tag features
        let mut main_in = x;
        if c.variant.uses_label_features() {
            let mut parts = vec![x];
            for (k, &table) in self.label_features.iter().enumerate() {
                let tags = match c.variant {
                    Variant::Single2 => s.aux.get(k).and_then(Option::as_ref).ok_or_else(|| {
                        GtiError::Feature(format!("gold `{}` tags required as input features", c.aux[k].name))
                    })?,
                    _ => &tr.aux_pred[k],
                };
                let t = g.param(table);
                parts.push(g.gather(t, tags)?);
            }
            main_in = g.concat(&parts)?;
        }
        let main_in = apply_dropout(g, main_in, rate, mode, rng)?;
        let s_m = self.main_encoder.forward(g, main_in)?;
        tr.s_m = Some(s_m);

        // interaction layer
        if c.variant.has_interaction() {
            let gil = self.gil.as_ref().expect("interaction variants register the layer");
            let mut sum: Option<Var> = None;
            for (k, br) in gil.branches.iter().enumerate() {
                let (l, h_a, g_hat, g_k) = self.gil_compose_gate(g, br, &tr.aux_pred[k], s_m, mode, rng)?;
                tr.label_emb.push(l);
                tr.h_a.push(h_a);
                tr.g_hat.push(g_hat);
                tr.g.push(g_k);
                sum = Some(match sum {
                    Some(acc) => g.add(acc, g_k)?,
                    None => g_k,
                });
            }
            let wf = g.param(gil.w_f);
            tr.z_f = Some(g.linear(sum.expect("K >= 1"), wf, None)?);
        }

        // main task
        let wm = g.param(self.w_m);
        let mut pre = g.linear(s_m, wm, None)?;
        if let Some(z) = tr.z_f {
            pre = g.add(pre, z)?;
        }
        let h_f = g.tanh(pre);
        let h_in = apply_dropout(g, h_f, rate, mode, rng)?;
        let h_m = self.main_lstm.forward(g, h_in)?;
        let em = self.main_head.proj.forward(g, h_m)?;
        tr.main_pred = crf::viterbi_decode(g.value(em), &self.main_head.crf_head(&self.params))?.0;
        if let Some(gold) = &s.main {
            let trans = g.param(self.main_head.transitions);
            tr.main_loss = Some(crf::nll_loss(g, em, trans, gold, self.main_head.mask.as_ref())?);
        }
        tr.h_f = Some(h_f);
        tr.h_m = Some(h_m);
        tr.main_emissions = Some(em);

        if tr.main_loss.is_some() && tr.aux_losses.len() == self.aux_heads.len() {
            tr.j_loss = Some(self.joint_loss(g, &tr)?);
        }
        Ok(tr)
    }

    /// Lemb, Trans, Compose and Gate for one auxiliary task. Returns
    /// `(L^k, h_a^k, ĝ_k, g_k)`; for TI, `g_k` is `ĝ_k` itself.
    pub fn gil_compose_gate<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        br: &GilBranch,
        tags: &[usize],
        s_m: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Var, Var, Var, Var)> {
        let rate = self.config.dropout_rate;
        let table = g.param(br.label_table);
        let l = g.gather(table, tags)?;
        let l_in = apply_dropout(g, l, rate, mode, rng)?;
        let h_a = br.trans.forward(g, l_in)?;
        let h_a = apply_dropout(g, h_a, rate, mode, rng)?;
        let (w, u) = (g.param(br.w), g.param(br.u));
        let wh = g.linear(h_a, w, None)?;
        let us = g.linear(s_m, u, None)?;
        let g_hat = g.add(wh, us)?;
        let g_k = match self.config.variant {
            Variant::Ti => g_hat,
            _ => gate(g, g_hat, h_a)?,
        };
        Ok((l, h_a, g_hat, g_k))
    }

    /// `J = L_m + Σ_k L_k`.
    pub fn joint_loss(&self, g: &mut Graph, tr: &ForwardTrace) -> Result<Var> {
        let main = tr
            .main_loss
            .ok_or_else(|| GtiError::arg("joint loss needs gold main-task tags"))?;
        if tr.aux_losses.len() != self.aux_heads.len() {
            return Err(GtiError::arg(format!(
                "joint loss needs gold tags for all {} auxiliary tasks, got {}",
                self.aux_heads.len(),
                tr.aux_losses.len()
            )));
        }
        joint_loss(g, main, &tr.aux_losses)
    }

    /// Eval-mode decode of every task.
    pub fn predict(&self, s: &Sentence) -> Result<Prediction> {
        let mut g = Graph::new(&self.params);
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let tr = self.forward(&mut g, s, Mode::Eval, &mut rng, &ForwardOptions::default())?;
        Ok(Prediction {
            main: tr.main_pred,
            aux: tr.aux_pred,
        })
    }

    /// Joint loss and its gradients for one sentence.
    pub fn loss_and_grads<R: Rng + ?Sized>(&self, s: &Sentence, mode: Mode, rng: &mut R) -> Result<(f64, Gradients)> {
        let mut g = Graph::new(&self.params);
        let tr = self.forward(&mut g, s, mode, rng, &ForwardOptions::default())?;
        let j = match tr.j_loss {
            Some(j) => j,
            None => self.joint_loss(&mut g, &tr)?,
        };
        let value = g.value(j).item();
        Ok((value, g.backward(j)?))
    }

    /// Mean joint loss over sentences and the matching mean gradients.
    pub fn batch_loss_and_grads<R: Rng + ?Sized>(
        &self,
        sentences: &[&Sentence],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(f64, Gradients)> {
        if sentences.is_empty() {
            return Err(GtiError::arg("empty batch"));
        }
        let scale = 1.0 / sentences.len() as f64;
        let mut total = 0.0;
        let mut grads = Gradients::new(self.params.len());
        for s in sentences {
            let (l, gr) = self.loss_and_grads(s, mode, rng)?;
            total += l;
            grads.merge_scaled(&gr, scale);
        }
        Ok((total * scale, grads))
    }
}

/// `σ(ĝ) ⊙ h_a`.
pub fn gate(g: &mut Graph, g_hat: Var, h_a: Var) -> Result<Var> {
    let s = g.sigmoid(g_hat);
    g.mul(s, h_a)
}

/// `z_f = W_f Σ_k g_k` with one shared `W_f`.
pub fn gil_sum(g: &mut Graph, gs: &[Var], w_f: Var) -> Result<Var> {
    let (first, rest) = gs
        .split_first()
        .ok_or_else(|| GtiError::arg("sum block needs at least one input"))?;
    let mut acc = *first;
    for &x in rest {
        acc = g.add(acc, x)?;
    }
    g.linear(acc, w_f, None)
}

/// Unweighted sum of the main and auxiliary losses.
pub fn joint_loss(g: &mut Graph, main: Var, aux: &[Var]) -> Result<Var> {
    let mut acc = main;
    for &l in aux {
        acc = g.add(acc, l)?;
    }
    Ok(acc)
}
