//! Reusable layers built on [`Graph`]: lookup tables, character CNN,
//! bidirectional LSTM and dropout.

use rand::Rng;

use crate::error::{GtiError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
}

pub fn activation(g: &mut Graph, kind: Activation, x: Var) -> Var {
    match kind {
        Activation::Sigmoid => g.sigmoid(x),
        Activation::Tanh => g.tanh(x),
    }
}

/// Row `id` of `table` as a vector.
pub fn embedding_lookup(g: &mut Graph, table: ParamId, id: usize) -> Result<Var> {
    let t = g.param(table);
    let rows = g.gather(t, &[id])?;
    g.row(rows, 0)
}

/// Inverted dropout. Identity in eval mode or at rate 0.
pub fn apply_dropout<R: Rng + ?Sized>(g: &mut Graph, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(GtiError::arg(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = g.shape(x).to_vec();
    let mut mask = Tensor::zeros(&shape);
    for m in mask.data_mut() {
        *m = if rng.gen::<f64>() < rate { 0.0 } else { keep };
    }
    g.mul_const(x, mask)
}

/// Character CNN: embed, convolve, tanh, max-over-time.
#[derive(Clone, Debug)]
pub struct CharCnn {
    pub table: ParamId,
    pub filters: ParamId,
    pub bias: ParamId,
    pub width: usize,
    pub pad_id: usize,
}

impl CharCnn {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;

    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        n_chars: usize,
        d_char: usize,
        n_filters: usize,
        width: usize,
    ) -> Result<Self> {
        let table = store.register_uniform(&format!("{prefix}.table"), &[n_chars, d_char], 0.5)?;
        let filters = store.register_glorot(&format!("{prefix}.filters"), n_filters, width * d_char)?;
        let bias = store.register(&format!("{prefix}.bias"), Tensor::zeros(&[n_filters]))?;
        Ok(CharCnn {
            table,
            filters,
            bias,
            width,
            pad_id: Self::PAD,
        })
    }

    pub fn forward(&self, g: &mut Graph, chars: &[usize]) -> Result<Var> {
        let mut ids = chars.to_vec();
        if ids.len() < self.width {
            ids.resize(self.width, self.pad_id);
        }
        let table = g.param(self.table);
        let n_chars = g.value(table).rows();
        for id in &mut ids {
            if *id >= n_chars {
                *id = Self::UNK;
            }
        }
        let embedded = g.gather(table, &ids)?;
        let filters = g.param(self.filters);
        let bias = g.param(self.bias);
        let conv = g.conv1d(embedded, filters, bias, self.width)?;
        let act = g.tanh(conv);
        g.max_rows(act)
    }
}

/// One LSTM direction. Gate order within the stacked weights is input,
/// forget, cell, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_h: usize,
}

impl Lstm {
    pub fn register(store: &mut ParamStore, prefix: &str, d_in: usize, d_h: usize) -> Result<Self> {
        let w_ih = store.register_glorot(&format!("{prefix}.w_ih"), 4 * d_h, d_in)?;
        let w_hh = store.register_glorot(&format!("{prefix}.w_hh"), 4 * d_h, d_h)?;
        let mut b = Tensor::zeros(&[4 * d_h]);
        for x in &mut b.data_mut()[d_h..2 * d_h] {
            *x = 1.0;
        }
        let bias = store.register(&format!("{prefix}.bias"), b)?;
        Ok(Lstm {
            w_ih,
            w_hh,
            bias,
            d_in,
            d_h,
        })
    }

    /// Runs over the rows of `xs: [n, d_in]`, in reverse when `reverse` is
    /// set, and returns hidden states aligned with the input positions.
    pub fn forward(&self, g: &mut Graph, xs: Var, reverse: bool) -> Result<Vec<Var>> {
        let w_ih = g.param(self.w_ih);
        let w_hh = g.param(self.w_hh);
        let bias = g.param(self.bias);
        let pre = g.linear(xs, w_ih, Some(bias))?;
        let n = g.value(xs).rows();
        let d = self.d_h;

        let mut out: Vec<Option<Var>> = vec![None; n];
        let mut state: Option<(Var, Var)> = None;
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..n).rev())
        } else {
            Box::new(0..n)
        };
        for t in order {
            let mut z = g.row(pre, t)?;
            if let Some((h, _)) = state {
                let rec = g.matvec(w_hh, h)?;
                z = g.add(z, rec)?;
            }
            let zi = g.slice(z, 0, d)?;
            let zf = g.slice(z, d, d)?;
            let zg = g.slice(z, 2 * d, d)?;
            let zo = g.slice(z, 3 * d, d)?;
            let i = g.sigmoid(zi);
            let f = g.sigmoid(zf);
            let cand = g.tanh(zg);
            let o = g.sigmoid(zo);
            let mut c = g.mul(i, cand)?;
            if let Some((_, c_prev)) = state {
                let keep = g.mul(f, c_prev)?;
                c = g.add(keep, c)?;
            }
            let tc = g.tanh(c);
            let h = g.mul(o, tc)?;
            out[t] = Some(h);
            state = Some((h, c));
        }
        Ok(out.into_iter().map(|h| h.expect("every position visited")).collect())
    }
}

#[derive(Clone, Debug)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    pub fn register(store: &mut ParamStore, prefix: &str, d_in: usize, d_h: usize) -> Result<Self> {
        Ok(BiLstm {
            fwd: Lstm::register(store, &format!("{prefix}.fwd"), d_in, d_h)?,
            bwd: Lstm::register(store, &format!("{prefix}.bwd"), d_in, d_h)?,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 6] {
        [
            self.fwd.w_ih,
            self.fwd.w_hh,
            self.fwd.bias,
            self.bwd.w_ih,
            self.bwd.w_hh,
            self.bwd.bias,
        ]
    }

    /// `xs: [n, d_in]` → `[n, 2·d_h]`, forward states first.
    pub fn forward(&self, g: &mut Graph, xs: Var) -> Result<Var> {
        let shape = g.shape(xs).to_vec();
        if shape.len() != 2 || shape[0] == 0 || shape[1] != self.fwd.d_in {
            return Err(GtiError::Dimension {
                op: "bilstm",
                left: shape,
                right: vec![self.fwd.d_in],
            });
        }
        let hf = self.fwd.forward(g, xs, false)?;
        let hb = self.bwd.forward(g, xs, true)?;
        let f = g.stack_rows(&hf)?;
        let b = g.stack_rows(&hb)?;
        g.concat(&[f, b])
    }
}

/// Affine map applied row-wise.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn register(store: &mut ParamStore, prefix: &str, d_out: usize, d_in: usize, bias: bool) -> Result<Self> {
        let weight = store.register_glorot(&format!("{prefix}.weight"), d_out, d_in)?;
        let bias = if bias {
            Some(store.register(&format!("{prefix}.bias"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, xs: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(xs, w, b)
    }
}
