//! Central finite-difference audit of the joint-loss gradients.
//!
//! The auxiliary one-best tags are decoded once and then held fixed, so the
//! loss is a smooth function of every parameter in a neighbourhood of the
//! current point. Dropout is off. The frozen word table is unfrozen on a
//! private copy so that its gradient is audited too.

use std::fmt;

use rand::rngs::mock::StepRng;

use crate::data::Sentence;
use crate::error::{GtiError, Result};
use crate::graph::{Graph, OpKind};
use crate::layers::Mode;
use crate::model::{ForwardOptions, GtiModel, Variant};
use crate::params::{Gradients, ParamId};
use crate::synthetic::ToyTask;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    /// Largest `|a - fd| / max(1, |a|)` over the tensor.
    pub max_rel_error: f64,
    /// Every analytic and numerical component is exactly zero.
    pub all_zero: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub variant: Variant,
    pub tolerance: f64,
    pub checks: Vec<ParamCheck>,
    pub injected_fault: Option<OpKind>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.offenders().is_empty()
    }

    pub fn offenders(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !(c.max_rel_error < self.tolerance))
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn zero_gradient_params(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| c.all_zero)
            .map(|c| c.name.as_str())
            .collect()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n: usize = self.checks.iter().map(|c| c.numel).sum();
        writeln!(
            f,
            "gradcheck variant={} params={} scalars={} max_rel_error={:.3e} tolerance={:e}",
            self.variant,
            self.checks.len(),
            n,
            self.max_rel_error(),
            self.tolerance
        )?;
        if let Some(op) = self.injected_fault {
            writeln!(f, "injected fault: backward rule of `{op}`")?;
        }
        let zero = self.zero_gradient_params();
        if !zero.is_empty() {
            writeln!(f, "exactly-zero gradients: {}", zero.join(", "))?;
        }
        if self.passed() {
            write!(f, "PASS")
        } else {
            write!(f, "FAIL offending parameters: {}", self.offenders().join(", "))
        }
    }
}

/// Tiny model (8-d words, 8-d states, K = 2) and one sentence of at most
/// five tokens.
pub fn tiny_model(variant: Variant, seed: u64) -> Result<(GtiModel, Sentence)> {
    let task = ToyTask::new(4, seed, "ner", &["chunk", "pos"])?;
    let model = GtiModel::new(task.config(variant, 8), seed, None)?;
    let s = &task.sentences[0];
    Ok((model, s.truncated(s.len().min(5))))
}

/// Compares analytic and numerical gradients of the joint loss for every
/// parameter. `fault` skews one backward rule on the analytic pass.
pub fn gradcheck(
    model: &GtiModel,
    sentence: &Sentence,
    cfg: &GradcheckConfig,
    fault: Option<OpKind>,
) -> Result<GradcheckReport> {
    let mut model = model.clone();
    model.params.set_frozen(model.word_table, false);
    let pinned = model.predict(sentence)?.aux;
    let opts = ForwardOptions {
        aux_override: Some(&pinned),
    };

    let analytic = {
        let mut g = Graph::new(&model.params);
        if let Some(op) = fault {
            g.corrupt_backward(op);
        }
        let tr = model.forward(&mut g, sentence, Mode::Eval, &mut StepRng::new(0, 0), &opts)?;
        let j = tr
            .j_loss
            .ok_or_else(|| GtiError::arg("gradcheck needs every gold tag sequence"))?;
        g.backward(j)?
    };

    let ids: Vec<ParamId> = model
        .params
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(id, _)| id)
        .collect();
    let mut checks = Vec::with_capacity(ids.len());
    for id in ids {
        checks.push(check_param(&mut model, sentence, &opts, &analytic, id, cfg.step)?);
    }
    Ok(GradcheckReport {
        variant: model.config.variant,
        tolerance: cfg.tolerance,
        checks,
        injected_fault: fault,
    })
}

fn joint_loss(model: &GtiModel, sentence: &Sentence, opts: &ForwardOptions) -> Result<f64> {
    let mut g = Graph::new(&model.params);
    let tr = model.forward(&mut g, sentence, Mode::Eval, &mut StepRng::new(0, 0), opts)?;
    let j = tr
        .j_loss
        .ok_or_else(|| GtiError::arg("gradcheck needs every gold tag sequence"))?;
    Ok(g.value(j).item())
}

fn check_param(
    model: &mut GtiModel,
    sentence: &Sentence,
    opts: &ForwardOptions,
    analytic: &Gradients,
    id: ParamId,
    h: f64,
) -> Result<ParamCheck> {
    let numel = model.params.value(id).numel();
    let a = analytic.get(id);
    let mut worst: f64 = 0.0;
    let mut all_zero = true;
    for i in 0..numel {
        let orig = model.params.value(id).data()[i];
        model.params.value_mut(id).data_mut()[i] = orig + h;
        let up = joint_loss(model, sentence, opts)?;
        model.params.value_mut(id).data_mut()[i] = orig - h;
        let down = joint_loss(model, sentence, opts)?;
        model.params.value_mut(id).data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let ai = a.map_or(0.0, |t| t.data()[i]);
        all_zero &= ai == 0.0 && fd == 0.0;
        let err = (ai - fd).abs() / ai.abs().max(1.0);
        // NaN compares false, so it would never raise `worst`
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    Ok(ParamCheck {
        name: model.params.get(id).name.clone(),
        numel,
        max_rel_error: worst,
        all_zero,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single1_passes() {
        let (m, s) = tiny_model(Variant::Single1, 3).unwrap();
        let r = gradcheck(&m, &s, &GradcheckConfig::default(), None).unwrap();
        assert!(r.passed(), "{r}");
        assert!(r.checks.iter().any(|c| c.name == "embed.word"));
    }

    #[test]
    fn corrupted_tanh_is_caught() {
        let (m, s) = tiny_model(Variant::Single1, 3).unwrap();
        let r = gradcheck(&m, &s, &GradcheckConfig::default(), Some(OpKind::Tanh)).unwrap();
        assert!(!r.passed());
        let text = r.to_string();
        assert!(text.contains("`tanh`") && text.contains("FAIL"), "{text}");
    }
}
