use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{FormatCategory, TaskSpec};
use crate::error::{GtiError, Result};

/// Hidden sizes explored by the hidden-size sweep.
pub const STATE_SIZE_SWEEP: [usize; 3] = [100, 150, 200];

/// Network variants compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// BiLSTM-CRF on word, character and format features.
    Single1,
    /// [`Variant::Single1`] plus embeddings of the gold auxiliary tags.
    Single2,
    /// Auxiliary heads trained jointly; the main task sees only its encoder.
    Vanilla,
    /// Predicted auxiliary tags are embedded and fed to the main encoder.
    Pipeline,
    /// Interaction layer without the sigmoid gate.
    Ti,
    /// Full gated interaction layer.
    Gti,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Single1,
        Variant::Single2,
        Variant::Vanilla,
        Variant::Pipeline,
        Variant::Ti,
        Variant::Gti,
    ];

    pub fn has_aux_heads(self) -> bool {
        !matches!(self, Variant::Single1 | Variant::Single2)
    }

    pub fn has_interaction(self) -> bool {
        matches!(self, Variant::Ti | Variant::Gti)
    }

    pub fn uses_label_features(self) -> bool {
        matches!(self, Variant::Single2 | Variant::Pipeline)
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Single1 => "BiLSTM-CRF(1)",
            Variant::Single2 => "BiLSTM-CRF(2)",
            Variant::Vanilla => "Vanilla MTL",
            Variant::Pipeline => "Pipeline MTL",
            Variant::Ti => "TI",
            Variant::Gti => "GTI",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Single1 => "single1",
            Variant::Single2 => "single2",
            Variant::Vanilla => "vanilla",
            Variant::Pipeline => "pipeline",
            Variant::Ti => "ti",
            Variant::Gti => "gti",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = GtiError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| GtiError::arg(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtiConfig {
    pub d_word: usize,
    pub d_char: usize,
    pub n_char_filters: usize,
    pub char_kernel: usize,
    pub d_format: usize,
    pub state_size: usize,
    pub d_label: usize,
    pub word_vocab_size: usize,
    pub char_vocab_size: usize,
    pub main: TaskSpec,
    pub aux: Vec<TaskSpec>,
    pub variant: Variant,
    pub dropout_rate: f64,
    pub use_iobes_mask: bool,
}

impl GtiConfig {
    /// Defaults: 100-d words and characters, 30 width-3 filters, one-hot
    /// format features, 50-d label embeddings, dropout 0.25.
    pub fn new(main: TaskSpec, aux: Vec<TaskSpec>, word_vocab_size: usize, char_vocab_size: usize) -> Self {
        GtiConfig {
            d_word: 100,
            d_char: 100,
            n_char_filters: 30,
            char_kernel: 3,
            d_format: FormatCategory::COUNT,
            state_size: 200,
            d_label: 50,
            word_vocab_size,
            char_vocab_size,
            main,
            aux,
            variant: Variant::Gti,
            dropout_rate: 0.25,
            use_iobes_mask: false,
        }
    }

    /// Number of auxiliary tasks the variant actually trains or consumes.
    pub fn k(&self) -> usize {
        if self.variant == Variant::Single1 {
            0
        } else {
            self.aux.len()
        }
    }

    /// Width of `x_i = [w(x_i); charCNN(x_i); F(x_i)]`.
    pub fn token_dim(&self) -> usize {
        self.d_word + self.n_char_filters + self.d_format
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_word", self.d_word),
            ("d_char", self.d_char),
            ("n_char_filters", self.n_char_filters),
            ("char_kernel", self.char_kernel),
            ("d_format", self.d_format),
            ("state_size", self.state_size),
            ("d_label", self.d_label),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, d)| *d == 0) {
            return Err(GtiError::arg(format!("{name} must be positive")));
        }
        if self.variant != Variant::Single1 && self.aux.is_empty() {
            return Err(GtiError::arg(format!(
                "variant {} needs at least one auxiliary task",
                self.variant
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(GtiError::arg("dropout rate must lie in [0, 1)"));
        }
        for t in std::iter::once(&self.main).chain(&self.aux) {
            if t.tags.is_empty() {
                return Err(GtiError::arg(format!("task `{}` has no tags", t.name)));
            }
        }
        if self.word_vocab_size < 2 || self.char_vocab_size < 2 {
            return Err(GtiError::arg("vocabularies must include PAD and UNK"));
        }
        Ok(())
    }
}
