//! Coarse orthographic class of a token.

use serde::{Deserialize, Serialize};

use crate::error::{GtiError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FormatCategory {
    Numeric,
    Punct,
    AllLower,
    InitUpper,
    AllUpper,
    AlnumMixed,
    Other,
}

impl FormatCategory {
    pub const COUNT: usize = 7;

    pub fn index(self) -> usize {
        self as usize
    }
}

/// First matching rule wins: numeric, punctuation, all-lower, all-upper,
/// capitalised, letters mixed with digits, anything else.
pub fn classify_word_format(token: &str) -> Result<FormatCategory> {
    if token.is_empty() {
        return Err(GtiError::arg("cannot classify an empty token"));
    }
    let chars: Vec<char> = token.chars().collect();
    let has_digit = chars.iter().any(|c| c.is_numeric());
    let has_alpha = chars.iter().any(|c| c.is_alphabetic());

    let cat = if has_digit && chars.iter().all(|&c| c.is_numeric() || matches!(c, '.' | ',' | '-')) {
        FormatCategory::Numeric
    } else if chars.iter().all(|c| !c.is_alphanumeric() && !c.is_whitespace()) {
        FormatCategory::Punct
    } else if chars.iter().all(|c| c.is_alphabetic() && c.is_lowercase()) {
        FormatCategory::AllLower
    } else if chars.iter().all(|c| c.is_alphabetic() && c.is_uppercase()) {
        FormatCategory::AllUpper
    } else if chars[0].is_uppercase() && chars[1..].iter().all(|c| c.is_alphabetic() && c.is_lowercase()) {
        FormatCategory::InitUpper
    } else if has_alpha && has_digit {
        FormatCategory::AlnumMixed
    } else {
        FormatCategory::Other
    };
    Ok(cat)
}
