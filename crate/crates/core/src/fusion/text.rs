use crate::backbone::{BOS, SEP};
use crate::numerics::Real;

/// Longest prompt, counting the leading [`BOS`].
pub const MAX_PROMPT_TOKENS: usize = 64;

/// Task description fed to the decoder as its token sequence.
///
/// The dataset name is shortened when needed so the prompt, including
/// [`BOS`], stays within [`MAX_PROMPT_TOKENS`].
pub fn prompt_text(dataset: &str, lookback: usize, horizon: usize, channel: usize) -> String {
    let tail = format!("|task:forecast|T:{lookback}|H:{horizon}|ch:{channel}");
    let budget = (MAX_PROMPT_TOKENS - 1).saturating_sub("dataset:".len() + tail.len());
    let mut name = dataset;
    while name.len() > budget {
        let mut cut = budget.min(name.len() - 1);
        while !name.is_char_boundary(cut) {
            cut -= 1;
        }
        name = &name[..cut];
    }
    format!("dataset:{name}{tail}")
}

pub fn prompt_tokens(dataset: &str, lookback: usize, horizon: usize, channel: usize) -> Vec<usize> {
    let mut ids = vec![BOS];
    ids.extend(prompt_text(dataset, lookback, horizon, channel).bytes().map(usize::from));
    ids
}

/// Values rounded to two decimals and joined by `,`.
pub fn serialize_values<T: Real>(values: &[T]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{:.2}", v.as_f64())).collect();
    parts.join(",")
}

/// `prompt SEP serialized-values`, one token per character.
pub fn plain_tokens<T: Real>(prompt: &[usize], values: &[T]) -> Vec<usize> {
    let mut ids = prompt.to_vec();
    ids.push(SEP);
    ids.extend(serialize_values(values).bytes().map(usize::from));
    ids
}
