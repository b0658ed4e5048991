//! Token id layout and the context/target prompt split.

use crate::error::{invalid, Error, Result};
use crate::numerics::IGNORE_INDEX;

/// End-of-sequence id.
pub const EOS: usize = 0;
/// Ids below this are reserved (EOS and task tags); content token `c` is
/// stored as `c + N_RESERVED`.
pub const N_RESERVED: usize = 4;

pub fn content_to_id(c: usize) -> usize {
    c + N_RESERVED
}

pub fn id_to_content(id: usize) -> Option<usize> {
    id.checked_sub(N_RESERVED)
}

/// Model vocabulary size for `content` content tokens.
pub fn model_vocab(content: usize) -> usize {
    content + N_RESERVED
}

/// Context tokens (task tag, instructions) followed by target tokens.
/// The model reads `context ++ target` and is trained to emit
/// `target ++ [EOS]` starting from the last context position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptLayout {
    pub context_tokens: Vec<usize>,
    pub target_tokens: Vec<usize>,
}

impl PromptLayout {
    pub fn new(context_tokens: Vec<usize>, target_tokens: Vec<usize>) -> Result<Self> {
        if context_tokens.is_empty() {
            return Err(invalid("prompt needs at least one context token"));
        }
        Ok(Self { context_tokens, target_tokens })
    }

    /// Index of the first target token in the input sequence.
    pub fn boundary(&self) -> usize {
        self.context_tokens.len()
    }

    /// Number of leading rows that never see speech: every context row
    /// except the last, which predicts the first target token.
    pub fn mask_boundary(&self) -> usize {
        self.context_tokens.len() - 1
    }

    pub fn len(&self) -> usize {
        self.context_tokens.len() + self.target_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn input_ids(&self) -> Vec<usize> {
        let mut ids = self.context_tokens.clone();
        ids.extend_from_slice(&self.target_tokens);
        ids
    }

    /// Next-token labels aligned with `input_ids`; context rows other than
    /// the last are ignored.
    pub fn labels(&self) -> Vec<usize> {
        let mut labels = vec![IGNORE_INDEX; self.mask_boundary()];
        labels.extend_from_slice(&self.target_tokens);
        labels.push(EOS);
        labels
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.input_ids().into_iter().find(|&id| id >= vocab) {
            Some(id) => Err(Error::UnknownToken { id, vocab }),
            None => Ok(()),
        }
    }
}
