use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A question with a target-style answer (`positive`) and a baseline-style
/// answer (`negative`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub id: String,
    pub question: String,
    pub positive: String,
    pub negative: String,
}

impl PromptPair {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        positive: impl Into<String>,
        negative: impl Into<String>,
    ) -> Result<Self> {
        let p = Self {
            id: id.into(),
            question: question.into(),
            positive: positive.into(),
            negative: negative.into(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.question.is_empty() || self.positive.is_empty() || self.negative.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "prompt pair {:?} has an empty field",
                self.id
            )));
        }
        Ok(())
    }

    pub fn swapped(&self) -> Self {
        Self {
            id: self.id.clone(),
            question: self.question.clone(),
            positive: self.negative.clone(),
            negative: self.positive.clone(),
        }
    }
}
