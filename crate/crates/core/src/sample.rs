use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionTensor;
use crate::error::{MhsaError, Result};

/// Answer to a yes/no question. `Invalid` covers outputs that cannot be assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Answer {
    Yes,
    No,
    Invalid,
}

impl Answer {
    /// Store encoding: 0 = No, 1 = Yes.
    pub fn to_code(self) -> u8 {
        match self {
            Answer::No => 0,
            Answer::Yes => 1,
            Answer::Invalid => 255,
        }
    }

    pub fn from_code(code: u8) -> Option<Answer> {
        match code {
            0 => Some(Answer::No),
            1 => Some(Answer::Yes),
            _ => None,
        }
    }

    /// Index into a `[Yes, No]` answer distribution.
    pub fn index(self) -> Option<usize> {
        match self {
            Answer::Yes => Some(0),
            Answer::No => Some(1),
            Answer::Invalid => None,
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Answer::Yes => "Yes",
            Answer::No => "No",
            Answer::Invalid => "invalid",
        })
    }
}

impl FromStr for Answer {
    type Err = MhsaError;

    /// Only the exact strings `Yes` and `No` are valid answers.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "Yes" => Answer::Yes,
            "No" => Answer::No,
            _ => Answer::Invalid,
        })
    }
}

/// Hallucination label derived from the four-way class: classes 2 and 3 hallucinate.
pub fn halluc_label(class4: u8) -> Result<u8> {
    match class4 {
        0 | 1 => Ok(0),
        2 | 3 => Ok(1),
        other => Err(MhsaError::Label(i64::from(other))),
    }
}

/// One attention tensor with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub sample_id: u64,
    pub attention: AttentionTensor,
    pub class4: u8,
    pub gt_answer: Option<Answer>,
    pub question_id: Option<u64>,
}

impl LabeledSample {
    pub fn new(
        sample_id: u64,
        attention: AttentionTensor,
        class4: u8,
        gt_answer: Option<Answer>,
        question_id: Option<u64>,
    ) -> Result<Self> {
        halluc_label(class4)?;
        Ok(LabeledSample {
            sample_id,
            attention,
            class4,
            gt_answer,
            question_id,
        })
    }

    /// Binary hallucination label (1 = hallucinatory).
    pub fn y(&self) -> u8 {
        halluc_label(self.class4).expect("class4 validated at construction")
    }
}
