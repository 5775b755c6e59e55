use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Subject / sample class. `Pneumonia` is the positive (+1) class throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Control,
    Pneumonia,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Pneumonia
    }

    pub fn from_positive(positive: bool) -> Self {
        if positive {
            Label::Pneumonia
        } else {
            Label::Control
        }
    }

    /// −1 for control, +1 for pneumonia.
    pub fn sign(self) -> f64 {
        if self.is_positive() {
            1.0
        } else {
            -1.0
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Control => "control",
            Label::Pneumonia => "pneumonia",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "control" | "neg" | "-1" => Ok(Label::Control),
            "pneumonia" | "pos" | "1" | "+1" => Ok(Label::Pneumonia),
            other => Err(Error::Value(format!("unknown label {other:?}"))),
        }
    }
}

pub(crate) fn class_counts(labels: &[Label]) -> (usize, usize) {
    let pos = labels.iter().filter(|l| l.is_positive()).count();
    (labels.len() - pos, pos)
}
