use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The four mpMRI acquisition types, in the fixed order used for feature
/// vectors and cache codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    T1w,
    T1wCE,
    T2w,
    #[serde(rename = "FLAIR")]
    Flair,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T1w, Modality::T1wCE, Modality::T2w, Modality::Flair];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::T1w => "T1w",
            Modality::T1wCE => "T1wCE",
            Modality::T2w => "T2w",
            Modality::Flair => "FLAIR",
        }
    }

    /// One-byte code used by the volume cache format.
    pub fn code(self) -> u8 {
        match self {
            Modality::T1w => 0,
            Modality::T1wCE => 1,
            Modality::T2w => 2,
            Modality::Flair => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn index(self) -> usize {
        self.code() as usize
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown modality {0:?} (expected T1w, T1wCE, T2w or FLAIR)")]
pub struct ParseModalityError(pub String);

impl FromStr for Modality {
    type Err = ParseModalityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| ParseModalityError(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_round_trip() {
        for m in Modality::ALL {
            assert_eq!(Modality::from_code(m.code()), Some(m));
            assert_eq!(m.as_str().parse::<Modality>().unwrap(), m);
        }
        assert_eq!(Modality::from_code(4), None);
        assert!("T3".parse::<Modality>().is_err());
        assert_eq!("flair".parse::<Modality>().unwrap(), Modality::Flair);
    }
}
