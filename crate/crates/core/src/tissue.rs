//! Tissue classes and signal modalities.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Number of tissue classes the classifier distinguishes.
pub const NUM_CLASSES: usize = 4;

/// Tissue in front of the needle tip.
///
/// The discriminant is the class index used by the classifier head and in
/// every report: gelatin 0, pork 1, beef 2, turkey 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TissueClass {
    Gelatin = 0,
    Pork = 1,
    Beef = 2,
    Turkey = 3,
}

impl TissueClass {
    pub const ALL: [TissueClass; NUM_CLASSES] = [
        TissueClass::Gelatin,
        TissueClass::Pork,
        TissueClass::Beef,
        TissueClass::Turkey,
    ];

    /// Classes a phantom can be built around (everything is embedded in gelatin).
    pub const MEATS: [TissueClass; 3] = [TissueClass::Pork, TissueClass::Beef, TissueClass::Turkey];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TissueClass::Gelatin => "gelatin",
            TissueClass::Pork => "pork",
            TissueClass::Beef => "beef",
            TissueClass::Turkey => "turkey",
        }
    }

    pub fn is_meat(self) -> bool {
        self != TissueClass::Gelatin
    }
}

impl fmt::Display for TissueClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TissueClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown tissue class `{s}`"))
    }
}

/// Which part of the complex OCT signal an array holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Intensity,
    Phase,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Intensity => "intensity",
            Modality::Phase => "phase",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
