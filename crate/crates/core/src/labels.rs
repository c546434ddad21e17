//! Patch class taxonomy and per-class loss weights.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Patch classes. Codes are stable and used in label masks on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClassLabel {
    Healthy = 0,
    Bronchiectasis = 1,
    Abnormal = 2,
    Mucus = 3,
    Atelectasis = 4,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 5] = [
        ClassLabel::Healthy,
        ClassLabel::Bronchiectasis,
        ClassLabel::Abnormal,
        ClassLabel::Mucus,
        ClassLabel::Atelectasis,
    ];

    /// The four disease classes in scorer output order.
    pub const DISEASES: [ClassLabel; 4] = [
        ClassLabel::Bronchiectasis,
        ClassLabel::Abnormal,
        ClassLabel::Mucus,
        ClassLabel::Atelectasis,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::invalid(format!("invalid class code {code}")))
    }

    pub fn is_disease(self) -> bool {
        self != ClassLabel::Healthy
    }

    /// Rank when several diseases share a cell; higher wins.
    /// bronchiectasis > mucus > atelectasis > abnormal > healthy.
    pub fn priority(self) -> u8 {
        match self {
            ClassLabel::Healthy => 0,
            ClassLabel::Abnormal => 1,
            ClassLabel::Atelectasis => 2,
            ClassLabel::Mucus => 3,
            ClassLabel::Bronchiectasis => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Healthy => "healthy",
            ClassLabel::Bronchiectasis => "bronchiectasis",
            ClassLabel::Abnormal => "abnormal",
            ClassLabel::Mucus => "mucus",
            ClassLabel::Atelectasis => "atelectasis",
        }
    }

    /// Two-letter tag used in reports.
    pub fn short(self) -> &'static str {
        match self {
            ClassLabel::Healthy => "HE",
            ClassLabel::Bronchiectasis => "BE",
            ClassLabel::Abnormal => "AB",
            ClassLabel::Mucus => "MU",
            ClassLabel::Atelectasis => "AT",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s) || c.short().eq_ignore_ascii_case(s))
            .or_else(|| s.parse::<u8>().ok().and_then(|c| Self::from_code(c).ok()))
            .ok_or_else(|| Error::invalid(format!("unknown class label {s:?}")))
    }
}

/// Positive per-class weights for the weighted cross-entropy and the
/// forest's weighted Gini impurity.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights(BTreeMap<ClassLabel, f64>);

impl ClassWeights {
    pub fn new(entries: impl IntoIterator<Item = (ClassLabel, f64)>) -> Result<Self> {
        let map: BTreeMap<_, _> = entries.into_iter().collect();
        if let Some((c, w)) = map.iter().find(|(_, w)| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::invalid(format!("class weight for {c} must be positive, got {w}")));
        }
        Ok(Self(map))
    }

    /// Weight 1 for every class.
    pub fn uniform() -> Self {
        Self(ClassLabel::ALL.iter().map(|&c| (c, 1.0)).collect())
    }

    /// Disease weights of the scoring network: bronchiectasis 1.2, abnormal 1,
    /// mucus 1.8, atelectasis 1.8.
    pub fn scorer_default() -> Self {
        Self(
            [
                (ClassLabel::Bronchiectasis, 1.2),
                (ClassLabel::Abnormal, 1.0),
                (ClassLabel::Mucus, 1.8),
                (ClassLabel::Atelectasis, 1.8),
            ]
            .into_iter()
            .collect(),
        )
    }

    /// Scorer weights plus healthy 0.005, used by the direct 5-class net and the forest.
    pub fn direct_default() -> Self {
        let mut w = Self::scorer_default();
        w.0.insert(ClassLabel::Healthy, 0.005);
        w
    }

    pub fn get(&self, class: ClassLabel) -> Option<f64> {
        self.0.get(&class).copied()
    }

    pub fn set(&mut self, class: ClassLabel, weight: f64) -> Result<()> {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::invalid(format!("class weight for {class} must be positive, got {weight}")));
        }
        self.0.insert(class, weight);
        Ok(())
    }

    /// Weights in the order of `classes`; every class needs an entry.
    pub fn resolve(&self, classes: &[ClassLabel]) -> Result<Vec<f64>> {
        classes
            .iter()
            .map(|&c| {
                self.get(c)
                    .ok_or_else(|| Error::invalid(format!("no class weight for {c}")))
            })
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassLabel, f64)> + '_ {
        self.0.iter().map(|(&c, &w)| (c, w))
    }
}
