//! Phase labels and ordered phase sets.
//!
//! Everything downstream (node indexing, admittance blocks, measurement
//! functions) iterates phases in the fixed a, b, c order, so the set type
//! guarantees that order regardless of how the input was written.

use std::fmt;

use serde::de::Error as DeError;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// One phase of a three-phase system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    /// Index 0..=2 in a, b, c order.
    pub fn index(self) -> usize {
        match self {
            Phase::A => 0,
            Phase::B => 1,
            Phase::C => 2,
        }
    }

    pub fn label(self) -> char {
        match self {
            Phase::A => 'a',
            Phase::B => 'b',
            Phase::C => 'c',
        }
    }

    pub fn from_char(c: char) -> Option<Phase> {
        match c.to_ascii_lowercase() {
            'a' => Some(Phase::A),
            'b' => Some(Phase::B),
            'c' => Some(Phase::C),
            _ => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

/// Non-empty ordered subset of {a, b, c}.
///
/// Parsed from strings like `"abc"` or `"ac"`; duplicate or unknown letters
/// are rejected. Iteration order is always a, b, c.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PhaseSet(u8);

impl PhaseSet {
    pub fn abc() -> PhaseSet {
        PhaseSet(0b111)
    }

    pub fn single(phase: Phase) -> PhaseSet {
        PhaseSet(1 << phase.index())
    }

    pub fn from_str(s: &str) -> Result<PhaseSet, String> {
        if s.is_empty() {
            return Err("phase set must not be empty".into());
        }
        let mut mask = 0u8;
        for c in s.chars() {
            let phase = Phase::from_char(c)
                .ok_or_else(|| format!("unknown phase '{c}' (expected a, b or c)"))?;
            let bit = 1 << phase.index();
            if mask & bit != 0 {
                return Err(format!("duplicate phase '{c}' in phase set"));
            }
            mask |= bit;
        }
        Ok(PhaseSet(mask))
    }

    pub fn contains(self, phase: Phase) -> bool {
        self.0 & (1 << phase.index()) != 0
    }

    pub fn contains_all(self, other: PhaseSet) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Phases in a, b, c order.
    pub fn iter(self) -> impl Iterator<Item = Phase> {
        Phase::ALL.into_iter().filter(move |p| self.contains(*p))
    }

    /// Position of `phase` within this set's iteration order, if present.
    pub fn position(self, phase: Phase) -> Option<usize> {
        self.iter().position(|p| p == phase)
    }
}

impl fmt::Display for PhaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in self.iter() {
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

impl Serialize for PhaseSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PhaseSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        PhaseSet::from_str(&s).map_err(D::Error::custom)
    }
}
