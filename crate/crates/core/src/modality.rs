//! The modality registry and modality subsets.

use std::fmt;

use crate::error::{MagicError, Result};

/// One sensor stream. Declaration order is the registry order and never
/// changes: MLP slot assignment and file layouts depend on it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Rgb,
    Depth,
    Event,
    Lidar,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::Rgb,
        Modality::Depth,
        Modality::Event,
        Modality::Lidar,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Modality> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
            Modality::Event => "event",
            Modality::Lidar => "lidar",
        }
    }

    /// Single-letter tag used in subset strings such as `R+D+L`.
    pub fn letter(self) -> char {
        match self {
            Modality::Rgb => 'R',
            Modality::Depth => 'D',
            Modality::Event => 'E',
            Modality::Lidar => 'L',
        }
    }

    pub fn from_name(name: &str) -> Option<Modality> {
        Self::ALL.iter().copied().find(|m| m.name() == name)
    }

    pub fn from_letter(c: char) -> Option<Modality> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.letter() == c.to_ascii_uppercase())
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A set of modalities, iterated in registry order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ModalitySet(u8);

impl ModalitySet {
    pub const EMPTY: ModalitySet = ModalitySet(0);

    pub fn all() -> Self {
        Self::from_iter(Modality::ALL)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & (1 << m.index()) != 0
    }

    pub fn insert(&mut self, m: Modality) {
        self.0 |= 1 << m.index();
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset_of(self, other: ModalitySet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |m| self.contains(*m))
    }

    /// Every non-empty subset, ordered by size and then by registry order.
    pub fn non_empty_subsets(self) -> Vec<ModalitySet> {
        let members: Vec<Modality> = self.iter().collect();
        let mut out: Vec<ModalitySet> = (1u32..(1 << members.len()))
            .map(|mask| {
                members
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask & (1 << i) != 0)
                    .map(|(_, m)| *m)
                    .collect()
            })
            .collect();
        out.sort_by_key(|s: &ModalitySet| {
            let idx: Vec<usize> = s.iter().map(Modality::index).collect();
            (s.len(), idx)
        });
        out
    }

    /// Parse `R+D+L` (letters) or `rgb+depth` (names).
    pub fn parse(s: &str) -> Result<Self> {
        let mut set = ModalitySet::EMPTY;
        for part in s.split('+').map(str::trim).filter(|p| !p.is_empty()) {
            let m = if part.chars().count() == 1 {
                Modality::from_letter(part.chars().next().unwrap_or(' '))
            } else {
                Modality::from_name(&part.to_ascii_lowercase())
            };
            let m = m.ok_or_else(|| MagicError::arg(format!("unknown modality '{part}'")))?;
            set.insert(m);
        }
        if set.is_empty() {
            return Err(MagicError::arg(format!("empty modality subset '{s}'")));
        }
        Ok(set)
    }
}

impl FromIterator<Modality> for ModalitySet {
    fn from_iter<I: IntoIterator<Item = Modality>>(iter: I) -> Self {
        let mut s = ModalitySet::EMPTY;
        for m in iter {
            s.insert(m);
        }
        s
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.iter().map(|m| m.letter().to_string()).collect();
        f.write_str(&parts.join("+"))
    }
}
