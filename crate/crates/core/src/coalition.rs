//! Subsets of flexible units as bitmasks over unit indices.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::net_model::Case;

/// Largest supported player count.
pub const MAX_PLAYERS: usize = 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Coalition(pub u32);

impl Coalition {
    pub const EMPTY: Coalition = Coalition(0);

    pub fn grand(n: usize) -> Coalition {
        assert!(n <= MAX_PLAYERS, "at most {MAX_PLAYERS} players supported");
        Coalition(((1u64 << n) - 1) as u32)
    }

    pub fn singleton(i: usize) -> Coalition {
        Coalition(1 << i)
    }

    pub fn from_members(members: impl IntoIterator<Item = usize>) -> Coalition {
        members
            .into_iter()
            .fold(Coalition::EMPTY, |c, i| c.with(i))
    }

    /// Parses a comma-separated list of unit labels, or `all`.
    pub fn parse(case: &Case, spec: &str) -> Result<Coalition, String> {
        let spec = spec.trim();
        if spec.eq_ignore_ascii_case("all") {
            return Ok(Coalition::grand(case.n_units()));
        }
        let mut c = Coalition::EMPTY;
        for label in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let i = case
                .unit_index(label)
                .ok_or_else(|| format!("unknown unit `{label}`"))?;
            c = c.with(i);
        }
        Ok(c)
    }

    pub fn contains(self, i: usize) -> bool {
        self.0 >> i & 1 == 1
    }

    pub fn with(self, i: usize) -> Coalition {
        Coalition(self.0 | 1 << i)
    }

    pub fn without(self, i: usize) -> Coalition {
        Coalition(self.0 & !(1 << i))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset_of(self, other: Coalition) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn members(self) -> impl Iterator<Item = usize> {
        (0..32).filter(move |&i| self.contains(i))
    }

    /// Every coalition over `n` players, empty one first.
    pub fn all(n: usize) -> impl Iterator<Item = Coalition> {
        (0..=Coalition::grand(n).0).map(Coalition)
    }

    /// Display label such as `{A,C}` using the case unit ids.
    pub fn label(self, case: &Case) -> String {
        let ids: Vec<&str> = self.members().map(|i| case.units[i].id.as_str()).collect();
        format!("{{{}}}", ids.join(","))
    }
}

impl fmt::Display for Coalition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#b}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net_model::builtin_case;

    #[test]
    fn set_operations() {
        let c = Coalition::from_members([0, 2]);
        assert_eq!(c.0, 0b101);
        assert!(c.contains(2) && !c.contains(1));
        assert_eq!(c.len(), 2);
        assert_eq!(c.with(1), Coalition::grand(3));
        assert_eq!(c.without(0), Coalition::singleton(2));
        assert!(Coalition::singleton(0).is_subset_of(c));
        assert!(!Coalition::singleton(1).is_subset_of(c));
        assert_eq!(c.members().collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(Coalition::all(4).count(), 16);
    }

    #[test]
    fn parse_labels() {
        let case = builtin_case("ieee33").unwrap();
        let c = Coalition::parse(&case, "A, D").unwrap();
        assert_eq!(c.label(&case), "{A,D}");
        assert_eq!(Coalition::parse(&case, "all").unwrap(), Coalition::grand(4));
        assert!(Coalition::parse(&case, "Z").is_err());
        assert_eq!(Coalition::parse(&case, "").unwrap(), Coalition::EMPTY);
    }
}
