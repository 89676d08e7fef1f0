//! The sixteen VRP variants and their basis decomposition.
//!
//! Every variant is CVRP plus an arbitrary subset of four extra constraints:
//! open routes (O), backhauls (B), a per-subtour duration limit (L), and
//! time windows (TW). Capacity (C) is always present.

use std::fmt;

use crate::error::CoreError;

/// One constraint family. `C` is part of every variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Basis {
    Capacity,
    Open,
    Backhaul,
    DurationLimit,
    TimeWindow,
}

impl Basis {
    /// Canonical ordering C, O, B, L, TW.
    pub const ALL: [Basis; 5] = [
        Basis::Capacity,
        Basis::Open,
        Basis::Backhaul,
        Basis::DurationLimit,
        Basis::TimeWindow,
    ];

    /// The four non-capacity bases in expert slot order (O, B, L, TW).
    pub const EXPERTS: [Basis; 4] = [
        Basis::Open,
        Basis::Backhaul,
        Basis::DurationLimit,
        Basis::TimeWindow,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Basis::Capacity => "c",
            Basis::Open => "o",
            Basis::Backhaul => "b",
            Basis::DurationLimit => "l",
            Basis::TimeWindow => "tw",
        }
    }
}

/// A VRP variant as a set of constraint flags on top of CVRP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VariantId {
    pub open: bool,
    pub backhaul: bool,
    pub duration_limit: bool,
    pub time_window: bool,
}

impl VariantId {
    pub const CVRP: VariantId = VariantId::new(false, false, false, false);
    pub const OVRP: VariantId = VariantId::new(true, false, false, false);
    pub const VRPB: VariantId = VariantId::new(false, true, false, false);
    pub const VRPL: VariantId = VariantId::new(false, false, true, false);
    pub const VRPTW: VariantId = VariantId::new(false, false, false, true);

    pub const fn new(open: bool, backhaul: bool, duration_limit: bool, time_window: bool) -> Self {
        Self {
            open,
            backhaul,
            duration_limit,
            time_window,
        }
    }

    /// All 16 variants, ordered by flag bits (CVRP first, OVRPBLTW last).
    pub fn all() -> impl Iterator<Item = VariantId> {
        (0u8..16).map(|bits| {
            VariantId::new(
                bits & 1 != 0,
                bits & 2 != 0,
                bits & 4 != 0,
                bits & 8 != 0,
            )
        })
    }

    /// The five single-constraint variants (CVRP, OVRP, VRPB, VRPL, VRPTW).
    pub fn basis_variants() -> [VariantId; 5] {
        [
            Self::CVRP,
            Self::OVRP,
            Self::VRPB,
            Self::VRPL,
            Self::VRPTW,
        ]
    }

    /// Canonical name: optional `O` prefix, `VRP`, then `B`, `L`, `TW`
    /// suffixes in that order; plain CVRP when no flag is set.
    pub fn name(&self) -> String {
        if !self.open && !self.backhaul && !self.duration_limit && !self.time_window {
            return "CVRP".to_string();
        }
        let mut s = String::new();
        if self.open {
            s.push('O');
        }
        s.push_str("VRP");
        if self.backhaul {
            s.push('B');
        }
        if self.duration_limit {
            s.push('L');
        }
        if self.time_window {
            s.push_str("TW");
        }
        s
    }

    pub fn parse(name: &str) -> Result<VariantId, CoreError> {
        VariantId::all()
            .find(|v| v.name() == name)
            .ok_or_else(|| CoreError::UnknownVariant(name.to_string()))
    }

    /// Active bases in canonical order; always contains `Capacity`.
    pub fn basis_set(&self) -> Vec<Basis> {
        let mut set = vec![Basis::Capacity];
        if self.open {
            set.push(Basis::Open);
        }
        if self.backhaul {
            set.push(Basis::Backhaul);
        }
        if self.duration_limit {
            set.push(Basis::DurationLimit);
        }
        if self.time_window {
            set.push(Basis::TimeWindow);
        }
        set
    }

    pub fn has(&self, basis: Basis) -> bool {
        match basis {
            Basis::Capacity => true,
            Basis::Open => self.open,
            Basis::Backhaul => self.backhaul,
            Basis::DurationLimit => self.duration_limit,
            Basis::TimeWindow => self.time_window,
        }
    }

    /// Number of non-capacity bases; the `K` of top-K routing.
    pub fn non_capacity_count(&self) -> usize {
        self.basis_set().len() - 1
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn sixteen_distinct_names_round_trip() {
        let names: HashSet<String> = VariantId::all().map(|v| v.name()).collect();
        assert_eq!(names.len(), 16);
        let expected = [
            "CVRP", "OVRP", "VRPB", "VRPL", "VRPTW", "OVRPTW", "VRPBL", "VRPBLTW", "VRPBTW",
            "VRPLTW", "OVRPB", "OVRPBL", "OVRPBLTW", "OVRPBTW", "OVRPL", "OVRPLTW",
        ];
        for name in expected {
            let v = VariantId::parse(name).unwrap();
            assert_eq!(v.name(), name);
        }
        assert!(VariantId::parse("VRPX").is_err());
    }

    #[test]
    fn basis_set_always_contains_capacity() {
        for v in VariantId::all() {
            let set = v.basis_set();
            assert_eq!(set[0], Basis::Capacity);
            assert_eq!(set.len(), 1 + v.non_capacity_count());
        }
        assert_eq!(
            VariantId::parse("OVRPBLTW").unwrap().basis_set(),
            Basis::ALL.to_vec()
        );
    }
}
