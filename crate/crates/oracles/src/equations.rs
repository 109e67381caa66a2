//! Formula-to-code map.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapEntry {
    /// `eqN`, `alg1.*` or `out_of_scope.*`.
    pub item: String,
    pub label: String,
    /// `module::function` in `aida-core`; `None` for out-of-scope items.
    pub owner: Option<String>,
}

impl MapEntry {
    pub fn is_out_of_scope(&self) -> bool {
        self.item.starts_with("out_of_scope.")
    }

    /// Number of a formula entry.
    pub fn equation(&self) -> Option<usize> {
        self.item.strip_prefix("eq")?.parse().ok()
    }
}

const MAP_JSON: &str = include_str!("../fixtures/equation_map.json");

pub fn equation_map() -> Vec<MapEntry> {
    serde_json::from_str(MAP_JSON).expect("equation_map.json is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_formula_has_exactly_one_owner() {
        let map = equation_map();
        for n in 1..=21 {
            let hits: Vec<&MapEntry> = map.iter().filter(|e| e.equation() == Some(n)).collect();
            assert_eq!(hits.len(), 1, "formula {n}");
            assert!(hits[0].owner.is_some(), "formula {n}");
        }
        assert_eq!(map.iter().filter(|e| e.equation().is_some()).count(), 21);
    }

    #[test]
    fn out_of_scope_entries_have_no_owner() {
        let map = equation_map();
        assert!(map.iter().any(MapEntry::is_out_of_scope));
        assert!(map.iter().filter(|e| e.is_out_of_scope()).all(|e| e.owner.is_none()));
        assert!(map.iter().filter(|e| !e.is_out_of_scope()).all(|e| e.owner.is_some()));
    }
}
