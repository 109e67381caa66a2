//! Reference oracles for testing `aida-core`.
//!
//! Everything here is written independently of the library under test and
//! favours obviousness over speed: exhaustive ranking, grid search over the
//! simplex, central differences on plain closures and textbook formulas.
//! The fixture files under `fixtures/` hold named cases that are re-derived
//! by these oracles before any comparison.

pub mod cases;
pub mod equations;
pub mod formulas;
pub mod rank;
pub mod simplex;

pub use cases::{load_cases, run_oracle, OracleCase, Provenance};
pub use equations::{equation_map, MapEntry};
pub use rank::{brute_force_rank, OracleItem, RankedList};
pub use simplex::grid_project;
