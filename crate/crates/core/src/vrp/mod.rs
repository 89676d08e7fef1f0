//! Problem instances, the routing environment, and tours.

pub mod env;
pub mod files;
pub mod instance;
pub mod tour;
pub mod variant;

pub use env::{
    feasible_actions, initial_state, is_terminal, step, BasisState, BasisStateSet, EnvState,
};
pub use instance::{capacity_for, dihedral_augment, generate_instance, GenConfig, ProblemInstance};
pub use tour::{tour_cost, validate_tour, Tour, ValidationReport};
pub use variant::{Basis, VariantId};
