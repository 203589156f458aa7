//! Small-signal and transient analysis of a synchronous machine connected
//! to an infinite bus through a reactive corridor.
//!
//! The pipeline runs network model → operating point → linear state-space
//! model → transfer-function zeros → residue-tuned damping controller, with
//! a nonlinear simulator and a set of cross-checks alongside.

pub mod error;
pub mod lineariser;
pub mod linalg;
pub mod netmodel;
pub mod podctl;
pub mod timesim;
pub mod validate;
pub mod zeroanalysis;

pub use error::{Error, Result};
pub use lineariser::{AvrParams, MachineParams, SmibMatrices, StateSpaceModel};
pub use netmodel::{Branch, Dispatch, FieldSpec, Machine, NetworkModel, Node, NodeKind, OperatingPoint};
pub use num_complex::Complex64;
pub use podctl::{PodController, RootLocusTrace};
pub use timesim::{Event, EventKind, PodLoop, Scenario, TimeTrace};
pub use zeroanalysis::{LoopId, StabilityReport, ZeroCatalog};
