//! Nonlocal two-qubit gates from local operations, classical communication
//! and shared entanglement: state algebra, protocol programs, an exhaustive
//! branch simulator, and the cost and error analysis around them.

pub mod analysis;
pub mod engine;
pub mod error;
pub mod json;
pub mod model;
pub mod protocols;
pub mod qmath;
pub mod random;

pub use error::{Error, Result};
pub use model::{
    CliffordCheck, CliffordTable, DensityOperator, GateSpec, Party, PureState, Subsystem, SystemLayout,
};
pub use qmath::{CMatrix, CVector, ProbabilityVector, C64};
pub use engine::{
    BranchTree, EntanglementLedger, LocalInstrument, ProtocolProgram, ProtocolStep, RoundProfile, RoundType,
};
pub use analysis::{ChannelMatrix, CostCurvePoint, TypicalityReport};
pub use protocols::{NShotPlan, P1Result};
