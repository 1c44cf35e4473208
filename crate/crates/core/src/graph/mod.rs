//! Search spaces, supernets and per-edge compute graphs.

pub mod compute;
pub mod dot;
pub mod eval;
pub mod genotype;
pub mod module;
pub mod params;
pub mod space;
pub mod supernet;

pub use compute::{Body, Branch, CandidateSet, ComputeGraph, MergedConv, MergedMember, Mix, Stage, UnitInstance};
pub use eval::{BnMode, ForwardCtx, KernelCache};
pub use genotype::{discretize, Genotype};
pub use module::{BasicModule, ConvForm, ModuleKind, OperationChain, Unit};
pub use params::{BnId, ParamId, ParamStore, Role};
pub use space::SpaceSpec;
pub use supernet::{CellKind, Supernet};
