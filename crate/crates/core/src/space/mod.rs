//! The searchable network: candidate operations, cells, hyper-cells, the
//! aggregation cell, the assembled network, and architecture derivation.

mod aggregation;
mod arch;
mod cell;
mod hypercell;
mod network;
mod ops;

pub use aggregation::{AggEdge, Aggregation, AGG_EDGES, AGG_NODES, AGG_OUTPUTS};
pub use arch::{
    derive, enumerate_architectures, random_architecture, AggEdgeChoice, CellEdgeChoice, DerivedAggregation,
    DerivedArchitecture, DerivedCell, DerivedHyperCell, Provenance, StemInfo, ARCH_VERSION,
};
pub use cell::{Cell, CellKind, CellSpec, Edge};
pub use hypercell::{HyperCell, HyperLogits, HyperMasks, HyperOut, HyperSpec};
pub use network::{ChannelPlan, MaskSite, NetMasks, Network, NETWORK_STRIDE, STEM_STRIDE};
pub use ops::{
    update_running_stats, Adapter, AggOp, CellOp, ConvBlock, ConvLayer, Ctx, Mode, NormLayer, OpInstance, OpKind,
    ParamBuilder, AGG_OPS, CELL_OPS,
};
