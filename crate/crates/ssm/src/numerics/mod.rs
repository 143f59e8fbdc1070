//! Differentiable dense-tensor substrate: forward operations with exact
//! reverse-mode gradients, plus an independent finite-difference oracle.

pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, ParamCheck};
pub use optim::{AdamW, GroupRates};
pub use params::{
    fnv1a64, rng_for, seeded_gaussian, seeded_uniform, Leaves, ParamGroup, ParamId, ParamStore,
    Parameter,
};
pub use tape::{l2_normalize, layer_norm, row_softmax, Tape, VarId};
pub use tensor::Tensor;
