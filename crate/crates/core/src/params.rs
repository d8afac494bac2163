//! Metadata attached to learnable tensors so the optimizer can treat
//! weights, affine parameters, and box-constrained gates differently.

use crate::tape::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamClass {
    /// Dense weights: full learning rate plus weight decay.
    Weight,
    /// Bias vectors: full learning rate, never decayed.
    Bias,
    /// Normalization affine (gamma, beta): optional separate rate, no decay
    /// unless configured.
    Affine,
    /// Box-constrained mixing parameters, projected after every step.
    Gate,
}

#[derive(Clone, Debug)]
pub struct ParamMeta {
    pub name: &'static str,
    pub class: ParamClass,
    pub constraint: Option<(f64, f64)>,
    pub frozen: bool,
}

impl ParamMeta {
    pub fn weight(name: &'static str) -> Self {
        ParamMeta {
            name,
            class: ParamClass::Weight,
            constraint: None,
            frozen: false,
        }
    }

    pub fn bias(name: &'static str) -> Self {
        ParamMeta {
            name,
            class: ParamClass::Bias,
            constraint: None,
            frozen: false,
        }
    }

    pub fn affine(name: &'static str) -> Self {
        ParamMeta {
            name,
            class: ParamClass::Affine,
            constraint: None,
            frozen: false,
        }
    }

    pub fn gate(name: &'static str, frozen: bool) -> Self {
        ParamMeta {
            name,
            class: ParamClass::Gate,
            constraint: Some((0.5, 1.0)),
            frozen,
        }
    }
}

/// A parameter bound onto a tape for one training step.
#[derive(Clone, Debug)]
pub struct ParamBinding {
    pub var: Var,
    pub meta: ParamMeta,
}
