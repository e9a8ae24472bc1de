use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

/// Which training stage owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Backbone, experts, head and deterministic router weights.
    Base,
    /// Variational inference-network weights.
    Phi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub role: Role,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, role: Role, value: Tensor) -> Self {
        Self { name: name.into(), role, value }
    }
}
