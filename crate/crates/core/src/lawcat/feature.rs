//! Query/key feature maps.

use serde::{Deserialize, Serialize};

use crate::numerics::tensor::one_plus_elu_scalar;
use crate::numerics::{matmul, softmax_last, Tape, Tensor, Var};
use crate::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Softmax over the feature dimension of `X·W_phi`.
    #[default]
    SoftmaxFeatdim,
    /// `1 + ELU(X·W_phi)`.
    OnePlusElu,
    /// `X·W_phi` with no nonlinearity.
    Identity,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 3] = [Self::SoftmaxFeatdim, Self::OnePlusElu, Self::Identity];

    /// Whether every produced feature is strictly positive.
    pub fn is_positive(self) -> bool {
        !matches!(self, Self::Identity)
    }

    /// Applies the nonlinearity to already-projected rows.
    pub fn activate(self, x: &Tensor) -> Result<Tensor> {
        match self {
            Self::SoftmaxFeatdim => softmax_last(x),
            Self::OnePlusElu => Ok(x.map(one_plus_elu_scalar)),
            Self::Identity => Ok(x.clone()),
        }
    }

    pub(crate) fn activate_op(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Self::SoftmaxFeatdim => tape.softmax_last(x),
            Self::OnePlusElu => tape.one_plus_elu(x),
            Self::Identity => Ok(x),
        }
    }
}

/// `Φ = kind(X · W_phi)` for one head: `[N, d_head] × [d_head, d_feat]`.
pub fn feature_map(x: &Tensor, w_phi: &Tensor, kind: FeatureKind) -> Result<Tensor> {
    kind.activate(&matmul(x, w_phi)?)
}
