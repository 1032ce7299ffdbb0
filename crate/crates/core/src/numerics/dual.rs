use super::tensor::Tensor;
use crate::error::Result;

/// A tensor paired with a same-shaped tangent for forward-mode evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct DualTensor {
    primal: Tensor,
    tangent: Tensor,
}

impl DualTensor {
    pub fn new(primal: Tensor, tangent: Tensor) -> Result<Self> {
        primal.ensure_same_shape(&tangent, "dual tensor")?;
        Ok(DualTensor { primal, tangent })
    }

    /// Zero tangent.
    pub fn constant(primal: Tensor) -> Self {
        let tangent = Tensor::zeros(primal.shape());
        DualTensor { primal, tangent }
    }

    pub fn primal(&self) -> &Tensor {
        &self.primal
    }

    pub fn tangent(&self) -> &Tensor {
        &self.tangent
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        (self.primal, self.tangent)
    }
}
