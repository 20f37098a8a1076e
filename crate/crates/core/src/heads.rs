//! Task heads stored in the shared parameter store under `head.`.

use rand::Rng;

use crate::encoder::{HeadInit, SharedParams};
use crate::error::Result;
use crate::params::ParamId;
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearHead {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearHead {
    pub fn ensure(params: &mut SharedParams, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(LinearHead {
            weight: params.ensure_head(&format!("{name}.weight"), &[in_dim, out_dim], HeadInit::Normal, rng)?,
            bias: params.ensure_head(&format!("{name}.bias"), &[out_dim], HeadInit::Zeros, rng)?,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph, params: &SharedParams, x: Var<'g>) -> Result<Var<'g>> {
        x.matmul(&params.var(g, self.weight))?.add_row(&params.var(g, self.bias))
    }
}

/// One GELU hidden layer, then a linear output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpHead {
    pub hidden: LinearHead,
    pub out: LinearHead,
}

impl MlpHead {
    pub fn ensure(
        params: &mut SharedParams,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(MlpHead {
            hidden: LinearHead::ensure(params, &format!("{name}.hidden"), in_dim, hidden_dim, rng)?,
            out: LinearHead::ensure(params, &format!("{name}.out"), hidden_dim, out_dim, rng)?,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph, params: &SharedParams, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.hidden.forward(g, params, x)?.gelu()?;
        self.out.forward(g, params, h)
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.hidden.weight, self.hidden.bias, self.out.weight, self.out.bias]
    }
}
