//! Affine layers and small perceptrons shared by the ORL and KF modules.

use crate::error::Result;
use crate::numcore::{Graph, ParamId, ParamStore, ParamVars, RngStream, Tensor, Var};

/// `y = x W + b` applied to each row of `x`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights drawn from `N(0, std^2)`, bias zero.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut RngStream,
    ) -> Self {
        let w = Tensor::from_parts(vec![fan_in, fan_out], rng.normals(fan_in * fan_out, std));
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::vector(vec![0.0; fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// Scaled so activations keep roughly unit variance.
    pub fn init_default(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut RngStream,
    ) -> Self {
        Self::new(store, name, fan_in, fan_out, (fan_in as f64).powf(-0.5), rng)
    }

    pub fn forward(&self, g: &mut Graph, pv: &ParamVars, x: Var) -> Result<Var> {
        let h = g.matmul(x, pv.get(self.weight))?;
        g.add_row_vec(h, pv.get(self.bias))
    }
}

/// Two affine layers with a SiLU in between: `in -> hidden -> out`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        rng: &mut RngStream,
    ) -> Self {
        let (i, h, o) = dims;
        Self {
            hidden: Linear::init_default(store, &format!("{name}.0"), i, h, rng),
            output: Linear::init_default(store, &format!("{name}.1"), h, o, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, pv: &ParamVars, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, pv, x)?;
        let h = g.silu(h);
        self.output.forward(g, pv, h)
    }
}
