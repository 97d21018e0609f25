use crate::error::Result;
use crate::nn::{Linear, Mlp};
use crate::numcore::{Graph, ParamStore, ParamVars, RngStream, Var};

/// The contrastive projection `g(.)`: `d_z -> d_h -> d_p`.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    mlp: Mlp,
    pub d_p: usize,
}

impl ProjectionHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_z: usize,
        d_h: usize,
        d_p: usize,
        rng: &mut RngStream,
    ) -> Self {
        Self {
            mlp: Mlp::new(store, name, (d_z, d_h, d_p), rng),
            d_p,
        }
    }

    /// Projects each row of `x`.
    pub fn forward(&self, g: &mut Graph, pv: &ParamVars, x: Var) -> Result<Var> {
        self.mlp.forward(g, pv, x)
    }
}

/// Label distribution predicted from a pooled augmented vector.
#[derive(Clone, Debug)]
pub struct AugLabelHead {
    linear: Linear,
}

impl AugLabelHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_z: usize,
        classes: usize,
        rng: &mut RngStream,
    ) -> Self {
        Self {
            linear: Linear::init_default(store, name, d_z, classes, rng),
        }
    }

    /// Row-wise class probabilities for pooled vectors `x` (`M x d_z`).
    pub fn forward(&self, g: &mut Graph, pv: &ParamVars, x: Var) -> Result<Var> {
        let logits = self.linear.forward(g, pv, x)?;
        g.softmax(logits, 1)
    }
}
