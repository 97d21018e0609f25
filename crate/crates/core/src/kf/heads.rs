use crate::error::Result;
use crate::nn::Mlp;
use crate::numcore::{Graph, ParamStore, ParamVars, RngStream, Var};

/// Binary consistency head: probability that the two modalities of a fused
/// pair carry the same emotion.
#[derive(Clone, Debug)]
pub struct EmotionDiscriminator {
    mlp: Mlp,
}

impl EmotionDiscriminator {
    pub fn new(store: &mut ParamStore, name: &str, d_z: usize, d_h: usize, rng: &mut RngStream) -> Self {
        Self {
            mlp: Mlp::new(store, name, (d_z, d_h, 1), rng),
        }
    }

    /// `K x d_z` fused vectors to `K x 1` probabilities.
    pub fn forward(&self, g: &mut Graph, pv: &ParamVars, fused: Var) -> Result<Var> {
        let logit = self.mlp.forward(g, pv, fused)?;
        Ok(g.sigmoid(logit))
    }
}

/// C-way emotion head over fused vectors.
#[derive(Clone, Debug)]
pub struct EmotionClassifier {
    mlp: Mlp,
    pub classes: usize,
}

impl EmotionClassifier {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_z: usize,
        d_h: usize,
        classes: usize,
        rng: &mut RngStream,
    ) -> Self {
        Self {
            mlp: Mlp::new(store, name, (d_z, d_h, classes), rng),
            classes,
        }
    }

    /// `M x d_z` fused vectors to `M x C` class distributions.
    pub fn forward(&self, g: &mut Graph, pv: &ParamVars, fused: Var) -> Result<Var> {
        let logits = self.mlp.forward(g, pv, fused)?;
        g.softmax(logits, 1)
    }
}
