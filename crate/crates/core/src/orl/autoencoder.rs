use crate::error::Result;
use crate::nn::Linear;
use crate::numcore::{Graph, ParamStore, ParamVars, RngStream, Var};

pub const AE_BLOCKS: usize = 5;
pub const AE_LAYERS_PER_BLOCK: usize = 6;

/// Token-wise residual autoencoder `R^d -> R^d`.
///
/// Each block is six `d x d` affine layers with SiLU between them and no
/// activation after the last, wrapped by a skip connection. With every
/// weight and bias at zero each block, and so the whole network, is the
/// identity.
#[derive(Clone, Debug)]
pub struct ResidualAutoencoder {
    blocks: Vec<Vec<Linear>>,
    d_z: usize,
}

impl ResidualAutoencoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_z: usize,
        init_scale: f64,
        rng: &mut RngStream,
    ) -> Self {
        let blocks = (0..AE_BLOCKS)
            .map(|b| {
                (0..AE_LAYERS_PER_BLOCK)
                    .map(|l| Linear::new(store, &format!("{name}.block{b}.{l}"), d_z, d_z, init_scale, rng))
                    .collect()
            })
            .collect();
        Self { blocks, d_z }
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    /// Applies the network to every row of `x` (`len x d_z`).
    pub fn forward(&self, g: &mut Graph, pv: &ParamVars, x: Var) -> Result<Var> {
        let mut h = x;
        for block in &self.blocks {
            let mut y = h;
            for (l, layer) in block.iter().enumerate() {
                y = layer.forward(g, pv, y)?;
                if l + 1 < block.len() {
                    y = g.silu(y);
                }
            }
            h = g.add(h, y)?;
        }
        Ok(h)
    }
}

/// Augmented sequence and its average-pooled summary (`1 x d_z`).
pub fn augment(
    g: &mut Graph,
    pv: &ParamVars,
    ae: &ResidualAutoencoder,
    seq: Var,
) -> Result<(Var, Var)> {
    let aug = ae.forward(g, pv, seq)?;
    let cls = g.mean_rows(aug)?;
    Ok((aug, cls))
}
