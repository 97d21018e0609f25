//! Optimized representation learning: progressive augmentation with
//! residual autoencoders, the MSE/KLD augmentation losses, projection heads
//! and the contrastive mutual-information (InfoNCE) objectives.

mod autoencoder;
mod heads;
mod losses;

pub use autoencoder::{augment, ResidualAutoencoder, AE_BLOCKS, AE_LAYERS_PER_BLOCK};
pub use heads::{AugLabelHead, ProjectionHead};
pub use losses::{
    augmentation_loss, cmie_loss, inter_modality_infonce, intra_modality_infonce, kld_loss,
    mse_loss, AugmentationLoss, PROB_FLOOR,
};
