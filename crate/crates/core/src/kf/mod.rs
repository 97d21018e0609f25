//! Knowledge fusion: the CLS/SEP self-attention fusion encoder, the
//! emotion-consistency discriminator (ED) and the emotion classifier (EC).

mod encoder;
mod heads;
mod losses;

pub use encoder::{FusionConfig, FusionEncoder, FusionTrace, Segment};
pub use heads::{EmotionClassifier, EmotionDiscriminator};
pub use losses::{bce_loss, ce_loss, ec_loss, ed_loss, fuse_pairs, total_loss, LossWeights};
