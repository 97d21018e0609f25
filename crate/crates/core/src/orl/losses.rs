use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};

/// Lower clamp applied to predicted probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// `(1/2M) sum_i ||S_i - S~_i||^2 + ||T_i - T~_i||^2`, squared norms taken
/// over whole sequences.
pub fn mse_loss(
    g: &mut Graph,
    speech: &[Var],
    speech_aug: &[Var],
    text: &[Var],
    text_aug: &[Var],
) -> Result<Var> {
    let m = speech.len();
    if m == 0 || speech_aug.len() != m || text.len() != m || text_aug.len() != m {
        return Err(Error::shape(
            "mse_loss",
            format!(
                "batch sizes {} / {} / {} / {}",
                speech.len(),
                speech_aug.len(),
                text.len(),
                text_aug.len()
            ),
        ));
    }
    let mut total: Option<Var> = None;
    for (orig, aug) in speech.iter().zip(speech_aug).chain(text.iter().zip(text_aug)) {
        let d = g.sub(*orig, *aug)?;
        let sq = g.mul(d, d)?;
        let s = g.sum(sq);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = total.expect("m > 0");
    Ok(g.scale(total, 1.0 / (2.0 * m as f64)))
}

/// `(1/M) sum_i sum_c y log(y / y^)` with `0 log 0 = 0` and `y^` floored at
/// [`PROB_FLOOR`]. Rows of `pred` must be distributions.
pub fn kld_loss(g: &mut Graph, target: &Tensor, pred: Var) -> Result<Var> {
    if target.shape() != g.shape(pred) || target.shape().len() != 2 {
        return Err(Error::shape(
            "kld_loss",
            format!("target {:?} vs prediction {:?}", target.shape(), g.shape(pred)),
        ));
    }
    let m = target.rows();
    let p = g.value(pred);
    for i in 0..m {
        let row = p.row(i);
        let s: f64 = row.iter().sum();
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("kld_loss: prediction row {i} sums to {s}")));
        }
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|x| *x < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kld_loss: prediction row {i} is not a distribution (sums to {s})"
            )));
        }
    }
    let entropy_term: f64 = target
        .data()
        .iter()
        .filter(|&&y| y > 0.0)
        .map(|&y| y * y.ln())
        .sum();
    let clamped = g.clamp(pred, PROB_FLOOR, f64::INFINITY);
    let logp = g.ln(clamped);
    let y = g.constant(target.clone());
    let cross = g.mul(y, logp)?;
    let cross = g.sum(cross);
    let neg = g.scale(cross, -1.0 / m as f64);
    Ok(g.add_scalar(neg, entropy_term / m as f64))
}

#[derive(Clone, Copy, Debug)]
pub struct AugmentationLoss {
    /// Modality-averaged KL term.
    pub kld: Var,
    /// `alpha * mse + kld`.
    pub total: Var,
}

pub fn augmentation_loss(
    g: &mut Graph,
    mse: Var,
    kld_speech: Var,
    kld_text: Var,
    alpha: f64,
) -> Result<AugmentationLoss> {
    let both = g.add(kld_speech, kld_text)?;
    let kld = g.scale(both, 0.5);
    let weighted = g.scale(mse, alpha);
    let total = g.add(weighted, kld)?;
    Ok(AugmentationLoss { kld, total })
}

fn check_pair(g: &Graph, op: &'static str, a: Var, b: Var, tau: f64) -> Result<usize> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("{op}: temperature must be > 0, got {tau}")));
    }
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 2 || sa != sb || sa[0] == 0 {
        return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
    }
    Ok(sa[0])
}

/// NT-Xent style loss between originals `z` and augmentations `z_aug`
/// (both `M x d_p`). For anchor `z_i` the candidate bank is all `2M`
/// embeddings minus the anchor itself; the positive is `z_aug_i`.
pub fn intra_modality_infonce(g: &mut Graph, z: Var, z_aug: Var, tau: f64) -> Result<Var> {
    let m = check_pair(g, "intra_modality_infonce", z, z_aug, tau)?;
    let bank = g.concat_rows(&[z, z_aug])?;
    let sims = g.cosine_matrix(z, bank)?;
    let logits = g.scale(sims, 1.0 / tau);
    let mut excluded = vec![false; m * 2 * m];
    for i in 0..m {
        excluded[i * 2 * m + i] = true;
    }
    let logp = g.log_softmax_rows(logits, Some(excluded))?;
    let pos: Vec<(usize, usize)> = (0..m).map(|i| (i, m + i)).collect();
    let picked = g.gather_elems(logp, &pos)?;
    let mean = g.mean(picked);
    Ok(g.neg(mean))
}

/// Cross-modal InfoNCE: anchor `z_s_i`, positive `z_t_i`, candidates all
/// `z_t_k` (positive included).
pub fn inter_modality_infonce(g: &mut Graph, z_s: Var, z_t: Var, tau: f64) -> Result<Var> {
    let m = check_pair(g, "inter_modality_infonce", z_s, z_t, tau)?;
    let sims = g.cosine_matrix(z_s, z_t)?;
    let logits = g.scale(sims, 1.0 / tau);
    let logp = g.log_softmax_rows(logits, None)?;
    let pos: Vec<(usize, usize)> = (0..m).map(|i| (i, i)).collect();
    let picked = g.gather_elems(logp, &pos)?;
    let mean = g.mean(picked);
    Ok(g.neg(mean))
}

/// Sum of the batch-averaged intra-speech, intra-text and cross-modal terms.
pub fn cmie_loss(g: &mut Graph, speech: Var, text: Var, cross: Var) -> Result<Var> {
    let a = g.add(speech, text)?;
    g.add(a, cross)
}
