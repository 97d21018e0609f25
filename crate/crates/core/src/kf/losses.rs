use serde::{Deserialize, Serialize};

use super::encoder::FusionEncoder;
use super::heads::{EmotionClassifier, EmotionDiscriminator};
use crate::dataio::{PairBatch, ShuffledPair};
use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamVars, Tensor, Var};
use crate::orl::PROB_FLOOR;

/// Weights of the composite objective and the contrastive temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 0.2,
            gamma: 1.0,
            delta: 0.2,
            tau: 0.1,
        }
    }
}

/// Fuses `(speech[p.speech], text[p.text])` for every pair; one row each.
pub fn fuse_pairs(
    g: &mut Graph,
    pv: &ParamVars,
    fe: &FusionEncoder,
    speech: &[Var],
    text: &[Var],
    pairs: &[ShuffledPair],
) -> Result<Var> {
    let rows = pairs
        .iter()
        .map(|p| {
            let s = *speech
                .get(p.speech)
                .ok_or_else(|| Error::shape("fuse_pairs", format!("speech index {}", p.speech)))?;
            let t = *text
                .get(p.text)
                .ok_or_else(|| Error::shape("fuse_pairs", format!("text index {}", p.text)))?;
            fe.fuse(g, pv, s, t)
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat_rows(&rows)
}

/// Mean binary cross-entropy with predictions clamped to
/// `[PROB_FLOOR, 1 - PROB_FLOOR]`.
pub fn bce_loss(g: &mut Graph, pred: Var, targets: &[bool]) -> Result<Var> {
    let k = targets.len();
    if k == 0 || g.value(pred).numel() != k {
        return Err(Error::shape(
            "bce_loss",
            format!("{} targets for prediction {:?}", k, g.shape(pred)),
        ));
    }
    let p = g.reshape(pred, &[k])?;
    let p = g.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let y: Vec<f64> = targets.iter().map(|&t| f64::from(u8::from(t))).collect();
    let one_minus_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let log_p = g.ln(p);
    let neg_p = g.neg(p);
    let q = g.add_scalar(neg_p, 1.0);
    let log_q = g.ln(q);
    let yv = g.constant(Tensor::vector(y));
    let nyv = g.constant(Tensor::vector(one_minus_y));
    let a = g.mul(yv, log_p)?;
    let b = g.mul(nyv, log_q)?;
    let s = g.add(a, b)?;
    let m = g.mean(s);
    Ok(g.neg(m))
}

/// Mean cross-entropy of one-hot `labels` under row distributions `probs`.
pub fn ce_loss(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape(
            "ce_loss",
            format!("{} labels for probabilities {shape:?}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= shape[1]) {
        return Err(Error::InvalidArgument(format!(
            "ce_loss: label {bad} outside [0, {})",
            shape[1]
        )));
    }
    let idx: Vec<(usize, usize)> = labels.iter().copied().enumerate().collect();
    let picked = g.gather_elems(probs, &idx)?;
    let picked = g.clamp(picked, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let logs = g.ln(picked);
    let m = g.mean(logs);
    Ok(g.neg(m))
}

/// Consistency loss over all shuffled pairs of a batch, plus the
/// discriminator outputs (`M^2 x 1`).
pub fn ed_loss(
    g: &mut Graph,
    pv: &ParamVars,
    fe: &FusionEncoder,
    ed: &EmotionDiscriminator,
    batch: &PairBatch,
    speech: &[Var],
    text: &[Var],
) -> Result<(Var, Var)> {
    let fused = fuse_pairs(g, pv, fe, speech, text, &batch.pairs)?;
    let probs = ed.forward(g, pv, fused)?;
    let targets: Vec<bool> = batch.pairs.iter().map(|p| p.consistent).collect();
    Ok((bce_loss(g, probs, &targets)?, probs))
}

/// Classification loss over the matched pairs, plus the class
/// distributions (`M x C`).
pub fn ec_loss(
    g: &mut Graph,
    pv: &ParamVars,
    fe: &FusionEncoder,
    ec: &EmotionClassifier,
    speech: &[Var],
    text: &[Var],
    labels: &[usize],
) -> Result<(Var, Var)> {
    let pairs: Vec<ShuffledPair> = (0..labels.len())
        .map(|i| ShuffledPair {
            speech: i,
            text: i,
            consistent: true,
        })
        .collect();
    let fused = fuse_pairs(g, pv, fe, speech, text, &pairs)?;
    let probs = ec.forward(g, pv, fused)?;
    Ok((ce_loss(g, probs, labels)?, probs))
}

/// `L_a + (beta * L_c + gamma * L_f + delta * L_b)`; the weighted terms are
/// summed first so the published weights give 2.4 exactly for unit losses.
pub fn total_loss(
    g: &mut Graph,
    aug: Var,
    cmie: Var,
    cls: Var,
    disc: Var,
    w: &LossWeights,
) -> Result<Var> {
    let c = g.scale(cmie, w.beta);
    let f = g.scale(cls, w.gamma);
    let b = g.scale(disc, w.delta);
    let s = g.add(c, f)?;
    let s = g.add(s, b)?;
    g.add(aug, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::emodality_shuffle;
    use crate::dataio::FeatureRecord;
    use crate::kf::{FusionConfig, FusionEncoder};
    use crate::numcore::{ParamStore, RngStream};

    fn scalar(g: &mut Graph, v: f64) -> Var {
        g.constant(Tensor::scalar(v))
    }

    #[test]
    fn bce_examples() {
        let mut g = Graph::new();
        let half = g.constant(Tensor::vector(vec![0.5; 6]));
        let l = bce_loss(&mut g, half, &[true, false, true, true, false, false]).unwrap();
        assert!((g.item(l) - 2f64.ln()).abs() < 1e-12);

        let exact = g.constant(Tensor::vector(vec![1.0, 0.0, 1.0]));
        let l = bce_loss(&mut g, exact, &[true, false, true]).unwrap();
        assert!(g.item(l) < 1e-11);
    }

    #[test]
    fn bce_matches_naive_loop() {
        let mut rng = RngStream::new(8);
        let p: Vec<f64> = (0..16).map(|_| 0.02 + 0.96 * rng.uniform()).collect();
        let y: Vec<bool> = (0..16).map(|_| rng.uniform() < 0.4).collect();
        let mut expected = 0.0;
        for (pi, &yi) in p.iter().zip(&y) {
            expected -= if yi { pi.ln() } else { (1.0 - pi).ln() };
        }
        expected /= 16.0;
        let mut g = Graph::new();
        let pv = g.constant(Tensor::matrix(16, 1, p).unwrap());
        let l = bce_loss(&mut g, pv, &y).unwrap();
        assert!((g.item(l) - expected).abs() < 1e-10);
    }

    #[test]
    fn ce_examples_and_oracle() {
        let mut g = Graph::new();
        let u = g.constant(Tensor::from_rows(&[vec![0.25; 4], vec![0.25; 4]]).unwrap());
        let l = ce_loss(&mut g, u, &[1, 3]).unwrap();
        assert!((g.item(l) - 4f64.ln()).abs() < 1e-12);

        let onehot = g.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap());
        let l = ce_loss(&mut g, onehot, &[1, 0]).unwrap();
        assert!(g.item(l) < 1e-11);

        let mut rng = RngStream::new(9);
        let mut rows = Vec::new();
        let labels = [2usize, 0, 3];
        let mut expected = 0.0;
        for &c in &labels {
            let raw: Vec<f64> = (0..4).map(|_| rng.uniform() + 0.05).collect();
            let s: f64 = raw.iter().sum();
            let row: Vec<f64> = raw.iter().map(|x| x / s).collect();
            expected -= row[c].ln();
            rows.push(row);
        }
        expected /= 3.0;
        let p = g.constant(Tensor::from_rows(&rows).unwrap());
        let l = ce_loss(&mut g, p, &labels).unwrap();
        assert!((g.item(l) - expected).abs() < 1e-10);
        assert!(ce_loss(&mut g, p, &[0, 4, 1]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let mut g = Graph::new();
        let one = scalar(&mut g, 1.0);
        let w = LossWeights::default();
        let l = total_loss(&mut g, one, one, one, one, &w).unwrap();
        assert_eq!(g.item(l), 2.4);

        let zero = scalar(&mut g, 0.0);
        let l = total_loss(&mut g, zero, zero, zero, zero, &w).unwrap();
        assert_eq!(g.item(l), 0.0);

        let la = scalar(&mut g, 0.37);
        let w0 = LossWeights {
            beta: 0.0,
            gamma: 0.0,
            delta: 0.0,
            ..w
        };
        let l = total_loss(&mut g, la, one, one, one, &w0).unwrap();
        assert_eq!(g.item(l), 0.37);
    }

    #[test]
    fn ed_and_ec_losses_match_naive_loops() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(10);
        let cfg = FusionConfig {
            d_z: 8,
            layers: 1,
            heads: 2,
            pos_emb: false,
            max_len: 16,
        };
        let fe = FusionEncoder::new(&mut store, "fe", cfg, &mut rng).unwrap();
        let ed = EmotionDiscriminator::new(&mut store, "ed", 8, 6, &mut rng);
        let ec = EmotionClassifier::new(&mut store, "ec", 8, 6, 4, &mut rng);
        let recs: Vec<FeatureRecord> = (0..3)
            .map(|i| FeatureRecord {
                id: format!("r{i}"),
                speech_seq: Tensor::matrix(2 + i, 8, rng.normals((2 + i) * 8, 1.0)).unwrap(),
                text_seq: Tensor::matrix(3, 8, rng.normals(24, 1.0)).unwrap(),
                label: [1, 3, 1][i],
            })
            .collect();
        let refs: Vec<&FeatureRecord> = recs.iter().collect();
        let batch = emodality_shuffle(&refs);

        let mut g = Graph::new();
        let pv = store.bind(&mut g);
        let s: Vec<Var> = recs.iter().map(|r| g.constant(r.speech_seq.clone())).collect();
        let t: Vec<Var> = recs.iter().map(|r| g.constant(r.text_seq.clone())).collect();
        let (lb, probs) = ed_loss(&mut g, &pv, &fe, &ed, &batch, &s, &t).unwrap();
        assert_eq!(g.shape(probs), &[9, 1]);

        // Naive loop: one fresh fusion per pair, scalar BCE accumulation.
        let mut expected = 0.0;
        for p in &batch.pairs {
            let x = fe.fuse(&mut g, &pv, s[p.speech], t[p.text]).unwrap();
            let y = ed.forward(&mut g, &pv, x).unwrap();
            let yhat = g.item(y).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            assert!(yhat > 0.0 && yhat < 1.0);
            expected -= if p.consistent { yhat.ln() } else { (1.0 - yhat).ln() };
        }
        expected /= 9.0;
        assert!((g.item(lb) - expected).abs() < 1e-10);

        let labels: Vec<usize> = recs.iter().map(|r| r.label).collect();
        let (lf, probs) = ec_loss(&mut g, &pv, &fe, &ec, &s, &t, &labels).unwrap();
        let mut expected = 0.0;
        for i in 0..3 {
            let x = fe.fuse(&mut g, &pv, s[i], t[i]).unwrap();
            let p = ec.forward(&mut g, &pv, x).unwrap();
            let row = g.value(p).row(0).to_vec();
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(row, g.value(probs).row(i));
            expected -= row[labels[i]].ln();
        }
        expected /= 3.0;
        assert!((g.item(lf) - expected).abs() < 1e-10);
    }
}
