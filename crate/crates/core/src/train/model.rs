use serde::{Deserialize, Serialize};

use crate::dataio::{emodality_shuffle, FeatureRecord};
use crate::error::{Error, Result};
use crate::kf::{bce_loss, ce_loss, fuse_pairs, total_loss, EmotionClassifier, EmotionDiscriminator, FusionConfig, FusionEncoder, LossWeights};
use crate::numcore::{Graph, ParamStore, ParamVars, RngStream, Tensor, Var};
use crate::orl::{
    augment, augmentation_loss, cmie_loss, inter_modality_infonce, intra_modality_infonce, kld_loss,
    mse_loss, AugLabelHead, ProjectionHead, ResidualAutoencoder,
};

/// Which sequences the fusion encoder reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FuseInput {
    #[default]
    Augmented,
    Original,
}

impl std::str::FromStr for FuseInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "augmented" => Ok(Self::Augmented),
            "original" => Ok(Self::Original),
            other => Err(Error::Config(format!(
                "fuse_input must be `augmented` or `original`, got `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_z: usize,
    pub d_p: usize,
    /// Hidden width of every two-layer head.
    pub d_h: usize,
    pub classes: usize,
    pub fe_layers: usize,
    pub fe_heads: usize,
    pub pos_emb: bool,
    /// Longest fusion sequence supported when `pos_emb` is on.
    pub max_seq_len: usize,
    pub fuse_input: FuseInput,
    pub ae_init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_z: 32,
            d_p: 1024,
            d_h: 64,
            classes: 4,
            fe_layers: 1,
            fe_heads: 8,
            pos_emb: false,
            max_seq_len: 256,
            fuse_input: FuseInput::Augmented,
            ae_init_scale: 1e-3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_z == 0 || self.d_p == 0 || self.d_h == 0 {
            return bad("d_z, d_p and d_h must be positive".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.fe_layers == 0 || self.fe_heads == 0 {
            return bad("fe_layers and fe_heads must be positive".into());
        }
        if !self.d_z.is_multiple_of(self.fe_heads) {
            return bad(format!(
                "d_z = {} is not divisible by fe_heads = {}",
                self.d_z, self.fe_heads
            ));
        }
        if !(self.ae_init_scale >= 0.0 && self.ae_init_scale.is_finite()) {
            return bad(format!("ae_init_scale must be finite and >= 0, got {}", self.ae_init_scale));
        }
        Ok(())
    }
}

/// Every scalar loss of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mse: f64,
    pub l_kld: f64,
    pub l_a: f64,
    pub l_mi_s: f64,
    pub l_mi_t: f64,
    pub l_mi_cross: f64,
    pub l_c: f64,
    pub l_f: f64,
    pub l_b: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Column names in [`LossBreakdown::values`] order.
    pub const NAMES: [&'static str; 10] = [
        "l_mse", "l_kld", "l_a", "l_mi_s", "l_mi_t", "l_mi_cross", "l_c", "l_f", "l_b", "total",
    ];

    pub fn values(&self) -> [f64; 10] {
        [
            self.l_mse,
            self.l_kld,
            self.l_a,
            self.l_mi_s,
            self.l_mi_t,
            self.l_mi_cross,
            self.l_c,
            self.l_f,
            self.l_b,
            self.total,
        ]
    }

    /// The composite from the stored components, summed in the same order
    /// as the graph.
    pub fn recompute_total(&self, w: &LossWeights) -> f64 {
        self.l_a + (w.beta * self.l_c + w.gamma * self.l_f + w.delta * self.l_b)
    }
}

/// Graph handles of the loss components, same order as [`LossBreakdown`].
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_mse: Var,
    pub l_kld: Var,
    pub l_a: Var,
    pub l_mi_s: Var,
    pub l_mi_t: Var,
    pub l_mi_cross: Var,
    pub l_c: Var,
    pub l_f: Var,
    pub l_b: Var,
    pub total: Var,
}

impl LossVars {
    pub fn vars(&self) -> [Var; 10] {
        [
            self.l_mse,
            self.l_kld,
            self.l_a,
            self.l_mi_s,
            self.l_mi_t,
            self.l_mi_cross,
            self.l_c,
            self.l_f,
            self.l_b,
            self.total,
        ]
    }

    pub fn read(&self, g: &Graph) -> LossBreakdown {
        let v = self.vars().map(|x| g.item(x));
        LossBreakdown {
            l_mse: v[0],
            l_kld: v[1],
            l_a: v[2],
            l_mi_s: v[3],
            l_mi_t: v[4],
            l_mi_cross: v[5],
            l_c: v[6],
            l_f: v[7],
            l_b: v[8],
            total: v[9],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub losses: LossVars,
    /// `M^2 x 1` consistency probabilities, row-major over (speech, text).
    pub ed_probs: Var,
    /// `M x C` class distributions of the matched pairs.
    pub ec_probs: Var,
}

/// The full network: per-modality autoencoders and label heads, a shared
/// projection head, the fusion encoder and both KF heads.
#[derive(Clone, Debug)]
pub struct DrkfModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    ae_speech: ResidualAutoencoder,
    ae_text: ResidualAutoencoder,
    proj: ProjectionHead,
    label_speech: AugLabelHead,
    label_text: AugLabelHead,
    fe: FusionEncoder,
    ed: EmotionDiscriminator,
    ec: EmotionClassifier,
}

impl DrkfModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = RngStream::new(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let mut rng = root.fork(0);
        let ae_speech = ResidualAutoencoder::new(&mut store, "ae_speech", c.d_z, c.ae_init_scale, &mut rng);
        let mut rng = root.fork(1);
        let ae_text = ResidualAutoencoder::new(&mut store, "ae_text", c.d_z, c.ae_init_scale, &mut rng);
        let mut rng = root.fork(2);
        let proj = ProjectionHead::new(&mut store, "proj", c.d_z, c.d_h, c.d_p, &mut rng);
        let label_speech = AugLabelHead::new(&mut store, "label_speech", c.d_z, c.classes, &mut rng);
        let label_text = AugLabelHead::new(&mut store, "label_text", c.d_z, c.classes, &mut rng);
        let mut rng = root.fork(3);
        let fe_cfg = FusionConfig {
            d_z: c.d_z,
            layers: c.fe_layers,
            heads: c.fe_heads,
            pos_emb: c.pos_emb,
            max_len: c.max_seq_len,
        };
        let fe = FusionEncoder::new(&mut store, "fe", fe_cfg, &mut rng)?;
        let ed = EmotionDiscriminator::new(&mut store, "ed", c.d_z, c.d_h, &mut rng);
        let ec = EmotionClassifier::new(&mut store, "ec", c.d_z, c.d_h, c.classes, &mut rng);
        Ok(Self {
            config,
            store,
            ae_speech,
            ae_text,
            proj,
            label_speech,
            label_text,
            fe,
            ed,
            ec,
        })
    }

    fn check_records(&self, records: &[&FeatureRecord]) -> Result<()> {
        if records.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        for r in records {
            if r.d_z() != self.config.d_z || r.text_seq.cols() != self.config.d_z {
                return Err(Error::shape(
                    "model input",
                    format!("record `{}` has width {}, model expects {}", r.id, r.d_z(), self.config.d_z),
                ));
            }
            if r.label >= self.config.classes {
                return Err(Error::Data(format!(
                    "record `{}` has label {} outside [0, {})",
                    r.id, r.label, self.config.classes
                )));
            }
        }
        Ok(())
    }

    /// Runs one autoencoder over all sequences at once and splits the
    /// result back per record. Returns (augmented sequences, pooled
    /// augmentations stacked `M x d_z`).
    fn augment_all(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        ae: &ResidualAutoencoder,
        seqs: &[Var],
    ) -> Result<(Vec<Var>, Var)> {
        let stacked = g.concat_rows(seqs)?;
        let (aug, _) = augment(g, pv, ae, stacked)?;
        let mut out = Vec::with_capacity(seqs.len());
        let mut pooled = Vec::with_capacity(seqs.len());
        let mut start = 0;
        for &s in seqs {
            let len = g.shape(s)[0];
            let part = g.slice_rows(aug, start, len)?;
            pooled.push(g.mean_rows(part)?);
            out.push(part);
            start += len;
        }
        let pooled = g.concat_rows(&pooled)?;
        Ok((out, pooled))
    }

    /// Builds the whole objective for a batch on `g`.
    pub fn forward(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        records: &[&FeatureRecord],
        w: &LossWeights,
    ) -> Result<ForwardOutput> {
        self.check_records(records)?;
        let m = records.len();
        let classes = self.config.classes;
        let speech: Vec<Var> = records.iter().map(|r| g.constant(r.speech_seq.clone())).collect();
        let text: Vec<Var> = records.iter().map(|r| g.constant(r.text_seq.clone())).collect();

        let (speech_aug, speech_aug_cls) = self.augment_all(g, pv, &self.ae_speech, &speech)?;
        let (text_aug, text_aug_cls) = self.augment_all(g, pv, &self.ae_text, &text)?;
        let l_mse = mse_loss(g, &speech, &speech_aug, &text, &text_aug)?;

        let mut onehot = vec![0.0; m * classes];
        for (i, r) in records.iter().enumerate() {
            onehot[i * classes + r.label] = 1.0;
        }
        let onehot = Tensor::matrix(m, classes, onehot)?;
        let y_s = self.label_speech.forward(g, pv, speech_aug_cls)?;
        let y_t = self.label_text.forward(g, pv, text_aug_cls)?;
        let kld_s = kld_loss(g, &onehot, y_s)?;
        let kld_t = kld_loss(g, &onehot, y_t)?;
        let aug = augmentation_loss(g, l_mse, kld_s, kld_t, w.alpha)?;

        let speech_cls = pooled(g, &speech)?;
        let text_cls = pooled(g, &text)?;
        let all = g.concat_rows(&[speech_cls, speech_aug_cls, text_cls, text_aug_cls])?;
        let z = self.proj.forward(g, pv, all)?;
        let z_s = g.slice_rows(z, 0, m)?;
        let z_s_aug = g.slice_rows(z, m, m)?;
        let z_t = g.slice_rows(z, 2 * m, m)?;
        let z_t_aug = g.slice_rows(z, 3 * m, m)?;
        let l_mi_s = intra_modality_infonce(g, z_s, z_s_aug, w.tau)?;
        let l_mi_t = intra_modality_infonce(g, z_t, z_t_aug, w.tau)?;
        let l_mi_cross = inter_modality_infonce(g, z_s, z_t, w.tau)?;
        let l_c = cmie_loss(g, l_mi_s, l_mi_t, l_mi_cross)?;

        let (fs, ft) = match self.config.fuse_input {
            FuseInput::Augmented => (speech_aug, text_aug),
            FuseInput::Original => (speech, text),
        };
        let batch = emodality_shuffle(records);
        let fused = fuse_pairs(g, pv, &self.fe, &fs, &ft, &batch.pairs)?;
        let ed_probs = self.ed.forward(g, pv, fused)?;
        let targets: Vec<bool> = batch.pairs.iter().map(|p| p.consistent).collect();
        let l_b = bce_loss(g, ed_probs, &targets)?;
        let diag: Vec<usize> = (0..m).map(|i| batch.pair_index(i, i)).collect();
        let matched = g.gather_rows(fused, &diag)?;
        let ec_probs = self.ec.forward(g, pv, matched)?;
        let l_f = ce_loss(g, ec_probs, &batch.labels)?;

        let total = total_loss(g, aug.total, l_c, l_f, l_b, w)?;
        Ok(ForwardOutput {
            losses: LossVars {
                l_mse,
                l_kld: aug.kld,
                l_a: aug.total,
                l_mi_s,
                l_mi_t,
                l_mi_cross,
                l_c,
                l_f,
                l_b,
                total,
            },
            ed_probs,
            ec_probs,
        })
    }

    /// Fused vectors (`M x d_z`) of the matched pairs, graph-free.
    pub fn fused_matched(&self, records: &[&FeatureRecord]) -> Result<Tensor> {
        self.check_records(records)?;
        let mut g = Graph::new();
        let pv = self.store.bind_frozen(&mut g);
        let fused = self.fuse_for_inference(&mut g, &pv, records, false)?;
        Ok(g.value(fused).clone())
    }

    /// Class distributions (`M x C`) of the matched pairs and, when `pairs`
    /// is set, consistency probabilities for all `M^2` recombinations.
    pub fn predict(&self, records: &[&FeatureRecord], pairs: bool) -> Result<(Tensor, Option<Tensor>)> {
        self.check_records(records)?;
        let m = records.len();
        let mut g = Graph::new();
        let pv = self.store.bind_frozen(&mut g);
        let fused = self.fuse_for_inference(&mut g, &pv, records, pairs)?;
        let (matched, ed) = if pairs {
            let diag: Vec<usize> = (0..m).map(|i| i * m + i).collect();
            let matched = g.gather_rows(fused, &diag)?;
            let ed = self.ed.forward(&mut g, &pv, fused)?;
            (matched, Some(g.value(ed).clone()))
        } else {
            (fused, None)
        };
        let probs = self.ec.forward(&mut g, &pv, matched)?;
        Ok((g.value(probs).clone(), ed))
    }

    fn fuse_for_inference(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        records: &[&FeatureRecord],
        all_pairs: bool,
    ) -> Result<Var> {
        let speech: Vec<Var> = records.iter().map(|r| g.constant(r.speech_seq.clone())).collect();
        let text: Vec<Var> = records.iter().map(|r| g.constant(r.text_seq.clone())).collect();
        let (fs, ft) = match self.config.fuse_input {
            FuseInput::Augmented => (
                self.augment_all(g, pv, &self.ae_speech, &speech)?.0,
                self.augment_all(g, pv, &self.ae_text, &text)?.0,
            ),
            FuseInput::Original => (speech, text),
        };
        let pairs = if all_pairs {
            emodality_shuffle(records).pairs
        } else {
            (0..records.len())
                .map(|i| crate::dataio::ShuffledPair {
                    speech: i,
                    text: i,
                    consistent: true,
                })
                .collect()
        };
        fuse_pairs(g, pv, &self.fe, &fs, &ft, &pairs)
    }
}

/// Mean-pooled sequences stacked as `M x d_z`.
fn pooled(g: &mut Graph, seqs: &[Var]) -> Result<Var> {
    let rows = seqs.iter().map(|&s| g.mean_rows(s)).collect::<Result<Vec<_>>>()?;
    g.concat_rows(&rows)
}
