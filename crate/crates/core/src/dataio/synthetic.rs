use serde::{Deserialize, Serialize};

use super::fixture::{Dataset, DatasetMeta, FeatureRecord};
use crate::error::{Error, Result};
use crate::numcore::{RngStream, Tensor};

/// Gaussian-cluster token generator with controllable cross-modal
/// label conflicts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub d_z: usize,
    pub records: usize,
    /// Speech tokens per record.
    pub m: usize,
    /// Text tokens per record.
    pub n: usize,
    /// Standard deviation of the class means; token noise has unit variance.
    pub separation: f64,
    /// Probability that a record's text comes from another class's cluster.
    pub inconsistency_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            d_z: 32,
            records: 1000,
            m: 4,
            n: 4,
            separation: 3.0,
            inconsistency_rate: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic spec: {m}")));
        if self.classes == 0 || self.d_z == 0 || self.m == 0 || self.n == 0 {
            return bad("classes, d_z, m and n must be positive");
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return bad("separation must be positive");
        }
        if !(0.0..1.0).contains(&self.inconsistency_rate) {
            return bad("inconsistency_rate must lie in [0, 1)");
        }
        if self.inconsistency_rate > 0.0 && self.classes < 2 {
            return bad("inconsistent records need at least two classes");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub dataset: Dataset,
    /// Per record: text drawn from a class other than the label.
    pub inconsistent: Vec<bool>,
    /// Class centroids, `C x d_z`, for speech and text.
    pub speech_means: Tensor,
    pub text_means: Tensor,
}

impl SyntheticData {
    pub fn inconsistent_count(&self) -> usize {
        self.inconsistent.iter().filter(|&&b| b).count()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.dataset.meta.classes];
        for r in &self.dataset.records {
            h[r.label] += 1;
        }
        h
    }
}

fn tokens(rng: &mut RngStream, means: &Tensor, class: usize, len: usize) -> Tensor {
    let mu = means.row(class);
    let data = (0..len)
        .flat_map(|_| mu.iter().map(|c| c + rng.normal()).collect::<Vec<_>>())
        .collect();
    Tensor::from_parts(vec![len, mu.len()], data)
}

/// Draws a labeled dataset. The label always follows the speech class; with
/// probability `inconsistency_rate` the text tokens come from a uniformly
/// chosen different class.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let root = RngStream::new(spec.seed);
    let mut mean_rng = root.fork(0);
    let mut rng = root.fork(1);
    let (c, d) = (spec.classes, spec.d_z);
    let speech_means = Tensor::from_parts(vec![c, d], mean_rng.normals(c * d, spec.separation));
    let text_means = Tensor::from_parts(vec![c, d], mean_rng.normals(c * d, spec.separation));

    let mut records = Vec::with_capacity(spec.records);
    let mut inconsistent = Vec::with_capacity(spec.records);
    for i in 0..spec.records {
        let label = rng.below(c);
        let flip = spec.inconsistency_rate > 0.0 && rng.uniform() < spec.inconsistency_rate;
        let text_class = if flip {
            (label + 1 + rng.below(c - 1)) % c
        } else {
            label
        };
        let speech_seq = tokens(&mut rng, &speech_means, label, spec.m);
        let text_seq = tokens(&mut rng, &text_means, text_class, spec.n);
        records.push(FeatureRecord {
            id: format!("syn-{i:06}"),
            speech_seq,
            text_seq,
            label,
        });
        inconsistent.push(flip);
    }
    let meta = DatasetMeta {
        classes: c,
        d_z: d,
        class_names: (0..c).map(|k| format!("class_{k}")).collect(),
    };
    Ok(SyntheticData {
        dataset: Dataset { meta, records },
        inconsistent,
        speech_means,
        text_means,
    })
}
