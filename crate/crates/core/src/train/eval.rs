use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::thread;

use serde::{Deserialize, Serialize};

use super::metrics::{argmax, merge_confusion, MetricsReport};
use super::model::DrkfModel;
use crate::dataio::{Dataset, FeatureRecord};
use crate::error::{Error, Result};

/// Held-out quality of both KF heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Emotion classification over matched pairs.
    pub metrics: MetricsReport,
    /// Fraction of shuffled pairs whose consistency the discriminator gets
    /// right at threshold 0.5. Pairs are formed inside consecutive chunks of
    /// `batch_size` records, as in training.
    pub ed_pair_accuracy: f64,
    pub ed_pairs: u64,
}

#[derive(Default)]
struct Tally {
    confusion: Vec<Vec<u64>>,
    pairs: u64,
    pairs_correct: u64,
}

fn tally(model: &DrkfModel, chunks: &[&[FeatureRecord]]) -> Result<Tally> {
    let c = model.config.classes;
    let mut t = Tally {
        confusion: vec![vec![0; c]; c],
        ..Default::default()
    };
    for chunk in chunks {
        let refs: Vec<&FeatureRecord> = chunk.iter().collect();
        let (probs, ed) = model.predict(&refs, true)?;
        for (i, r) in refs.iter().enumerate() {
            t.confusion[r.label][argmax(probs.row(i))] += 1;
        }
        let ed = ed.expect("pair predictions requested");
        let m = refs.len();
        for i in 0..m {
            for j in 0..m {
                let said = ed.data()[i * m + j] >= 0.5;
                let truth = refs[i].label == refs[j].label;
                t.pairs += 1;
                t.pairs_correct += u64::from(said == truth);
            }
        }
    }
    Ok(t)
}

/// Evaluates on `data` in consecutive chunks of `batch_size`, sharded over
/// up to `threads` workers. Shard results are integer counts, so the
/// outcome does not depend on the thread count.
pub fn evaluate(model: &DrkfModel, data: &Dataset, batch_size: usize, threads: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let chunks: Vec<&[FeatureRecord]> = data.records.chunks(batch_size).collect();
    let threads = threads.clamp(1, chunks.len());
    let per = chunks.len().div_ceil(threads);
    let parts: Vec<Result<Tally>> = if threads == 1 {
        vec![tally(model, &chunks)]
    } else {
        thread::scope(|s| {
            let handles: Vec<_> = chunks.chunks(per).map(|shard| s.spawn(move || tally(model, shard))).collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        })
    };
    let c = model.config.classes;
    let mut confusion = vec![vec![0; c]; c];
    let (mut pairs, mut correct) = (0, 0);
    for p in parts {
        let p = p?;
        merge_confusion(&mut confusion, &p.confusion);
        pairs += p.pairs;
        correct += p.pairs_correct;
    }
    Ok(Evaluation {
        metrics: MetricsReport::from_confusion(confusion)?,
        ed_pair_accuracy: correct as f64 / pairs as f64,
        ed_pairs: pairs,
    })
}

/// Writes `id,label,component_0..component_{d-1}` with the fused vector of
/// every record.
pub fn export_embeddings(model: &DrkfModel, data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let d = model.config.d_z;
    let mut out = String::from("id,label");
    for k in 0..d {
        write!(out, ",component_{k}").expect("write to string");
    }
    out.push('\n');
    for chunk in data.records.chunks(64) {
        let refs: Vec<&FeatureRecord> = chunk.iter().collect();
        let fused = model.fused_matched(&refs)?;
        for (i, r) in refs.iter().enumerate() {
            if r.id.contains([',', '"', '\n']) {
                write!(out, "\"{}\"", r.id.replace('"', "\"\"")).expect("write to string");
            } else {
                out.push_str(&r.id);
            }
            write!(out, ",{}", r.label).expect("write to string");
            for v in fused.row(i) {
                write!(out, ",{v}").expect("write to string");
            }
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
