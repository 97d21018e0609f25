use super::fixture::FeatureRecord;
use crate::error::{Error, Result};
use crate::numcore::RngStream;

/// Seeded shuffle of `0..len` cut into contiguous chunks of `batch_size`.
pub fn make_batches(
    len: usize,
    batch_size: usize,
    seed: u64,
    drop_last: bool,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if len == 0 {
        return Err(Error::Data("cannot batch an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    RngStream::new(seed).shuffle(&mut order);
    Ok(order
        .chunks(batch_size)
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// A speech/text recombination: speech of batch record `speech`, text of
/// batch record `text`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShuffledPair {
    pub speech: usize,
    pub text: usize,
    /// 1 when both source records carry the same emotion label.
    pub consistent: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub labels: Vec<usize>,
    pub pairs: Vec<ShuffledPair>,
}

impl PairBatch {
    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    pub fn consistent_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.consistent).count()
    }

    /// Index of pair `(i, j)` in the row-major pair list.
    pub fn pair_index(&self, speech: usize, text: usize) -> usize {
        speech * self.labels.len() + text
    }
}

/// All `M^2` ordered speech/text recombinations of a batch, speech index
/// outer and text index inner.
pub fn emodality_shuffle(records: &[&FeatureRecord]) -> PairBatch {
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    let pairs = (0..labels.len())
        .flat_map(|i| {
            let labels = &labels;
            (0..labels.len()).map(move |j| ShuffledPair {
                speech: i,
                text: j,
                consistent: labels[i] == labels[j],
            })
        })
        .collect();
    PairBatch { labels, pairs }
}
