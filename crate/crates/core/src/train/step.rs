use super::model::{DrkfModel, LossBreakdown};
use super::optim::{AdamW, AdamWConfig};
use crate::dataio::{make_batches, Dataset, FeatureRecord};
use crate::error::{Error, Result};
use crate::kf::LossWeights;
use crate::numcore::{Graph, RngStream};

/// Forward, backward and one optimizer update on `records`. The returned
/// losses are those of the parameters before the update.
pub fn train_step(
    model: &mut DrkfModel,
    optim: &mut AdamW,
    records: &[&FeatureRecord],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let pv = model.store.bind(&mut g);
    let out = model.forward(&mut g, &pv, records, weights)?;
    let losses = out.losses.read(&g);
    if let Some((k, v)) = losses.values().iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss `{}` is {v}", LossBreakdown::NAMES[k])));
    }
    g.backward(out.losses.total)?;
    let grads = pv.grads(&g);
    optim.step(&mut model.store, &grads)?;
    Ok(losses)
}

/// Dataset indices used at global step `step`. Each epoch is a fresh
/// seeded permutation cut into batches, so the schedule depends only on
/// `(len, batch_size, seed, step)` and a resumed run sees the same batches.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64, step: u64) -> Result<Vec<usize>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if len == 0 {
        return Err(Error::Data("cannot batch an empty dataset".into()));
    }
    let per_epoch = len.div_ceil(batch_size) as u64;
    let epoch = step / per_epoch;
    let epoch_seed = RngStream::new(seed).fork(1 << 32 | epoch).next_u64();
    let mut batches = make_batches(len, batch_size, epoch_seed, false)?;
    Ok(batches.swap_remove((step % per_epoch) as usize))
}

/// Model, optimizer and schedule of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: DrkfModel,
    pub optim: AdamW,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub seed: u64,
}

impl Trainer {
    pub fn new(model: DrkfModel, optim: AdamWConfig, weights: LossWeights, batch_size: usize, seed: u64) -> Result<Self> {
        optim.validate()?;
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let optim = AdamW::new(optim, &model.store);
        Ok(Self {
            model,
            optim,
            weights,
            batch_size,
            seed,
        })
    }

    /// Steps taken so far (the optimizer's counter).
    pub fn steps_done(&self) -> u64 {
        self.optim.step
    }

    /// Runs the next scheduled batch of `data`.
    pub fn step(&mut self, data: &Dataset) -> Result<LossBreakdown> {
        let step = self.optim.step;
        let idx = batch_indices(data.len(), self.batch_size, self.seed, step)?;
        let records: Vec<&FeatureRecord> = idx.iter().map(|&i| &data.records[i]).collect();
        train_step(&mut self.model, &mut self.optim, &records, &self.weights)
            .map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("step {step}: {m}")),
                other => other,
            })
    }
}
