use serde::Serialize;

use super::model::{DrkfModel, LossBreakdown};
use crate::dataio::FeatureRecord;
use crate::error::Result;
use crate::kf::LossWeights;
use crate::numcore::{finite_diff_multi, relative_error, Fault, Graph};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is essentially zero are compared in absolute terms.
    pub floor: f64,
    pub tolerance: f64,
    /// Backward-rule corruption for exercising the checker itself.
    pub fault: Fault,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            floor: 1e-6,
            tolerance: 1e-3,
            fault: Fault::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComponentCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Parameter and flat index of the worst coordinate.
    pub worst_param: String,
    pub worst_index: usize,
    /// Parameters with at least one coordinate over tolerance.
    pub offenders: Vec<String>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub parameters: usize,
    /// The nine loss components, then the composite.
    pub components: Vec<ComponentCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
    }
}

/// Compares reverse-mode gradients of every loss component with respect to
/// every parameter against central finite differences on one batch.
pub fn gradcheck(
    model: &DrkfModel,
    records: &[&FeatureRecord],
    weights: &LossWeights,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let mut g = Graph::with_fault(opts.fault);
    let pv = model.store.bind(&mut g);
    let out = model.forward(&mut g, &pv, records, weights)?;
    let mut analytic = Vec::with_capacity(10);
    for var in out.losses.vars() {
        g.zero_grad();
        g.backward(var)?;
        analytic.push(pv.grads(&g).concat());
    }

    let mut probe = model.clone();
    let theta = model.store.flat();
    let numeric = finite_diff_multi(
        |flat| {
            probe.store.set_flat(flat)?;
            let mut g = Graph::new();
            let pv = probe.store.bind_frozen(&mut g);
            let out = probe.forward(&mut g, &pv, records, weights)?;
            Ok(out.losses.read(&g).values().to_vec())
        },
        &theta,
        opts.h,
    )?;

    let components = LossBreakdown::NAMES
        .iter()
        .zip(analytic.iter().zip(&numeric))
        .map(|(name, (a, n))| {
            let mut worst = (0.0f64, 0usize);
            let mut offenders: Vec<String> = Vec::new();
            for (k, (&ak, &nk)) in a.iter().zip(n).enumerate() {
                let e = relative_error(ak, nk, opts.floor);
                if e > worst.0 || e.is_nan() {
                    worst = (e, k);
                }
                if e.is_nan() || e > opts.tolerance {
                    let (p, _) = model.store.locate(k).expect("coordinate in range");
                    if offenders.last().map(String::as_str) != Some(p) {
                        offenders.push(p.to_string());
                    }
                }
            }
            let (p, i) = model.store.locate(worst.1).expect("coordinate in range");
            ComponentCheck {
                name: (*name).to_string(),
                max_rel_error: worst.0,
                worst_param: p.to_string(),
                worst_index: i,
                passed: offenders.is_empty(),
                offenders,
            }
        })
        .collect();
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        parameters: theta.len(),
        components,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{gen_synthetic, SyntheticSpec};
    use crate::train::ModelConfig;

    fn setup(seed: u64) -> (DrkfModel, Vec<FeatureRecord>) {
        let cfg = ModelConfig {
            d_z: 8,
            d_p: 16,
            d_h: 16,
            classes: 4,
            fe_heads: 2,
            ae_init_scale: 0.3,
            ..Default::default()
        };
        let data = gen_synthetic(&SyntheticSpec {
            d_z: 8,
            records: 2,
            m: 3,
            n: 2,
            seed,
            ..Default::default()
        })
        .unwrap();
        (DrkfModel::new(cfg, seed).unwrap(), data.dataset.records)
    }

    #[test]
    fn clean_graph_passes_and_fault_is_caught() {
        let (model, recs) = setup(0);
        let refs: Vec<_> = recs.iter().collect();
        let w = LossWeights::default();
        let r = gradcheck(&model, &refs, &w, &GradcheckOptions::default()).unwrap();
        assert_eq!(r.components.len(), 10);
        assert!(r.passed());

        let bad = GradcheckOptions {
            fault: Fault::SiluBackward,
            ..Default::default()
        };
        let r = gradcheck(&model, &refs, &w, &bad).unwrap();
        assert!(!r.passed());
        assert!(r.components.iter().any(|c| !c.offenders.is_empty()));
    }
}
