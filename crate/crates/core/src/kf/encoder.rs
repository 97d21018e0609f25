use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numcore::{Graph, ParamId, ParamStore, ParamVars, RngStream, Tensor, Var};

/// Segment of a fusion-sequence position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Special = 0,
    Speech = 1,
    Text = 2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub d_z: usize,
    pub layers: usize,
    pub heads: usize,
    /// Learned absolute position embeddings.
    pub pos_emb: bool,
    /// Longest fusion sequence supported when `pos_emb` is on.
    pub max_len: usize,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ln1: (ParamId, ParamId),
    ff_in: Linear,
    ff_out: Linear,
    ln2: (ParamId, ParamId),
}

/// Attention weights per layer, per head (`L x L` each).
pub type FusionTrace = Vec<Vec<Tensor>>;

/// Post-LN transformer encoder over `[CLS, speech.., SEP, text.., SEP]`.
#[derive(Clone, Debug)]
pub struct FusionEncoder {
    config: FusionConfig,
    /// Row 0: CLS token, row 1: SEP token.
    special: ParamId,
    /// One row per [`Segment`].
    segments: ParamId,
    positions: Option<ParamId>,
    layers: Vec<EncoderLayer>,
}

fn layer_norm_params(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}.gain"), Tensor::vector(vec![1.0; d])),
        store.add(format!("{name}.bias"), Tensor::vector(vec![0.0; d])),
    )
}

impl FusionEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: FusionConfig,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let d = config.d_z;
        if config.heads == 0 || !d.is_multiple_of(config.heads) {
            return Err(Error::InvalidArgument(format!(
                "d_z = {d} is not divisible by {} attention heads",
                config.heads
            )));
        }
        let special = store.add(
            format!("{name}.special"),
            Tensor::from_parts(vec![2, d], rng.normals(2 * d, 0.1)),
        );
        let segments = store.add(
            format!("{name}.segments"),
            Tensor::from_parts(vec![3, d], rng.normals(3 * d, 0.1)),
        );
        let positions = config.pos_emb.then(|| {
            store.add(
                format!("{name}.positions"),
                Tensor::from_parts(vec![config.max_len, d], rng.normals(config.max_len * d, 0.1)),
            )
        });
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                EncoderLayer {
                    query: Linear::init_default(store, &format!("{p}.query"), d, d, rng),
                    key: Linear::init_default(store, &format!("{p}.key"), d, d, rng),
                    value: Linear::init_default(store, &format!("{p}.value"), d, d, rng),
                    out: Linear::init_default(store, &format!("{p}.out"), d, d, rng),
                    ln1: layer_norm_params(store, &format!("{p}.ln1"), d),
                    ff_in: Linear::init_default(store, &format!("{p}.ff_in"), d, 4 * d, rng),
                    ff_out: Linear::init_default(store, &format!("{p}.ff_out"), 4 * d, d, rng),
                    ln2: layer_norm_params(store, &format!("{p}.ln2"), d),
                }
            })
            .collect();
        Ok(Self {
            config,
            special,
            segments,
            positions,
            layers,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    /// Concatenates `[CLS, speech, SEP, text, SEP]` and adds segment (and,
    /// if enabled, position) embeddings.
    pub fn build_fusion_sequence(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        speech: Var,
        text: Var,
    ) -> Result<(Var, Vec<Segment>)> {
        let d = self.config.d_z;
        for (what, v) in [("speech", speech), ("text", text)] {
            let s = g.shape(v);
            if s.len() != 2 || s[1] != d {
                return Err(Error::shape(
                    "build_fusion_sequence",
                    format!("{what} sequence {s:?}, encoder width {d}"),
                ));
            }
        }
        let (m, n) = (g.shape(speech)[0], g.shape(text)[0]);
        let cls = g.gather_rows(pv.get(self.special), &[0])?;
        let sep = g.gather_rows(pv.get(self.special), &[1])?;
        let seq = g.concat_rows(&[cls, speech, sep, text, sep])?;

        let mut segs = Vec::with_capacity(m + n + 3);
        segs.push(Segment::Special);
        segs.extend(std::iter::repeat_n(Segment::Speech, m));
        segs.push(Segment::Special);
        segs.extend(std::iter::repeat_n(Segment::Text, n));
        segs.push(Segment::Special);

        let ids: Vec<usize> = segs.iter().map(|s| *s as usize).collect();
        let seg_emb = g.gather_rows(pv.get(self.segments), &ids)?;
        let mut x = g.add(seq, seg_emb)?;
        if let Some(pos) = self.positions {
            if segs.len() > self.config.max_len {
                return Err(Error::shape(
                    "build_fusion_sequence",
                    format!("sequence length {} exceeds max_len {}", segs.len(), self.config.max_len),
                ));
            }
            let idx: Vec<usize> = (0..segs.len()).collect();
            let pe = g.gather_rows(pv.get(pos), &idx)?;
            x = g.add(x, pe)?;
        }
        Ok((x, segs))
    }

    fn encode(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        mut x: Var,
        mut trace: Option<&mut FusionTrace>,
    ) -> Result<Var> {
        let heads = self.config.heads;
        let dh = self.config.d_z / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for layer in &self.layers {
            let q = layer.query.forward(g, pv, x)?;
            let k = layer.key.forward(g, pv, x)?;
            let v = layer.value.forward(g, pv, x)?;
            let mut outs = Vec::with_capacity(heads);
            let mut weights = Vec::new();
            for h in 0..heads {
                let qh = g.slice_cols(q, h * dh, dh)?;
                let kh = g.slice_cols(k, h * dh, dh)?;
                let vh = g.slice_cols(v, h * dh, dh)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, scale);
                let attn = g.softmax(scores, 1)?;
                if trace.is_some() {
                    weights.push(g.value(attn).clone());
                }
                outs.push(g.matmul(attn, vh)?);
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(weights);
            }
            let heads_out = g.concat_cols(&outs)?;
            let attn_out = layer.out.forward(g, pv, heads_out)?;
            let res = g.add(x, attn_out)?;
            let x1 = g.layer_norm_rows(res, pv.get(layer.ln1.0), pv.get(layer.ln1.1))?;
            let f = layer.ff_in.forward(g, pv, x1)?;
            let f = g.silu(f);
            let f = layer.ff_out.forward(g, pv, f)?;
            let res = g.add(x1, f)?;
            x = g.layer_norm_rows(res, pv.get(layer.ln2.0), pv.get(layer.ln2.1))?;
        }
        Ok(x)
    }

    /// Fused vector (`1 x d_z`): encoder output at the CLS position.
    pub fn fuse(&self, g: &mut Graph, pv: &ParamVars, speech: Var, text: Var) -> Result<Var> {
        let (x, _) = self.build_fusion_sequence(g, pv, speech, text)?;
        let out = self.encode(g, pv, x, None)?;
        g.slice_rows(out, 0, 1)
    }

    /// Like [`FusionEncoder::fuse`], also returning every attention matrix.
    pub fn fuse_traced(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        speech: Var,
        text: Var,
    ) -> Result<(Var, FusionTrace)> {
        let (x, _) = self.build_fusion_sequence(g, pv, speech, text)?;
        let mut trace = Vec::new();
        let out = self.encode(g, pv, x, Some(&mut trace))?;
        Ok((g.slice_rows(out, 0, 1)?, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{finite_diff_grad, relative_error};

    fn encoder(d: usize, heads: usize, pos_emb: bool, seed: u64) -> (ParamStore, FusionEncoder) {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(seed);
        let cfg = FusionConfig {
            d_z: d,
            layers: 2,
            heads,
            pos_emb,
            max_len: 16,
        };
        let fe = FusionEncoder::new(&mut store, "fe", cfg, &mut rng).unwrap();
        (store, fe)
    }

    fn seq(rng: &mut RngStream, len: usize, d: usize) -> Tensor {
        Tensor::matrix(len, d, rng.normals(len * d, 1.0)).unwrap()
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        let cfg = FusionConfig {
            d_z: 10,
            layers: 1,
            heads: 4,
            pos_emb: false,
            max_len: 8,
        };
        assert!(FusionEncoder::new(&mut store, "fe", cfg, &mut RngStream::new(0)).is_err());
    }

    #[test]
    fn sequence_layout() {
        let (store, fe) = encoder(8, 2, false, 0);
        let mut rng = RngStream::new(1);
        let mut g = Graph::new();
        let pv = store.bind(&mut g);
        let s = g.constant(seq(&mut rng, 3, 8));
        let t = g.constant(seq(&mut rng, 2, 8));
        let (x, segs) = fe.build_fusion_sequence(&mut g, &pv, s, t).unwrap();
        assert_eq!(g.shape(x), &[8, 8]);
        assert_eq!(segs.len(), 8);

        let s1 = g.constant(seq(&mut rng, 1, 8));
        let t1 = g.constant(seq(&mut rng, 1, 8));
        let (_, segs) = fe.build_fusion_sequence(&mut g, &pv, s1, t1).unwrap();
        use Segment::*;
        assert_eq!(segs, vec![Special, Speech, Special, Text, Special]);

        let bad = g.constant(seq(&mut rng, 2, 6));
        assert!(fe.build_fusion_sequence(&mut g, &pv, bad, t1).is_err());
    }

    #[test]
    fn zero_special_embeddings_leave_tokens_untouched() {
        let (mut store, fe) = encoder(4, 2, false, 0);
        for name in ["fe.special", "fe.segments"] {
            let id = store.find(name).unwrap();
            store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut rng = RngStream::new(2);
        let (sv, tv) = (seq(&mut rng, 2, 4), seq(&mut rng, 3, 4));
        let mut g = Graph::new();
        let pv = store.bind(&mut g);
        let s = g.constant(sv.clone());
        let t = g.constant(tv.clone());
        let (x, _) = fe.build_fusion_sequence(&mut g, &pv, s, t).unwrap();
        let x = g.value(x);
        assert_eq!(x.row(1), sv.row(0));
        assert_eq!(x.row(2), sv.row(1));
        assert_eq!(x.row(4), tv.row(0));
        assert_eq!(x.row(6), tv.row(2));
        assert!(x.row(0).iter().chain(x.row(3)).chain(x.row(7)).all(|v| *v == 0.0));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (store, fe) = encoder(8, 4, true, 3);
        let mut rng = RngStream::new(3);
        let mut g = Graph::new();
        let pv = store.bind(&mut g);
        let s = g.constant(seq(&mut rng, 4, 8));
        let t = g.constant(seq(&mut rng, 3, 8));
        let (x, trace) = fe.fuse_traced(&mut g, &pv, s, t).unwrap();
        assert_eq!(g.shape(x), &[1, 8]);
        assert_eq!(trace.len(), 2);
        for layer in &trace {
            assert_eq!(layer.len(), 4);
            for a in layer {
                assert_eq!(a.shape(), &[10, 10]);
                for i in 0..10 {
                    assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn within_segment_permutation_invariance() {
        let (store, fe) = encoder(8, 2, false, 4);
        let mut rng = RngStream::new(4);
        let (sv, tv) = (seq(&mut rng, 5, 8), seq(&mut rng, 4, 8));
        let fused = |s: &Tensor, t: &Tensor| {
            let mut g = Graph::new();
            let pv = store.bind_frozen(&mut g);
            let s = g.constant(s.clone());
            let t = g.constant(t.clone());
            let x = fe.fuse(&mut g, &pv, s, t).unwrap();
            g.value(x).clone()
        };
        let base = fused(&sv, &tv);
        let perm = |t: &Tensor, order: &[usize]| {
            Tensor::from_rows(&order.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
        };
        let other = fused(&perm(&sv, &[3, 0, 4, 2, 1]), &perm(&tv, &[1, 3, 0, 2]));
        for (a, b) in base.data().iter().zip(other.data()) {
            assert!((a - b).abs() <= 1e-9);
        }
        // Swapping the modality payloads is not a symmetry.
        let swapped = fused(&tv, &sv);
        let diff: f64 = base.data().iter().zip(swapped.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn positional_embeddings_break_permutation_symmetry() {
        let (store, fe) = encoder(8, 2, true, 5);
        let mut rng = RngStream::new(5);
        let (sv, tv) = (seq(&mut rng, 3, 8), seq(&mut rng, 3, 8));
        let run = |s: &Tensor| {
            let mut g = Graph::new();
            let pv = store.bind_frozen(&mut g);
            let s = g.constant(s.clone());
            let t = g.constant(tv.clone());
            let x = fe.fuse(&mut g, &pv, s, t).unwrap();
            g.value(x).clone()
        };
        let rev = Tensor::from_rows(&[sv.row(2).to_vec(), sv.row(1).to_vec(), sv.row(0).to_vec()]).unwrap();
        assert_ne!(run(&sv), run(&rev));
    }

    #[test]
    fn parameter_gradient_of_squared_norm_matches_finite_differences() {
        let (mut store, fe) = encoder(4, 2, true, 6);
        let mut rng = RngStream::new(6);
        let (sv, tv) = (seq(&mut rng, 2, 4), seq(&mut rng, 2, 4));
        let objective = |store: &ParamStore, backward: bool| {
            let mut g = Graph::new();
            let pv = store.bind(&mut g);
            let s = g.constant(sv.clone());
            let t = g.constant(tv.clone());
            let x = fe.fuse(&mut g, &pv, s, t).unwrap();
            let sq = g.mul(x, x).unwrap();
            let l = g.sum(sq);
            if backward {
                g.backward(l).unwrap();
            }
            (g.item(l), pv.grads(&g).concat())
        };
        let (_, analytic) = objective(&store, true);
        let theta = store.flat();
        let numeric = finite_diff_grad(
            |th| {
                store.set_flat(th).unwrap();
                objective(&store, false).0
            },
            &theta,
            1e-5,
        )
        .unwrap();
        let worst = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| relative_error(*a, *n, 1e-6))
            .fold(0.0, f64::max);
        assert!(worst < 1e-3, "{worst}");
    }
}
