//! Independent plain-loop evaluator for the degenerate configuration
//! (no periodic heads, no adjacency term): a vanilla pre-norm transformer
//! encoder. It shares no forward code with the tape — every kernel is
//! re-written here with the same accumulation order — so agreement with the
//! main path is a genuine two-route check, and it is expected to be
//! *bitwise* in f32.

use crate::attention::Projector;
use crate::layers::{BN_EPS, LN_EPS};
use crate::model::FatModel;
use crate::tensor::Tensor;

#[derive(Clone)]
struct RefLinear {
    w: Vec<f32>, // (d_in, d_out) row-major
    b: Vec<f32>,
    d_in: usize,
    d_out: usize,
}

impl RefLinear {
    /// `x` is `rows x d_in` flattened; returns `rows x d_out`.
    /// Accumulates over the inner index in ascending order starting from
    /// zero, then adds the bias as a separate final addition.
    fn apply(&self, x: &[f32], rows: usize) -> Vec<f32> {
        assert_eq!(x.len(), rows * self.d_in);
        let mut out = vec![0.0f32; rows * self.d_out];
        for r in 0..rows {
            for k in 0..self.d_in {
                let a = x[r * self.d_in + k];
                for j in 0..self.d_out {
                    out[r * self.d_out + j] += a * self.w[k * self.d_out + j];
                }
            }
        }
        for r in 0..rows {
            for j in 0..self.d_out {
                out[r * self.d_out + j] += self.b[j];
            }
        }
        out
    }
}

/// Feature-wise normalization with frozen statistics (inference form).
#[derive(Clone)]
struct RefBatchNorm {
    gamma: Vec<f32>,
    beta: Vec<f32>,
    mean: Vec<f32>,
    var: Vec<f32>,
}

impl RefBatchNorm {
    fn apply(&self, x: &mut [f32]) {
        let d = self.gamma.len();
        let inv_std: Vec<f32> = self.var.iter().map(|&v| 1.0 / (v + BN_EPS as f32).sqrt()).collect();
        for r in 0..x.len() / d {
            for j in 0..d {
                let xh = (x[r * d + j] - self.mean[j]) * inv_std[j];
                x[r * d + j] = self.gamma[j] * xh + self.beta[j];
            }
        }
    }
}

#[derive(Clone)]
struct RefLayerNorm {
    gamma: Vec<f32>,
    beta: Vec<f32>,
}

impl RefLayerNorm {
    fn apply(&self, x: &[f32]) -> Vec<f32> {
        let d = self.gamma.len();
        let inv_d = 1.0f32 / d as f32;
        let mut out = vec![0.0f32; x.len()];
        for r in 0..x.len() / d {
            let row = &x[r * d..(r + 1) * d];
            let mut mean = 0.0f32;
            for &v in row {
                mean += v;
            }
            mean *= inv_d;
            let mut var = 0.0f32;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var *= inv_d;
            let is = 1.0 / (var + LN_EPS as f32).sqrt();
            for j in 0..d {
                out[r * d + j] = self.gamma[j] * ((row[j] - mean) * is) + self.beta[j];
            }
        }
        out
    }
}

#[derive(Clone)]
struct RefBlock {
    ln1: RefLayerNorm,
    q: RefLinear,
    k: RefLinear,
    v: RefLinear,
    w_out: RefLinear,
    ln2: RefLayerNorm,
    ffn_w1: RefLinear,
    ffn_w2: RefLinear,
}

/// Plain-loop vanilla transformer built from a trained degenerate model's
/// parameter values.
pub struct VanillaTransformer {
    channels: usize,
    bands: usize,
    embed: usize,
    heads: usize,
    f1: RefLinear,
    bn1: RefBatchNorm,
    f2: RefLinear,
    bn2: RefBatchNorm,
    pos: Option<Vec<f32>>,
    blocks: Vec<RefBlock>,
    classifier: RefLinear,
}

fn relu_inplace(x: &mut [f32]) {
    for v in x.iter_mut() {
        if !(*v > 0.0) {
            *v = 0.0;
        }
    }
}

impl VanillaTransformer {
    pub fn from_fat(model: &FatModel<f32>) -> Self {
        assert_eq!(model.cfg.p_ratio, 0.0, "reference covers only the no-periodic-head case");
        assert!(!model.cfg.use_adjacency, "reference covers only the no-adjacency case");
        let fetch = |id| model.params.get(id).data().to_vec();
        let lin = |l: &crate::layers::Linear| RefLinear {
            w: fetch(l.w),
            b: fetch(l.b.expect("reference expects biased projections")),
            d_in: l.d_in,
            d_out: l.d_out,
        };
        let proj = |p: &Projector| match p {
            Projector::Linear(l) => lin(l),
            Projector::Fal(f) | Projector::Fan(crate::layers::Fan { fal: f, .. }) => {
                assert_eq!(f.n_per, 0, "degenerate projector must be purely affine");
                RefLinear {
                    w: fetch(f.w_n.expect("affine branch")),
                    b: fetch(f.b_n.expect("affine bias")),
                    d_in: f.d_in,
                    d_out: f.d_out,
                }
            }
        };
        let bn = |b: &crate::layers::BatchNorm| RefBatchNorm {
            gamma: fetch(b.gamma),
            beta: fetch(b.beta),
            mean: fetch(b.run_mean),
            var: fetch(b.run_var),
        };
        let ln = |l: &crate::layers::LayerNorm| RefLayerNorm { gamma: fetch(l.gamma), beta: fetch(l.beta) };
        VanillaTransformer {
            channels: model.cfg.channels,
            bands: model.cfg.bands,
            embed: model.cfg.embed_dim,
            heads: model.cfg.heads,
            f1: lin(&model.embedding.f1),
            bn1: bn(&model.embedding.bn1),
            f2: lin(&model.embedding.f2),
            bn2: bn(&model.embedding.bn2),
            pos: model.positional.table.map(fetch),
            blocks: model
                .blocks
                .iter()
                .map(|blk| RefBlock {
                    ln1: ln(&blk.ln1),
                    q: proj(&blk.faa.q),
                    k: proj(&blk.faa.k),
                    v: proj(&blk.faa.v),
                    w_out: lin(&blk.faa.w_out),
                    ln2: ln(&blk.ln2),
                    ffn_w1: lin(&blk.ffn_w1),
                    ffn_w2: lin(&blk.ffn_w2),
                })
                .collect(),
            classifier: lin(&model.classifier),
        }
    }

    /// Inference-mode forward over `[batch, channels, bands]`, returning
    /// `[batch, n_classes]` logits.
    pub fn forward(&self, x: &Tensor<f32>) -> Tensor<f32> {
        assert_eq!(x.shape().len(), 3);
        let b = x.shape()[0];
        assert_eq!(x.shape()[1], self.channels);
        assert_eq!(x.shape()[2], self.bands);
        let c = self.channels;
        let e = self.embed;
        let tokens = b * c;

        // embedding
        let mut h = self.f1.apply(x.data(), tokens);
        self.bn1.apply(&mut h);
        relu_inplace(&mut h);
        let mut h = self.f2.apply(&h, tokens);
        self.bn2.apply(&mut h);
        relu_inplace(&mut h);

        if let Some(pos) = &self.pos {
            for i in 0..h.len() {
                h[i] += pos[i % (c * e)];
            }
        }

        let dh = e / self.heads;
        let scale = (1.0 / (dh as f64).sqrt()) as f32;
        for blk in &self.blocks {
            // attention sublayer
            let normed = blk.ln1.apply(&h);
            let q = blk.q.apply(&normed, tokens);
            let k = blk.k.apply(&normed, tokens);
            let v = blk.v.apply(&normed, tokens);
            let mut merged = vec![0.0f32; tokens * e];
            for head in 0..self.heads {
                let off = head * dh;
                for bi in 0..b {
                    let base = bi * c;
                    // scores = q . k^T / sqrt(dh), row-wise softmax
                    let mut probs = vec![0.0f32; c * c];
                    for i in 0..c {
                        for j in 0..c {
                            let mut acc = 0.0f32;
                            for t in 0..dh {
                                acc += q[(base + i) * e + off + t] * k[(base + j) * e + off + t];
                            }
                            probs[i * c + j] = acc * scale;
                        }
                    }
                    for i in 0..c {
                        let row = &mut probs[i * c..(i + 1) * c];
                        let mut max = row[0];
                        for &s in row.iter() {
                            if s > max {
                                max = s;
                            }
                        }
                        let mut denom = 0.0f32;
                        for s in row.iter_mut() {
                            *s = (*s - max).exp();
                            denom += *s;
                        }
                        for s in row.iter_mut() {
                            *s /= denom;
                        }
                    }
                    // context = probs . v
                    for i in 0..c {
                        for j in 0..c {
                            let p = probs[i * c + j];
                            for t in 0..dh {
                                merged[(base + i) * e + off + t] += p * v[(base + j) * e + off + t];
                            }
                        }
                    }
                }
            }
            let att = blk.w_out.apply(&merged, tokens);
            for i in 0..h.len() {
                h[i] += att[i];
            }

            // feed-forward sublayer
            let normed = blk.ln2.apply(&h);
            let mut f = blk.ffn_w1.apply(&normed, tokens);
            relu_inplace(&mut f);
            let f = blk.ffn_w2.apply(&f, tokens);
            for i in 0..h.len() {
                h[i] += f[i];
            }
        }

        // mean over channels, then the linear head
        let inv_c = 1.0f32 / c as f32;
        let mut pooled = vec![0.0f32; b * e];
        for bi in 0..b {
            for ci in 0..c {
                for j in 0..e {
                    pooled[bi * e + j] += h[(bi * c + ci) * e + j];
                }
            }
        }
        for v in pooled.iter_mut() {
            *v *= inv_c;
        }
        let logits = self.classifier.apply(&pooled, b);
        Tensor::new(vec![b, self.classifier.d_out], logits)
    }
}
