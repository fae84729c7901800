//! Deconfounded attention over a clustered codebook.
//!
//! Each layer runs three attentions from a shared input: self-attention
//! over the sample's own tokens, attention from a dedicated query map into
//! the codebook, and cross-attention from the self queries into the same
//! codebook. The three results are concatenated, linearly fused back to
//! the model dim, residual-added, and layer-normalized. The codebook is
//! initialized from k-means centroids over training features and trained
//! from there.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::kmeans::{kmeans, KMeansError, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::tensor::{NodeId, Result, Tape, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DictSource {
    Regions,
    Phrases,
}

/// Confounder codebook: keys/values start as the same k-means centroids
/// and diverge during training.
#[derive(Debug, Clone)]
pub struct GlobalDictionary {
    pub source: DictSource,
    pub keys: Tensor,
    pub values: Tensor,
    pub kmeans_objective_trace: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum DictionaryError {
    #[error("codebook needs at least 2 entries, got {0}")]
    TooSmall(usize),
    #[error(transparent)]
    KMeans(#[from] KMeansError),
}

/// Compress pooled training features into a `k`-entry codebook.
pub fn build_dictionary(
    train_features: &Tensor,
    k: usize,
    seed: u64,
    source: DictSource,
) -> std::result::Result<GlobalDictionary, DictionaryError> {
    if k < 2 {
        return Err(DictionaryError::TooSmall(k));
    }
    let result = kmeans(train_features, k, DEFAULT_MAX_ITERS, DEFAULT_TOL, seed)?;
    Ok(GlobalDictionary {
        source,
        keys: result.centroids.clone(),
        values: result.centroids,
        kmeans_objective_trace: result.objective_trace,
    })
}

impl GlobalDictionary {
    pub fn entries(&self) -> usize {
        self.keys.rows()
    }

    pub fn bind(&self, tape: &mut Tape) -> DictionaryNodes {
        DictionaryNodes {
            keys: tape.param(self.keys.clone()),
            values: tape.param(self.values.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DictionaryNodes {
    pub keys: NodeId,
    pub values: NodeId,
}

/// Trainable tensors for one attention layer.
#[derive(Debug, Clone)]
pub struct IdaLayerParams {
    /// Query map h(·) shared by self-attention and cross-sampling.
    pub w_qm: Tensor,
    pub w_km: Tensor,
    pub w_vm: Tensor,
    /// Query map f(·) feeding confounder attention.
    pub w_qc: Tensor,
    /// Fusion g(·): `[3d × d]` over concatenated [cross; self; conf].
    pub w_fuse: Tensor,
    pub b_fuse: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    pub heads: usize,
}

impl IdaLayerParams {
    pub fn init(d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads >= 1 && d % heads == 0, "model dim must split into heads");
        let proj = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        let fuse = Normal::new(0.0, 1.0 / (3.0 * d as f64).sqrt()).expect("valid std");
        let mat = |rows: usize, cols: usize, dist: &Normal<f64>, rng: &mut dyn rand::RngCore| {
            let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
            Tensor::new(vec![rows, cols], data).expect("init shape")
        };
        IdaLayerParams {
            w_qm: mat(d, d, &proj, rng),
            w_km: mat(d, d, &proj, rng),
            w_vm: mat(d, d, &proj, rng),
            w_qc: mat(d, d, &proj, rng),
            w_fuse: mat(3 * d, d, &fuse, rng),
            b_fuse: Tensor::zeros(vec![d]),
            ln_gain: Tensor::new(vec![d], vec![1.0; d]).expect("gain shape"),
            ln_bias: Tensor::zeros(vec![d]),
            heads,
        }
    }

    pub fn fields(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_qm", &self.w_qm),
            ("w_km", &self.w_km),
            ("w_vm", &self.w_vm),
            ("w_qc", &self.w_qc),
            ("w_fuse", &self.w_fuse),
            ("b_fuse", &self.b_fuse),
            ("ln_gain", &self.ln_gain),
            ("ln_bias", &self.ln_bias),
        ]
    }

    pub fn fields_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w_qm", &mut self.w_qm),
            ("w_km", &mut self.w_km),
            ("w_vm", &mut self.w_vm),
            ("w_qc", &mut self.w_qc),
            ("w_fuse", &mut self.w_fuse),
            ("b_fuse", &mut self.b_fuse),
            ("ln_gain", &mut self.ln_gain),
            ("ln_bias", &mut self.ln_bias),
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> IdaLayerNodes {
        IdaLayerNodes {
            w_qm: tape.param(self.w_qm.clone()),
            w_km: tape.param(self.w_km.clone()),
            w_vm: tape.param(self.w_vm.clone()),
            w_qc: tape.param(self.w_qc.clone()),
            w_fuse: tape.param(self.w_fuse.clone()),
            b_fuse: tape.param(self.b_fuse.clone()),
            ln_gain: tape.param(self.ln_gain.clone()),
            ln_bias: tape.param(self.ln_bias.clone()),
            heads: self.heads,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IdaLayerNodes {
    pub w_qm: NodeId,
    pub w_km: NodeId,
    pub w_vm: NodeId,
    pub w_qc: NodeId,
    pub w_fuse: NodeId,
    pub b_fuse: NodeId,
    pub ln_gain: NodeId,
    pub ln_bias: NodeId,
    pub heads: usize,
}

/// Attention result: fused output plus per-head weight matrices (detached
/// copies, for inspection and invariant checks).
pub struct Attention {
    pub output: NodeId,
    pub weights: Vec<Tensor>,
}

/// Standard scaled-dot-product multi-head attention. Queries `[t × d]`,
/// keys/values `[s × d]`; scores scaled by `1/√(d/heads)`.
pub fn multi_head_attention(
    tape: &mut Tape,
    queries: NodeId,
    keys: NodeId,
    values: NodeId,
    heads: usize,
) -> Result<Attention> {
    let d = tape.value(queries).cols();
    if tape.value(keys).cols() != d || tape.value(values).cols() != d {
        return Err(TensorError::ShapeMismatch {
            op: "multi_head_attention",
            lhs: tape.value(queries).shape().to_vec(),
            rhs: tape.value(keys).shape().to_vec(),
        });
    }
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Contract(format!(
            "dim {d} does not split into {heads} heads"
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outputs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(queries, lo, hi)?;
        let kh = tape.slice_cols(keys, lo, hi)?;
        let vh = tape.slice_cols(values, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax(scaled, 1)?;
        weights.push(tape.value(attn).clone());
        outputs.push(tape.matmul(attn, vh)?);
    }
    let output = if heads == 1 {
        outputs[0]
    } else {
        tape.concat_cols(&outputs)?
    };
    Ok(Attention { output, weights })
}

/// Self-sampling: attention over the sample's own tokens (from h-queries)
/// and over the codebook (from f-queries).
pub fn self_sample(
    tape: &mut Tape,
    x: NodeId,
    layer: &IdaLayerNodes,
    dict: DictionaryNodes,
) -> Result<(Attention, Attention)> {
    let q_m = tape.matmul(x, layer.w_qm)?;
    let k_m = tape.matmul(x, layer.w_km)?;
    let v_m = tape.matmul(x, layer.w_vm)?;
    let own = multi_head_attention(tape, q_m, k_m, v_m, layer.heads)?;
    let q_c = tape.matmul(x, layer.w_qc)?;
    let conf = multi_head_attention(tape, q_c, dict.keys, dict.values, layer.heads)?;
    Ok((own, conf))
}

/// Cross-sampling: h-queries against codebook keys and values.
pub fn cross_sample(
    tape: &mut Tape,
    x: NodeId,
    layer: &IdaLayerNodes,
    dict: DictionaryNodes,
) -> Result<Attention> {
    let q_m = tape.matmul(x, layer.w_qm)?;
    multi_head_attention(tape, q_m, dict.keys, dict.values, layer.heads)
}

/// Per-layer attention weights kept for inspection.
pub struct IdaLayerAttn {
    pub attn_self: Vec<Tensor>,
    pub attn_conf: Vec<Tensor>,
    pub attn_cross: Vec<Tensor>,
}

pub fn ida_layer(
    tape: &mut Tape,
    x: NodeId,
    layer: &IdaLayerNodes,
    dict: DictionaryNodes,
) -> Result<(NodeId, IdaLayerAttn)> {
    let cross = cross_sample(tape, x, layer, dict)?;
    let (own, conf) = self_sample(tape, x, layer, dict)?;
    let cat = tape.concat_cols(&[cross.output, own.output, conf.output])?;
    let fused = tape.matmul(cat, layer.w_fuse)?;
    let fused = tape.add_row(fused, layer.b_fuse)?;
    let residual = tape.add(fused, x)?;
    let out = tape.layer_norm(residual, layer.ln_gain, layer.ln_bias)?;
    Ok((
        out,
        IdaLayerAttn {
            attn_self: own.weights,
            attn_conf: conf.weights,
            attn_cross: cross.weights,
        },
    ))
}

/// Full stack. Zero layers is the identity.
pub fn ida_forward(
    tape: &mut Tape,
    x: NodeId,
    layers: &[IdaLayerNodes],
    dict: DictionaryNodes,
) -> Result<(NodeId, Vec<IdaLayerAttn>)> {
    let mut current = x;
    let mut attn = Vec::with_capacity(layers.len());
    for layer in layers {
        let (next, weights) = ida_layer(tape, current, layer, dict)?;
        current = next;
        attn.push(weights);
    }
    Ok((current, attn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{finite_diff_check_params, DEFAULT_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn toy_dict(rng: &mut ChaCha8Rng, k: usize, d: usize) -> GlobalDictionary {
        GlobalDictionary {
            source: DictSource::Regions,
            keys: randn(rng, &[k, d]),
            values: randn(rng, &[k, d]),
            kmeans_objective_trace: vec![],
        }
    }

    #[test]
    fn build_dictionary_from_blobs_lands_near_blob_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for _ in 0..30 {
            let n: f64 = StandardNormal.sample(&mut rng);
            rows.push(vec![1.0 + 0.02 * n, -2.0]);
        }
        for _ in 0..30 {
            let n: f64 = StandardNormal.sample(&mut rng);
            rows.push(vec![-4.0, 3.0 + 0.02 * n]);
        }
        let features = Tensor::from_rows(&rows).unwrap();
        let dict = build_dictionary(&features, 2, 9, DictSource::Phrases).unwrap();
        assert_eq!(dict.keys.shape(), &[2, 2]);
        assert_eq!(dict.keys.data(), dict.values.data());
        assert!(dict.keys.all_finite());
        let mut centers: Vec<Vec<f64>> = (0..2).map(|i| dict.keys.row(i).to_vec()).collect();
        centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((centers[0][0] + 4.0).abs() < 0.1 && (centers[0][1] - 3.0).abs() < 0.1);
        assert!((centers[1][0] - 1.0).abs() < 0.1 && (centers[1][1] + 2.0).abs() < 0.1);
        assert!(!dict.kmeans_objective_trace.is_empty());
    }

    #[test]
    fn dictionary_smaller_than_two_is_rejected() {
        let features = Tensor::zeros(vec![4, 2]);
        assert!(matches!(
            build_dictionary(&features, 1, 0, DictSource::Regions),
            Err(DictionaryError::TooSmall(1))
        ));
    }

    #[test]
    fn single_token_single_entry_attention_is_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 4;
        let params = IdaLayerParams::init(d, 1, &mut rng);
        let dict = GlobalDictionary {
            source: DictSource::Regions,
            keys: randn(&mut rng, &[1, d]),
            values: randn(&mut rng, &[1, d]),
            kmeans_objective_trace: vec![],
        };
        let mut tape = Tape::new();
        let x = tape.leaf(randn(&mut rng, &[1, d]));
        let nodes = params.bind(&mut tape);
        let dict_nodes = dict.bind(&mut tape);
        let (own, conf) = self_sample(&mut tape, x, &nodes, dict_nodes).unwrap();
        assert_eq!(own.weights[0].data(), &[1.0]);
        assert_eq!(conf.weights[0].data(), &[1.0]);
    }

    #[test]
    fn zero_queries_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (d, t, k) = (8, 5, 3);
        let params = IdaLayerParams::init(d, 2, &mut rng);
        let dict = toy_dict(&mut rng, k, d);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![t, d]));
        let nodes = params.bind(&mut tape);
        let dict_nodes = dict.bind(&mut tape);
        let (own, conf) = self_sample(&mut tape, x, &nodes, dict_nodes).unwrap();
        for head in &own.weights {
            for v in head.data() {
                assert!((v - 1.0 / t as f64).abs() < 1e-12);
            }
        }
        for head in &conf.weights {
            for v in head.data() {
                assert!((v - 1.0 / k as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (d, t, k) = (8, 4, 6);
        let layers: Vec<IdaLayerParams> =
            (0..2).map(|_| IdaLayerParams::init(d, 4, &mut rng)).collect();
        let dict = toy_dict(&mut rng, k, d);
        let mut tape = Tape::new();
        let x = tape.leaf(randn(&mut rng, &[t, d]));
        let dict_nodes = dict.bind(&mut tape);
        let nodes: Vec<IdaLayerNodes> = layers.iter().map(|l| l.bind(&mut tape)).collect();
        let (_, attn) = ida_forward(&mut tape, x, &nodes, dict_nodes).unwrap();
        assert_eq!(attn.len(), 2);
        for layer in &attn {
            for weights in [&layer.attn_self, &layer.attn_conf, &layer.attn_cross] {
                for head in weights {
                    for i in 0..head.rows() {
                        let sum: f64 = head.row(i).iter().sum();
                        assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
                    }
                }
            }
        }
    }

    #[test]
    fn cross_sample_with_single_entry_broadcasts_the_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 6;
        let params = IdaLayerParams::init(d, 1, &mut rng);
        let dict = toy_dict(&mut rng, 1, d);
        let mut tape = Tape::new();
        let x = tape.leaf(randn(&mut rng, &[3, d]));
        let nodes = params.bind(&mut tape);
        let dict_nodes = dict.bind(&mut tape);
        let cross = cross_sample(&mut tape, x, &nodes, dict_nodes).unwrap();
        let out = tape.value(cross.output);
        for i in 0..3 {
            assert_eq!(out.row(i), dict.values.row(0));
        }
    }

    #[test]
    fn cross_sample_with_zero_values_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 4;
        let params = IdaLayerParams::init(d, 2, &mut rng);
        let dict = GlobalDictionary {
            source: DictSource::Regions,
            keys: randn(&mut rng, &[5, d]),
            values: Tensor::zeros(vec![5, d]),
            kmeans_objective_trace: vec![],
        };
        let mut tape = Tape::new();
        let x = tape.leaf(randn(&mut rng, &[2, d]));
        let nodes = params.bind(&mut tape);
        let dict_nodes = dict.bind(&mut tape);
        let cross = cross_sample(&mut tape, x, &nodes, dict_nodes).unwrap();
        assert!(tape.value(cross.output).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_rows_are_convex_combinations_of_value_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (d, t, k) = (8, 3, 4);
        let params = IdaLayerParams::init(d, 2, &mut rng);
        let dict = toy_dict(&mut rng, k, d);
        let mut tape = Tape::new();
        let x = tape.leaf(randn(&mut rng, &[t, d]));
        let nodes = params.bind(&mut tape);
        let dict_nodes = dict.bind(&mut tape);
        let cross = cross_sample(&mut tape, x, &nodes, dict_nodes).unwrap();
        let out = tape.value(cross.output);
        let dh = d / 2;
        for (h, weights) in cross.weights.iter().enumerate() {
            for i in 0..t {
                for j in 0..dh {
                    let expect: f64 = (0..k)
                        .map(|e| weights.get2(i, e) * dict.values.get2(e, h * dh + j))
                        .sum();
                    let got = out.get2(i, h * dh + j);
                    assert!((expect - got).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_layers_is_the_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dict = toy_dict(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let input = randn(&mut rng, &[2, 4]);
        let x = tape.leaf(input.clone());
        let dict_nodes = dict.bind(&mut tape);
        let (out, attn) = ida_forward(&mut tape, x, &[], dict_nodes).unwrap();
        assert_eq!(tape.value(out).data(), input.data());
        assert!(attn.is_empty());
    }

    #[test]
    fn six_layer_stack_keeps_shape_and_stays_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (d, t) = (16, 4);
        let layers: Vec<IdaLayerParams> =
            (0..6).map(|_| IdaLayerParams::init(d, 4, &mut rng)).collect();
        let dict = toy_dict(&mut rng, 8, d);
        let mut tape = Tape::new();
        let x = tape.leaf(randn(&mut rng, &[t, d]));
        let dict_nodes = dict.bind(&mut tape);
        let nodes: Vec<IdaLayerNodes> = layers.iter().map(|l| l.bind(&mut tape)).collect();
        let (out, attn) = ida_forward(&mut tape, x, &nodes, dict_nodes).unwrap();
        assert_eq!(tape.value(out).shape(), &[t, d]);
        assert!(tape.value(out).all_finite());
        assert_eq!(attn.len(), 6);
    }

    #[test]
    fn permuting_codebook_rows_leaves_output_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (d, t, k) = (8, 3, 5);
        let layers: Vec<IdaLayerParams> =
            (0..2).map(|_| IdaLayerParams::init(d, 2, &mut rng)).collect();
        let dict = toy_dict(&mut rng, k, d);
        let input = randn(&mut rng, &[t, d]);

        let run = |dict: &GlobalDictionary| -> Tensor {
            let mut tape = Tape::new();
            let x = tape.leaf(input.clone());
            let dict_nodes = dict.bind(&mut tape);
            let nodes: Vec<IdaLayerNodes> = layers.iter().map(|l| l.bind(&mut tape)).collect();
            let (out, _) = ida_forward(&mut tape, x, &nodes, dict_nodes).unwrap();
            tape.value(out).clone()
        };

        let base = run(&dict);
        let perm = [3usize, 0, 4, 1, 2];
        let permute = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).to_vec()).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let shuffled = GlobalDictionary {
            source: dict.source,
            keys: permute(&dict.keys),
            values: permute(&dict.values),
            kmeans_objective_trace: vec![],
        };
        let permuted = run(&shuffled);
        assert!(
            base.max_abs_diff(&permuted) < 1e-9,
            "output must be invariant to joint codebook row permutation"
        );
    }

    /// Independent oracle: plain single-layer attention + residual + layer
    /// norm computed with direct loops.
    fn plain_block_oracle(x: &Tensor, params: &IdaLayerParams) -> Tensor {
        let (t, d) = (x.rows(), x.cols());
        let heads = params.heads;
        let dh = d / heads;
        let mm = |a: &Tensor, b: &Tensor| -> Vec<f64> {
            let mut out = vec![0.0; a.rows() * b.cols()];
            for i in 0..a.rows() {
                for j in 0..b.cols() {
                    for k in 0..a.cols() {
                        out[i * b.cols() + j] += a.get2(i, k) * b.get2(k, j);
                    }
                }
            }
            out
        };
        let q = Tensor::new(vec![t, d], mm(x, &params.w_qm)).unwrap();
        let k = Tensor::new(vec![t, d], mm(x, &params.w_km)).unwrap();
        let v = Tensor::new(vec![t, d], mm(x, &params.w_vm)).unwrap();
        let mut attn_out = vec![0.0; t * d];
        for h in 0..heads {
            let scale = 1.0 / (dh as f64).sqrt();
            for i in 0..t {
                let mut scores = vec![0.0; t];
                for j in 0..t {
                    for c in 0..dh {
                        scores[j] += q.get2(i, h * dh + c) * k.get2(j, h * dh + c);
                    }
                    scores[j] *= scale;
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for j in 0..t {
                    let w = (scores[j] - m).exp() / sum;
                    for c in 0..dh {
                        attn_out[i * d + h * dh + c] += w * v.get2(j, h * dh + c);
                    }
                }
            }
        }
        let mut out = vec![0.0; t * d];
        for i in 0..t {
            // residual uses the self path only (fusion selects it exactly)
            let row: Vec<f64> = (0..d).map(|j| attn_out[i * d + j] + x.get2(i, j)).collect();
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + 1e-5).sqrt();
            for j in 0..d {
                out[i * d + j] = params.ln_gain.data()[j] * (row[j] - mu) * istd
                    + params.ln_bias.data()[j];
            }
        }
        Tensor::new(vec![t, d], out).unwrap()
    }

    #[test]
    fn zeroed_codebook_and_self_selecting_fusion_degrade_to_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (d, t) = (8, 4);
        let mut params = IdaLayerParams::init(d, 2, &mut rng);
        // fusion picks the self-attention block out of [cross; self; conf]
        let mut fuse = vec![0.0; 3 * d * d];
        for j in 0..d {
            fuse[(d + j) * d + j] = 1.0;
        }
        params.w_fuse = Tensor::new(vec![3 * d, d], fuse).unwrap();
        params.b_fuse = Tensor::zeros(vec![d]);
        let dict = GlobalDictionary {
            source: DictSource::Regions,
            keys: Tensor::zeros(vec![3, d]),
            values: Tensor::zeros(vec![3, d]),
            kmeans_objective_trace: vec![],
        };
        let input = randn(&mut rng, &[t, d]);

        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let nodes = params.bind(&mut tape);
        let dict_nodes = dict.bind(&mut tape);
        let (out, _) = ida_layer(&mut tape, x, &nodes, dict_nodes).unwrap();

        let oracle = plain_block_oracle(&input, &params);
        assert!(
            tape.value(out).max_abs_diff(&oracle) < 1e-12,
            "restricted layer must equal a plain attention block"
        );
    }

    #[test]
    fn gradients_flow_correctly_through_the_full_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (d, t, k, heads) = (4, 3, 4, 2);
        let layer = IdaLayerParams::init(d, heads, &mut rng);
        let x = randn(&mut rng, &[t, d]);
        let keys = randn(&mut rng, &[k, d]);
        let values = randn(&mut rng, &[k, d]);
        let target = randn(&mut rng, &[t, d]);

        // params: x, every layer tensor, and both codebook tensors
        let mut params: Vec<Tensor> = vec![x];
        params.extend(layer.fields().into_iter().map(|(_, t)| t.clone()));
        params.push(keys);
        params.push(values);

        let heads_copy = heads;
        let target_copy = target.clone();
        let err = finite_diff_check_params(
            move |tape, ids| {
                let x = ids[0];
                let nodes = IdaLayerNodes {
                    w_qm: ids[1],
                    w_km: ids[2],
                    w_vm: ids[3],
                    w_qc: ids[4],
                    w_fuse: ids[5],
                    b_fuse: ids[6],
                    ln_gain: ids[7],
                    ln_bias: ids[8],
                    heads: heads_copy,
                };
                let dict = DictionaryNodes {
                    keys: ids[9],
                    values: ids[10],
                };
                let (out, _) = ida_forward(tape, x, &[nodes], dict)?;
                let t_leaf = tape.leaf(target_copy.clone());
                let diff = tape.sub(out, t_leaf)?;
                let sq = tape.mul(diff, diff)?;
                tape.mean_all(sq)
            },
            &params,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-4, "worst relative gradient error {err:.3e}");
    }
}
