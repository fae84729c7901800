//! Weakly-supervised optimization: pooling phrase-region similarities into
//! sentence-image similarities, in-batch contrastive cross-entropy, the
//! counterfactual KL regularizer, and the training loop with ablation
//! switches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{GroundingCorpus, PairedSample};
use crate::ici::{counterfactual_similarity, effect_decomposition, similarity};
use crate::ida::ida_forward;
use crate::model::{Ablation, BoundModel, Model, ModelConfig, ModelError};
use crate::tensor::{NodeId, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight on the counterfactual KL term.
    pub alpha: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.1,
            learning_rate: 1e-5,
            weight_decay: 1e-4,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            ablation: Ablation::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(TrainError::Config(format!(
                "alpha must be a finite value >= 0, got {}",
                self.alpha
            )));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config(format!(
                "batch_size must be >= 2 (the contrastive loss needs in-batch negatives), got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning_rate must be a finite value > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::Config(format!(
                "weight_decay must be a finite value >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

// ── Loss primitives ──────────────────────────────────────────────────

/// Mean over phrases of the best region score: `(1/n)·Σᵢ maxⱼ A[i][j]`.
pub fn sentence_image_similarity(a: &Tensor) -> std::result::Result<f64, TensorError> {
    if a.numel() == 0 {
        return Err(TensorError::Contract(
            "sentence-image similarity needs a non-empty score matrix".into(),
        ));
    }
    let sum: f64 = (0..a.rows())
        .map(|i| {
            a.row(i)
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    Ok(sum / a.rows() as f64)
}

/// Differentiable counterpart of [`sentence_image_similarity`].
pub fn sentence_image_similarity_node(
    tape: &mut Tape,
    scores: NodeId,
) -> std::result::Result<NodeId, TensorError> {
    let (row_max, _) = tape.reduce_max(scores, 1)?;
    tape.mean_all(row_max)
}

/// Contrastive loss over the sentence-image matrix: mean over rows of
/// `−log softmax(row)[diagonal]`.
pub fn wpg_loss_node(tape: &mut Tape, a_tt: NodeId) -> std::result::Result<NodeId, TensorError> {
    let t = tape.value(a_tt).rows();
    if tape.value(a_tt).cols() != t || t < 2 {
        return Err(TensorError::Contract(format!(
            "contrastive loss needs a square matrix with at least 2 rows, got shape {:?}",
            tape.value(a_tt).shape()
        )));
    }
    tape.cross_entropy_diag(a_tt)
}

/// Non-differentiable convenience evaluation of the contrastive loss.
pub fn wpg_loss(a_tt: &Tensor) -> std::result::Result<f64, TensorError> {
    let mut tape = Tape::new();
    let a = tape.leaf(a_tt.clone());
    let loss = wpg_loss_node(&mut tape, a)?;
    tape.value(loss).scalar_value()
}

/// Mean over phrases of `KL(softmax(factual_row) ‖ softmax(counterfactual_row))`.
pub fn kl_loss(
    factual_rows: &Tensor,
    counterfactual_rows: &Tensor,
) -> std::result::Result<f64, TensorError> {
    let p = detached_row_softmax(factual_rows)?;
    let mut tape = Tape::new();
    let q = tape.leaf(counterfactual_rows.clone());
    let kl = tape.kl_div_rows(&p, q)?;
    tape.value(kl).scalar_value()
}

/// `wpg + alpha·kl`, in exactly that operand order.
pub fn total_loss(wpg: f64, kl: f64, alpha: f64) -> f64 {
    wpg + alpha * kl
}

/// Row softmax computed outside the tape — the reference distribution for
/// the KL term, structurally cut off from the gradient.
pub fn detached_row_softmax(logits: &Tensor) -> std::result::Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let node = tape.leaf(logits.clone());
    let soft = tape.softmax(node, 1)?;
    Ok(tape.value(soft).clone())
}

// ── Forward pipeline ─────────────────────────────────────────────────

/// One pair's scores on the tape.
pub struct PairForward {
    /// Scores the task loss consumes: the indirect effect when the
    /// counterfactual branch is active, raw similarities otherwise.
    pub task_scores: NodeId,
    /// Factual similarities, always present.
    pub factual: NodeId,
    /// Counterfactual KL regularizer for this pair, when active.
    pub kl: Option<NodeId>,
}

fn encode(
    tape: &mut Tape,
    bound: &BoundModel,
    ablation: Ablation,
    phrases: &Tensor,
    regions: &Tensor,
) -> std::result::Result<(NodeId, NodeId), TensorError> {
    let phrase_leaf = tape.leaf(phrases.clone());
    let region_leaf = tape.leaf(regions.clone());
    if ablation.uses_ida() {
        let (p, _) = ida_forward(tape, phrase_leaf, &bound.phrase_layers, bound.phrase_dict)?;
        let (r, _) = ida_forward(tape, region_leaf, &bound.region_layers, bound.region_dict)?;
        Ok((p, r))
    } else {
        Ok((phrase_leaf, region_leaf))
    }
}

/// Run the ablation-gated pipeline on one (sentence, image) pairing.
///
/// With the counterfactual branch active, the task scores use a detached
/// stand-in (so the task loss cannot move `r`), while the KL term sees the
/// live stand-in against detached region representations (so only `r` and
/// the head feel it).
pub fn pair_forward(
    tape: &mut Tape,
    bound: &BoundModel,
    ablation: Ablation,
    phrases: &Tensor,
    regions: &Tensor,
) -> std::result::Result<PairForward, TensorError> {
    let (phrase_reps, region_reps) = encode(tape, bound, ablation, phrases, regions)?;
    let te = similarity(tape, phrase_reps, region_reps, &bound.ici)?;
    if !ablation.uses_ici() {
        return Ok(PairForward {
            task_scores: te,
            factual: te,
            kl: None,
        });
    }
    let n = phrases.rows();
    let r_detached = tape.detach(bound.ici.r);
    let ede_task = counterfactual_similarity(tape, r_detached, region_reps, n, &bound.ici)?;
    let effects = effect_decomposition(tape, te, ede_task)?;

    let region_reps_detached = tape.detach(region_reps);
    let ede_kl = counterfactual_similarity(tape, bound.ici.r, region_reps_detached, n, &bound.ici)?;
    let p = detached_row_softmax(tape.value(te))?;
    let kl = tape.kl_div_rows(&p, ede_kl)?;

    Ok(PairForward {
        task_scores: effects.eie,
        factual: te,
        kl: Some(kl),
    })
}

/// Score one pair with a trained model on a scratch tape; returns the
/// detached task-score matrix `[n × m]`.
pub fn score_pair(
    model: &Model,
    ablation: Ablation,
    sample: &PairedSample,
) -> std::result::Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let forward = pair_forward(
        &mut tape,
        &bound,
        ablation,
        &sample.phrase_matrix(),
        &sample.region_matrix(),
    )?;
    Ok(tape.value(forward.task_scores).clone())
}

/// Losses and bookkeeping for one contrastive batch.
pub struct BatchOutcome {
    /// Total loss node (wpg + α·kl).
    pub loss: NodeId,
    pub wpg: f64,
    pub kl: f64,
    pub total: f64,
    /// Detached sentence-image matrix.
    pub a_tt: Tensor,
    /// Row argmax of `a_tt`; ties resolve to the lowest index.
    pub predicted: Vec<usize>,
}

/// Build the in-batch contrastive objective: every sentence is scored
/// against every image in the batch, and the diagonal is the target.
pub fn batch_loss(
    tape: &mut Tape,
    bound: &BoundModel,
    batch: &[&PairedSample],
    ablation: Ablation,
    alpha: f64,
    symmetric: bool,
) -> std::result::Result<BatchOutcome, TensorError> {
    let t = batch.len();
    if t < 2 {
        return Err(TensorError::Contract(format!(
            "contrastive batch needs at least 2 pairs, got {t}"
        )));
    }

    // Encode each sentence and image once; reuse across all pairings.
    let mut phrase_reps = Vec::with_capacity(t);
    let mut region_reps = Vec::with_capacity(t);
    for sample in batch {
        let (p, r) = encode(
            tape,
            bound,
            ablation,
            &sample.phrase_matrix(),
            &sample.region_matrix(),
        )?;
        phrase_reps.push(p);
        region_reps.push(r);
    }

    let mut sims = Vec::with_capacity(t * t);
    let mut kls = Vec::with_capacity(t);
    for i in 0..t {
        let n = batch[i].sentence.len();
        for j in 0..t {
            let te = similarity(tape, phrase_reps[i], region_reps[j], &bound.ici)?;
            let task_scores = if ablation.uses_ici() {
                let r_detached = tape.detach(bound.ici.r);
                let ede = counterfactual_similarity(tape, r_detached, region_reps[j], n, &bound.ici)?;
                effect_decomposition(tape, te, ede)?.eie
            } else {
                te
            };
            sims.push(sentence_image_similarity_node(tape, task_scores)?);

            if i == j && ablation.uses_ici() {
                let region_detached = tape.detach(region_reps[j]);
                let ede_kl =
                    counterfactual_similarity(tape, bound.ici.r, region_detached, n, &bound.ici)?;
                let p = detached_row_softmax(tape.value(te))?;
                kls.push(tape.kl_div_rows(&p, ede_kl)?);
            }
        }
    }

    let a_tt = tape.stack_scalars(t, t, &sims)?;
    let mut wpg = wpg_loss_node(tape, a_tt)?;
    if symmetric {
        let a_tt_t = tape.transpose(a_tt)?;
        let reverse = wpg_loss_node(tape, a_tt_t)?;
        let sum = tape.add(wpg, reverse)?;
        wpg = tape.scale(sum, 0.5);
    }

    let (loss, kl_value) = if kls.is_empty() {
        (wpg, 0.0)
    } else {
        let stacked = tape.stack_scalars(1, kls.len(), &kls)?;
        let kl_mean = tape.mean_all(stacked)?;
        let weighted = tape.scale(kl_mean, alpha);
        let loss = tape.add(wpg, weighted)?;
        (loss, tape.value(kl_mean).scalar_value()?)
    };

    let a_tt_value = tape.value(a_tt).clone();
    let predicted = (0..t)
        .map(|i| {
            let row = a_tt_value.row(i);
            row.iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (j, &v)| {
                    if v > bv {
                        (j, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect();

    Ok(BatchOutcome {
        loss,
        wpg: tape.value(wpg).scalar_value()?,
        kl: kl_value,
        total: tape.value(loss).scalar_value()?,
        a_tt: a_tt_value,
        predicted,
    })
}

// ── Full-loss gradient verification ──────────────────────────────────

/// Values read by the objective's stop-gradient sites, captured at the
/// current parameters.
struct StopSnapshot {
    r: Tensor,
    region_reps: Vec<Tensor>,
    p: Vec<Tensor>,
}

fn snapshot_stops(
    model: &Model,
    batch: &[&PairedSample],
) -> std::result::Result<StopSnapshot, TensorError> {
    let mut region_reps = Vec::with_capacity(batch.len());
    let mut p = Vec::with_capacity(batch.len());
    for sample in batch {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let (phrase_node, region_node) = encode(
            &mut tape,
            &bound,
            Ablation::Full,
            &sample.phrase_matrix(),
            &sample.region_matrix(),
        )?;
        let te = similarity(&mut tape, phrase_node, region_node, &bound.ici)?;
        region_reps.push(tape.value(region_node).clone());
        p.push(detached_row_softmax(tape.value(te))?);
    }
    Ok(StopSnapshot {
        r: model.ici.r.clone(),
        region_reps,
        p,
    })
}

/// The full objective with every stop-gradient site pinned to snapshot
/// values. At the snapshot point this has the same value and the same
/// analytic gradient as [`batch_loss`], but — unlike the live graph — its
/// finite-difference derivatives also ignore the stopped paths, so it is
/// the correct target for numerical gradient verification.
fn pinned_batch_loss(
    tape: &mut Tape,
    bound: &BoundModel,
    batch: &[&PairedSample],
    alpha: f64,
    snapshot: &StopSnapshot,
) -> std::result::Result<NodeId, TensorError> {
    let t = batch.len();
    let mut phrase_reps = Vec::with_capacity(t);
    let mut region_reps = Vec::with_capacity(t);
    for sample in batch {
        let (p, r) = encode(
            tape,
            bound,
            Ablation::Full,
            &sample.phrase_matrix(),
            &sample.region_matrix(),
        )?;
        phrase_reps.push(p);
        region_reps.push(r);
    }
    let mut sims = Vec::with_capacity(t * t);
    let mut kls = Vec::with_capacity(t);
    for i in 0..t {
        let n = batch[i].sentence.len();
        for j in 0..t {
            let te = similarity(tape, phrase_reps[i], region_reps[j], &bound.ici)?;
            let r_pinned = tape.leaf(snapshot.r.clone());
            let ede = counterfactual_similarity(tape, r_pinned, region_reps[j], n, &bound.ici)?;
            let task_scores = effect_decomposition(tape, te, ede)?.eie;
            sims.push(sentence_image_similarity_node(tape, task_scores)?);
            if i == j {
                let region_pinned = tape.leaf(snapshot.region_reps[i].clone());
                let ede_kl =
                    counterfactual_similarity(tape, bound.ici.r, region_pinned, n, &bound.ici)?;
                kls.push(tape.kl_div_rows(&snapshot.p[i], ede_kl)?);
            }
        }
    }
    let a_tt = tape.stack_scalars(t, t, &sims)?;
    let wpg = wpg_loss_node(tape, a_tt)?;
    let stacked = tape.stack_scalars(1, kls.len(), &kls)?;
    let kl_mean = tape.mean_all(stacked)?;
    let weighted = tape.scale(kl_mean, alpha);
    tape.add(wpg, weighted)
}

/// Verify the analytic gradient of the full objective (contrastive +
/// α·KL, both attention stacks, counterfactual branch) against central
/// finite differences over every model parameter. Returns the worst
/// relative error.
pub fn full_loss_gradient_check(
    model: &Model,
    batch: &[&PairedSample],
    alpha: f64,
    eps: f64,
) -> std::result::Result<f64, TensorError> {
    if batch.len() < 2 {
        return Err(TensorError::Contract(
            "gradient check needs at least 2 pairs for the contrastive loss".into(),
        ));
    }
    let snapshot = snapshot_stops(model, batch)?;
    let tensors: Vec<Tensor> = model
        .named_tensors()
        .iter()
        .map(|(_, t)| (*t).clone())
        .collect();
    crate::tensor::gradcheck::finite_diff_check_params(
        |tape, params| {
            let bound = bind_to_nodes(model, params);
            pinned_batch_loss(tape, &bound, batch, alpha, &snapshot)
        },
        &tensors,
        eps,
    )
}

/// View the given already-registered nodes (in [`Model::named_tensors`]
/// order) as a [`BoundModel`].
fn bind_to_nodes(model: &Model, nodes: &[NodeId]) -> BoundModel {
    use crate::ici::IciNodes;
    use crate::ida::{DictionaryNodes, IdaLayerNodes};
    let mut it = nodes.iter().copied();
    let mut layer = |heads: usize| IdaLayerNodes {
        w_qm: it.next().expect("node list too short"),
        w_km: it.next().expect("node list too short"),
        w_vm: it.next().expect("node list too short"),
        w_qc: it.next().expect("node list too short"),
        w_fuse: it.next().expect("node list too short"),
        b_fuse: it.next().expect("node list too short"),
        ln_gain: it.next().expect("node list too short"),
        ln_bias: it.next().expect("node list too short"),
        heads,
    };
    let phrase_layers: Vec<IdaLayerNodes> =
        model.phrase_ida.iter().map(|l| layer(l.heads)).collect();
    let region_layers: Vec<IdaLayerNodes> =
        model.region_ida.iter().map(|l| layer(l.heads)).collect();
    let phrase_dict = DictionaryNodes {
        keys: it.next().expect("node list too short"),
        values: it.next().expect("node list too short"),
    };
    let region_dict = DictionaryNodes {
        keys: it.next().expect("node list too short"),
        values: it.next().expect("node list too short"),
    };
    let ici = IciNodes {
        r: it.next().expect("node list too short"),
        w_phrase: it.next().expect("node list too short"),
        w_region: it.next().expect("node list too short"),
        scale: model.ici.scale,
    };
    assert!(it.next().is_none(), "node list too long");
    BoundModel {
        phrase_layers,
        region_layers,
        phrase_dict,
        region_dict,
        ici,
    }
}

// ── Optimizer ────────────────────────────────────────────────────────

/// Adaptive-moment optimizer with decoupled weight decay. Parameters that
/// receive no gradient in a step (unused ablation branches) are left
/// untouched, decay included.
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64, param_count: usize) -> Self {
        AdamW {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: vec![Vec::new(); param_count],
            second_moment: vec![Vec::new(); param_count],
        }
    }

    /// Apply one update. `grads[i]` pairs with `params[i]`; `None` skips
    /// the parameter entirely.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], grads: &[Option<Tensor>]) {
        assert_eq!(params.len(), grads.len(), "param/grad length mismatch");
        assert_eq!(
            params.len(),
            self.first_moment.len(),
            "optimizer built for a different parameter count"
        );
        self.step_count += 1;
        let bias1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (i, ((_, param), grad)) in params.iter_mut().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            if m.is_empty() {
                m.resize(param.numel(), 0.0);
                v.resize(param.numel(), 0.0);
            }
            let data = param.data_mut();
            for (k, &g) in grad.data().iter().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / bias1;
                let v_hat = v[k] / bias2;
                data[k] -= self.learning_rate * (m_hat / (v_hat.sqrt() + self.epsilon))
                    + self.learning_rate * self.weight_decay * data[k];
            }
        }
    }
}

// ── Training loop ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub wpg: f64,
    pub kl: f64,
    pub total: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<StepRecord>,
}

/// Train a freshly initialized model on the corpus train split.
pub fn train(
    corpus: &GroundingCorpus,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let model = Model::init(model_config, corpus, config.seed)?;
    train_from(model, corpus, config)
}

/// Train loop over an existing model (used for warm starts and tests).
pub fn train_from(
    mut model: Model,
    corpus: &GroundingCorpus,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = AdamW::new(
        config.learning_rate,
        config.weight_decay,
        model.named_tensors().len(),
    );
    let mut history = Vec::new();
    let mut indices: Vec<usize> = (0..corpus.train.len()).collect();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(config.batch_size) {
            if chunk.len() < 2 {
                // A trailing singleton has no in-batch negatives.
                continue;
            }
            let batch: Vec<&PairedSample> = chunk.iter().map(|&i| &corpus.train[i]).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let outcome = batch_loss(
                &mut tape,
                &bound,
                &batch,
                config.ablation,
                config.alpha,
                model.config.symmetric_contrastive,
            )?;
            if !outcome.total.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            let grads = tape.backward(outcome.loss)?;
            let nodes = bound.param_nodes();
            let grad_list: Vec<Option<Tensor>> =
                nodes.iter().map(|&n| grads.get(n).cloned()).collect();
            let mut params = model.named_tensors_mut();
            optimizer.step(&mut params, &grad_list);

            history.push(StepRecord {
                epoch,
                step,
                wpg: outcome.wpg,
                kl: outcome.kl,
                total: outcome.total,
            });
            step += 1;
        }
    }
    Ok(TrainOutcome { model, history })
}
