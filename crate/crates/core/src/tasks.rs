//! Synthetic associative recall, a small stacked model to train on it,
//! and model-level pruning.
//!
//! A sequence lists `numPairs` (key, value) token pairs, all `2·numPairs`
//! tokens distinct, then alternates probes and answers: a key drawn from
//! the presented ones, then its value as the next input. The last position
//! is always a probe. The model must emit the paired value at every probe
//! position.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{adam_step, backward_from_cache, AdamHyper, AdamState, LossSpec, ParamSet};
use crate::linalg::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::mixers::layer::{forward_cached, LayerCache};
use crate::mixers::{HeadDims, HeadParams, LayerParams, Variant};
use crate::pruning::{
    apply_pca, apply_plan, collect_layer_stats, pca_transform, retained_width, select,
    CalibrationStats, CapturePoint, HeadInputs, HeadPlan, LayerPlan, PcaTransform, PruningPlan,
    SelectionMode, Strategy, DEFAULT_CALIBRATION_SAMPLES,
};
use crate::random::{gaussian_matrix, rng_for};

/// Stream offsets keeping training, evaluation, calibration and
/// fine-tuning sequences disjoint under one seed.
pub const TRAIN_STREAM: u64 = 0;
pub const EVAL_STREAM: u64 = 1 << 40;
pub const CALIBRATION_STREAM: u64 = 2 << 40;
pub const FINETUNE_STREAM: u64 = 3 << 40;

pub const DEFAULT_CALIBRATION_SEQUENCES: usize = 32;
pub const DEFAULT_RFT_STEPS: usize = 500;
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct RecallTaskSpec {
    pub vocab: usize,
    pub num_pairs: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for RecallTaskSpec {
    fn default() -> Self {
        Self {
            vocab: 64,
            num_pairs: 8,
            seq_len: 33,
            seed: 0,
        }
    }
}

impl RecallTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_pairs == 0 {
            return Err(Error::InvalidArgument("numPairs must be positive".into()));
        }
        if self.seq_len < 2 * self.num_pairs + 1 {
            return Err(Error::InvalidArgument(format!(
                "seqLen {} < 2·numPairs + 1 = {}",
                self.seq_len,
                2 * self.num_pairs + 1
            )));
        }
        if self.vocab < 2 * self.num_pairs {
            return Err(Error::InvalidArgument(format!(
                "vocab {} < 2·numPairs = {}",
                self.vocab,
                2 * self.num_pairs
            )));
        }
        Ok(())
    }

    pub fn probes_per_sequence(&self) -> usize {
        (self.seq_len - 2 * self.num_pairs + 1) / 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RecallExample {
    pub tokens: Vec<usize>,
    pub query_positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Sequence number `index` of the task (stream `index` under the task seed).
pub fn gen_example(spec: &RecallTaskSpec, index: u64) -> Result<RecallExample> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, index);
    let p = spec.num_pairs;
    let distinct = sample(&mut rng, spec.vocab, 2 * p).into_vec();
    let (keys, values) = distinct.split_at(p);
    let mut tokens = Vec::with_capacity(spec.seq_len);
    for i in 0..p {
        tokens.push(keys[i]);
        tokens.push(values[i]);
    }
    let mut query_positions = Vec::with_capacity(spec.probes_per_sequence());
    let mut targets = Vec::with_capacity(spec.probes_per_sequence());
    // Answers are placed so that the sequence ends on a probe.
    let mut pos = 2 * p;
    if (spec.seq_len - pos) % 2 == 0 {
        let i = rng.random_range(0..p);
        tokens.push(values[i]);
        pos += 1;
    }
    while pos < spec.seq_len {
        let i = rng.random_range(0..p);
        tokens.push(keys[i]);
        query_positions.push(pos);
        targets.push(values[i]);
        pos += 1;
        if pos < spec.seq_len {
            tokens.push(values[i]);
            pos += 1;
        }
    }
    Ok(RecallExample {
        tokens,
        query_positions,
        targets,
    })
}

/// `count` consecutive sequences starting at stream `first`.
pub fn gen_recall(spec: &RecallTaskSpec, first: u64, count: usize) -> Result<Vec<RecallExample>> {
    (0..count as u64)
        .map(|i| gen_example(spec, first + i))
        .collect()
}

/// One JSON object per line.
pub fn to_jsonl(examples: &[RecallExample]) -> String {
    let mut out = String::new();
    for e in examples {
        out.push_str(&serde_json::to_string(e).expect("plain data"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct ToyConfig {
    pub vocab: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub conv_len: usize,
    pub variant: Variant,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            model_dim: 32,
            num_layers: 2,
            num_heads: 2,
            key_dim: 16,
            value_dim: 16,
            conv_len: 4,
            variant: Variant::Gated,
        }
    }
}

impl ToyConfig {
    pub fn head_dims(&self) -> HeadDims {
        HeadDims {
            model_dim: self.model_dim,
            key_dim: self.key_dim,
            value_dim: self.value_dim,
            num_heads: self.num_heads,
            conv_len: self.conv_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.num_layers == 0 {
            return Err(Error::InvalidArgument(
                "vocab and numLayers must be positive".into(),
            ));
        }
        self.head_dims().validate()
    }
}

/// Embedding, residual mixer layers `h ← h + layer(h)`, output head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ToyModel {
    /// `vocab × h`.
    pub embedding: Matrix,
    pub layers: Vec<LayerParams>,
    /// `h × vocab`.
    pub lm_head: Matrix,
    pub variant: Variant,
}

impl ToyModel {
    pub fn init(config: &ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, 0);
        let embedding = gaussian_matrix(&mut rng, config.vocab, config.model_dim);
        let layers = (0..config.num_layers)
            .map(|_| LayerParams::init(&mut rng, &config.head_dims()))
            .collect::<Result<Vec<_>>>()?;
        let lm_head = gaussian_matrix(&mut rng, config.model_dim, config.vocab)
            .scale(1.0 / (config.model_dim as f64).sqrt());
        Ok(Self {
            embedding,
            layers,
            lm_head,
            variant: config.variant,
        })
    }

    pub fn vocab(&self) -> usize {
        self.embedding.rows()
    }

    pub fn model_dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.model_dim();
        if self.lm_head.shape() != (h, self.vocab()) {
            return Err(Error::DimensionMismatch {
                op: "lm_head",
                left: self.lm_head.shape(),
                right: (h, self.vocab()),
            });
        }
        for l in &self.layers {
            l.validate()?;
            if l.model_dim() != h {
                return Err(Error::DimensionMismatch {
                    op: "layer width",
                    left: l.w_o.shape(),
                    right: (l.w_o.rows(), h),
                });
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            embedding: Matrix::zeros(self.embedding.rows(), self.embedding.cols()),
            layers: self.layers.iter().map(LayerParams::zeros_like).collect(),
            lm_head: Matrix::zeros(self.lm_head.rows(), self.lm_head.cols()),
            variant: self.variant,
        }
    }

    fn embed(&self, tokens: &[usize]) -> Result<Matrix> {
        let v = self.vocab();
        if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
            return Err(Error::InvalidArgument(format!(
                "token {bad} outside vocabulary of {v}"
            )));
        }
        Ok(self.embedding.select_rows(tokens))
    }

    /// Inputs of every layer followed by the final hidden state.
    pub fn hidden_states(&self, tokens: &[usize]) -> Result<Vec<Matrix>> {
        let mut h = self.embed(tokens)?;
        let mut out = Vec::with_capacity(self.layers.len() + 1);
        for l in &self.layers {
            let y = forward_cached(l, &h, self.variant, false)?.y;
            out.push(h.clone());
            h.add_scaled(1.0, &y);
        }
        out.push(h);
        Ok(out)
    }

    /// `T × vocab` logits.
    pub fn logits(&self, tokens: &[usize]) -> Result<Matrix> {
        let hs = self.hidden_states(tokens)?;
        matmul(hs.last().expect("final state"), &self.lm_head)
    }
}

impl ParamSet for ToyModel {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.embedding];
        for l in &self.layers {
            v.extend(l.tensors());
        }
        v.push(&self.lm_head);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.embedding];
        for l in &mut self.layers {
            v.extend(l.tensors_mut());
        }
        v.push(&mut self.lm_head);
        v
    }
}

fn probe_targets(example: &RecallExample, vocab: usize) -> Matrix {
    let mut t = Matrix::zeros(example.tokens.len(), vocab);
    for (&pos, &tok) in example.query_positions.iter().zip(&example.targets) {
        t[(pos, tok)] = 1.0;
    }
    t
}

/// Cross-entropy at the probe positions of one example; gradients are
/// accumulated into `grads`.
pub fn model_backward(
    model: &ToyModel,
    example: &RecallExample,
    grads: &mut ToyModel,
) -> Result<f64> {
    let x0 = model.embed(&example.tokens)?;
    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut caches: Vec<LayerCache> = Vec::with_capacity(model.layers.len());
    let mut h = x0;
    for l in &model.layers {
        let cache = forward_cached(l, &h, model.variant, true)?;
        let next = h.add(&cache.y)?;
        inputs.push(h);
        caches.push(cache);
        h = next;
    }
    let logits = matmul(&h, &model.lm_head)?;
    let loss = LossSpec::cross_entropy(probe_targets(example, model.vocab()));
    let (value, dlogits) = loss.evaluate(&logits)?;
    grads.lm_head.add_scaled(1.0, &matmul_tn(&h, &dlogits)?);
    let mut dh = matmul_nt(&dlogits, &model.lm_head)?;
    for li in (0..model.layers.len()).rev() {
        let dx = backward_from_cache(
            &model.layers[li],
            &inputs[li],
            model.variant,
            &caches[li],
            &dh,
            &mut grads.layers[li],
        )?;
        dh.add_scaled(1.0, &dx);
    }
    for (t, &tok) in example.tokens.iter().enumerate() {
        for (g, d) in grads.embedding.row_mut(tok).iter_mut().zip(dh.row(t)) {
            *g += d;
        }
    }
    Ok(value)
}

/// Mean loss and mean gradient over a batch.
pub fn batch_gradient(model: &ToyModel, batch: &[RecallExample]) -> Result<(f64, ToyModel)> {
    let mut grads = model.zeros_like();
    let mut total = 0.0;
    for e in batch {
        total += model_backward(model, e, &mut grads)?;
    }
    let scale = 1.0 / batch.len() as f64;
    for g in grads.tensors_mut() {
        *g = g.scale(scale);
    }
    Ok((total * scale, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct TrainHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Cosine decay from `lr` to `lr · finalLrFraction` over the run;
    /// 1 keeps the rate constant.
    pub final_lr_fraction: f64,
    /// Global gradient-norm clip.
    pub clip: Option<f64>,
    /// Training sequence `s·batch + b` is drawn from stream `stream + s·batch + b`.
    pub stream: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            steps: 8000,
            batch_size: 16,
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            final_lr_fraction: 0.05,
            clip: Some(1.0),
            stream: TRAIN_STREAM,
        }
    }
}

impl TrainHyper {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps <= 1 || self.final_lr_fraction == 1.0 {
            return self.lr;
        }
        let progress = step as f64 / (self.steps - 1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cos)
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrainReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean of the `window` losses ending at step `end` (exclusive).
    pub fn trailing_mean(&self, end: usize, window: usize) -> f64 {
        let end = end.min(self.losses.len());
        let start = end.saturating_sub(window);
        let s = &self.losses[start..end];
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }
}

/// Adam on probe cross-entropy with fresh batches every step.
pub fn train_toy(
    model: &mut ToyModel,
    spec: &RecallTaskSpec,
    hyper: &TrainHyper,
) -> Result<TrainReport> {
    spec.validate()?;
    model.validate()?;
    if hyper.batch_size == 0 {
        return Err(Error::InvalidArgument("batchSize must be positive".into()));
    }
    if !(hyper.lr >= 0.0 && hyper.lr.is_finite()) || !(0.0..=1.0).contains(&hyper.final_lr_fraction)
    {
        return Err(Error::InvalidArgument(
            "lr must be finite and non-negative, finalLrFraction in [0, 1]".into(),
        ));
    }
    if spec.vocab != model.vocab() {
        return Err(Error::InvalidArgument(format!(
            "task vocab {} differs from model vocab {}",
            spec.vocab,
            model.vocab()
        )));
    }
    let mut state = AdamState::new(model, hyper.adam());
    let mut losses = Vec::with_capacity(hyper.steps);
    for step in 0..hyper.steps {
        let first = hyper.stream + (step * hyper.batch_size) as u64;
        let batch = gen_recall(spec, first, hyper.batch_size)?;
        let (loss, mut grads) = match batch_gradient(model, &batch) {
            Ok(r) => r,
            Err(Error::NonFiniteLoss) => {
                return Err(Error::Divergence {
                    step,
                    loss: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Divergence { step, loss });
        }
        if let Some(c) = hyper.clip {
            let norm = grads.grad_norm();
            if norm > c {
                for g in grads.tensors_mut() {
                    *g = g.scale(c / norm);
                }
            }
        }
        state.hyper.lr = hyper.lr_at(step);
        adam_step(model, &grads, &mut state);
        losses.push(loss);
    }
    Ok(TrainReport { losses })
}

/// Argmax accuracy at the probe positions (ties to the lowest token id).
pub fn eval_recall(model: &ToyModel, examples: &[RecallExample]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for e in examples {
        let logits = model.logits(&e.tokens)?;
        for (&pos, &target) in e.query_positions.iter().zip(&e.targets) {
            let row = logits.row(pos);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            hits += usize::from(best == target);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument("no probes to evaluate".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Held-out evaluation set of the task.
pub fn eval_set(spec: &RecallTaskSpec, count: usize) -> Result<Vec<RecallExample>> {
    gen_recall(spec, EVAL_STREAM, count)
}

/// Short fine-tune of an already pruned model on fresh sequences.
pub fn recovery_finetune(
    model: &mut ToyModel,
    spec: &RecallTaskSpec,
    hyper: &TrainHyper,
) -> Result<TrainReport> {
    let h = TrainHyper {
        stream: FINETUNE_STREAM,
        ..*hyper
    };
    train_toy(model, spec, &h)
}

pub fn default_rft_hyper() -> TrainHyper {
    TrainHyper {
        steps: DEFAULT_RFT_STEPS,
        lr: 2e-3,
        ..TrainHyper::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct PruneSettings {
    pub strategy: Strategy,
    pub mode: SelectionMode,
    pub ratio: f64,
    pub f: f64,
    pub seed: u64,
    pub calibration_sequences: usize,
    pub max_samples: usize,
    pub capture: CapturePoint,
}

impl Default for PruneSettings {
    fn default() -> Self {
        Self {
            strategy: Strategy::Drrqr,
            mode: SelectionMode::Joint,
            ratio: 0.5,
            f: crate::linalg::DEFAULT_F,
            seed: 0,
            calibration_sequences: DEFAULT_CALIBRATION_SEQUENCES,
            max_samples: DEFAULT_CALIBRATION_SAMPLES,
            capture: CapturePoint::PreNorm,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub model: ToyModel,
    pub plan: PruningPlan,
    /// Per layer, per head; present for the PCA strategies.
    pub transforms: Option<Vec<Vec<PcaTransform>>>,
    /// Per layer, empty when the strategy needs no activations.
    pub stats: Vec<CalibrationStats>,
}

/// Calibration sequences: drawn under `seed` from their own stream range.
pub fn calibration_set(
    spec: &RecallTaskSpec,
    seed: u64,
    count: usize,
) -> Result<Vec<RecallExample>> {
    let s = RecallTaskSpec { seed, ..*spec };
    gen_recall(&s, CALIBRATION_STREAM, count)
}

fn needs_stats(s: Strategy) -> bool {
    matches!(
        s,
        Strategy::Swanda | Strategy::Drrqr | Strategy::Pca | Strategy::PcaAdversarial
    )
}

/// Prunes every head of every layer to the retained width for
/// `settings.ratio`. Statistics come from the unpruned model.
pub fn prune_model(
    model: &ToyModel,
    calibration: &[RecallExample],
    settings: &PruneSettings,
) -> Result<PruneOutcome> {
    model.validate()?;
    let mut stats = Vec::new();
    if needs_stats(settings.strategy) {
        let mut per_layer: Vec<Vec<Matrix>> = vec![Vec::new(); model.layers.len()];
        for e in calibration {
            let hs = model.hidden_states(&e.tokens)?;
            for (li, h) in hs.into_iter().take(model.layers.len()).enumerate() {
                per_layer[li].push(h);
            }
        }
        for (li, inputs) in per_layer.iter().enumerate() {
            stats.push(collect_layer_stats(
                &model.layers[li],
                inputs,
                model.variant,
                settings.max_samples,
                settings.capture,
                settings.seed.wrapping_add(li as u64),
            )?);
        }
    }
    let grads = if settings.strategy == Strategy::Grad {
        Some(batch_gradient(model, calibration)?.1)
    } else {
        None
    };
    let mut out = model.clone();
    let mut plan = PruningPlan { layers: Vec::new() };
    let pca = matches!(settings.strategy, Strategy::Pca | Strategy::PcaAdversarial);
    let mut transforms = Vec::new();
    for (li, layer) in model.layers.iter().enumerate() {
        let mut heads = Vec::with_capacity(layer.heads.len());
        let mut layer_tr = Vec::new();
        for (hi, hp) in layer.heads.iter().enumerate() {
            let d_k = hp.key_dim();
            let k = retained_width(d_k, settings.ratio)?;
            if pca {
                if k < d_k {
                    layer_tr.push(pca_transform(
                        &stats[li].heads[hi],
                        k,
                        settings.strategy == Strategy::PcaAdversarial,
                        settings.mode,
                    )?);
                }
                heads.push(HeadPlan {
                    retained: (0..k).collect(),
                    strategy: settings.strategy,
                    mode: settings.mode,
                });
                continue;
            }
            let inputs = HeadInputs {
                params: hp,
                stats: stats.get(li).map(|s| &s.heads[hi]),
                grads: grads.as_ref().map(|g| &g.layers[li].heads[hi]),
                seed: settings.seed,
                stream: (li * layer.heads.len() + hi) as u64,
                f: settings.f,
            };
            heads.push(select(settings.strategy, settings.mode, k, &inputs)?);
        }
        let lp = LayerPlan { heads };
        if pca {
            if !layer_tr.is_empty() {
                out.layers[li] = apply_pca(layer, &layer_tr)?;
            }
            transforms.push(layer_tr);
        } else {
            out.layers[li] = apply_plan(layer, &lp)?;
        }
        plan.layers.push(lp);
    }
    Ok(PruneOutcome {
        model: out,
        plan,
        transforms: pca.then_some(transforms),
        stats,
    })
}

/// Exact key/value lookup built by hand: one-hot embeddings, a single
/// delta-rule head with `β = 1` whose key is the previous token. Recalls
/// perfectly when each sequence has one probe.
pub fn lookup_table_model(vocab: usize) -> Result<ToyModel> {
    let v = vocab;
    let big = 40.0;
    let mut conv_shift = Matrix::zeros(v, 2);
    let mut conv_id = Matrix::zeros(v, 2);
    for i in 0..v {
        conv_shift[(i, 1)] = 1.0;
        conv_id[(i, 0)] = 1.0;
    }
    let head = HeadParams {
        w_q: Matrix::identity(v).scale(big),
        w_k: Matrix::identity(v).scale(big),
        w_v: Matrix::identity(v).scale(big),
        w_beta: Matrix::new(v, 1, vec![big; v])?,
        w_alpha: Matrix::zeros(v, 1),
        conv_q: conv_id.clone(),
        conv_k: conv_shift,
        conv_v: conv_id,
    };
    let layer = LayerParams {
        heads: vec![head],
        w_o: Matrix::identity(v).scale(10.0),
        rms_eps: crate::mixers::layer::DEFAULT_RMS_EPS,
    };
    Ok(ToyModel {
        embedding: Matrix::identity(v),
        layers: vec![layer],
        lm_head: Matrix::identity(v),
        variant: Variant::Delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ToyConfig {
        ToyConfig {
            vocab: 12,
            model_dim: 6,
            num_layers: 2,
            num_heads: 2,
            key_dim: 3,
            value_dim: 2,
            conv_len: 2,
            variant: Variant::Gated,
        }
    }

    #[test]
    fn single_pair_sequence() {
        let spec = RecallTaskSpec {
            vocab: 10,
            num_pairs: 1,
            seq_len: 3,
            seed: 4,
        };
        let e = gen_example(&spec, 0).unwrap();
        assert_eq!(e.tokens[0], e.tokens[2]);
        assert_ne!(e.tokens[0], e.tokens[1]);
        assert_eq!(e.query_positions, vec![2]);
        assert_eq!(e.targets, vec![e.tokens[1]]);
    }

    #[test]
    fn generation_is_reproducible_and_consistent() {
        let spec = RecallTaskSpec::default();
        let a = gen_recall(&spec, 0, 20).unwrap();
        let b = gen_recall(&spec, 0, 20).unwrap();
        assert_eq!(to_jsonl(&a), to_jsonl(&b));
        for e in &a {
            assert_eq!(e.tokens.len(), 33);
            let p = spec.num_pairs;
            let mut seen = e.tokens[..2 * p].to_vec();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), 2 * p);
            for (&pos, &t) in e.query_positions.iter().zip(&e.targets) {
                let i = (0..p)
                    .find(|&i| e.tokens[2 * i] == e.tokens[pos])
                    .expect("presented key");
                assert_eq!(e.tokens[2 * i + 1], t);
            }
        }
    }

    #[test]
    fn spec_violations() {
        let bad = [
            RecallTaskSpec {
                vocab: 10,
                num_pairs: 3,
                seq_len: 6,
                seed: 0,
            },
            RecallTaskSpec {
                vocab: 5,
                num_pairs: 3,
                seq_len: 9,
                seed: 0,
            },
            RecallTaskSpec {
                vocab: 5,
                num_pairs: 0,
                seq_len: 9,
                seed: 0,
            },
        ];
        for s in bad {
            assert!(gen_example(&s, 0).is_err());
        }
    }

    #[test]
    fn model_gradient_matches_finite_differences() {
        let cfg = tiny_config();
        let model = ToyModel::init(&cfg, 3).unwrap();
        let spec = RecallTaskSpec {
            vocab: 12,
            num_pairs: 2,
            seq_len: 7,
            seed: 1,
        };
        let batch = gen_recall(&spec, 0, 2).unwrap();
        let (_, grads) = batch_gradient(&model, &batch).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let n_tensors = model.tensors().len();
        for ti in 0..n_tensors {
            let len = model.tensors()[ti].data().len();
            for e in (0..len).step_by(3) {
                let mut p = model.clone();
                p.tensors_mut()[ti].data_mut()[e] += h;
                let lp = batch_gradient(&p, &batch).unwrap().0;
                let mut m = model.clone();
                m.tensors_mut()[ti].data_mut()[e] -= h;
                let lm = batch_gradient(&m, &batch).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                let g = grads.tensors()[ti].data()[e];
                worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-6));
            }
        }
        assert!(worst <= 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = tiny_config();
        let mut model = ToyModel::init(&cfg, 0).unwrap();
        let before = model.clone();
        let spec = RecallTaskSpec {
            vocab: 12,
            num_pairs: 2,
            seq_len: 7,
            seed: 0,
        };
        let hyper = TrainHyper {
            steps: 3,
            batch_size: 2,
            lr: 0.0,
            ..TrainHyper::default()
        };
        train_toy(&mut model, &spec, &hyper).unwrap();
        assert_eq!(model, before);
        let r = recovery_finetune(&mut model, &spec, &TrainHyper { steps: 0, ..hyper }).unwrap();
        assert!(r.losses.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = tiny_config();
        let mut model = ToyModel::init(&cfg, 0).unwrap();
        model.lm_head = model.lm_head.scale(1e9);
        let spec = RecallTaskSpec {
            vocab: 12,
            num_pairs: 2,
            seq_len: 7,
            seed: 0,
        };
        let hyper = TrainHyper {
            steps: 2,
            batch_size: 2,
            ..TrainHyper::default()
        };
        assert!(matches!(
            train_toy(&mut model, &spec, &hyper),
            Err(Error::Divergence { step: 0, .. })
        ));
    }

    #[test]
    fn lookup_table_recalls_perfectly() {
        let spec = RecallTaskSpec {
            vocab: 10,
            num_pairs: 4,
            seq_len: 9,
            seed: 2,
        };
        let model = lookup_table_model(10).unwrap();
        let acc = eval_recall(&model, &gen_recall(&spec, 0, 50).unwrap()).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let cfg = ToyConfig::default();
        let model = ToyModel::init(&cfg, 1).unwrap();
        let spec = RecallTaskSpec::default();
        let examples = eval_set(&spec, 40).unwrap();
        let acc = eval_recall(&model, &examples).unwrap();
        let n = (40 * spec.probes_per_sequence()) as f64;
        let p = 1.0 / spec.vocab as f64;
        // Chance over the vocabulary; probes are not independent, so allow
        // a wider band than the nominal binomial spread.
        let sigma = (p * (1.0 - p) / n).sqrt();
        assert!(
            (acc - p).abs() <= 3.0 * sigma + 2.0 / spec.num_pairs as f64 * p * 4.0,
            "acc {acc}"
        );
    }

    #[test]
    fn identity_pruning_keeps_model() {
        let cfg = tiny_config();
        let model = ToyModel::init(&cfg, 5).unwrap();
        let spec = RecallTaskSpec {
            vocab: 12,
            num_pairs: 2,
            seq_len: 7,
            seed: 0,
        };
        let calib = calibration_set(&spec, 9, 4).unwrap();
        for strategy in Strategy::ALL {
            let settings = PruneSettings {
                strategy,
                ratio: 0.0,
                ..PruneSettings::default()
            };
            let out = prune_model(&model, &calib, &settings).unwrap();
            assert_eq!(out.model, model, "{strategy}");
        }
    }

    #[test]
    fn half_ratio_halves_every_head() {
        let cfg = ToyConfig {
            key_dim: 4,
            ..tiny_config()
        };
        let model = ToyModel::init(&cfg, 5).unwrap();
        let spec = RecallTaskSpec {
            vocab: 12,
            num_pairs: 2,
            seq_len: 7,
            seed: 0,
        };
        let calib = calibration_set(&spec, 9, 4).unwrap();
        let examples = gen_recall(&spec, 0, 3).unwrap();
        for strategy in Strategy::ALL {
            let settings = PruneSettings {
                strategy,
                ..PruneSettings::default()
            };
            let out = prune_model(&model, &calib, &settings).unwrap();
            for (l, lp) in out.model.layers.iter().zip(&out.plan.layers) {
                for (hp, plan) in l.heads.iter().zip(&lp.heads) {
                    assert_eq!(hp.key_dim(), 2);
                    assert_eq!(plan.retained.len(), 2);
                }
            }
            eval_recall(&out.model, &examples).unwrap();
        }
    }
}
