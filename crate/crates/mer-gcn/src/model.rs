//! The full classifier: backbone features, GCN-embedded AU nodes,
//! dot-product fusion, and the fully-connected head, plus checkpointing.
//!
//! The GCN branch sees only the co-occurrence graph, so its embeddings are
//! input-independent; fusion scores every embedded AU against the sequence
//! feature and the head maps those AU scores to class logits. A CNN-only
//! variant drops the graph branch and classifies the backbone feature
//! directly, serving as the comparison baseline.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{build_backbone, BackboneConfig, BackboneError, BackboneModel};
use crate::graph::{AdjacencyMatrix, AuVocabulary, GcnStack, GraphError, DEFAULT_GCN_SLOPE};
use crate::io::{read_container, write_container, ContainerError};
use crate::linalg::matmul;
use crate::optim::{DiffTarget, Parameter, TapeBinding};
use crate::tape::{AutodiffError, Tape, TensorId};
use crate::tensor::{fmt_shape, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("GCN output dim {gcn} must equal the backbone feature dim {backbone}")]
    FusionDimMismatch { gcn: usize, backbone: usize },
    #[error("fuse: h_last {h_last} and feature {feature} have incompatible shapes")]
    FuseShapeMismatch { h_last: String, feature: String },
    #[error("checkpoint is missing entry `{name}`")]
    MissingEntry { name: String },
    #[error("checkpoint entry `{name}` has shape {got}, expected {expected}")]
    EntryShape {
        name: String,
        expected: String,
        got: String,
    },
    #[error("cannot read checkpoint sidecar {path}: {source}")]
    Sidecar {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelVariant {
    #[serde(rename = "mer-gcn")]
    MerGcn,
    #[serde(rename = "cnn-only")]
    CnnOnly,
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelVariant::MerGcn => write!(f, "mer-gcn"),
            ModelVariant::CnnOnly => write!(f, "cnn-only"),
        }
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mer-gcn" | "mer_gcn" | "mergcn" => Ok(ModelVariant::MerGcn),
            "cnn-only" | "cnn_only" | "cnn" => Ok(ModelVariant::CnnOnly),
            other => Err(format!("unknown model variant `{other}`")),
        }
    }
}

/// Classifier output for one sequence.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Vec<f64>,
    /// Softmax of the logits; sums to 1.
    pub probabilities: Vec<f64>,
    /// Smallest index attaining the maximum logit.
    pub class_id: usize,
    /// Dot-product fusion output, one score per AU node (empty for the
    /// CNN-only variant, which has no fusion stage).
    pub au_scores: Vec<f64>,
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

/// Smallest index of the maximal value.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Dot-product fusion: `au_scores[i] = <h_last row i, feature>`.
pub fn fuse(h_last: &Tensor, feature: &Tensor) -> Result<Tensor, ModelError> {
    let hs = h_last.shape();
    let fs = feature.shape();
    if hs.len() != 2 || fs.len() != 1 || hs[1] != fs[0] {
        return Err(ModelError::FuseShapeMismatch {
            h_last: fmt_shape(hs),
            feature: fmt_shape(fs),
        });
    }
    let data = matmul(h_last.data(), feature.data(), hs[0], hs[1], 1);
    Ok(Tensor::new(vec![hs[0]], data).expect("finite inputs give finite scores"))
}

/// Differentiable fusion on the tape: reshape the feature to a column,
/// multiply, and flatten back to a vector of per-AU scores.
fn fuse_on_tape(
    tape: &mut Tape,
    h_last: TensorId,
    feature: TensorId,
) -> Result<TensorId, AutodiffError> {
    let f_len = tape.value(feature).numel();
    let n = tape.value(h_last).shape()[0];
    let column = tape.reshape(feature, vec![f_len, 1])?;
    let scores = tape.matmul(h_last, column)?;
    tape.reshape(scores, vec![n])
}

/// Zero-initialized classification head; training starts from uniform
/// class probabilities, so the first-epoch loss is exactly ln(n_classes).
fn zero_head(n_classes: usize, input_dim: usize) -> (Parameter, Parameter) {
    (
        Parameter::new("head.weight", Tensor::zeros(vec![n_classes, input_dim])),
        Parameter::new("head.bias", Tensor::zeros(vec![n_classes])),
    )
}

// ── MER-GCN ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MerGcnModel {
    pub backbone: BackboneModel,
    pub gcn: GcnStack,
    pub adjacency: AdjacencyMatrix,
    pub vocab: AuVocabulary,
    head_weight: Parameter,
    head_bias: Parameter,
    pub n_classes: usize,
}

impl MerGcnModel {
    /// Assembles the full model. GCN dims default to `[1024*s, 512*s]`; the
    /// final dim must equal the backbone feature dim.
    pub fn new(
        backbone_config: BackboneConfig,
        gcn_dims: Option<&[usize]>,
        gcn_slope: f64,
        vocab: AuVocabulary,
        adjacency: AdjacencyMatrix,
        n_classes: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let backbone = build_backbone(backbone_config, crate::optim::mix_seed(seed, 1))?;
        let default_dims = GcnStack::default_dims(backbone_config.width_scale);
        let dims = gcn_dims.map(|d| d.to_vec()).unwrap_or(default_dims);
        let mut rng = ChaCha8Rng::seed_from_u64(crate::optim::mix_seed(seed, 2));
        let gcn = GcnStack::new(vocab.n(), &dims, gcn_slope, &mut rng);
        if gcn.output_dim() != backbone.feature_dim() {
            return Err(ModelError::FusionDimMismatch {
                gcn: gcn.output_dim(),
                backbone: backbone.feature_dim(),
            });
        }
        let (head_weight, head_bias) = zero_head(n_classes, vocab.n());
        Ok(MerGcnModel {
            backbone,
            gcn,
            adjacency,
            vocab,
            head_weight,
            head_bias,
            n_classes,
        })
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = self.backbone.parameters();
        out.extend(self.gcn.parameters());
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.backbone.parameters_mut();
        out.extend(self.gcn.parameters_mut());
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn head_weight_mut(&mut self) -> &mut Parameter {
        &mut self.head_weight
    }

    pub fn head_bias_mut(&mut self) -> &mut Parameter {
        &mut self.head_bias
    }

    /// Builds logits for a bound parameter list; also returns the fusion
    /// scores node.
    fn forward_ids(
        &self,
        tape: &mut Tape,
        param_ids: &[TensorId],
        input: TensorId,
    ) -> Result<(TensorId, TensorId), ModelError> {
        let nb = self.backbone.param_count();
        let ng = self.gcn.layer_count();
        let (feature, _) = self
            .backbone
            .forward_on_tape(tape, &param_ids[..nb], input)?;
        let h_last = self
            .gcn
            .forward_on_tape(tape, &self.adjacency, &param_ids[nb..nb + ng])?;
        let au_scores = fuse_on_tape(tape, h_last, feature)?;
        let logits = tape.linear(au_scores, param_ids[nb + ng], param_ids[nb + ng + 1])?;
        Ok((logits, au_scores))
    }
}

// ── CNN-only baseline ───────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct CnnOnlyModel {
    pub backbone: BackboneModel,
    head_weight: Parameter,
    head_bias: Parameter,
    pub n_classes: usize,
}

impl CnnOnlyModel {
    pub fn new(
        backbone_config: BackboneConfig,
        n_classes: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let backbone = build_backbone(backbone_config, crate::optim::mix_seed(seed, 1))?;
        let (head_weight, head_bias) = zero_head(n_classes, backbone.feature_dim());
        Ok(CnnOnlyModel {
            backbone,
            head_weight,
            head_bias,
            n_classes,
        })
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = self.backbone.parameters();
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.backbone.parameters_mut();
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    fn forward_ids(
        &self,
        tape: &mut Tape,
        param_ids: &[TensorId],
        input: TensorId,
    ) -> Result<TensorId, ModelError> {
        let nb = self.backbone.param_count();
        let (feature, _) = self
            .backbone
            .forward_on_tape(tape, &param_ids[..nb], input)?;
        Ok(tape.linear(feature, param_ids[nb], param_ids[nb + 1])?)
    }
}

// ── Unified classifier ──────────────────────────────────────────────────

/// Either model variant behind one training/evaluation surface.
#[derive(Debug, Clone)]
pub enum Classifier {
    MerGcn(MerGcnModel),
    CnnOnly(CnnOnlyModel),
}

impl Classifier {
    pub fn variant(&self) -> ModelVariant {
        match self {
            Classifier::MerGcn(_) => ModelVariant::MerGcn,
            Classifier::CnnOnly(_) => ModelVariant::CnnOnly,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Classifier::MerGcn(m) => m.n_classes,
            Classifier::CnnOnly(m) => m.n_classes,
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        match self {
            Classifier::MerGcn(m) => m.backbone.config,
            Classifier::CnnOnly(m) => m.backbone.config,
        }
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        match self {
            Classifier::MerGcn(m) => m.parameters(),
            Classifier::CnnOnly(m) => m.parameters(),
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Classifier::MerGcn(m) => m.parameters_mut(),
            Classifier::CnnOnly(m) => m.parameters_mut(),
        }
    }

    fn forward_ids(
        &self,
        tape: &mut Tape,
        param_ids: &[TensorId],
        input: TensorId,
    ) -> Result<(TensorId, Option<TensorId>), ModelError> {
        match self {
            Classifier::MerGcn(m) => {
                let (logits, au) = m.forward_ids(tape, param_ids, input)?;
                Ok((logits, Some(au)))
            }
            Classifier::CnnOnly(m) => Ok((m.forward_ids(tape, param_ids, input)?, None)),
        }
    }

    /// Full prediction for one sequence (no gradients).
    pub fn forward(&self, seq: &Tensor) -> Result<Prediction, ModelError> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = self
            .parameters()
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect();
        let input = tape.constant(seq.clone());
        let (logits_id, au_id) = self.forward_ids(&mut tape, &ids, input)?;
        let logits = tape.value(logits_id).data().to_vec();
        let probabilities = softmax(&logits);
        let class_id = argmax_first(&logits);
        let au_scores = au_id
            .map(|id| tape.value(id).data().to_vec())
            .unwrap_or_default();
        Ok(Prediction {
            logits,
            probabilities,
            class_id,
            au_scores,
        })
    }

    /// Class decision: smallest index of the maximal logit.
    pub fn predict(&self, seq: &Tensor) -> Result<usize, ModelError> {
        Ok(self.forward(seq)?.class_id)
    }

    fn loss_tape(
        &self,
        seq: &Tensor,
        label: usize,
        corrupt_backward: bool,
    ) -> Result<(Tape, TapeBinding, TensorId), ModelError> {
        let mut tape = Tape::new();
        if corrupt_backward {
            tape.corrupt_leaky_backward();
        }
        let params = self.parameters();
        let binding = TapeBinding::bind(&mut tape, &params);
        let input = tape.constant(seq.clone());
        let (logits, _) = self.forward_ids(&mut tape, binding.ids(), input)?;
        let loss = tape.softmax_cross_entropy(logits, label)?;
        Ok((tape, binding, loss))
    }

    /// Cross-entropy loss of one sequence, no gradients.
    pub fn loss_value(&self, seq: &Tensor, label: usize) -> Result<f64, ModelError> {
        let (tape, _, loss) = self.loss_tape(seq, label, false)?;
        Ok(tape.value(loss).item())
    }

    /// Cross-entropy loss with gradients written into the parameters.
    pub fn loss_with_grads(&mut self, seq: &Tensor, label: usize) -> Result<f64, ModelError> {
        let (mut tape, binding, loss) = self.loss_tape(seq, label, false)?;
        let value = tape.value(loss).item();
        tape.backward(loss)?;
        let mut params = self.parameters_mut();
        binding.harvest(&tape, &mut params);
        Ok(value)
    }
}

// ── Gradient-check target ───────────────────────────────────────────────

/// Fixes one (sequence, label) pair and exposes the model loss as a
/// differentiable target for the finite-difference checker.
pub struct ModelLossTarget {
    pub model: Classifier,
    pub seq: Tensor,
    pub label: usize,
    /// Plants a wrong activation backward rule (negative control).
    pub corrupt_backward: bool,
}

impl DiffTarget for ModelLossTarget {
    fn n_params(&self) -> usize {
        self.model.parameters().len()
    }

    fn param_name(&self, p: usize) -> String {
        self.model.parameters()[p].name.clone()
    }

    fn param_numel(&self, p: usize) -> usize {
        self.model.parameters()[p].numel()
    }

    fn nudge(&mut self, p: usize, i: usize, delta: f64) {
        self.model.parameters_mut()[p].value.data_mut()[i] += delta;
    }

    fn eval(&mut self) -> Result<f64, AutodiffError> {
        let (tape, _, loss) = self
            .model
            .loss_tape(&self.seq, self.label, self.corrupt_backward)
            .map_err(model_to_autodiff)?;
        Ok(tape.value(loss).item())
    }

    fn eval_with_grads(&mut self) -> Result<f64, AutodiffError> {
        let (mut tape, binding, loss) = self
            .model
            .loss_tape(&self.seq, self.label, self.corrupt_backward)
            .map_err(model_to_autodiff)?;
        let value = tape.value(loss).item();
        tape.backward(loss)?;
        let mut params = self.model.parameters_mut();
        binding.harvest(&tape, &mut params);
        Ok(value)
    }

    fn grad(&self, p: usize, i: usize) -> f64 {
        self.model.parameters()[p]
            .value
            .grad
            .as_ref()
            .expect("eval_with_grads must run before grad()")[i]
    }
}

fn model_to_autodiff(err: ModelError) -> AutodiffError {
    match err {
        ModelError::Autodiff(e) => e,
        other => AutodiffError::NonFinite {
            what: format!("model evaluation failed: {other}"),
        },
    }
}

/// The self-contained tiny model used by the end-to-end gradient check:
/// two AUs, width scale 0.125, one input channel, three classes, and a
/// fixed co-occurrence graph built from the annotations `{1,2}, {1}, {2}`.
pub fn tiny_gradcheck_target(
    seed: u64,
    corrupt_backward: bool,
) -> Result<ModelLossTarget, ModelError> {
    use rand::Rng;
    use std::collections::BTreeSet;

    let annotations: Vec<BTreeSet<u32>> = vec![
        [1u32, 2].into_iter().collect(),
        [1u32].into_iter().collect(),
        [2u32].into_iter().collect(),
    ];
    let vocab = AuVocabulary::from_annotations(&annotations)?;
    let adjacency = AdjacencyMatrix::build(&annotations, &vocab)?;
    let config = BackboneConfig::default()
        .with_width_scale(0.125)
        .with_in_channels(1);
    let mut model = MerGcnModel::new(
        config,
        None,
        DEFAULT_GCN_SLOPE,
        vocab,
        adjacency,
        3,
        crate::optim::mix_seed(seed, 10),
    )?;
    // A zero head would hide both branches from the finite-difference
    // probe; give it a small deterministic spread instead.
    let mut rng = ChaCha8Rng::seed_from_u64(crate::optim::mix_seed(seed, 11));
    for p in [&mut model.head_weight, &mut model.head_bias] {
        let shape = p.value.shape().to_vec();
        let data: Vec<f64> = (0..p.numel())
            .map(|_| rng.random_range(-0.5..0.5))
            .collect();
        p.value = Tensor::new(shape, data).expect("finite").with_requires_grad();
    }
    let t = 8;
    let n = t * 112 * 112;
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let seq = Tensor::new(vec![1, t, 112, 112], data).expect("finite");
    Ok(ModelLossTarget {
        model: Classifier::MerGcn(model),
        seq,
        label: 1,
        corrupt_backward,
    })
}

// ── Checkpointing ───────────────────────────────────────────────────────

/// Sidecar metadata stored next to the MERT weights file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub variant: ModelVariant,
    pub n_classes: usize,
    pub class_names: Vec<String>,
    pub in_channels: usize,
    pub width_scale: f64,
    pub min_t: usize,
    /// AU ids, empty for the CNN-only variant.
    pub vocabulary: Vec<u32>,
    /// GCN hidden dims, empty for the CNN-only variant.
    pub gcn_dims: Vec<usize>,
    pub gcn_slope: f64,
    pub seed: u64,
    /// Effective training configuration, echoed verbatim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config: Option<serde_json::Value>,
}

/// `path` may be given with or without the `.mert` extension; the weights
/// land in `<base>.mert` and the metadata in `<base>.json`.
fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = if path.extension().map(|e| e == "mert").unwrap_or(false) {
        path.with_extension("")
    } else {
        path.to_path_buf()
    };
    (base.with_extension("mert"), base.with_extension("json"))
}

fn counts_tensor(shape: Vec<usize>, counts: &[u64]) -> Tensor {
    let data: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    Tensor::new(shape, data).expect("counts are finite")
}

pub fn save_checkpoint(
    model: &Classifier,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), ModelError> {
    let (weights_path, meta_path) = checkpoint_paths(path);
    let params = model.parameters();
    let mut entries: Vec<(&str, &Tensor)> = params
        .iter()
        .map(|p| (p.name.as_str(), &p.value))
        .collect();
    let graph_tensors;
    if let Classifier::MerGcn(m) = model {
        let n = m.adjacency.n();
        graph_tensors = [
            m.adjacency.to_tensor(),
            counts_tensor(vec![n], m.adjacency.counts()),
            counts_tensor(vec![n, n], m.adjacency.pair_counts()),
        ];
        entries.push(("graph.adjacency", &graph_tensors[0]));
        entries.push(("graph.counts", &graph_tensors[1]));
        entries.push(("graph.pair_counts", &graph_tensors[2]));
    }
    write_container(&weights_path, &entries)?;
    let json = serde_json::to_string_pretty(meta).expect("meta serializes");
    std::fs::write(&meta_path, json)?;
    Ok(())
}

fn take_entry(
    entries: &mut Vec<(String, Tensor)>,
    name: &str,
    expected_shape: &[usize],
) -> Result<Tensor, ModelError> {
    let pos = entries
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| ModelError::MissingEntry {
            name: name.to_string(),
        })?;
    let (_, tensor) = entries.swap_remove(pos);
    if tensor.shape() != expected_shape {
        return Err(ModelError::EntryShape {
            name: name.to_string(),
            expected: fmt_shape(expected_shape),
            got: fmt_shape(tensor.shape()),
        });
    }
    Ok(tensor)
}

pub fn load_checkpoint(path: &Path) -> Result<(Classifier, CheckpointMeta), ModelError> {
    let (weights_path, meta_path) = checkpoint_paths(path);
    let meta_text = std::fs::read_to_string(&meta_path)?;
    let meta: CheckpointMeta =
        serde_json::from_str(&meta_text).map_err(|source| ModelError::Sidecar {
            path: meta_path.clone(),
            source,
        })?;
    let mut entries = read_container(&weights_path)?;
    let config = BackboneConfig {
        in_channels: meta.in_channels,
        width_scale: meta.width_scale,
        input_hw: (112, 112),
        min_t: meta.min_t,
    };
    let mut model = match meta.variant {
        ModelVariant::MerGcn => {
            let vocab = AuVocabulary::from_ids(meta.vocabulary.clone())?;
            let n = vocab.n();
            let adjacency = take_entry(&mut entries, "graph.adjacency", &[n, n])?;
            let counts = take_entry(&mut entries, "graph.counts", &[n])?;
            let pair_counts = take_entry(&mut entries, "graph.pair_counts", &[n, n])?;
            let adjacency = AdjacencyMatrix::from_parts(
                n,
                adjacency.data().to_vec(),
                counts.data().iter().map(|&v| v as u64).collect(),
                pair_counts.data().iter().map(|&v| v as u64).collect(),
            );
            Classifier::MerGcn(MerGcnModel::new(
                config,
                Some(&meta.gcn_dims),
                meta.gcn_slope,
                vocab,
                adjacency,
                meta.n_classes,
                meta.seed,
            )?)
        }
        ModelVariant::CnnOnly => {
            Classifier::CnnOnly(CnnOnlyModel::new(config, meta.n_classes, meta.seed)?)
        }
    };
    for param in model.parameters_mut() {
        let tensor = take_entry(&mut entries, &param.name, param.value.shape())?;
        param.value = tensor.with_requires_grad();
        param.momentum_buffer = None;
    }
    Ok((model, meta))
}
