//! Action-unit vocabulary, the data-driven co-occurrence adjacency matrix,
//! and the stacked graph convolution over one-hot AU nodes.
//!
//! The adjacency entry `a[i][j]` is the conditional probability that AU `i`
//! appears in an annotation given that AU `j` appears, counted over the
//! training annotations. It is deliberately asymmetric and is neither
//! normalized, thresholded, nor symmetrized here. Columns of AUs that never
//! occur are all zeros so the matrix size can stay fixed across folds; such
//! vocabularies are better pruned.

use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::optim::{xavier_uniform, Parameter};
use crate::tape::{AutodiffError, Tape, TensorId};
use crate::tensor::Tensor;

/// Slope used by the graph-convolution activation unless configured.
pub const DEFAULT_GCN_SLOPE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("cannot build a vocabulary from an empty annotation list")]
    EmptyAnnotations,
    #[error("annotation {index} is empty; every annotation needs at least one AU")]
    EmptyAnnotation { index: usize },
    #[error("AU ids must be strictly increasing and unique, got {ids:?}")]
    UnsortedVocabulary { ids: Vec<u32> },
    #[error("annotation {index} references AU {au} which is not in the vocabulary")]
    UnknownAu { au: u32, index: usize },
    #[error("GCN layer {layer} expects input dim {expected}, got {actual}")]
    LayerDimMismatch {
        layer: usize,
        expected: usize,
        actual: usize,
    },
    #[error("GCN stack input dim {stack} does not match vocabulary size {n}")]
    StackInputMismatch { stack: usize, n: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Ordered list of distinct AU identifiers (FACS numbers).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuVocabulary {
    ids: Vec<u32>,
}

impl AuVocabulary {
    /// Sorted union of every AU appearing in the annotations.
    pub fn from_annotations(annotations: &[BTreeSet<u32>]) -> Result<Self, GraphError> {
        if annotations.is_empty() {
            return Err(GraphError::EmptyAnnotations);
        }
        if let Some(index) = annotations.iter().position(|a| a.is_empty()) {
            return Err(GraphError::EmptyAnnotation { index });
        }
        let mut union = BTreeSet::new();
        for set in annotations {
            union.extend(set.iter().copied());
        }
        Ok(AuVocabulary {
            ids: union.into_iter().collect(),
        })
    }

    /// Fixed-list mode so separate folds can share one graph size.
    pub fn from_ids(ids: Vec<u32>) -> Result<Self, GraphError> {
        if ids.is_empty() || ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GraphError::UnsortedVocabulary { ids });
        }
        Ok(AuVocabulary { ids })
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn index_of(&self, au: u32) -> Option<usize> {
        self.ids.binary_search(&au).ok()
    }
}

/// One-hot node features: the identity matrix, row i for AU i. Every AU
/// starts out equally independent; the GCN learns the mixing.
pub fn one_hot_nodes(vocab: &AuVocabulary) -> Tensor {
    Tensor::identity(vocab.n())
}

/// Asymmetric co-occurrence conditional probability matrix plus the counts
/// it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    n: usize,
    /// Row-major n×n; `a[i*n + j] = P(U_i | U_j)`.
    a: Vec<f64>,
    /// Occurrence count of each AU over the annotations.
    counts: Vec<u64>,
    /// Row-major n×n joint occurrence counts.
    pair_counts: Vec<u64>,
}

impl AdjacencyMatrix {
    /// Counts occurrences and pairwise co-occurrences, then divides each
    /// column by that column's occurrence count. Columns with zero
    /// occurrences stay zero.
    pub fn build(
        annotations: &[BTreeSet<u32>],
        vocab: &AuVocabulary,
    ) -> Result<Self, GraphError> {
        let n = vocab.n();
        let mut counts = vec![0u64; n];
        let mut pair_counts = vec![0u64; n * n];
        for (index, set) in annotations.iter().enumerate() {
            let mut members = Vec::with_capacity(set.len());
            for &au in set {
                let i = vocab
                    .index_of(au)
                    .ok_or(GraphError::UnknownAu { au, index })?;
                members.push(i);
            }
            for &i in &members {
                counts[i] += 1;
                for &j in &members {
                    pair_counts[i * n + j] += 1;
                }
            }
        }
        // Self-pairs equal the occurrence counts, so diagonals become 1.
        let mut a = vec![0.0; n * n];
        for j in 0..n {
            if counts[j] == 0 {
                continue;
            }
            let denom = counts[j] as f64;
            for i in 0..n {
                a[i * n + j] = pair_counts[i * n + j] as f64 / denom;
            }
        }
        Ok(AdjacencyMatrix {
            n,
            a,
            counts,
            pair_counts,
        })
    }

    /// Rebuilds the struct from persisted pieces (checkpoint loading).
    pub fn from_parts(n: usize, a: Vec<f64>, counts: Vec<u64>, pair_counts: Vec<u64>) -> Self {
        assert_eq!(a.len(), n * n);
        assert_eq!(counts.len(), n);
        assert_eq!(pair_counts.len(), n * n);
        AdjacencyMatrix {
            n,
            a,
            counts,
            pair_counts,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }

    pub fn matrix(&self) -> &[f64] {
        &self.a
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn pair_counts(&self) -> &[u64] {
        &self.pair_counts
    }

    /// Indices of AUs that never occurred (their columns are all zeros).
    pub fn zero_columns(&self) -> Vec<usize> {
        (0..self.n).filter(|&j| self.counts[j] == 0).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.n], self.a.clone()).expect("probabilities are finite")
    }

    /// Plain-text export: header `n <count>`, the vocabulary line, then one
    /// row of conditional probabilities per line.
    pub fn export_text(&self, vocab: &AuVocabulary) -> String {
        assert_eq!(vocab.n(), self.n);
        let mut out = String::new();
        out.push_str(&format!("n {}\n", self.n));
        let ids: Vec<String> = vocab.ids().iter().map(|id| id.to_string()).collect();
        out.push_str(&ids.join(" "));
        out.push('\n');
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n)
                .map(|j| format!("{}", self.value(i, j)))
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

/// One graph-convolution layer: a trainable weight and its activation slope.
#[derive(Debug, Clone)]
pub struct GcnLayer {
    pub weight: Parameter,
    pub slope: f64,
}

/// Ordered stack of graph-convolution layers mapping one-hot AU nodes to
/// embedded AU representations.
#[derive(Debug, Clone)]
pub struct GcnStack {
    layers: Vec<GcnLayer>,
    dims: Vec<usize>,
}

impl GcnStack {
    /// Hidden dimensions for the default two-layer stack at a width scale:
    /// `[1024*s, 512*s]`, each at least 1.
    pub fn default_dims(width_scale: f64) -> Vec<usize> {
        [1024.0, 512.0]
            .iter()
            .map(|base| ((base * width_scale).round() as usize).max(1))
            .collect()
    }

    /// Builds layers `n -> dims[0] -> ... -> dims.last()` with uniform
    /// `±sqrt(6/(d_in+d_out))` weights.
    pub fn new(n_nodes: usize, dims: &[usize], slope: f64, rng: &mut ChaCha8Rng) -> Self {
        assert!(!dims.is_empty(), "a GCN stack needs at least one layer");
        let mut full_dims = Vec::with_capacity(dims.len() + 1);
        full_dims.push(n_nodes);
        full_dims.extend_from_slice(dims);
        let layers = full_dims
            .windows(2)
            .enumerate()
            .map(|(i, pair)| GcnLayer {
                weight: Parameter::new(
                    format!("gcn.layer{i}.weight"),
                    xavier_uniform(rng, pair[0], pair[1]),
                ),
                slope,
            })
            .collect();
        GcnStack {
            layers,
            dims: full_dims,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[GcnLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [GcnLayer] {
        &mut self.layers
    }

    /// `[n, d_1, ..., d_L]` including the input dimension.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("stack has at least one layer")
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        self.layers.iter().map(|l| &l.weight).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().map(|l| &mut l.weight).collect()
    }

    /// Folds [`gcn_layer_forward`] over the stack starting from the one-hot
    /// node features; `weight_ids` are the bound tape leaves for each layer
    /// weight, in layer order. Returns H^L (n × output_dim).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        adjacency: &AdjacencyMatrix,
        weight_ids: &[TensorId],
    ) -> Result<TensorId, GraphError> {
        assert_eq!(weight_ids.len(), self.layers.len());
        if adjacency.n() != self.input_dim() {
            return Err(GraphError::StackInputMismatch {
                stack: self.input_dim(),
                n: adjacency.n(),
            });
        }
        let adj_id = tape.constant(adjacency.to_tensor());
        let mut h = tape.constant(Tensor::identity(adjacency.n()));
        for (layer, &w) in self.layers.iter().zip(weight_ids) {
            h = gcn_layer_forward_ids(tape, h, adj_id, w, layer.slope)?;
        }
        Ok(h)
    }
}

/// One graph-convolution step `leaky_relu(A · H · W)` with already-bound
/// tape ids.
pub fn gcn_layer_forward_ids(
    tape: &mut Tape,
    h: TensorId,
    adj: TensorId,
    w: TensorId,
    slope: f64,
) -> Result<TensorId, GraphError> {
    let mixed = tape.matmul(adj, h)?;
    let projected = tape.matmul(mixed, w)?;
    Ok(tape.leaky_relu(projected, slope)?)
}

/// Standalone layer application for plain tensors: `leaky_relu(A·h·w)`.
pub fn gcn_layer_forward(
    h: &Tensor,
    adjacency: &AdjacencyMatrix,
    w: &Parameter,
    slope: f64,
) -> Result<Tensor, GraphError> {
    let mut tape = Tape::new();
    let adj_id = tape.constant(adjacency.to_tensor());
    let h_id = tape.constant(h.clone());
    let w_id = tape.constant(w.value.clone());
    let out = gcn_layer_forward_ids(&mut tape, h_id, adj_id, w_id, slope)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sets(raw: &[&[u32]]) -> Vec<BTreeSet<u32>> {
        raw.iter().map(|s| s.iter().copied().collect()).collect()
    }

    #[test]
    fn vocabulary_is_sorted_union() {
        let v = AuVocabulary::from_annotations(&sets(&[&[1, 2], &[4]])).unwrap();
        assert_eq!(v.ids(), &[1, 2, 4]);
        assert_eq!(v.n(), 3);
    }

    #[test]
    fn vocabulary_deduplicates() {
        let v = AuVocabulary::from_annotations(&sets(&[&[12], &[12], &[12]])).unwrap();
        assert_eq!(v.ids(), &[12]);
    }

    #[test]
    fn vocabulary_is_order_insensitive() {
        let a = AuVocabulary::from_annotations(&sets(&[&[4, 1], &[1, 4]])).unwrap();
        assert_eq!(a.ids(), &[1, 4]);
    }

    #[test]
    fn vocabulary_rejects_empty_inputs() {
        assert!(matches!(
            AuVocabulary::from_annotations(&[]),
            Err(GraphError::EmptyAnnotations)
        ));
        let err = AuVocabulary::from_annotations(&sets(&[&[1], &[]])).unwrap_err();
        assert!(matches!(err, GraphError::EmptyAnnotation { index: 1 }));
    }

    #[test]
    fn fixed_vocabulary_must_be_strictly_increasing() {
        assert!(AuVocabulary::from_ids(vec![1, 2, 4]).is_ok());
        assert!(AuVocabulary::from_ids(vec![2, 2]).is_err());
        assert!(AuVocabulary::from_ids(vec![4, 1]).is_err());
        assert!(AuVocabulary::from_ids(vec![]).is_err());
    }

    #[test]
    fn adjacency_worked_example() {
        // annotations {1,2}, {1}, {2,4} over vocabulary [1,2,4]
        let vocab = AuVocabulary::from_ids(vec![1, 2, 4]).unwrap();
        let adj =
            AdjacencyMatrix::build(&sets(&[&[1, 2], &[1], &[2, 4]]), &vocab).unwrap();
        let at = |i: u32, j: u32| {
            adj.value(
                vocab.index_of(i).unwrap(),
                vocab.index_of(j).unwrap(),
            )
        };
        assert_eq!(at(1, 2), 0.5);
        assert_eq!(at(2, 1), 0.5);
        assert_eq!(at(4, 2), 0.5);
        assert_eq!(at(2, 4), 1.0);
        assert_eq!(at(1, 1), 1.0);
        assert_eq!(at(2, 2), 1.0);
        assert_eq!(at(4, 4), 1.0);
        assert_eq!(at(1, 4), 0.0);
        assert_eq!(at(4, 1), 0.0);
    }

    #[test]
    fn adjacency_single_annotation() {
        let vocab = AuVocabulary::from_ids(vec![1]).unwrap();
        let adj = AdjacencyMatrix::build(&sets(&[&[1]]), &vocab).unwrap();
        assert_eq!(adj.matrix(), &[1.0]);
    }

    #[test]
    fn adjacency_zero_column_for_absent_au() {
        let vocab = AuVocabulary::from_ids(vec![1, 2]).unwrap();
        let adj = AdjacencyMatrix::build(&sets(&[&[1], &[1]]), &vocab).unwrap();
        assert_eq!(adj.value(0, 0), 1.0);
        assert_eq!(adj.value(0, 1), 0.0);
        assert_eq!(adj.value(1, 1), 0.0);
        assert_eq!(adj.zero_columns(), vec![1]);
    }

    #[test]
    fn adjacency_unknown_au_names_id_and_annotation() {
        let vocab = AuVocabulary::from_ids(vec![1, 2]).unwrap();
        let err = AdjacencyMatrix::build(&sets(&[&[1], &[7]]), &vocab).unwrap_err();
        match err {
            GraphError::UnknownAu { au, index } => {
                assert_eq!((au, index), (7, 1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn adjacency_is_asymmetric_when_counts_differ() {
        // N1=2, N2=1, N12=1: P(2|1)=1/2 but P(1|2)=1.
        let vocab = AuVocabulary::from_ids(vec![1, 2]).unwrap();
        let adj = AdjacencyMatrix::build(&sets(&[&[1, 2], &[1]]), &vocab).unwrap();
        assert_eq!(adj.value(1, 0), 0.5);
        assert_eq!(adj.value(0, 1), 1.0);
        assert_ne!(adj.value(1, 0), adj.value(0, 1));
    }

    #[test]
    fn reconstruction_identity_holds() {
        let annotations = sets(&[&[1, 2, 5], &[2, 5], &[1], &[5], &[1, 2]]);
        let vocab = AuVocabulary::from_annotations(&annotations).unwrap();
        let adj = AdjacencyMatrix::build(&annotations, &vocab).unwrap();
        let n = adj.n();
        for i in 0..n {
            for j in 0..n {
                if adj.counts()[j] > 0 {
                    let recon = adj.value(i, j) * adj.counts()[j] as f64;
                    let expected = adj.pair_counts()[i * n + j] as f64;
                    assert!((recon - expected).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn one_hot_nodes_is_identity() {
        let vocab = AuVocabulary::from_ids(vec![3, 9, 12]).unwrap();
        let x = one_hot_nodes(&vocab);
        assert_eq!(x.shape(), &[3, 3]);
        for i in 0..3 {
            let row_sum: f64 = (0..3).map(|j| x.get(&[i, j])).sum();
            let col_sum: f64 = (0..3).map(|j| x.get(&[j, i])).sum();
            assert_eq!(row_sum, 1.0);
            assert_eq!(col_sum, 1.0);
        }
    }

    #[test]
    fn layer_identity_propagation() {
        // a = I, w = I, nonnegative h: output equals h.
        let vocab = AuVocabulary::from_ids(vec![1, 2]).unwrap();
        let adj = AdjacencyMatrix::build(&sets(&[&[1], &[2]]), &vocab).unwrap();
        // Only self-pairs here, so the adjacency is exactly I.
        assert_eq!(adj.matrix(), &[1.0, 0.0, 0.0, 1.0]);
        let h = Tensor::new(vec![2, 2], vec![0.5, 1.5, 0.0, 2.0]).unwrap();
        let w = Parameter::new("w", Tensor::identity(2));
        let out = gcn_layer_forward(&h, &adj, &w, 0.2).unwrap();
        assert_eq!(out.data(), h.data());
    }

    #[test]
    fn layer_hand_product() {
        // a=[[1,1],[0,1]], h=I, w=[[2],[3]] → [[5],[3]].
        let vocab = AuVocabulary::from_ids(vec![1, 2]).unwrap();
        let mut adj = AdjacencyMatrix::build(&sets(&[&[1], &[2]]), &vocab).unwrap();
        adj.a = vec![1.0, 1.0, 0.0, 1.0];
        let h = Tensor::identity(2);
        let w = Parameter::new("w", Tensor::new(vec![2, 1], vec![2.0, 3.0]).unwrap());
        let out = gcn_layer_forward(&h, &adj, &w, 0.2).unwrap();
        assert_eq!(out.data(), &[5.0, 3.0]);
    }

    #[test]
    fn layer_leaky_branch() {
        let vocab = AuVocabulary::from_ids(vec![1]).unwrap();
        let adj = AdjacencyMatrix::build(&sets(&[&[1]]), &vocab).unwrap();
        let h = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let w = Parameter::new("w", Tensor::new(vec![1, 1], vec![-1.0]).unwrap());
        let out = gcn_layer_forward(&h, &adj, &w, 0.2).unwrap();
        assert!((out.data()[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn stack_identity_composition() {
        let vocab = AuVocabulary::from_ids(vec![1, 2, 3]).unwrap();
        let adj = AdjacencyMatrix::build(&sets(&[&[1], &[2], &[3]]), &vocab).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut stack = GcnStack::new(3, &[3], 0.2, &mut rng);
        stack.layers_mut()[0].weight.value = Tensor::identity(3).with_requires_grad();
        let mut tape = Tape::new();
        let ids: Vec<_> = stack
            .parameters()
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect();
        let out = stack.forward_on_tape(&mut tape, &adj, &ids).unwrap();
        assert_eq!(tape.value(out).data(), Tensor::identity(3).data());
    }

    #[test]
    fn default_stack_shapes() {
        assert_eq!(GcnStack::default_dims(1.0), vec![1024, 512]);
        assert_eq!(GcnStack::default_dims(0.25), vec![256, 128]);
        let vocab = AuVocabulary::from_ids(vec![1, 2, 3, 4, 5]).unwrap();
        let adj = AdjacencyMatrix::build(
            &sets(&[&[1, 2], &[3], &[4, 5], &[2, 3]]),
            &vocab,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stack = GcnStack::new(5, &GcnStack::default_dims(1.0), 0.2, &mut rng);
        assert_eq!(stack.layer_count(), 2);
        let mut tape = Tape::new();
        let ids: Vec<_> = stack
            .parameters()
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect();
        let out = stack.forward_on_tape(&mut tape, &adj, &ids).unwrap();
        assert_eq!(tape.value(out).shape(), &[5, 512]);
    }

    #[test]
    fn diagonal_adjacency_isolates_nodes() {
        // With a = I, node i's output depends only on row i of the input;
        // verify by zeroing one weight row and watching only that node move.
        let vocab = AuVocabulary::from_ids(vec![1, 2]).unwrap();
        let adj = AdjacencyMatrix::build(&sets(&[&[1], &[2]]), &vocab).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stack = GcnStack::new(2, &[4], 0.2, &mut rng);
        let run = |weight: &Tensor| {
            let mut tape = Tape::new();
            let w = tape.constant(weight.clone());
            let out = stack.forward_on_tape(&mut tape, &adj, &[w]).unwrap();
            tape.value(out).clone()
        };
        let base = run(&stack.layers()[0].weight.value);
        let mut altered = stack.layers()[0].weight.value.clone();
        for j in 0..4 {
            altered.set(&[0, j], 0.0);
        }
        let changed = run(&altered);
        // Node 0 reads weight row 0 (h = I), node 1 must be untouched.
        assert_ne!(&base.data()[0..4], &changed.data()[0..4]);
        assert_eq!(&base.data()[4..8], &changed.data()[4..8]);
    }

    #[test]
    fn export_text_layout() {
        let vocab = AuVocabulary::from_ids(vec![1, 2, 4]).unwrap();
        let adj =
            AdjacencyMatrix::build(&sets(&[&[1, 2], &[1], &[2, 4]]), &vocab).unwrap();
        let text = adj.export_text(&vocab);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "n 3");
        assert_eq!(lines[1], "1 2 4");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[2], "1 0.5 0");
        assert_eq!(lines[3], "0.5 1 1");
        assert_eq!(lines[4], "0 0.5 1");
    }

    #[test]
    fn bounded_activations_stay_finite_under_random_weights() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for round in 0..25 {
            let n = 2 + (round % 4);
            let mut annotations = Vec::new();
            for _ in 0..6 {
                let mut s = BTreeSet::new();
                for au in 1..=n as u32 {
                    if rng.random_bool(0.5) {
                        s.insert(au);
                    }
                }
                if s.is_empty() {
                    s.insert(1);
                }
                annotations.push(s);
            }
            let vocab = AuVocabulary::from_ids((1..=n as u32).collect()).unwrap();
            let adj = AdjacencyMatrix::build(&annotations, &vocab).unwrap();
            let stack = GcnStack::new(n, &[8, 4], 0.2, &mut rng);
            let mut tape = Tape::new();
            let ids: Vec<_> = stack
                .parameters()
                .iter()
                .map(|p| tape.constant(p.value.clone()))
                .collect();
            let out = stack.forward_on_tape(&mut tape, &adj, &ids).unwrap();
            assert!(tape.value(out).all_finite());
        }
    }
}
