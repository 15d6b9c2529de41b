//! Cross-validation: LOSO and stratified k-fold splitters, the
//! single-sequence training loop, metric computation, and the per-fold
//! protocol driver.
//!
//! Each fold trains a fresh model whose AU vocabulary and co-occurrence
//! adjacency come from that fold's training records only, so no test
//! statistics ever leak into the graph. Folds are independent and may run
//! in parallel; per-fold seeds are derived as `mix_seed(seed, fold)`, so
//! results do not depend on scheduling.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::BackboneConfig;
use crate::data::{load_sequence, DataError, DatasetManifest, SequenceRecord};
use crate::graph::{AdjacencyMatrix, AuVocabulary, DEFAULT_GCN_SLOPE};
use crate::io::peek_shapes;
use crate::model::{
    Classifier, CnnOnlyModel, MerGcnModel, ModelError, ModelVariant,
};
use crate::optim::{clip_global_norm, mix_seed, sgd_step};
use crate::tape::AutodiffError;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("LOSO needs at least 2 subjects, found {0}")]
    SingleSubject(usize),
    #[error("k must lie in [2, {n_records}], got {k}")]
    KOutOfRange { k: usize, n_records: usize },
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("evaluation selection is empty")]
    EmptySelection,
    #[error("record id `{0}` is not in the manifest")]
    UnknownRecordId(String),
    #[error("record `{id}` has emotion `{emotion}` outside the class list")]
    LabelOutsideClasses { id: String, emotion: String },
    #[error("non-finite loss at epoch {epoch} on record `{record}`")]
    NonFiniteLoss { epoch: usize, record: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

// ── Split plans ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitStrategy {
    #[serde(rename = "loso")]
    Loso,
    #[serde(rename = "kfold")]
    KFold { k: usize, seed: u64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitPlan {
    pub strategy: SplitStrategy,
    pub folds: Vec<Fold>,
}

/// One fold per subject (sorted by subject id); the fold's test set is
/// exactly that subject's records.
pub fn loso_splits(manifest: &DatasetManifest) -> Result<SplitPlan, EvalError> {
    let subjects: Vec<&str> = manifest.subjects().into_iter().collect();
    if subjects.len() < 2 {
        return Err(EvalError::SingleSubject(subjects.len()));
    }
    let folds = subjects
        .iter()
        .map(|&subject| {
            let (test, train) = manifest
                .records
                .iter()
                .map(|r| r.id.clone())
                .partition(|id| {
                    manifest.record(id).map(|r| r.subject == subject).unwrap_or(false)
                });
            Fold { train, test }
        })
        .collect();
    Ok(SplitPlan {
        strategy: SplitStrategy::Loso,
        folds,
    })
}

/// Seeded, class-stratified partition into k near-equal folds: within each
/// class the per-fold test counts differ by at most one.
pub fn kfold_splits(
    manifest: &DatasetManifest,
    k: usize,
    seed: u64,
) -> Result<SplitPlan, EvalError> {
    let n = manifest.len();
    if k < 2 || k > n {
        return Err(EvalError::KOutOfRange { k, n_records: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment: BTreeMap<&str, usize> = BTreeMap::new();
    for class in &manifest.class_names {
        let mut ids: Vec<&str> = manifest
            .records
            .iter()
            .filter(|r| &r.emotion == class)
            .map(|r| r.id.as_str())
            .collect();
        ids.shuffle(&mut rng);
        for (i, id) in ids.into_iter().enumerate() {
            assignment.insert(id, i % k);
        }
    }
    let folds = (0..k)
        .map(|fold| {
            let (test, train) = manifest
                .records
                .iter()
                .map(|r| r.id.clone())
                .partition(|id| assignment[id.as_str()] == fold);
            Fold { train, test }
        })
        .collect();
    Ok(SplitPlan {
        strategy: SplitStrategy::KFold { k, seed },
        folds,
    })
}

// ── Metrics ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<u64>>,
    pub per_class_recall: Vec<f64>,
    pub n_eval: usize,
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let n_eval: u64 = confusion.iter().flatten().sum();
        let trace: u64 = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| row[i])
            .sum();
        let per_class_recall = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let total: u64 = row.iter().sum();
                if total == 0 {
                    0.0
                } else {
                    row[i] as f64 / total as f64
                }
            })
            .collect();
        Metrics {
            accuracy: if n_eval == 0 {
                0.0
            } else {
                trace as f64 / n_eval as f64
            },
            confusion,
            per_class_recall,
            n_eval: n_eval as usize,
        }
    }

    /// Pools confusion matrices (micro aggregation).
    pub fn pool<'a>(parts: impl IntoIterator<Item = &'a Metrics>) -> Metrics {
        let mut confusion: Vec<Vec<u64>> = Vec::new();
        for m in parts {
            if confusion.is_empty() {
                confusion = vec![vec![0; m.confusion.len()]; m.confusion.len()];
            }
            for (i, row) in m.confusion.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    confusion[i][j] += v;
                }
            }
        }
        Metrics::from_confusion(confusion)
    }
}

// ── Training ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global-norm gradient clip; None disables clipping.
    pub clip_norm: Option<f64>,
    pub width_scale: f64,
    /// GCN hidden dims; None derives `[1024*s, 512*s]`.
    pub gcn_dims: Option<Vec<usize>>,
    pub gcn_slope: f64,
    pub seed: u64,
    pub variant: ModelVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 1e-3,
            momentum: 0.9,
            clip_norm: Some(5.0),
            width_scale: 1.0,
            gcn_dims: None,
            gcn_slope: DEFAULT_GCN_SLOPE,
            seed: 0,
            variant: ModelVariant::MerGcn,
        }
    }
}

struct TrainItem {
    id: String,
    label: usize,
    seq: Tensor,
}

/// Incremental single-sequence SGD trainer. `run_epochs(a)` then
/// `run_epochs(b)` walks exactly the same step sequence as one
/// `run_epochs(a+b)` call.
pub struct Trainer {
    model: Classifier,
    items: Vec<TrainItem>,
    shuffle_rng: ChaCha8Rng,
    history: Vec<f64>,
    config: TrainConfig,
}

fn lookup_records<'m>(
    manifest: &'m DatasetManifest,
    ids: &[String],
) -> Result<Vec<&'m SequenceRecord>, EvalError> {
    ids.iter()
        .map(|id| {
            manifest
                .record(id)
                .ok_or_else(|| EvalError::UnknownRecordId(id.clone()))
        })
        .collect()
}

fn label_of(manifest: &DatasetManifest, record: &SequenceRecord) -> Result<usize, EvalError> {
    manifest
        .class_index(&record.emotion)
        .ok_or_else(|| EvalError::LabelOutsideClasses {
            id: record.id.clone(),
            emotion: record.emotion.clone(),
        })
}

/// Channel count taken from the first record's frames file header.
fn infer_channels(record: &SequenceRecord) -> Result<usize, EvalError> {
    let shapes = peek_shapes(&record.frames_path).map_err(DataError::from)?;
    let c = shapes
        .iter()
        .find(|(name, _)| name == "frames")
        .and_then(|(_, dims)| dims.first().copied())
        .unwrap_or(1);
    Ok(c)
}

impl Trainer {
    /// Builds the fold model (vocabulary and adjacency from these records
    /// only) and caches the normalized sequences.
    pub fn new(
        manifest: &DatasetManifest,
        train_ids: &[String],
        config: &TrainConfig,
    ) -> Result<Self, EvalError> {
        if train_ids.is_empty() {
            return Err(EvalError::EmptyTrainSet);
        }
        let records = lookup_records(manifest, train_ids)?;
        let n_classes = manifest.class_names.len();
        let in_channels = infer_channels(records[0])?;
        let backbone_config = BackboneConfig::default()
            .with_width_scale(config.width_scale)
            .with_in_channels(in_channels);
        let model = match config.variant {
            ModelVariant::MerGcn => {
                let annotations: Vec<_> = records.iter().map(|r| r.aus.clone()).collect();
                let vocab = AuVocabulary::from_annotations(&annotations)?;
                let adjacency = AdjacencyMatrix::build(&annotations, &vocab)?;
                Classifier::MerGcn(MerGcnModel::new(
                    backbone_config,
                    config.gcn_dims.as_deref(),
                    config.gcn_slope,
                    vocab,
                    adjacency,
                    n_classes,
                    config.seed,
                )?)
            }
            ModelVariant::CnnOnly => Classifier::CnnOnly(CnnOnlyModel::new(
                backbone_config,
                n_classes,
                config.seed,
            )?),
        };
        let mut items = Vec::with_capacity(records.len());
        for record in records {
            items.push(TrainItem {
                id: record.id.clone(),
                label: label_of(manifest, record)?,
                seq: load_sequence(record)?,
            });
        }
        Ok(Trainer {
            model,
            items,
            shuffle_rng: ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0xC0FFEE)),
            history: Vec::new(),
            config: config.clone(),
        })
    }

    /// Runs `n` epochs of `|train|` single-sequence SGD steps each, in
    /// seeded-shuffled order, recording the mean loss per epoch.
    pub fn run_epochs(&mut self, n: usize) -> Result<(), EvalError> {
        for _ in 0..n {
            let epoch = self.history.len();
            // Fresh identity permutation per epoch: the visit order depends
            // only on the rng stream, so incremental runs replay exactly.
            let mut order: Vec<usize> = (0..self.items.len()).collect();
            order.shuffle(&mut self.shuffle_rng);
            let mut total = 0.0;
            for &idx in &order {
                let item = &self.items[idx];
                let loss = self.model.loss_with_grads(&item.seq, item.label)?;
                if !loss.is_finite() {
                    return Err(EvalError::NonFiniteLoss {
                        epoch,
                        record: item.id.clone(),
                    });
                }
                total += loss;
                let mut params = self.model.parameters_mut();
                if let Some(max_norm) = self.config.clip_norm {
                    clip_global_norm(&mut params, max_norm)?;
                }
                sgd_step(&mut params, self.config.lr, self.config.momentum)?;
            }
            self.history.push(total / self.items.len() as f64);
        }
        Ok(())
    }

    /// Accuracy over the trainer's own (training) items.
    pub fn train_accuracy(&self) -> Result<f64, EvalError> {
        let mut correct = 0usize;
        for item in &self.items {
            if self.model.predict(&item.seq)? == item.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / self.items.len() as f64)
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    pub fn model(&self) -> &Classifier {
        &self.model
    }

    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }

    pub fn into_parts(self) -> (Classifier, Vec<f64>) {
        (self.model, self.history)
    }
}

/// One-shot training: `config.epochs * |train|` SGD steps, returning the
/// trained model and the per-epoch mean loss history.
pub fn train(
    manifest: &DatasetManifest,
    train_ids: &[String],
    config: &TrainConfig,
) -> Result<(Classifier, Vec<f64>), EvalError> {
    let mut trainer = Trainer::new(manifest, train_ids, config)?;
    trainer.run_epochs(config.epochs)?;
    Ok(trainer.into_parts())
}

/// Runs `predict` on every selected record and fills the confusion matrix.
pub fn evaluate(
    model: &Classifier,
    manifest: &DatasetManifest,
    ids: &[String],
) -> Result<Metrics, EvalError> {
    if ids.is_empty() {
        return Err(EvalError::EmptySelection);
    }
    let records = lookup_records(manifest, ids)?;
    let n = manifest.class_names.len();
    let mut confusion = vec![vec![0u64; n]; n];
    for record in records {
        let label = label_of(manifest, record)?;
        let seq = load_sequence(record)?;
        let predicted = model.predict(&seq)?;
        confusion[label][predicted] += 1;
    }
    Ok(Metrics::from_confusion(confusion))
}

// ── Cross-validation ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_ids: Vec<String>,
    pub metrics: Metrics,
    pub final_train_accuracy: f64,
    pub loss_history: Vec<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossValReport {
    pub folds: Vec<FoldResult>,
    pub pooled: Metrics,
    pub class_names: Vec<String>,
    pub total_seconds: f64,
}

pub struct CrossValidation {
    pub report: CrossValReport,
    /// Trained model per fold, in fold order.
    pub models: Vec<Classifier>,
}

fn run_fold(
    manifest: &DatasetManifest,
    fold_index: usize,
    fold: &Fold,
    config: &TrainConfig,
) -> Result<(FoldResult, Classifier), EvalError> {
    let started = Instant::now();
    let mut fold_config = config.clone();
    fold_config.seed = mix_seed(config.seed, fold_index as u64);
    let mut trainer = Trainer::new(manifest, &fold.train, &fold_config)?;
    trainer.run_epochs(fold_config.epochs)?;
    let final_train_accuracy = trainer.train_accuracy()?;
    let (model, loss_history) = trainer.into_parts();
    let metrics = evaluate(&model, manifest, &fold.test)?;
    Ok((
        FoldResult {
            fold: fold_index,
            test_ids: fold.test.clone(),
            metrics,
            final_train_accuracy,
            loss_history,
            seconds: started.elapsed().as_secs_f64(),
        },
        model,
    ))
}

/// Trains and evaluates one fresh model per fold and pools the confusion
/// matrices. `jobs > 1` runs folds in parallel; results are identical to
/// the serial run because every fold's seed depends only on its index.
pub fn cross_validate(
    manifest: &DatasetManifest,
    plan: &SplitPlan,
    config: &TrainConfig,
    jobs: usize,
) -> Result<CrossValidation, EvalError> {
    let started = Instant::now();
    let results: Vec<Result<(FoldResult, Classifier), EvalError>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .expect("thread pool");
        pool.install(|| {
            use rayon::prelude::*;
            plan.folds
                .par_iter()
                .enumerate()
                .map(|(i, fold)| run_fold(manifest, i, fold, config))
                .collect()
        })
    } else {
        plan.folds
            .iter()
            .enumerate()
            .map(|(i, fold)| run_fold(manifest, i, fold, config))
            .collect()
    };
    let mut folds = Vec::with_capacity(results.len());
    let mut models = Vec::with_capacity(results.len());
    for result in results {
        let (fold_result, model) = result?;
        folds.push(fold_result);
        models.push(model);
    }
    let pooled = Metrics::pool(folds.iter().map(|f| &f.metrics));
    Ok(CrossValidation {
        report: CrossValReport {
            folds,
            pooled,
            class_names: manifest.class_names.clone(),
            total_seconds: started.elapsed().as_secs_f64(),
        },
        models,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use tempfile::tempdir;

    fn test_manifest(
        n_subjects: usize,
        n_classes: usize,
        per: usize,
        seed: u64,
    ) -> (tempfile::TempDir, DatasetManifest) {
        let dir = tempdir().unwrap();
        let cfg = SyntheticConfig::new(n_subjects, n_classes, per, 8, seed);
        let manifest = generate_synthetic(&cfg, dir.path()).unwrap();
        (dir, manifest)
    }

    fn tiny_train_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            lr: 1e-3,
            momentum: 0.9,
            clip_norm: Some(5.0),
            width_scale: 1.0 / 32.0,
            gcn_dims: None,
            gcn_slope: 0.2,
            seed: 7,
            variant: ModelVariant::MerGcn,
        }
    }

    #[test]
    fn loso_one_fold_per_subject() {
        let (_dir, manifest) = test_manifest(4, 2, 1, 1);
        let plan = loso_splits(&manifest).unwrap();
        assert_eq!(plan.folds.len(), 4);
        for fold in &plan.folds {
            let subjects: std::collections::BTreeSet<_> = fold
                .test
                .iter()
                .map(|id| manifest.record(id).unwrap().subject.clone())
                .collect();
            assert_eq!(subjects.len(), 1, "test fold must hold one subject");
            for id in &fold.train {
                assert!(!subjects.contains(&manifest.record(id).unwrap().subject));
            }
        }
    }

    #[test]
    fn loso_rejects_single_subject() {
        let (_dir, manifest) = test_manifest(1, 2, 2, 1);
        assert!(matches!(
            loso_splits(&manifest),
            Err(EvalError::SingleSubject(1))
        ));
    }

    #[test]
    fn every_record_tested_exactly_once() {
        let (_dir, manifest) = test_manifest(3, 2, 2, 3);
        for plan in [
            loso_splits(&manifest).unwrap(),
            kfold_splits(&manifest, 4, 9).unwrap(),
        ] {
            let mut seen = std::collections::BTreeSet::new();
            for fold in &plan.folds {
                for id in &fold.test {
                    assert!(seen.insert(id.clone()), "{id} tested twice");
                    assert!(!fold.train.contains(id), "{id} in train and test");
                }
            }
            assert_eq!(seen.len(), manifest.len());
        }
    }

    #[test]
    fn kfold_sizes_and_stratification() {
        let (_dir, manifest) = test_manifest(4, 3, 2, 5);
        assert_eq!(manifest.len(), 24);
        let plan = kfold_splits(&manifest, 4, 11).unwrap();
        assert_eq!(plan.folds.len(), 4);
        for fold in &plan.folds {
            assert_eq!(fold.test.len(), 6);
        }
        // Per class, fold test counts differ by at most one.
        for class in &manifest.class_names {
            let counts: Vec<usize> = plan
                .folds
                .iter()
                .map(|f| {
                    f.test
                        .iter()
                        .filter(|id| &manifest.record(id).unwrap().emotion == class)
                        .count()
                })
                .collect();
            let (lo, hi) = (
                counts.iter().min().unwrap(),
                counts.iter().max().unwrap(),
            );
            assert!(hi - lo <= 1, "class {class} spread {counts:?}");
        }
    }

    #[test]
    fn kfold_same_seed_same_plan() {
        let (_dir, manifest) = test_manifest(3, 2, 2, 5);
        let a = kfold_splits(&manifest, 3, 42).unwrap();
        let b = kfold_splits(&manifest, 3, 42).unwrap();
        for (fa, fb) in a.folds.iter().zip(&b.folds) {
            assert_eq!(fa.test, fb.test);
            assert_eq!(fa.train, fb.train);
        }
        let c = kfold_splits(&manifest, 3, 43).unwrap();
        assert!(a.folds.iter().zip(&c.folds).any(|(x, y)| x.test != y.test));
    }

    #[test]
    fn kfold_rejects_out_of_range_k() {
        let (_dir, manifest) = test_manifest(2, 2, 1, 5);
        assert!(matches!(
            kfold_splits(&manifest, 1, 0),
            Err(EvalError::KOutOfRange { .. })
        ));
        assert!(matches!(
            kfold_splits(&manifest, manifest.len() + 1, 0),
            Err(EvalError::KOutOfRange { .. })
        ));
    }

    #[test]
    fn metrics_from_confusion() {
        let m = Metrics::from_confusion(vec![vec![2, 1], vec![0, 3]]);
        assert_eq!(m.n_eval, 6);
        assert!((m.accuracy - 5.0 / 6.0).abs() < 1e-12);
        assert!((m.per_class_recall[0] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.per_class_recall[1], 1.0);
    }

    #[test]
    fn training_bookkeeping_one_epoch() {
        let (_dir, manifest) = test_manifest(2, 2, 1, 13);
        let ids: Vec<String> = manifest.records.iter().map(|r| r.id.clone()).collect();
        let config = tiny_train_config(1);
        let (_, history) = train(&manifest, &ids[..3].to_vec(), &config).unwrap();
        assert_eq!(history.len(), 1);
        assert!(history[0].is_finite());
    }

    #[test]
    fn first_epoch_loss_starts_at_ln_n_classes() {
        // The zero-initialized head predicts uniformly at the start of
        // epoch 1; the head starts moving within the epoch, so the epoch
        // mean sits near (not exactly at) ln(n_classes).
        let (_dir, manifest) = test_manifest(2, 3, 1, 17);
        let ids: Vec<String> = manifest.records.iter().map(|r| r.id.clone()).collect();
        let trainer = Trainer::new(&manifest, &ids, &tiny_train_config(1)).unwrap();
        let first = trainer
            .model()
            .loss_value(&load_sequence(manifest.record(&ids[0]).unwrap()).unwrap(), 0)
            .unwrap();
        assert!((first - 3.0f64.ln()).abs() < 1e-12, "pre-training loss {first}");
        let mut trainer = trainer;
        trainer.run_epochs(1).unwrap();
        assert!(
            (trainer.history()[0] - 3.0f64.ln()).abs() < 0.05,
            "first epoch mean loss {}",
            trainer.history()[0]
        );
    }

    #[test]
    fn incremental_epochs_match_one_shot() {
        let (_dir, manifest) = test_manifest(2, 2, 1, 19);
        let ids: Vec<String> = manifest.records.iter().map(|r| r.id.clone()).collect();
        let config = tiny_train_config(4);
        let mut incremental = Trainer::new(&manifest, &ids, &config).unwrap();
        incremental.run_epochs(1).unwrap();
        incremental.run_epochs(3).unwrap();
        let (_, one_shot_history) = train(&manifest, &ids, &config).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(incremental.history()), bits(&one_shot_history));
    }

    #[test]
    fn evaluate_constant_model_on_balanced_set() {
        let (_dir, manifest) = test_manifest(2, 3, 1, 23);
        let ids: Vec<String> = manifest.records.iter().map(|r| r.id.clone()).collect();
        // Untrained model with a zero head predicts class 0 everywhere.
        let trainer = Trainer::new(&manifest, &ids, &tiny_train_config(1)).unwrap();
        let metrics = evaluate(trainer.model(), &manifest, &ids).unwrap();
        assert!((metrics.accuracy - 1.0 / 3.0).abs() < 1e-12);
        let total: u64 = metrics.confusion.iter().flatten().sum();
        assert_eq!(total as usize, manifest.len());
    }

    #[test]
    fn evaluate_rejects_empty_selection() {
        let (_dir, manifest) = test_manifest(2, 2, 1, 29);
        let trainer = Trainer::new(
            &manifest,
            &manifest.records.iter().map(|r| r.id.clone()).collect::<Vec<_>>(),
            &tiny_train_config(1),
        )
        .unwrap();
        assert!(matches!(
            evaluate(trainer.model(), &manifest, &[]),
            Err(EvalError::EmptySelection)
        ));
    }

    #[test]
    fn adjacency_counts_bounded_by_train_size() {
        // No-leakage check: fold adjacency counts can never exceed the
        // number of training records in that fold.
        let (_dir, manifest) = test_manifest(3, 2, 2, 31);
        let plan = loso_splits(&manifest).unwrap();
        let config = tiny_train_config(1);
        for fold in &plan.folds {
            let trainer = Trainer::new(&manifest, &fold.train, &config).unwrap();
            if let Classifier::MerGcn(m) = trainer.model() {
                for &c in m.adjacency.counts() {
                    assert!(c as usize <= fold.train.len());
                }
            } else {
                panic!("expected the graph variant");
            }
        }
    }

    #[test]
    fn cross_validate_single_fold_degenerates_to_train_test() {
        let (_dir, manifest) = test_manifest(2, 2, 1, 37);
        let ids: Vec<String> = manifest.records.iter().map(|r| r.id.clone()).collect();
        let plan = SplitPlan {
            strategy: SplitStrategy::KFold { k: 2, seed: 0 },
            folds: vec![Fold {
                train: ids[..2].to_vec(),
                test: ids[2..].to_vec(),
            }],
        };
        let cv = cross_validate(&manifest, &plan, &tiny_train_config(1), 1).unwrap();
        assert_eq!(cv.report.folds.len(), 1);
        assert_eq!(cv.report.pooled.n_eval, ids.len() - 2);
        // Pooled accuracy equals trace over total by definition.
        let trace: u64 = cv.report.pooled.confusion.iter().enumerate().map(|(i, r)| r[i]).sum();
        assert!(
            (cv.report.pooled.accuracy - trace as f64 / cv.report.pooled.n_eval as f64).abs()
                < 1e-12
        );
    }

    #[test]
    fn cross_validate_is_deterministic_and_parallel_invariant() {
        let (_dir, manifest) = test_manifest(2, 2, 1, 41);
        let plan = kfold_splits(&manifest, 2, 3).unwrap();
        let config = tiny_train_config(2);
        let serial = cross_validate(&manifest, &plan, &config, 1).unwrap();
        let parallel = cross_validate(&manifest, &plan, &config, 2).unwrap();
        let histories = |cv: &CrossValidation| {
            cv.report
                .folds
                .iter()
                .flat_map(|f| f.loss_history.iter().map(|v| v.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(histories(&serial), histories(&parallel));
        assert_eq!(
            serial.report.pooled.confusion,
            parallel.report.pooled.confusion
        );
    }

    #[test]
    fn clip_norm_is_respected_during_training() {
        let (_dir, manifest) = test_manifest(2, 2, 1, 43);
        let ids: Vec<String> = manifest.records.iter().map(|r| r.id.clone()).collect();
        let mut config = tiny_train_config(1);
        config.clip_norm = Some(0.01);
        config.lr = 0.1;
        // With a tight clip the run must stay finite and complete.
        let (_, history) = train(&manifest, &ids, &config).unwrap();
        assert!(history.iter().all(|v| v.is_finite()));
    }
}
