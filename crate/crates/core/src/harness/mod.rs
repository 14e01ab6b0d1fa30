//! Experiment orchestration: per-SNR datasets, Hyperband searches, BCNN
//! baselines, the cross-SNR generalization study and report emission.

mod report;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::hyperband::{hyperband, Evaluation, Evaluator, LogRecord, Recommendation, TrialFailure};
use crate::hyperspace::{bcnn_config, build_model, BuiltModel, HyperConfig, HyperSpace, MAX_EPOCHS, NUM_CLASSES};
use crate::preprocess::{assemble_inputs, split_indices, to_tensor_set, InputSettings, SplitIndices, SplitRatios};
use crate::signal::{build_dataset, read_dataset, write_dataset, ChannelTemplate, ClassId, DatasetSpec, IQStreamSet, RawDataset, Snr};
use iqband_nn::{evaluate, seed, train, Metrics, NnError, TensorSet, TrainData, TrainedModel};

pub use report::{emit_reports, snr_tag, RunReport, SettingsRow};

const CAP_TAG: u64 = 0xca9;
const TRIAL_TAG: u64 = 0x7a1;
const BCNN_TAG: u64 = 0xbc;
const TWIN_TAG: u64 = 0x7e1;

/// Simulation SNR grid in dB.
pub const SNR_GRID: [f64; 7] = [-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0];
/// Test SNRs within this distance of the training SNR count as adjacent.
pub const ADJACENT_DB: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSettings {
    pub classes: Vec<ClassId>,
    pub waveforms_per_class: usize,
    pub samples_per_stream: usize,
    pub channel: ChannelTemplate,
    pub master_seed: u64,
}

impl DataSettings {
    pub fn spec_at(&self, snr_db: f64) -> DatasetSpec {
        DatasetSpec {
            classes: self.classes.clone(),
            waveforms_per_class: self.waveforms_per_class,
            samples_per_stream: self.samples_per_stream,
            channel: self.channel.clone(),
            snr: Snr::Db(snr_db),
            master_seed: self.master_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSettings {
    pub max_budget: usize,
    pub eta: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub snrs_db: Vec<f64>,
    pub data: DataSettings,
    /// Inputs per class over all three splits; larger pools are subsampled.
    pub inputs_per_class: usize,
    pub split_seed: u64,
    pub search: SearchSettings,
    pub bcnn_n: Vec<usize>,
    pub bcnn_max_epochs: usize,
    pub train_seed: u64,
}

impl ExperimentPlan {
    /// Desk-scale defaults: N = 4 receivers, 2,000 inputs per class at w = 512,
    /// R = 20 epochs, eta = 2.
    pub fn desk_scale(snrs_db: Vec<f64>) -> Self {
        Self {
            snrs_db,
            data: DataSettings {
                classes: ClassId::ALL.to_vec(),
                waveforms_per_class: 500,
                samples_per_stream: 2048,
                channel: ChannelTemplate {
                    num_receivers: 4,
                    num_taps: 4,
                    tap_decay_db: 3.0,
                    per_receiver_phase: true,
                },
                master_seed: 2021,
            },
            inputs_per_class: 2000,
            split_seed: 7,
            search: SearchSettings {
                max_budget: 20,
                eta: 2,
                seed: 11,
            },
            bcnn_n: vec![1, 2, 3, 4],
            bcnn_max_epochs: MAX_EPOCHS,
            train_seed: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.snrs_db.is_empty() || self.snrs_db.iter().any(|s| !s.is_finite()) {
            return Err(CoreError::InvalidConfig("plan needs finite SNR values".into()));
        }
        if self.inputs_per_class == 0 || self.bcnn_max_epochs == 0 {
            return Err(CoreError::InvalidConfig("inputs_per_class and bcnn_max_epochs must be positive".into()));
        }
        let n = self.data.channel.num_receivers;
        if let Some(bad) = self.bcnn_n.iter().find(|&&k| k == 0 || k > n) {
            return Err(CoreError::InvalidConfig(format!("BCNN n = {bad} outside 1..={n}")));
        }
        self.data.spec_at(0.0).validate()
    }

    pub fn space(&self) -> Result<HyperSpace> {
        HyperSpace::new(self.data.channel.num_receivers)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Valid,
    Test,
}

impl Part {
    fn tag(self) -> u64 {
        self as u64
    }
}

/// One SNR point: the raw dataset and its stream-set level split.
#[derive(Debug, Clone)]
pub struct SnrData {
    pub snr_db: f64,
    pub dataset: RawDataset,
    pub split: SplitIndices,
    pub ratios: SplitRatios,
    pub inputs_per_class: usize,
}

impl SnrData {
    /// Splits whole stream sets 60/20/20 so no waveform contributes windows
    /// to two parts; every window size then sees the same partition.
    pub fn new(dataset: RawDataset, split_seed: u64, inputs_per_class: usize) -> Result<Self> {
        let snr_db = dataset
            .spec
            .snr
            .db()
            .ok_or_else(|| CoreError::InvalidDataset("experiments need a finite SNR".into()))?;
        let ratios = SplitRatios::default();
        let split = split_indices(&dataset.labels(), ratios, split_seed)?;
        Ok(Self {
            snr_db,
            dataset,
            split,
            ratios,
            inputs_per_class,
        })
    }

    pub fn generate(plan: &ExperimentPlan, snr_db: f64) -> Result<Self> {
        Self::new(build_dataset(&plan.data.spec_at(snr_db))?, plan.split_seed, plan.inputs_per_class)
    }

    /// Reads `dir` when it holds this plan's dataset, otherwise synthesizes
    /// and writes it there.
    pub fn cached(plan: &ExperimentPlan, snr_db: f64, dir: &Path) -> Result<Self> {
        let spec = plan.data.spec_at(snr_db);
        let ds = match read_dataset(dir) {
            Ok(ds) if ds.spec == spec => ds,
            _ => {
                let ds = build_dataset(&spec)?;
                write_dataset(&ds, dir)?;
                ds
            }
        };
        Self::new(ds, plan.split_seed, plan.inputs_per_class)
    }

    fn part_sets(&self, part: Part) -> Vec<IQStreamSet> {
        let idx = match part {
            Part::Train => &self.split.train,
            Part::Valid => &self.split.valid,
            Part::Test => &self.split.test,
        };
        idx.iter().map(|&i| self.dataset.sets[i].clone()).collect()
    }

    fn part_cap(&self, part: Part) -> usize {
        let r = match part {
            Part::Train => self.ratios.train,
            Part::Valid => self.ratios.valid,
            Part::Test => self.ratios.test,
        };
        ((self.inputs_per_class as f64 * r).round() as usize).max(1)
    }

    /// Windows of one part, subsampled per class to the part's share of the cap.
    pub fn tensors(&self, part: Part, input: InputSettings) -> Result<TensorSet<f32>> {
        let inputs = assemble_inputs(&self.part_sets(part), input)?;
        let cap = self.part_cap(part);
        let mut keep = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(self.split.seed, &[CAP_TAG, part.tag()]));
        for c in 0..NUM_CLASSES {
            let mut members: Vec<usize> = (0..inputs.len()).filter(|&i| inputs[i].label == c).collect();
            if members.len() > cap {
                members.shuffle(&mut rng);
                members.truncate(cap);
            }
            keep.extend(members);
        }
        keep.sort_unstable();
        let chosen: Vec<_> = keep.into_iter().map(|i| inputs[i].clone()).collect();
        to_tensor_set(&chosen, input.shape())
    }

    pub fn train_valid(&self, input: InputSettings) -> Result<(TensorSet<f32>, TensorSet<f32>)> {
        Ok((self.tensors(Part::Train, input)?, self.tensors(Part::Valid, input)?))
    }
}

/// Trains a compiled model for `budget` cumulative epochs.
pub fn train_built(
    built: &BuiltModel,
    data: &SnrData,
    budget: usize,
    seed: u64,
    resume: Option<TrainedModel<f32>>,
) -> Result<TrainedModel<f32>> {
    let (tr, va) = data.train_valid(built.input)?;
    let budget = budget.min(built.max_epochs);
    Ok(train(&built.spec, TrainData { train: &tr, valid: &va }, &built.learn, budget, seed, resume)?)
}

pub fn trial_seed(train_seed: u64, id: usize) -> u64 {
    seed::derive(train_seed, &[TRIAL_TAG, id as u64])
}

/// Hyperband evaluator backed by real training on one SNR's data.
pub struct TrainingEvaluator<'a> {
    pub data: &'a SnrData,
    pub train_seed: u64,
}

impl Evaluator for TrainingEvaluator<'_> {
    type State = TrainedModel<f32>;

    fn evaluate(
        &self,
        id: usize,
        config: &HyperConfig,
        budget: usize,
        resume: Option<TrainedModel<f32>>,
    ) -> std::result::Result<Evaluation<TrainedModel<f32>>, TrialFailure> {
        let built = build_model(config, NUM_CLASSES).map_err(|e| TrialFailure::new(e.to_string(), None))?;
        match train_built(&built, self.data, budget, trial_seed(self.train_seed, id), resume) {
            Ok(model) => Ok(Evaluation {
                loss: model.validation_loss().unwrap_or(f64::NAN),
                epochs: model.epochs_consumed(),
                state: model,
            }),
            Err(CoreError::Nn(NnError::NonFiniteLoss { epoch, batch, loss })) => Err(TrialFailure::new(
                format!("non-finite loss {loss} at epoch {epoch}, batch {batch}"),
                Some(epoch),
            )),
            Err(e) => Err(TrialFailure::new(e.to_string(), None)),
        }
    }
}

/// A trained model together with the settings needed to feed it.
#[derive(Debug, Clone)]
pub struct ModelRun {
    pub model_id: String,
    pub train_snr_db: f64,
    pub config: HyperConfig,
    pub built: BuiltModel,
    pub model: TrainedModel<f32>,
    pub test: Metrics,
}

impl ModelRun {
    /// Rebuilds a run from a saved model and the config it was built from.
    pub fn restore(model_id: &str, config: &HyperConfig, model: TrainedModel<f32>, data: &SnrData) -> Result<Self> {
        let built = build_model(config, NUM_CLASSES)?;
        if model.spec() != &built.spec {
            return Err(CoreError::InvalidConfig(format!(
                "checkpoint architecture {} does not match config {}",
                model.spec().summary(),
                built.spec.summary()
            )));
        }
        let test = evaluate(&model.network, &data.tensors(Part::Test, built.input)?)?;
        Ok(Self {
            model_id: model_id.into(),
            train_snr_db: data.snr_db,
            config: config.clone(),
            built,
            model,
            test,
        })
    }

    pub fn evaluate_on(&self, data: &SnrData) -> Result<Metrics> {
        let set = data.tensors(Part::Test, self.built.input)?;
        Ok(evaluate(&self.model.network, &set)?)
    }

    pub fn row(&self, test_snr_db: f64, m: &Metrics) -> ResultRow {
        ResultRow {
            model: self.model_id.clone(),
            train_snr_db: self.train_snr_db,
            test_snr_db,
            n: self.built.input.n,
            w: self.built.input.w,
            accuracy: m.accuracy,
            loss: m.loss,
            arch: self.built.spec.summary(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub train_snr_db: f64,
    pub test_snr_db: f64,
    pub n: usize,
    pub w: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub arch: String,
}

/// Output of one per-SNR Hyperband search.
#[derive(Debug, Clone)]
pub struct OcnnRun {
    pub run: ModelRun,
    pub recommendation: Recommendation,
    pub log: Vec<LogRecord>,
    pub rejected_samples: usize,
}

/// Hyperband on one SNR point, then the winner trained on to the full budget
/// `R` (resuming its search state, or retraining from its seed, which is
/// equivalent) and scored on the test split.
pub fn hyperopt_at(plan: &ExperimentPlan, data: &SnrData) -> Result<OcnnRun> {
    let space = plan.space()?;
    let s = plan.search;
    let evaluator = TrainingEvaluator {
        data,
        train_seed: plan.train_seed,
    };
    let outcome = hyperband(&space, s.max_budget, s.eta, &evaluator, s.seed)?;
    let recommendation = Recommendation::from_outcome(&outcome, s.seed, s.max_budget, s.eta);
    let config = outcome.best.config.clone();
    let built = build_model(&config, NUM_CLASSES)?;
    let model = train_built(
        &built,
        data,
        s.max_budget,
        trial_seed(plan.train_seed, outcome.best.id),
        outcome.best_state,
    )?;
    let test = evaluate(&model.network, &data.tensors(Part::Test, built.input)?)?;
    Ok(OcnnRun {
        run: ModelRun {
            model_id: "ocnn".into(),
            train_snr_db: data.snr_db,
            config,
            built,
            model,
            test,
        },
        recommendation,
        log: outcome.log,
        rejected_samples: outcome.rejected_samples,
    })
}

pub fn run_hyperopt_per_snr(plan: &ExperimentPlan, data: &[SnrData]) -> Result<Vec<OcnnRun>> {
    data.iter().map(|d| hyperopt_at(plan, d)).collect()
}

/// Trains `config` to `max_epochs` (early stopping as configured).
pub fn train_config(
    model_id: &str,
    config: &HyperConfig,
    data: &SnrData,
    max_epochs: usize,
    seed: u64,
) -> Result<ModelRun> {
    let built = build_model(config, NUM_CLASSES)?;
    let model = train_built(&built, data, max_epochs, seed, None)?;
    let test = evaluate(&model.network, &data.tensors(Part::Test, built.input)?)?;
    Ok(ModelRun {
        model_id: model_id.into(),
        train_snr_db: data.snr_db,
        config: config.clone(),
        built,
        model,
        test,
    })
}

/// BCNN stand-in per `(SNR, n)` with its fixed learning settings.
pub fn run_bcnn_sweep(plan: &ExperimentPlan, data: &[SnrData], n_values: &[usize]) -> Result<Vec<ModelRun>> {
    let mut runs = Vec::new();
    for d in data {
        for &n in n_values {
            let seed = seed::derive(plan.train_seed, &[BCNN_TAG, n as u64]);
            runs.push(train_config(&format!("bcnn_n{n}"), &bcnn_config(n)?, d, plan.bcnn_max_epochs, seed)?);
        }
    }
    Ok(runs)
}

/// The same architecture with normalization switched to `normalize`, trained
/// from scratch to the search budget.
pub fn train_twin(plan: &ExperimentPlan, ocnn: &ModelRun, data: &SnrData, normalize: bool) -> Result<ModelRun> {
    let mut config = ocnn.config.clone();
    config.normalize = normalize;
    let id = if normalize { "ocnn_norm" } else { "ocnn_unnorm" };
    let seed = seed::derive(plan.train_seed, &[TWIN_TAG, normalize as u64]);
    train_config(id, &config, data, plan.search.max_budget, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationCell {
    pub train_snr_db: f64,
    pub test_snr_db: f64,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationSummary {
    pub train_snr_db: f64,
    /// Mean over every other SNR; `None` without any.
    pub all_snr_accuracy: Option<f64>,
    /// Mean over the adjacent SNRs; `None` without any.
    pub adjacent_snr_accuracy: Option<f64>,
    pub adjacent_snrs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationMatrix {
    pub normalize: bool,
    pub cells: Vec<GeneralizationCell>,
    pub summaries: Vec<GeneralizationSummary>,
}

/// Test SNRs adjacent to `train` (within 5 dB, excluding itself).
pub fn adjacent_snrs(train: f64, grid: &[f64]) -> Vec<f64> {
    grid.iter()
        .copied()
        .filter(|&t| t != train && (t - train).abs() <= ADJACENT_DB + 1e-9)
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Scores every model on every other SNR's test split. `models` are the
/// per-train-SNR models of one normalization setting.
pub fn run_generalization_matrix(models: &[ModelRun], data: &[SnrData], normalize: bool) -> Result<GeneralizationMatrix> {
    let grid: Vec<f64> = data.iter().map(|d| d.snr_db).collect();
    let mut cells = Vec::new();
    let mut summaries = Vec::new();
    for m in models {
        let mut row = Vec::new();
        for d in data.iter().filter(|d| d.snr_db != m.train_snr_db) {
            let metrics = m.evaluate_on(d)?;
            row.push(GeneralizationCell {
                train_snr_db: m.train_snr_db,
                test_snr_db: d.snr_db,
                accuracy: metrics.accuracy,
                loss: metrics.loss,
            });
        }
        let adjacent = adjacent_snrs(m.train_snr_db, &grid);
        summaries.push(GeneralizationSummary {
            train_snr_db: m.train_snr_db,
            all_snr_accuracy: mean(row.iter().map(|c| c.accuracy)),
            adjacent_snr_accuracy: mean(
                row.iter()
                    .filter(|c| adjacent.contains(&c.test_snr_db))
                    .map(|c| c.accuracy),
            ),
            adjacent_snrs: adjacent,
        });
        cells.extend(row);
    }
    Ok(GeneralizationMatrix {
        normalize,
        cells,
        summaries,
    })
}

/// Content hashes keyed by SNR tag.
pub fn dataset_hashes(data: &[SnrData]) -> BTreeMap<String, String> {
    data.iter()
        .map(|d| (snr_tag(d.snr_db), d.dataset.content_hash.clone()))
        .collect()
}
