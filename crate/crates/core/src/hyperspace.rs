//! The Hyper-CNN configuration space: domains, sampling, shape feasibility
//! and compilation of a configuration into a model, input and learning
//! settings.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::error::{CoreError, Result};
use crate::preprocess::{InputSettings, NormScope};
use iqband_nn::{Activation, Layer, LearnConfig, ModelSpec, OptimizerKind, Shape3};

pub const CONV_BLOCKS: [usize; 3] = [1, 2, 3];
pub const FILTERS: [usize; 10] = [16, 32, 48, 64, 80, 96, 112, 128, 144, 160];
pub const FILTER_LENGTHS: [usize; 10] = FILTERS;
pub const POOL_SIZES: [usize; 8] = [5, 15, 25, 35, 45, 55, 65, 75];
pub const POOL_STRIDES: [usize; 7] = [5, 15, 25, 35, 45, 55, 60];
pub const FC_LAYERS: [usize; 4] = [1, 2, 3, 4];
pub const NEURONS: [usize; 10] = [10, 20, 30, 40, 50, 60, 70, 80, 90, 100];
pub const ACTIVATIONS: [Activation; 3] = [Activation::Relu, Activation::Tanh, Activation::Sigmoid];
pub const DROPOUTS: [f64; 5] = [0.0, 0.15, 0.3, 0.45, 0.6];
pub const WINDOWS: [usize; 13] = [128, 160, 192, 224, 256, 288, 320, 352, 384, 416, 448, 480, 512];
pub const OPTIMIZERS: [OptimizerKind; 3] = OptimizerKind::ALL;
pub const LEARNING_RATES: [f64; 4] = [0.01, 1e-3, 1e-4, 1e-5];
pub const BATCH_SIZES: [usize; 10] = [32, 64, 96, 128, 160, 192, 224, 256, 288, 320];
pub const BOOLS: [bool; 2] = [true, false];

/// Width of the first convolution's filters; later blocks see width 1.
pub const FIRST_FILTER_WIDTH: usize = 2;
pub const NUM_CLASSES: usize = 3;
pub const MAX_EPOCHS: usize = 100;
pub const PATIENCE: usize = 6;
pub const SAMPLE_CAP: usize = 1000;
pub const CONFIG_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub filters: usize,
    pub filter_len: usize,
    pub pool: usize,
    pub pool_stride: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcLayer {
    pub neurons: usize,
    pub dropout: f64,
}

/// One point of the configuration space.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperConfig {
    pub conv_blocks: Vec<ConvBlock>,
    pub fc_layers: Vec<FcLayer>,
    pub activation: Activation,
    pub window: usize,
    pub normalize: bool,
    pub streams: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub early_stopping: bool,
    pub batch_size: usize,
    pub shuffle: bool,
}

/// The space for `num_streams` available receivers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperSpace {
    pub num_streams: usize,
}

impl HyperSpace {
    pub fn new(num_streams: usize) -> Result<Self> {
        if num_streams == 0 {
            return Err(CoreError::InvalidConfig("the space needs at least one stream".into()));
        }
        Ok(Self { num_streams })
    }

    pub fn streams(&self) -> Vec<usize> {
        (1..=self.num_streams).collect()
    }

    /// Number of distinct configurations, counting per-block and per-layer
    /// choices separately.
    pub fn cardinality(&self) -> u128 {
        let block = (FILTERS.len() * FILTER_LENGTHS.len() * POOL_SIZES.len() * POOL_STRIDES.len() * DROPOUTS.len()) as u128;
        let layer = (NEURONS.len() * DROPOUTS.len()) as u128;
        let fe: u128 = CONV_BLOCKS.iter().map(|&b| block.pow(b as u32)).sum();
        let cl: u128 = FC_LAYERS.iter().map(|&f| layer.pow(f as u32)).sum();
        let rest = (ACTIVATIONS.len()
            * WINDOWS.len()
            * BOOLS.len()
            * self.num_streams
            * OPTIMIZERS.len()
            * LEARNING_RATES.len()
            * BOOLS.len()
            * BATCH_SIZES.len()
            * BOOLS.len()) as u128;
        fe * cl * rest
    }

    /// One independent uniform draw per hyperparameter, feasible or not.
    pub fn sample_unchecked<R: Rng + ?Sized>(&self, rng: &mut R) -> HyperConfig {
        let blocks = *CONV_BLOCKS.choose(rng).expect("non-empty");
        let conv_blocks = (0..blocks)
            .map(|_| ConvBlock {
                filters: *FILTERS.choose(rng).expect("non-empty"),
                filter_len: *FILTER_LENGTHS.choose(rng).expect("non-empty"),
                pool: *POOL_SIZES.choose(rng).expect("non-empty"),
                pool_stride: *POOL_STRIDES.choose(rng).expect("non-empty"),
                dropout: *DROPOUTS.choose(rng).expect("non-empty"),
            })
            .collect();
        let layers = *FC_LAYERS.choose(rng).expect("non-empty");
        let fc_layers = (0..layers)
            .map(|_| FcLayer {
                neurons: *NEURONS.choose(rng).expect("non-empty"),
                dropout: *DROPOUTS.choose(rng).expect("non-empty"),
            })
            .collect();
        HyperConfig {
            conv_blocks,
            fc_layers,
            activation: *ACTIVATIONS.choose(rng).expect("non-empty"),
            window: *WINDOWS.choose(rng).expect("non-empty"),
            normalize: rng.random_bool(0.5),
            streams: rng.random_range(1..=self.num_streams),
            optimizer: *OPTIMIZERS.choose(rng).expect("non-empty"),
            learning_rate: *LEARNING_RATES.choose(rng).expect("non-empty"),
            early_stopping: rng.random_bool(0.5),
            batch_size: *BATCH_SIZES.choose(rng).expect("non-empty"),
            shuffle: rng.random_bool(0.5),
        }
    }

    /// Rejection-samples a shape-feasible configuration.
    pub fn sample_config<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Sampled> {
        let mut failures: BTreeMap<String, usize> = BTreeMap::new();
        for rejected in 0..SAMPLE_CAP {
            let config = self.sample_unchecked(rng);
            match validate_config(&config) {
                Feasibility::Feasible { .. } => return Ok(Sampled { config, rejected }),
                infeasible => *failures.entry(infeasible.to_string()).or_default() += 1,
            }
        }
        Err(CoreError::SamplingExhausted {
            attempts: SAMPLE_CAP,
            axes: failures
                .iter()
                .map(|(k, v)| format!("{k} x{v}"))
                .collect::<Vec<_>>()
                .join(", "),
        })
    }

    /// Checks that every value lies in its domain.
    pub fn contains(&self, c: &HyperConfig) -> Result<()> {
        let bad = |what: &str| Err(CoreError::InvalidConfig(format!("{what} outside its domain")));
        if !CONV_BLOCKS.contains(&c.conv_blocks.len()) {
            return bad("convblock count");
        }
        for b in &c.conv_blocks {
            if !FILTERS.contains(&b.filters) {
                return bad("filters");
            }
            if !FILTER_LENGTHS.contains(&b.filter_len) {
                return bad("filter length");
            }
            if !POOL_SIZES.contains(&b.pool) {
                return bad("pool size");
            }
            if !POOL_STRIDES.contains(&b.pool_stride) {
                return bad("pool stride");
            }
            if !DROPOUTS.contains(&b.dropout) {
                return bad("convblock dropout");
            }
        }
        if !FC_LAYERS.contains(&c.fc_layers.len()) {
            return bad("FC layer count");
        }
        for l in &c.fc_layers {
            if !NEURONS.contains(&l.neurons) {
                return bad("neurons");
            }
            if !DROPOUTS.contains(&l.dropout) {
                return bad("FC dropout");
            }
        }
        if !ACTIVATIONS.contains(&c.activation) {
            return bad("activation");
        }
        if !WINDOWS.contains(&c.window) {
            return bad("window");
        }
        if c.streams == 0 || c.streams > self.num_streams {
            return bad("streams");
        }
        if !LEARNING_RATES.contains(&c.learning_rate) {
            return bad("learning rate");
        }
        if !BATCH_SIZES.contains(&c.batch_size) {
            return bad("batch size");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub config: HyperConfig,
    /// Infeasible draws discarded before this one.
    pub rejected: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Conv,
    Pool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feasibility {
    Feasible {
        /// Time length after the last convblock.
        final_len: usize,
    },
    Infeasible {
        /// 1-based convblock index.
        block: usize,
        stage: Stage,
        /// Input length that was too short.
        len: usize,
    },
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Feasibility::Feasible { .. })
    }
}

impl fmt::Display for Feasibility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Feasibility::Feasible { final_len } => write!(f, "feasible (final length {final_len})"),
            Feasibility::Infeasible { block, stage, .. } => {
                let stage = match stage {
                    Stage::Conv => "conv",
                    Stage::Pool => "pool",
                };
                write!(f, "convblock {block} {stage}")
            }
        }
    }
}

/// Runs the valid-padding shape algebra through every convblock.
pub fn validate_config(c: &HyperConfig) -> Feasibility {
    let mut len = c.window;
    for (i, b) in c.conv_blocks.iter().enumerate() {
        if b.filter_len > len {
            return Feasibility::Infeasible {
                block: i + 1,
                stage: Stage::Conv,
                len,
            };
        }
        len = len - b.filter_len + 1;
        if b.pool > len || b.pool_stride == 0 {
            return Feasibility::Infeasible {
                block: i + 1,
                stage: Stage::Pool,
                len,
            };
        }
        len = (len - b.pool) / b.pool_stride + 1;
    }
    Feasibility::Feasible { final_len: len }
}

/// A compiled configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct BuiltModel {
    pub spec: ModelSpec,
    pub input: InputSettings,
    pub learn: LearnConfig,
    pub max_epochs: usize,
}

/// Convblocks (Conv, Dropout, MaxPool), Flatten, then (Dense, Dropout) per
/// FC layer and a softmax head.
pub fn build_model(c: &HyperConfig, num_classes: usize) -> Result<BuiltModel> {
    if let f @ Feasibility::Infeasible { .. } = validate_config(c) {
        return Err(CoreError::InvalidConfig(format!("infeasible at {f}")));
    }
    if c.streams == 0 {
        return Err(CoreError::InvalidConfig("streams must be at least 1".into()));
    }
    let mut layers = Vec::new();
    for (i, b) in c.conv_blocks.iter().enumerate() {
        layers.push(Layer::Conv {
            filters: b.filters,
            filter_len: b.filter_len,
            filter_width: if i == 0 { FIRST_FILTER_WIDTH } else { 1 },
            activation: c.activation,
        });
        layers.push(Layer::Dropout { rate: b.dropout });
        layers.push(Layer::MaxPool {
            pool: b.pool,
            stride: b.pool_stride,
        });
    }
    layers.push(Layer::Flatten);
    for l in &c.fc_layers {
        layers.push(Layer::Dense {
            units: l.neurons,
            activation: c.activation,
        });
        layers.push(Layer::Dropout { rate: l.dropout });
    }
    layers.push(Layer::Softmax { classes: num_classes });
    let spec = ModelSpec::new(Shape3::new(c.window, 2, c.streams), layers);
    spec.shapes()?;
    let learn = LearnConfig {
        optimizer: c.optimizer,
        learning_rate: c.learning_rate,
        batch_size: c.batch_size,
        shuffle: c.shuffle,
        early_stopping: c.early_stopping,
        patience: PATIENCE,
    };
    learn.validate()?;
    Ok(BuiltModel {
        spec,
        input: InputSettings {
            w: c.window,
            n: c.streams,
            normalize: c.normalize,
            scope: NormScope::PerChannel,
        },
        learn,
        max_epochs: MAX_EPOCHS,
    })
}

/// The fixed single-convolution baseline with `n` input streams.
pub fn bcnn_config(n: usize) -> Result<HyperConfig> {
    if n == 0 {
        return Err(CoreError::InvalidConfig("BCNN needs at least one stream".into()));
    }
    Ok(HyperConfig {
        conv_blocks: vec![ConvBlock {
            filters: 64,
            filter_len: 16,
            pool: 5,
            pool_stride: 5,
            dropout: 0.0,
        }],
        fc_layers: vec![FcLayer {
            neurons: 100,
            dropout: 0.0,
        }],
        activation: Activation::Relu,
        window: 512,
        normalize: true,
        streams: n,
        optimizer: OptimizerKind::Adam,
        learning_rate: 1e-4,
        early_stopping: true,
        batch_size: 128,
        shuffle: true,
    })
}

impl HyperConfig {
    /// Table-row style description: `n, w, convblocks, FC layers`.
    pub fn row(&self) -> (usize, usize, usize, usize) {
        (self.streams, self.window, self.conv_blocks.len(), self.fc_layers.len())
    }

    /// Flat, versioned key-value form with stable key names.
    pub fn to_flat(&self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("version".into(), CONFIG_VERSION.into());
        m.insert("convblocks".into(), self.conv_blocks.len().into());
        for (i, b) in self.conv_blocks.iter().enumerate() {
            let k = |f: &str| format!("convblock{}.{f}", i + 1);
            m.insert(k("filters"), b.filters.into());
            m.insert(k("filter_len"), b.filter_len.into());
            m.insert(k("pool_size"), b.pool.into());
            m.insert(k("pool_stride"), b.pool_stride.into());
            m.insert(k("dropout"), b.dropout.into());
        }
        m.insert("fc_layers".into(), self.fc_layers.len().into());
        for (i, l) in self.fc_layers.iter().enumerate() {
            m.insert(format!("fc{}.neurons", i + 1), l.neurons.into());
            m.insert(format!("fc{}.dropout", i + 1), l.dropout.into());
        }
        m.insert("activation".into(), self.activation.name().into());
        m.insert("window".into(), self.window.into());
        m.insert("normalize".into(), self.normalize.into());
        m.insert("streams".into(), self.streams.into());
        m.insert("optimizer".into(), self.optimizer.name().into());
        m.insert("learning_rate".into(), self.learning_rate.into());
        m.insert("early_stopping".into(), self.early_stopping.into());
        m.insert("batch_size".into(), self.batch_size.into());
        m.insert("shuffle".into(), self.shuffle.into());
        m
    }

    pub fn from_flat(m: &Map<String, Value>) -> Result<Self> {
        let missing = |k: &str| CoreError::InvalidConfig(format!("missing or mistyped key {k:?}"));
        let uint = |k: &str| m.get(k).and_then(Value::as_u64).map(|v| v as usize).ok_or_else(|| missing(k));
        let float = |k: &str| m.get(k).and_then(Value::as_f64).ok_or_else(|| missing(k));
        let boolean = |k: &str| m.get(k).and_then(Value::as_bool).ok_or_else(|| missing(k));
        let string = |k: &str| m.get(k).and_then(Value::as_str).ok_or_else(|| missing(k));
        let version = uint("version")? as u64;
        if version != CONFIG_VERSION {
            return Err(CoreError::InvalidConfig(format!("unsupported config version {version}")));
        }
        let conv_blocks = (1..=uint("convblocks")?)
            .map(|i| {
                let k = |f: &str| format!("convblock{i}.{f}");
                Ok(ConvBlock {
                    filters: uint(&k("filters"))?,
                    filter_len: uint(&k("filter_len"))?,
                    pool: uint(&k("pool_size"))?,
                    pool_stride: uint(&k("pool_stride"))?,
                    dropout: float(&k("dropout"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let fc_layers = (1..=uint("fc_layers")?)
            .map(|i| {
                Ok(FcLayer {
                    neurons: uint(&format!("fc{i}.neurons"))?,
                    dropout: float(&format!("fc{i}.dropout"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let activation = match string("activation")? {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            "sigmoid" => Activation::Sigmoid,
            other => return Err(CoreError::InvalidConfig(format!("unknown activation {other:?}"))),
        };
        let optimizer = string("optimizer")?.parse().map_err(CoreError::InvalidConfig)?;
        Ok(HyperConfig {
            conv_blocks,
            fc_layers,
            activation,
            window: uint("window")?,
            normalize: boolean("normalize")?,
            streams: uint("streams")?,
            optimizer,
            learning_rate: float("learning_rate")?,
            early_stopping: boolean("early_stopping")?,
            batch_size: uint("batch_size")?,
            shuffle: boolean("shuffle")?,
        })
    }
}

impl Serialize for HyperConfig {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_flat().serialize(s)
    }
}

impl<'de> Deserialize<'de> for HyperConfig {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = Map::deserialize(d)?;
        HyperConfig::from_flat(&m).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_block(window: usize, filter_len: usize, pool: usize, pool_stride: usize) -> HyperConfig {
        let mut c = bcnn_config(1).unwrap();
        c.window = window;
        c.conv_blocks[0].filter_len = filter_len;
        c.conv_blocks[0].pool = pool;
        c.conv_blocks[0].pool_stride = pool_stride;
        c
    }

    #[test]
    fn feasibility_examples() {
        assert_eq!(validate_config(&one_block(512, 16, 5, 5)), Feasibility::Feasible { final_len: 99 });
        assert_eq!(
            validate_config(&one_block(128, 160, 5, 5)),
            Feasibility::Infeasible { block: 1, stage: Stage::Conv, len: 128 }
        );
        assert_eq!(validate_config(&one_block(224, 16, 75, 60)), Feasibility::Feasible { final_len: 3 });
        assert!(!validate_config(&one_block(128, 112, 75, 5)).is_feasible());
    }

    #[test]
    fn minimal_config_has_seven_layers() {
        let built = build_model(&bcnn_config(3).unwrap(), NUM_CLASSES).unwrap();
        assert_eq!(built.spec.layers.len(), 7);
        assert_eq!(built.spec.input, Shape3::new(512, 2, 3));
        assert_eq!(built.spec.num_classes(), 3);
    }

    #[test]
    fn bcnn_learning_settings() {
        let c = bcnn_config(2).unwrap();
        let b = build_model(&c, NUM_CLASSES).unwrap();
        assert_eq!(b.learn.batch_size, 128);
        assert_eq!(b.learn.learning_rate, 1e-4);
        assert_eq!(b.learn.optimizer, OptimizerKind::Adam);
        assert!(b.learn.early_stopping && b.learn.shuffle);
        assert_eq!(b.learn.patience, 6);
        assert_eq!(b.input.w, 512);
        assert!(b.input.normalize);
        assert_eq!(b.max_epochs, 100);
        assert!(bcnn_config(0).is_err());
    }

    #[test]
    fn two_block_structure() {
        let mut c = bcnn_config(5).unwrap();
        c.window = 448;
        c.conv_blocks.push(ConvBlock { filters: 32, filter_len: 16, pool: 5, pool_stride: 5, dropout: 0.3 });
        let b = build_model(&c, NUM_CLASSES).unwrap();
        let convs: Vec<_> = b.spec.layers.iter().filter(|l| matches!(l, Layer::Conv { .. })).collect();
        assert_eq!(convs.len(), 2);
        assert!(matches!(convs[1], Layer::Conv { filter_width: 1, .. }));
        assert_eq!(b.spec.layers.iter().filter(|l| matches!(l, Layer::Dense { .. })).count(), 1);
        assert_eq!(b.spec.input, Shape3::new(448, 2, 5));
        assert!(matches!(b.spec.layers[1], Layer::Dropout { .. }));
        assert!(matches!(b.spec.layers[2], Layer::MaxPool { .. }));
    }

    #[test]
    fn infeasible_build_is_rejected() {
        assert!(build_model(&one_block(128, 160, 5, 5), NUM_CLASSES).is_err());
    }

    #[test]
    fn sampling_rejects_and_reports() {
        let space = HyperSpace::new(6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rejected = 0;
        for _ in 0..200 {
            let s = space.sample_config(&mut rng).unwrap();
            assert!(validate_config(&s.config).is_feasible());
            space.contains(&s.config).unwrap();
            rejected += s.rejected;
        }
        assert!(rejected > 0);
    }

    #[test]
    fn flat_form_round_trips() {
        let space = HyperSpace::new(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = space.sample_config(&mut rng).unwrap().config;
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains("\"convblock1.filters\""));
        assert_eq!(serde_json::from_str::<HyperConfig>(&text).unwrap(), c);
        let mut m = c.to_flat();
        m.insert("version".into(), 2.into());
        assert!(HyperConfig::from_flat(&m).is_err());
    }

    #[test]
    fn cardinality_counts_repeated_structure() {
        let one = HyperSpace::new(1).unwrap().cardinality();
        let six = HyperSpace::new(6).unwrap().cardinality();
        assert_eq!(six, one * 6);
        let block: u128 = 10 * 10 * 8 * 7 * 5;
        let layer: u128 = 50;
        let rest: u128 = 3 * 13 * 2 * 3 * 4 * 2 * 10 * 2;
        assert_eq!(one, (block + block.pow(2) + block.pow(3)) * (layer + layer.pow(2) + layer.pow(3) + layer.pow(4)) * rest);
    }
}
