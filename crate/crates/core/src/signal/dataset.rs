use std::fs;
use std::path::Path;

use num_complex::Complex32;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::channel::{add_awgn, apply_simo_channel, ChannelParams, IQStreamSet, Snr, StreamSeeds};
use super::waveform::{generate_waveform, ClassId};
use crate::error::{CoreError, Result};
use iqband_nn::seed;

pub const IQDS_MAGIC: &[u8; 4] = b"IQDS";
pub const IQDS_VERSION: u16 = 1;
const MANIFEST_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 2 + 2 + 8;

const PAYLOAD_TAG: u64 = 1;
const CHANNEL_TAG: u64 = 2;
const NOISE_TAG: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelTemplate {
    pub num_receivers: usize,
    pub num_taps: usize,
    pub tap_decay_db: f64,
    pub per_receiver_phase: bool,
}

impl ChannelTemplate {
    pub fn with_seed(&self, seed: u64) -> ChannelParams {
        ChannelParams {
            num_receivers: self.num_receivers,
            num_taps: self.num_taps,
            tap_decay_db: self.tap_decay_db,
            seed,
            per_receiver_phase: self.per_receiver_phase,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: Vec<ClassId>,
    pub waveforms_per_class: usize,
    /// Every waveform is generated long enough and cut to this length.
    pub samples_per_stream: usize,
    pub channel: ChannelTemplate,
    pub snr: Snr,
    pub master_seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::InvalidDataset(m.into()));
        if self.classes.is_empty() {
            return bad("at least one class is required");
        }
        let mut sorted = self.classes.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.classes.len() {
            return bad("classes must be distinct");
        }
        if self.waveforms_per_class == 0 {
            return bad("waveforms_per_class must be at least 1");
        }
        if self.samples_per_stream == 0 {
            return bad("samples_per_stream must be at least 1");
        }
        self.channel.with_seed(0).validate()
    }

    /// Payload, channel and noise seeds of waveform `j` of `class`.
    pub fn seeds_for(&self, class: ClassId, j: usize) -> StreamSeeds {
        let path = |tag: u64| seed::derive(self.master_seed, &[tag, class.index() as u64, j as u64]);
        StreamSeeds {
            payload: Some(path(PAYLOAD_TAG)),
            channel: Some(path(CHANNEL_TAG)),
            noise: matches!(self.snr, Snr::Db(_)).then(|| path(NOISE_TAG)),
        }
    }
}

/// Generated stream sets in class-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub spec: DatasetSpec,
    pub sets: Vec<IQStreamSet>,
    pub content_hash: String,
}

impl RawDataset {
    pub fn labels(&self) -> Vec<usize> {
        self.sets.iter().map(|s| s.class_id.index()).collect()
    }

    pub fn of_class(&self, class: ClassId) -> impl Iterator<Item = &IQStreamSet> {
        self.sets.iter().filter(move |s| s.class_id == class)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format: "IQDS".into(),
            version: MANIFEST_VERSION,
            spec: self.spec.clone(),
            stream_length: self.spec.samples_per_stream,
            classes: self
                .spec
                .classes
                .iter()
                .map(|&c| ClassManifest {
                    class_id: c,
                    count: self.of_class(c).count(),
                    shard: shard_name(c),
                    seeds: self.of_class(c).map(|s| s.seeds).collect(),
                })
                .collect(),
            content_hash: self.content_hash.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassManifest {
    pub class_id: ClassId,
    pub count: usize,
    pub shard: String,
    pub seeds: Vec<StreamSeeds>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub spec: DatasetSpec,
    pub stream_length: usize,
    pub classes: Vec<ClassManifest>,
    /// SHA-256 over all class shards in class order.
    pub content_hash: String,
}

pub fn shard_name(class: ClassId) -> String {
    format!("{}.iqds", class.name())
}

fn synthesize(spec: &DatasetSpec, class: ClassId, j: usize) -> Result<IQStreamSet> {
    let seeds = spec.seeds_for(class, j);
    let mut params = class.preset(seeds.payload.expect("payload seed"));
    params.num_symbols = params.symbols_to_cover(spec.samples_per_stream);
    let mut signal = generate_waveform(&params)?;
    signal.truncate(spec.samples_per_stream);
    let channel = spec.channel.with_seed(seeds.channel.expect("channel seed"));
    let faded = apply_simo_channel(&signal, &channel, class)?;
    let mut set = add_awgn(&faded, spec.snr, seeds.noise.unwrap_or(0))?;
    set.seeds = seeds;
    Ok(set)
}

/// Generates `waveforms_per_class` stream sets per class with seeds derived
/// from the master seed.
pub fn build_dataset(spec: &DatasetSpec) -> Result<RawDataset> {
    spec.validate()?;
    let jobs: Vec<(ClassId, usize)> = spec
        .classes
        .iter()
        .flat_map(|&c| (0..spec.waveforms_per_class).map(move |j| (c, j)))
        .collect();
    let sets = jobs
        .par_iter()
        .map(|&(c, j)| synthesize(spec, c, j))
        .collect::<Result<Vec<_>>>()?;
    let content_hash = content_hash(&spec.classes, &sets);
    Ok(RawDataset {
        spec: spec.clone(),
        sets,
        content_hash,
    })
}

fn content_hash(classes: &[ClassId], sets: &[IQStreamSet]) -> String {
    let mut hasher = Sha256::new();
    for &c in classes {
        let members: Vec<&IQStreamSet> = sets.iter().filter(|s| s.class_id == c).collect();
        hasher.update(encode_shard(&members));
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// IQDS shard: header (magic, version, N, stream length) followed by the
/// stream sets back to back, each as N streams of interleaved `f32` I/Q.
pub fn encode_shard(sets: &[&IQStreamSet]) -> Vec<u8> {
    let n = sets.first().map_or(0, |s| s.num_receivers());
    let len = sets.first().map_or(0, |s| s.stream_len());
    let mut out = Vec::with_capacity(HEADER_LEN + sets.len() * n * len * 8);
    out.extend_from_slice(IQDS_MAGIC);
    out.extend_from_slice(&IQDS_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u16).to_le_bytes());
    out.extend_from_slice(&(len as u64).to_le_bytes());
    for set in sets {
        for stream in &set.streams {
            for z in stream {
                out.extend_from_slice(&z.re.to_le_bytes());
                out.extend_from_slice(&z.im.to_le_bytes());
            }
        }
    }
    out
}

/// Decodes a shard into per-set stream lists.
pub fn decode_shard(bytes: &[u8]) -> Result<Vec<Vec<Vec<Complex32>>>> {
    let err = |d: String| CoreError::Format {
        what: "IQDS shard".into(),
        detail: d,
    };
    if bytes.len() < HEADER_LEN || &bytes[..4] != IQDS_MAGIC {
        return Err(err("missing IQDS magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != IQDS_VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let n = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[HEADER_LEN..];
    let set_bytes = n * len * 8;
    if set_bytes == 0 {
        return if body.is_empty() { Ok(Vec::new()) } else { Err(err("trailing bytes".into())) };
    }
    if !body.len().is_multiple_of(set_bytes) {
        return Err(err(format!("body of {} bytes is not whole stream sets", body.len())));
    }
    Ok(body
        .chunks_exact(set_bytes)
        .map(|set| {
            set.chunks_exact(len * 8)
                .map(|stream| {
                    stream
                        .chunks_exact(8)
                        .map(|c| {
                            Complex32::new(
                                f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                                f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
                            )
                        })
                        .collect()
                })
                .collect()
        })
        .collect())
}

/// Writes `manifest.json` and one shard per class into `dir`.
pub fn write_dataset(ds: &RawDataset, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = ds.manifest();
    for &c in &ds.spec.classes {
        let members: Vec<&IQStreamSet> = ds.of_class(c).collect();
        fs::write(dir.join(shard_name(c)), encode_shard(&members))?;
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Reads a dataset directory and checks its content hash.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<RawDataset> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let mut sets = Vec::new();
    for cm in &manifest.classes {
        let decoded = decode_shard(&fs::read(dir.join(&cm.shard))?)?;
        if decoded.len() != cm.count || cm.seeds.len() != cm.count {
            return Err(CoreError::Format {
                what: cm.shard.clone(),
                detail: format!("expected {} stream sets, found {}", cm.count, decoded.len()),
            });
        }
        for (streams, seeds) in decoded.into_iter().zip(&cm.seeds) {
            sets.push(IQStreamSet {
                streams,
                class_id: cm.class_id,
                snr: manifest.spec.snr,
                seeds: *seeds,
            });
        }
    }
    let actual = content_hash(&manifest.spec.classes, &sets);
    if actual != manifest.content_hash {
        return Err(CoreError::HashMismatch {
            expected: manifest.content_hash,
            actual,
        });
    }
    Ok(RawDataset {
        spec: manifest.spec,
        sets,
        content_hash: actual,
    })
}
