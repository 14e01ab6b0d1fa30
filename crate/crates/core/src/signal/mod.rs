//! Surrogate OFDM waveforms, SIMO multipath channels, receiver noise and the
//! on-disk IQDS dataset format.

mod channel;
mod dataset;
mod waveform;

pub use channel::{
    add_awgn, apply_simo_channel, apply_taps, convolve_taps, draw_taps, tap_profile, ChannelParams, IQStreamSet,
    Snr, StreamSeeds,
};
pub use dataset::{
    build_dataset, decode_shard, encode_shard, read_dataset, shard_name, write_dataset, ChannelTemplate,
    ClassManifest, DatasetSpec, Manifest, RawDataset, IQDS_MAGIC, IQDS_VERSION,
};
pub use waveform::{generate_waveform, mean_power, ClassId, WaveformParams};
