use std::fmt;

use num_complex::{Complex32, Complex64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use super::waveform::ClassId;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub num_receivers: usize,
    pub num_taps: usize,
    /// Power drop per tap delay in dB.
    pub tap_decay_db: f64,
    pub seed: u64,
    /// When false all receivers share one phase per tap.
    pub per_receiver_phase: bool,
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_receivers == 0 || self.num_receivers > u16::MAX as usize {
            return Err(CoreError::InvalidChannel(format!(
                "num_receivers {} out of range",
                self.num_receivers
            )));
        }
        if self.num_taps == 0 {
            return Err(CoreError::InvalidChannel("num_taps must be positive".into()));
        }
        if !self.tap_decay_db.is_finite() {
            return Err(CoreError::InvalidChannel("tap_decay_db must be finite".into()));
        }
        Ok(())
    }
}

/// Target SNR; `Noiseless` disables noise instead of encoding it as infinity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Snr {
    Db(f64),
    Noiseless,
}

impl Snr {
    pub fn linear(self) -> Option<f64> {
        match self {
            Snr::Db(db) => Some(10f64.powf(db / 10.0)),
            Snr::Noiseless => None,
        }
    }

    pub fn db(self) -> Option<f64> {
        match self {
            Snr::Db(db) => Some(db),
            Snr::Noiseless => None,
        }
    }
}

impl fmt::Display for Snr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Snr::Db(db) => write!(f, "{db} dB"),
            Snr::Noiseless => f.write_str("noiseless"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSeeds {
    pub payload: Option<u64>,
    pub channel: Option<u64>,
    pub noise: Option<u64>,
}

/// Aligned baseband streams from `N` receivers of one transmission.
#[derive(Debug, Clone, PartialEq)]
pub struct IQStreamSet {
    pub streams: Vec<Vec<Complex32>>,
    pub class_id: ClassId,
    pub snr: Snr,
    pub seeds: StreamSeeds,
}

impl IQStreamSet {
    pub fn num_receivers(&self) -> usize {
        self.streams.len()
    }

    pub fn stream_len(&self) -> usize {
        self.streams.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.stream_len();
        if len == 0 || self.streams.iter().any(|s| s.len() != len) {
            return Err(CoreError::InvalidDataset(
                "stream set needs equal, non-zero stream lengths".into(),
            ));
        }
        Ok(())
    }
}

/// Normalized exponential power-delay profile.
pub fn tap_profile(num_taps: usize, decay_db: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..num_taps).map(|l| 10f64.powf(-decay_db * l as f64 / 10.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / total).collect()
}

/// Per-receiver tap vectors: Rayleigh magnitudes with mean power following
/// the delay profile, uniform phases.
pub fn draw_taps(ch: &ChannelParams) -> Result<Vec<Vec<Complex64>>> {
    ch.validate()?;
    let profile = tap_profile(ch.num_taps, ch.tap_decay_db);
    let mut rng = ChaCha8Rng::seed_from_u64(ch.seed);
    let shared: Vec<f64> = (0..ch.num_taps)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    Ok((0..ch.num_receivers)
        .map(|_| {
            profile
                .iter()
                .zip(&shared)
                .map(|(&p, &common)| {
                    let e: f64 = Exp1.sample(&mut rng);
                    let magnitude = (p * e).sqrt();
                    let phase = if ch.per_receiver_phase {
                        rng.random_range(0.0..std::f64::consts::TAU)
                    } else {
                        common
                    };
                    Complex64::from_polar(magnitude, phase)
                })
                .collect()
        })
        .collect())
}

/// Causal FIR filtering truncated to the input length.
pub fn convolve_taps(signal: &[Complex32], taps: &[Complex64]) -> Vec<Complex32> {
    let taps: Vec<Complex32> = taps
        .iter()
        .map(|t| Complex32::new(t.re as f32, t.im as f32))
        .collect();
    (0..signal.len())
        .map(|t| {
            taps.iter()
                .take(t + 1)
                .enumerate()
                .map(|(l, h)| h * signal[t - l])
                .sum()
        })
        .collect()
}

/// Passes one transmitted signal through explicit per-receiver taps.
pub fn apply_taps(signal: &[Complex32], taps: &[Vec<Complex64>], class_id: ClassId) -> Result<IQStreamSet> {
    if signal.is_empty() {
        return Err(CoreError::InvalidDataset("empty signal".into()));
    }
    Ok(IQStreamSet {
        streams: taps.iter().map(|h| convolve_taps(signal, h)).collect(),
        class_id,
        snr: Snr::Noiseless,
        seeds: StreamSeeds::default(),
    })
}

pub fn apply_simo_channel(signal: &[Complex32], ch: &ChannelParams, class_id: ClassId) -> Result<IQStreamSet> {
    let mut set = apply_taps(signal, &draw_taps(ch)?, class_id)?;
    set.seeds.channel = Some(ch.seed);
    Ok(set)
}

/// Adds complex white Gaussian noise with one variance for all receivers,
/// chosen so the receiver-averaged SNR equals the target.
pub fn add_awgn(set: &IQStreamSet, snr: Snr, seed: u64) -> Result<IQStreamSet> {
    set.validate()?;
    let mut out = set.clone();
    out.snr = snr;
    let Some(lin) = snr.linear() else {
        return Ok(out);
    };
    let power = set.streams.iter().map(|s| super::mean_power(s)).sum::<f64>() / set.num_receivers() as f64;
    let sigma = (power / lin / 2.0).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for stream in &mut out.streams {
        for z in stream.iter_mut() {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            *z += Complex32::new((sigma * re) as f32, (sigma * im) as f32);
        }
    }
    out.seeds.noise = Some(seed);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{generate_waveform, mean_power};

    fn signal() -> Vec<Complex32> {
        generate_waveform(&ClassId::WifiLike.preset(11)).unwrap()
    }

    #[test]
    fn identity_and_scalar_channels() {
        let x = signal();
        let one = apply_taps(&x, &[vec![Complex64::new(1.0, 0.0)]], ClassId::WifiLike).unwrap();
        assert_eq!(one.streams[0], x);
        let flip = apply_taps(&x, &[vec![Complex64::from_polar(2.0, std::f64::consts::PI)]], ClassId::WifiLike).unwrap();
        // cos(pi) in f32 is exactly -1 and sin(pi) rounds to about -8.7e-8.
        for (y, v) in flip.streams[0].iter().zip(&x) {
            assert!((y - (-2.0 * v)).norm() < 1e-6);
        }
    }

    #[test]
    fn flat_fading_is_scalar() {
        let x = signal();
        let ch = ChannelParams {
            num_receivers: 3,
            num_taps: 1,
            tap_decay_db: 3.0,
            seed: 5,
            per_receiver_phase: true,
        };
        let taps = draw_taps(&ch).unwrap();
        let set = apply_simo_channel(&x, &ch, ClassId::WifiLike).unwrap();
        for (h, y) in taps.iter().zip(&set.streams) {
            let h = Complex32::new(h[0].re as f32, h[0].im as f32);
            for (yt, xt) in y.iter().zip(&x) {
                assert_eq!(*yt, h * xt);
            }
        }
    }

    #[test]
    fn fir_matches_direct_sum() {
        let x: Vec<Complex32> = (0..9).map(|i| Complex32::new(i as f32, 1.0)).collect();
        let h = vec![Complex64::new(0.5, 0.0), Complex64::new(0.0, 1.0), Complex64::new(-0.25, 0.0)];
        let y = convolve_taps(&x, &h);
        assert_eq!(y.len(), x.len());
        assert_eq!(y[0], Complex32::new(0.5, 0.0) * x[0]);
        let want = Complex32::new(0.5, 0.0) * x[5] + Complex32::new(0.0, 1.0) * x[4] + Complex32::new(-0.25, 0.0) * x[3];
        assert!((y[5] - want).norm() < 1e-6);
    }

    #[test]
    fn profile_is_normalized_and_decays() {
        let p = tap_profile(5, 3.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(tap_profile(1, 10.0), vec![1.0]);
    }

    #[test]
    fn mean_tap_energy_is_one() {
        let mut total = 0.0;
        let draws = 4000;
        for seed in 0..draws {
            let ch = ChannelParams {
                num_receivers: 1,
                num_taps: 4,
                tap_decay_db: 2.0,
                seed,
                per_receiver_phase: true,
            };
            total += draw_taps(&ch).unwrap()[0].iter().map(|h| h.norm_sqr()).sum::<f64>();
        }
        assert!((total / draws as f64 - 1.0).abs() < 0.05);
    }

    #[test]
    fn shared_phase_when_not_per_receiver() {
        let ch = ChannelParams {
            num_receivers: 4,
            num_taps: 3,
            tap_decay_db: 1.0,
            seed: 2,
            per_receiver_phase: false,
        };
        let taps = draw_taps(&ch).unwrap();
        for l in 0..3 {
            let phase = taps[0][l].arg();
            assert!(taps.iter().all(|h| (h[l].arg() - phase).abs() < 1e-12));
        }
    }

    #[test]
    fn noiseless_sentinel_is_identity() {
        let set = apply_taps(&signal(), &[vec![Complex64::new(1.0, 0.0)]], ClassId::WifiLike).unwrap();
        let out = add_awgn(&set, Snr::Noiseless, 9).unwrap();
        assert_eq!(out.streams, set.streams);
        assert_eq!(out.seeds.noise, None);
    }

    #[test]
    fn zero_db_noise_has_unit_variance() {
        let x = vec![Complex32::new(1.0, 0.0); 50_000];
        let set = apply_taps(&x, &[vec![Complex64::new(1.0, 0.0)]], ClassId::LteLike).unwrap();
        let noisy = add_awgn(&set, Snr::Db(0.0), 4).unwrap();
        let noise: Vec<Complex32> = noisy.streams[0].iter().zip(&x).map(|(y, s)| y - s).collect();
        let mean = noise.iter().sum::<Complex32>() / noise.len() as f32;
        let var = noise.iter().map(|n| (n - mean).norm_sqr() as f64).sum::<f64>() / (noise.len() - 1) as f64;
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
        assert_eq!(add_awgn(&set, Snr::Db(0.0), 4).unwrap(), noisy);
        assert_ne!(add_awgn(&set, Snr::Db(0.0), 5).unwrap(), noisy);
        assert!((mean_power(&x) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn snr_serializes_with_sentinel() {
        assert_eq!(serde_json::to_string(&Snr::Noiseless).unwrap(), "\"noiseless\"");
        assert_eq!(serde_json::to_string(&Snr::Db(-5.0)).unwrap(), "{\"db\":-5.0}");
    }
}
