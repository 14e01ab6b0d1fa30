use std::fmt;
use std::str::FromStr;

use num_complex::Complex32;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Seed of the fixed preamble training sequence; shared by every waveform.
const PREAMBLE_SEED: u64 = 0x5354_4652_5f50_5245;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClassId {
    #[serde(rename = "A_wifi_like")]
    WifiLike,
    #[serde(rename = "B_lte_like")]
    LteLike,
    #[serde(rename = "C_nr_like")]
    NrLike,
}

impl ClassId {
    pub const ALL: [ClassId; 3] = [ClassId::WifiLike, ClassId::LteLike, ClassId::NrLike];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassId::WifiLike => "A_wifi_like",
            ClassId::LteLike => "B_lte_like",
            ClassId::NrLike => "C_nr_like",
        }
    }

    /// Built-in surrogate preset for this class.
    pub fn preset(self, payload_seed: u64) -> WaveformParams {
        let (fft_size, cp_length, preamble_reps, active_subcarriers, pilot_spacing) = match self {
            ClassId::WifiLike => (64, 16, 10, 52, None),
            ClassId::LteLike => (128, 9, 0, 72, Some(6)),
            ClassId::NrLike => (256, 18, 0, 240, None),
        };
        WaveformParams {
            class_id: self,
            fft_size,
            cp_length,
            preamble_reps,
            qam_order: 64,
            num_symbols: 20,
            payload_seed,
            active_subcarriers,
            pilot_spacing,
        }
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassId {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s) || c.name()[..1].eq_ignore_ascii_case(s))
            .ok_or_else(|| CoreError::InvalidDataset(format!("unknown class {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaveformParams {
    pub class_id: ClassId,
    pub fft_size: usize,
    pub cp_length: usize,
    pub preamble_reps: usize,
    pub qam_order: u32,
    pub num_symbols: usize,
    pub payload_seed: u64,
    /// Occupied subcarriers, split evenly around a nulled DC bin.
    pub active_subcarriers: usize,
    /// Every `k`-th active subcarrier carries a fixed BPSK pilot.
    pub pilot_spacing: Option<usize>,
}

impl WaveformParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::InvalidWaveform(m));
        if self.fft_size < 4 || !self.fft_size.is_power_of_two() {
            return bad(format!("fft_size {} must be a power of two >= 4", self.fft_size));
        }
        if self.cp_length >= self.fft_size {
            return bad(format!("cp_length {} must be below fft_size {}", self.cp_length, self.fft_size));
        }
        if ![4, 16, 64].contains(&self.qam_order) {
            return bad(format!("qam_order {} not in {{4, 16, 64}}", self.qam_order));
        }
        if self.num_symbols == 0 {
            return bad("num_symbols must be positive".into());
        }
        if self.active_subcarriers < 2
            || !self.active_subcarriers.is_multiple_of(2)
            || self.active_subcarriers >= self.fft_size
        {
            return bad(format!(
                "active_subcarriers {} must be even, >= 2 and below fft_size",
                self.active_subcarriers
            ));
        }
        if let Some(k) = self.pilot_spacing {
            if k < 2 {
                return bad("pilot_spacing must be at least 2".into());
            }
        }
        Ok(())
    }

    pub fn symbol_length(&self) -> usize {
        self.fft_size + self.cp_length
    }

    pub fn preamble_length(&self) -> usize {
        self.preamble_reps * self.fft_size / 4
    }

    pub fn output_length(&self) -> usize {
        self.preamble_length() + self.num_symbols * self.symbol_length()
    }

    /// Smallest symbol count whose output covers `samples`.
    pub fn symbols_to_cover(&self, samples: usize) -> usize {
        samples
            .saturating_sub(self.preamble_length())
            .div_ceil(self.symbol_length())
            .max(1)
    }

    /// FFT bins of the active subcarriers, lowest frequency first.
    fn active_bins(&self) -> Vec<usize> {
        let half = (self.active_subcarriers / 2) as isize;
        let n = self.fft_size as isize;
        (-half..=half)
            .filter(|&k| k != 0)
            .map(|k| k.rem_euclid(n) as usize)
            .collect()
    }
}

/// Square QAM constellation point with unit average energy.
fn qam_point<R: Rng>(rng: &mut R, order: u32) -> Complex64 {
    let side = (order as f64).sqrt() as u32;
    let scale = (2.0 * (order as f64 - 1.0) / 3.0).sqrt();
    let level = |v: u32| (2.0 * v as f64 - (side as f64 - 1.0)) / scale;
    Complex64::new(level(rng.random_range(0..side)), level(rng.random_range(0..side)))
}

fn ifft(bins: &mut [Complex64], planner: &mut FftPlanner<f64>) {
    planner.plan_fft_inverse(bins.len()).process(bins);
}

/// One period of the fixed training sequence: every fourth active subcarrier
/// carries a fixed QPSK value, so the sequence repeats every `fft_size / 4`.
fn preamble_period(params: &WaveformParams, planner: &mut FftPlanner<f64>) -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(PREAMBLE_SEED);
    let mut bins = vec![Complex64::new(0.0, 0.0); params.fft_size];
    let half = (params.active_subcarriers / 2) as isize;
    for k in (-half..=half).filter(|k| k % 4 == 0 && *k != 0) {
        let re = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let im = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        bins[k.rem_euclid(params.fft_size as isize) as usize] = Complex64::new(re, im);
    }
    ifft(&mut bins, planner);
    let period = &bins[..params.fft_size / 4];
    let power = period.iter().map(|z| z.norm_sqr()).sum::<f64>() / period.len() as f64;
    let gain = 1.0 / power.sqrt();
    period.iter().map(|z| z * gain).collect()
}

/// OFDM surrogate waveform: optional repeated preamble, then `num_symbols`
/// cyclic-prefixed symbols with seeded QAM data on the active subcarriers.
/// Expected sample power is one.
pub fn generate_waveform(params: &WaveformParams) -> Result<Vec<Complex32>> {
    params.validate()?;
    let mut planner = FftPlanner::new();
    let mut out = Vec::with_capacity(params.output_length());
    if params.preamble_reps > 0 {
        let period = preamble_period(params, &mut planner);
        for _ in 0..params.preamble_reps {
            out.extend(period.iter().map(|z| Complex32::new(z.re as f32, z.im as f32)));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.payload_seed);
    let bins = params.active_bins();
    let gain = 1.0 / (bins.len() as f64).sqrt();
    let fft = planner.plan_fft_inverse(params.fft_size);
    let mut buf = vec![Complex64::new(0.0, 0.0); params.fft_size];
    for _ in 0..params.num_symbols {
        buf.fill(Complex64::new(0.0, 0.0));
        for (j, &bin) in bins.iter().enumerate() {
            buf[bin] = match params.pilot_spacing {
                Some(k) if j % k == 0 => Complex64::new(1.0, 0.0),
                _ => qam_point(&mut rng, params.qam_order),
            };
        }
        fft.process(&mut buf);
        let symbol: Vec<Complex32> = buf
            .iter()
            .map(|z| Complex32::new((z.re * gain) as f32, (z.im * gain) as f32))
            .collect();
        out.extend_from_slice(&symbol[params.fft_size - params.cp_length..]);
        out.extend_from_slice(&symbol);
    }
    debug_assert_eq!(out.len(), params.output_length());
    Ok(out)
}

pub fn mean_power(signal: &[Complex32]) -> f64 {
    signal.iter().map(|z| z.norm_sqr() as f64).sum::<f64>() / signal.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_a_length() {
        let p = ClassId::WifiLike.preset(1);
        assert_eq!(generate_waveform(&p).unwrap().len(), 10 * 16 + 20 * 80);
        assert_eq!(p.output_length(), 1760);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let p = ClassId::NrLike.preset(7);
        assert_eq!(generate_waveform(&p).unwrap(), generate_waveform(&p).unwrap());
        let q = ClassId::NrLike.preset(8);
        assert_ne!(generate_waveform(&p).unwrap(), generate_waveform(&q).unwrap());
    }

    #[test]
    fn presets_are_distinct_and_valid() {
        let keys: Vec<_> = ClassId::ALL
            .iter()
            .map(|c| {
                let p = c.preset(0);
                p.validate().unwrap();
                (p.fft_size, p.cp_length, p.preamble_reps)
            })
            .collect();
        assert_ne!(keys[0], keys[1]);
        assert_ne!(keys[1], keys[2]);
        assert_ne!(keys[0], keys[2]);
    }

    #[test]
    fn cyclic_prefix_copies_symbol_tail() {
        let p = ClassId::LteLike.preset(3);
        let x = generate_waveform(&p).unwrap();
        let (cp, n) = (p.cp_length, p.fft_size);
        for s in 0..p.num_symbols {
            let start = s * (n + cp);
            assert_eq!(&x[start..start + cp], &x[start + n..start + n + cp]);
        }
    }

    #[test]
    fn preamble_repeats() {
        let p = ClassId::WifiLike.preset(3);
        let x = generate_waveform(&p).unwrap();
        let period = p.fft_size / 4;
        for r in 1..p.preamble_reps {
            assert_eq!(&x[..period], &x[r * period..(r + 1) * period]);
        }
        assert!((mean_power(&x[..p.preamble_length()]) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn rejects_invalid() {
        let mut p = ClassId::WifiLike.preset(0);
        p.cp_length = 64;
        assert!(matches!(generate_waveform(&p), Err(CoreError::InvalidWaveform(_))));
        let mut p = ClassId::WifiLike.preset(0);
        p.qam_order = 8;
        assert!(generate_waveform(&p).is_err());
        let mut p = ClassId::WifiLike.preset(0);
        p.num_symbols = 0;
        assert!(generate_waveform(&p).is_err());
    }

    #[test]
    fn symbols_to_cover() {
        let p = ClassId::WifiLike.preset(0);
        assert_eq!(p.symbols_to_cover(160 + 80), 1);
        assert_eq!(p.symbols_to_cover(160 + 81), 2);
        let q = ClassId::NrLike.preset(0);
        assert_eq!(q.symbols_to_cover(2048), 8);
    }

    #[test]
    fn class_names_parse() {
        assert_eq!("b".parse::<ClassId>().unwrap(), ClassId::LteLike);
        assert_eq!("C_nr_like".parse::<ClassId>().unwrap(), ClassId::NrLike);
        assert!("D".parse::<ClassId>().is_err());
    }
}
