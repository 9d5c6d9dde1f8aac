//! Voice front end: log mel spectrogram, per-bin normalization and random
//! cropping.
//!
//! Frames are Hann-windowed (periodic), zero-padded to `n_fft`, and reduced
//! to power spectra. A triangular filterbank on the HTK mel scale
//! (`2595 · log10(1 + f / 700)`) with unnormalized unit-peak triangles maps
//! them to mel energies, followed by `ln(E + floor)`.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono PCM samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("waveform has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Invalid("sample rate must be positive".into()));
        }
        if let Some((i, s)) = samples.iter().enumerate().find(|(_, s)| !s.is_finite()) {
            return Err(Error::NonFinite(format!("sample {i} is {s}")));
        }
        if let Some((i, s)) = samples.iter().enumerate().find(|(_, s)| s.abs() > 1.0) {
            return Err(Error::Invalid(format!("sample {i} = {s} lies outside [-1, 1]")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelConfig {
    pub window_s: f64,
    pub hop_s: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub fmin: f64,
    /// Defaults to the Nyquist frequency.
    pub fmax: Option<f64>,
    pub floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            window_s: 0.025,
            hop_s: 0.010,
            n_fft: 512,
            n_mels: 64,
            fmin: 0.0,
            fmax: None,
            floor: 1e-10,
        }
    }
}

impl MelConfig {
    /// Window and hop in samples.
    pub fn frame_geometry(&self, sample_rate: u32) -> Result<(usize, usize)> {
        let sr = sample_rate as f64;
        let win = (self.window_s * sr).round() as usize;
        let hop = (self.hop_s * sr).round() as usize;
        if win == 0 || hop == 0 {
            return Err(Error::Invalid(format!(
                "window {}s / hop {}s is shorter than one sample at {sample_rate} Hz",
                self.window_s, self.hop_s
            )));
        }
        if win > self.n_fft {
            return Err(Error::Invalid(format!(
                "window of {win} samples exceeds n_fft = {}",
                self.n_fft
            )));
        }
        Ok((win, hop))
    }

    fn fmax_for(&self, sample_rate: u32) -> f64 {
        self.fmax.unwrap_or(sample_rate as f64 / 2.0)
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        self.frame_geometry(sample_rate)?;
        if self.n_mels == 0 {
            return Err(Error::Invalid("n_mels must be positive".into()));
        }
        let fmax = self.fmax_for(sample_rate);
        if !(self.fmin >= 0.0 && fmax > self.fmin && fmax <= sample_rate as f64 / 2.0) {
            return Err(Error::Invalid(format!(
                "mel range [{}, {fmax}] Hz is invalid for {sample_rate} Hz audio",
                self.fmin
            )));
        }
        if !(self.floor > 0.0 && self.floor.is_finite()) {
            return Err(Error::Invalid("log floor must be positive".into()));
        }
        Ok(())
    }
}

/// `T × n_mels` log energies, time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: DMatrix<f64>,
    pub frame_duration: f64,
    pub hop: f64,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.ncols()
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// `n_mels + 2` band edges in Hz, equally spaced in mel.
fn mel_edges(cfg: &MelConfig, sample_rate: u32) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax_for(sample_rate));
    let n = cfg.n_mels + 1;
    (0..=n).map(|k| mel_to_hz(lo + (hi - lo) * k as f64 / n as f64)).collect()
}

/// Peak frequency of every filter, in Hz.
pub fn mel_center_frequencies(cfg: &MelConfig, sample_rate: u32) -> Result<Vec<f64>> {
    cfg.validate(sample_rate)?;
    let edges = mel_edges(cfg, sample_rate);
    Ok(edges[1..=cfg.n_mels].to_vec())
}

/// `n_mels × (n_fft/2 + 1)` triangular weights over FFT bin frequencies.
pub fn mel_filterbank(cfg: &MelConfig, sample_rate: u32) -> Result<DMatrix<f64>> {
    cfg.validate(sample_rate)?;
    let edges = mel_edges(cfg, sample_rate);
    let n_bins = cfg.n_fft / 2 + 1;
    let bin_hz = sample_rate as f64 / cfg.n_fft as f64;
    Ok(DMatrix::from_fn(cfg.n_mels, n_bins, |m, b| {
        let f = b as f64 * bin_hz;
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let up = (f - lo) / (mid - lo);
        let down = (hi - f) / (hi - mid);
        up.min(down).max(0.0)
    }))
}

pub fn frame_count(len: usize, win: usize, hop: usize) -> Option<usize> {
    (len >= win).then(|| 1 + (len - win) / hop)
}

fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

pub fn log_mel(wave: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram> {
    cfg.validate(wave.sample_rate)?;
    let (win, hop) = cfg.frame_geometry(wave.sample_rate)?;
    let t = frame_count(wave.len(), win, hop).ok_or_else(|| {
        Error::Invalid(format!(
            "waveform of {} samples is shorter than one {win}-sample window",
            wave.len()
        ))
    })?;
    let bank = mel_filterbank(cfg, wave.sample_rate)?;
    let window = hann(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let n_bins = cfg.n_fft / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut power = nalgebra::DVector::zeros(n_bins);
    let mut frames = DMatrix::zeros(t, cfg.n_mels);
    for f in 0..t {
        let chunk = &wave.samples[f * hop..f * hop + win];
        for (slot, (s, w)) in buf.iter_mut().zip(chunk.iter().zip(&window)) {
            *slot = Complex::new(s * w, 0.0);
        }
        for slot in &mut buf[win..] {
            *slot = Complex::new(0.0, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        let energies = &bank * &power;
        for (m, e) in energies.iter().enumerate() {
            frames[(f, m)] = (e + cfg.floor).ln();
        }
    }
    Ok(MelSpectrogram {
        frames,
        frame_duration: win as f64 / wave.sample_rate as f64,
        hop: hop as f64 / wave.sample_rate as f64,
    })
}

/// Variance below which a bin is only centered.
pub const MIN_BIN_VARIANCE: f64 = 1e-12;

/// Zero mean, unit population variance per mel bin over the utterance.
pub fn per_bin_normalize(spec: &MelSpectrogram) -> Result<MelSpectrogram> {
    let t = spec.n_frames();
    if t < 2 {
        return Err(Error::Invalid(format!("per-bin normalization needs at least 2 frames, got {t}")));
    }
    let mut out = spec.clone();
    for mut col in out.frames.column_iter_mut() {
        let mean = col.sum() / t as f64;
        col.add_scalar_mut(-mean);
        let var = col.norm_squared() / t as f64;
        if var >= MIN_BIN_VARIANCE {
            col /= var.sqrt();
        }
    }
    Ok(out)
}

/// Contiguous crop with a seeded length in `[min_s, min(max_s, duration)]`
/// seconds and a seeded start.
pub fn random_crop(wave: &Waveform, min_s: f64, max_s: f64, seed: u64) -> Result<Waveform> {
    if !(min_s > 0.0 && max_s >= min_s && max_s.is_finite()) {
        return Err(Error::Invalid(format!("crop range {min_s}..{max_s} s is invalid")));
    }
    let sr = wave.sample_rate as f64;
    let min_len = (min_s * sr).round() as usize;
    let max_len = ((max_s * sr).round() as usize).min(wave.len());
    if wave.len() < min_len {
        return Err(Error::Invalid(format!(
            "waveform lasts {:.3} s, shorter than the {min_s} s minimum crop",
            wave.duration()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.random_range(min_len..=max_len);
    let start = rng.random_range(0..=wave.len() - len);
    Waveform::new(wave.samples[start..start + len].to_vec(), wave.sample_rate)
}

/// Reads a mono WAV file holding 16-bit integer or 32-bit float PCM.
fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::at(path)(io),
        other => Error::Wav(other),
    }
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Invalid(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::Invalid(format!(
                "{}: unsupported sample format {fmt:?} with {bits} bits",
                path.display()
            )))
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

pub fn write_wav(path: &Path, wave: &Waveform, encoding: WavEncoding) -> Result<()> {
    let (bits, format) = match encoding {
        WavEncoding::Pcm16 => (16, hound::SampleFormat::Int),
        WavEncoding::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: bits,
        sample_format: format,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &wave.samples {
        match encoding {
            WavEncoding::Pcm16 => writer.write_sample((s * 32767.0).round() as i16)?,
            WavEncoding::Float32 => writer.write_sample(s as f32)?,
        }
    }
    writer.finalize()?;
    Ok(())
}
