//! Per-frame conditioning features.
//!
//! Audio goes through a deterministic log-mel filterbank at 50 feature frames
//! per second and is then linearly interpolated onto the 24 fps expression
//! timeline. Landmark streams and the null stream share the same container.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use num_traits::Float;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftNum, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Audio sample rate accepted by the pipeline.
pub const SAMPLE_RATE: u32 = 16_000;
/// Expression frame rate.
pub const EXPRESSION_FPS: f64 = 24.0;
/// Landmarks per frame.
pub const LANDMARKS: usize = 68;
/// Width of a flattened landmark frame.
pub const LANDMARK_WIDTH: usize = LANDMARKS * 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform<T> {
    pub samples: Vec<T>,
    pub rate: u32,
}

impl<T: Real> Waveform<T> {
    pub fn new(samples: Vec<T>) -> Self {
        Self {
            samples,
            rate: SAMPLE_RATE,
        }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.rate as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Audio,
    Landmark,
    Null,
}

/// `N x d_c` conditioning rows at the expression frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningStream<T> {
    pub frames: Array2<T>,
    pub kind: StreamKind,
}

impl<T: Real> ConditioningStream<T> {
    pub fn audio(frames: Array2<T>) -> Self {
        Self {
            frames,
            kind: StreamKind::Audio,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.frames.ncols()
    }

    pub fn is_null(&self) -> bool {
        self.kind == StreamKind::Null
    }

    /// Rows `start..start + len`, keeping the stream kind.
    pub fn window(&self, start: usize, len: usize) -> Self {
        Self {
            frames: self
                .frames
                .slice(ndarray::s![start..start + len, ..])
                .to_owned(),
            kind: self.kind,
        }
    }
}

/// Scale by `10^(db/20)` and clamp to `[-1, 1]`.
pub fn apply_gain_db<T: Real>(wav: &Waveform<T>, db: f64) -> Waveform<T> {
    let gain = T::lit(10f64.powf(db / 20.0));
    let one = T::one();
    Waveform {
        samples: wav
            .samples
            .iter()
            .map(|&s| (s * gain).max(-one).min(one))
            .collect(),
        rate: wav.rate,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterbankConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub bands: usize,
    pub fft_size: usize,
    pub log_floor: f64,
}

impl Default for FilterbankConfig {
    fn default() -> Self {
        Self {
            window_ms: 25.0,
            hop_ms: 20.0,
            bands: 40,
            fft_size: 512,
            log_floor: 1e-10,
        }
    }
}

impl FilterbankConfig {
    pub fn window_len(&self, rate: u32) -> usize {
        (self.window_ms * rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_len(&self, rate: u32) -> usize {
        (self.hop_ms * rate as f64 / 1000.0).round() as usize
    }

    /// Feature frames per second.
    pub fn frame_rate(&self) -> f64 {
        1000.0 / self.hop_ms
    }

    /// `floor((len - window) / hop) + 1`, or `None` when shorter than one window.
    pub fn frame_count(&self, samples: usize, rate: u32) -> Option<usize> {
        let (w, h) = (self.window_len(rate), self.hop_len(rate));
        (samples >= w).then(|| (samples - w) / h + 1)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters over the `fft_size / 2 + 1` non-negative bins,
/// spanning 0 Hz to Nyquist.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `bands x bins` weights.
    pub weights: Array2<f64>,
    /// Center frequency of every band in Hz.
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(bands: usize, fft_size: usize, rate: u32) -> Self {
        let bins = fft_size / 2 + 1;
        let nyquist = rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..bands + 2)
            .map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64))
            .collect();
        let bin_hz = rate as f64 / fft_size as f64;
        let mut weights = Array2::zeros((bands, bins));
        for b in 0..bands {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[[b, k]] = w;
            }
        }
        Self {
            weights,
            centers_hz: edges[1..=bands].to_vec(),
        }
    }
}

/// Symmetric Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Log mel band energies, one row per analysis frame.
pub fn extract_filterbank<T: Real + FftNum>(
    wav: &Waveform<T>,
    cfg: &FilterbankConfig,
) -> Result<Array2<T>> {
    let frames = cfg.frame_count(wav.samples.len(), wav.rate).ok_or_else(|| {
        Error::InsufficientInput(format!(
            "waveform of {} samples is shorter than one {} ms window",
            wav.samples.len(),
            cfg.window_ms
        ))
    })?;
    let (win, hop) = (cfg.window_len(wav.rate), cfg.hop_len(wav.rate));
    if cfg.fft_size < win {
        return Err(Error::InvalidConfig(format!(
            "fft size {} shorter than window {win}",
            cfg.fft_size
        )));
    }
    let window: Vec<T> = hann(win).into_iter().map(T::lit).collect();
    let bank = MelFilterbank::new(cfg.bands, cfg.fft_size, wav.rate);
    let bank_w = bank.weights.mapv(T::lit);
    let fft: Arc<dyn Fft<T>> = FftPlanner::new().plan_fft_forward(cfg.fft_size);
    let bins = cfg.fft_size / 2 + 1;
    let floor = T::lit(cfg.log_floor);

    let mut out = Array2::zeros((frames, cfg.bands));
    let mut buf = vec![Complex::new(T::zero(), T::zero()); cfg.fft_size];
    let mut power = Array1::<T>::zeros(bins);
    for (f, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let start = f * hop;
        for (k, c) in buf.iter_mut().enumerate() {
            let re = if k < win {
                wav.samples[start + k] * window[k]
            } else {
                T::zero()
            };
            *c = Complex::new(re, T::zero());
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(buf.iter()) {
            *p = c.norm_sqr();
        }
        for (b, v) in row.iter_mut().enumerate() {
            let e: T = bank_w
                .row(b)
                .iter()
                .zip(power.iter())
                .map(|(&w, &p)| w * p)
                .sum();
            *v = Float::ln(Float::max(e, floor));
        }
    }
    Ok(out)
}

/// Number of expression frames covering `source_frames` at `f_src`:
/// `round(duration * f_e)`.
pub fn target_frames(source_frames: usize, f_src: f64, f_e: f64) -> usize {
    (source_frames as f64 / f_src * f_e).round() as usize
}

/// Linear interpolation along time onto `round(duration * f_e)` frames.
pub fn resample_to_fps<T: Real>(features: &Array2<T>, f_src: f64, f_e: f64) -> Result<Array2<T>> {
    let n = target_frames(features.nrows(), f_src, f_e);
    resample_to_frames(features, f_src, f_e, n)
}

/// Linear interpolation along time onto exactly `n` frames spaced `1 / f_e`
/// apart; query times past the last source frame clamp to it.
pub fn resample_to_frames<T: Real>(
    features: &Array2<T>,
    f_src: f64,
    f_e: f64,
    n: usize,
) -> Result<Array2<T>> {
    let na = features.nrows();
    if na < 2 {
        return Err(Error::InsufficientInput(format!(
            "need at least two feature frames to interpolate, got {na}"
        )));
    }
    if !(f_src > 0.0) || !(f_e > 0.0) {
        return Err(Error::InvalidConfig("frame rates must be positive".into()));
    }
    let mut out = Array2::zeros((n, features.ncols()));
    for (k, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let pos = (k as f64 * f_src / f_e).min((na - 1) as f64);
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        if frac == 0.0 || lo + 1 >= na {
            row.assign(&features.row(lo));
        } else {
            let (a, b) = (T::lit(1.0 - frac), T::lit(frac));
            for (j, v) in row.iter_mut().enumerate() {
                *v = a * features[[lo, j]] + b * features[[lo + 1, j]];
            }
        }
    }
    Ok(out)
}

/// Filterbank features of `wav` resampled to `frames` rows at 24 fps.
pub fn audio_stream<T: Real + FftNum>(
    wav: &Waveform<T>,
    cfg: &FilterbankConfig,
    frames: Option<usize>,
) -> Result<ConditioningStream<T>> {
    let feats = extract_filterbank(wav, cfg)?;
    let resampled = match frames {
        Some(n) => resample_to_frames(&feats, cfg.frame_rate(), EXPRESSION_FPS, n)?,
        None => resample_to_fps(&feats, cfg.frame_rate(), EXPRESSION_FPS)?,
    };
    Ok(ConditioningStream::audio(resampled))
}

/// `n` copies of the null token.
pub fn null_stream<T: Real>(n: usize, phi: ArrayView1<T>) -> Result<ConditioningStream<T>> {
    if n == 0 {
        return Err(Error::InvalidConfig("null stream needs at least one frame".into()));
    }
    let frames = phi
        .broadcast((n, phi.len()))
        .expect("row broadcast")
        .to_owned();
    Ok(ConditioningStream {
        frames,
        kind: StreamKind::Null,
    })
}

/// Flatten `N x 68 x 3` landmarks into 204-wide rows.
pub fn landmark_stream<T: Real>(landmarks: &Array3<T>) -> Result<ConditioningStream<T>> {
    let (n, l, c) = landmarks.dim();
    if l != LANDMARKS || c != 3 {
        return Err(Error::Dimension(format!(
            "landmarks must be N x {LANDMARKS} x 3, got {n} x {l} x {c}"
        )));
    }
    let frames = landmarks
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, LANDMARK_WIDTH))
        .expect("contiguous reshape");
    Ok(ConditioningStream {
        frames,
        kind: StreamKind::Landmark,
    })
}

/// Inverse of [`landmark_stream`].
pub fn unflatten_landmarks<T: Real>(stream: &ConditioningStream<T>) -> Result<Array3<T>> {
    if stream.width() != LANDMARK_WIDTH {
        return Err(Error::Dimension(format!(
            "landmark rows must be {LANDMARK_WIDTH} wide, got {}",
            stream.width()
        )));
    }
    Ok(stream
        .frames
        .clone()
        .into_shape_with_order((stream.len(), LANDMARKS, 3))
        .expect("contiguous reshape"))
}

/// Read a 16-bit PCM mono 16 kHz WAV file.
pub fn read_wav<T: Real>(path: impl AsRef<Path>) -> Result<Waveform<T>> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int
        || spec.bits_per_sample != 16
        || spec.channels != 1
        || spec.sample_rate != SAMPLE_RATE
    {
        return Err(Error::format(
            path,
            format!(
                "expected 16-bit PCM mono {SAMPLE_RATE} Hz, found {:?} {}-bit {} ch {} Hz",
                spec.sample_format, spec.bits_per_sample, spec.channels, spec.sample_rate
            ),
        ));
    }
    let scale = T::lit(1.0 / 32768.0);
    let samples = reader
        .into_samples::<i16>()
        .map(|s| {
            s.map(|v| T::lit(v as f64) * scale)
                .map_err(|e| Error::format(path, e.to_string()))
        })
        .collect::<Result<Vec<T>>>()?;
    Ok(Waveform::new(samples))
}

/// Write a waveform as 16-bit PCM mono.
pub fn write_wav<T: Real>(path: impl AsRef<Path>, wav: &Waveform<T>) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wav.rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &wav.samples {
        let v = (s.as_f64().clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    fn tone(hz: f64, secs: f64) -> Waveform<f64> {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        Waveform::new(
            (0..n)
                .map(|i| 0.5 * (2.0 * std::f64::consts::PI * hz * i as f64 / SAMPLE_RATE as f64).sin())
                .collect(),
        )
    }

    #[test]
    fn gain_scales_and_clamps() {
        let w = Waveform::new(vec![0.05, -0.05, 0.2, 0.0]);
        let g = apply_gain_db(&w, 20.0);
        assert!((g.samples[0] - 0.5).abs() < 1e-12);
        assert!((g.samples[1] + 0.5).abs() < 1e-12);
        assert_eq!(g.samples[2], 1.0);
        assert_eq!(apply_gain_db(&w, 0.0), w);
        let back = apply_gain_db(&apply_gain_db(&Waveform::new(vec![0.01, -0.03]), 12.0), -12.0);
        assert!((back.samples[0] - 0.01).abs() < 1e-15);
        assert!((back.samples[1] + 0.03).abs() < 1e-15);
    }

    #[test]
    fn silence_hits_floor_and_frame_count() {
        let w = Waveform::new(vec![0.0f64; 16_000]);
        let f = extract_filterbank(&w, &FilterbankConfig::default()).unwrap();
        assert_eq!(f.dim(), (49, 40));
        let floor = 1e-10f64.ln();
        assert!(f.iter().all(|&v| v == floor));
        let short = Waveform::new(vec![0.0f64; 399]);
        assert!(matches!(
            extract_filterbank(&short, &FilterbankConfig::default()),
            Err(Error::InsufficientInput(_))
        ));
    }

    #[test]
    fn filterbank_matches_naive_dft() {
        let cfg = FilterbankConfig::default();
        let w = tone(440.0, 0.1);
        let feats = extract_filterbank(&w, &cfg).unwrap();
        let bank = MelFilterbank::new(cfg.bands, cfg.fft_size, SAMPLE_RATE);
        let win = hann(400);
        // Brute-force DFT of the third frame.
        let start = 2 * 320;
        let mut energies = vec![0.0; cfg.bands];
        for k in 0..=256 {
            let (mut re, mut im) = (0.0, 0.0);
            for n in 0..400 {
                let x = w.samples[start + n] * win[n];
                let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / 512.0;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            for b in 0..cfg.bands {
                energies[b] += bank.weights[[b, k]] * (re * re + im * im);
            }
        }
        let peak = energies.iter().cloned().fold(0.0, f64::max);
        for b in 0..cfg.bands {
            let got = feats[[2, b]].exp();
            let expect = energies[b].max(1e-10);
            assert!((got - expect).abs() < 1e-10 * peak, "band {b}: {got} vs {expect}");
        }
        let argmax = (0..cfg.bands)
            .max_by(|&a, &b| feats[[2, a]].total_cmp(&feats[[2, b]]))
            .unwrap();
        let nearest = (0..cfg.bands)
            .min_by(|&a, &b| {
                (bank.centers_hz[a] - 440.0)
                    .abs()
                    .total_cmp(&(bank.centers_hz[b] - 440.0).abs())
            })
            .unwrap();
        assert_eq!(argmax, nearest);
    }

    #[test]
    fn filterbank_is_deterministic() {
        let w = tone(1234.0, 0.5);
        let cfg = FilterbankConfig::default();
        let a = extract_filterbank(&w, &cfg).unwrap();
        let b = extract_filterbank(&w, &cfg).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn resample_identity_constant_and_length() {
        let f = Array2::from_shape_fn((10, 3), |(i, j)| (i * 3 + j) as f64);
        assert_eq!(resample_to_fps(&f, 24.0, 24.0).unwrap(), f);
        let c = Array2::from_elem((99, 4), 1.25f64);
        let out = resample_to_fps(&c, 50.0, 24.0).unwrap();
        assert_eq!(out.nrows(), 48);
        assert!(out.iter().all(|&v| v == 1.25));
        assert!(resample_to_fps(&Array2::<f64>::zeros((1, 3)), 50.0, 24.0).is_err());
        // Two seconds of 16 kHz audio at 25/20 ms framing is 99 feature rows.
        let n_a = FilterbankConfig::default().frame_count(32_000, SAMPLE_RATE).unwrap();
        assert_eq!(target_frames(n_a, 50.0, 24.0), 48);
    }

    #[test]
    fn null_and_landmark_streams() {
        let phi = Array1::<f64>::zeros(5);
        let s = null_stream(3, phi.view()).unwrap();
        assert_eq!(s.frames.dim(), (3, 5));
        assert!(s.is_null());
        assert!(s.frames.iter().all(|&v| v == 0.0));
        assert!(null_stream(0, phi.view()).is_err());

        let lm = Array3::<f64>::zeros((1, 68, 3));
        let st = landmark_stream(&lm).unwrap();
        assert_eq!(st.frames.dim(), (1, 204));
        assert_eq!(st.kind, StreamKind::Landmark);
        let lm = Array3::from_shape_fn((4, 68, 3), |(i, j, k)| (i * 1000 + j * 3 + k) as f64);
        let st = landmark_stream(&lm).unwrap();
        assert_eq!(st.width(), 204);
        assert_eq!(st.frames[[1, 5]], lm[[1, 1, 2]]);
        assert_eq!(unflatten_landmarks(&st).unwrap(), lm);
        let _ = array![1.0];
    }

    #[test]
    fn wav_roundtrip_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = tone(300.0, 0.05);
        write_wav(&p, &w).unwrap();
        let r: Waveform<f64> = read_wav(&p).unwrap();
        assert_eq!(r.samples.len(), w.samples.len());
        for (a, b) in r.samples.iter().zip(w.samples.iter()) {
            assert!((a - b).abs() < 1.0 / 16_000.0);
        }
        let bad = dir.path().join("b.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&bad, spec).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.finalize().unwrap();
        assert!(matches!(read_wav::<f64>(&bad), Err(Error::Format { .. })));
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn resample_stays_within_column_bounds(
            rows in 2usize..40,
            vals in proptest::collection::vec(-5.0f64..5.0, 2 * 40 * 3),
            f_src in 10.0f64..80.0,
        ) {
            let f = Array2::from_shape_fn((rows, 3), |(i, j)| vals[i * 3 + j]);
            let out = resample_to_fps(&f, f_src, 24.0).unwrap();
            for j in 0..3 {
                let col = f.column(j);
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for &v in out.column(j) {
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }
}
