//! First and second spectra of scalar time series, the Gaussian-background
//! comparison, and the chi-square non-Gaussianity test.
//!
//! The second spectrum of a segment is the banded fourth-order statistic
//! `8 T |sum_k A_{k+p} conj(A_k)|^2` over lags `p`; its Gaussian background
//! follows from the Wick decoupling using the segment-averaged first
//! spectrum at the same bins, so the comparison is independent of the FFT
//! normalization convention.

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// Which coefficients enter the quadruple product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumMethod {
    Full,
    Amplitude,
    Phase,
    All,
}

/// Per-lag second spectrum with its across-segment scatter and Gaussian
/// background.
#[derive(Debug, Clone)]
pub struct SecondSpectrumResult {
    /// Lag frequencies `p / (segment_length * dt)`.
    pub freqs: Vec<f64>,
    /// Mean over segments.
    pub s2: Vec<f64>,
    /// Sample standard deviation over segments.
    pub s2_std: Vec<f64>,
    /// Gaussian background from the first-spectrum decoupling.
    pub s2_gauss: Vec<f64>,
    pub n_segments: usize,
    pub method: SpectrumMethod,
    /// Per-segment samples, `[n_segments][n_lags]`; populated for
    /// [`SpectrumMethod::All`].
    pub all_samples: Option<Array2<f64>>,
}

/// Splits the series into non-overlapping mean-removed segments and
/// evaluates the banded double sum for each lag. Band edges are the nearest
/// bins to `f_l` and `f_h`.
pub fn second_spectrum(
    series: &[f64],
    dt: f64,
    segment_length: usize,
    f_h: f64,
    f_l: f64,
    method: SpectrumMethod,
) -> Result<SecondSpectrumResult> {
    if segment_length < 8 {
        return Err(Error::SeriesTooShort { len: segment_length, needed: 8 });
    }
    if series.len() < 2 * segment_length {
        return Err(Error::SeriesTooShort { len: series.len(), needed: 2 * segment_length });
    }
    let nyquist = 0.5 / dt;
    if !(f_l > 0.0 && f_l < f_h && f_h <= nyquist) {
        return Err(Error::BandTooNarrow { lags: 0 });
    }
    let df = 1.0 / (segment_length as f64 * dt);
    let b_l = (f_l / df).round() as usize;
    let b_h = ((f_h / df).round() as usize).min(segment_length / 2);
    if b_h <= b_l + 2 {
        return Err(Error::BandTooNarrow { lags: b_h.saturating_sub(b_l + 1) });
    }
    let n_lags = b_h - b_l - 1;
    let n_segments = series.len() / segment_length;

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(segment_length);
    let t_scale = 8.0 * segment_length as f64;

    let mut samples = Array2::<f64>::zeros((n_segments, n_lags));
    let mut s1 = vec![0.0; b_h + 1];
    let mut buf = vec![Complex::new(0.0, 0.0); segment_length];
    for seg in 0..n_segments {
        let chunk = &series[seg * segment_length..(seg + 1) * segment_length];
        let mean = chunk.iter().sum::<f64>() / segment_length as f64;
        for (b, &v) in buf.iter_mut().zip(chunk.iter()) {
            *b = Complex::new(v - mean, 0.0);
        }
        fft.process(&mut buf);
        // method transform on the band coefficients
        let coeff = |k: usize| -> Complex<f64> {
            let a = buf[k];
            match method {
                SpectrumMethod::Full | SpectrumMethod::All => a,
                SpectrumMethod::Amplitude => Complex::new(a.norm(), 0.0),
                SpectrumMethod::Phase => {
                    let n = a.norm();
                    if n > 0.0 {
                        a / n
                    } else {
                        Complex::new(0.0, 0.0)
                    }
                }
            }
        };
        for (n, acc) in s1.iter_mut().enumerate() {
            *acc += coeff(n).norm_sqr();
        }
        for p in 1..=n_lags {
            let mut x = Complex::new(0.0, 0.0);
            for k in b_l..=(b_h - p) {
                x += coeff(k + p) * coeff(k).conj();
            }
            samples[[seg, p - 1]] = t_scale * x.norm_sqr();
        }
    }
    for v in s1.iter_mut() {
        *v /= n_segments as f64;
    }

    let mut s2 = vec![0.0; n_lags];
    let mut s2_std = vec![0.0; n_lags];
    let mut s2_gauss = vec![0.0; n_lags];
    let mut freqs = vec![0.0; n_lags];
    for p in 1..=n_lags {
        let col: Vec<f64> = (0..n_segments).map(|s| samples[[s, p - 1]]).collect();
        let mean = col.iter().sum::<f64>() / n_segments as f64;
        let var = if n_segments > 1 {
            col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n_segments as f64 - 1.0)
        } else {
            0.0
        };
        s2[p - 1] = mean;
        s2_std[p - 1] = var.sqrt();
        s2_gauss[p - 1] = t_scale * (b_l..=(b_h - p)).map(|n| s1[n + p] * s1[n]).sum::<f64>();
        freqs[p - 1] = p as f64 * df;
    }

    let all_samples = matches!(method, SpectrumMethod::All).then_some(samples);
    Ok(SecondSpectrumResult {
        freqs,
        s2,
        s2_std,
        s2_gauss,
        n_segments,
        method,
        all_samples,
    })
}

/// Chi-square comparison of the second spectrum against its Gaussian
/// background: `chi_i = ((s2_i - gauss_i) / (std_i / sqrt(N)))^2`, summed
/// and compared with the chi-square quantile at `level` using `dof` degrees
/// of freedom (defaults to the number of lags).
pub fn chi2_gaussianity(
    result: &SecondSpectrumResult,
    level: f64,
) -> Result<(f64, usize, bool)> {
    chi2_gaussianity_dof(result, level, result.freqs.len())
}

pub fn chi2_gaussianity_dof(
    result: &SecondSpectrumResult,
    level: f64,
    dof: usize,
) -> Result<(f64, usize, bool)> {
    if result.n_segments < 2 {
        return Err(Error::SeriesTooShort { len: result.n_segments, needed: 2 });
    }
    if !(level > 0.0 && level < 1.0) || dof == 0 {
        return Err(Error::InvalidOptions("level in (0,1) and dof >= 1 required".into()));
    }
    let n = result.n_segments as f64;
    let mut chi_sum = 0.0;
    for i in 0..result.freqs.len() {
        let sigma = result.s2_std[i] / n.sqrt();
        if sigma > 0.0 {
            let z = (result.s2[i] - result.s2_gauss[i]) / sigma;
            chi_sum += z * z;
        }
    }
    let dist = ChiSquared::new(dof as f64).expect("dof > 0");
    let threshold = dist.inverse_cdf(level);
    Ok((chi_sum, dof, chi_sum > threshold))
}

/// Averaged Hann-windowed periodogram, one-sided density normalization
/// (`sum psd * df` approximates the variance).
pub fn welch_psd(
    series: &[f64],
    dt: f64,
    segment_length: usize,
    overlap_fraction: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if segment_length < 4 || series.len() < segment_length {
        return Err(Error::SeriesTooShort { len: series.len(), needed: segment_length.max(4) });
    }
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(Error::InvalidOptions("overlap_fraction must be in [0, 1)".into()));
    }
    let step = ((segment_length as f64) * (1.0 - overlap_fraction)).max(1.0) as usize;
    let window: Vec<f64> = (0..segment_length)
        .map(|n| {
            0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / segment_length as f64).cos()
        })
        .collect();
    let win_power: f64 = window.iter().map(|w| w * w).sum();
    let fs = 1.0 / dt;
    let scale = 1.0 / (fs * win_power);

    let half = segment_length / 2;
    let mut psd = vec![0.0; half + 1];
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(segment_length);
    let mut buf = vec![Complex::new(0.0, 0.0); segment_length];
    let mut count = 0usize;
    let mut start = 0usize;
    while start + segment_length <= series.len() {
        let chunk = &series[start..start + segment_length];
        let mean = chunk.iter().sum::<f64>() / segment_length as f64;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new((chunk[i] - mean) * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in psd.iter_mut().enumerate() {
            let mut v = buf[k].norm_sqr() * scale;
            if k != 0 && !(segment_length % 2 == 0 && k == half) {
                v *= 2.0;
            }
            *p += v;
        }
        count += 1;
        start += step;
    }
    for p in psd.iter_mut() {
        *p /= count as f64;
    }
    let freqs = (0..=half).map(|k| k as f64 * fs / segment_length as f64).collect();
    Ok((freqs, psd))
}
