//! Physical thermal two-level-fluctuator model, FHMM sequence generation,
//! and Gaussian 1/f^beta reference-signal generation.

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::model::{Dataset, ModelParams, ModelSpec};
use crate::runner::derive_seed;

/// Boltzmann constant in micro-eV per kelvin; energies are in micro-eV so
/// the exponent is dimensionless.
pub const K_B_UEV_PER_K: f64 = 8.617333262e-2;

/// Physical description of a bank of thermal two-level fluctuators.
#[derive(Debug, Clone)]
pub struct ThermalTlfConfig {
    /// Fluctuator count.
    pub d: usize,
    /// Barrier energies, micro-eV, one per fluctuator.
    pub barrier_energies: Vec<f64>,
    /// Detuning energies, micro-eV, one per fluctuator.
    pub detuning_energies: Vec<f64>,
    /// Temperature in kelvin.
    pub temperature: f64,
    /// White-noise standard deviation in observation units.
    pub sigma_white_noise: f64,
    /// Sample period in seconds.
    pub dt: f64,
}

impl ThermalTlfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::InvalidOptions("temperature must be positive".into()));
        }
        if self.dt <= 0.0 {
            return Err(Error::InvalidOptions("dt must be positive".into()));
        }
        if self.sigma_white_noise < 0.0 {
            return Err(Error::InvalidOptions("sigma_white_noise must be >= 0".into()));
        }
        if self.barrier_energies.len() != self.d || self.detuning_energies.len() != self.d {
            return Err(Error::InvalidOptions(format!(
                "need {} barrier and detuning energies",
                self.d
            )));
        }
        Ok(())
    }
}

/// Excitation/relaxation frequencies `exp[(E_b -/+ dE/2) / (k_B T)]`,
/// evaluated exactly as written. Note the positive exponent in the barrier
/// energy: rates grow with barrier height, which runs against Arrhenius
/// intuition but is kept verbatim.
pub fn thermal_rates(e_b: f64, de: f64, t_k: f64) -> (f64, f64) {
    let kt = K_B_UEV_PER_K * t_k;
    let f_e = ((e_b - de / 2.0) / kt).exp();
    let f_r = ((e_b + de / 2.0) / kt).exp();
    (f_e, f_r)
}

/// Rate matrix `[[-f_e, f_r], [f_e, -f_r]]`; columns sum to zero.
pub fn build_rate_matrix(f_e: f64, f_r: f64) -> Array2<f64> {
    ndarray::arr2(&[[-f_e, f_r], [f_e, -f_r]])
}

/// Transition matrix `exp(M dt)` for the two-state rate matrix, in closed
/// form. Column-stochastic for all `dt >= 0`.
pub fn build_transition_matrix(m: &Array2<f64>, dt: f64) -> Array2<f64> {
    let f_e = -m[[0, 0]];
    let f_r = -m[[1, 1]];
    let s = f_e + f_r;
    // exp(M dt) = I + M (1 - e^{-s dt}) / s, since M^2 = -s M
    let g = if s > 0.0 { (1.0 - (-s * dt).exp()) / s } else { dt };
    let mut p = Array2::<f64>::eye(2);
    for i in 0..2 {
        for j in 0..2 {
            p[[i, j]] += m[[i, j]] * g;
        }
    }
    p
}

/// Analytic Lorentzian power spectral density of a weighted random telegraph
/// process: `S(f) = 4 w^2 f_e f_r / ((f_e+f_r) ((f_e+f_r)^2 + (2 pi f)^2))`.
pub fn tlf_psd(f_e: f64, f_r: f64, weight: f64, freqs: &[f64]) -> Vec<f64> {
    let s = f_e + f_r;
    freqs
        .iter()
        .map(|&f| {
            let omega = 2.0 * std::f64::consts::PI * f;
            4.0 * weight * weight * f_e * f_r / (s * (s * s + omega * omega))
        })
        .collect()
}

/// FHMM parameters equivalent to the thermal fluctuator bank: 2-state chains
/// with transition matrices `exp(M_i dt)`, stationary initial distributions,
/// weights `w`, and isotropic white noise `sigma^2 I`.
pub fn thermal_tlf_params(config: &ThermalTlfConfig, w: Array3<f64>) -> Result<ModelParams> {
    config.validate()?;
    let (d, o, k) = w.dim();
    if d != config.d || k != 2 {
        return Err(Error::ShapeMismatch(format!(
            "weights must have shape ({}, o, 2), got {:?}",
            config.d,
            w.dim()
        )));
    }
    let mut a_log = Array3::<f64>::zeros((d, 2, 2));
    let mut pi = Array2::<f64>::zeros((d, 2));
    for i in 0..d {
        let (f_e, f_r) = thermal_rates(
            config.barrier_energies[i],
            config.detuning_energies[i],
            config.temperature,
        );
        let p = build_transition_matrix(&build_rate_matrix(f_e, f_r), config.dt);
        for a in 0..2 {
            for b in 0..2 {
                a_log[[i, a, b]] = p[[a, b]].max(f64::MIN_POSITIVE).ln();
            }
        }
        let s = f_e + f_r;
        pi[[i, 0]] = if s > 0.0 { f_r / s } else { 0.5 };
        pi[[i, 1]] = 1.0 - pi[[i, 0]];
    }
    let sigma2 = (config.sigma_white_noise * config.sigma_white_noise).max(1e-300);
    let c = Array2::<f64>::eye(o) * sigma2;
    Ok(ModelParams { w, a_log, c, pi })
}

/// Draws observation sequences from the model: initial states from pi, chain
/// evolution by the per-chain transition matrices, emissions
/// `y_t = sum_i W[i] s_i + N(0, C)`. Deterministic given the seed; each
/// sample uses its own derived stream. Optionally returns the one-hot hidden
/// states, shape `[n_samples][T][d][k]`.
pub fn generate_fhmm(
    params: &ModelParams,
    time_steps: usize,
    n_samples: usize,
    seed: u64,
    return_hidden: bool,
) -> Result<(Vec<f64>, Dataset, Option<Array4<f64>>)> {
    generate_fhmm_dt(params, time_steps, n_samples, seed, return_hidden, 1.0)
}

/// [`generate_fhmm`] with an explicit sample period for the time axis.
pub fn generate_fhmm_dt(
    params: &ModelParams,
    time_steps: usize,
    n_samples: usize,
    seed: u64,
    return_hidden: bool,
    dt: f64,
) -> Result<(Vec<f64>, Dataset, Option<Array4<f64>>)> {
    let (d, o, k) = params.w.dim();
    let a_exp = params.a_exp();
    // Cholesky factor for correlated noise
    let c_mat = nalgebra::DMatrix::from_fn(o, o, |i, j| params.c[[i, j]]);
    let chol = nalgebra::Cholesky::new(c_mat).ok_or(Error::SingularCovariance)?;
    let l = chol.l();

    let mut x = Array3::<f64>::zeros((n_samples, time_steps, o));
    let mut hidden = if return_hidden {
        Some(Array4::<f64>::zeros((n_samples, time_steps, d, k)))
    } else {
        None
    };

    for s in 0..n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, s as u64));
        let mut states = vec![0usize; d];
        for i in 0..d {
            states[i] = draw_categorical(&mut rng, (0..k).map(|j| params.pi[[i, j]]));
        }
        for t in 0..time_steps {
            if t > 0 {
                for i in 0..d {
                    let prev = states[i];
                    states[i] = draw_categorical(&mut rng, (0..k).map(|j| a_exp[[i, j, prev]]));
                }
            }
            if let Some(h) = hidden.as_mut() {
                for i in 0..d {
                    h[[s, t, i, states[i]]] = 1.0;
                }
            }
            let mut z = vec![0.0; o];
            for zj in z.iter_mut() {
                *zj = rng.sample(StandardNormal);
            }
            for j in 0..o {
                let mut y = 0.0;
                for i in 0..d {
                    y += params.w[[i, j, states[i]]];
                }
                for q in 0..=j.min(o - 1) {
                    y += l[(j, q)] * z[q];
                }
                x[[s, t, j]] = y;
            }
        }
    }
    let t_axis = (0..time_steps).map(|t| t as f64 * dt).collect();
    Ok((t_axis, Dataset::new(x, dt)?, hidden))
}

fn draw_categorical<R: Rng>(rng: &mut R, probs: impl Iterator<Item = f64>) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (j, p) in probs.enumerate() {
        acc += p;
        last = j;
        if u < acc {
            return j;
        }
    }
    last
}

/// Gaussian 1/f^beta series by frequency-domain synthesis: independent
/// Gaussian real/imaginary spectral coefficients scaled by `f^{-beta/2}`,
/// Hermitian-symmetrized and inverse-transformed. The zero-frequency bin is
/// zero (so the output has zero mean in expectation) and the Nyquist bin is
/// real for even lengths.
pub fn generate_powerlaw(beta: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::SeriesTooShort { len: n, needed: 2 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spectrum = vec![Complex::new(0.0, 0.0); n];
    let half = n / 2;
    for j in 1..=half {
        let f = j as f64 / n as f64;
        let scale = f.powf(-beta / 2.0);
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        if n % 2 == 0 && j == half {
            spectrum[j] = Complex::new(re * scale * std::f64::consts::SQRT_2, 0.0);
        } else {
            spectrum[j] = Complex::new(re * scale, im * scale);
            spectrum[n - j] = spectrum[j].conj();
        }
    }
    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(n);
    ifft.process(&mut spectrum);
    // rustfft's inverse is unnormalized; 1/sqrt(n) keeps the variance
    // independent of the length convention
    let norm = 1.0 / (n as f64).sqrt();
    Ok(spectrum.iter().map(|z| z.re * norm).collect())
}

/// Generator-facing spec helper: dimensions implied by a parameter set.
pub fn spec_of(params: &ModelParams, t_len: usize) -> ModelSpec {
    let (d, o, k) = params.w.dim();
    ModelSpec { t_len, d, o, k }
}
