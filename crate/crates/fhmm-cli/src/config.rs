//! Batch configuration: one JSON schema shared by all subcommands, unknown
//! keys rejected so typos never pass silently.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::CliError;
use fhmm::em::{FitOptions, Method};
use fhmm::model::ModelSpec;

fn default_em_max_iter() -> usize {
    100
}
fn default_ll_tol() -> f64 {
    1e-8
}
fn default_ll_count() -> usize {
    3
}
fn default_one() -> usize {
    1
}
fn default_estep_iter() -> usize {
    50
}
fn default_kld_tol() -> f64 {
    1e-6
}
fn default_gibbs_iter() -> usize {
    100
}
fn default_zero_probability() -> f64 {
    1e-12
}
fn default_method() -> Method {
    Method::Exact
}
fn default_n_jobs() -> i64 {
    1
}
fn default_level() -> f64 {
    0.95
}
fn default_overlap() -> f64 {
    0.5
}
fn default_spectrum_method() -> fhmm::spectral::SpectrumMethod {
    fhmm::spectral::SpectrumMethod::Full
}

/// Union of every recognized key. Commands validate the subset they need.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    // model dimensions
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    pub t_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub o: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,

    // EM controls
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_em_max_iter")]
    pub em_max_iter: usize,
    #[serde(default = "default_ll_tol")]
    pub em_log_likelihood_tol: f64,
    #[serde(default = "default_ll_count")]
    pub em_log_likelihood_count: usize,
    #[serde(default = "default_one")]
    pub n_restarts: usize,
    #[serde(default)]
    pub e_step_retries: usize,
    #[serde(default = "default_gibbs_iter")]
    pub gibbs_max_iter: usize,
    #[serde(default = "default_estep_iter")]
    pub mean_field_max_iter: usize,
    #[serde(default = "default_kld_tol")]
    pub mean_field_kld_tol: f64,
    #[serde(default = "default_estep_iter")]
    pub sva_max_iter: usize,
    #[serde(default = "default_kld_tol")]
    pub sva_kld_tol: f64,
    #[serde(default)]
    pub stochastic_training: bool,
    #[serde(default)]
    pub stochastic_lr: f64,
    #[serde(default = "default_zero_probability")]
    pub zero_probability: f64,
    #[serde(default)]
    pub verbose: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_n_jobs")]
    pub n_jobs: i64,

    // parameter block seeds / pins
    #[serde(rename = "W_init", skip_serializing_if = "Option::is_none")]
    pub w_init: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(rename = "A_init", skip_serializing_if = "Option::is_none")]
    pub a_init: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(rename = "C_init", skip_serializing_if = "Option::is_none")]
    pub c_init: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pi_init: Option<Vec<Vec<f64>>>,
    #[serde(rename = "W_fixed", skip_serializing_if = "Option::is_none")]
    pub w_fixed: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(rename = "A_fixed", skip_serializing_if = "Option::is_none")]
    pub a_fixed: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(rename = "C_fixed", skip_serializing_if = "Option::is_none")]
    pub c_fixed: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pi_fixed: Option<Vec<Vec<f64>>>,

    // cross-validation
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_size: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subsequence_size: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_splits: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_grid: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_grid: Option<Vec<usize>>,

    // bootstrap
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_bootstrap: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subsequence_length: Option<usize>,

    // generation
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<GenerateKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params_file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub barrier_energies: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detuning_energies: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_white_noise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,

    // spectral analysis
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<SpectrumKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segment_length: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fh: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fl: Option<f64>,
    #[serde(default = "default_spectrum_method")]
    pub spectrum_method: fhmm::spectral::SpectrumMethod,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_overlap")]
    pub overlap: f64,
    #[serde(default)]
    pub sample_index: usize,
    #[serde(default)]
    pub component: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerateKind {
    Fhmm,
    Tlf,
    Powerlaw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumKind {
    Welch,
    Second,
}

impl Config {
    pub fn from_file(path: &str) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {path}: {e}")))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("config {path}: {e}")))
    }

    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::config("this command requires a `seed` field".into()))
    }

    pub fn model_spec(&self, t_len_from_data: usize, o_from_data: usize) -> Result<ModelSpec, CliError> {
        let t_len = self.t_len.unwrap_or(t_len_from_data);
        let o = self.o.unwrap_or(o_from_data);
        let d = self.d.ok_or_else(|| CliError::config("missing `d`".into()))?;
        let k = self.k.ok_or_else(|| CliError::config("missing `k`".into()))?;
        if t_len != t_len_from_data {
            return Err(CliError::config(format!(
                "config T={t_len} disagrees with data T={t_len_from_data}"
            )));
        }
        if o != o_from_data {
            return Err(CliError::config(format!(
                "config o={o} disagrees with data o={o_from_data}"
            )));
        }
        ModelSpec::new(t_len, d, o, k).map_err(|e| CliError::config(e.to_string()))
    }

    pub fn fit_options(&self) -> Result<FitOptions, CliError> {
        let seed = self.require_seed()?;
        let to3 = |v: &Vec<Vec<Vec<f64>>>| -> Result<Array3<f64>, CliError> {
            let d0 = v.len();
            let d1 = v.first().map_or(0, |m| m.len());
            let d2 = v.first().and_then(|m| m.first()).map_or(0, |r| r.len());
            let mut out = Array3::zeros((d0, d1, d2));
            for (i, m) in v.iter().enumerate() {
                for (j, r) in m.iter().enumerate() {
                    if m.len() != d1 || r.len() != d2 {
                        return Err(CliError::config("ragged tensor in config".into()));
                    }
                    for (l, &x) in r.iter().enumerate() {
                        out[[i, j, l]] = x;
                    }
                }
            }
            Ok(out)
        };
        let to2 = |v: &Vec<Vec<f64>>| -> Result<Array2<f64>, CliError> {
            let d0 = v.len();
            let d1 = v.first().map_or(0, |r| r.len());
            let mut out = Array2::zeros((d0, d1));
            for (i, r) in v.iter().enumerate() {
                if r.len() != d1 {
                    return Err(CliError::config("ragged matrix in config".into()));
                }
                for (j, &x) in r.iter().enumerate() {
                    out[[i, j]] = x;
                }
            }
            Ok(out)
        };
        Ok(FitOptions {
            method: self.method,
            em_max_iter: self.em_max_iter,
            em_log_likelihood_tol: self.em_log_likelihood_tol,
            em_log_likelihood_count: self.em_log_likelihood_count,
            n_restarts: self.n_restarts,
            e_step_retries: self.e_step_retries,
            stochastic_training: self.stochastic_training,
            stochastic_lr: self.stochastic_lr,
            gibbs_max_iter: self.gibbs_max_iter,
            gibbs_burn_in: 0.0,
            mean_field_max_iter: self.mean_field_max_iter,
            mean_field_kld_tol: self.mean_field_kld_tol,
            sva_max_iter: self.sva_max_iter,
            sva_kld_tol: self.sva_kld_tol,
            zero_probability: self.zero_probability,
            seed,
            n_jobs: self.n_jobs,
            verbose: self.verbose,
            w_init: self.w_init.as_ref().map(&to3).transpose()?,
            a_init: self.a_init.as_ref().map(&to3).transpose()?,
            c_init: self.c_init.as_ref().map(&to2).transpose()?,
            pi_init: self.pi_init.as_ref().map(&to2).transpose()?,
            w_fixed: self.w_fixed.as_ref().map(&to3).transpose()?,
            a_fixed: self.a_fixed.as_ref().map(&to3).transpose()?,
            c_fixed: self.c_fixed.as_ref().map(&to2).transpose()?,
            pi_fixed: self.pi_fixed.as_ref().map(&to2).transpose()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_fit_config_parses_with_defaults() {
        let cfg: Config =
            serde_json::from_str(r#"{"d": 2, "k": 2, "seed": 1}"#).unwrap();
        assert_eq!(cfg.em_max_iter, 100);
        assert_eq!(cfg.em_log_likelihood_tol, 1e-8);
        assert_eq!(cfg.method, Method::Exact);
        assert_eq!(cfg.n_jobs, 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<Config>(r#"{"d": 2, "k": 2, "em_max_itr": 5}"#);
        assert!(err.is_err(), "typo of em_max_iter must not parse");
    }

    #[test]
    fn config_round_trip_is_identity() {
        let text = r#"{
            "T": 100, "d": 2, "o": 1, "k": 2,
            "method": "sva", "em_max_iter": 7, "em_log_likelihood_tol": 1e-9,
            "n_restarts": 3, "seed": 42, "n_jobs": -1,
            "W_init": [[[0.5, -0.5]], [[0.1, -0.1]]],
            "test_size": 0.4, "subsequence_size": 0.33, "n_splits": 20
        }"#;
        let cfg: Config = serde_json::from_str(text).unwrap();
        let back = serde_json::to_string(&cfg).unwrap();
        let cfg2: Config = serde_json::from_str(&back).unwrap();
        let again = serde_json::to_string(&cfg2).unwrap();
        assert_eq!(back, again);
        assert_eq!(cfg2.w_init, cfg.w_init);
        assert_eq!(cfg2.em_log_likelihood_tol, 1e-9);
    }
}
