//! Model dimensions, parameter tensors and their constraints, parameter
//! counting, the canonical form of W, and the hidden-configuration
//! enumeration shared by exact inference, Viterbi, and the Hessian.
//!
//! A model is `d` independent Markov chains with `k` states each, driving an
//! `o`-dimensional Gaussian observable through per-chain weight matrices.
//! Transition matrices are stored in log space (`a_log`), column-stochastic:
//! `a_log[i][j][l] = ln P(state j at t | state l at t-1)` for chain `i`.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numerical cutoff indicating zero probability (not strictly zero).
pub const DEFAULT_ZERO_PROBABILITY: f64 = 1e-12;

/// Model dimensions: sequence length, chain count, observable dimension,
/// states per chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Sequence length T.
    #[serde(rename = "T")]
    pub t_len: usize,
    /// Number of hidden chains.
    pub d: usize,
    /// Observable dimension.
    pub o: usize,
    /// States per chain.
    pub k: usize,
}

impl ModelSpec {
    pub fn new(t_len: usize, d: usize, o: usize, k: usize) -> Result<Self> {
        let spec = Self { t_len, d, o, k };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_len < 1 || self.d < 1 || self.o < 1 || self.k < 1 {
            return Err(Error::ShapeMismatch(format!(
                "all of T, d, o, k must be >= 1 (got T={}, d={}, o={}, k={})",
                self.t_len, self.d, self.o, self.k
            )));
        }
        self.n_configs()?;
        Ok(())
    }

    /// Number of joint hidden configurations, k^d.
    pub fn n_configs(&self) -> Result<usize> {
        let d = u32::try_from(self.d)
            .map_err(|_| Error::ConfigurationOverflow { k: self.k, d: self.d })?;
        self.k
            .checked_pow(d)
            .ok_or(Error::ConfigurationOverflow { k: self.k, d: self.d })
    }
}

/// Number of independent model parameters:
/// `dok - (d-1)o + d(k-1)k + o^2 + d(k-1)`.
///
/// W loses one mean per observable component for every chain past the first
/// (the canonical-form ambiguity), A loses one row per column to the
/// probability constraint, pi loses one entry per chain, and C counts all
/// o^2 entries. This is the Hessian side length.
pub fn count_dim(spec: &ModelSpec) -> usize {
    let (d, o, k) = (spec.d, spec.o, spec.k);
    d * o * k - (d - 1) * o + d * (k - 1) * k + o * o + d * (k - 1)
}

/// Learnable parameters of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Observation weights, shape `[d][o][k]`.
    pub w: Array3<f64>,
    /// Log transition probabilities, shape `[d][k][k]`, column-stochastic
    /// after exponentiation.
    pub a_log: Array3<f64>,
    /// Observation noise covariance, shape `[o][o]`.
    pub c: Array2<f64>,
    /// Initial state distributions, shape `[d][k]`.
    pub pi: Array2<f64>,
}

impl ModelParams {
    /// Exponentiated transition tensor, `exp(a_log)`.
    pub fn a_exp(&self) -> Array3<f64> {
        self.a_log.mapv(f64::exp)
    }
}

/// Observation data: `n_samples` sequences of length `T` with `o` components,
/// sampled every `dt` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Observations, shape `[n_samples][T][o]`.
    pub x: Array3<f64>,
    /// Sample period in seconds.
    pub dt: f64,
}

impl Dataset {
    pub fn new(x: Array3<f64>, dt: f64) -> Result<Self> {
        if dt <= 0.0 || !dt.is_finite() {
            return Err(Error::ShapeMismatch(format!("dt must be positive, got {dt}")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("dataset contains non-finite entries".into()));
        }
        Ok(Self { x, dt })
    }

    /// Single-sample dataset with unit sample period.
    pub fn from_single(sample: Array2<f64>) -> Result<Self> {
        let (t, o) = sample.dim();
        let x = sample.into_shape_with_order((1, t, o)).expect("reshape");
        Self::new(x, 1.0)
    }

    pub fn n_samples(&self) -> usize {
        self.x.dim().0
    }

    pub fn t_len(&self) -> usize {
        self.x.dim().1
    }

    pub fn o(&self) -> usize {
        self.x.dim().2
    }

    /// Per-component variance pooled over samples and time.
    pub fn component_variance(&self) -> Vec<f64> {
        let (n, t, o) = self.x.dim();
        let count = (n * t) as f64;
        (0..o)
            .map(|j| {
                let mut mean = 0.0;
                for s in 0..n {
                    for ti in 0..t {
                        mean += self.x[[s, ti, j]];
                    }
                }
                mean /= count;
                let mut var = 0.0;
                for s in 0..n {
                    for ti in 0..t {
                        let e = self.x[[s, ti, j]] - mean;
                        var += e * e;
                    }
                }
                var / count
            })
            .collect()
    }
}

/// Enumeration of the joint hidden configurations.
///
/// Column `r` of `realizations` is the base-k digit expansion of `r` with
/// chain 0 as the most significant digit. `k_contrib[i][j]` lists the
/// configuration indices in which chain `i` occupies state `j`.
#[derive(Debug, Clone)]
pub struct RealizationTable {
    /// State index of chain `i` in joint configuration `r`; shape `[d][k^d]`.
    pub realizations: Array2<usize>,
    k_contrib: Vec<Vec<Vec<usize>>>,
    pub d: usize,
    pub k: usize,
}

impl RealizationTable {
    /// Configuration indices where chain `i` is in state `j`.
    pub fn k_contrib(&self, i: usize, j: usize) -> &[usize] {
        &self.k_contrib[i][j]
    }

    pub fn n_configs(&self) -> usize {
        self.realizations.dim().1
    }

    /// State of chain `i` in configuration `r`.
    pub fn state_of(&self, i: usize, r: usize) -> usize {
        self.realizations[[i, r]]
    }
}

/// Builds the realization table for the spec's `(d, k)`.
pub fn enumerate_realizations(spec: &ModelSpec) -> Result<RealizationTable> {
    let n = spec.n_configs()?;
    let (d, k) = (spec.d, spec.k);
    let mut realizations = Array2::<usize>::zeros((d, n));
    for r in 0..n {
        let mut rem = r;
        for i in (0..d).rev() {
            realizations[[i, r]] = rem % k;
            rem /= k;
        }
    }
    let mut k_contrib = vec![vec![Vec::new(); k]; d];
    for i in 0..d {
        for r in 0..n {
            k_contrib[i][realizations[[i, r]]].push(r);
        }
    }
    Ok(RealizationTable { realizations, k_contrib, d, k })
}

/// Checks every parameter invariant: shapes, stochastic columns of exp(A),
/// stochastic rows of pi, symmetric positive-definite C.
pub fn validate_model(params: &ModelParams, spec: &ModelSpec) -> Result<()> {
    let (d, o, k) = (spec.d, spec.o, spec.k);
    if params.w.dim() != (d, o, k) {
        return Err(Error::ShapeMismatch(format!(
            "W has shape {:?}, expected ({d}, {o}, {k})",
            params.w.dim()
        )));
    }
    if params.a_log.dim() != (d, k, k) {
        return Err(Error::ShapeMismatch(format!(
            "A has shape {:?}, expected ({d}, {k}, {k})",
            params.a_log.dim()
        )));
    }
    if params.c.dim() != (o, o) {
        return Err(Error::ShapeMismatch(format!(
            "C has shape {:?}, expected ({o}, {o})",
            params.c.dim()
        )));
    }
    if params.pi.dim() != (d, k) {
        return Err(Error::ShapeMismatch(format!(
            "pi has shape {:?}, expected ({d}, {k})",
            params.pi.dim()
        )));
    }

    for i in 0..d {
        for l in 0..k {
            let sum: f64 = (0..k).map(|j| params.a_log[[i, j, l]].exp()).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::NonStochasticColumn(format!(
                    "exp(A) chain {i} column {l} sums to {sum}"
                )));
            }
        }
        let pi_sum: f64 = (0..k).map(|j| params.pi[[i, j]]).sum();
        if (pi_sum - 1.0).abs() > 1e-9 {
            return Err(Error::NonStochasticColumn(format!(
                "pi chain {i} sums to {pi_sum}"
            )));
        }
        if (0..k).any(|j| params.pi[[i, j]] < 0.0) {
            return Err(Error::NonStochasticColumn(format!(
                "pi chain {i} has a negative entry"
            )));
        }
    }

    let scale = params.c.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
    for i in 0..o {
        for j in (i + 1)..o {
            if (params.c[[i, j]] - params.c[[j, i]]).abs() > 1e-12 * scale {
                return Err(Error::NonPositiveDefiniteCovariance(format!(
                    "C is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let c_mat = nalgebra::DMatrix::from_fn(o, o, |i, j| params.c[[i, j]]);
    let eig = nalgebra::SymmetricEigen::new(c_mat);
    if let Some(min) = eig.eigenvalues.iter().cloned().reduce(f64::min) {
        if min <= 0.0 {
            return Err(Error::NonPositiveDefiniteCovariance(format!(
                "smallest eigenvalue {min:e}"
            )));
        }
    }
    Ok(())
}

/// Removes the mean ambiguity of W: for every observable component, chains
/// past the first are shifted to zero mean along the state axis and the
/// removed means are added to chain 0. The combined mean `sum_i W[i] . s` is
/// unchanged for every one-hot assignment; the transform is idempotent.
pub fn canonicalize_weights(w: &Array3<f64>) -> Array3<f64> {
    let (d, o, k) = w.dim();
    let mut out = w.clone();
    for j in 0..o {
        let mut shifted = 0.0;
        for i in 1..d {
            let mu: f64 = (0..k).map(|l| w[[i, j, l]]).sum::<f64>() / k as f64;
            for l in 0..k {
                out[[i, j, l]] -= mu;
            }
            shifted += mu;
        }
        for l in 0..k {
            out[[0, j, l]] += shifted;
        }
    }
    out
}

/// Random parameters for restart initialization. W entries are uniform in
/// `(-data_scale, data_scale)`, exp(A) columns and pi rows are normalized
/// random probability vectors, and C is diagonal with the supplied
/// per-component variances (identity when absent). Deterministic given the
/// seed; the result always passes [`validate_model`].
pub fn random_init(
    spec: &ModelSpec,
    seed: u64,
    data_scale: f64,
    data_variance: Option<&[f64]>,
) -> ModelParams {
    let (d, o, k) = (spec.d, spec.o, spec.k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = if data_scale > 0.0 { data_scale } else { 1.0 };
    let w = Array3::from_shape_fn((d, o, k), |_| rng.gen_range(-scale..scale));

    let mut a_log = Array3::<f64>::zeros((d, k, k));
    for i in 0..d {
        for l in 0..k {
            let mut col: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
            let sum: f64 = col.iter().sum();
            for v in &mut col {
                *v /= sum;
            }
            for (j, v) in col.iter().enumerate() {
                a_log[[i, j, l]] = v.ln();
            }
        }
    }

    let mut pi = Array2::<f64>::zeros((d, k));
    for i in 0..d {
        let row: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
        let sum: f64 = row.iter().sum();
        for (j, v) in row.iter().enumerate() {
            pi[[i, j]] = v / sum;
        }
    }

    let mut c = Array2::<f64>::eye(o);
    if let Some(var) = data_variance {
        for j in 0..o.min(var.len()) {
            c[[j, j]] = var[j].max(1e-12);
        }
    }

    ModelParams { w, a_log, c, pi }
}

/// Clamps a probability vector to `[floor, 1 - floor]` and renormalizes.
pub fn clamp_probabilities(p: &mut [f64], floor: f64) {
    for v in p.iter_mut() {
        *v = v.clamp(floor, 1.0 - floor);
    }
    let sum: f64 = p.iter().sum();
    if sum > 0.0 {
        for v in p.iter_mut() {
            *v /= sum;
        }
    }
}

// ---------------------------------------------------------------------------
// JSON serialization of model parameters (format_version "1")
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsFile {
    format_version: String,
    spec: ModelSpec,
    #[serde(rename = "W")]
    w: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "A_log")]
    a_log: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
    pi: Vec<Vec<f64>>,
}

fn tensor3_to_vec(a: &Array3<f64>) -> Vec<Vec<Vec<f64>>> {
    a.outer_iter()
        .map(|m| m.outer_iter().map(|r| r.to_vec()).collect())
        .collect()
}

fn tensor2_to_vec(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn vec_to_tensor3(v: &[Vec<Vec<f64>>]) -> Result<Array3<f64>> {
    let d0 = v.len();
    let d1 = v.first().map_or(0, |m| m.len());
    let d2 = v.first().and_then(|m| m.first()).map_or(0, |r| r.len());
    let mut out = Array3::zeros((d0, d1, d2));
    for (i, m) in v.iter().enumerate() {
        if m.len() != d1 {
            return Err(Error::ShapeMismatch("ragged tensor in params JSON".into()));
        }
        for (j, r) in m.iter().enumerate() {
            if r.len() != d2 {
                return Err(Error::ShapeMismatch("ragged tensor in params JSON".into()));
            }
            for (l, &x) in r.iter().enumerate() {
                out[[i, j, l]] = x;
            }
        }
    }
    Ok(out)
}

fn vec_to_tensor2(v: &[Vec<f64>]) -> Result<Array2<f64>> {
    let d0 = v.len();
    let d1 = v.first().map_or(0, |r| r.len());
    let mut out = Array2::zeros((d0, d1));
    for (i, r) in v.iter().enumerate() {
        if r.len() != d1 {
            return Err(Error::ShapeMismatch("ragged matrix in params JSON".into()));
        }
        for (j, &x) in r.iter().enumerate() {
            out[[i, j]] = x;
        }
    }
    Ok(out)
}

/// Serializes parameters to the versioned JSON document.
pub fn params_to_json(params: &ModelParams, spec: &ModelSpec) -> String {
    let file = ParamsFile {
        format_version: "1".to_string(),
        spec: *spec,
        w: tensor3_to_vec(&params.w),
        a_log: tensor3_to_vec(&params.a_log),
        c: tensor2_to_vec(&params.c),
        pi: tensor2_to_vec(&params.pi),
    };
    serde_json::to_string_pretty(&file).expect("params serialize")
}

/// Parses the versioned JSON document back into `(params, spec)`.
pub fn params_from_json(text: &str) -> Result<(ModelParams, ModelSpec)> {
    let file: ParamsFile = serde_json::from_str(text)
        .map_err(|e| Error::ShapeMismatch(format!("params JSON parse error: {e}")))?;
    if file.format_version != "1" {
        return Err(Error::ShapeMismatch(format!(
            "unsupported params format_version {}",
            file.format_version
        )));
    }
    let params = ModelParams {
        w: vec_to_tensor3(&file.w)?,
        a_log: vec_to_tensor3(&file.a_log)?,
        c: vec_to_tensor2(&file.c)?,
        pi: vec_to_tensor2(&file.pi)?,
    };
    validate_model(&params, &file.spec)?;
    Ok((params, file.spec))
}

/// Mean observable for one joint configuration: `sum_i W[i][:, state_of(i)]`.
pub fn configuration_mean(w: &Array3<f64>, table: &RealizationTable, r: usize) -> Vec<f64> {
    let (d, o, _) = w.dim();
    let mut mu = vec![0.0; o];
    for i in 0..d {
        let s = table.state_of(i, r);
        for j in 0..o {
            mu[j] += w[[i, j, s]];
        }
    }
    mu
}

/// Sum of W means per chain along the state axis, used to test canonical form.
pub fn chain_state_means(w: &Array3<f64>) -> Array2<f64> {
    let k = w.dim().2 as f64;
    w.sum_axis(Axis(2)) / k
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    fn simple_params(d: usize, o: usize, k: usize) -> ModelParams {
        let spec = ModelSpec { t_len: 4, d, o, k };
        random_init(&spec, 7, 1.0, None)
    }

    #[test]
    fn count_dim_matches_formula_examples() {
        assert_eq!(count_dim(&ModelSpec { t_len: 1, d: 2, o: 1, k: 2 }), 10);
        assert_eq!(count_dim(&ModelSpec { t_len: 1, d: 1, o: 1, k: 2 }), 6);
        assert_eq!(count_dim(&ModelSpec { t_len: 1, d: 1, o: 1, k: 1 }), 2);
    }

    #[test]
    fn count_dim_monotone_in_each_dimension() {
        for d in 1..4 {
            for o in 1..4 {
                for k in 2..5 {
                    let base = count_dim(&ModelSpec { t_len: 1, d, o, k });
                    assert!(count_dim(&ModelSpec { t_len: 1, d: d + 1, o, k }) > base);
                    assert!(count_dim(&ModelSpec { t_len: 1, d, o: o + 1, k }) > base);
                    assert!(count_dim(&ModelSpec { t_len: 1, d, o, k: k + 1 }) > base);
                }
            }
        }
    }

    #[test]
    fn validate_accepts_valid_model() {
        let spec = ModelSpec { t_len: 4, d: 1, o: 1, k: 2 };
        let params = ModelParams {
            w: Array3::from_shape_vec((1, 1, 2), vec![0.0, 1.0]).unwrap(),
            a_log: Array3::from_shape_vec((1, 2, 2), vec![0.9_f64.ln(), 0.2_f64.ln(), 0.1_f64.ln(), 0.8_f64.ln()]).unwrap(),
            c: arr2(&[[1.0]]),
            pi: arr2(&[[0.5, 0.5]]),
        };
        validate_model(&params, &spec).unwrap();
    }

    #[test]
    fn validate_rejects_nonstochastic_pi() {
        let spec = ModelSpec { t_len: 4, d: 1, o: 1, k: 2 };
        let mut params = simple_params(1, 1, 2);
        params.pi = arr2(&[[0.6, 0.6]]);
        match validate_model(&params, &spec) {
            Err(Error::NonStochasticColumn(_)) => {}
            other => panic!("expected NonStochasticColumn, got {other:?}"),
        }
    }

    #[test]
    fn validate_rejects_indefinite_covariance() {
        let spec = ModelSpec { t_len: 4, d: 1, o: 2, k: 2 };
        let mut params = simple_params(1, 2, 2);
        params.c = arr2(&[[1.0, 2.0], [2.0, 1.0]]); // eigenvalues 3, -1
        match validate_model(&params, &spec) {
            Err(Error::NonPositiveDefiniteCovariance(_)) => {}
            other => panic!("expected NonPositiveDefiniteCovariance, got {other:?}"),
        }
    }

    #[test]
    fn validate_rejects_bad_shape() {
        let spec = ModelSpec { t_len: 4, d: 2, o: 1, k: 2 };
        let params = simple_params(1, 1, 2);
        assert!(matches!(validate_model(&params, &spec), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn canonicalize_matches_hand_example() {
        // d=2, o=1, k=2: chain 2 mean 4 moves to chain 1.
        let w = Array3::from_shape_vec((2, 1, 2), vec![1.0, 2.0, 3.0, 5.0]).unwrap();
        let canon = canonicalize_weights(&w);
        assert_abs_diff_eq!(canon[[0, 0, 0]], 5.0);
        assert_abs_diff_eq!(canon[[0, 0, 1]], 6.0);
        assert_abs_diff_eq!(canon[[1, 0, 0]], -1.0);
        assert_abs_diff_eq!(canon[[1, 0, 1]], 1.0);
    }

    #[test]
    fn canonicalize_preserves_configuration_means_and_is_idempotent() {
        let spec = ModelSpec { t_len: 4, d: 3, o: 2, k: 3 };
        let params = random_init(&spec, 3, 2.0, None);
        let table = enumerate_realizations(&spec).unwrap();
        let canon = canonicalize_weights(&params.w);
        for r in 0..table.n_configs() {
            let before = configuration_mean(&params.w, &table, r);
            let after = configuration_mean(&canon, &table, r);
            for (a, b) in before.iter().zip(after.iter()) {
                assert!((a - b).abs() <= 1e-12, "mean changed: {a} vs {b}");
            }
        }
        let twice = canonicalize_weights(&canon);
        for (a, b) in canon.iter().zip(twice.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
        // chains past the first are zero-mean afterwards
        let means = chain_state_means(&canon);
        for i in 1..3 {
            for j in 0..2 {
                assert!(means[[i, j]].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn canonicalize_zero_is_zero() {
        let w = Array3::<f64>::zeros((2, 1, 2));
        assert_eq!(canonicalize_weights(&w), w);
    }

    #[test]
    fn random_init_is_deterministic_and_valid() {
        let spec = ModelSpec { t_len: 8, d: 2, o: 2, k: 3 };
        let a = random_init(&spec, 42, 1.5, None);
        let b = random_init(&spec, 42, 1.5, None);
        assert_eq!(a, b);
        validate_model(&a, &spec).unwrap();
        let c = random_init(&spec, 43, 1.5, None);
        assert!(a.w != c.w, "different seeds must differ");
    }

    #[test]
    fn realization_table_matches_base_k_expansion() {
        let spec = ModelSpec { t_len: 1, d: 2, o: 1, k: 2 };
        let table = enumerate_realizations(&spec).unwrap();
        assert_eq!(
            table.realizations,
            arr2(&[[0, 0, 1, 1], [0, 1, 0, 1]])
        );
        assert_eq!(table.k_contrib(1, 1), &[1, 3]);

        let spec = ModelSpec { t_len: 1, d: 1, o: 1, k: 3 };
        let table = enumerate_realizations(&spec).unwrap();
        assert_eq!(table.realizations, arr2(&[[0, 1, 2]]));
    }

    #[test]
    fn realization_round_trip() {
        let spec = ModelSpec { t_len: 1, d: 3, o: 1, k: 3 };
        let table = enumerate_realizations(&spec).unwrap();
        for r in 0..table.n_configs() {
            let mut rebuilt = 0;
            for i in 0..3 {
                rebuilt = rebuilt * 3 + table.state_of(i, r);
            }
            assert_eq!(rebuilt, r);
        }
        // the k lists partition the configurations for each chain
        for i in 0..3 {
            let mut seen: Vec<usize> = (0..3).flat_map(|j| table.k_contrib(i, j).to_vec()).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..table.n_configs()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn configuration_overflow_is_rejected() {
        let spec = ModelSpec { t_len: 1, d: 200, o: 1, k: 9 };
        assert!(matches!(
            spec.n_configs(),
            Err(Error::ConfigurationOverflow { .. })
        ));
    }

    #[test]
    fn params_json_round_trip() {
        let spec = ModelSpec { t_len: 16, d: 2, o: 2, k: 2 };
        let params = random_init(&spec, 11, 1.0, Some(&[0.5, 2.0]));
        let text = params_to_json(&params, &spec);
        assert!(text.contains("\"format_version\": \"1\""));
        let (back, back_spec) = params_from_json(&text).unwrap();
        assert_eq!(back_spec, spec);
        for (a, b) in params.w.iter().zip(back.w.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 0.0);
        }
        for (a, b) in params.a_log.iter().zip(back.a_log.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 0.0);
        }
    }
}
