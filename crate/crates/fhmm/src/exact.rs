//! Exact E-step over the joint configuration space: scaled forward/backward
//! recursions, log likelihood, and the posterior expectation tensors consumed
//! by the M-step.

use ndarray::{Array2, Array3, Array4, Array5, ArrayView2};

use crate::error::{Error, Result};
use crate::model::{Dataset, ModelParams, RealizationTable};

/// Additive floor on unnormalized messages; keeps deterministic transitions
/// from producing exact-zero rows.
pub(crate) const MESSAGE_EPS: f64 = 1e-300;

/// Scaled forward messages and their per-step normalizers.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// Normalized forward messages, shape `[T][k^d]`; rows sum to 1.
    pub alpha_hat: Array2<f64>,
    /// Pre-normalization row sums; `sum_t ln c[t]` is the log likelihood.
    pub c: Vec<f64>,
}

/// Posterior moments of the hidden states.
///
/// `s_exp[t][i][j]` is the marginal of chain `i` state `j` at time `t`;
/// `ss_exp[t][i][j][a][b]` the same-time pair moment `<s_a^i s_b^j>`; and
/// `sstm1_exp[t][i][a][b]` the same-chain cross-time moment
/// `<s_a^{i,t} s_b^{i,t-1}>` (row `t = 0` unused).
#[derive(Debug, Clone)]
pub struct Expectations {
    pub s_exp: Array3<f64>,
    pub ss_exp: Array5<f64>,
    pub sstm1_exp: Array4<f64>,
}

impl Expectations {
    /// Asserts the normalization identities the M-step relies on.
    pub fn check_invariants(&self, tol: f64) -> Result<()> {
        let (t_len, d, k) = self.s_exp.dim();
        for t in 0..t_len {
            for i in 0..d {
                let sum: f64 = (0..k).map(|j| self.s_exp[[t, i, j]]).sum();
                if (sum - 1.0).abs() > tol {
                    return Err(Error::NumericalUnderflow(format!(
                        "s_exp[{t}][{i}] sums to {sum}"
                    )));
                }
                for a in 0..k {
                    for b in 0..k {
                        let expect = if a == b { self.s_exp[[t, i, a]] } else { 0.0 };
                        let got = self.ss_exp[[t, i, i, a, b]];
                        if (got - expect).abs() > tol {
                            return Err(Error::NumericalUnderflow(format!(
                                "ss_exp same-chain block off-diagonal at t={t}, i={i}"
                            )));
                        }
                    }
                }
            }
        }
        for t in 1..t_len {
            for i in 0..d {
                let mut sum = 0.0;
                for a in 0..k {
                    for b in 0..k {
                        sum += self.sstm1_exp[[t, i, a, b]];
                    }
                }
                if (sum - 1.0).abs() > 100.0 * tol {
                    return Err(Error::NumericalUnderflow(format!(
                        "sstm1_exp[{t}][{i}] sums to {sum}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Gaussian emission kernel with a cached factorization of C, reused across
/// all time steps and configurations. The covariance is inverted with a
/// general LU so that slightly asymmetric matrices (finite-difference probes
/// of individual entries) remain evaluable.
pub(crate) struct GaussianEmission {
    pub c_inv: nalgebra::DMatrix<f64>,
    pub norm: f64,
    pub o: usize,
}

impl GaussianEmission {
    pub fn new(c: &Array2<f64>) -> Result<Self> {
        let o = c.dim().0;
        let m = nalgebra::DMatrix::from_fn(o, o, |i, j| c[[i, j]]);
        let det = m.clone().lu().determinant();
        if !(det > 0.0) || !det.is_finite() {
            return Err(Error::SingularCovariance);
        }
        let c_inv = m.try_inverse().ok_or(Error::SingularCovariance)?;
        let norm = (2.0 * std::f64::consts::PI).powf(-(o as f64) / 2.0) / det.sqrt();
        Ok(Self { c_inv, norm, o })
    }

    /// Density of a residual vector `y - mu`.
    pub fn density(&self, resid: &[f64]) -> f64 {
        let mut quad = 0.0;
        for a in 0..self.o {
            let mut acc = 0.0;
            for b in 0..self.o {
                acc += self.c_inv[(a, b)] * resid[b];
            }
            quad += resid[a] * acc;
        }
        self.norm * (-0.5 * quad).exp()
    }
}

/// Per-configuration observable means, shape `[k^d][o]`.
pub(crate) fn configuration_means(params: &ModelParams, table: &RealizationTable) -> Array2<f64> {
    let (d, o, _) = params.w.dim();
    let n = table.n_configs();
    let mut mu = Array2::<f64>::zeros((n, o));
    for r in 0..n {
        for i in 0..d {
            let s = table.state_of(i, r);
            for j in 0..o {
                mu[[r, j]] += params.w[[i, j, s]];
            }
        }
    }
    mu
}

/// Emission densities for every time step and configuration, with an additive
/// probability floor.
pub fn emission_probs(
    params: &ModelParams,
    sample: ArrayView2<'_, f64>,
    table: &RealizationTable,
    floor: f64,
) -> Result<Array2<f64>> {
    let (t_len, o) = sample.dim();
    let n = table.n_configs();
    let emission = GaussianEmission::new(&params.c)?;
    let mu = configuration_means(params, table);
    let mut py = Array2::<f64>::zeros((t_len, n));
    let mut resid = vec![0.0; o];
    for t in 0..t_len {
        for r in 0..n {
            for j in 0..o {
                resid[j] = sample[[t, j]] - mu[[r, j]];
            }
            py[[t, r]] = emission.density(&resid) + floor;
        }
    }
    Ok(py)
}

/// Product of per-chain transition probabilities for every configuration
/// pair: entry `[j][r]` is `prod_i P(state of chain i in j | state in r)`.
pub(crate) fn transition_product(params: &ModelParams, table: &RealizationTable) -> Array2<f64> {
    let n = table.n_configs();
    let d = table.d;
    let a_exp = params.a_exp();
    let mut trans = Array2::<f64>::ones((n, n));
    for j in 0..n {
        for r in 0..n {
            let mut p = 1.0;
            for i in 0..d {
                p *= a_exp[[i, table.state_of(i, j), table.state_of(i, r)]];
            }
            trans[[j, r]] = p;
        }
    }
    trans
}

/// Joint initial probability of configuration `r`, `prod_i pi[i][state]`.
pub(crate) fn joint_pi(params: &ModelParams, table: &RealizationTable, r: usize) -> f64 {
    (0..table.d).map(|i| params.pi[[i, table.state_of(i, r)]]).product()
}

/// Scaled forward recursion.
pub fn forward_pass(
    params: &ModelParams,
    emission: &Array2<f64>,
    table: &RealizationTable,
) -> Result<ForwardResult> {
    let (t_len, n) = emission.dim();
    let trans = transition_product(params, table);
    let mut alpha = Array2::<f64>::zeros((t_len, n));
    let mut c = vec![0.0; t_len];

    for r in 0..n {
        alpha[[0, r]] = joint_pi(params, table, r) * emission[[0, r]] + MESSAGE_EPS;
    }
    normalize_row(&mut alpha, 0, &mut c[0])?;

    for t in 1..t_len {
        for j in 0..n {
            let mut acc = 0.0;
            for r in 0..n {
                acc += trans[[j, r]] * alpha[[t - 1, r]];
            }
            alpha[[t, j]] = acc * emission[[t, j]] + MESSAGE_EPS;
        }
        normalize_row(&mut alpha, t, &mut c[t])?;
    }
    Ok(ForwardResult { alpha_hat: alpha, c })
}

/// Scaled backward recursion; row `T-1` is uniform by construction.
pub fn backward_pass(
    params: &ModelParams,
    emission: &Array2<f64>,
    table: &RealizationTable,
) -> Result<Array2<f64>> {
    let (t_len, n) = emission.dim();
    let trans = transition_product(params, table);
    let mut beta = Array2::<f64>::zeros((t_len, n));
    let mut norm = 0.0;

    for r in 0..n {
        beta[[t_len - 1, r]] = 1.0;
    }
    normalize_row(&mut beta, t_len - 1, &mut norm)?;

    for t in (1..t_len).rev() {
        for j in 0..n {
            let mut acc = 0.0;
            for r in 0..n {
                acc += trans[[r, j]] * emission[[t, r]] * beta[[t, r]];
            }
            beta[[t - 1, j]] = acc + MESSAGE_EPS;
        }
        normalize_row(&mut beta, t - 1, &mut norm)?;
    }
    Ok(beta)
}

fn normalize_row(m: &mut Array2<f64>, t: usize, c_out: &mut f64) -> Result<()> {
    let sum: f64 = m.row(t).sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::NumericalUnderflow(format!(
            "normalizer at step {t} is {sum}"
        )));
    }
    m.row_mut(t).mapv_inplace(|v| v / sum);
    *c_out = sum;
    Ok(())
}

/// Exact posterior expectations and the sample log likelihood.
pub fn exact_estep(
    params: &ModelParams,
    sample: ArrayView2<'_, f64>,
    table: &RealizationTable,
    floor: f64,
) -> Result<(Expectations, f64)> {
    let py = emission_probs(params, sample, table, floor)?;
    let fwd = forward_pass(params, &py, table)?;
    let beta = backward_pass(params, &py, table)?;
    let (t_len, n) = py.dim();
    let (d, k) = (table.d, table.k);
    let log_likelihood: f64 = fwd.c.iter().map(|v| v.ln()).sum();

    // gamma_t ~ alpha_t * beta_t, normalized per t
    let mut gamma = &fwd.alpha_hat * &beta;
    for t in 0..t_len {
        let sum: f64 = gamma.row(t).sum();
        if !(sum > 0.0) {
            return Err(Error::NumericalUnderflow(format!("gamma normalizer at {t}")));
        }
        gamma.row_mut(t).mapv_inplace(|v| v / sum);
    }

    let mut s_exp = Array3::<f64>::from_elem((t_len, d, k), MESSAGE_EPS);
    let mut ss_exp = Array5::<f64>::from_elem((t_len, d, d, k, k), MESSAGE_EPS);
    for t in 0..t_len {
        for r in 0..n {
            let g = gamma[[t, r]];
            for i in 0..d {
                let a = table.state_of(i, r);
                s_exp[[t, i, a]] += g;
                for j in 0..d {
                    let b = table.state_of(j, r);
                    ss_exp[[t, i, j, a, b]] += g;
                }
            }
        }
    }

    // cross-time same-chain moments from the alpha-transition-emission-beta
    // product, normalized per t by the chain-summed total divided by d
    let trans = transition_product(params, table);
    let mut sstm1_exp = Array4::<f64>::from_elem((t_len, d, k, k), MESSAGE_EPS);
    for t in 1..t_len {
        let mut norm_t = MESSAGE_EPS;
        for r in 0..n {
            let w_t = py[[t, r]] * beta[[t, r]];
            for rp in 0..n {
                let v = fwd.alpha_hat[[t - 1, rp]] * trans[[r, rp]] * w_t;
                for i in 0..d {
                    sstm1_exp[[t, i, table.state_of(i, r), table.state_of(i, rp)]] += v;
                }
            }
        }
        for i in 0..d {
            for a in 0..k {
                for b in 0..k {
                    norm_t += sstm1_exp[[t, i, a, b]];
                }
            }
        }
        let denom = norm_t / d as f64;
        for i in 0..d {
            for a in 0..k {
                for b in 0..k {
                    sstm1_exp[[t, i, a, b]] /= denom;
                }
            }
        }
    }

    Ok((Expectations { s_exp, ss_exp, sstm1_exp }, log_likelihood))
}

/// Log likelihood of a whole dataset (sum over samples).
pub fn log_likelihood(
    params: &ModelParams,
    dataset: &Dataset,
    table: &RealizationTable,
    floor: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for s in 0..dataset.n_samples() {
        let sample = dataset.x.index_axis(ndarray::Axis(0), s);
        let py = emission_probs(params, sample, table, floor)?;
        let fwd = forward_pass(params, &py, table)?;
        total += fwd.c.iter().map(|v| v.ln()).sum::<f64>();
    }
    Ok(total)
}
