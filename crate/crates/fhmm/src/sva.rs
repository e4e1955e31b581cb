//! Structured variational approximation: per-chain Markov structure is kept,
//! chains decouple through surrogate emission vectors `h`, and expectations
//! come from a scaled forward-backward pass run on each chain separately.

use ndarray::{Array2, Array3, Array4, Array5, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::exact::{Expectations, GaussianEmission, MESSAGE_EPS};
use crate::model::ModelParams;
use crate::util::{shuffled_pairs, softmax_inplace};

/// Surrogate emissions and the KLD value recorded after each iteration.
#[derive(Debug, Clone)]
pub struct SvaState {
    /// Per-chain emission surrogates, shape `[T][d][k]`; rows sum to 1.
    pub h: Array3<f64>,
    pub kld_trace: Vec<f64>,
}

/// Scaled forward-backward for a single chain with surrogate emissions.
/// Returns per-step marginals `gamma[t][k]`, pairwise marginals
/// `xi[t][current][previous]` (row `t = 0` unused), and the chain log
/// partition function.
fn chain_forward_backward(
    a_exp: &Array2<f64>,
    pi: &[f64],
    h: &Array2<f64>,
) -> (Array2<f64>, Array3<f64>, f64) {
    let (t_len, k) = h.dim();
    let mut alpha = Array2::<f64>::zeros((t_len, k));
    let mut c = vec![0.0; t_len];

    for j in 0..k {
        alpha[[0, j]] = pi[j] * h[[0, j]] + MESSAGE_EPS;
    }
    c[0] = alpha.row(0).sum();
    alpha.row_mut(0).mapv_inplace(|v| v / c[0]);
    for t in 1..t_len {
        for j in 0..k {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a_exp[[j, l]] * alpha[[t - 1, l]];
            }
            alpha[[t, j]] = acc * h[[t, j]] + MESSAGE_EPS;
        }
        c[t] = alpha.row(t).sum();
        alpha.row_mut(t).mapv_inplace(|v| v / c[t]);
    }

    // beta scaled by the forward normalizers so gamma = alpha * beta directly
    let mut beta = Array2::<f64>::zeros((t_len, k));
    for j in 0..k {
        beta[[t_len - 1, j]] = 1.0;
    }
    for t in (1..t_len).rev() {
        for j in 0..k {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a_exp[[l, j]] * h[[t, l]] * beta[[t, l]];
            }
            beta[[t - 1, j]] = acc / c[t];
        }
    }

    let gamma = &alpha * &beta;
    let mut xi = Array3::<f64>::zeros((t_len, k, k));
    for t in 1..t_len {
        for j in 0..k {
            let w = h[[t, j]] * beta[[t, j]] / c[t];
            for l in 0..k {
                xi[[t, j, l]] = alpha[[t - 1, l]] * a_exp[[j, l]] * w;
            }
        }
    }
    let ln_z = c.iter().map(|v| v.ln()).sum();
    (gamma, xi, ln_z)
}

struct Workspace {
    emission: GaussianEmission,
    /// `W[i][:,j]^T C^{-1} W[i][:,j]` per chain and state.
    wcw_diag: Array2<f64>,
}

impl Workspace {
    fn new(params: &ModelParams) -> Result<Self> {
        let (d, o, k) = params.w.dim();
        let emission = GaussianEmission::new(&params.c)?;
        let mut wcw_diag = Array2::<f64>::zeros((d, k));
        for i in 0..d {
            for j in 0..k {
                let mut acc = 0.0;
                for p in 0..o {
                    for q in 0..o {
                        acc += params.w[[i, p, j]]
                            * emission.c_inv[(p, q)]
                            * params.w[[i, q, j]];
                    }
                }
                wcw_diag[[i, j]] = acc;
            }
        }
        Ok(Self { emission, wcw_diag })
    }
}

fn expectations_from_chains(
    params: &ModelParams,
    h: &Array3<f64>,
) -> (Expectations, f64) {
    let (t_len, d, k) = h.dim();
    let a_exp = params.a_exp();
    let mut s_exp = Array3::<f64>::zeros((t_len, d, k));
    let mut sstm1_exp = Array4::<f64>::zeros((t_len, d, k, k));
    let mut ln_z_total = 0.0;
    for i in 0..d {
        let a_chain = Array2::from_shape_fn((k, k), |(a, b)| a_exp[[i, a, b]]);
        let pi_chain: Vec<f64> = (0..k).map(|j| params.pi[[i, j]]).collect();
        let h_chain = Array2::from_shape_fn((t_len, k), |(t, j)| h[[t, i, j]]);
        let (gamma, xi, ln_z) = chain_forward_backward(&a_chain, &pi_chain, &h_chain);
        ln_z_total += ln_z;
        for t in 0..t_len {
            for j in 0..k {
                s_exp[[t, i, j]] = gamma[[t, j]];
            }
        }
        for t in 1..t_len {
            for a in 0..k {
                for b in 0..k {
                    sstm1_exp[[t, i, a, b]] = xi[[t, a, b]];
                }
            }
        }
    }
    let mut ss_exp = Array5::<f64>::zeros((t_len, d, d, k, k));
    for t in 0..t_len {
        for i in 0..d {
            for j in 0..d {
                for a in 0..k {
                    for b in 0..k {
                        ss_exp[[t, i, j, a, b]] = if i == j {
                            if a == b {
                                s_exp[[t, i, a]]
                            } else {
                                0.0
                            }
                        } else {
                            s_exp[[t, i, a]] * s_exp[[t, j, b]]
                        };
                    }
                }
            }
        }
    }
    (Expectations { s_exp, ss_exp, sstm1_exp }, ln_z_total)
}

/// SVA E-step: alternates shuffled `h` sweeps (each excluding the chain's
/// own reconstruction from the residual) with per-chain forward-backward
/// refreshes of the expectations, until the KLD change falls below `kld_tol`
/// or `max_iter` iterations have run.
pub fn sva_estep(
    params: &ModelParams,
    sample: ArrayView2<'_, f64>,
    max_iter: usize,
    kld_tol: f64,
    floor: f64,
    seed: u64,
) -> Result<(Expectations, SvaState)> {
    let (d, o, k) = params.w.dim();
    let t_len = sample.dim().0;
    let ws = Workspace::new(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut h = Array3::<f64>::from_elem((t_len, d, k), 1.0 / k as f64);
    let (mut expectations, _) = expectations_from_chains(params, &h);
    let mut kld_trace: Vec<f64> = Vec::new();
    let mut logits = vec![0.0; k];

    for _iter in 0..max_iter {
        for (t, i) in shuffled_pairs(t_len, d, &mut rng) {
            // residual excluding chain i's reconstruction
            let mut y_err = vec![0.0; o];
            for p in 0..o {
                y_err[p] = sample[[t, p]];
            }
            for m in 0..d {
                if m == i {
                    continue;
                }
                for j in 0..k {
                    let sv = expectations.s_exp[[t, m, j]];
                    for p in 0..o {
                        y_err[p] -= params.w[[m, p, j]] * sv;
                    }
                }
            }
            let mut cinv_err = vec![0.0; o];
            for p in 0..o {
                let mut acc = 0.0;
                for q in 0..o {
                    acc += ws.emission.c_inv[(p, q)] * y_err[q];
                }
                cinv_err[p] = acc;
            }
            for (j, logit) in logits.iter_mut().enumerate() {
                let mut wv = 0.0;
                for p in 0..o {
                    wv += params.w[[i, p, j]] * cinv_err[p];
                }
                *logit = wv - 0.5 * ws.wcw_diag[[i, j]];
            }
            softmax_inplace(&mut logits);
            let mut sum = 0.0;
            for v in logits.iter_mut() {
                *v = v.clamp(floor, 1.0 - floor);
                sum += *v;
            }
            for (j, v) in logits.iter().enumerate() {
                h[[t, i, j]] = v / sum;
            }
        }
        let (refreshed, ln_z) = expectations_from_chains(params, &h);
        expectations = refreshed;
        let kld = sva_kld_inner(params, sample, &h, &expectations, ln_z, &ws);
        let done = kld_trace
            .last()
            .is_some_and(|prev: &f64| (prev - kld).abs() < kld_tol);
        kld_trace.push(kld);
        if done {
            break;
        }
    }

    Ok((expectations, SvaState { h, kld_trace }))
}

/// KLD between the structured distribution defined by `h` and the model
/// posterior, constant terms included.
pub fn sva_kld(params: &ModelParams, sample: ArrayView2<'_, f64>, h: &Array3<f64>) -> Result<f64> {
    let ws = Workspace::new(params)?;
    let (expectations, ln_z) = expectations_from_chains(params, h);
    Ok(sva_kld_inner(params, sample, h, &expectations, ln_z, &ws))
}

fn sva_kld_inner(
    params: &ModelParams,
    sample: ArrayView2<'_, f64>,
    h: &Array3<f64>,
    expectations: &Expectations,
    chain_ln_z: f64,
    ws: &Workspace,
) -> f64 {
    let (d, o, k) = params.w.dim();
    let t_len = sample.dim().0;

    let mut kl = -chain_ln_z;
    for t in 0..t_len {
        for i in 0..d {
            for j in 0..k {
                kl += expectations.s_exp[[t, i, j]] * h[[t, i, j]].max(f64::MIN_POSITIVE).ln();
            }
        }
    }

    for t in 0..t_len {
        let mut y_hat = vec![0.0; o];
        for i in 0..d {
            for j in 0..k {
                let sv = expectations.s_exp[[t, i, j]];
                for p in 0..o {
                    y_hat[p] += params.w[[i, p, j]] * sv;
                }
            }
        }
        for p in 0..o {
            let mut cy = 0.0;
            let mut cyh = 0.0;
            for q in 0..o {
                cy += ws.emission.c_inv[(p, q)] * sample[[t, q]];
                cyh += ws.emission.c_inv[(p, q)] * y_hat[q];
            }
            kl += 0.5 * sample[[t, p]] * cy - sample[[t, p]] * cyh + 0.5 * y_hat[p] * cyh;
        }
        // same-chain second moments are diagonal, not factorized
        for i in 0..d {
            let mut own = vec![0.0; o];
            for j in 0..k {
                let sv = expectations.s_exp[[t, i, j]];
                for p in 0..o {
                    own[p] += params.w[[i, p, j]] * sv;
                }
            }
            let mut quad_own = 0.0;
            for p in 0..o {
                let mut acc = 0.0;
                for q in 0..o {
                    acc += ws.emission.c_inv[(p, q)] * own[q];
                }
                quad_own += own[p] * acc;
            }
            kl -= 0.5 * quad_own;
            for j in 0..k {
                kl += 0.5 * ws.wcw_diag[[i, j]] * expectations.s_exp[[t, i, j]];
            }
        }
    }

    let det_c = {
        let m = nalgebra::DMatrix::from_fn(o, o, |i, j| params.c[[i, j]]);
        m.lu().determinant()
    };
    kl + (d * (t_len - 1)) as f64 * (k as f64).ln()
        + (t_len as f64 / 2.0)
            * ((o as f64) * (2.0 * std::f64::consts::PI).ln() + det_c.ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::exact_estep;
    use crate::model::{enumerate_realizations, random_init, ModelSpec, DEFAULT_ZERO_PROBABILITY};
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    #[test]
    fn single_chain_matches_exact_inference() {
        let sp = ModelSpec { t_len: 15, d: 1, o: 1, k: 3 };
        let params = random_init(&sp, 21, 1.0, None);
        let table = enumerate_realizations(&sp).unwrap();
        let sample = Array2::from_shape_fn((15, 1), |(t, _)| (0.5 * t as f64).sin());
        let (exact, _) = exact_estep(
            &params,
            sample.view(),
            &table,
            DEFAULT_ZERO_PROBABILITY,
        )
        .unwrap();
        let (approx, state) = sva_estep(
            &params,
            sample.view(),
            10,
            1e-12,
            DEFAULT_ZERO_PROBABILITY,
            3,
        )
        .unwrap();
        for (a, b) in exact.s_exp.iter().zip(approx.s_exp.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
        for t in 1..15 {
            for a in 0..3 {
                for b in 0..3 {
                    assert_abs_diff_eq!(
                        exact.sstm1_exp[[t, 0, a, b]],
                        approx.sstm1_exp[[t, 0, a, b]],
                        epsilon = 1e-6
                    );
                }
            }
        }
        // h rows normalized
        for t in 0..15 {
            let sum: f64 = (0..3).map(|j| state.h[[t, 0, j]]).sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn kld_trace_non_increasing() {
        let sp = ModelSpec { t_len: 18, d: 2, o: 1, k: 2 };
        let params = random_init(&sp, 8, 0.8, None);
        let sample = Array2::from_shape_fn((18, 1), |(t, _)| (0.4 * t as f64).cos());
        let (_, state) = sva_estep(
            &params,
            sample.view(),
            25,
            0.0,
            DEFAULT_ZERO_PROBABILITY,
            17,
        )
        .unwrap();
        assert!(state.kld_trace.len() >= 2);
        for w in state.kld_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "KLD rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn expectations_satisfy_invariants() {
        let sp = ModelSpec { t_len: 10, d: 3, o: 2, k: 2 };
        let params = random_init(&sp, 4, 1.0, None);
        let sample = Array2::from_shape_fn((10, 2), |(t, j)| 0.3 * t as f64 - j as f64 * 0.1);
        let (exp, _) = sva_estep(
            &params,
            sample.view(),
            15,
            1e-10,
            DEFAULT_ZERO_PROBABILITY,
            9,
        )
        .unwrap();
        exp.check_invariants(1e-8).unwrap();
    }

    #[test]
    fn kld_is_pure() {
        let sp = ModelSpec { t_len: 6, d: 2, o: 1, k: 2 };
        let params = random_init(&sp, 2, 1.0, None);
        let sample = Array2::from_shape_fn((6, 1), |(t, _)| 0.1 * t as f64);
        let h = Array3::from_elem((6, 2, 2), 0.5);
        let a = sva_kld(&params, sample.view(), &h).unwrap();
        let b = sva_kld(&params, sample.view(), &h).unwrap();
        assert_eq!(a, b);
    }
}
