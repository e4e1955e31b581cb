//! Completely factorized mean-field E-step.
//!
//! The variational distribution factorizes over every `(t, chain)` pair with
//! parameters `m[t][i][k]`. Each update is the exact coordinate minimizer of
//! the KLD (a softmax of the local field), so the KLD trace is non-increasing
//! up to the probability-floor clipping.

use ndarray::{Array2, Array3, Array4, Array5, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::exact::{Expectations, GaussianEmission};
use crate::model::ModelParams;
use crate::util::{shuffled_pairs, softmax_inplace};

/// Variational parameters and the KLD value recorded after each sweep.
#[derive(Debug, Clone)]
pub struct MeanFieldState {
    /// Variational marginals, shape `[T][d][k]`; rows sum to 1.
    pub m: Array3<f64>,
    pub kld_trace: Vec<f64>,
}

/// Precomputed fields shared by the update and the KLD evaluation.
struct Workspace {
    /// `W[i][:,j]^T C^{-1} W[i][:,j]` per chain and state.
    wcw_diag: Array2<f64>,
    emission: GaussianEmission,
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
        Ok(Self { wcw_diag, emission })
    }
}

fn reconstruction(params: &ModelParams, m: &Array3<f64>, t: usize) -> Vec<f64> {
    let (d, o, k) = params.w.dim();
    let mut y_hat = vec![0.0; o];
    for i in 0..d {
        for j in 0..k {
            let mv = m[[t, i, j]];
            for p in 0..o {
                y_hat[p] += params.w[[i, p, j]] * mv;
            }
        }
    }
    y_hat
}

/// Mean-field fixed-point E-step. Sweeps a shuffled `(t, chain)` order,
/// updating each `m[t][i]` by the softmax equation with the `t = 0` and
/// `t = T-1` boundary variants, until the KLD change falls below `kld_tol`
/// or `max_iter` sweeps have run.
#[allow(clippy::too_many_arguments)]
pub fn mean_field_estep(
    params: &ModelParams,
    sample: ArrayView2<'_, f64>,
    init: Option<&MeanFieldState>,
    max_iter: usize,
    kld_tol: f64,
    floor: f64,
    seed: u64,
) -> Result<(Expectations, MeanFieldState)> {
    let (d, o, k) = params.w.dim();
    let t_len = sample.dim().0;
    let ws = Workspace::new(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut m = match init {
        Some(state) => state.m.clone(),
        None => Array3::<f64>::from_elem((t_len, d, k), 1.0 / k as f64),
    };

    let mut kld_trace = Vec::with_capacity(max_iter);
    let mut logits = vec![0.0; k];
    for _sweep in 0..max_iter {
        for (t, i) in shuffled_pairs(t_len, d, &mut rng) {
            let y_hat = reconstruction(params, &m, t);
            // field = C^{-1} (y - y_hat + W[i] m[t,i]); adding back the
            // own-chain reconstruction excludes it from the error term
            let mut own = vec![0.0; o];
            for j in 0..k {
                let mv = m[[t, i, j]];
                for p in 0..o {
                    own[p] += params.w[[i, p, j]] * mv;
                }
            }
            let mut field = vec![0.0; o];
            for p in 0..o {
                let mut acc = 0.0;
                for q in 0..o {
                    acc += ws.emission.c_inv[(p, q)] * (sample[[t, q]] - y_hat[q] + own[q]);
                }
                field[p] = acc;
            }
            for (j, logit) in logits.iter_mut().enumerate() {
                let mut wv = 0.0;
                for p in 0..o {
                    wv += params.w[[i, p, j]] * field[p];
                }
                let am = if t == 0 {
                    params.pi[[i, j]].max(f64::MIN_POSITIVE).ln()
                } else {
                    (0..k).map(|l| params.a_log[[i, j, l]] * m[[t - 1, i, l]]).sum()
                };
                let ma = if t == t_len - 1 {
                    0.0
                } else {
                    (0..k).map(|l| m[[t + 1, i, l]] * params.a_log[[i, l, j]]).sum()
                };
                *logit = wv - 0.5 * ws.wcw_diag[[i, j]] - 1.0 + am + ma;
            }
            softmax_inplace(&mut logits);
            let mut sum = 0.0;
            for v in logits.iter_mut() {
                *v = v.clamp(floor, 1.0 - floor);
                sum += *v;
            }
            for (j, v) in logits.iter().enumerate() {
                m[[t, i, j]] = v / sum;
            }
        }
        let kld = mean_field_kld_inner(params, sample, &m, &ws);
        let done = kld_trace
            .last()
            .is_some_and(|prev: &f64| (prev - kld).abs() < kld_tol);
        kld_trace.push(kld);
        if done {
            break;
        }
    }

    let expectations = expectations_from_m(&m);
    Ok((expectations, MeanFieldState { m, kld_trace }))
}

/// Expectation tensors assembled from variational marginals: first moments
/// are `m` itself, cross-chain second moments are outer products, same-chain
/// blocks are diagonal, and cross-time moments are outer products of
/// consecutive marginals.
pub fn expectations_from_m(m: &Array3<f64>) -> Expectations {
    let (t_len, d, k) = m.dim();
    let s_exp = m.clone();
    let mut ss_exp = Array5::<f64>::zeros((t_len, d, d, k, k));
    let mut sstm1_exp = Array4::<f64>::zeros((t_len, d, k, k));
    for t in 0..t_len {
        for i in 0..d {
            for j in 0..d {
                for a in 0..k {
                    for b in 0..k {
                        ss_exp[[t, i, j, a, b]] = if i == j {
                            if a == b {
                                m[[t, i, a]]
                            } else {
                                0.0
                            }
                        } else {
                            m[[t, i, a]] * m[[t, j, b]]
                        };
                    }
                }
            }
        }
        if t > 0 {
            for i in 0..d {
                for a in 0..k {
                    for b in 0..k {
                        sstm1_exp[[t, i, a, b]] = m[[t, i, a]] * m[[t - 1, i, b]];
                    }
                }
            }
        }
    }
    Expectations { s_exp, ss_exp, sstm1_exp }
}

/// KLD between the factorized distribution and the model posterior, constant
/// terms included so values are comparable across sweeps.
pub fn mean_field_kld(
    params: &ModelParams,
    sample: ArrayView2<'_, f64>,
    m: &Array3<f64>,
) -> Result<f64> {
    let ws = Workspace::new(params)?;
    Ok(mean_field_kld_inner(params, sample, m, &ws))
}

fn mean_field_kld_inner(
    params: &ModelParams,
    sample: ArrayView2<'_, f64>,
    m: &Array3<f64>,
    ws: &Workspace,
) -> f64 {
    let (d, o, k) = params.w.dim();
    let t_len = sample.dim().0;

    let mut kl = 0.0;
    for t in 0..t_len {
        for i in 0..d {
            for j in 0..k {
                let mv = m[[t, i, j]];
                if mv > 0.0 {
                    kl += mv * mv.ln();
                }
            }
        }
    }

    for t in 0..t_len {
        let y_hat = reconstruction(params, m, t);
        // y' C^-1 y and y' C^-1 y_hat
        for p in 0..o {
            let mut cy = 0.0;
            let mut cyh = 0.0;
            for q in 0..o {
                cy += ws.emission.c_inv[(p, q)] * sample[[t, q]];
                cyh += ws.emission.c_inv[(p, q)] * y_hat[q];
            }
            kl += 0.5 * sample[[t, p]] * cy - sample[[t, p]] * cyh + 0.5 * y_hat[p] * cyh;
        }
        // same-chain correction: subtract the factorized self term, add the
        // one-hot diagonal
        for i in 0..d {
            let mut own = vec![0.0; o];
            for j in 0..k {
                let mv = m[[t, i, j]];
                for p in 0..o {
                    own[p] += params.w[[i, p, j]] * mv;
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
                kl += 0.5 * ws.wcw_diag[[i, j]] * m[[t, i, j]];
            }
        }
    }

    for t in 1..t_len {
        for i in 0..d {
            for a in 0..k {
                for b in 0..k {
                    kl -= params.a_log[[i, a, b]] * m[[t, i, a]] * m[[t - 1, i, b]];
                }
            }
        }
    }
    for i in 0..d {
        for j in 0..k {
            kl -= m[[0, i, j]] * params.pi[[i, j]].max(f64::MIN_POSITIVE).ln();
        }
    }

    kl + (d * (t_len - 1)) as f64 * (k as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{enumerate_realizations, random_init, ModelSpec, DEFAULT_ZERO_PROBABILITY};
    use crate::noise::generate_fhmm;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rows_sum_to_one() {
        let sp = ModelSpec { t_len: 12, d: 2, o: 1, k: 3 };
        let params = random_init(&sp, 1, 1.0, None);
        let sample = Array2::from_shape_fn((12, 1), |(t, _)| (t as f64 * 0.3).sin());
        let (exp, state) = mean_field_estep(
            &params,
            sample.view(),
            None,
            20,
            1e-8,
            DEFAULT_ZERO_PROBABILITY,
            7,
        )
        .unwrap();
        for t in 0..12 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|j| state.m[[t, i, j]]).sum();
                assert_abs_diff_eq!(s, 1.0, epsilon = 1e-9);
            }
        }
        exp.check_invariants(1e-8).unwrap();
    }

    #[test]
    fn concentrates_on_generating_states_with_low_noise() {
        let sp = ModelSpec { t_len: 60, d: 2, o: 1, k: 2 };
        let mut params = random_init(&sp, 3, 1.0, None);
        params.w =
            ndarray::Array3::from_shape_vec((2, 1, 2), vec![0.0, 1.0, 0.0, 0.45]).unwrap();
        params.c = ndarray::arr2(&[[1e-6]]);
        let (_t, ds, states) = generate_fhmm(&params, 60, 1, 99, true).unwrap();
        let states = states.unwrap();
        let (_, state) = mean_field_estep(
            &params,
            ds.x.index_axis(ndarray::Axis(0), 0),
            None,
            60,
            1e-10,
            DEFAULT_ZERO_PROBABILITY,
            5,
        )
        .unwrap();
        let mut hits = 0usize;
        let mut total = 0usize;
        for t in 0..60 {
            for i in 0..2 {
                let truth = (0..2).find(|&j| states[[0, t, i, j]] > 0.5).unwrap();
                if state.m[[t, i, truth]] > 0.99 {
                    hits += 1;
                }
                total += 1;
            }
        }
        assert!(hits * 10 >= total * 9, "only {hits}/{total} confident hits");
    }

    #[test]
    fn kld_trace_non_increasing() {
        let sp = ModelSpec { t_len: 20, d: 2, o: 2, k: 2 };
        let params = random_init(&sp, 5, 1.0, None);
        let sample =
            Array2::from_shape_fn((20, 2), |(t, j)| (t as f64 * 0.4 + j as f64).cos());
        let (_, state) = mean_field_estep(
            &params,
            sample.view(),
            None,
            30,
            0.0,
            DEFAULT_ZERO_PROBABILITY,
            11,
        )
        .unwrap();
        assert!(state.kld_trace.len() >= 2);
        for w in state.kld_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "KLD rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn kld_is_pure() {
        let sp = ModelSpec { t_len: 8, d: 2, o: 1, k: 2 };
        let params = random_init(&sp, 2, 1.0, None);
        let sample = Array2::from_shape_fn((8, 1), |(t, _)| 0.2 * t as f64);
        let m = Array3::from_elem((8, 2, 2), 0.5);
        let k1 = mean_field_kld(&params, sample.view(), &m).unwrap();
        let k2 = mean_field_kld(&params, sample.view(), &m).unwrap();
        assert_eq!(k1, k2);
    }

    #[test]
    fn kld_decreases_after_one_sweep() {
        let sp = ModelSpec { t_len: 10, d: 2, o: 1, k: 2 };
        let params = random_init(&sp, 6, 1.0, None);
        let sample = Array2::from_shape_fn((10, 1), |(t, _)| (t as f64).sin());
        let m0 = Array3::from_elem((10, 2, 2), 0.5);
        let before = mean_field_kld(&params, sample.view(), &m0).unwrap();
        let (_, state) = mean_field_estep(
            &params,
            sample.view(),
            None,
            1,
            0.0,
            DEFAULT_ZERO_PROBABILITY,
            13,
        )
        .unwrap();
        assert!(state.kld_trace[0] <= before + 1e-6);
        let _ = enumerate_realizations(&sp);
    }
}
