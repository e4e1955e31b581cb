//! Closed-form parameter updates from expectation tensors, plus the expected
//! complete log likelihood diagnostic.

use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::exact::{Expectations, GaussianEmission};
use crate::model::{clamp_probabilities, Dataset, ModelParams};

/// Which parameter blocks bypass the update and pass through unchanged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FixedMask {
    pub w: bool,
    pub a: bool,
    pub c: bool,
    pub pi: bool,
}

impl FixedMask {
    pub fn all() -> Self {
        Self { w: true, a: true, c: true, pi: true }
    }
}

/// Singular values below this fraction of the largest are truncated in the
/// pseudo-inverse of the second-moment accumulator.
const PINV_RELATIVE_CUTOFF: f64 = 1e-10;

/// One M-step over all samples. `expectations[s]` must correspond to
/// `dataset.x[s]`. Blocks flagged in `fixed` keep their current values; the
/// C update uses whichever W is in effect after the W update.
pub fn m_step(
    expectations: &[Expectations],
    dataset: &Dataset,
    params: &ModelParams,
    fixed: &FixedMask,
    floor: f64,
) -> Result<ModelParams> {
    let (d, o, k) = params.w.dim();
    let n_samples = dataset.n_samples();
    assert_eq!(expectations.len(), n_samples, "one expectation set per sample");
    let t_len = dataset.t_len();
    let dk = d * k;

    // --- W: per observable component, solve the stacked dk x dk system via
    // pseudo-inverse, accumulating sufficient statistics over samples.
    let new_w = if fixed.w {
        params.w.clone()
    } else {
        let mut lhs = nalgebra::DMatrix::<f64>::zeros(dk, dk);
        let mut rhs = nalgebra::DMatrix::<f64>::zeros(dk, o);
        for (s, exp) in expectations.iter().enumerate() {
            for t in 0..t_len {
                for i in 0..d {
                    for a in 0..k {
                        let row = i * k + a;
                        for j in 0..d {
                            for b in 0..k {
                                lhs[(row, j * k + b)] += exp.ss_exp[[t, i, j, a, b]];
                            }
                        }
                        let sv = exp.s_exp[[t, i, a]];
                        for j in 0..o {
                            rhs[(row, j)] += sv * dataset.x[[s, t, j]];
                        }
                    }
                }
            }
        }
        let svd = lhs.svd(true, true);
        let sigma_max = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
        if !(sigma_max > 0.0) || !sigma_max.is_finite() {
            return Err(Error::DegenerateMoments);
        }
        let pinv = svd
            .pseudo_inverse(PINV_RELATIVE_CUTOFF * sigma_max)
            .map_err(|_| Error::DegenerateMoments)?;
        let w_flat = pinv * rhs;
        Array3::from_shape_fn((d, o, k), |(i, j, a)| w_flat[(i * k + a, j)])
    };

    // --- A: per chain, log of column-normalized cross-time moments.
    let new_a = if fixed.a {
        params.a_log.clone()
    } else {
        let mut a_log = Array3::<f64>::zeros((d, k, k));
        for i in 0..d {
            let mut num = Array2::<f64>::zeros((k, k));
            for exp in expectations {
                for t in 1..t_len {
                    for j in 0..k {
                        for l in 0..k {
                            num[[j, l]] += exp.sstm1_exp[[t, i, j, l]];
                        }
                    }
                }
            }
            for l in 0..k {
                let den: f64 = (0..k).map(|j| num[[j, l]]).sum();
                let mut col: Vec<f64> = (0..k)
                    .map(|j| if den > 0.0 { num[[j, l]] / den } else { 1.0 / k as f64 })
                    .collect();
                clamp_probabilities(&mut col, floor);
                for j in 0..k {
                    a_log[[i, j, l]] = col[j].ln();
                }
            }
        }
        a_log
    };

    // --- C: residual moment formula averaged over time and samples, using
    // the updated W, then symmetrized and jittered to stay factorizable.
    let new_c = if fixed.c {
        params.c.clone()
    } else {
        let w_eff = &new_w;
        let mut c = Array2::<f64>::zeros((o, o));
        for (s, exp) in expectations.iter().enumerate() {
            for t in 0..t_len {
                // predicted mean from first moments
                let mut pred = vec![0.0; o];
                for i in 0..d {
                    for a in 0..k {
                        let sv = exp.s_exp[[t, i, a]];
                        for j in 0..o {
                            pred[j] += w_eff[[i, j, a]] * sv;
                        }
                    }
                }
                for p in 0..o {
                    let yp = dataset.x[[s, t, p]];
                    for q in 0..o {
                        let yq = dataset.x[[s, t, q]];
                        c[[p, q]] += yp * yq - pred[p] * yq - yp * pred[q];
                    }
                }
                // quadratic moment term W <ss> W^T
                for i in 0..d {
                    for j in 0..d {
                        for a in 0..k {
                            for b in 0..k {
                                let m = exp.ss_exp[[t, i, j, a, b]];
                                for p in 0..o {
                                    let wpa = w_eff[[i, p, a]];
                                    for q in 0..o {
                                        c[[p, q]] += wpa * w_eff[[j, q, b]] * m;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        c /= (n_samples * t_len) as f64;
        let sym = (&c + &c.t()) * 0.5;
        regularize_covariance(sym)
    };

    // --- pi: first-step marginals averaged over samples.
    let new_pi = if fixed.pi {
        params.pi.clone()
    } else {
        let mut pi = Array2::<f64>::zeros((d, k));
        for exp in expectations {
            for i in 0..d {
                for a in 0..k {
                    pi[[i, a]] += exp.s_exp[[0, i, a]];
                }
            }
        }
        for i in 0..d {
            let mut row: Vec<f64> = (0..k).map(|a| pi[[i, a]] / n_samples as f64).collect();
            clamp_probabilities(&mut row, floor);
            for a in 0..k {
                pi[[i, a]] = row[a];
            }
        }
        pi
    };

    Ok(ModelParams { w: new_w, a_log: new_a, c: new_c, pi: new_pi })
}

/// Adds a small diagonal jitter when the smallest eigenvalue drops below
/// 1e-12, keeping downstream factorizations valid.
pub(crate) fn regularize_covariance(c: Array2<f64>) -> Array2<f64> {
    let o = c.dim().0;
    let m = nalgebra::DMatrix::from_fn(o, o, |i, j| c[[i, j]]);
    let min_eig = nalgebra::SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if min_eig < 1e-12 {
        let trace: f64 = (0..o).map(|i| c[[i, i]]).sum();
        let jitter = (1e-12 * trace.abs() / o as f64).max(1e-12) + (-min_eig).max(0.0);
        let mut out = c;
        for i in 0..o {
            out[[i, i]] += jitter;
        }
        out
    } else {
        c
    }
}

/// Expected complete log likelihood `<ln P>` under the supplied expectations,
/// including the partition-function term.
pub fn expected_complete_log_likelihood(
    params: &ModelParams,
    expectations: &Expectations,
    sample: ArrayView2<'_, f64>,
) -> Result<f64> {
    let (d, o, k) = params.w.dim();
    let t_len = sample.dim().0;
    let emission = GaussianEmission::new(&params.c)?;
    let c_inv = &emission.c_inv;
    let det_c = {
        let m = nalgebra::DMatrix::from_fn(o, o, |i, j| params.c[[i, j]]);
        m.lu().determinant()
    };

    let mut energy = 0.0; // <H>

    for t in 0..t_len {
        // y' C^-1 y
        let mut quad_yy = 0.0;
        for p in 0..o {
            for q in 0..o {
                quad_yy += sample[[t, p]] * c_inv[(p, q)] * sample[[t, q]];
            }
        }
        // y' C^-1 W <s>
        let mut pred = vec![0.0; o];
        for i in 0..d {
            for a in 0..k {
                let sv = expectations.s_exp[[t, i, a]];
                for j in 0..o {
                    pred[j] += params.w[[i, j, a]] * sv;
                }
            }
        }
        let mut quad_yw = 0.0;
        for p in 0..o {
            for q in 0..o {
                quad_yw += sample[[t, p]] * c_inv[(p, q)] * pred[q];
            }
        }
        // <s' W' C^-1 W s> from second moments
        let mut quad_ww = 0.0;
        for i in 0..d {
            for j in 0..d {
                for a in 0..k {
                    for b in 0..k {
                        let m = expectations.ss_exp[[t, i, j, a, b]];
                        if m == 0.0 {
                            continue;
                        }
                        let mut wcw = 0.0;
                        for p in 0..o {
                            for q in 0..o {
                                wcw += params.w[[i, p, a]] * c_inv[(p, q)] * params.w[[j, q, b]];
                            }
                        }
                        quad_ww += wcw * m;
                    }
                }
            }
        }
        energy += 0.5 * (quad_yy - 2.0 * quad_yw + quad_ww);
    }

    for t in 1..t_len {
        for i in 0..d {
            for j in 0..k {
                for l in 0..k {
                    energy -= params.a_log[[i, j, l]] * expectations.sstm1_exp[[t, i, j, l]];
                }
            }
        }
    }
    for i in 0..d {
        for j in 0..k {
            energy -= expectations.s_exp[[0, i, j]]
                * params.pi[[i, j]].max(f64::MIN_POSITIVE).ln();
        }
    }

    let ln_z = (d * (t_len - 1)) as f64 * (k as f64).ln()
        + (t_len as f64 / 2.0) * ((o as f64) * (2.0 * std::f64::consts::PI).ln() + det_c.ln());

    Ok(-energy - ln_z)
}

/// Sum of [`expected_complete_log_likelihood`] over all samples of a dataset.
pub fn expected_complete_log_likelihood_dataset(
    params: &ModelParams,
    expectations: &[Expectations],
    dataset: &Dataset,
) -> Result<f64> {
    let mut total = 0.0;
    for (s, exp) in expectations.iter().enumerate() {
        total += expected_complete_log_likelihood(
            params,
            exp,
            dataset.x.index_axis(Axis(0), s),
        )?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::exact_estep;
    use crate::model::{
        canonicalize_weights, enumerate_realizations, random_init, validate_model, ModelSpec,
        DEFAULT_ZERO_PROBABILITY,
    };
    use approx::assert_abs_diff_eq;
    use ndarray::{arr2, Array3 as A3, Array4, Array5};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// One-hot expectations built from a known state trajectory.
    fn clamped_expectations(states: &[Vec<usize>], d: usize, k: usize) -> Expectations {
        let t_len = states.len();
        let mut s_exp = A3::<f64>::zeros((t_len, d, k));
        let mut ss_exp = Array5::<f64>::zeros((t_len, d, d, k, k));
        let mut sstm1 = Array4::<f64>::zeros((t_len, d, k, k));
        for t in 0..t_len {
            for i in 0..d {
                s_exp[[t, i, states[t][i]]] = 1.0;
                for j in 0..d {
                    ss_exp[[t, i, j, states[t][i], states[t][j]]] = 1.0;
                }
                if t > 0 {
                    sstm1[[t, i, states[t][i], states[t - 1][i]]] = 1.0;
                }
            }
        }
        Expectations { s_exp, ss_exp, sstm1_exp: sstm1 }
    }

    #[test]
    fn pi_update_is_identity_on_normalized_input() {
        let sp = ModelSpec { t_len: 2, d: 1, o: 1, k: 2 };
        let params = random_init(&sp, 1, 1.0, None);
        let mut exp = clamped_expectations(&vec![vec![0], vec![1]], 1, 2);
        exp.s_exp[[0, 0, 0]] = 0.3;
        exp.s_exp[[0, 0, 1]] = 0.7;
        let ds = Dataset::new(A3::zeros((1, 2, 1)), 1.0).unwrap();
        let out = m_step(
            &[exp],
            &ds,
            &params,
            &FixedMask { w: true, a: true, c: true, pi: false },
            DEFAULT_ZERO_PROBABILITY,
        )
        .unwrap();
        assert_abs_diff_eq!(out.pi[[0, 0]], 0.3, epsilon = 1e-9);
        assert_abs_diff_eq!(out.pi[[0, 1]], 0.7, epsilon = 1e-9);
    }

    #[test]
    fn all_fixed_passes_through_exactly() {
        let sp = ModelSpec { t_len: 3, d: 2, o: 1, k: 2 };
        let params = random_init(&sp, 2, 1.0, None);
        let table = enumerate_realizations(&sp).unwrap();
        let x = A3::from_shape_fn((1, 3, 1), |(_, t, _)| t as f64 * 0.4);
        let ds = Dataset::new(x, 1.0).unwrap();
        let (exp, _) = exact_estep(
            &params,
            ds.x.index_axis(Axis(0), 0),
            &table,
            DEFAULT_ZERO_PROBABILITY,
        )
        .unwrap();
        let out = m_step(&[exp], &ds, &params, &FixedMask::all(), DEFAULT_ZERO_PROBABILITY).unwrap();
        assert_eq!(out, params);
    }

    #[test]
    fn recovers_transitions_and_means_from_observed_states() {
        let sp = ModelSpec { t_len: 4000, d: 2, o: 1, k: 2 };
        let true_params = {
            let mut p = random_init(&sp, 3, 1.0, None);
            p.w = A3::from_shape_vec((2, 1, 2), vec![0.0, 1.0, 0.0, 0.45]).unwrap();
            p
        };
        let a_exp = true_params.a_exp();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t_len = 4000;
        let mut states = vec![vec![0usize; 2]; t_len];
        for i in 0..2 {
            states[0][i] = usize::from(rng.gen::<f64>() >= true_params.pi[[i, 0]]);
        }
        for t in 1..t_len {
            for i in 0..2 {
                let stay0 = a_exp[[i, 0, states[t - 1][i]]];
                states[t][i] = usize::from(rng.gen::<f64>() >= stay0);
            }
        }
        let x = A3::from_shape_fn((1, t_len, 1), |(_, t, _)| {
            true_params.w[[0, 0, states[t][0]]] + true_params.w[[1, 0, states[t][1]]]
        });
        let ds = Dataset::new(x, 1.0).unwrap();
        let exp = clamped_expectations(&states, 2, 2);

        // empirical transition frequencies as the reference
        let mut counts = vec![Array2::<f64>::zeros((2, 2)); 2];
        for t in 1..t_len {
            for i in 0..2 {
                counts[i][[states[t][i], states[t - 1][i]]] += 1.0;
            }
        }
        let out = m_step(
            &[exp],
            &ds,
            &true_params,
            &FixedMask::default(),
            DEFAULT_ZERO_PROBABILITY,
        )
        .unwrap();
        let a_fit = out.a_exp();
        let bound = 2.0 / (t_len as f64).sqrt();
        for i in 0..2 {
            for l in 0..2 {
                let col_total: f64 = (0..2).map(|j| counts[i][[j, l]]).sum();
                for j in 0..2 {
                    let emp = counts[i][[j, l]] / col_total;
                    assert!(
                        (a_fit[[i, j, l]] - emp).abs() < bound,
                        "chain {i} ({j},{l}): fit {} vs empirical {emp}",
                        a_fit[[i, j, l]]
                    );
                }
            }
        }
        // W: predictions must reproduce the noise-free observations
        let table = enumerate_realizations(&sp).unwrap();
        for r in 0..table.n_configs() {
            let truth = crate::model::configuration_mean(&true_params.w, &table, r);
            let fit = crate::model::configuration_mean(&out.w, &table, r);
            assert_abs_diff_eq!(truth[0], fit[0], epsilon = 1e-6);
        }
        validate_model(&out, &sp).unwrap();
    }

    #[test]
    fn q_closed_form_for_pure_gaussian() {
        let t_len = 7;
        let sp = ModelSpec { t_len, d: 1, o: 1, k: 1 };
        let params = ModelParams {
            w: A3::from_shape_vec((1, 1, 1), vec![0.6]).unwrap(),
            a_log: A3::zeros((1, 1, 1)),
            c: arr2(&[[1.0]]),
            pi: arr2(&[[1.0]]),
        };
        let states = vec![vec![0usize]; t_len];
        let exp = clamped_expectations(&states, 1, 1);
        let sample = Array2::from_elem((t_len, 1), 0.6); // zero residuals
        let q = expected_complete_log_likelihood(&params, &exp, sample.view()).unwrap();
        let expect = -(t_len as f64 / 2.0) * (2.0 * std::f64::consts::PI).ln();
        assert_abs_diff_eq!(q, expect, epsilon = 1e-10);
        let _ = sp;
    }

    #[test]
    fn q_invariant_under_canonicalization() {
        let sp = ModelSpec { t_len: 5, d: 2, o: 1, k: 2 };
        let params = random_init(&sp, 8, 1.0, None);
        let table = enumerate_realizations(&sp).unwrap();
        let x = A3::from_shape_fn((1, 5, 1), |(_, t, _)| (0.7 * t as f64).sin());
        let ds = Dataset::new(x, 1.0).unwrap();
        let (exp, _) = exact_estep(&params, ds.x.index_axis(Axis(0), 0), &table, 0.0).unwrap();
        let q1 =
            expected_complete_log_likelihood(&params, &exp, ds.x.index_axis(Axis(0), 0)).unwrap();
        let canon = ModelParams { w: canonicalize_weights(&params.w), ..params.clone() };
        let q2 =
            expected_complete_log_likelihood(&canon, &exp, ds.x.index_axis(Axis(0), 0)).unwrap();
        assert_abs_diff_eq!(q1, q2, epsilon = 1e-9);
    }

    #[test]
    fn q_does_not_decrease_after_m_step() {
        let sp = ModelSpec { t_len: 30, d: 2, o: 1, k: 2 };
        for seed in 0..5u64 {
            let params = random_init(&sp, seed, 1.0, None);
            let table = enumerate_realizations(&sp).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
            let x = A3::from_shape_fn((1, 30, 1), |_| rng.gen_range(-1.5..1.5));
            let ds = Dataset::new(x, 1.0).unwrap();
            let (exp, _) = exact_estep(
                &params,
                ds.x.index_axis(Axis(0), 0),
                &table,
                DEFAULT_ZERO_PROBABILITY,
            )
            .unwrap();
            let q_old = expected_complete_log_likelihood(
                &params,
                &exp,
                ds.x.index_axis(Axis(0), 0),
            )
            .unwrap();
            let new = m_step(
                &[exp.clone()],
                &ds,
                &params,
                &FixedMask::default(),
                DEFAULT_ZERO_PROBABILITY,
            )
            .unwrap();
            let q_new =
                expected_complete_log_likelihood(&new, &exp, ds.x.index_axis(Axis(0), 0)).unwrap();
            assert!(
                q_new >= q_old - 1e-8,
                "seed {seed}: Q decreased {q_old} -> {q_new}"
            );
            validate_model(&new, &sp).unwrap();
        }
    }

    #[test]
    fn updated_c_is_symmetric_positive_semidefinite() {
        let sp = ModelSpec { t_len: 40, d: 1, o: 2, k: 2 };
        let params = random_init(&sp, 4, 1.0, None);
        let table = enumerate_realizations(&sp).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = A3::from_shape_fn((1, 40, 2), |_| rng.gen_range(-1.0..1.0));
        let ds = Dataset::new(x, 1.0).unwrap();
        let (exp, _) = exact_estep(
            &params,
            ds.x.index_axis(Axis(0), 0),
            &table,
            DEFAULT_ZERO_PROBABILITY,
        )
        .unwrap();
        let out = m_step(&[exp], &ds, &params, &FixedMask::default(), DEFAULT_ZERO_PROBABILITY)
            .unwrap();
        assert_abs_diff_eq!(out.c[[0, 1]], out.c[[1, 0]], epsilon = 1e-12);
        let m = nalgebra::DMatrix::from_fn(2, 2, |i, j| out.c[[i, j]]);
        let min_eig = nalgebra::SymmetricEigen::new(m)
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert!(min_eig >= -1e-10);
    }
}
