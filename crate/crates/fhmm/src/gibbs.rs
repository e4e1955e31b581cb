//! Gibbs-sampling E-step: states are drawn from the conditional distribution
//! over each chain's Markov blanket, committed immediately, and expectations
//! are empirical averages over iterations.

use ndarray::{Array3, Array4, Array5, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exact::{Expectations, GaussianEmission};
use crate::model::ModelParams;

/// One-hot state draws and conditional distributions for every iteration.
#[derive(Debug, Clone)]
pub struct GibbsTrace {
    /// One-hot samples, shape `[n_iter][T][d][k]`.
    pub states: Array4<f64>,
    /// Conditional distributions used for each draw, same shape.
    pub ps: Array4<f64>,
}

/// Gibbs E-step. Sweeps `t` then chains, normalizing the k-vector
/// conditional (pi substituted at `t = 0`, the forward factor dropped at
/// `t = T-1`), drawing one state and committing it before the next chain.
/// Expectations are empirical averages over iterations past the burn-in
/// fraction (0 reproduces the plain all-iteration average).
pub fn gibbs_estep(
    params: &ModelParams,
    sample: ArrayView2<'_, f64>,
    n_iter: usize,
    seed: u64,
    burn_in_fraction: f64,
    floor: f64,
) -> Result<(Expectations, GibbsTrace)> {
    if n_iter < 1 {
        return Err(Error::InvalidOptions("gibbs n_iter must be >= 1".into()));
    }
    let (d, o, k) = params.w.dim();
    let t_len = sample.dim().0;
    let emission = GaussianEmission::new(&params.c)?;
    let a_exp = params.a_exp();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // current states and per-step reconstruction, updated incrementally
    let mut states = Array3::<usize>::zeros((t_len, d, 1));
    let mut y_mu = Array3::<f64>::zeros((t_len, 1, o));
    for t in 0..t_len {
        for i in 0..d {
            let s0 = draw_categorical(&mut rng, (0..k).map(|j| params.pi[[i, j]]));
            states[[t, i, 0]] = s0;
            for p in 0..o {
                y_mu[[t, 0, p]] += params.w[[i, p, s0]];
            }
        }
    }

    let mut trace_states = Array4::<f64>::zeros((n_iter, t_len, d, k));
    let mut trace_ps = Array4::<f64>::zeros((n_iter, t_len, d, k));
    let mut cond = vec![0.0; k];
    let mut resid = vec![0.0; o];

    for n in 0..n_iter {
        for t in 0..t_len {
            for i in 0..d {
                let cur = states[[t, i, 0]];
                for (j, c) in cond.iter_mut().enumerate() {
                    for p in 0..o {
                        resid[p] = sample[[t, p]] - y_mu[[t, 0, p]]
                            + params.w[[i, p, cur]]
                            - params.w[[i, p, j]];
                    }
                    let pyt = emission.density(&resid);
                    let a_tm1 = if t == 0 {
                        params.pi[[i, j]]
                    } else {
                        a_exp[[i, j, states[[t - 1, i, 0]]]]
                    };
                    let a_tp1 = if t == t_len - 1 {
                        1.0
                    } else {
                        a_exp[[i, states[[t + 1, i, 0]], j]]
                    };
                    *c = a_tm1 * pyt * a_tp1 + floor;
                }
                let total: f64 = cond.iter().sum();
                if !(total > 0.0) || !total.is_finite() {
                    return Err(Error::NumericalUnderflow(format!(
                        "gibbs conditional collapsed at t={t}, chain {i}"
                    )));
                }
                for c in cond.iter_mut() {
                    *c /= total;
                }
                for (j, &c) in cond.iter().enumerate() {
                    trace_ps[[n, t, i, j]] = c;
                }
                let pick = draw_categorical(&mut rng, cond.iter().cloned());
                if pick != cur {
                    for p in 0..o {
                        y_mu[[t, 0, p]] += params.w[[i, p, pick]] - params.w[[i, p, cur]];
                    }
                    states[[t, i, 0]] = pick;
                }
                trace_states[[n, t, i, pick]] = 1.0;
            }
        }
    }

    let burn = ((n_iter as f64) * burn_in_fraction).floor() as usize;
    let burn = burn.min(n_iter - 1);
    let kept = (n_iter - burn) as f64;

    let mut s_exp = Array3::<f64>::zeros((t_len, d, k));
    let mut ss_exp = Array5::<f64>::zeros((t_len, d, d, k, k));
    let mut sstm1_exp = Array4::<f64>::zeros((t_len, d, k, k));
    for n in burn..n_iter {
        for t in 0..t_len {
            for i in 0..d {
                let a = (0..k).find(|&j| trace_states[[n, t, i, j]] > 0.5).unwrap();
                s_exp[[t, i, a]] += 1.0;
                for j in 0..d {
                    let b = (0..k).find(|&l| trace_states[[n, t, j, l]] > 0.5).unwrap();
                    ss_exp[[t, i, j, a, b]] += 1.0;
                }
                if t > 0 {
                    let b = (0..k)
                        .find(|&l| trace_states[[n, t - 1, i, l]] > 0.5)
                        .unwrap();
                    sstm1_exp[[t, i, a, b]] += 1.0;
                }
            }
        }
    }
    s_exp /= kept;
    ss_exp /= kept;
    sstm1_exp /= kept;

    Ok((
        Expectations { s_exp, ss_exp, sstm1_exp },
        GibbsTrace { states: trace_states, ps: trace_ps },
    ))
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
