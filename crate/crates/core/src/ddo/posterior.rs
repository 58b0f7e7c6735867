//! Scaled forward-backward over the latent (termination, option) chain.
//!
//! With `T` actions the latent chain is `(b_t, h_t)` for `t = 0..T`, `b_0 = 1`.
//! The option emits `a_t ~ pi_h(.|s_t)`; on arrival in `s_{t+1}` it terminates
//! with probability `psi_h(s_{t+1})` and, if it does, the next option is drawn
//! from `eta(.|s_{t+1})`. Transition dynamics appear as a common factor in every
//! joint probability and are left out.
//!
//! Scaling: `phi_scaled[t] = phi_t / prod_{k<t} c_k` and
//! `omega_scaled[t] = omega_t / prod_{k>=t} c_k`, where `c_t` normalizes the
//! emission-weighted forward mass at step `t`. Then `sum_h phi_scaled[t][h] = 1`,
//! `u_t = phi_scaled[t] * omega_scaled[t]` and `log P = sum_t log c_t`.

use super::params::{DdoParams, Readout};
use super::DdoError;
use crate::expert::Trajectory;

/// Per-step latent posteriors. Row `t` of each table holds the `H` option entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTables {
    pub n_options: usize,
    /// Scaled forward quantities; empty when produced by enumeration.
    pub phi_scaled: Vec<Vec<f64>>,
    /// Scaled backward quantities; empty when produced by enumeration.
    pub omega_scaled: Vec<Vec<f64>>,
    /// Per-step normalizers `c_t`; empty when produced by enumeration.
    pub scales: Vec<f64>,
    /// `u_t(h) = P(h_t = h | xi)`.
    pub u: Vec<Vec<f64>>,
    /// `v_t(h) = P(b_t = 1, h_t = h | xi)`, with `v_0 = u_0`.
    pub v: Vec<Vec<f64>>,
    /// `w_t(h) = P(b_{t+1} = 0, h_t = h | xi)`; the last row is zero.
    pub w: Vec<Vec<f64>>,
    pub log_likelihood: f64,
}

impl PosteriorTables {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

pub fn forward_backward(params: &DdoParams, xi: &Trajectory) -> Result<PosteriorTables, DdoError> {
    forward_backward_with(&Readout::new(params), xi)
}

pub fn forward_backward_with(r: &Readout, xi: &Trajectory) -> Result<PosteriorTables, DdoError> {
    let h_n = r.n_options;
    let t_n = xi.actions.len();
    if t_n == 0 || xi.states.len() != t_n + 1 {
        return Err(DdoError::EmptyTrajectory);
    }
    let st = |t: usize| xi.states[t].0;
    let at = |t: usize| xi.actions[t].index();
    if xi.states.iter().any(|s| s.0 >= r.n_states) {
        return Err(DdoError::ShapeMismatch);
    }

    // emit[t][h] = pi_h(a_t | s_t)
    let emit: Vec<Vec<f64>> = (0..t_n)
        .map(|t| (0..h_n).map(|h| r.pi(h, st(t), at(t))).collect())
        .collect();

    let mut phi = vec![vec![0.0; h_n]; t_n];
    let mut scales = vec![0.0; t_n];
    // switch[t] = P(b_{t+1} = 1 | prefix) share, already divided by c_t
    let mut switch = vec![0.0; t_n];
    for h in 0..h_n {
        phi[0][h] = r.eta(st(0), h);
    }
    for t in 0..t_n {
        let c: f64 = (0..h_n).map(|h| phi[t][h] * emit[t][h]).sum();
        if !(c > 0.0 && c.is_finite()) {
            return Err(DdoError::DegenerateLikelihood { step: t });
        }
        scales[t] = c;
        if t + 1 < t_n {
            let sn = st(t + 1);
            let sw: f64 = (0..h_n).map(|h| phi[t][h] * emit[t][h] * r.psi(h, sn)).sum::<f64>() / c;
            switch[t] = sw;
            for h in 0..h_n {
                phi[t + 1][h] = sw * r.eta(sn, h) + phi[t][h] * emit[t][h] * (1.0 - r.psi(h, sn)) / c;
            }
        }
    }

    let mut omega = vec![vec![0.0; h_n]; t_n];
    for h in 0..h_n {
        omega[t_n - 1][h] = emit[t_n - 1][h] / scales[t_n - 1];
    }
    for t in (0..t_n.saturating_sub(1)).rev() {
        let sn = st(t + 1);
        let fresh: f64 = (0..h_n).map(|h| r.eta(sn, h) * omega[t + 1][h]).sum();
        for h in 0..h_n {
            let psi = r.psi(h, sn);
            omega[t][h] = emit[t][h] * (psi * fresh + (1.0 - psi) * omega[t + 1][h]) / scales[t];
        }
    }

    let mut u = vec![vec![0.0; h_n]; t_n];
    let mut v = vec![vec![0.0; h_n]; t_n];
    let mut w = vec![vec![0.0; h_n]; t_n];
    for t in 0..t_n {
        for h in 0..h_n {
            u[t][h] = phi[t][h] * omega[t][h];
            v[t][h] = if t == 0 {
                u[t][h]
            } else {
                switch[t - 1] * r.eta(st(t), h) * omega[t][h]
            };
            if t + 1 < t_n {
                w[t][h] =
                    phi[t][h] * emit[t][h] * (1.0 - r.psi(h, st(t + 1))) * omega[t + 1][h] / scales[t];
            }
        }
    }
    let log_likelihood = scales.iter().map(|c| c.ln()).sum();
    Ok(PosteriorTables {
        n_options: h_n,
        phi_scaled: phi,
        omega_scaled: omega,
        scales,
        u,
        v,
        w,
        log_likelihood,
    })
}

/// Dynamics-free log-likelihood of a dataset, summed over trajectories.
pub fn log_likelihood(params: &DdoParams, dataset: &[Trajectory]) -> Result<f64, DdoError> {
    if dataset.is_empty() {
        return Err(DdoError::EmptyDataset);
    }
    let r = Readout::new(params);
    dataset
        .iter()
        .map(|xi| forward_backward_with(&r, xi).map(|p| p.log_likelihood))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ddo::test_support::{random_case, trajectory};
    use crate::rng::seeded;

    #[test]
    fn single_step_closed_form() {
        let mut rng = seeded(4);
        let (p, _) = random_case(&mut rng, 3, 3, 1);
        let xi = trajectory(&[1, 2], &[3]);
        let post = forward_backward(&p, &xi).unwrap();
        let raw: Vec<f64> = (0..3).map(|h| p.eta(1)[h] * p.pi(h, 1)[3]).collect();
        let z: f64 = raw.iter().sum();
        for h in 0..3 {
            assert!((post.u[0][h] - raw[h] / z).abs() < 1e-15);
        }
        assert!((post.log_likelihood - z.ln()).abs() < 1e-15);
    }

    #[test]
    fn identical_options_split_evenly() {
        let mut p = DdoParams::zeros(4, 2);
        for s in 0..4 {
            for a in 0..4 {
                let x = (s * 4 + a) as f64 * 0.1;
                p.pi_logits[s * 4 + a] = x;
                p.pi_logits[(4 + s) * 4 + a] = x;
            }
            p.psi_logits[s] = 0.3 * s as f64;
            p.psi_logits[4 + s] = 0.3 * s as f64;
        }
        let xi = trajectory(&[0, 1, 2, 3, 2, 1], &[1, 1, 2, 0, 3]);
        let post = forward_backward(&p, &xi).unwrap();
        for row in &post.u {
            assert!((row[0] - 0.5).abs() < 1e-15 && (row[1] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_params_single_step_is_log_quarter() {
        for h in [1, 2, 5] {
            let p = DdoParams::zeros(3, h);
            let xi = trajectory(&[0, 1], &[2]);
            let ll = log_likelihood(&p, &[xi]).unwrap();
            assert!((ll - 0.25_f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn duplicated_dataset_doubles_likelihood() {
        let mut rng = seeded(8);
        let (p, xi) = random_case(&mut rng, 6, 3, 5);
        let one = log_likelihood(&p, std::slice::from_ref(&xi)).unwrap();
        let two = log_likelihood(&p, &[xi.clone(), xi]).unwrap();
        assert_eq!(two, 2.0 * one);
    }

    #[test]
    fn forward_rows_are_normalized() {
        let mut rng = seeded(9);
        let (p, xi) = random_case(&mut rng, 7, 4, 9);
        let post = forward_backward(&p, &xi).unwrap();
        for row in &post.phi_scaled {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn impossible_action_is_degenerate() {
        let mut p = DdoParams::zeros(2, 2);
        for h in 0..2 {
            p.pi_logits[h * 2 * 4] = 1e6; // state 0 always takes N
        }
        let xi = trajectory(&[0, 1], &[1]);
        assert!(matches!(
            forward_backward(&p, &xi),
            Err(DdoError::DegenerateLikelihood { step: 0 })
        ));
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(
            log_likelihood(&DdoParams::zeros(2, 2), &[]),
            Err(DdoError::EmptyDataset)
        ));
    }
}
