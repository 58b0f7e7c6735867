//! Exhaustive enumeration of latent sequences.
//!
//! Reference implementation for the recursions in `posterior`: every option
//! sequence `h_0..h_{T-1}` is enumerated, and for each step where the option is
//! unchanged both the "continued" and "terminated then re-drew the same option"
//! branches are enumerated separately. Exponential in `T`; test-sized inputs only.

use super::params::{DdoParams, Readout};
use super::posterior::PosteriorTables;
use super::DdoError;
use crate::expert::Trajectory;

/// Upper bound on `H^T` accepted by [`brute_force_posteriors`].
pub const MAX_SEQUENCES: u64 = 1_000_000;

/// Posteriors by enumeration. The forward/backward/scale fields are left empty.
pub fn brute_force_posteriors(params: &DdoParams, xi: &Trajectory) -> Result<PosteriorTables, DdoError> {
    let h_n = params.n_options;
    let t_n = xi.actions.len();
    if t_n == 0 {
        return Err(DdoError::EmptyTrajectory);
    }
    let count = (h_n as u64).checked_pow(t_n as u32).unwrap_or(u64::MAX);
    if count > MAX_SEQUENCES {
        return Err(DdoError::TooLarge { sequences: count });
    }
    let r = Readout::new(params);
    let s = |t: usize| xi.states[t].0;
    let a = |t: usize| xi.actions[t].index();

    let mut u = vec![vec![0.0; h_n]; t_n];
    let mut v = vec![vec![0.0; h_n]; t_n];
    let mut w = vec![vec![0.0; h_n]; t_n];
    let mut total = 0.0;

    let mut hs = vec![0usize; t_n];
    for code in 0..count {
        let mut c = code;
        for h in hs.iter_mut() {
            *h = (c % h_n as u64) as usize;
            c /= h_n as u64;
        }
        // Steps t >= 1 where both b_t = 0 and b_t = 1 are consistent.
        let free: Vec<usize> = (1..t_n).filter(|&t| hs[t] == hs[t - 1]).collect();
        for bits in 0u64..(1 << free.len()) {
            let mut b = vec![true; t_n];
            for (k, &t) in free.iter().enumerate() {
                b[t] = bits >> k & 1 == 1;
            }
            let mut p = r.eta(s(0), hs[0]);
            for t in 0..t_n {
                p *= r.pi(hs[t], s(t), a(t));
                if t >= 1 {
                    let term = r.psi(hs[t - 1], s(t));
                    p *= if b[t] { term * r.eta(s(t), hs[t]) } else { 1.0 - term };
                }
            }
            total += p;
            for t in 0..t_n {
                u[t][hs[t]] += p;
                if b[t] {
                    v[t][hs[t]] += p;
                }
                if t + 1 < t_n && !b[t + 1] {
                    w[t][hs[t]] += p;
                }
            }
        }
    }
    for table in [&mut u, &mut v, &mut w] {
        for row in table.iter_mut() {
            row.iter_mut().for_each(|x| *x /= total);
        }
    }
    Ok(PosteriorTables {
        n_options: h_n,
        phi_scaled: Vec::new(),
        omega_scaled: Vec::new(),
        scales: Vec::new(),
        u,
        v,
        w,
        log_likelihood: total.ln(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ddo::forward_backward;
    use crate::ddo::test_support::{max_table_diff, random_case, trajectory};
    use crate::rng::seeded;

    #[test]
    fn single_step_matches_recursion() {
        let mut rng = seeded(1);
        let (p, _) = random_case(&mut rng, 3, 2, 1);
        let xi = trajectory(&[2, 0], &[1]);
        let a = brute_force_posteriors(&p, &xi).unwrap();
        let b = forward_backward(&p, &xi).unwrap();
        assert!(max_table_diff(&a, &b) < 1e-15);
        assert!((a.log_likelihood - b.log_likelihood).abs() < 1e-15);
    }

    #[test]
    fn posterior_mass_is_one() {
        let mut rng = seeded(2);
        let (p, xi) = random_case(&mut rng, 4, 3, 5);
        let post = brute_force_posteriors(&p, &xi).unwrap();
        for row in &post.u {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn matches_recursion_on_random_cases() {
        let mut rng = seeded(3);
        for case in 0..100 {
            let h = 2 + case % 2;
            let t = 1 + case % 6;
            let (p, xi) = random_case(&mut rng, 5, h, t);
            let a = brute_force_posteriors(&p, &xi).unwrap();
            let b = forward_backward(&p, &xi).unwrap();
            assert!(max_table_diff(&a, &b) < 1e-9, "case {case}");
            assert!((a.log_likelihood - b.log_likelihood).abs() < 1e-9);
        }
    }

    #[test]
    fn guard_rejects_large_inputs() {
        let mut rng = seeded(4);
        let (p, xi) = random_case(&mut rng, 3, 4, 11);
        assert!(matches!(
            brute_force_posteriors(&p, &xi),
            Err(DdoError::TooLarge { sequences: 4_194_304 })
        ));
    }
}
