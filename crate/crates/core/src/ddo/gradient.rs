//! Expectation-gradient of the dynamics-free log-likelihood, plus the
//! pairwise-KL diversity regularizer.

use rayon::prelude::*;

use super::params::{log_softmax, DdoParams, Readout};
use super::posterior::{forward_backward_with, PosteriorTables};
use super::DdoError;
use crate::expert::Trajectory;
use crate::gridworld::N_ACTIONS;

/// Gradient with the same layout as [`DdoParams`] logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DdoGradient {
    pub eta: Vec<f64>,
    pub pi: Vec<f64>,
    pub psi: Vec<f64>,
}

impl DdoGradient {
    pub fn zeros_like(p: &DdoParams) -> Self {
        DdoGradient {
            eta: vec![0.0; p.eta_logits.len()],
            pi: vec![0.0; p.pi_logits.len()],
            psi: vec![0.0; p.psi_logits.len()],
        }
    }

    fn add_assign(&mut self, other: &DdoGradient) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += b;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.eta.iter().chain(&self.pi).chain(&self.psi)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.eta.iter_mut().chain(self.pi.iter_mut()).chain(self.psi.iter_mut())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn scale(&mut self, k: f64) {
        self.iter_mut().for_each(|x| *x *= k);
    }
}

#[derive(Debug, Clone)]
pub struct GradientPass {
    pub gradient: DdoGradient,
    pub log_likelihood: f64,
    /// Weighted pairwise KL, `E_rho sum_{i != j} KL(pi_i || pi_j)`, unmultiplied by lambda.
    pub regularizer: f64,
}

/// Adds one trajectory's posterior-weighted score terms into `g`.
fn accumulate(r: &Readout, xi: &Trajectory, post: &PosteriorTables, g: &mut DdoGradient) {
    let h_n = r.n_options;
    let s_n = r.n_states;
    let t_n = xi.actions.len();
    let scale = r.termination_scale;
    for t in 0..t_n {
        let s = xi.states[t].0;
        let a = xi.actions[t].index();
        // v_t(h) * dlog eta(h|s_t)
        let v_total: f64 = post.v[t].iter().sum();
        for k in 0..h_n {
            g.eta[s * h_n + k] += post.v[t][k] - v_total * r.eta(s, k);
        }
        // u_t(h) * dlog pi_h(a_t|s_t)
        for h in 0..h_n {
            let uh = post.u[t][h];
            let base = (h * s_n + s) * N_ACTIONS;
            for k in 0..N_ACTIONS {
                let ind = if k == a { 1.0 } else { 0.0 };
                g.pi[base + k] += uh * (ind - r.pi[base + k]);
            }
        }
        // (u_t - w_t) dlog psi_h(s_{t+1}) + w_t dlog(1 - psi_h(s_{t+1}))
        if t + 1 < t_n {
            let sn = xi.states[t + 1].0;
            for h in 0..h_n {
                let sig = r.psi_unscaled[h * s_n + sn];
                let d_log_term = 1.0 - sig;
                let d_log_cont = -scale * sig * (1.0 - sig) / (1.0 - scale * sig);
                let (uh, wh) = (post.u[t][h], post.w[t][h]);
                g.psi[h * s_n + sn] += (uh - wh) * d_log_term + wh * d_log_cont;
            }
        }
    }
}

/// `sum_s rho(s) sum_{i != j} KL(pi_i(.|s) || pi_j(.|s))`, adding `lambda` times
/// its gradient into `g` when given.
pub fn pairwise_kl(params: &DdoParams, rho: &[f64], mut grad: Option<(&mut DdoGradient, f64)>) -> f64 {
    let h_n = params.n_options;
    let s_n = params.n_states;
    let mut total = 0.0;
    for s in 0..s_n {
        let weight = rho[s];
        if weight == 0.0 {
            continue;
        }
        let logp: Vec<Vec<f64>> = (0..h_n).map(|h| log_softmax(params.pi_slice(h, s))).collect();
        let p: Vec<Vec<f64>> = logp.iter().map(|l| l.iter().map(|x| x.exp()).collect()).collect();
        for i in 0..h_n {
            for j in 0..h_n {
                if i == j {
                    continue;
                }
                let kl: f64 = (0..N_ACTIONS).map(|k| p[i][k] * (logp[i][k] - logp[j][k])).sum();
                total += weight * kl;
                if let Some((g, lambda)) = grad.as_mut() {
                    let c = *lambda * weight;
                    let bi = (i * s_n + s) * N_ACTIONS;
                    let bj = (j * s_n + s) * N_ACTIONS;
                    for k in 0..N_ACTIONS {
                        // d KL(p_i||p_j) / d logit_i[k] and / d logit_j[k]
                        g.pi[bi + k] += c * p[i][k] * (logp[i][k] - logp[j][k] - kl);
                        g.pi[bj + k] += c * (p[j][k] - p[i][k]);
                    }
                }
            }
        }
    }
    total
}

/// Gradient of `log_likelihood(dataset) + lambda * pairwise_kl(rho)` over all logits.
///
/// Per-trajectory contributions are computed in parallel and reduced in dataset
/// order, so the result does not depend on the thread count.
pub fn gradient(
    params: &DdoParams,
    dataset: &[Trajectory],
    lambda: f64,
    rho: &[f64],
) -> Result<GradientPass, DdoError> {
    if dataset.is_empty() {
        return Err(DdoError::EmptyDataset);
    }
    if rho.len() != params.n_states {
        return Err(DdoError::ShapeMismatch);
    }
    let r = Readout::new(params);
    let parts: Vec<(DdoGradient, f64)> = dataset
        .par_iter()
        .map(|xi| {
            let post = forward_backward_with(&r, xi)?;
            let mut g = DdoGradient::zeros_like(params);
            accumulate(&r, xi, &post, &mut g);
            Ok((g, post.log_likelihood))
        })
        .collect::<Result<_, DdoError>>()?;
    let mut gradient = DdoGradient::zeros_like(params);
    let mut log_likelihood = 0.0;
    for (g, ll) in &parts {
        gradient.add_assign(g);
        log_likelihood += ll;
    }
    let regularizer = if lambda > 0.0 {
        pairwise_kl(params, rho, Some((&mut gradient, lambda)))
    } else {
        pairwise_kl(params, rho, None)
    };
    Ok(GradientPass {
        gradient,
        log_likelihood,
        regularizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ddo::log_likelihood;
    use crate::ddo::test_support::{random_case, trajectory};
    use crate::rng::seeded;
    use rand::Rng as _;

    fn objective(p: &DdoParams, data: &[Trajectory], lambda: f64, rho: &[f64]) -> f64 {
        log_likelihood(p, data).unwrap() + lambda * pairwise_kl(p, rho, None)
    }

    fn max_rel_error(p: &DdoParams, data: &[Trajectory], lambda: f64, rho: &[f64]) -> f64 {
        let analytic = gradient(p, data, lambda, rho).unwrap().gradient.flat();
        let base = p.flat();
        let step = 1e-5;
        let mut worst = 0.0_f64;
        for i in 0..base.len() {
            let mut q = p.clone();
            let mut x = base.clone();
            x[i] = base[i] + step;
            q.set_flat(&x);
            let up = objective(&q, data, lambda, rho);
            x[i] = base[i] - step;
            q.set_flat(&x);
            let down = objective(&q, data, lambda, rho);
            let fd = (up - down) / (2.0 * step);
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-3);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn matches_finite_differences() {
        let mut rng = seeded(21);
        for case in 0..20 {
            let lambda = if case % 2 == 0 { 0.0 } else { 0.3 };
            let (mut p, xi) = random_case(&mut rng, 4, 2 + case % 2, 2 + case % 5);
            if case % 3 == 0 {
                p.termination_scale = 0.5;
            }
            let (_, xi2) = random_case(&mut rng, 4, p.n_options, 3);
            let rho: Vec<f64> = {
                let raw: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
                let z: f64 = raw.iter().sum();
                raw.iter().map(|x| x / z).collect()
            };
            let err = max_rel_error(&p, &[xi, xi2], lambda, &rho);
            assert!(err < 1e-4, "case {case}: {err}");
        }
    }

    #[test]
    fn identical_options_get_identical_eta_gradients() {
        let mut p = DdoParams::zeros(3, 3);
        for (i, x) in p.psi_logits.iter_mut().enumerate() {
            *x = 0.2 * (i % 3) as f64;
        }
        let xi = trajectory(&[0, 1, 2, 1], &[1, 2, 3]);
        let g = gradient(&p, &[xi], 0.0, &[1.0 / 3.0; 3]).unwrap().gradient;
        for s in 0..3 {
            let row = &g.eta[s * 3..s * 3 + 3];
            assert!(row.iter().all(|&x| (x - row[0]).abs() < 1e-15), "{row:?}");
        }
    }

    #[test]
    fn zero_lambda_adds_nothing() {
        let mut rng = seeded(5);
        let (p, xi) = random_case(&mut rng, 4, 3, 4);
        let rho = [0.25; 4];
        let data = [xi];
        let with = gradient(&p, &data, 0.0, &rho).unwrap();
        let mut plain = DdoGradient::zeros_like(&p);
        let r = Readout::new(&p);
        let post = forward_backward_with(&r, &data[0]).unwrap();
        accumulate(&r, &data[0], &post, &mut plain);
        assert_eq!(with.gradient, plain);
        assert!(with.regularizer > 0.0);
    }

    #[test]
    fn gradient_is_thread_count_independent() {
        let mut rng = seeded(6);
        let (p, _) = random_case(&mut rng, 6, 3, 2);
        let data: Vec<Trajectory> = (0..40).map(|_| random_case(&mut rng, 6, 3, 7).1).collect();
        let a = gradient(&p, &data, 0.3, &[1.0 / 6.0; 6]).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| gradient(&p, &data, 0.3, &[1.0 / 6.0; 6]).unwrap());
        assert_eq!(a.gradient, b.gradient);
        assert_eq!(a.log_likelihood.to_bits(), b.log_likelihood.to_bits());
    }
}
