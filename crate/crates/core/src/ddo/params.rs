use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::expert::ActionDist;
use crate::gridworld::N_ACTIONS;
use crate::rng::Rng;

/// Logit parameters of the option model.
///
/// Layouts (row-major): `eta_logits[s * H + h]`, `pi_logits[(h * S + s) * A + a]`,
/// `psi_logits[h * S + s]`. Terminations are read out as
/// `termination_scale * logistic(psi_logit)`; the scale never touches the logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdoParams {
    pub n_options: usize,
    pub n_states: usize,
    pub eta_logits: Vec<f64>,
    pub pi_logits: Vec<f64>,
    pub psi_logits: Vec<f64>,
    pub termination_scale: f64,
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax of `logits` written into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(logits) {
        *o = (x - m).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lz = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lz).collect()
}

impl DdoParams {
    pub fn zeros(n_states: usize, n_options: usize) -> Self {
        DdoParams {
            n_options,
            n_states,
            eta_logits: vec![0.0; n_states * n_options],
            pi_logits: vec![0.0; n_options * n_states * N_ACTIONS],
            psi_logits: vec![0.0; n_options * n_states],
            termination_scale: 1.0,
        }
    }

    /// Logits drawn i.i.d. from Normal(0, init_scale).
    pub fn random(n_states: usize, n_options: usize, init_scale: f64, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(n_states, n_options);
        if init_scale > 0.0 {
            let normal = Normal::new(0.0, init_scale).expect("finite positive stddev");
            for x in p
                .eta_logits
                .iter_mut()
                .chain(p.pi_logits.iter_mut())
                .chain(p.psi_logits.iter_mut())
            {
                *x = normal.sample(rng);
            }
        }
        p
    }

    pub fn n_params(&self) -> usize {
        self.eta_logits.len() + self.pi_logits.len() + self.psi_logits.len()
    }

    pub fn shape_ok(&self) -> bool {
        let (s, h) = (self.n_states, self.n_options);
        h > 0
            && self.eta_logits.len() == s * h
            && self.pi_logits.len() == h * s * N_ACTIONS
            && self.psi_logits.len() == h * s
    }

    pub fn pi_slice(&self, h: usize, s: usize) -> &[f64] {
        let i = (h * self.n_states + s) * N_ACTIONS;
        &self.pi_logits[i..i + N_ACTIONS]
    }

    pub fn eta(&self, s: usize) -> Vec<f64> {
        let h = self.n_options;
        let mut out = vec![0.0; h];
        softmax_into(&self.eta_logits[s * h..(s + 1) * h], &mut out);
        out
    }

    pub fn pi(&self, h: usize, s: usize) -> ActionDist {
        let mut out = [0.0; N_ACTIONS];
        softmax_into(self.pi_slice(h, s), &mut out);
        out
    }

    /// Termination probability before scaling.
    pub fn psi_unscaled(&self, h: usize, s: usize) -> f64 {
        logistic(self.psi_logits[h * self.n_states + s])
    }

    /// Effective termination probability.
    pub fn psi(&self, h: usize, s: usize) -> f64 {
        self.termination_scale * self.psi_unscaled(h, s)
    }

    /// Flattened view of every logit, in eta, pi, psi order.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.extend_from_slice(&self.eta_logits);
        v.extend_from_slice(&self.pi_logits);
        v.extend_from_slice(&self.psi_logits);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let (ne, np) = (self.eta_logits.len(), self.pi_logits.len());
        self.eta_logits.copy_from_slice(&flat[..ne]);
        self.pi_logits.copy_from_slice(&flat[ne..ne + np]);
        self.psi_logits.copy_from_slice(&flat[ne + np..]);
    }

    /// Reorders options so that new option `k` is old option `perm[k]`.
    pub fn permute_options(&self, perm: &[usize]) -> DdoParams {
        let (s_n, h_n) = (self.n_states, self.n_options);
        let mut out = self.clone();
        for (k, &old) in perm.iter().enumerate() {
            for s in 0..s_n {
                out.eta_logits[s * h_n + k] = self.eta_logits[s * h_n + old];
                out.psi_logits[k * s_n + s] = self.psi_logits[old * s_n + s];
                let dst = (k * s_n + s) * N_ACTIONS;
                out.pi_logits[dst..dst + N_ACTIONS].copy_from_slice(self.pi_slice(old, s));
            }
        }
        out
    }
}

/// Probabilities read out from [`DdoParams`], same layouts as the logits.
#[derive(Debug, Clone)]
pub struct Readout {
    pub n_options: usize,
    pub n_states: usize,
    pub eta: Vec<f64>,
    pub pi: Vec<f64>,
    pub psi_unscaled: Vec<f64>,
    pub psi: Vec<f64>,
    pub termination_scale: f64,
}

impl Readout {
    pub fn new(p: &DdoParams) -> Self {
        let (s_n, h_n) = (p.n_states, p.n_options);
        let mut eta = vec![0.0; s_n * h_n];
        for s in 0..s_n {
            softmax_into(&p.eta_logits[s * h_n..(s + 1) * h_n], &mut eta[s * h_n..(s + 1) * h_n]);
        }
        let mut pi = vec![0.0; p.pi_logits.len()];
        for (src, dst) in p.pi_logits.chunks(N_ACTIONS).zip(pi.chunks_mut(N_ACTIONS)) {
            softmax_into(src, dst);
        }
        let psi_unscaled: Vec<f64> = p.psi_logits.iter().map(|&x| logistic(x)).collect();
        let psi = psi_unscaled.iter().map(|&x| p.termination_scale * x).collect();
        Readout {
            n_options: h_n,
            n_states: s_n,
            eta,
            pi,
            psi_unscaled,
            psi,
            termination_scale: p.termination_scale,
        }
    }

    #[inline]
    pub fn eta(&self, s: usize, h: usize) -> f64 {
        self.eta[s * self.n_options + h]
    }

    #[inline]
    pub fn pi(&self, h: usize, s: usize, a: usize) -> f64 {
        self.pi[(h * self.n_states + s) * N_ACTIONS + a]
    }

    pub fn pi_row(&self, h: usize, s: usize) -> &[f64] {
        let i = (h * self.n_states + s) * N_ACTIONS;
        &self.pi[i..i + N_ACTIONS]
    }

    #[inline]
    pub fn psi(&self, h: usize, s: usize) -> f64 {
        self.psi[h * self.n_states + s]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    #[test]
    fn zero_logits_read_out_uniform() {
        let p = DdoParams::zeros(3, 2);
        assert_eq!(p.eta(1), vec![0.5, 0.5]);
        assert_eq!(p.pi(1, 2), [0.25; 4]);
        assert_eq!(p.psi(0, 0), 0.5);
    }

    #[test]
    fn logistic_is_stable_at_extremes() {
        assert_eq!(logistic(-800.0), 0.0);
        assert_eq!(logistic(800.0), 1.0);
        assert!((logistic(0.3) + logistic(-0.3) - 1.0).abs() < 1e-16);
    }

    proptest! {
        #[test]
        fn readout_distributions_are_normalized(seed in 0u64..1000, scale in 0.01f64..5.0) {
            let p = DdoParams::random(5, 3, scale, &mut seeded(seed));
            let r = Readout::new(&p);
            for s in 0..5 {
                let total: f64 = (0..3).map(|h| r.eta(s, h)).sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
                for h in 0..3 {
                    let t: f64 = r.pi_row(h, s).iter().sum();
                    prop_assert!((t - 1.0).abs() <= 1e-12);
                    prop_assert!(r.psi(h, s) > 0.0 && r.psi(h, s) < 1.0);
                }
            }
        }
    }

    #[test]
    fn permutation_moves_whole_options() {
        let p = DdoParams::random(4, 3, 1.0, &mut seeded(2));
        let q = p.permute_options(&[2, 0, 1]);
        assert_eq!(q.pi(0, 3), p.pi(2, 3));
        assert_eq!(q.psi(1, 2), p.psi(0, 2));
        assert!((q.eta(1)[2] - p.eta(1)[1]).abs() < 1e-15);
        assert_eq!(q.permute_options(&[1, 2, 0]), p);
    }
}
