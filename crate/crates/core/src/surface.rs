//! Kernel-estimated reward surface over `(reduced covariates, dose)` and its
//! maximization over a dose grid. Shared by the pseudo-dose targets of the
//! direct learner and by the grid-kernel second-stage rule.

use crate::kernel::{Bandwidth, WeightedMean};

pub(crate) struct RewardSurface<'a> {
    /// `n × k` row-major reduced covariates.
    anchors: &'a [f64],
    k: usize,
    rewards: &'a [f64],
    inv_h: Vec<f64>,
    normalizer: f64,
    floor: f64,
    fallback_mean: f64,
    /// `q × n` dose factors `exp(-½((a_g - A_j)/h_a)²)`.
    dose_factors: Vec<f64>,
    grid: &'a [f64],
}

impl<'a> RewardSurface<'a> {
    /// `bandwidth` has `k + 1` coordinates, the last one for the dose.
    pub(crate) fn new(
        anchors: &'a [f64],
        k: usize,
        doses: &'a [f64],
        rewards: &'a [f64],
        bandwidth: &Bandwidth,
        grid: &'a [f64],
        floor: f64,
    ) -> Self {
        debug_assert_eq!(bandwidth.dim(), k + 1);
        debug_assert_eq!(anchors.len(), k * rewards.len());
        let inv_h: Vec<f64> = bandwidth.per_coord().iter().map(|h| 1.0 / h).collect();
        let inv_ha = inv_h[k];
        let dose_factors = grid
            .iter()
            .flat_map(|&a| {
                doses.iter().map(move |&aj| {
                    let t = (a - aj) * inv_ha;
                    (-0.5 * t * t).exp()
                })
            })
            .collect();
        Self {
            anchors,
            k,
            rewards,
            inv_h,
            normalizer: bandwidth.normalizer(),
            floor,
            fallback_mean: crate::kernel::global_mean(rewards),
            dose_factors,
            grid,
        }
    }

    /// Grid dose maximizing the estimated reward at `query`; ties go to the
    /// smallest dose. Also reports whether any grid evaluation fell back.
    pub(crate) fn argmax(&self, query: &[f64]) -> (f64, bool) {
        let n = self.rewards.len();
        let k = self.k;
        let kz: Vec<f64> = (0..n)
            .map(|j| {
                let row = &self.anchors[j * k..(j + 1) * k];
                let s: f64 = row
                    .iter()
                    .zip(query)
                    .zip(&self.inv_h)
                    .map(|((z, q), ih)| {
                        let t = (q - z) * ih;
                        t * t
                    })
                    .sum();
                (-0.5 * s).exp()
            })
            .collect();
        let mut best = (f64::NEG_INFINITY, self.grid[0]);
        let mut any_fallback = false;
        for (g, &a) in self.grid.iter().enumerate() {
            let factors = &self.dose_factors[g * n..(g + 1) * n];
            let mut acc = WeightedMean::with_fallback(self.rewards[0], self.fallback_mean);
            for j in 0..n {
                acc.add(kz[j] * factors[j], self.rewards[j]);
            }
            let est = acc.finish(self.normalizer, self.floor);
            any_fallback |= est.fallback;
            if est.value > best.0 {
                best = (est.value, a);
            }
        }
        (best.1, any_fallback)
    }
}
