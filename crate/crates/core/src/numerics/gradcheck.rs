//! Finite-difference verification of analytic gradients (64-bit).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::store::ParamStore;
use super::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates where the loss is not smooth within the stencil (for
    /// example a ReLU input within a step of zero). They are excluded from
    /// `max_rel_error` and `failures`.
    pub nonsmooth: usize,
    pub max_rel_error: f64,
    pub failures: Vec<GradFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.nonsmooth += other.nonsmooth;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.failures.extend(other.failures);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Coordinates sampled per parameter; `None` checks all of them.
    pub coords_per_param: Option<usize>,
    pub step: f64,
    pub seed: u64,
    /// Set aside coordinates where the loss is visibly not smooth within the
    /// stencil.
    pub detect_nonsmooth: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            tolerance: 1e-4,
            coords_per_param: None,
            step: 1e-4,
            seed: 0,
            detect_nonsmooth: true,
        }
    }
}

/// Compares `loss_fn`'s analytic gradients against a fourth-order central
/// difference for sampled coordinates of every parameter. A coordinate fails
/// when `|analytic - numeric| / max(1e-8, |numeric|)` reaches the tolerance.
///
/// With `detect_nonsmooth`, the estimate is repeated at half the step and the
/// second differences at `h/2`, `h`, `2h` are compared. When either departs
/// from smooth scaling by more than `max(tolerance * |numeric|, 1e-6)` the
/// loss has a kink inside the stencil and the coordinate is only counted.
pub fn grad_check<L>(store: &ParamStore<f64>, loss_fn: L, opts: GradCheckOptions) -> GradCheckReport
where
    L: Fn(&ParamStore<f64>) -> (f64, Vec<Tensor<f64>>),
{
    let (_, analytic) = loss_fn(store);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = store.clone();
    let mut report = GradCheckReport::default();
    for (pid, param) in store.params().iter().enumerate() {
        let n = param.value.len();
        let coords: Vec<usize> = match opts.coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for idx in coords {
            let x0 = param.value.data()[idx];
            let mut eval = |delta: f64| {
                probe.value_mut(pid).data_mut()[idx] = x0 + delta;
                let v = loss_fn(&probe).0;
                probe.value_mut(pid).data_mut()[idx] = x0;
                v
            };
            let h = opts.step;
            let (p2, p1, m1, m2) = (eval(2.0 * h), eval(h), eval(-h), eval(-2.0 * h));
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            report.checked += 1;
            if opts.detect_nonsmooth {
                let (f0, ph, mh) = (eval(0.0), eval(h / 2.0), eval(-h / 2.0));
                let half = (8.0 * (ph - mh) - (p1 - m1)) / (6.0 * h);
                // second differences scale as h² when smooth, as h across a kink
                let s = |a: f64, b: f64| a - 2.0 * f0 + b;
                let bend = ((s(p1, m1) - 4.0 * s(ph, mh)).abs() / h).max((s(p2, m2) - 4.0 * s(p1, m1)).abs() / (2.0 * h));
                let limit = (opts.tolerance * numeric.abs()).max(1e-6);
                if (numeric - half).abs() > limit || bend > limit {
                    report.nonsmooth += 1;
                    continue;
                }
            }
            let a = analytic[pid].data()[idx];
            let rel = (a - numeric).abs() / numeric.abs().max(1e-8);
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel.is_nan() || rel >= opts.tolerance {
                report.failures.push(GradFailure {
                    param: param.name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    report
}
