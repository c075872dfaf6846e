//! Central finite-difference checking of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

/// One evaluation of the loss under test.
pub struct LossEval {
    pub loss: f64,
    /// Analytic gradients, one per parameter. Only required when asked for.
    pub grads: Option<Vec<Tensor<f64>>>,
    /// Identifies the piecewise-linear region the evaluation landed in
    /// (see [`crate::graph::Graph::region_signature`]). Use `0` for smooth
    /// losses.
    pub region: u64,
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub h: f64,
    /// Coordinates whose region changes within `kink_margin * h` are skipped.
    pub kink_margin: f64,
    /// Coordinates sampled per parameter; `None` checks every coordinate.
    pub coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            kink_margin: 10.0,
            coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_near_kink: usize,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare analytic gradients against central differences.
///
/// `eval(params, want_grads)` must be a pure function of `params`; any
/// randomness inside it (dropout masks) has to be reseeded identically on
/// every call.
pub fn grad_check<F>(mut eval: F, params: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>], bool) -> Result<LossEval>,
{
    let base = eval(params, true)?;
    let analytic = base.grads.expect("gradient requested from base evaluation");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = params.to_vec();

    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = match cfg.coords_per_param {
            Some(k) if k < p.len() => sample(&mut rng, p.len(), k).into_vec(),
            _ => (0..p.len()).collect(),
        };
        for c in coords {
            let orig = p.data()[c];
            let mut at = |delta: f64, work: &mut Vec<Tensor<f64>>| -> Result<LossEval> {
                work[pi].data_mut()[c] = orig + delta;
                let r = eval(work, false);
                work[pi].data_mut()[c] = orig;
                r
            };
            let far_hi = at(cfg.kink_margin * cfg.h, &mut work)?;
            let far_lo = at(-cfg.kink_margin * cfg.h, &mut work)?;
            if far_hi.region != base.region || far_lo.region != base.region {
                report.skipped_near_kink += 1;
                continue;
            }
            let hi = at(cfg.h, &mut work)?;
            let lo = at(-cfg.h, &mut work)?;
            let numeric = (hi.loss - lo.loss) / (2.0 * cfg.h);
            let a = analytic[pi].data()[c];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, c));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn quadratic(params: &[Tensor<f64>], want: bool, corrupt: bool) -> Result<LossEval> {
        let mut g = Graph::new();
        let p = g.leaf(params[0].clone());
        let sq = g.mul(p, p)?;
        let loss = g.sum(sq);
        let grads = if want {
            let mut gr = g.backward(loss)?.take(p).unwrap();
            if corrupt {
                gr.data_mut()[0] *= 2.0;
            }
            Some(vec![gr])
        } else {
            None
        };
        Ok(LossEval {
            loss: g.scalar(loss),
            grads,
            region: 0,
        })
    }

    #[test]
    fn quadratic_passes() {
        let p = vec![Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap()];
        let r = grad_check(|x, w| quadratic(x, w, false), &p, &GradCheckConfig::default()).unwrap();
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn corrupted_adjoint_is_caught() {
        let p = vec![Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap()];
        let r = grad_check(|x, w| quadratic(x, w, true), &p, &GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_error > 0.1, "{r:?}");
        assert_eq!(r.worst, Some((0, 0)));
    }

    #[test]
    fn coordinates_at_a_kink_are_skipped() {
        // hard_tanh(x) summed; x[0] sits exactly on the kink at 1
        let eval = |params: &[Tensor<f64>], want: bool| -> Result<LossEval> {
            let mut g = Graph::new();
            let p = g.leaf(params[0].clone());
            let y = g.unary(crate::graph::Unary::HardTanh, p);
            let loss = g.sum(y);
            let grads = if want { Some(vec![g.backward(loss)?.take(p).unwrap()]) } else { None };
            Ok(LossEval {
                loss: g.scalar(loss),
                grads,
                region: g.region_signature(),
            })
        };
        let p = vec![Tensor::from_f64(&[2], &[1.0, 0.3]).unwrap()];
        let r = grad_check(eval, &p, &GradCheckConfig::default()).unwrap();
        assert_eq!((r.checked, r.skipped_near_kink), (1, 1));
        assert!(r.max_rel_error < 1e-9);
    }
}
