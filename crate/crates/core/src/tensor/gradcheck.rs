//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::ParamSet;

/// Compare analytic gradients against central differences.
///
/// `loss_fn(params, accumulate)` must return the scalar loss; when
/// `accumulate` is true it must also add analytic gradients into the
/// parameter set (the normal forward/backward/accumulate path). The same
/// closure is then re-evaluated forward-only at `p ± h` per element.
///
/// Each trainable parameter tensor is scored as
/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, 1e-8)` where `a` is its analytic gradient
/// and `n` the central-difference estimate; the worst score across tensors
/// is returned. Comparing whole-tensor norms keeps the check sharp for real
/// backward bugs (which corrupt a tensor's gradient direction, scoring ~1)
/// while staying immune to floating-point noise on individual elements
/// whose true gradient is far below the tensor's scale. Frozen parameters
/// are skipped: their gradients are zeroed by contract, so a finite
/// difference would disagree by construction.
///
/// `h` must lie in `[1e-6, 1e-2]`: below that range cancellation noise
/// dominates f64 central differences, above it truncation error does.
pub fn grad_check<F>(params: &mut ParamSet, h: f64, mut loss_fn: F) -> Result<f64>
where
    F: FnMut(&mut ParamSet, bool) -> Result<f64>,
{
    if !(1e-6..=1e-2).contains(&h) {
        return Err(Error::InvalidArgument(format!(
            "grad_check step size must be in [1e-6, 1e-2], got {h}"
        )));
    }

    params.zero_grads();
    let base_loss = loss_fn(params, true)?;
    if !base_loss.is_finite() {
        return Err(Error::NonFinite("grad_check base loss".into()));
    }
    let analytic: Vec<Vec<f64>> = (0..params.len())
        .map(|i| {
            let p = params.get(i);
            p.tensor
                .grad
                .clone()
                .unwrap_or_else(|| vec![0.0; p.tensor.numel()])
        })
        .collect();

    let mut worst = 0.0f64;
    for idx in 0..params.len() {
        if params.get(idx).frozen {
            continue;
        }
        let mut diff_sq = 0.0;
        let mut ana_sq = 0.0;
        let mut num_sq = 0.0;
        for e in 0..params.get(idx).tensor.numel() {
            let original = params.get(idx).tensor.data[e];
            params.get_mut(idx).tensor.data[e] = original + h;
            let plus = loss_fn(params, false)?;
            params.get_mut(idx).tensor.data[e] = original - h;
            let minus = loss_fn(params, false)?;
            params.get_mut(idx).tensor.data[e] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check loss at perturbed parameter {}",
                    params.get(idx).name
                )));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[idx][e];
            diff_sq += (a - numeric) * (a - numeric);
            ana_sq += a * a;
            num_sq += numeric * numeric;
        }
        let err = diff_sq.sqrt() / f64::max(ana_sq.sqrt().max(num_sq.sqrt()), 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    fn quadratic_set() -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert(
            "w",
            "all",
            Tensor::new(vec![1, 3], vec![0.5, -1.25, 2.0]).unwrap(),
        )
        .unwrap();
        ps.insert("b", "all", Tensor::new(vec![1, 1], vec![0.75]).unwrap())
            .unwrap();
        ps
    }

    /// loss = Σ p², with exact gradient 2p written when asked.
    fn sum_of_squares(scale: f64) -> impl FnMut(&mut ParamSet, bool) -> crate::error::Result<f64> {
        move |ps, accumulate| {
            let mut loss = 0.0;
            for i in 0..ps.len() {
                loss += ps.get(i).tensor.data.iter().map(|x| x * x).sum::<f64>();
            }
            if accumulate {
                for i in 0..ps.len() {
                    let data = ps.get(i).tensor.data.clone();
                    let g = ps.get_mut(i).tensor.ensure_grad();
                    for (gi, x) in g.iter_mut().zip(&data) {
                        *gi += scale * 2.0 * x;
                    }
                }
            }
            Ok(loss)
        }
    }

    #[test]
    fn linear_function_checks_to_machine_precision() {
        let mut ps = quadratic_set();
        let worst = grad_check(&mut ps, 1e-3, |ps, accumulate| {
            let mut loss = 0.0;
            for i in 0..ps.len() {
                loss += ps
                    .get(i)
                    .tensor
                    .data
                    .iter()
                    .enumerate()
                    .map(|(j, x)| (j as f64 + 1.0) * x)
                    .sum::<f64>();
            }
            if accumulate {
                for i in 0..ps.len() {
                    let n = ps.get(i).tensor.numel();
                    let g = ps.get_mut(i).tensor.ensure_grad();
                    for (j, gi) in g.iter_mut().enumerate().take(n) {
                        *gi += j as f64 + 1.0;
                    }
                }
            }
            Ok(loss)
        })
        .unwrap();
        assert!(worst < 1e-10, "worst {worst}");
    }

    #[test]
    fn quadratic_function_checks_below_1e6() {
        let mut ps = quadratic_set();
        let worst = grad_check(&mut ps, 1e-4, sum_of_squares(1.0)).unwrap();
        assert!(worst < 1e-6, "worst {worst}");
    }

    #[test]
    fn detects_wrong_gradients() {
        let mut ps = quadratic_set();
        let worst = grad_check(&mut ps, 1e-4, sum_of_squares(2.0)).unwrap();
        assert!(worst > 0.4, "doubled gradient should give ~0.5, got {worst}");
    }

    #[test]
    fn zero_gradient_element_noise_measured_against_tensor_norm() {
        let mut ps = ParamSet::new();
        ps.insert(
            "w",
            "all",
            Tensor::new(vec![1, 3], vec![0.5, -1.25, 0.0]).unwrap(),
        )
        .unwrap();
        // loss = Σ p² has exact gradient 2p; the reported analytic gradient
        // carries 1e-6 of absolute noise on the element whose true gradient
        // is zero. Scored against the tensor norm (~2.7) this is harmless,
        // whereas against the element's own magnitude it would read as an
        // order-one discrepancy.
        let worst = grad_check(&mut ps, 1e-4, |ps, accumulate| {
            let mut loss = 0.0;
            for i in 0..ps.len() {
                loss += ps.get(i).tensor.data.iter().map(|x| x * x).sum::<f64>();
            }
            if accumulate {
                for i in 0..ps.len() {
                    let data = ps.get(i).tensor.data.clone();
                    let g = ps.get_mut(i).tensor.ensure_grad();
                    for (gi, x) in g.iter_mut().zip(&data) {
                        *gi += 2.0 * x + if *x == 0.0 { 1e-6 } else { 0.0 };
                    }
                }
            }
            Ok(loss)
        })
        .unwrap();
        assert!(worst < 1e-5, "worst {worst}");
        assert!(worst > 1e-8, "noise should still register, got {worst}");
    }

    #[test]
    fn skips_frozen_parameters() {
        let mut ps = ParamSet::new();
        ps.insert("live", "a", Tensor::full(vec![1, 2], 0.3)).unwrap();
        ps.insert("ice", "b", Tensor::full(vec![1, 2], -0.7)).unwrap();
        ps.set_group_frozen("b", true).unwrap();
        // Closure reports a zero gradient for the frozen parameter even
        // though the loss depends on it — exactly the freeze contract.
        let worst = grad_check(&mut ps, 1e-4, |ps, accumulate| {
            let mut loss = 0.0;
            for i in 0..ps.len() {
                loss += ps.get(i).tensor.data.iter().map(|x| x * x).sum::<f64>();
            }
            if accumulate {
                for i in 0..ps.len() {
                    if ps.get(i).frozen {
                        continue;
                    }
                    let data = ps.get(i).tensor.data.clone();
                    let g = ps.get_mut(i).tensor.ensure_grad();
                    for (gi, x) in g.iter_mut().zip(&data) {
                        *gi += 2.0 * x;
                    }
                }
            }
            Ok(loss)
        })
        .unwrap();
        assert!(worst < 1e-6, "worst {worst}");
    }

    #[test]
    fn rejects_step_size_outside_trusted_range() {
        let mut ps = quadratic_set();
        assert!(grad_check(&mut ps, 1e-7, sum_of_squares(1.0)).is_err());
        assert!(grad_check(&mut ps, 0.1, sum_of_squares(1.0)).is_err());
    }

    #[test]
    fn parameters_restored_after_check() {
        let mut ps = quadratic_set();
        let before: Vec<Vec<u64>> = (0..ps.len())
            .map(|i| ps.get(i).tensor.data.iter().map(|v| v.to_bits()).collect())
            .collect();
        grad_check(&mut ps, 1e-4, sum_of_squares(1.0)).unwrap();
        let after: Vec<Vec<u64>> = (0..ps.len())
            .map(|i| ps.get(i).tensor.data.iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn graph_built_network_passes_gradient_check() {
        let mut ps = ParamSet::new();
        let mut seed_rng = crate::seeding::rng_from(3);
        ps.insert("w1", "all", Tensor::randn(vec![3, 4], 0.5, &mut seed_rng))
            .unwrap();
        ps.insert("b1", "all", Tensor::randn(vec![1, 4], 0.5, &mut seed_rng))
            .unwrap();
        ps.insert("w2", "all", Tensor::randn(vec![4, 5], 0.5, &mut seed_rng))
            .unwrap();
        let x = Tensor::randn(vec![2, 3], 1.0, &mut seed_rng);
        let targets = vec![1usize, 4];

        let worst = grad_check(&mut ps, 1e-4, move |ps, accumulate| {
            let mut g = Graph::new();
            let xin = g.constant(x.clone());
            let w1 = g.param(ps, 0);
            let b1 = g.param(ps, 1);
            let w2 = g.param(ps, 2);
            let h1 = g.matmul(xin, w1)?;
            let h1b = g.add_row(h1, b1)?;
            let act = g.gelu(h1b);
            let logits = g.matmul(act, w2)?;
            let loss = g.cross_entropy_sum(logits, &targets)?;
            if accumulate {
                g.backward(loss)?;
                g.accumulate_param_grads(ps);
            }
            Ok(g.value(loss))
        })
        .unwrap();
        assert!(worst < 1e-6, "worst {worst}");
    }
}
