//! Central finite-difference verification of analytic gradients.

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Worst relative error observed for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamGradError {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat element index where the maximum occurred.
    pub at_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamGradError>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences
/// (L(w+h) - L(w-h)) / 2h with h = epsilon * max(1, |w|), element by element.
///
/// `loss_fn` must return the loss and its analytic gradients for every
/// parameter it differentiates; it is evaluated twice up front to detect
/// non-determinism.
pub fn finite_diff_check<L>(
    loss_fn: L,
    params: &mut ParamStore<f64>,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    L: Fn(&ParamStore<f64>) -> Result<(f64, BTreeMap<String, Tensor<f64>>)>,
{
    let (l1, analytic) = loss_fn(params)?;
    let (l2, _) = loss_fn(params)?;
    if !l1.is_finite() {
        return Err(Error::Numerical(format!("loss evaluated to {l1}")));
    }
    if l1 != l2 {
        return Err(Error::Determinism(l1, l2));
    }

    let mut per_param = Vec::new();
    let names: Vec<String> = analytic.keys().cloned().collect();
    for name in names {
        let grad = &analytic[&name];
        let numel = params.get(&name)?.numel();
        if grad.numel() != numel {
            return Err(Error::Dim(format!(
                "analytic gradient for {name:?} has {} elements, parameter has {numel}",
                grad.numel()
            )));
        }
        let mut worst = 0.0f64;
        let mut worst_idx = 0usize;
        for i in 0..numel {
            let w0 = params.get(&name)?.data()[i];
            let h = epsilon * w0.abs().max(1.0);

            params.get_mut(&name)?.data_mut()[i] = w0 + h;
            let (lp, _) = loss_fn(params)?;
            params.get_mut(&name)?.data_mut()[i] = w0 - h;
            let (lm, _) = loss_fn(params)?;
            params.get_mut(&name)?.data_mut()[i] = w0;

            let numeric = (lp - lm) / (2.0 * h);
            let e = rel_err(grad.data()[i], numeric);
            if e > worst {
                worst = e;
                worst_idx = i;
            }
        }
        per_param.push(ParamGradError {
            name,
            max_rel_err: worst,
            at_index: worst_idx,
        });
    }
    let max_rel_err = per_param.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_err,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn quadratic_store() -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert(
            "w",
            Tensor::new(vec![3], vec![0.7, -1.3, 2.1]).unwrap(),
        );
        p
    }

    #[test]
    fn quadratic_loss_is_exact() {
        // L = 0.5 ||w||^2, analytic grad w
        let mut params = quadratic_store();
        let report = finite_diff_check(
            |p| {
                let w = p.get("w")?;
                let loss = 0.5 * w.data().iter().map(|v| v * v).sum::<f64>();
                let mut grads = BTreeMap::new();
                grads.insert("w".to_string(), w.clone());
                Ok((loss, grads))
            },
            &mut params,
            1e-6,
            1e-9,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn corrupted_gradient_reports_one_third() {
        // With rel = |a-n| / max(|a|,|n|), scaling the analytic gradient by
        // 1.5 gives |1.5n - n| / 1.5n = 1/3 everywhere.
        let mut params = quadratic_store();
        let report = finite_diff_check(
            |p| {
                let w = p.get("w")?;
                let loss = 0.5 * w.data().iter().map(|v| v * v).sum::<f64>();
                let corrupted: Vec<f64> = w.data().iter().map(|v| 1.5 * v).collect();
                let mut grads = BTreeMap::new();
                grads.insert(
                    "w".to_string(),
                    Tensor::new(vec![3], corrupted).unwrap(),
                );
                Ok((loss, grads))
            },
            &mut params,
            1e-6,
            1e-9,
        )
        .unwrap();
        assert!(
            (report.max_rel_err - 1.0 / 3.0).abs() < 1e-6,
            "expected ~1/3, got {}",
            report.max_rel_err
        );
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let counter = Cell::new(0u32);
        let mut params = quadratic_store();
        let err = finite_diff_check(
            |p| {
                counter.set(counter.get() + 1);
                let w = p.get("w")?;
                let loss = w.data()[0] + counter.get() as f64 * 1e-3;
                let mut grads = BTreeMap::new();
                grads.insert("w".to_string(), Tensor::zeros(vec![3]));
                Ok((loss, grads))
            },
            &mut params,
            1e-6,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Determinism(..)));
    }

    #[test]
    fn tape_matmul_softmax_chain_passes() {
        let mut params = ParamStore::new();
        let mut rng = crate::rng::Rng::seed_from_u64(5);
        params.insert("a", Tensor::gaussian(vec![3, 4], 1.0, &mut rng));
        params.insert("b", Tensor::gaussian(vec![4, 2], 1.0, &mut rng));
        let report = finite_diff_check(
            |p| {
                let mut tape = Tape::new();
                let a = tape.leaf(p.get("a")?.clone(), true);
                let b = tape.leaf(p.get("b")?.clone(), true);
                let c = tape.matmul(a, b)?;
                let y = tape.softmax_rows(c)?;
                let loss = tape.cross_entropy_sum(c, vec![0, 1, 0])?;
                let l2 = tape.sum_all(y);
                let total = tape.add(loss, l2)?;
                let grads = tape.backward(total)?;
                let mut out = BTreeMap::new();
                out.insert("a".to_string(), grads.wrt(&tape, a));
                out.insert("b".to_string(), grads.wrt(&tape, b));
                Ok((tape.value(total).item(), out))
            },
            &mut params,
            1e-6,
            1e-7,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }
}
