//! Central finite-difference gradient checking.

use candle_core::{Tensor, Var};

use crate::error::Result;
use crate::nn::scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest relative error over all checked entries.
    pub max_rel_error: f64,
    pub entries: usize,
}

/// Compares `loss.backward()` with central differences for every entry of
/// every var. Entries are perturbed one at a time, so keep the vars small.
/// Relative error uses `max(|analytic|, |numeric|, floor)` as denominator.
pub fn check_gradients<F>(vars: &[Var], loss: F, eps: f64, floor: f64) -> Result<GradCheck>
where
    F: Fn() -> Result<Tensor>,
{
    let grads = loss()?.backward()?;
    let mut max_rel: f64 = 0.0;
    let mut entries = 0;
    for var in vars {
        let base = var.as_tensor().copy()?;
        let analytic = match grads.get(var) {
            Some(g) => g.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?,
            None => vec![0.0; var.elem_count()],
        };
        let flat = base.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
        for (i, &a) in analytic.iter().enumerate() {
            let eval = |delta: f64| -> Result<f64> {
                let mut v = flat.clone();
                v[i] += delta;
                let t = Tensor::from_vec(v, base.shape(), base.device())?.to_dtype(base.dtype())?;
                var.set(&t)?;
                scalar(&loss()?)
            };
            let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            var.set(&base)?;
            let denom = a.abs().max(numeric.abs()).max(floor);
            max_rel = max_rel.max((a - numeric).abs() / denom);
            entries += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: max_rel,
        entries,
    })
}
