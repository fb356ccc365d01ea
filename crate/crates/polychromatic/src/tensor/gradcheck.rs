//! Central finite-difference verification of autodiff gradients.

use super::{Scalar, Tensor};

/// Compares the reverse-mode gradient of `f` (a scalar-valued function that
/// reads the current contents of the leaf tensor `x`) against central finite
/// differences `(f(x+eps) − f(x−eps)) / 2eps` per coordinate.
///
/// Returns the worst relative error, `|a − n| / max(|a| + |n|, 1e-4)`; the
/// floor keeps coordinates whose true gradient is zero from amplifying
/// finite-difference round-off into spurious failures.
pub fn grad_check<T: Scalar>(f: impl Fn() -> Tensor<T>, x: &Tensor<T>, eps: T) -> f64 {
    assert!(
        x.requires_grad(),
        "grad_check target must be a trainable leaf"
    );
    x.zero_grad();
    let loss = f();
    loss.backward().expect("grad_check loss must be scalar");
    let analytic: Vec<T> = x.grad().unwrap_or_else(|| vec![T::zero(); x.numel()]);

    let mut worst = 0.0_f64;
    for i in 0..x.numel() {
        let original = x.data()[i];
        x.leaf_data_mut()[i] = original + eps;
        let plus = f().item().to_f64();
        x.leaf_data_mut()[i] = original - eps;
        let minus = f().item().to_f64();
        x.leaf_data_mut()[i] = original;

        let numeric = (plus - minus) / (2.0 * eps.to_f64());
        let a = analytic[i].to_f64();
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-4);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
