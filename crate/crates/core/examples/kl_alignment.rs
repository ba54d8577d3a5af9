//! Pulls a target Gaussian onto a fixed anchor by gradient descent on
//! `KL(anchor ‖ target)`.

use nalgebra::{DMatrix, DVector};
use ttac::gauss::{kl_with_target_gradient, GaussianParams, KlForm};

fn main() -> ttac::Result<()> {
    let anchor = GaussianParams::new(
        DVector::from_vec(vec![1.0, -2.0, 0.5]),
        DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.0, 0.2, 0.0, 0.2, 0.5]),
    )?;
    let mut target = GaussianParams::new(DVector::zeros(3), DMatrix::identity(3, 3) * 4.0)?;
    let step = 0.2;
    for it in 0..=400 {
        let terms = kl_with_target_gradient(&anchor, &target, 0.0, KlForm::Standard)?;
        if it % 50 == 0 {
            println!("iter {it:>3}: KL {:.6}", terms.value);
        }
        let mean = &target.mean - step * &terms.grad_mean;
        let mut cov = &target.covariance - step * &terms.grad_covariance;
        cov = (&cov + cov.transpose()) * 0.5;
        target = GaussianParams::new(mean, cov)?;
    }
    println!("target mean {:.4?}", target.mean.as_slice());
    println!(
        "covariance error {:.2e}",
        (&target.covariance - &anchor.covariance).amax()
    );
    Ok(())
}
