//! Running Gaussian estimates versus the batch fit, with and without a
//! count clip.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use ttac::stats::{batch_mle, Clip, RunningGaussian};

fn main() -> ttac::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, d, batch) = (2_000, 4, 50);
    // the stream drifts halfway through
    let x = DMatrix::from_fn(n, d, |i, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z + if i < n / 2 { 0.0 } else { 3.0 }
    });

    let mut exact = RunningGaussian::new(d, Clip::Unbounded);
    let mut clipped = RunningGaussian::new(d, Clip::At(200));
    println!("{:>6} {:>12} {:>12} {:>10}", "seen", "exact μ₀", "clipped μ₀", "coef");
    for start in (0..n).step_by(batch) {
        let rows = x.rows(start, batch).into_owned();
        exact.update_global(&rows)?;
        let up = clipped.update_global(&rows)?;
        if (start / batch) % 5 == 4 {
            println!(
                "{:>6} {:>12.4} {:>12.4} {:>10.5}",
                start + batch,
                exact.mean()[0],
                clipped.mean()[0],
                up.coefficient
            );
        }
    }

    let (mean, cov) = batch_mle(&x)?;
    println!(
        "unclipped vs batch fit: mean {:.1e}, covariance {:.1e}",
        (exact.mean() - mean).amax(),
        (exact.covariance() - cov).amax()
    );
    println!("clipped estimate tracks the recent half: μ₀ = {:.3}", clipped.mean()[0]);
    Ok(())
}
