//! Displacement distributions: the von Mises-Fisher density, the Gaussian
//! distance NLL, the angular loss and the raw-head mapping.

use std::f64::consts::PI;

use disploc::distributions::{
    angmf_loss, bessel_i0, gaussian_nll, orientation_loss, total_loss, vmf_density,
    DisplacementDistribution, DisplacementTarget,
};
use disploc::Result;

fn main() -> Result<()> {
    println!("I0(1) = {:.10}", bessel_i0(1.0)?);

    let mu = [1.0, 0.0];
    for kappa in [0.0, 0.5, 2.0, 10.0, 50.0] {
        let n = 10_000;
        let h = 2.0 * PI / n as f64;
        let mass: f64 = (0..n)
            .map(|i| {
                vmf_density([(i as f64 * h).cos(), (i as f64 * h).sin()], mu, kappa).unwrap() * h
            })
            .sum();
        println!(
            "vMF kappa {kappa:>4}: peak {:.4}, mass {mass:.9}",
            vmf_density(mu, mu, kappa)?
        );
    }

    println!(
        "distance NLL at the target, sigma^2 = 1: {}",
        gaussian_nll(1.0, 1.0, 1.0)?
    );
    println!(
        "distance NLL two units off: {}",
        gaussian_nll(3.0, 1.0, 1.0)?
    );

    println!("angular loss vs error at kappa = 4:");
    for deg in [0.0, 30.0, 90.0, 150.0, 179.0] {
        let a = f64::to_radians(deg);
        println!(
            "  {deg:>5} deg: {:.4}",
            angmf_loss(mu, 4.0, [a.cos(), a.sin()])?
        );
    }
    println!(
        "heading loss for a right angle: {}",
        orientation_loss([0.0, 3.0], [1.0, 0.0])?
    );

    // raw head outputs are mapped onto a valid distribution
    let d = DisplacementDistribution::from_raw([0.2, -1.0, 3.0, 4.0, 1.5])?;
    println!(
        "from raw: mu_r {:.4} sigma2 {:.4} mu_theta {:?} kappa {:.4}",
        d.mu_r, d.sigma2_r, d.mu_theta, d.kappa
    );
    let target = DisplacementTarget::from_displacement([0.3, 0.4]);
    let loss = total_loss(&d, &target, None)?;
    println!(
        "loss against (0.3, 0.4): r {:.4} theta {:.4}",
        loss.loss_r, loss.loss_theta
    );
    let at_target = DisplacementTarget::from_displacement([0.0, 0.0]);
    println!(
        "zero displacement masks direction: theta {}",
        total_loss(&d, &at_target, None)?.loss_theta
    );
    Ok(())
}
