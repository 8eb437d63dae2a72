//! Scores Gaussian feature clouds with the distribution metrics and a toy
//! label set with micro/macro F1.
//!
//! cargo run --example distribution_metrics

use dualbranch::metrics::{frechet_distance, kernel_distance, micro_macro_f1, per_finding_f1, prdc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn cloud(n: usize, d: usize, shift: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) + shift).collect())
        .collect()
}

fn main() -> dualbranch::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 4;
    let real = cloud(2000, d, 0.0, &mut rng);
    for shift in [0.0, 0.5, 1.0] {
        let fake = cloud(2000, d, shift, &mut rng);
        let fd = frechet_distance(&real, &fake)?;
        let kd = kernel_distance(&real, &fake)?;
        let p = prdc(&real[..400], &fake[..400], 5)?;
        println!(
            "shift {shift:.1}: fd {fd:.4} (ideal {:.2}) kd {kd:.4} precision {:.3} recall {:.3} density {:.3} coverage {:.3}",
            shift * shift * d as f64,
            p.precision,
            p.recall,
            p.density,
            p.coverage
        );
    }

    let truth = vec![vec![true, false, true], vec![false, false, true], vec![true, false, false]];
    let pred = vec![vec![true, false, false], vec![false, true, true], vec![true, false, false]];
    let (micro, macro_) = micro_macro_f1(&pred, &truth)?;
    println!("per-finding f1 {:?}", per_finding_f1(&pred, &truth)?);
    println!("micro {micro:.3} macro {macro_:.3}");
    Ok(())
}
