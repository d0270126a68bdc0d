//! Privacy calculators over a small parameter sweep.

use pmsfl::privacy::{
    bernoulli_amplified_epsilon, epsilon_amp_forward, sigma_for_mask_noise, sigma_for_update_noise, AmplificationForm,
    DEFAULT_ALPHA_GRID, DEFAULT_DELTA,
};

fn main() -> pmsfl::Result<()> {
    println!("forward amplification, eps = 1");
    for c in [0.1, 0.25, 0.4] {
        let row: Vec<String> = (1..=4).map(|d| format!("{:.4}", epsilon_amp_forward(1.0, c, d).unwrap())).collect();
        println!("  c = {c:<4} d = 1..4: {}", row.join("  "));
    }

    println!("update noise variance, 100 iterations, clip 1, batch 32");
    for eps in [0.5, 1.0, 4.0] {
        println!("  eps = {eps:<3}: {:.6}", sigma_for_update_noise(100, 1.0, eps, DEFAULT_DELTA, 32)?);
    }

    println!("mask noise variance, eps = 1");
    for c in [0.05, 0.25, 0.45] {
        println!("  c = {c:<4}: {:.4}", sigma_for_mask_noise(c, 1.0, DEFAULT_DELTA)?);
    }

    println!("bernoulli amplification, eps = 8");
    for params in [1, 4, 16] {
        let sym = bernoulli_amplified_epsilon(8.0, 0.3, params, &DEFAULT_ALPHA_GRID, AmplificationForm::Symmetric)?;
        let printed = bernoulli_amplified_epsilon(8.0, 0.3, params, &DEFAULT_ALPHA_GRID, AmplificationForm::Printed)?;
        println!("  {params:>2} masked parameters: {sym:.4} (duplicated-term form {printed:.4})");
    }
    Ok(())
}
