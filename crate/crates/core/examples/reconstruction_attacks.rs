//! The three attacks: DLG on smashed data, analytic inversion under a
//! guessed mask, and input recovery from uploaded score gradients.

use pmsfl::attack::{
    analytic_inversion, dlg_attack, empirical_reconstruction_error, l2_distance, score_gradient_cascade, CascadeLayer,
    DlgConfig, MaskKnowledge,
};
use pmsfl::mask::{masked_forward, sample_mask, ste_backward, BinaryMask, ProbMask, ScoreMask};
use pmsfl::net::{Network, Nonlinearity, Stack, WeightMatrix};
use pmsfl::privacy::expected_reconstruction_bound;
use pmsfl::rng::seeded;

fn main() -> pmsfl::Result<()> {
    let mut rng = seeded(11);
    let net = Network::kaiming(&[8, 16], Nonlinearity::Relu, &mut rng)?;
    let victim = Stack { weights: &net.layers, nonlinearity: net.nonlinearity, activate_output: false };
    let x = vec![0.3, -0.5, 0.9, 0.1, -0.2, 0.7, -0.8, 0.4];
    let theta = ProbMask::uniform(&net.layer_sizes(), 0.5)?;
    let mask = sample_mask(&theta, &mut rng);
    let (smashed, _) = masked_forward(&victim, &mask, &x)?;
    for (name, knowledge) in [
        ("exact mask", MaskKnowledge::Exact(mask.clone())),
        ("keep probabilities", MaskKnowledge::Probabilistic(theta.clone())),
        ("unmasked weights", MaskKnowledge::None),
    ] {
        let report = dlg_attack(&smashed.values, &victim, &knowledge, &DlgConfig::default(), None, &mut rng)?;
        println!("DLG with {name:<18}: error {:.4}", l2_distance(&report.reconstruction, &x));
    }

    let w = WeightMatrix::from_rows(&[vec![2.0, 0.5], vec![-0.3, 1.5]])?;
    let x2 = [0.6, -0.4];
    let y = w.matvec(&x2)?;
    println!("inversion with the right mask: {:?}", analytic_inversion(&y, &w, &[true; 4])?);
    let theta2 = ProbMask::uniform(&[4], 0.5)?;
    let emp = empirical_reconstruction_error(&w, &theta2, &x2, 10_000, &mut rng)?;
    let bound = expected_reconstruction_bound(&w, &theta2, &x2)?;
    println!("random guesses: mean error {:.4} >= bound {bound:.4}", emp.mean_error);

    let layers = vec![
        WeightMatrix::from_rows(&[vec![1.0, 0.4, 0.0], vec![0.2, 0.9, 0.3], vec![-0.5, 0.1, 1.1]])?,
        WeightMatrix::from_rows(&[vec![0.7, -0.2, 0.5], vec![0.3, 1.2, 0.0], vec![0.0, 0.6, 0.8]])?,
    ];
    let stack = Stack { weights: &layers, nonlinearity: Nonlinearity::Identity, activate_output: false };
    let scores = ScoreMask::new(vec![vec![0.3; 9], vec![-0.2; 9]])?;
    let keep = BinaryMask::ones(&[9, 9]);
    let input = [0.5, -1.0, 0.25];
    let (_, cache) = masked_forward(&stack, &keep, &input)?;
    let out_grad = [0.2, -0.1, 0.4];
    let (grads, _) = ste_backward(&cache, &stack, &scores, &out_grad)?;
    let observed: Vec<CascadeLayer> = (0..2)
        .map(|i| CascadeLayer {
            weights: layers[i].clone(),
            mask: keep.layers[i].clone(),
            scores: scores.layers[i].clone(),
            score_grad: grads[i].clone(),
        })
        .collect();
    println!("input recovered from score gradients: {:?}", score_gradient_cascade(&observed, &out_grad)?);
    Ok(())
}
