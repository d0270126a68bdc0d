//! Which coordinates a client keeps local, and how aggregation skips them.

use pmsfl::mask::{BinaryMask, ProbMask};
use pmsfl::personalization::{
    compute_delta, grow_indicator, growth_increment, hetero_aggregate, merge_personalized, personalization_cap,
    PersonalizationIndicator,
};

fn main() -> pmsfl::Result<()> {
    let broadcast = ProbMask::new(vec![vec![0.45, 0.60, 0.52, 0.30, 0.80, 0.50]])?;
    let trained = ProbMask::new(vec![vec![0.70, 0.40, 0.55, 0.10, 0.85, 0.50]])?;
    let report = compute_delta(&broadcast, &trained)?;
    println!("|delta| {:?}", report.abs_delta);
    println!("crossed 0.5: {:?}, stayed: {:?}", report.disagree, report.agree);

    let cap = personalization_cap(0.5, 6);
    let step = growth_increment(cap, 3);
    let mut indicator = PersonalizationIndicator::empty(&[6]);
    for round in 0..3 {
        indicator = grow_indicator(&indicator, &report, step, cap)?;
        println!("after growth {round}: {:?}", indicator.layers[0]);
    }

    let next = merge_personalized(&broadcast, &trained, &indicator)?;
    println!("next round starts from {:?}", next.layer(0));

    let masks = [
        BinaryMask { layers: vec![vec![true, false, true, false, true, true]] },
        BinaryMask { layers: vec![vec![false, false, true, true, true, false]] },
    ];
    let other = PersonalizationIndicator::empty(&[6]);
    let global = hetero_aggregate(&masks, &[indicator, other], &broadcast)?;
    println!("aggregate {:?}", global.layer(0));
    Ok(())
}
