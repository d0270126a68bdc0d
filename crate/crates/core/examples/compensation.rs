//! Heterogeneous split depths: which layers each client holds, and the
//! blend of client and server updates for partially held layers.

use std::collections::BTreeMap;

use pmsfl::compensation::{assign_splits, compensate, layer_participants, LayerUpdatePair, TierTable};
use pmsfl::harness::{run_experiment, RunConfig};

fn main() -> pmsfl::Result<()> {
    let tiers = TierTable::even(4, 4)?;
    let capacities: BTreeMap<usize, usize> = (0..8).map(|c| (c, c % 4)).collect();
    let splits = assign_splits(&capacities, &tiers)?;
    let participants = [0, 1, 2, 3, 5, 6];
    for l in 1..=4 {
        println!("layer {l}: held by {:?}", layer_participants(&participants, &splits, l));
    }
    let blended = compensate(&LayerUpdatePair {
        layer: 3,
        server: vec![0.8, 0.2],
        client: vec![0.4, 0.6],
        layer_participants: 2,
        participants: 6,
    })?;
    println!("layer 3 blend: {blended:?}");

    let mut cfg = RunConfig::from_json(include_str!("../configs/compensation.json"))?;
    cfg.rounds = 40;
    for compensation in [true, false] {
        let out = run_experiment(&RunConfig { compensation, ..cfg.clone() })?;
        println!("compensation {compensation:<5}: final mean accuracy {:.3}", out.summary.final_accuracy);
    }
    Ok(())
}
