//! A few protocol rounds by hand: who participated, what crossed the wire,
//! and how the global keep probabilities moved.

use pmsfl::data::{dirichlet_partition, split_train_test, synthetic_dataset, DatasetSpec};
use pmsfl::net::{Network, Nonlinearity};
use pmsfl::protocol::{layer_means, run_round, ClientState, PersonalizationConfig, ProtocolConfig, ServerState};
use pmsfl::rng::{seeded, stream, Stream};

fn main() -> pmsfl::Result<()> {
    let seed = 7;
    let data = synthetic_dataset(&DatasetSpec { seed, ..DatasetSpec::default() })?;
    let network = Network::kaiming(&[16, 32, 32, 16, 10], Nonlinearity::Relu, &mut seeded(seed))?;
    let mut server = ServerState::new(network, 0.5)?;
    let mut rng = stream(seed, Stream::Partition, 0, 0);
    let parts = dirichlet_partition(&data.labels, 8, 0.3, &mut rng)?;
    let mut clients = parts
        .iter()
        .enumerate()
        .map(|(k, idx)| {
            let cd = split_train_test(idx, 0.2, &mut rng);
            ClientState::new(k, 2, cd.train, cd.test, &server.network, &server.theta)
        })
        .collect::<pmsfl::Result<Vec<_>>>()?;
    let cfg = ProtocolConfig {
        lr: 0.05,
        optimizer: pmsfl::mask::OptimizerKind::adam(),
        participation: 0.5,
        local_epochs: 2,
        total_rounds: 3,
        personalization: PersonalizationConfig::disabled(),
        ..ProtocolConfig::default()
    };

    for _ in 0..cfg.total_rounds {
        let log = run_round(&mut server, &mut clients, &data, &cfg, seed)?;
        println!("round {} participants {:?}", log.round, log.participants);
        for c in &log.clients {
            println!(
                "  client {:>2}: {:>3} iterations, loss {:.3}, up {:>6} B (mask {} B), down {:>6} B",
                c.client, c.iterations, c.train_loss, c.uplink_bytes, c.model_uplink_bytes, c.downlink_bytes
            );
        }
        let means: Vec<String> = layer_means(&server.theta).iter().map(|m| format!("{m:.3}")).collect();
        println!("  mean keep probability per layer: {}", means.join(" "));
    }
    Ok(())
}
