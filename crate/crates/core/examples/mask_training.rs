//! Train keep probabilities over a frozen random network on one client that
//! holds the whole model, then compare the evaluation modes.

use pmsfl::data::{synthetic_dataset, DatasetSpec};
use pmsfl::mask::OptimizerKind;
use pmsfl::net::{Network, Nonlinearity};
use pmsfl::protocol::{client_accuracy, client_local_iteration, ClientState, EvalMask, LocalSession, ProtocolConfig, ServerState};
use pmsfl::rng::seeded;

fn main() -> pmsfl::Result<()> {
    let data = synthetic_dataset(&DatasetSpec {
        noise: 0.2,
        seed: 1,
        ..DatasetSpec::default()
    })?;
    let network = Network::kaiming(&[16, 32, 32, 16, 10], Nonlinearity::Relu, &mut seeded(1))?;
    let mut server = ServerState::new(network, 0.5)?;
    let cfg = ProtocolConfig {
        lr: 0.05,
        optimizer: OptimizerKind::adam(),
        ..ProtocolConfig::default()
    };
    let all: Vec<usize> = (0..data.len()).collect();
    let mut client = ClientState::new(0, 4, all.clone(), all, &server.network, &server.theta)?;
    let mut session = LocalSession::new(&client, &server.theta, &cfg)?;
    let (mut rng, mut server_rng) = (seeded(2), seeded(3));

    for step in 0..=1500 {
        let batch: Vec<usize> = (0..32).map(|i| (step * 32 + i * 7) % data.len()).collect();
        let rec = client_local_iteration(&mut session, &mut server, None, &data, &batch, &cfg, &mut rng, &mut server_rng)?;
        if step % 300 == 0 {
            println!("step {step:>5}  batch loss {:.3}", rec.loss_sum / batch.len() as f64);
        }
    }

    // a client at full depth evaluates entirely with its own probabilities
    server.theta = session.probs();
    client.local_theta = server.theta.clone();
    for eval_mask in [EvalMask::Expected, EvalMask::Threshold, EvalMask::Sampled] {
        let cfg = ProtocolConfig { eval_mask, ..cfg.clone() };
        let acc = client_accuracy(&server, &client, &data, &cfg, 0)?.unwrap_or(0.0);
        println!("{eval_mask:?} mask accuracy {acc:.3}");
    }
    Ok(())
}
