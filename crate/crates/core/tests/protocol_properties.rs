use pmsfl::data::{synthetic_dataset, Dataset, DatasetSpec};
use pmsfl::harness::{Mode, RunConfig};
use pmsfl::mask::ProbMask;
use pmsfl::net::{Network, Nonlinearity};
use pmsfl::personalization::personalization_cap;
use pmsfl::protocol::{run_round, ClientState, MaskUplink, PersonalizationConfig, ProtocolConfig, ServerState};
use pmsfl::rng::seeded;
use pmsfl::wire::{binary_mask_len, float_mask_len};
use proptest::prelude::*;

fn data() -> Dataset {
    synthetic_dataset(&DatasetSpec {
        classes: 3,
        dim: 4,
        samples: 16,
        noise: 0.3,
        seed: 9,
        ..DatasetSpec::default()
    })
    .unwrap()
}

fn setup(depths: &[usize], seed: u64) -> (ServerState, Vec<ClientState>) {
    let net = Network::kaiming(&[4, 6, 5, 3], Nonlinearity::Relu, &mut seeded(seed)).unwrap();
    let server = ServerState::new(net, 0.5).unwrap();
    let n = depths.len();
    let d = data();
    let clients = depths
        .iter()
        .enumerate()
        .map(|(k, &depth)| {
            let idx: Vec<usize> = (0..d.len()).filter(|i| i % n == k).collect();
            let (train, test) = idx.split_at(idx.len() - 2);
            ClientState::new(k, depth, train.to_vec(), test.to_vec(), &server.network, &server.theta).unwrap()
        })
        .collect();
    (server, clients)
}

fn theta_bits(t: &ProbMask) -> Vec<u64> {
    t.flat().map(f64::to_bits).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rounds_keep_protocol_invariants(
        depths in prop::collection::vec(1usize..=3, 1..6),
        participation in 0.05f64..=1.0,
        ratio_cap in prop::sample::select(vec![0.0, 0.3, 1.0]),
        compensation in any::<bool>(),
        seed in 0u64..1000,
    ) {
        let (mut server, mut clients) = setup(&depths, seed);
        let cfg = ProtocolConfig {
            lr: 0.5,
            participation,
            local_epochs: 1,
            batch_size: 4,
            total_rounds: 4,
            personalization: PersonalizationConfig { ratio_cap, warmup_fraction: 0.0 },
            compensation,
            top_model: if compensation { pmsfl::protocol::TopModel::Masked } else { pmsfl::protocol::TopModel::Weights },
            ..ProtocolConfig::default()
        };
        let n = depths.len();
        let k = ((participation * n as f64).floor() as usize).max(1);
        let d = data();
        for _ in 0..4 {
            let log = run_round(&mut server, &mut clients, &d, &cfg, seed).unwrap();
            prop_assert_eq!(log.participants.len(), k);
            prop_assert!(log.participants.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(log.layer_participants.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(server.theta.flat().all(|v| (0.0..=1.0).contains(&v)));
            for c in &log.clients {
                let shape = clients[c.client].local_theta.shape();
                let mut expected = binary_mask_len(&shape);
                if ratio_cap > 0.0 {
                    expected += binary_mask_len(&shape);
                }
                prop_assert_eq!(c.model_uplink_bytes, expected);
                prop_assert!(c.downlink_bytes >= float_mask_len(&shape));
            }
        }
        for c in &clients {
            let cap = personalization_cap(ratio_cap, c.indicator.total_len());
            prop_assert!(c.indicator.count() <= cap);
            // personalized coordinates start the next round from the local copy
            let start = c.round_start_theta(&server.theta, &cfg).unwrap();
            for ((s, l), i) in start.flat().zip(c.local_theta.flat()).zip(c.indicator.flat()) {
                if i {
                    prop_assert_eq!(s, l);
                }
            }
        }
    }
}

#[test]
fn splitfed_pm_matches_pm_sfl_when_uplink_agrees() {
    let pm = RunConfig {
        mode: Mode::PmSfl,
        personalization: PersonalizationConfig::disabled(),
        ..RunConfig::default()
    };
    let sf = RunConfig {
        mode: Mode::SplitfedPm,
        ..pm.clone()
    };
    let d = data();
    for uplink in [MaskUplink::Binary, MaskUplink::Float] {
        let mut a_cfg = pm.protocol_config();
        let mut b_cfg = sf.protocol_config();
        a_cfg.mask_uplink = uplink;
        b_cfg.mask_uplink = uplink;
        a_cfg.local_epochs = 1;
        b_cfg.local_epochs = 1;
        let (mut sa, mut ca) = setup(&[2, 2, 2, 2], 3);
        let (mut sb, mut cb) = setup(&[2, 2, 2, 2], 3);
        for _ in 0..5 {
            run_round(&mut sa, &mut ca, &d, &a_cfg, 7).unwrap();
            run_round(&mut sb, &mut cb, &d, &b_cfg, 7).unwrap();
            assert_eq!(theta_bits(&sa.theta), theta_bits(&sb.theta));
        }
    }
}

#[test]
fn float_uplink_averages_probabilities() {
    let (mut server, mut clients) = setup(&[3, 3], 1);
    let cfg = ProtocolConfig {
        participation: 1.0,
        local_epochs: 1,
        batch_size: 4,
        mask_uplink: MaskUplink::Float,
        personalization: PersonalizationConfig::disabled(),
        ..ProtocolConfig::default()
    };
    run_round(&mut server, &mut clients, &data(), &cfg, 2).unwrap();
    let mean: Vec<f64> = clients[0]
        .local_theta
        .flat()
        .zip(clients[1].local_theta.flat())
        .map(|(a, b)| (a + b) / 2.0)
        .collect();
    for (g, m) in server.theta.flat().zip(mean) {
        assert!((g - m).abs() < 1e-15);
    }
}
