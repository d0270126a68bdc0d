//! Experiment orchestration: run configuration, the round loop, metrics and
//! summary files, the attack study, and the calculator and partition reports
//! behind the command-line tool.
//!
//! `metrics.csv` has one row per participant per round (`phase = train`) and
//! one row per client at every evaluation point (`phase = eval`). Columns, in
//! order: `round, phase, client_id, split_depth, train_loss, test_accuracy,
//! uplink_bytes, downlink_bytes, model_uplink_bytes`. Empty cells mean "not
//! measured in this phase". Evaluation rows carry the number of completed
//! rounds; round 0 is the untrained model.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{dlg_attack, l2_distance, psnr, DlgConfig, MaskKnowledge};
use crate::compensation::{assign_splits, TierTable};
use crate::data::{
    dirichlet_partition, personalized_partition, split_train_test, synthetic_dataset, ClientData,
    Dataset, DatasetKind, DatasetSpec,
};
use crate::error::{Error, Result};
use crate::mask::{masked_forward, sample_mask, OptimizerKind, ProbMask};
use crate::net::{forward_stack, Network, Nonlinearity, Stack};
use crate::privacy::{
    bernoulli_amplified_epsilon, epsilon_amp_forward, forward_sensitivity, laplace_noise,
    sigma_for_mask_noise, sigma_for_update_noise, AmplificationForm, Mechanism, PrivacySpec,
    DEFAULT_ALPHA_GRID, DEFAULT_DELTA,
};
use crate::protocol::{
    baseline_accuracy, client_accuracy, mean_accuracy, run_round, splitfed_weight_round, ClientState,
    EvalMask, MaskUplink, PersonalizationConfig, ProtocolConfig, RoundLog, ServerState, TopModel,
    WeightBaseline,
};
use crate::rng::{stream, Stream};
use crate::wire::encode_binary_mask;

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Mask training with binary uplink and personalization.
    #[default]
    PmSfl,
    /// Weight training with FedAvg of the bottom model.
    Splitfed,
    /// `Splitfed` with Laplace noise on the smashed data.
    SplitfedDp,
    /// Mask training without personalization, uploading probabilities.
    SplitfedPm,
}

impl Mode {
    pub fn trains_masks(self) -> bool {
        matches!(self, Mode::PmSfl | Mode::SplitfedPm)
    }
}

/// Split depth per capacity tier and the share of clients in each tier.
/// Clients are assigned to tiers in id order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub depths: Vec<usize>,
    pub ratios: Vec<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            depths: vec![2],
            ratios: vec![1],
        }
    }
}

impl SplitConfig {
    pub fn uniform(depth: usize) -> Self {
        Self {
            depths: vec![depth],
            ratios: vec![1],
        }
    }

    /// Tier of each client.
    pub fn tiers(&self, clients: usize) -> Result<Vec<usize>> {
        if self.depths.is_empty() || self.depths.len() != self.ratios.len() {
            return Err(Error::InvalidConfig("split depths and ratios must be non-empty and equally long".into()));
        }
        let total: usize = self.ratios.iter().sum();
        if total == 0 {
            return Err(Error::InvalidConfig("split ratios sum to zero".into()));
        }
        let bounds: Vec<usize> = self
            .ratios
            .iter()
            .scan(0, |acc, &r| {
                *acc += r;
                Some(*acc)
            })
            .collect();
        Ok((0..clients)
            .map(|k| {
                let p = k * total / clients.max(1);
                bounds.iter().position(|&b| p < b).unwrap_or(bounds.len() - 1)
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PartitionConfig {
    Dirichlet { alpha: f64, test_fraction: f64 },
    Personalized { classes_per_client: usize },
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig::Dirichlet {
            alpha: 0.3,
            test_fraction: 1.0 / 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub clients: usize,
    pub participation: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Shared by clients and server, for scores and weights alike.
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Layer widths from input to classes.
    pub widths: Vec<usize>,
    pub splits: SplitConfig,
    pub personalization: PersonalizationConfig,
    pub privacy: PrivacySpec,
    pub mode: Mode,
    pub dataset: DatasetSpec,
    pub partition: PartitionConfig,
    pub eval_interval: usize,
    pub compensation: bool,
    pub top_model: TopModel,
    pub eval_mask: EvalMask,
    pub score_clip: f64,
    pub initial_theta: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            clients: 20,
            participation: 0.5,
            rounds: 200,
            local_epochs: 5,
            batch_size: 32,
            lr: 0.05,
            optimizer: OptimizerKind::adam(),
            widths: vec![16, 32, 32, 16, 10],
            splits: SplitConfig::default(),
            personalization: PersonalizationConfig::default(),
            privacy: PrivacySpec::default(),
            mode: Mode::PmSfl,
            dataset: DatasetSpec::default(),
            partition: PartitionConfig::default(),
            eval_interval: 10,
            compensation: false,
            top_model: TopModel::Weights,
            eval_mask: EvalMask::Expected,
            score_clip: 0.01,
            initial_theta: 0.5,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.clients == 0 {
            return bad("need at least one client".into());
        }
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return bad(format!("widths {:?} must name at least one non-empty layer", self.widths));
        }
        if self.widths[0] != self.dataset.dim {
            return bad(format!("input width {} but dataset dim {}", self.widths[0], self.dataset.dim));
        }
        if *self.widths.last().expect("two widths") != self.dataset.classes {
            return bad(format!(
                "output width {} but {} classes",
                self.widths.last().expect("two widths"),
                self.dataset.classes
            ));
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be at least 1".into());
        }
        if !(self.initial_theta > 0.0 && self.initial_theta < 1.0) {
            return bad(format!("initial_theta {} outside (0, 1)", self.initial_theta));
        }
        let layers = self.widths.len() - 1;
        TierTable::new(self.splits.depths.clone(), layers)?;
        self.splits.tiers(self.clients)?;
        match self.partition {
            PartitionConfig::Dirichlet { alpha, test_fraction } => {
                if !(alpha > 0.0) || !(0.0..1.0).contains(&test_fraction) {
                    return bad("dirichlet partition needs alpha > 0 and test_fraction in [0, 1)".into());
                }
            }
            PartitionConfig::Personalized { classes_per_client } => {
                if classes_per_client == 0 {
                    return bad("classes_per_client must be positive".into());
                }
            }
        }
        self.protocol_config().validate()
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Protocol settings implied by the mode.
    pub fn protocol_config(&self) -> ProtocolConfig {
        let mut privacy = self.privacy.clone();
        let mut personalization = self.personalization;
        let mut mask_uplink = MaskUplink::Binary;
        let mut compensation = self.compensation;
        match self.mode {
            Mode::PmSfl => {}
            Mode::SplitfedPm => {
                personalization = PersonalizationConfig::disabled();
                mask_uplink = MaskUplink::Float;
                compensation = false;
            }
            Mode::Splitfed => {
                personalization = PersonalizationConfig::disabled();
                privacy.mechanism = Mechanism::None;
                compensation = false;
            }
            Mode::SplitfedDp => {
                personalization = PersonalizationConfig::disabled();
                privacy.mechanism = Mechanism::LaplaceForward;
                compensation = false;
            }
        }
        let top_model = if compensation { TopModel::Masked } else { self.top_model };
        ProtocolConfig {
            lr: self.lr,
            server_lr: None,
            optimizer: self.optimizer,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            participation: self.participation,
            total_rounds: self.rounds,
            mask_uplink,
            top_model,
            compensation,
            personalization,
            privacy,
            score_clip: self.score_clip,
            eval_mask: self.eval_mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub phase: String,
    pub client_id: usize,
    pub split_depth: usize,
    pub train_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub uplink_bytes: usize,
    pub downlink_bytes: usize,
    pub model_uplink_bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ByteTotals {
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    pub model_uplink_bytes: u64,
}

impl ByteTotals {
    pub fn of_rows(rows: &[MetricsRow]) -> Self {
        rows.iter().fold(Self::default(), |t, r| Self {
            uplink_bytes: t.uplink_bytes + r.uplink_bytes as u64,
            downlink_bytes: t.downlink_bytes + r.downlink_bytes as u64,
            model_uplink_bytes: t.model_uplink_bytes + r.model_uplink_bytes as u64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPoint {
    pub round: usize,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub mode: Mode,
    pub seed: u64,
    pub rounds: usize,
    pub clients: usize,
    pub participants_per_round: usize,
    pub split_depths: Vec<usize>,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub accuracy: Vec<AccuracyPoint>,
    pub totals: ByteTotals,
    /// `|K^l|` per round, layers `1..=L`.
    pub layer_participants: Vec<Vec<usize>>,
    /// Personalized coordinates per client at the end of the run.
    pub personalized_coordinates: Vec<usize>,
    /// How the server steps its top model within a round.
    pub server_update_order: String,
    pub top_model: TopModel,
    /// With compensation the same top model instance serves training and
    /// supplies the server-side mask updates.
    pub compensation: bool,
}

/// Recorded in every summary.
pub const SERVER_UPDATE_ORDER: &str = "one step per client batch, iteration-major, clients in id order";

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub summary: Summary,
    pub rounds: Vec<RoundLog>,
}

impl RunOutput {
    /// Global keep probabilities after each round (mask-training modes).
    pub fn theta_history(&self) -> Vec<&ProbMask> {
        self.rounds.iter().filter_map(|r| r.theta.as_ref()).collect()
    }

    pub fn metrics_csv(&self) -> Result<Vec<u8>> {
        metrics_csv(&self.rows)
    }

    /// Writes `metrics.csv`, `summary.json` and, when asked, one bit-packed
    /// file per uploaded mask under `masks/`.
    pub fn write(&self, dir: &Path, dump_masks: bool) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), self.metrics_csv()?)?;
        fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(&self.summary)?)?;
        if dump_masks {
            let masks = dir.join("masks");
            fs::create_dir_all(&masks)?;
            for log in &self.rounds {
                for c in &log.clients {
                    if let Some(m) = &c.uplink_mask {
                        let name = format!("round{:05}_client{:04}.bin", log.round, c.client);
                        fs::write(masks.join(name), encode_binary_mask(m)?)?;
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record([
        "round",
        "phase",
        "client_id",
        "split_depth",
        "train_loss",
        "test_accuracy",
        "uplink_bytes",
        "downlink_bytes",
        "model_uplink_bytes",
    ])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Dataset, frozen network and client states for a run.
pub struct Setup {
    pub data: Dataset,
    pub network: Network,
    pub clients: Vec<ClientData>,
    pub depths: Vec<usize>,
}

pub fn prepare(cfg: &RunConfig) -> Result<Setup> {
    cfg.validate()?;
    let data = synthetic_dataset(&cfg.dataset)?;
    let network = Network::kaiming(&cfg.widths, Nonlinearity::Relu, &mut stream(cfg.seed, Stream::Init, 0, 0))?;
    let mut rng = stream(cfg.seed, Stream::Partition, 0, 0);
    let clients = match cfg.partition {
        PartitionConfig::Dirichlet { alpha, test_fraction } => dirichlet_partition(&data.labels, cfg.clients, alpha, &mut rng)?
            .iter()
            .map(|idx| split_train_test(idx, test_fraction, &mut rng))
            .collect(),
        PartitionConfig::Personalized { classes_per_client } => {
            personalized_partition(&data.labels, cfg.clients, classes_per_client, &mut rng)?
        }
    };
    let tiers: BTreeMap<usize, usize> = cfg.splits.tiers(cfg.clients)?.into_iter().enumerate().collect();
    let table = TierTable::new(cfg.splits.depths.clone(), cfg.layers())?;
    let assignment = assign_splits(&tiers, &table)?;
    let depths = (0..cfg.clients)
        .map(|k| assignment.depth(k).expect("every client assigned"))
        .collect();
    Ok(Setup {
        data,
        network,
        clients,
        depths,
    })
}

/// Runs `cfg.rounds` rounds in the configured mode.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutput> {
    let setup = prepare(cfg)?;
    let proto = cfg.protocol_config();
    let mut server = ServerState::new(setup.network.clone(), cfg.initial_theta)?;
    let mut clients: Vec<ClientState> = setup
        .clients
        .iter()
        .enumerate()
        .map(|(k, cd)| ClientState::new(k, setup.depths[k], cd.train.clone(), cd.test.clone(), &server.network, &server.theta))
        .collect::<Result<_>>()?;
    let mut baseline = WeightBaseline::new(&server.network);
    let data = &setup.data;

    let evaluate = |server: &ServerState, baseline: &WeightBaseline, clients: &[ClientState]| -> Result<Vec<Option<f64>>> {
        clients
            .iter()
            .map(|c| {
                if cfg.mode.trains_masks() {
                    client_accuracy(server, c, data, &proto, cfg.seed)
                } else {
                    baseline_accuracy(server, baseline, c, data)
                }
            })
            .collect()
    };
    let eval_rows = |round: usize, acc: &[Option<f64>], clients: &[ClientState]| -> Vec<MetricsRow> {
        clients.iter().zip(acc).map(|(c, a)| MetricsRow {
            round,
            phase: "eval".into(),
            client_id: c.id,
            split_depth: c.split_depth,
            train_loss: None,
            test_accuracy: *a,
            uplink_bytes: 0,
            downlink_bytes: 0,
            model_uplink_bytes: 0,
        })
        .collect()
    };

    let mut rows = Vec::new();
    let mut accuracy = Vec::new();
    let mut logs = Vec::with_capacity(cfg.rounds);
    let acc = evaluate(&server, &baseline, &clients)?;
    rows.extend(eval_rows(0, &acc, &clients));
    accuracy.push(AccuracyPoint {
        round: 0,
        mean_accuracy: mean_accuracy(&acc),
    });
    for t in 0..cfg.rounds {
        let log = if cfg.mode.trains_masks() {
            run_round(&mut server, &mut clients, data, &proto, cfg.seed)?
        } else {
            splitfed_weight_round(&mut server, &mut baseline, &clients, data, &proto, cfg.seed)?
        };
        rows.extend(log.clients.iter().map(|c| MetricsRow {
            round: t,
            phase: "train".into(),
            client_id: c.client,
            split_depth: c.split_depth,
            train_loss: Some(c.train_loss),
            test_accuracy: None,
            uplink_bytes: c.uplink_bytes,
            downlink_bytes: c.downlink_bytes,
            model_uplink_bytes: c.model_uplink_bytes,
        }));
        logs.push(log);
        let done = t + 1;
        if done % cfg.eval_interval == 0 || done == cfg.rounds {
            let acc = evaluate(&server, &baseline, &clients)?;
            rows.extend(eval_rows(done, &acc, &clients));
            accuracy.push(AccuracyPoint {
                round: done,
                mean_accuracy: mean_accuracy(&acc),
            });
        }
    }

    let summary = Summary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        mode: cfg.mode,
        seed: cfg.seed,
        rounds: cfg.rounds,
        clients: cfg.clients,
        participants_per_round: proto.participants_per_round(cfg.clients),
        split_depths: setup.depths.clone(),
        initial_accuracy: accuracy[0].mean_accuracy,
        final_accuracy: accuracy.last().expect("initial point").mean_accuracy,
        accuracy,
        totals: ByteTotals::of_rows(&rows),
        layer_participants: logs.iter().map(|l| l.layer_participants.clone()).collect(),
        personalized_coordinates: clients.iter().map(|c| c.indicator.count()).collect(),
        server_update_order: SERVER_UPDATE_ORDER.into(),
        top_model: proto.top_model,
        compensation: proto.compensation,
    };
    Ok(RunOutput {
        rows,
        summary,
        rounds: logs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Defense {
    /// Attacker knows the exact weights the client used.
    Splitfed,
    /// Smashed data computed under a fresh mask; attacker knows `theta`.
    PmSfl,
    /// Laplace noise on the smashed data; attacker knows the weights.
    SplitfedDp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub seed: u64,
    pub seeds: usize,
    pub trials: usize,
    /// Victim bottom model widths, input first.
    pub widths: Vec<usize>,
    pub theta: f64,
    pub defenses: Vec<Defense>,
    pub dlg: DlgConfig,
    /// Privacy budget of the Laplace defense.
    pub epsilon: f64,
    pub input_bound: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: 3,
            trials: 100,
            widths: vec![8, 16],
            theta: 0.5,
            defenses: vec![Defense::Splitfed, Defense::PmSfl],
            dlg: DlgConfig::default(),
            epsilon: 0.1,
            input_bound: 1.0,
        }
    }
}

impl AttackConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 || self.trials == 0 || self.defenses.is_empty() {
            return Err(Error::InvalidConfig("need at least one seed, trial and defense".into()));
        }
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::InvalidConfig(format!("victim widths {:?}", self.widths)));
        }
        if !(0.0..=1.0).contains(&self.theta) || !(self.epsilon > 0.0) || !(self.input_bound > 0.0) {
            return Err(Error::InvalidConfig("theta in [0, 1], epsilon and input_bound positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTrial {
    pub seed: u64,
    pub trial: usize,
    pub defense: Defense,
    pub error: f64,
    pub psnr: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseSummary {
    pub defense: Defense,
    pub seed: u64,
    pub mean_error: f64,
    pub median_error: f64,
    pub mean_psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutput {
    pub trials: Vec<AttackTrial>,
    pub summary: Vec<DefenseSummary>,
}

impl AttackOutput {
    pub fn mean_error(&self, defense: Defense, seed: u64) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.defense == defense && s.seed == seed)
            .map(|s| s.mean_error)
    }

    pub fn trials_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for t in &self.trials {
            w.serialize(t)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("attack_trials.csv"), self.trials_csv()?)?;
        fs::write(dir.join("attack_summary.json"), serde_json::to_vec_pretty(&self.summary)?)?;
        Ok(())
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// DLG against one bottom model per seed. Every defense sees the same
/// inputs and starting guesses, so per-seed means are paired.
pub fn run_attack(cfg: &AttackConfig) -> Result<AttackOutput> {
    cfg.validate()?;
    let mut trials = Vec::new();
    let mut summary = Vec::new();
    for s in 0..cfg.seeds as u64 {
        let seed = cfg.seed + s;
        let network = Network::kaiming(&cfg.widths, Nonlinearity::Relu, &mut stream(seed, Stream::Init, 0, 0))?;
        let victim = Stack {
            weights: &network.layers,
            nonlinearity: network.nonlinearity,
            activate_output: false,
        };
        let theta = ProbMask::uniform(&network.layer_sizes(), cfg.theta)?;
        let input = cfg.widths[0];
        let sensitivity = forward_sensitivity(&network.layers, cfg.input_bound);
        for &defense in &cfg.defenses {
            let mut errors = Vec::with_capacity(cfg.trials);
            let mut psnrs = Vec::with_capacity(cfg.trials);
            for trial in 0..cfg.trials {
                let mut rng = stream(seed, Stream::Attack, trial as u64, 0);
                let x: Vec<f64> = uniform_vec(input, cfg.input_bound, &mut rng);
                let init: Vec<f64> = uniform_vec(input, cfg.dlg.init_range, &mut rng);
                // defense randomness comes from its own stream
                let mut drng = stream(seed, Stream::Attack, trial as u64, 1 + defense as u64);
                let (observed, knowledge) = match defense {
                    Defense::Splitfed => (forward_stack(&network.layers, network.nonlinearity, false, &x)?.0, MaskKnowledge::None),
                    Defense::PmSfl => {
                        let m = sample_mask(&theta, &mut drng);
                        let (act, _) = masked_forward(&victim, &m, &x)?;
                        (act.values, MaskKnowledge::Probabilistic(theta.clone()))
                    }
                    Defense::SplitfedDp => {
                        let mut y = forward_stack(&network.layers, network.nonlinearity, false, &x)?.0;
                        let z = laplace_noise(sensitivity / cfg.epsilon, y.len(), &mut drng)?;
                        y.iter_mut().zip(z).for_each(|(v, z)| *v += z);
                        (y, MaskKnowledge::None)
                    }
                };
                let report = dlg_attack(&observed, &victim, &knowledge, &cfg.dlg, Some(&init), &mut drng)?;
                let error = l2_distance(&report.reconstruction, &x);
                let p = psnr(&report.reconstruction, &x, 2.0 * cfg.input_bound);
                errors.push(error);
                psnrs.push(p);
                trials.push(AttackTrial {
                    seed,
                    trial,
                    defense,
                    error,
                    psnr: p,
                    objective: report.objective,
                    iterations: report.iterations,
                    converged: report.converged,
                });
            }
            let n = errors.len() as f64;
            summary.push(DefenseSummary {
                defense,
                seed,
                mean_error: errors.iter().sum::<f64>() / n,
                median_error: median(&mut errors),
                mean_psnr: psnrs.iter().sum::<f64>() / n,
            });
        }
    }
    Ok(AttackOutput { trials, summary })
}

fn uniform_vec(n: usize, bound: f64, rng: &mut impl rand::Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// Inputs of the `dp-calc` report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpCalcArgs {
    pub epsilon: f64,
    pub delta: f64,
    pub c: f64,
    /// Depth of the bottom model.
    pub d: u32,
    pub iterations: u32,
    pub clip: f64,
    pub batch: usize,
    /// Masked parameters for Bernoulli amplification.
    pub mask_params: usize,
    pub form: AmplificationForm,
}

impl Default for DpCalcArgs {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            delta: DEFAULT_DELTA,
            c: 0.25,
            d: 2,
            iterations: 1,
            clip: 1.0,
            batch: 32,
            mask_params: 1,
            form: AmplificationForm::Symmetric,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpReport {
    pub inputs: DpCalcArgs,
    pub epsilon_amp_forward: f64,
    pub sigma_sq_update_noise: f64,
    pub sigma_sq_mask_noise: f64,
    pub bernoulli_amplified_epsilon: f64,
}

impl DpReport {
    pub fn table(&self) -> String {
        let a = &self.inputs;
        [
            format!("epsilon={} delta={} c={} d={}", a.epsilon, a.delta, a.c, a.d),
            format!("forward amplification      eps_amp = {:.12}", self.epsilon_amp_forward),
            format!("update noise threshold     sigma^2 = {:.12}", self.sigma_sq_update_noise),
            format!("mask noise threshold       sigma^2 = {:.12}", self.sigma_sq_mask_noise),
            format!("bernoulli amplification    eps     = {:.12}", self.bernoulli_amplified_epsilon),
        ]
        .join("\n")
    }
}

pub fn dp_calc(args: &DpCalcArgs) -> Result<DpReport> {
    Ok(DpReport {
        epsilon_amp_forward: epsilon_amp_forward(args.epsilon, args.c, args.d)?,
        sigma_sq_update_noise: sigma_for_update_noise(args.iterations, args.clip, args.epsilon, args.delta, args.batch)?,
        sigma_sq_mask_noise: sigma_for_mask_noise(args.c, args.epsilon, args.delta)?,
        bernoulli_amplified_epsilon: bernoulli_amplified_epsilon(args.epsilon, args.c, args.mask_params, &DEFAULT_ALPHA_GRID, args.form)?,
        inputs: args.clone(),
    })
}

/// Class histogram of every client under a Dirichlet split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub alpha: f64,
    pub clients: usize,
    pub classes: usize,
    /// `histograms[k][c]`: samples of class `c` held by client `k`.
    pub histograms: Vec<Vec<usize>>,
}

pub fn partition_report(alpha: f64, clients: usize, dataset: &DatasetSpec, seed: u64) -> Result<PartitionReport> {
    let data = synthetic_dataset(dataset)?;
    let parts = dirichlet_partition(&data.labels, clients, alpha, &mut stream(seed, Stream::Partition, 0, 0))?;
    let histograms = parts
        .iter()
        .map(|idx| {
            let mut h = vec![0; data.classes];
            idx.iter().for_each(|&i| h[data.labels[i]] += 1);
            h
        })
        .collect();
    Ok(PartitionReport {
        alpha,
        clients,
        classes: data.classes,
        histograms,
    })
}

/// Small gaussian-blob configuration used by examples and tests.
pub fn desk_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        dataset: DatasetSpec {
            kind: DatasetKind::GaussianBlobs,
            seed,
            ..DatasetSpec::default()
        },
        ..RunConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: Mode) -> RunConfig {
        RunConfig {
            clients: 4,
            participation: 0.5,
            rounds: 3,
            local_epochs: 1,
            batch_size: 8,
            widths: vec![4, 6, 6, 3],
            mode,
            dataset: DatasetSpec {
                classes: 3,
                dim: 4,
                samples: 12,
                ..DatasetSpec::default()
            },
            eval_interval: 2,
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_rounds_gives_header_and_initial_accuracy() {
        let out = run_experiment(&RunConfig { rounds: 0, ..tiny(Mode::PmSfl) }).unwrap();
        assert!(out.rows.iter().all(|r| r.phase == "eval" && r.round == 0));
        assert_eq!(out.summary.accuracy.len(), 1);
        assert_eq!(out.summary.initial_accuracy, out.summary.final_accuracy);
        let csv = String::from_utf8(metrics_csv(&[]).unwrap()).unwrap();
        assert_eq!(csv.lines().count(), 1);
        assert!(csv.starts_with("round,phase,client_id"));
    }

    #[test]
    fn totals_equal_column_sums() {
        for mode in [Mode::PmSfl, Mode::Splitfed, Mode::SplitfedDp, Mode::SplitfedPm] {
            let out = run_experiment(&tiny(mode)).unwrap();
            let bytes = out.metrics_csv().unwrap();
            let mut reader = csv::Reader::from_reader(bytes.as_slice());
            let mut up = 0u64;
            for rec in reader.deserialize::<MetricsRow>() {
                up += rec.unwrap().uplink_bytes as u64;
            }
            assert_eq!(up, out.summary.totals.uplink_bytes, "{mode:?}");
            assert_eq!(out.summary.accuracy.last().unwrap().round, 3);
        }
    }

    #[test]
    fn evaluation_cadence() {
        let out = run_experiment(&tiny(Mode::PmSfl)).unwrap();
        let rounds: Vec<usize> = out.summary.accuracy.iter().map(|a| a.round).collect();
        assert_eq!(rounds, vec![0, 2, 3]);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = run_experiment(&tiny(Mode::PmSfl)).unwrap().metrics_csv().unwrap();
        let b = run_experiment(&tiny(Mode::PmSfl)).unwrap().metrics_csv().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_tiers_follow_ratios() {
        let s = SplitConfig {
            depths: vec![1, 2, 3, 4],
            ratios: vec![1, 1, 1, 1],
        };
        assert_eq!(s.tiers(8).unwrap(), vec![0, 0, 1, 1, 2, 2, 3, 3]);
        let s = SplitConfig {
            depths: vec![1, 4],
            ratios: vec![1, 3],
        };
        assert_eq!(s.tiers(4).unwrap(), vec![0, 1, 1, 1]);
        assert!(SplitConfig { depths: vec![1], ratios: vec![] }.tiers(3).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig::from_json(r#"{"participation": 0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"widths": [3, 10]}"#).is_err());
        assert!(RunConfig::from_json(r#"{"personalization": {"warmup_fraction": 1.0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"no_such_field": 1}"#).is_err());
        RunConfig::from_json("{}").unwrap();
    }

    #[test]
    fn splitfed_pm_reduces_to_pm_sfl_without_personalization() {
        let pm = RunConfig {
            personalization: PersonalizationConfig::disabled(),
            ..tiny(Mode::PmSfl)
        };
        let mut float_pm = pm.protocol_config();
        float_pm.mask_uplink = MaskUplink::Float;
        assert_eq!(float_pm, tiny(Mode::SplitfedPm).protocol_config());
    }

    #[test]
    fn dp_calc_reports_all_calculators() {
        let r = dp_calc(&DpCalcArgs::default()).unwrap();
        assert!(r.epsilon_amp_forward < 1.0);
        assert!(r.table().lines().count() == 5);
    }

    #[test]
    fn attack_summary_is_paired() {
        let out = run_attack(&AttackConfig {
            seeds: 1,
            trials: 3,
            dlg: DlgConfig { budget: 50, ..DlgConfig::default() },
            ..AttackConfig::default()
        })
        .unwrap();
        assert_eq!(out.trials.len(), 6);
        assert_eq!(out.summary.len(), 2);
    }
}
