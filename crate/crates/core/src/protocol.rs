//! Client/server round protocol.
//!
//! A round samples `K = max(floor(C N), 1)` participants. Each participant
//! starts from the broadcast keep probabilities, then for every mini-batch
//! samples a mask, sends the smashed batch, lets the server update its top
//! model and return the smashed-data gradient, and updates its scores with
//! the straight-through estimator. At the end of the round every participant
//! uploads a freshly sampled binary mask (or, in the float comparison mode,
//! its probabilities) and the server averages them layer by layer.
//!
//! Clients run sequentially. Within a round the server serves mini-batches
//! in iteration-major, ascending-client-id order, updating its top model once
//! per client batch.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compensation::{
    compensate, layer_participants, server_mask_update_for_layer, LayerUpdatePair, ServerMaskTrace,
    SplitAssignment,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mask::{
    gated_forward, masked_forward, sample_mask, ste_backward, BinaryMask, OptimizerKind, ProbMask,
    ScoreMask, ScoreOptimizer,
};
use crate::net::{argmax, backward_stack, cross_entropy, forward_stack, logistic, Network, Stack, WeightMatrix};
use crate::personalization::{
    compute_delta, grow_indicator, growth_increment, hetero_aggregate_values, merge_personalized,
    personalization_cap, PersonalizationIndicator,
};
use crate::privacy::{
    clip_layers, forward_sensitivity, laplace_noise, noisy_mask_probs, noisy_score_update,
    sigma_for_mask_noise, sigma_for_update_noise, Mechanism, PrivacySpec,
};
use crate::rng::{stream, SimRng, Stream};
use crate::wire::{
    binary_mask_len, float_mask_len, gradient_batch_len, mask_header_len, smashed_batch_len,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskUplink {
    #[default]
    Binary,
    /// Probabilities as f64; the no-sampling comparison mode.
    Float,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopModel {
    /// Server trains unmasked copies of its layers by SGD.
    #[default]
    Weights,
    /// Server trains scores over the frozen weights of its layers.
    Masked,
}

/// How keep probabilities become a deterministic evaluation model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMask {
    /// Gate weights by `theta`.
    #[default]
    Expected,
    /// Keep weights with `theta > 0.5`.
    Threshold,
    /// One fresh mask per test sample.
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PersonalizationConfig {
    /// Largest fraction of a client's coordinates kept local; 0 disables.
    pub ratio_cap: f64,
    pub warmup_fraction: f64,
}

impl Default for PersonalizationConfig {
    fn default() -> Self {
        Self {
            ratio_cap: 0.5,
            warmup_fraction: 0.1,
        }
    }
}

impl PersonalizationConfig {
    pub fn disabled() -> Self {
        Self {
            ratio_cap: 0.0,
            ..Self::default()
        }
    }

    pub fn enabled(&self) -> bool {
        self.ratio_cap > 0.0
    }

    pub fn warmup_rounds(&self, total_rounds: usize) -> usize {
        (self.warmup_fraction * total_rounds as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub lr: f64,
    /// Server step size; defaults to `lr`.
    pub server_lr: Option<f64>,
    pub optimizer: OptimizerKind,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub participation: f64,
    pub total_rounds: usize,
    pub mask_uplink: MaskUplink,
    pub top_model: TopModel,
    /// Blend server-side mask updates into layers shallow clients lack.
    /// Requires the masked top model.
    pub compensation: bool,
    pub personalization: PersonalizationConfig,
    pub privacy: PrivacySpec,
    /// Broadcast probabilities are clamped into `[score_clip, 1 - score_clip]`
    /// before taking the logit.
    pub score_clip: f64,
    pub eval_mask: EvalMask,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            server_lr: None,
            optimizer: OptimizerKind::Sgd,
            local_epochs: 5,
            batch_size: 32,
            participation: 0.1,
            total_rounds: 200,
            mask_uplink: MaskUplink::Binary,
            top_model: TopModel::Weights,
            compensation: false,
            personalization: PersonalizationConfig::default(),
            privacy: PrivacySpec::default(),
            score_clip: 0.01,
            eval_mask: EvalMask::Expected,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.server_lr.is_some_and(|l| !(l > 0.0)) {
            return bad("learning rates must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad(format!("participation {} outside (0, 1]", self.participation));
        }
        if self.compensation && self.top_model != TopModel::Masked {
            return bad("compensation requires the masked top model".into());
        }
        let p = &self.personalization;
        if !(0.0..=1.0).contains(&p.ratio_cap) || !(0.0..1.0).contains(&p.warmup_fraction) {
            return bad("ratio_cap must lie in [0, 1] and warmup_fraction in [0, 1)".into());
        }
        if !(self.score_clip > 0.0 && self.score_clip < 0.5) {
            return bad(format!("score_clip {} outside (0, 0.5)", self.score_clip));
        }
        self.privacy.validate()
    }

    pub fn server_lr(&self) -> f64 {
        self.server_lr.unwrap_or(self.lr)
    }

    pub fn participants_per_round(&self, clients: usize) -> usize {
        ((self.participation * clients as f64).floor() as usize).max(1).min(clients)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub split_depth: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Probabilities retained from the client's last round.
    pub local_theta: ProbMask,
    pub indicator: PersonalizationIndicator,
}

impl ClientState {
    pub fn new(id: usize, split_depth: usize, train: Vec<usize>, test: Vec<usize>, network: &Network, theta: &ProbMask) -> Result<Self> {
        if split_depth == 0 || split_depth > network.depth() {
            return Err(Error::InvalidConfig(format!(
                "client {id}: split depth {split_depth} outside [1, {}]",
                network.depth()
            )));
        }
        let local_theta = theta.truncated(split_depth);
        let indicator = PersonalizationIndicator::empty(&local_theta.shape());
        Ok(Self {
            id,
            split_depth,
            train,
            test,
            local_theta,
            indicator,
        })
    }

    pub fn iterations(&self, cfg: &ProtocolConfig) -> usize {
        cfg.local_epochs * self.train.len().div_ceil(cfg.batch_size)
    }

    /// Starting probabilities for a round: personalized coordinates from
    /// the local copy, the rest from the broadcast.
    pub fn round_start_theta(&self, global: &ProbMask, cfg: &ProtocolConfig) -> Result<ProbMask> {
        let broadcast = global.truncated(self.split_depth);
        if cfg.personalization.enabled() {
            merge_personalized(&broadcast, &self.local_theta, &self.indicator)
        } else {
            Ok(broadcast)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    /// Frozen weights shared by every participant.
    pub network: Network,
    /// Global keep probabilities for all layers.
    pub theta: ProbMask,
    /// Trainable copies of every layer. The top model of a client at depth
    /// `d` is layers `d..L`; depths share storage.
    pub weights: Vec<WeightMatrix>,
    pub round: usize,
}

impl ServerState {
    pub fn new(network: Network, initial_theta: f64) -> Result<Self> {
        let theta = ProbMask::uniform(&network.layer_sizes(), initial_theta)?;
        let weights = network.layers.iter().map(WeightMatrix::to_trainable).collect();
        Ok(Self {
            network,
            theta,
            weights,
            round: 0,
        })
    }
}

/// Uniform sample of `k` distinct client ids, ascending.
pub fn sample_participants<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::InvalidConfig(format!("cannot sample {k} of {n} clients")));
    }
    let mut ids = rand::seq::index::sample(rng, n, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Element-wise mean of binary masks.
pub fn aggregate_binary_masks(masks: &[BinaryMask]) -> Result<ProbMask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidConfig("aggregation needs at least one mask".into()))?;
    let shape = first.shape();
    if masks.iter().any(|m| m.shape() != shape) {
        return Err(Error::InvalidShape("incongruent masks".into()));
    }
    let k = masks.len() as f64;
    ProbMask::new(
        shape
            .iter()
            .enumerate()
            .map(|(l, &n)| {
                (0..n)
                    .map(|j| masks.iter().filter(|m| m.layers[l][j]).count() as f64 / k)
                    .collect()
            })
            .collect(),
    )
}

/// Per-round state of one participant.
#[derive(Debug, Clone)]
pub struct LocalSession {
    pub client: usize,
    pub depth: usize,
    pub scores: ScoreMask,
    optimizer: ScoreOptimizer,
    /// Per-iteration noise for the Gaussian update mechanism.
    update_sigma: f64,
}

impl LocalSession {
    pub fn new(client: &ClientState, theta: &ProbMask, cfg: &ProtocolConfig) -> Result<Self> {
        let scores = ScoreMask::from_probs(theta, cfg.score_clip)?;
        let optimizer = ScoreOptimizer::new(cfg.optimizer, cfg.lr, &scores.shape());
        let update_sigma = match (cfg.privacy.mechanism, cfg.privacy.sigma) {
            (Mechanism::GaussianUpdate, Some(s)) => s,
            (Mechanism::GaussianUpdate, None) => sigma_for_update_noise(
                client.iterations(cfg).max(1) as u32,
                cfg.privacy.clip,
                cfg.privacy.epsilon,
                cfg.privacy.delta,
                cfg.batch_size,
            )?
            .sqrt(),
            _ => 0.0,
        };
        Ok(Self {
            client: client.id,
            depth: client.split_depth,
            scores,
            optimizer,
            update_sigma,
        })
    }

    pub fn probs(&self) -> ProbMask {
        self.scores.probs()
    }
}

/// Per-round server state: score masks for the masked top model.
#[derive(Debug, Clone)]
pub struct ServerSession {
    pub scores: ScoreMask,
    optimizers: Vec<ScoreOptimizer>,
    /// Layers some participant left on the server this round.
    pub resident: Vec<bool>,
}

impl ServerSession {
    pub fn new(server: &ServerState, min_depth: usize, cfg: &ProtocolConfig) -> Result<Self> {
        let scores = ScoreMask::from_probs(&server.theta, cfg.score_clip)?;
        let optimizers = scores
            .shape()
            .iter()
            .map(|&n| ScoreOptimizer::new(cfg.optimizer, cfg.server_lr(), &[n]))
            .collect();
        let resident = (0..server.network.depth()).map(|l| l >= min_depth).collect();
        Ok(Self {
            scores,
            optimizers,
            resident,
        })
    }

    pub fn trace(&self) -> ServerMaskTrace {
        ServerMaskTrace {
            scores: self.scores.clone(),
            resident: self.resident.clone(),
        }
    }
}

/// What one local iteration put on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub mask: BinaryMask,
    pub smashed: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub returned_grads: Vec<Vec<f64>>,
    pub loss_sum: f64,
    pub uplink_bytes: usize,
    pub downlink_bytes: usize,
}

/// Server half of one mini-batch: loss, top-model update, and the gradient
/// for each smashed sample.
fn serve_batch(
    server: &mut ServerState,
    session: Option<&mut ServerSession>,
    depth: usize,
    smashed: &[Vec<f64>],
    labels: &[usize],
    cfg: &ProtocolConfig,
    rng: &mut SimRng,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let layers = server.network.depth();
    if depth == 0 || depth > layers {
        return Err(Error::Protocol(format!("smashed data from depth {depth} of {layers}")));
    }
    let width = server.network.layers[depth - 1].rows();
    if smashed.iter().any(|q| q.len() != width) {
        return Err(Error::Protocol(format!("smashed width does not match split depth {depth}")));
    }
    let batch = smashed.len();
    let mut loss_sum = 0.0;
    let mut returned = Vec::with_capacity(batch);
    if depth == layers {
        for (q, &y) in smashed.iter().zip(labels) {
            let loss = cross_entropy(q, y)?;
            loss_sum += loss.value;
            returned.push(loss.grad_wrt_logits);
        }
        return Ok((loss_sum, returned));
    }
    match (cfg.top_model, session) {
        (TopModel::Masked, Some(session)) => {
            let top = server.network.top(depth);
            let top_scores = ScoreMask {
                layers: session.scores.layers[depth..].to_vec(),
            };
            let mask = sample_mask(&top_scores.probs(), rng);
            let mut sums: Vec<Vec<f64>> = top_scores.layers.iter().map(|l| vec![0.0; l.len()]).collect();
            for (q, &y) in smashed.iter().zip(labels) {
                let (out, cache) = masked_forward(&top, &mask, q)?;
                let loss = cross_entropy(&out.values, y)?;
                loss_sum += loss.value;
                let (g, input_grad) = ste_backward(&cache, &top, &top_scores, &loss.grad_wrt_logits)?;
                for (s, g) in sums.iter_mut().zip(g) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                returned.push(input_grad);
            }
            for (i, grad) in sums.into_iter().enumerate() {
                let l = depth + i;
                let current = ScoreMask {
                    layers: vec![std::mem::take(&mut session.scores.layers[l])],
                };
                let next = session.optimizers[l].apply(&current, &[grad], batch)?;
                session.scores.layers[l] = next.layers.into_iter().next().expect("one layer");
            }
        }
        (TopModel::Masked, None) => {
            return Err(Error::Protocol("masked top model without a server session".into()));
        }
        (TopModel::Weights, _) => {
            let top = &server.weights[depth..];
            let nl = server.network.nonlinearity;
            let mut sums: Vec<Vec<f64>> = top.iter().map(|w| vec![0.0; w.len()]).collect();
            for (q, &y) in smashed.iter().zip(labels) {
                let (out, trace) = forward_stack(top, nl, false, q)?;
                let loss = cross_entropy(&out, y)?;
                loss_sum += loss.value;
                let input_grad = backward_stack(top, nl, false, &trace, &loss.grad_wrt_logits, |i, delta, input| {
                    accumulate_outer(&mut sums[i], delta, input)
                })?;
                returned.push(input_grad);
            }
            clip_noisy_weight_grads(&mut sums, batch, &cfg.privacy);
            let lr = cfg.server_lr() / batch as f64;
            for (w, g) in server.weights[depth..].iter_mut().zip(&sums) {
                w.sgd_step(g, lr)?;
            }
        }
    }
    Ok((loss_sum, returned))
}

/// Laplace-noised activations are large enough to send plain SGD to infinity,
/// so the batch-mean weight gradient is held to `spec.clip` in L2.
fn clip_noisy_weight_grads(sums: &mut [Vec<f64>], batch: usize, spec: &PrivacySpec) {
    if spec.mechanism == Mechanism::LaplaceForward {
        clip_layers(sums, spec.clip * batch as f64);
    }
}

fn accumulate_outer(sum: &mut [f64], delta: &[f64], input: &[f64]) {
    let cols = input.len();
    for (j, &d) in delta.iter().enumerate() {
        if d != 0.0 {
            for (k, &x) in input.iter().enumerate() {
                sum[j * cols + k] += d * x;
            }
        }
    }
}

fn laplace_scale(layers: &[WeightMatrix], spec: &PrivacySpec) -> Option<f64> {
    (spec.mechanism == Mechanism::LaplaceForward)
        .then(|| forward_sensitivity(layers, spec.input_bound) / spec.epsilon)
}

/// Client forward, server step and client score update for one mini-batch.
pub fn client_local_iteration(
    session: &mut LocalSession,
    server: &mut ServerState,
    server_session: Option<&mut ServerSession>,
    data: &Dataset,
    batch: &[usize],
    cfg: &ProtocolConfig,
    client_rng: &mut SimRng,
    server_rng: &mut SimRng,
) -> Result<IterationRecord> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty mini-batch".into()));
    }
    let network = server.network.clone();
    let bottom = network.bottom(session.depth);
    let mask = sample_mask(&session.scores.probs(), client_rng);
    let noise_scale = laplace_scale(bottom.weights, &cfg.privacy);
    let mut caches = Vec::with_capacity(batch.len());
    let mut smashed = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for &i in batch {
        let (mut act, cache) = masked_forward(&bottom, &mask, &data.features[i])?;
        if let Some(b) = noise_scale {
            let z = laplace_noise(b, act.values.len(), client_rng)?;
            act.values.iter_mut().zip(z).for_each(|(v, z)| *v += z);
        }
        caches.push(cache);
        smashed.push(act.values);
        labels.push(data.labels[i]);
    }
    let width = smashed[0].len();
    let (loss_sum, returned) = serve_batch(server, server_session, session.depth, &smashed, &labels, cfg, server_rng)?;

    let mut sums: Vec<Vec<f64>> = session.scores.layers.iter().map(|l| vec![0.0; l.len()]).collect();
    let clip = cfg.privacy.mechanism == Mechanism::GaussianUpdate;
    for (cache, g) in caches.iter().zip(&returned) {
        let (mut grads, _) = ste_backward(cache, &bottom, &session.scores, g)?;
        if clip {
            clip_layers(&mut grads, cfg.privacy.clip);
        }
        for (s, g) in sums.iter_mut().zip(grads) {
            s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
        }
    }
    session.scores = if clip {
        noisy_score_update(&session.scores, &sums, batch.len(), cfg.lr, session.update_sigma, client_rng)?
    } else {
        session.optimizer.apply(&session.scores, &sums, batch.len())?
    };
    Ok(IterationRecord {
        mask,
        smashed,
        labels,
        returned_grads: returned,
        loss_sum,
        uplink_bytes: smashed_batch_len(batch.len(), width),
        downlink_bytes: gradient_batch_len(batch.len(), width),
    })
}

/// One client's traffic and loss in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundLog {
    pub client: usize,
    pub split_depth: usize,
    pub iterations: usize,
    pub train_loss: f64,
    pub uplink_bytes: usize,
    pub downlink_bytes: usize,
    /// The end-of-round model upload (mask, indicator or weights), also
    /// counted in `uplink_bytes`.
    pub model_uplink_bytes: usize,
    #[serde(skip)]
    pub uplink_mask: Option<BinaryMask>,
    #[serde(skip)]
    pub indicator: Option<PersonalizationIndicator>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub participants: Vec<usize>,
    pub clients: Vec<ClientRoundLog>,
    /// `|K^l|` for layers `1..=L`.
    pub layer_participants: Vec<usize>,
    #[serde(skip)]
    pub theta: Option<ProbMask>,
}

struct Schedule {
    batches: Vec<Vec<usize>>,
}

fn epoch_batches(train: &[usize], cfg: &ProtocolConfig, rng: &mut SimRng) -> Schedule {
    let mut batches = Vec::new();
    for _ in 0..cfg.local_epochs {
        let mut order = train.to_vec();
        order.shuffle(rng);
        batches.extend(order.chunks(cfg.batch_size).map(<[usize]>::to_vec));
    }
    Schedule { batches }
}

fn participants_for_round(server: &ServerState, clients: &[ClientState], cfg: &ProtocolConfig, seed: u64) -> Result<Vec<usize>> {
    let k = cfg.participants_per_round(clients.len());
    let mut rng = stream(seed, Stream::Participants, server.round as u64, 0);
    let picked = sample_participants(clients.len(), k, &mut rng)?;
    Ok(picked)
}

fn splits_of(clients: &[ClientState], layers: usize) -> Result<SplitAssignment> {
    SplitAssignment::from_depths(clients.iter().map(|c| (c.id, c.split_depth)), layers)
}

/// One PM-SFL round. `clients[i].id` must equal `i`.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    data: &Dataset,
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<RoundLog> {
    let t = server.round;
    run_round_inner(server, clients, data, cfg, seed).map_err(|e| e.in_round(t))
}

fn run_round_inner(
    server: &mut ServerState,
    clients: &mut [ClientState],
    data: &Dataset,
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<RoundLog> {
    let t = server.round;
    let layers = server.network.depth();
    if clients.iter().enumerate().any(|(i, c)| c.id != i) {
        return Err(Error::InvalidConfig("client ids must equal their positions".into()));
    }
    let participants = participants_for_round(server, clients, cfg, seed)?;
    let min_depth = participants.iter().map(|&k| clients[k].split_depth).min().expect("nonempty");
    let mut server_session = match cfg.top_model {
        TopModel::Masked => Some(ServerSession::new(server, min_depth, cfg)?),
        TopModel::Weights => None,
    };
    let mut server_rng = stream(seed, Stream::Server, t as u64, 0);

    struct Active {
        session: LocalSession,
        start: ProbMask,
        schedule: Schedule,
        rng: SimRng,
        log: ClientRoundLog,
        samples: usize,
    }
    let mut active = Vec::with_capacity(participants.len());
    for &k in &participants {
        let client = &clients[k];
        let mut rng = stream(seed, Stream::Client, k as u64, t as u64);
        let start = client.round_start_theta(&server.theta, cfg)?;
        let session = LocalSession::new(client, &start, cfg)?;
        let schedule = epoch_batches(&client.train, cfg, &mut rng);
        let shape = start.shape();
        active.push(Active {
            log: ClientRoundLog {
                client: k,
                split_depth: client.split_depth,
                iterations: schedule.batches.len(),
                train_loss: 0.0,
                uplink_bytes: 0,
                downlink_bytes: float_mask_len(&shape),
                model_uplink_bytes: 0,
                uplink_mask: None,
                indicator: None,
            },
            session,
            start,
            schedule,
            rng,
            samples: 0,
        });
    }

    let rounds = active.iter().map(|a| a.schedule.batches.len()).max().unwrap_or(0);
    for r in 0..rounds {
        for a in active.iter_mut() {
            let Some(batch) = a.schedule.batches.get(r) else {
                continue;
            };
            let rec = client_local_iteration(
                &mut a.session,
                server,
                server_session.as_mut(),
                data,
                batch,
                cfg,
                &mut a.rng,
                &mut server_rng,
            )?;
            a.log.train_loss += rec.loss_sum;
            a.samples += batch.len();
            a.log.uplink_bytes += rec.uplink_bytes;
            a.log.downlink_bytes += rec.downlink_bytes;
        }
    }

    // Step 3: uplink
    let warm = t >= cfg.personalization.warmup_rounds(cfg.total_rounds);
    let mut uploads: Vec<(usize, Vec<Vec<f64>>, PersonalizationIndicator)> = Vec::new();
    for a in active.iter_mut() {
        let client = &mut clients[a.log.client];
        let after = a.session.probs();
        let shape = after.shape();
        if cfg.personalization.enabled() && warm {
            let total: usize = shape.iter().sum();
            let cap = personalization_cap(cfg.personalization.ratio_cap, total);
            let warmup = cfg.personalization.warmup_rounds(cfg.total_rounds);
            let inc = growth_increment(cap, cfg.total_rounds.saturating_sub(warmup));
            let report = compute_delta(&a.start, &after)?;
            client.indicator = grow_indicator(&client.indicator, &report, inc, cap)?;
        }
        let sampled_from = match cfg.privacy.mechanism {
            Mechanism::GaussianMask => {
                let sigma = match cfg.privacy.sigma {
                    Some(s) => s,
                    None => sigma_for_mask_noise(cfg.privacy.c, cfg.privacy.epsilon, cfg.privacy.delta)?.sqrt(),
                };
                noisy_mask_probs(&after, sigma, cfg.privacy.c, &mut a.rng)?
            }
            _ => after.clone(),
        };
        let values = match cfg.mask_uplink {
            MaskUplink::Binary => {
                let m = sample_mask(&sampled_from, &mut a.rng);
                a.log.model_uplink_bytes = binary_mask_len(&shape);
                let v = m.layers.iter().map(|l| l.iter().map(|&b| b as u8 as f64).collect()).collect();
                a.log.uplink_mask = Some(m);
                v
            }
            MaskUplink::Float => {
                a.log.model_uplink_bytes = float_mask_len(&shape);
                sampled_from.into_layers()
            }
        };
        if cfg.personalization.enabled() {
            a.log.model_uplink_bytes += binary_mask_len(&shape);
            a.log.indicator = Some(client.indicator.clone());
        }
        a.log.uplink_bytes += a.log.model_uplink_bytes;
        a.log.train_loss = if a.samples == 0 { 0.0 } else { a.log.train_loss / a.samples as f64 };
        client.local_theta = after;
        let indicator = if cfg.personalization.enabled() {
            client.indicator.clone()
        } else {
            PersonalizationIndicator::empty(&shape)
        };
        uploads.push((a.log.client, values, indicator));
    }

    // aggregation, layer by layer
    let splits = splits_of(clients, layers)?;
    let trace = server_session.as_ref().map(ServerSession::trace);
    let mut next = server.theta.clone();
    let mut counts = Vec::with_capacity(layers);
    for l in 1..=layers {
        let holders = layer_participants(&participants, &splits, l);
        counts.push(holders.len());
        let prev = server.theta.layer(l - 1);
        let client_agg = if holders.is_empty() {
            None
        } else {
            let (vals, inds): (Vec<&[f64]>, Vec<&[bool]>) = uploads
                .iter()
                .filter(|(c, _, _)| holders.contains(c))
                .map(|(_, v, i)| (v[l - 1].as_slice(), i.layers[l - 1].as_slice()))
                .unzip();
            Some(hetero_aggregate_values(&vals, &inds, prev)?)
        };
        let server_update = match (&trace, cfg.compensation) {
            (Some(tr), true) => server_mask_update_for_layer(tr, l),
            _ => None,
        };
        let layer = match (server_update, client_agg) {
            (Some(sl), client) => compensate(&LayerUpdatePair {
                layer: l,
                client: client.unwrap_or_else(|| prev.to_vec()),
                server: sl,
                layer_participants: holders.len(),
                participants: participants.len(),
            })?,
            (None, Some(client)) => client,
            (None, None) => prev.to_vec(),
        };
        next.set_layer(l - 1, layer)?;
    }
    server.theta = next;
    server.round += 1;
    Ok(RoundLog {
        round: t,
        participants,
        clients: active.into_iter().map(|a| a.log).collect(),
        layer_participants: counts,
        theta: Some(server.theta.clone()),
    })
}

/// Trainable bottom weights each SplitFed client downloads; kept alongside
/// the server state for the weight-training baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBaseline {
    /// Global bottom weights, all layers (clients use a prefix).
    pub global: Vec<WeightMatrix>,
}

impl WeightBaseline {
    pub fn new(network: &Network) -> Self {
        Self {
            global: network.layers.iter().map(WeightMatrix::to_trainable).collect(),
        }
    }
}

/// One SplitFed round: clients train bottom weights by SGD, the server
/// trains its top layers, and bottom layers are averaged weighted by local
/// data size.
pub fn splitfed_weight_round(
    server: &mut ServerState,
    baseline: &mut WeightBaseline,
    clients: &[ClientState],
    data: &Dataset,
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<RoundLog> {
    let t = server.round;
    splitfed_inner(server, baseline, clients, data, cfg, seed).map_err(|e| e.in_round(t))
}

fn splitfed_inner(
    server: &mut ServerState,
    baseline: &mut WeightBaseline,
    clients: &[ClientState],
    data: &Dataset,
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<RoundLog> {
    let t = server.round;
    let layers = server.network.depth();
    let participants = participants_for_round(server, clients, cfg, seed)?;
    let nl = server.network.nonlinearity;
    let mut server_rng = stream(seed, Stream::Server, t as u64, 0);
    let weights_cfg = ProtocolConfig {
        top_model: TopModel::Weights,
        ..cfg.clone()
    };

    struct Active {
        id: usize,
        local: Vec<WeightMatrix>,
        schedule: Schedule,
        rng: SimRng,
        log: ClientRoundLog,
        samples: usize,
    }
    let mut active: Vec<Active> = participants
        .iter()
        .map(|&k| {
            let c = &clients[k];
            let mut rng = stream(seed, Stream::Client, k as u64, t as u64);
            let local = baseline.global[..c.split_depth].to_vec();
            let shape: Vec<usize> = local.iter().map(WeightMatrix::len).collect();
            let schedule = epoch_batches(&c.train, cfg, &mut rng);
            Active {
                id: k,
                log: ClientRoundLog {
                    client: k,
                    split_depth: c.split_depth,
                    iterations: schedule.batches.len(),
                    train_loss: 0.0,
                    uplink_bytes: 0,
                    downlink_bytes: float_mask_len(&shape),
                    model_uplink_bytes: float_mask_len(&shape),
                    uplink_mask: None,
                    indicator: None,
                },
                local,
                schedule,
                rng,
                samples: 0,
            }
        })
        .collect();

    let rounds = active.iter().map(|a| a.schedule.batches.len()).max().unwrap_or(0);
    for r in 0..rounds {
        for a in active.iter_mut() {
            let Some(batch) = a.schedule.batches.get(r) else {
                continue;
            };
            let depth = a.local.len();
            let activate = depth < layers;
            let noise = laplace_scale(&a.local, &cfg.privacy);
            let mut traces = Vec::with_capacity(batch.len());
            let mut smashed = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let (mut out, trace) = forward_stack(&a.local, nl, activate, &data.features[i])?;
                if let Some(b) = noise {
                    let z = laplace_noise(b, out.len(), &mut a.rng)?;
                    out.iter_mut().zip(z).for_each(|(v, z)| *v += z);
                }
                traces.push(trace);
                smashed.push(out);
                labels.push(data.labels[i]);
            }
            let width = smashed[0].len();
            let (loss_sum, returned) = serve_batch(server, None, depth, &smashed, &labels, &weights_cfg, &mut server_rng)?;
            let mut sums: Vec<Vec<f64>> = a.local.iter().map(|w| vec![0.0; w.len()]).collect();
            for (trace, g) in traces.iter().zip(&returned) {
                backward_stack(&a.local, nl, activate, trace, g, |i, delta, input| {
                    accumulate_outer(&mut sums[i], delta, input)
                })?;
            }
            clip_noisy_weight_grads(&mut sums, batch.len(), &cfg.privacy);
            let lr = cfg.lr / batch.len() as f64;
            for (w, g) in a.local.iter_mut().zip(&sums) {
                w.sgd_step(g, lr)?;
            }
            a.log.train_loss += loss_sum;
            a.samples += batch.len();
            a.log.uplink_bytes += smashed_batch_len(batch.len(), width);
            a.log.downlink_bytes += gradient_batch_len(batch.len(), width);
        }
    }

    let mut counts = Vec::with_capacity(layers);
    for l in 0..layers {
        let holders: Vec<&Active> = active.iter().filter(|a| a.local.len() > l).collect();
        counts.push(holders.len());
        let total: usize = holders.iter().map(|a| clients[a.id].train.len()).sum();
        if holders.is_empty() || total == 0 {
            // layer trained only on the server this round
            if active.iter().any(|a| a.local.len() <= l) {
                let trained = server.weights[l].values().to_vec();
                baseline.global[l].assign(&trained)?;
            }
            continue;
        }
        let mut avg = vec![0.0; baseline.global[l].len()];
        for a in &holders {
            let w = clients[a.id].train.len() as f64 / total as f64;
            avg.iter_mut().zip(a.local[l].values()).for_each(|(s, v)| *s += w * v);
        }
        baseline.global[l].assign(&avg)?;
    }
    for a in active.iter_mut() {
        a.log.uplink_bytes += a.log.model_uplink_bytes;
        a.log.train_loss = if a.samples == 0 { 0.0 } else { a.log.train_loss / a.samples as f64 };
    }
    server.round += 1;
    Ok(RoundLog {
        round: t,
        participants,
        clients: active.into_iter().map(|a| a.log).collect(),
        layer_participants: counts,
        theta: None,
    })
}

/// Bottom probabilities a client evaluates with.
pub fn client_eval_theta(server: &ServerState, client: &ClientState, cfg: &ProtocolConfig) -> Result<ProbMask> {
    client.round_start_theta(&server.theta, cfg)
}

fn threshold(theta: &ProbMask) -> ProbMask {
    ProbMask::new(
        theta
            .layers()
            .iter()
            .map(|l| l.iter().map(|&t| if t > 0.5 { 1.0 } else { 0.0 }).collect())
            .collect(),
    )
    .expect("0/1 probabilities")
}

/// Logits of one sample under the PM-SFL evaluation model of `client`.
pub fn predict(
    server: &ServerState,
    client: &ClientState,
    cfg: &ProtocolConfig,
    bottom_theta: &ProbMask,
    x: &[f64],
    rng: &mut SimRng,
) -> Result<Vec<f64>> {
    let d = client.split_depth;
    let full_theta = {
        let mut layers = bottom_theta.layers().to_vec();
        layers.extend_from_slice(&server.theta.layers()[d..]);
        ProbMask::new(layers)?
    };
    let whole = Stack {
        weights: &server.network.layers,
        nonlinearity: server.network.nonlinearity,
        activate_output: false,
    };
    match cfg.top_model {
        TopModel::Masked => match cfg.eval_mask {
            EvalMask::Expected => gated_forward(&whole, &full_theta, x),
            EvalMask::Threshold => gated_forward(&whole, &threshold(&full_theta), x),
            EvalMask::Sampled => Ok(masked_forward(&whole, &sample_mask(&full_theta, rng), x)?.0.values),
        },
        TopModel::Weights => {
            let bottom = server.network.bottom(d);
            let q = match cfg.eval_mask {
                EvalMask::Expected => gated_forward(&bottom, bottom_theta, x)?,
                EvalMask::Threshold => gated_forward(&bottom, &threshold(bottom_theta), x)?,
                EvalMask::Sampled => masked_forward(&bottom, &sample_mask(bottom_theta, rng), x)?.0.values,
            };
            Ok(forward_stack(&server.weights[d..], server.network.nonlinearity, false, &q)?.0)
        }
    }
}

/// Fraction of `client.test` classified correctly; `None` without test data.
pub fn client_accuracy(
    server: &ServerState,
    client: &ClientState,
    data: &Dataset,
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<Option<f64>> {
    if client.test.is_empty() {
        return Ok(None);
    }
    let theta = client_eval_theta(server, client, cfg)?;
    let mut rng = stream(seed, Stream::Eval, server.round as u64, client.id as u64);
    let mut correct = 0usize;
    for &i in &client.test {
        let logits = predict(server, client, cfg, &theta, &data.features[i], &mut rng)?;
        correct += (argmax(&logits) == data.labels[i]) as usize;
    }
    Ok(Some(correct as f64 / client.test.len() as f64))
}

/// SplitFed accuracy with the global bottom weights and server top.
pub fn baseline_accuracy(
    server: &ServerState,
    baseline: &WeightBaseline,
    client: &ClientState,
    data: &Dataset,
) -> Result<Option<f64>> {
    if client.test.is_empty() {
        return Ok(None);
    }
    let d = client.split_depth;
    let nl = server.network.nonlinearity;
    let mut correct = 0usize;
    for &i in &client.test {
        let (q, _) = forward_stack(&baseline.global[..d], nl, d < server.network.depth(), &data.features[i])?;
        let (logits, _) = forward_stack(&server.weights[d..], nl, false, &q)?;
        correct += (argmax(&logits) == data.labels[i]) as usize;
    }
    Ok(Some(correct as f64 / client.test.len() as f64))
}

/// Per-client accuracies (in client order) and their mean over clients with
/// test data.
pub fn mean_accuracy(per_client: &[Option<f64>]) -> f64 {
    let v: Vec<f64> = per_client.iter().flatten().copied().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Mask payload bytes (header excluded) for a layer shape.
pub fn mask_payload_bytes(shape: &[usize], uplink: MaskUplink) -> usize {
    let total = match uplink {
        MaskUplink::Binary => binary_mask_len(shape),
        MaskUplink::Float => float_mask_len(shape),
    };
    total - mask_header_len(shape.len())
}

/// Mean keep probability per layer; a compact progress signal.
pub fn layer_means(theta: &ProbMask) -> Vec<f64> {
    theta
        .layers()
        .iter()
        .map(|l| l.iter().sum::<f64>() / l.len().max(1) as f64)
        .collect()
}

/// `sigmoid(s)` for a whole score mask, by layer.
pub fn scores_to_probs(scores: &ScoreMask) -> Vec<Vec<f64>> {
    scores.layers.iter().map(|l| logistic(l)).collect()
}
