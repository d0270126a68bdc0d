//! Adaptive split depths and layer-wise knowledge compensation.
//!
//! Clients hold a prefix of the network whose length depends on their
//! capacity tier. A layer held by only some participants is blended with the
//! server's own mask update for that layer, weighted by the fraction of
//! participants that trained it locally. Layer indices in this module are
//! 1-based, as in `K^l`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::ScoreMask;
use crate::net::logistic;

/// Depth for each capacity tier; tier `i` is an index into `depths`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierTable {
    depths: Vec<usize>,
    layers: usize,
}

impl TierTable {
    pub fn new(depths: Vec<usize>, layers: usize) -> Result<Self> {
        if depths.is_empty() {
            return Err(Error::InvalidConfig("tier table is empty".into()));
        }
        if let Some(&d) = depths.iter().find(|&&d| d == 0 || d > layers) {
            return Err(Error::InvalidConfig(format!(
                "tier depth {d} outside [1, {layers}]"
            )));
        }
        if depths.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidConfig(
                "tier depths must be non-decreasing in capacity".into(),
            ));
        }
        Ok(Self { depths, layers })
    }

    /// `tiers` tiers spread evenly over `layers` layers; the last tier holds
    /// the full network.
    pub fn even(tiers: usize, layers: usize) -> Result<Self> {
        let depths = (1..=tiers)
            .map(|i| ((i * layers) as f64 / tiers as f64).round().max(1.0) as usize)
            .collect();
        Self::new(depths, layers)
    }

    pub fn depths(&self) -> &[usize] {
        &self.depths
    }

    pub fn layers(&self) -> usize {
        self.layers
    }
}

/// Split depth per client id, fixed for a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    depths: BTreeMap<usize, usize>,
    layers: usize,
}

impl SplitAssignment {
    pub fn uniform(clients: usize, depth: usize, layers: usize) -> Result<Self> {
        if depth == 0 || depth > layers {
            return Err(Error::InvalidConfig(format!(
                "split depth {depth} outside [1, {layers}]"
            )));
        }
        Ok(Self {
            depths: (0..clients).map(|c| (c, depth)).collect(),
            layers,
        })
    }

    pub fn from_depths(depths: impl IntoIterator<Item = (usize, usize)>, layers: usize) -> Result<Self> {
        let depths: BTreeMap<usize, usize> = depths.into_iter().collect();
        if let Some((c, d)) = depths.iter().find(|(_, &d)| d == 0 || d > layers) {
            return Err(Error::InvalidConfig(format!(
                "client {c}: split depth {d} outside [1, {layers}]"
            )));
        }
        Ok(Self { depths, layers })
    }

    pub fn depth(&self, client: usize) -> Option<usize> {
        self.depths.get(&client).copied()
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn max_depth(&self) -> usize {
        self.depths.values().copied().max().unwrap_or(0)
    }

    pub fn is_uniform_full(&self) -> bool {
        self.depths.values().all(|&d| d == self.layers)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.depths.iter().map(|(&c, &d)| (c, d))
    }
}

pub fn assign_splits(capacities: &BTreeMap<usize, usize>, tiers: &TierTable) -> Result<SplitAssignment> {
    if capacities.is_empty() {
        return Err(Error::InvalidConfig("no clients to assign".into()));
    }
    let depths = capacities
        .iter()
        .map(|(&client, &tier)| {
            tiers
                .depths
                .get(tier)
                .map(|&d| (client, d))
                .ok_or_else(|| Error::InvalidConfig(format!("client {client}: unknown tier {tier}")))
        })
        .collect::<Result<_>>()?;
    Ok(SplitAssignment {
        depths,
        layers: tiers.layers,
    })
}

/// Participants whose bottom model includes layer `l`.
pub fn layer_participants(participants: &[usize], splits: &SplitAssignment, l: usize) -> Vec<usize> {
    participants
        .iter()
        .copied()
        .filter(|&c| splits.depth(c).is_some_and(|d| d >= l))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerUpdatePair {
    pub layer: usize,
    pub server: Vec<f64>,
    pub client: Vec<f64>,
    pub layer_participants: usize,
    pub participants: usize,
}

/// `(1 - |K^l|/|K|) * server + (|K^l|/|K|) * client`.
pub fn compensate(pair: &LayerUpdatePair) -> Result<Vec<f64>> {
    if pair.participants == 0 {
        return Err(Error::InvalidConfig("compensation with no participants".into()));
    }
    if pair.layer_participants > pair.participants {
        return Err(Error::InvalidConfig(format!(
            "layer {}: {} holders out of {} participants",
            pair.layer, pair.layer_participants, pair.participants
        )));
    }
    if pair.server.len() != pair.client.len() {
        return Err(Error::InvalidShape(format!(
            "layer {}: server update of {} vs client update of {}",
            pair.layer,
            pair.server.len(),
            pair.client.len()
        )));
    }
    let w = pair.layer_participants as f64 / pair.participants as f64;
    Ok(pair
        .server
        .iter()
        .zip(&pair.client)
        .map(|(&s, &c)| ((1.0 - w) * s + w * c).clamp(s.min(c), s.max(c)))
        .collect())
}

/// Server-held scores after a round, with the layers that were actually
/// trained server-side.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerMaskTrace {
    pub scores: ScoreMask,
    pub resident: Vec<bool>,
}

/// The server's probabilistic mask for layer `l`, or `None` when no
/// participant left that layer on the server this round.
pub fn server_mask_update_for_layer(trace: &ServerMaskTrace, l: usize) -> Option<Vec<f64>> {
    let i = l.checked_sub(1)?;
    if !*trace.resident.get(i)? {
        return None;
    }
    Some(logistic(&trace.scores.layers[i]))
}
