//! Data-aware mask personalization.
//!
//! After local training a client compares its keep probabilities before and
//! after the round. Coordinates whose probability crossed 0.5 form the
//! disagree group; the rest form the agree group. The client's set of
//! personalized (never aggregated) coordinates grows each round, taking the
//! largest disagree changes first and only then the largest agree changes.
//! The server averages each coordinate over the clients that did not
//! personalize it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, ProbMask};

/// Per-coordinate flags; `true` marks a coordinate kept local.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonalizationIndicator {
    pub layers: Vec<Vec<bool>>,
}

impl PersonalizationIndicator {
    pub fn empty(shape: &[usize]) -> Self {
        Self {
            layers: shape.iter().map(|&n| vec![false; n]).collect(),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn count(&self) -> usize {
        self.layers.iter().flatten().filter(|&&b| b).count()
    }

    pub fn total_len(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn flat(&self) -> impl Iterator<Item = bool> + '_ {
        self.layers.iter().flatten().copied()
    }

    /// True when every flag set in `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.shape() == other.shape() && self.flat().zip(other.flat()).all(|(a, b)| !a || b)
    }

    /// Wire view: indicators share the bit-packed mask encoding.
    pub fn as_bits(&self) -> BinaryMask {
        BinaryMask {
            layers: self.layers.clone(),
        }
    }

    fn set_flat(&mut self, mut index: usize) {
        for layer in &mut self.layers {
            if index < layer.len() {
                layer[index] = true;
                return;
            }
            index -= layer.len();
        }
        panic!("flat index out of range");
    }
}

/// Per-coordinate change of one local round, split by the 0.5 threshold.
/// Indices are flat, layer-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub abs_delta: Vec<f64>,
    pub disagree: Vec<usize>,
    pub agree: Vec<usize>,
    pub shape: Vec<usize>,
}

pub fn compute_delta(before: &ProbMask, after: &ProbMask) -> Result<DeltaReport> {
    if before.shape() != after.shape() {
        return Err(Error::InvalidShape(format!(
            "delta between {:?} and {:?}",
            before.shape(),
            after.shape()
        )));
    }
    let mut report = DeltaReport {
        abs_delta: Vec::with_capacity(before.total_len()),
        disagree: Vec::new(),
        agree: Vec::new(),
        shape: before.shape(),
    };
    for (i, (b, a)) in before.flat().zip(after.flat()).enumerate() {
        report.abs_delta.push((a - b).abs());
        // exact 0.5 on either side is not a crossing
        if (b - 0.5) * (a - 0.5) < 0.0 {
            report.disagree.push(i);
        } else {
            report.agree.push(i);
        }
    }
    Ok(report)
}

/// Number of coordinates a client may personalize: `floor(ratio_cap * d)`.
pub fn personalization_cap(ratio_cap: f64, coordinates: usize) -> usize {
    ((ratio_cap * coordinates as f64).floor() as usize).min(coordinates)
}

/// Per-round growth: `ceil(cap / rounds_after_warmup)`.
pub fn growth_increment(cap: usize, rounds_after_warmup: usize) -> usize {
    if rounds_after_warmup == 0 {
        cap
    } else {
        cap.div_ceil(rounds_after_warmup)
    }
}

/// Add up to `increment` coordinates, disagree group first, each group in
/// descending `|Δθ|` (ties by ascending index), never exceeding `cap`.
pub fn grow_indicator(
    prev: &PersonalizationIndicator,
    report: &DeltaReport,
    increment: usize,
    cap: usize,
) -> Result<PersonalizationIndicator> {
    if prev.shape() != report.shape {
        return Err(Error::InvalidShape(format!(
            "indicator {:?} vs delta {:?}",
            prev.shape(),
            report.shape
        )));
    }
    let mut next = prev.clone();
    let already: Vec<bool> = prev.flat().collect();
    let room = cap.saturating_sub(prev.count()).min(increment);
    if room == 0 {
        return Ok(next);
    }
    let ranked = |group: &[usize]| {
        let mut g: Vec<usize> = group.iter().copied().filter(|&i| !already[i]).collect();
        g.sort_by(|&a, &b| {
            report.abs_delta[b]
                .total_cmp(&report.abs_delta[a])
                .then(a.cmp(&b))
        });
        g
    };
    let order = ranked(&report.disagree)
        .into_iter()
        .chain(ranked(&report.agree));
    for i in order.take(room) {
        next.set_flat(i);
    }
    Ok(next)
}

/// Personalized coordinates come from the client's retained probabilities,
/// the rest from the broadcast global mask.
pub fn merge_personalized(
    global: &ProbMask,
    local: &ProbMask,
    indicator: &PersonalizationIndicator,
) -> Result<ProbMask> {
    if global.shape() != local.shape() || global.shape() != indicator.shape() {
        return Err(Error::InvalidShape("merge of incongruent masks".into()));
    }
    ProbMask::new(
        global
            .layers()
            .iter()
            .zip(local.layers())
            .zip(&indicator.layers)
            .map(|((g, l), ind)| {
                g.iter()
                    .zip(l)
                    .zip(ind)
                    .map(|((&g, &l), &keep)| if keep { l } else { g })
                    .collect()
            })
            .collect(),
    )
}

/// Heterogeneity-aware aggregation: each coordinate is the mean of the
/// non-personalized bits; coordinates nobody contributed keep `prev`.
pub fn hetero_aggregate(
    masks: &[BinaryMask],
    indicators: &[PersonalizationIndicator],
    prev: &ProbMask,
) -> Result<ProbMask> {
    if masks.is_empty() {
        return Err(Error::InvalidConfig("aggregation needs at least one mask".into()));
    }
    if masks.len() != indicators.len() {
        return Err(Error::InvalidConfig(format!(
            "{} masks but {} indicators",
            masks.len(),
            indicators.len()
        )));
    }
    let shape = prev.shape();
    for (m, ind) in masks.iter().zip(indicators) {
        if m.shape() != shape || ind.shape() != shape {
            return Err(Error::InvalidShape("incongruent mask or indicator".into()));
        }
    }
    let layers = prev
        .layers()
        .iter()
        .enumerate()
        .map(|(l, prev_layer)| {
            let values: Vec<Vec<f64>> = masks
                .iter()
                .map(|m| m.layers[l].iter().map(|&b| b as u8 as f64).collect())
                .collect();
            let values: Vec<&[f64]> = values.iter().map(Vec::as_slice).collect();
            let excluded: Vec<&[bool]> = indicators.iter().map(|i| i.layers[l].as_slice()).collect();
            hetero_aggregate_values(&values, &excluded, prev_layer)
        })
        .collect::<Result<_>>()?;
    ProbMask::new(layers)
}

/// One layer of [`hetero_aggregate`] over arbitrary uploaded values, so
/// float uploads aggregate the same way as sampled bits.
pub fn hetero_aggregate_values(values: &[&[f64]], excluded: &[&[bool]], prev: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("aggregation needs at least one mask".into()));
    }
    if values.len() != excluded.len() {
        return Err(Error::InvalidConfig(format!(
            "{} masks but {} indicators",
            values.len(),
            excluded.len()
        )));
    }
    if values.iter().any(|v| v.len() != prev.len())
        || excluded.iter().any(|e| e.len() != prev.len())
    {
        return Err(Error::InvalidShape("incongruent mask or indicator".into()));
    }
    Ok(prev
        .iter()
        .enumerate()
        .map(|(j, &fallback)| {
            let (mut num, mut den) = (0.0, 0usize);
            for (v, e) in values.iter().zip(excluded) {
                if !e[j] {
                    den += 1;
                    num += v[j];
                }
            }
            if den == 0 {
                fallback
            } else {
                num / den as f64
            }
        })
        .collect())
}
