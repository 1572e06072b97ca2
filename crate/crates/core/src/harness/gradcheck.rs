//! Gradient checks on a tiny model: exact backward against central finite
//! differences, and the neighbor-mode backward at full rank against exact
//! FFN gradients with the attention branch treated as a constant.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::approx::{backward_block_mecefo, ProjectionCache, Rank};
use crate::error::{Error, Result};
use crate::linalg::SvdConfig;
use crate::model::{
    backward_model, backward_model_exact, cross_entropy, derive_seed, ffn_backward, forward_model, ActivationCache,
    CacheMode, ExactWgrad, GradientSet, ModelConfig, ModelWeights, ParamId,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub sequences: usize,
    pub seed: u64,
    /// Initial weights are scaled by this so gradients are well above
    /// finite-difference noise.
    pub weight_scale: f64,
    pub fd_step: f64,
    pub fd_tolerance: f64,
    pub oracle_tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            model: ModelConfig {
                vocab: 64,
                hidden: 16,
                heads: 2,
                ffn_intermediate: 32,
                layers: 2,
                seq_len: 8,
                rope: true,
            },
            sequences: 2,
            seed: 7,
            weight_scale: 10.0,
            fd_step: 1e-5,
            fd_tolerance: 1e-5,
            oracle_tolerance: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupError {
    pub check: &'static str,
    pub group: String,
    /// `max |g − ĝ| / max |ĝ|` over the group's entries.
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GroupError {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(GroupError::passed)
    }

    pub fn worst(&self, check: &str) -> f64 {
        self.groups
            .iter()
            .filter(|g| g.check == check)
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }
}

fn group_name(id: ParamId) -> String {
    match id.kind() {
        Some(k) => k.as_str().to_string(),
        None => id.to_string(),
    }
}

/// Per-group errors of `got` against `reference` over the ids in `reference`.
fn group_errors(check: &'static str, got: &GradientSet, reference: &GradientSet, tol: f64) -> Result<Vec<GroupError>> {
    let mut diff: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for (&id, r) in reference.iter() {
        let g = got.get(id).ok_or_else(|| Error::MissingGradient {
            param: id.to_string(),
            rank: 0,
        })?;
        let e = diff.entry(group_name(id)).or_insert((0.0, 0.0));
        e.0 = e.0.max(g.sub(r)?.max_abs());
        e.1 = e.1.max(r.max_abs());
    }
    Ok(diff
        .into_iter()
        .map(|(group, (d, scale))| GroupError {
            check,
            group,
            max_rel_err: if scale > 0.0 { d / scale } else { d },
            tolerance: tol,
        })
        .collect())
}

fn sample(cfg: &GradCheckConfig) -> Result<(ModelWeights, Vec<usize>, Vec<usize>)> {
    let m = &cfg.model;
    let mut w = ModelWeights::init(m, cfg.seed)?;
    for id in w.param_ids() {
        let p = w.get_mut(id);
        *p = p.map(|v| v * cfg.weight_scale);
    }
    let n = cfg.sequences * m.seq_len;
    let mut state = derive_seed(cfg.seed, 99);
    let mut tokens = Vec::with_capacity(n + 1);
    for _ in 0..=n {
        state = derive_seed(state, 1);
        tokens.push((state % m.vocab as u64) as usize);
    }
    Ok((w, tokens[..n].to_vec(), tokens[1..].to_vec()))
}

fn loss_of(w: &ModelWeights, m: &ModelConfig, inputs: &[usize], targets: &[usize]) -> Result<f64> {
    let (logits, _) = forward_model(w, m, inputs, &vec![CacheMode::FfnInputOnly; m.layers])?;
    Ok(cross_entropy(&logits, targets)?.0)
}

/// Central finite differences of the mean loss for every parameter entry.
pub fn finite_difference_gradients(
    w: &ModelWeights,
    m: &ModelConfig,
    inputs: &[usize],
    targets: &[usize],
    h: f64,
) -> Result<GradientSet> {
    let mut probe = w.clone();
    let mut out = GradientSet::new();
    for id in w.param_ids() {
        let mut g = w.get(id).clone();
        for i in 0..g.len() {
            let orig = w.get(id).as_slice()[i];
            probe.get_mut(id).as_mut_slice()[i] = orig + h;
            let up = loss_of(&probe, m, inputs, targets)?;
            probe.get_mut(id).as_mut_slice()[i] = orig - h;
            let down = loss_of(&probe, m, inputs, targets)?;
            probe.get_mut(id).as_mut_slice()[i] = orig;
            g.as_mut_slice()[i] = (up - down) / (2.0 * h);
        }
        out.insert(id, g);
    }
    Ok(out)
}

/// Exact FFN-group gradients with every attention branch held constant,
/// read from `Full` caches without recomputation or projection.
pub fn detached_attention_gradients(
    w: &ModelWeights,
    m: &ModelConfig,
    inputs: &[usize],
    targets: &[usize],
) -> Result<GradientSet> {
    let (logits, cache) = forward_model(w, m, inputs, &vec![CacheMode::Full; m.layers])?;
    let (_, dlogits) = cross_entropy(&logits, targets)?;
    backward_model(w, &cache, &dlogits, |layer, c, dy| {
        let ActivationCache::Full { x1, ffn, .. } = c else {
            return Err(Error::contract("detached oracle", "needs Full caches"));
        };
        ffn_backward(&w.layers[layer], x1, ffn, dy, &mut ExactWgrad)
    })
}

/// Neighbor-mode gradients for every layer at full rank with a refresh
/// every step.
pub fn full_rank_mecefo_gradients(
    w: &ModelWeights,
    m: &ModelConfig,
    inputs: &[usize],
    targets: &[usize],
) -> Result<GradientSet> {
    let mut proj = ProjectionCache::new(Rank::Full, 1, SvdConfig::default())?;
    let (logits, cache) = forward_model(w, m, inputs, &vec![CacheMode::FfnInputOnly; m.layers])?;
    let (_, dlogits) = cross_entropy(&logits, targets)?;
    backward_model(w, &cache, &dlogits, |layer, c, dy| {
        backward_block_mecefo(&w.layers[layer], m, layer, c, dy, &mut proj)
    })
}

pub fn check_gradients(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    cfg.model.validate()?;
    if cfg.model.hidden > 32 {
        return Err(Error::Config("gradient check is meant for hidden <= 32".into()));
    }
    let (w, inputs, targets) = sample(cfg)?;
    let m = &cfg.model;

    let (logits, cache) = forward_model(&w, m, &inputs, &vec![CacheMode::Full; m.layers])?;
    let (_, dlogits) = cross_entropy(&logits, &targets)?;
    let exact = backward_model_exact(&w, m, &cache, &dlogits)?;
    let fd = finite_difference_gradients(&w, m, &inputs, &targets, cfg.fd_step)?;
    let mut groups = group_errors("finite_difference", &exact, &fd, cfg.fd_tolerance)?;

    let oracle = detached_attention_gradients(&w, m, &inputs, &targets)?;
    let mecefo = full_rank_mecefo_gradients(&w, m, &inputs, &targets)?;
    groups.extend(group_errors("detached_oracle", &mecefo, &oracle, cfg.oracle_tolerance)?);
    Ok(GradCheckReport { groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_check_passes() {
        let report = check_gradients(&GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{report:#?}");
        assert!(report.worst("finite_difference") <= 1e-5);
        assert!(report.worst("detached_oracle") <= 1e-10);
        assert!(report.groups.iter().any(|g| g.group == "gate"));
    }

    #[test]
    fn zero_weights_give_zero_block_gradients() {
        let cfg = GradCheckConfig::default();
        let w = ModelWeights::zeros(&cfg.model);
        let (_, inputs, targets) = sample(&cfg).unwrap();
        let (logits, cache) = forward_model(&w, &cfg.model, &inputs, &[CacheMode::Full; 2]).unwrap();
        let (_, dl) = cross_entropy(&logits, &targets).unwrap();
        let g = backward_model_exact(&w, &cfg.model, &cache, &dl).unwrap();
        for (id, m) in g.iter() {
            if id.layer().is_some() {
                assert!(m.is_zero(), "{id}");
            }
        }
    }

    #[test]
    fn oversized_model_is_rejected() {
        let mut cfg = GradCheckConfig::default();
        cfg.model.hidden = 64;
        cfg.model.heads = 4;
        assert!(matches!(check_gradients(&cfg), Err(Error::Config(_))));
    }
}
