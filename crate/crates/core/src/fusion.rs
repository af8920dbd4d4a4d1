//! Cross-scale alignment and per-location attention fusion.
//!
//! Every per-scale map is resampled onto the reference grid, a shared 1x1 conv
//! over the concatenated maps produces one logit per scale and location, and the
//! softmax of those logits weights a convex combination of the maps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, UpsampleMode, Var};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Index of the map whose grid every other map is resampled onto.
    pub reference: usize,
    pub mode: UpsampleMode,
    /// Width of the hidden 1x1 layer producing scale logits; 0 maps straight to logits.
    pub hidden: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            reference: 0,
            mode: UpsampleMode::Bilinear,
            hidden: 0,
        }
    }
}

/// Resample every map to the reference map's spatial dims. Maps already there pass through.
pub fn align_scales(tape: &mut Tape, maps: &[Var], cfg: &FusionConfig) -> Result<Vec<Var>> {
    let reference = *maps
        .get(cfg.reference)
        .ok_or_else(|| Error::Config(format!("reference scale {} of {} maps", cfg.reference, maps.len())))?;
    let rs = tape.shape(reference).to_vec();
    if rs.len() != 3 {
        return Err(Error::dim("align_scales", format!("reference map {:?} is not [C, H, W]", rs)));
    }
    let mut out = Vec::with_capacity(maps.len());
    for &m in maps {
        let s = tape.shape(m).to_vec();
        if s.len() != 3 || s[0] != rs[0] {
            return Err(Error::dim(
                "align_scales",
                format!("map {:?} does not share channels with reference {:?}", s, rs),
            ));
        }
        if s[1..] == rs[1..] {
            out.push(m);
        } else {
            out.push(tape.resample(m, rs[1], rs[2], cfg.mode)?);
        }
    }
    Ok(out)
}

/// Parameters producing per-location scale logits.
#[derive(Clone, Debug)]
pub struct AttentionFusion {
    pub cfg: FusionConfig,
    pub scales: usize,
    layers: Vec<(ParamId, ParamId)>,
}

impl AttentionFusion {
    pub fn new<R: Rng + ?Sized>(
        cfg: FusionConfig,
        scales: usize,
        channels: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if scales == 0 {
            return Err(Error::Contract("attention fusion over zero scales".into()));
        }
        if cfg.reference >= scales {
            return Err(Error::Config(format!("reference scale {} of {}", cfg.reference, scales)));
        }
        let mut layers = Vec::new();
        let cat = scales * channels;
        if cfg.hidden > 0 {
            layers.push(store.add_conv("fusion.hidden", cfg.hidden, cat, 1, rng));
            layers.push(store.add_conv("fusion.logits", scales, cfg.hidden, 1, rng));
        } else {
            layers.push(store.add_conv("fusion.logits", scales, cat, 1, rng));
        }
        Ok(AttentionFusion { cfg, scales, layers })
    }

    pub fn layer_params(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }
}

/// Fused map `F = sum_j w_j * F_j` and the weights `[n, H, W]`.
pub fn attention_fuse(
    tape: &mut Tape,
    aligned: &[Var],
    fusion: &AttentionFusion,
    bound: &Bound,
) -> Result<(Var, Var)> {
    if aligned.is_empty() {
        return Err(Error::Contract("attention fusion over zero maps".into()));
    }
    if aligned.len() != fusion.scales {
        return Err(Error::Contract(format!(
            "fusion built for {} scales, got {} maps",
            fusion.scales,
            aligned.len()
        )));
    }
    let s0 = tape.shape(aligned[0]).to_vec();
    if aligned.iter().any(|&m| tape.shape(m) != s0.as_slice()) {
        return Err(Error::dim("attention_fuse", "aligned maps differ in shape"));
    }
    let mut x = tape.concat(aligned)?;
    let last = fusion.layers.len() - 1;
    for (i, &(k, b)) in fusion.layers.iter().enumerate() {
        x = tape.conv2d(x, bound.var(k), Some(bound.var(b)), 1, 0)?;
        if i < last {
            x = tape.relu(x);
        }
    }
    let weights = tape.softmax(x, 0)?;
    weighted_sum(tape, aligned, weights).map(|f| (f, weights))
}

/// `sum_j weights[j] * maps[j]` with `weights: [n, H, W]` broadcast over channels.
pub fn weighted_sum(tape: &mut Tape, maps: &[Var], weights: Var) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (j, &m) in maps.iter().enumerate() {
        let w = tape.select(weights, j)?;
        let term = tape.mul(m, w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    acc.ok_or_else(|| Error::Contract("weighted sum of zero maps".into()))
}
