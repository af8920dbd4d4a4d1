//! Per-scale feature extraction: sparse convolution stages over the pillar grid,
//! dense refinement of the last stage, and the concat + 1x1 fusion of the two.

use std::collections::HashSet;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Rulebook, Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

const EMPTY: u32 = u32::MAX;

/// Active-site layout of a sparse BEV map.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGeometry {
    pub h: usize,
    pub w: usize,
    coords: Vec<(usize, usize)>,
    sites: Rc<Vec<usize>>,
    lookup: Vec<u32>,
}

impl SparseGeometry {
    /// Active coordinates must be unique and inside `h x w`.
    pub fn new(h: usize, w: usize, coords: Vec<(usize, usize)>) -> Result<Self> {
        let mut lookup = vec![EMPTY; h * w];
        let mut sites = Vec::with_capacity(coords.len());
        for (i, &(r, c)) in coords.iter().enumerate() {
            if r >= h || c >= w {
                return Err(Error::Contract(format!("site ({}, {}) outside {}x{} grid", r, c, h, w)));
            }
            let s = r * w + c;
            if lookup[s] != EMPTY {
                return Err(Error::Contract(format!("duplicate active site ({}, {})", r, c)));
            }
            lookup[s] = i as u32;
            sites.push(s);
        }
        Ok(SparseGeometry {
            h,
            w,
            coords,
            sites: Rc::new(sites),
            lookup,
        })
    }

    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn index_of(&self, r: usize, c: usize) -> Option<usize> {
        if r >= self.h || c >= self.w {
            return None;
        }
        match self.lookup[r * self.w + c] {
            EMPTY => None,
            i => Some(i as usize),
        }
    }

    fn at(&self, r: isize, c: isize) -> Option<usize> {
        if r < 0 || c < 0 {
            return None;
        }
        self.index_of(r as usize, c as usize)
    }

    /// Rulebook for a submanifold convolution: outputs are exactly the active inputs.
    pub fn submanifold_rules(&self, k: usize) -> Rulebook {
        let half = (k / 2) as isize;
        let mut pairs = vec![Vec::new(); k * k];
        for (o, &(r, c)) in self.coords.iter().enumerate() {
            for kh in 0..k {
                for kw in 0..k {
                    let rr = r as isize + kh as isize - half;
                    let cc = c as isize + kw as isize - half;
                    if let Some(i) = self.at(rr, cc) {
                        pairs[kh * k + kw].push((i as u32, o as u32));
                    }
                }
            }
        }
        Rulebook {
            n_in: self.len(),
            n_out: self.len(),
            kernel_size: k,
            pairs,
        }
    }

    /// Output geometry and rulebook of a strided convolution with padding `k / 2`.
    ///
    /// An output site is active iff at least one active input lies in its receptive field.
    pub fn strided_rules(&self, k: usize, stride: usize) -> Result<(SparseGeometry, Rulebook)> {
        let pad = k / 2;
        if self.h + 2 * pad < k || self.w + 2 * pad < k {
            return Err(Error::dim("strided_sparse_conv", format!("kernel {} on {}x{} grid", k, self.h, self.w)));
        }
        let ho = (self.h + 2 * pad - k) / stride + 1;
        let wo = (self.w + 2 * pad - k) / stride + 1;
        let mut active = HashSet::new();
        for &(r, c) in &self.coords {
            for kh in 0..k {
                let num = r + pad;
                if num < kh || (num - kh) % stride != 0 {
                    continue;
                }
                let or = (num - kh) / stride;
                if or >= ho {
                    continue;
                }
                for kw in 0..k {
                    let numc = c + pad;
                    if numc < kw || (numc - kw) % stride != 0 {
                        continue;
                    }
                    let oc = (numc - kw) / stride;
                    if oc < wo {
                        active.insert((or, oc));
                    }
                }
            }
        }
        let mut out_coords: Vec<(usize, usize)> = active.into_iter().collect();
        out_coords.sort_unstable();
        let out = SparseGeometry::new(ho, wo, out_coords)?;
        let mut pairs = vec![Vec::new(); k * k];
        for (o, &(or, oc)) in out.coords.iter().enumerate() {
            for kh in 0..k {
                for kw in 0..k {
                    let r = (or * stride + kh) as isize - pad as isize;
                    let c = (oc * stride + kw) as isize - pad as isize;
                    if let Some(i) = self.at(r, c) {
                        pairs[kh * k + kw].push((i as u32, o as u32));
                    }
                }
            }
        }
        let rules = Rulebook {
            n_in: self.len(),
            n_out: out.len(),
            kernel_size: k,
            pairs,
        };
        Ok((out, rules))
    }
}

/// Sparse BEV map recorded on a tape: `features` is `[active sites, C]`.
#[derive(Clone, Debug)]
pub struct SparseVar {
    pub geom: Rc<SparseGeometry>,
    pub features: Var,
}

/// Sparse BEV map as a plain value.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseFeatureMap {
    pub geom: SparseGeometry,
    pub features: Tensor,
}

impl SparseFeatureMap {
    pub fn new(h: usize, w: usize, coords: Vec<(usize, usize)>, features: Tensor) -> Result<Self> {
        let geom = SparseGeometry::new(h, w, coords)?;
        if features.rank() != 2 || features.shape()[0] != geom.len() {
            return Err(Error::dim(
                "SparseFeatureMap::new",
                format!("features {:?} for {} sites", features.shape(), geom.len()),
            ));
        }
        Ok(SparseFeatureMap { geom, features })
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn on_tape(&self, tape: &mut Tape) -> SparseVar {
        SparseVar {
            geom: Rc::new(self.geom.clone()),
            features: tape.constant(self.features.clone()),
        }
    }

    pub fn from_tape(tape: &Tape, v: &SparseVar) -> Self {
        SparseFeatureMap {
            geom: (*v.geom).clone(),
            features: tape.value(v.features).clone(),
        }
    }

    /// Dense `[C, H, W]` with zeros at inactive sites.
    pub fn to_dense(&self) -> Tensor {
        let mut tape = Tape::new();
        let v = self.on_tape(&mut tape);
        let d = densify(&mut tape, &v).expect("consistent sparse map");
        tape.value(d).clone()
    }
}

pub fn densify(tape: &mut Tape, map: &SparseVar) -> Result<Var> {
    tape.densify(map.features, Rc::clone(&map.geom.sites), map.geom.h, map.geom.w)
}

fn check_odd(k: usize) -> Result<()> {
    if k % 2 == 0 {
        return Err(Error::dim("sparse_conv", format!("kernel size {} must be odd", k)));
    }
    Ok(())
}

/// Submanifold convolution: output sites equal input sites.
pub fn submanifold_sparse_conv(
    tape: &mut Tape,
    map: &SparseVar,
    kernel: Var,
    bias: Option<Var>,
) -> Result<SparseVar> {
    let k = tape.shape(kernel).get(2).copied().unwrap_or(0);
    check_odd(k)?;
    let rules = Rc::new(map.geom.submanifold_rules(k));
    let features = tape.sparse_conv(map.features, kernel, bias, rules)?;
    Ok(SparseVar {
        geom: Rc::clone(&map.geom),
        features,
    })
}

/// Downsampling sparse convolution with padding `k / 2`.
pub fn strided_sparse_conv(
    tape: &mut Tape,
    map: &SparseVar,
    kernel: Var,
    bias: Option<Var>,
    stride: usize,
) -> Result<SparseVar> {
    let k = tape.shape(kernel).get(2).copied().unwrap_or(0);
    check_odd(k)?;
    if stride < 2 {
        return Err(Error::Contract(format!("strided sparse conv needs stride >= 2, got {}", stride)));
    }
    let (geom, rules) = map.geom.strided_rules(k, stride)?;
    let features = tape.sparse_conv(map.features, kernel, bias, Rc::new(rules))?;
    Ok(SparseVar {
        geom: Rc::new(geom),
        features,
    })
}

fn relu_sparse(tape: &mut Tape, map: SparseVar) -> SparseVar {
    SparseVar {
        features: tape.relu(map.features),
        geom: map.geom,
    }
}

/// Hyperparameters of one pillar-size branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleBranchConfig {
    /// Pillar footprint in meters (square pillars).
    pub pillar_size: Real,
    pub stage_channels: Vec<usize>,
    /// Per-stage downsample factor; 1 means a submanifold stage.
    pub stage_strides: Vec<usize>,
    pub refine_depth: usize,
    pub refine_channels: usize,
    pub out_channels: usize,
}

impl ScaleBranchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.stage_strides.len() {
            return Err(Error::Config(format!(
                "branch at {} m: {} stage widths vs {} strides",
                self.pillar_size,
                self.stage_channels.len(),
                self.stage_strides.len()
            )));
        }
        if let Some(s) = self.stage_strides.iter().find(|s| !s.is_power_of_two()) {
            return Err(Error::Config(format!("stage stride {} is not a power of two", s)));
        }
        if !(self.pillar_size > 0.0) || self.out_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::Config("branch sizes must be positive".into()));
        }
        if self.refine_depth > 0 && self.refine_channels == 0 {
            return Err(Error::Config("refinement needs a positive width".into()));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.stage_strides.iter().product()
    }

    fn final_channels(&self) -> usize {
        *self.stage_channels.last().unwrap()
    }

    /// Channels of the refined map `C_i`.
    fn refined_channels(&self) -> usize {
        if self.refine_depth == 0 {
            self.final_channels()
        } else {
            self.refine_channels
        }
    }
}

/// Learned parameters of one branch.
#[derive(Clone, Debug)]
pub struct ScaleBranch {
    pub cfg: ScaleBranchConfig,
    stages: Vec<(ParamId, ParamId)>,
    refine: Vec<(ParamId, ParamId)>,
    fuse: (ParamId, ParamId),
}

impl ScaleBranch {
    pub fn new<R: Rng + ?Sized>(
        cfg: ScaleBranchConfig,
        in_channels: usize,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut c_in = in_channels;
        let mut stages = Vec::new();
        for (i, &c) in cfg.stage_channels.iter().enumerate() {
            stages.push(store.add_conv(&format!("{}.stage{}", prefix, i), c, c_in, 3, rng));
            c_in = c;
        }
        let mut refine = Vec::new();
        for i in 0..cfg.refine_depth {
            refine.push(store.add_conv(&format!("{}.refine{}", prefix, i), cfg.refine_channels, c_in, 3, rng));
            c_in = cfg.refine_channels;
        }
        let fuse = store.add_conv(
            &format!("{}.fuse", prefix),
            cfg.out_channels,
            cfg.final_channels() + cfg.refined_channels(),
            1,
            rng,
        );
        Ok(ScaleBranch {
            cfg,
            stages,
            refine,
            fuse,
        })
    }

    pub fn fuse_params(&self) -> (ParamId, ParamId) {
        self.fuse
    }
}

/// Run the sparse stages and dense refinement of one branch.
///
/// Returns the per-stage sparse outputs `S` (decreasing resolution) and the refined dense map `C`.
pub fn run_scale_branch(
    tape: &mut Tape,
    bev: &SparseVar,
    branch: &ScaleBranch,
    bound: &Bound,
) -> Result<(Vec<SparseVar>, Var)> {
    let in_c = tape.shape(bev.features).get(1).copied().unwrap_or(0);
    let first_kernel = bound.var(branch.stages[0].0);
    if tape.shape(first_kernel)[1] != in_c {
        return Err(Error::Config(format!(
            "branch expects {} input channels, BEV map has {}",
            tape.shape(first_kernel)[1],
            in_c
        )));
    }
    let mut stages = Vec::with_capacity(branch.stages.len());
    let mut current = bev.clone();
    for (&(kid, bid), &stride) in branch.stages.iter().zip(&branch.cfg.stage_strides) {
        let (kv, bv) = (bound.var(kid), bound.var(bid));
        let out = if stride == 1 {
            submanifold_sparse_conv(tape, &current, kv, Some(bv))?
        } else {
            strided_sparse_conv(tape, &current, kv, Some(bv), stride)?
        };
        current = relu_sparse(tape, out);
        stages.push(current.clone());
    }
    let mut refined = densify(tape, &current)?;
    for &(kid, bid) in &branch.refine {
        let y = tape.conv2d(refined, bound.var(kid), Some(bound.var(bid)), 1, 1)?;
        refined = tape.relu(y);
    }
    Ok((stages, refined))
}

/// `F_i`: concatenate the densified final sparse stage with `C` and apply a 1x1 conv.
pub fn fuse_scale(tape: &mut Tape, s_final: &SparseVar, c: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
    let cs = tape.shape(c).to_vec();
    if cs.len() != 3 || cs[1] != s_final.geom.h || cs[2] != s_final.geom.w {
        return Err(Error::dim(
            "fuse_scale",
            format!(
                "refined map {:?} is not aligned with sparse map {}x{}",
                cs, s_final.geom.h, s_final.geom.w
            ),
        ));
    }
    let s_dense = densify(tape, s_final)?;
    let cat = tape.concat(&[s_dense, c])?;
    tape.conv2d(cat, kernel, bias, 1, 0)
}
