//! Finite-difference verification of every differentiable op.
//!
//! Each check projects an op's output onto a fixed random tensor to get a scalar,
//! runs `backward`, and compares every input gradient with central differences.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{fuse_scale, strided_sparse_conv, submanifold_sparse_conv, SparseGeometry, SparseVar};
use crate::detection_head::{build_targets, detection_loss_graph, Box3D, HeadGrid};
use crate::error::{Error, Result};
use crate::fusion::{align_scales, attention_fuse, AttentionFusion, FusionConfig};
use crate::numerics::{finite_difference_grad, relative_error, Real, Tape, Tensor, UpsampleMode, Var};
use crate::params::{Bound, ParamStore};
use crate::pillar_encoder::{assign_pillars, encode_pillars, PillarGridSpec, PointCloud};

pub const FD_EPS: Real = 1e-5;
pub const MAX_REL_ERROR: Real = 1e-4;

/// Every op name accepted by [`check_op`].
pub const OPS: &[&str] = &[
    "matmul",
    "add",
    "mul",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "conv2d",
    "max_pool2d",
    "bilinear_upsample",
    "nearest_upsample",
    "resample",
    "concat",
    "select",
    "segment_max",
    "densify",
    "submanifold_sparse_conv",
    "strided_sparse_conv",
    "pillar_encode",
    "fuse_scale",
    "attention_fusion",
    "focal_loss",
    "masked_l1",
    "detection_loss",
];

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: String,
    pub max_rel_error: Real,
    /// Number of (shape, seed) cases checked.
    pub cases: usize,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < MAX_REL_ERROR
    }
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn scalar_of(tape: &mut Tape, out: Var, proj: &Tensor) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return Ok(out);
    }
    let p = tape.constant(proj.clone());
    let prod = tape.mul(out, p)?;
    Ok(tape.sum(prod))
}

/// Max relative error between backward and central differences over all inputs.
pub fn check_gradients(inputs: &[Tensor], build: &Build<'_>, seed: u64) -> Result<Real> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let proj = Tensor::uniform(tape.shape(out), -1.0, 1.0, &mut rng);
    let loss = scalar_of(&mut tape, out, &proj)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
        .collect();

    let mut worst: Real = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let f = |x: &Tensor| -> Real {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, v)| t.constant(if j == i { x.clone() } else { v.clone() }))
                .collect();
            let o = build(&mut t, &vs).expect("op succeeded once already");
            let l = scalar_of(&mut t, o, &proj).expect("projection");
            t.value(l).item()
        };
        let numeric = finite_difference_grad(f, input, FD_EPS);
        let e = relative_error(&analytic[i], &numeric);
        if e.is_nan() {
            return Ok(Real::NAN);
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Standard normals pushed at least `gap` away from zero (keeps ReLU/abs kinks out of the FD stencil).
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: Real) -> Tensor {
    randn(rng, shape).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

/// Distinct values spaced 0.1 apart, shuffled (no ties for max ops).
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<Real> = (0..n).map(|i| i as Real * 0.1 - n as Real * 0.05).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn random_sites(rng: &mut ChaCha8Rng, h: usize, w: usize, n: usize) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
    all.shuffle(rng);
    all.truncate(n);
    all.sort_unstable();
    all
}

/// Run one op's cases (three shapes) for a given seed.
pub fn check_op(op: &str, seed: u64) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x5851_f42d_4c95_7f2d).wrapping_add(op.len() as u64));
    let mut worst: Real = 0.0;
    let mut cases = 0;
    let mut run = |inputs: Vec<Tensor>, build: &Build<'_>| -> Result<()> {
        let e = check_gradients(&inputs, build, seed)?;
        worst = if e.is_nan() { Real::NAN } else { worst.max(e) };
        cases += 1;
        Ok(())
    };
    match op {
        "matmul" => {
            for (m, k, n) in [(2, 3, 4), (1, 5, 1), (4, 4, 2)] {
                run(vec![randn(&mut rng, &[m, k]), randn(&mut rng, &[k, n])], &|t, v| t.matmul(v[0], v[1]))?;
            }
        }
        "add" | "mul" => {
            for (a, b) in [(vec![3, 4], vec![4]), (vec![2, 3, 4], vec![3, 4]), (vec![5], vec![5])] {
                let ins = vec![randn(&mut rng, &a), randn(&mut rng, &b)];
                if op == "add" {
                    run(ins, &|t, v| t.add(v[0], v[1]))?;
                } else {
                    run(ins, &|t, v| t.mul(v[0], v[1]))?;
                }
            }
        }
        "relu" | "sigmoid" | "exp" | "log" => {
            for shape in [vec![7], vec![3, 4], vec![2, 3, 3]] {
                let x = match op {
                    "relu" => away_from_zero(&mut rng, &shape, 0.05),
                    "log" => Tensor::uniform(&shape, 0.2, 3.0, &mut rng),
                    _ => randn(&mut rng, &shape),
                };
                let f: &Build<'_> = match op {
                    "relu" => &|t, v| Ok(t.relu(v[0])),
                    "sigmoid" => &|t, v| Ok(t.sigmoid(v[0])),
                    "exp" => &|t, v| Ok(t.exp(v[0])),
                    _ => &|t, v| Ok(t.log(v[0])),
                };
                run(vec![x], f)?;
            }
        }
        "softmax" => {
            for (shape, axis) in [(vec![5], 0), (vec![3, 4], 1), (vec![3, 2, 4], 0)] {
                run(vec![randn(&mut rng, &shape)], &move |t, v| t.softmax(v[0], axis))?;
            }
        }
        "conv2d" => {
            for (ci, h, w, co, k, s, p) in [(2, 5, 5, 3, 3, 1, 1), (1, 6, 7, 2, 3, 2, 1), (3, 4, 4, 2, 1, 1, 0), (2, 5, 6, 2, 5, 1, 0)] {
                let ins = vec![
                    randn(&mut rng, &[ci, h, w]),
                    randn(&mut rng, &[co, ci, k, k]),
                    randn(&mut rng, &[co]),
                ];
                run(ins, &move |t, v| t.conv2d(v[0], v[1], Some(v[2]), s, p))?;
            }
        }
        "max_pool2d" => {
            for (shape, k, s, p) in [(vec![2, 4, 4], 2, 2, 0), (vec![1, 5, 5], 3, 1, 1), (vec![3, 6, 6], 3, 2, 1)] {
                run(vec![distinct(&mut rng, &shape)], &move |t, v| t.max_pool2d(v[0], k, s, p))?;
            }
        }
        "bilinear_upsample" | "nearest_upsample" => {
            for (shape, f) in [(vec![1, 2, 2], 2), (vec![2, 3, 2], 3), (vec![3, 2, 3], 2)] {
                let x = randn(&mut rng, &shape);
                if op == "bilinear_upsample" {
                    run(vec![x], &move |t, v| t.upsample_bilinear(v[0], f))?;
                } else {
                    run(vec![x], &move |t, v| t.upsample_nearest(v[0], f))?;
                }
            }
        }
        "resample" => {
            for (shape, oh, ow, mode) in [
                (vec![2, 4, 4], 6, 6, UpsampleMode::Bilinear),
                (vec![1, 6, 6], 4, 4, UpsampleMode::Bilinear),
                (vec![2, 3, 5], 5, 7, UpsampleMode::Nearest),
            ] {
                run(vec![randn(&mut rng, &shape)], &move |t, v| t.resample(v[0], oh, ow, mode))?;
            }
        }
        "concat" => {
            for (a, b) in [(vec![2, 3], vec![1, 3]), (vec![1, 2, 2], vec![3, 2, 2]), (vec![4], vec![2])] {
                run(vec![randn(&mut rng, &a), randn(&mut rng, &b)], &|t, v| t.concat(&[v[0], v[1]]))?;
            }
        }
        "select" => {
            for (shape, idx) in [(vec![3, 4], 1), (vec![2, 2, 3], 0), (vec![5, 2], 4)] {
                run(vec![randn(&mut rng, &shape)], &move |t, v| t.select(v[0], idx))?;
            }
        }
        "segment_max" => {
            for offsets in [vec![0, 3, 4, 8], vec![0, 1], vec![0, 2, 5, 6, 9]] {
                let n = *offsets.last().unwrap();
                let x = distinct(&mut rng, &[n, 3]);
                run(vec![x], &move |t, v| t.segment_max(v[0], &offsets))?;
            }
        }
        "densify" => {
            for (h, w, n, c) in [(4, 4, 5, 2), (3, 6, 1, 3), (5, 5, 12, 1)] {
                let sites = Rc::new(random_sites(&mut rng, h, w, n).into_iter().map(|(r, q)| r * w + q).collect::<Vec<_>>());
                run(vec![randn(&mut rng, &[n, c])], &move |t, v| t.densify(v[0], Rc::clone(&sites), h, w))?;
            }
        }
        "submanifold_sparse_conv" | "strided_sparse_conv" => {
            for (h, w, n, ci, co) in [(6, 6, 10, 2, 3), (8, 5, 14, 3, 2), (7, 7, 6, 1, 4)] {
                let coords = random_sites(&mut rng, h, w, n);
                let geom = Rc::new(SparseGeometry::new(h, w, coords)?);
                let ins = vec![randn(&mut rng, &[n, ci]), randn(&mut rng, &[co, ci, 3, 3]), randn(&mut rng, &[co])];
                let strided = op == "strided_sparse_conv";
                run(ins, &move |t, v| {
                    let m = SparseVar {
                        geom: Rc::clone(&geom),
                        features: v[0],
                    };
                    let out = if strided {
                        strided_sparse_conv(t, &m, v[1], Some(v[2]), 2)?
                    } else {
                        submanifold_sparse_conv(t, &m, v[1], Some(v[2]))?
                    };
                    Ok(out.features)
                })?;
            }
        }
        "pillar_encode" => {
            for (npts, extent, e) in [(12, 2.0, 3), (30, 1.0, 4), (8, 3.0, 2)] {
                let pts: Vec<Real> = (0..npts)
                    .flat_map(|_| {
                        [
                            rng.gen_range(0.0..extent),
                            rng.gen_range(0.0..extent),
                            rng.gen_range(-0.5..2.0),
                            rng.gen_range(0.0..1.0),
                        ]
                    })
                    .collect();
                let cloud = PointCloud::new(4, pts, "gc", 0)?;
                let spec = PillarGridSpec {
                    x_range: (0.0, extent),
                    y_range: (0.0, extent),
                    pillar_size: (0.5, 0.5),
                    max_points_per_pillar: 4,
                    max_pillars: 64,
                    feature_dim: e,
                };
                let scene = assign_pillars(&cloud, &spec, seed)?;
                run(vec![randn(&mut rng, &[6, e])], &move |t, v| encode_pillars(t, &scene, v[0]))?;
            }
        }
        "fuse_scale" => {
            for (h, w, n, cs, cc, co) in [(4, 4, 6, 2, 3, 2), (3, 5, 4, 1, 2, 3), (5, 5, 10, 3, 1, 2)] {
                let coords = random_sites(&mut rng, h, w, n);
                let geom = Rc::new(SparseGeometry::new(h, w, coords)?);
                let ins = vec![
                    randn(&mut rng, &[n, cs]),
                    randn(&mut rng, &[cc, h, w]),
                    randn(&mut rng, &[co, cs + cc, 1, 1]),
                    randn(&mut rng, &[co]),
                ];
                run(ins, &move |t, v| {
                    let s = SparseVar {
                        geom: Rc::clone(&geom),
                        features: v[0],
                    };
                    fuse_scale(t, &s, v[1], v[2], Some(v[3]))
                })?;
            }
        }
        "attention_fusion" => {
            for (dims, c, hidden, mode) in [
                (vec![(4, 4), (2, 2)], 2, 0, UpsampleMode::Bilinear),
                (vec![(6, 6), (4, 4)], 1, 3, UpsampleMode::Bilinear),
                (vec![(3, 3), (3, 3), (1, 1)], 2, 0, UpsampleMode::Nearest),
            ] {
                let cfg = FusionConfig {
                    reference: 0,
                    mode,
                    hidden,
                };
                let mut store = ParamStore::new();
                let fusion = AttentionFusion::new(cfg.clone(), dims.len(), c, &mut store, &mut rng)?;
                let n_maps = dims.len();
                let mut ins: Vec<Tensor> = dims.iter().map(|&(h, w)| randn(&mut rng, &[c, h, w])).collect();
                ins.extend(store.values().iter().map(|p| p.map(|v| v + 0.3)));
                run(ins, &move |t, v| {
                    let maps = &v[..n_maps];
                    let params = &v[n_maps..];
                    let aligned = align_scales(t, maps, &cfg)?;
                    let bound = Bound::from_vars(params.to_vec());
                    attention_fuse(t, &aligned, &fusion, &bound).map(|(f, _)| f)
                })?;
            }
        }
        "focal_loss" => {
            for (c, h, w) in [(1, 4, 4), (2, 3, 5), (1, 6, 6)] {
                let logits = Tensor::uniform(&[c, h, w], -4.0, 4.0, &mut rng);
                let target = Tensor::uniform(&[c, h, w], 0.0, 0.95, &mut rng).map(|v| if v > 0.8 { 1.0 } else { v });
                run(vec![logits], &move |t, v| t.focal_loss(v[0], &target, 2.0, 4.0))?;
            }
        }
        "masked_l1" => {
            for (r, h, w) in [(2, 3, 3), (8, 4, 4), (1, 5, 2)] {
                let target = randn(&mut rng, &[r, h, w]);
                let mask = Tensor::uniform(&[h, w], 0.0, 1.0, &mut rng).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
                let offset = away_from_zero(&mut rng, &[r, h, w], 0.05);
                let pred = Tensor::new(
                    vec![r, h, w],
                    target.data().iter().zip(offset.data()).map(|(a, b)| a + b).collect(),
                )?;
                run(vec![pred], &move |t, v| t.masked_l1(v[0], &target, &mask))?;
            }
        }
        "detection_loss" => {
            for (h, w, n) in [(8, 8, 2), (6, 10, 1), (10, 10, 3)] {
                let grid = HeadGrid::covering((0.0, h as Real * 0.4), (0.0, w as Real * 0.4), (h, w));
                let anns: Vec<Box3D> = (0..n)
                    .map(|_| {
                        Box3D::new(
                            [rng.gen_range(0.2..h as Real * 0.4 - 0.2), rng.gen_range(0.2..w as Real * 0.4 - 0.2), 0.9],
                            [0.6, 0.5, 1.7],
                            rng.gen_range(-3.0..3.0),
                            0,
                        )
                    })
                    .collect();
                let targets = build_targets(&anns, &grid, 1);
                let logits = Tensor::uniform(&[1, h, w], -4.0, 4.0, &mut rng);
                let reg = targets.regression.map(|v| v + 0.5);
                let reg = Tensor::new(
                    reg.shape().to_vec(),
                    reg.data().iter().zip(away_from_zero(&mut rng, reg.shape(), 0.05).data()).map(|(a, b)| a + 0.1 * b).collect(),
                )?;
                run(vec![logits, reg], &move |t, v| detection_loss_graph(t, v[0], v[1], &targets))?;
            }
        }
        other => return Err(Error::Contract(format!("unknown gradcheck op {}", other))),
    }
    Ok(OpReport {
        op: op.to_string(),
        max_rel_error: worst,
        cases,
    })
}

/// Run `ops` over `seeds`, merging per-op results.
pub fn run(ops: &[&str], seeds: &[u64]) -> Result<Vec<OpReport>> {
    let mut out = Vec::new();
    for &op in ops {
        let mut merged = OpReport {
            op: op.to_string(),
            max_rel_error: 0.0,
            cases: 0,
        };
        for &s in seeds {
            let r = check_op(op, s)?;
            merged.max_rel_error = if r.max_rel_error.is_nan() {
                Real::NAN
            } else {
                merged.max_rel_error.max(r.max_rel_error)
            };
            merged.cases += r.cases;
        }
        out.push(merged);
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_on_one_seed() {
        for r in run(OPS, &[3]).unwrap() {
            assert!(r.passed(), "{} max rel error {}", r.op, r.max_rel_error);
            assert_eq!(r.cases >= 3, true, "{}", r.op);
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // ReLU probed exactly at its kink: FD sees slope 0.5, backward sees 0 or 1
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let e = check_gradients(&[x], &|t, v| Ok(t.relu(v[0])), 0).unwrap();
        assert!(e > MAX_REL_ERROR);
    }

    #[test]
    fn unknown_op_is_rejected() {
        assert!(check_op("warp", 0).is_err());
    }
}
