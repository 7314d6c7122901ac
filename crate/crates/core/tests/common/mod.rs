//! Explicit-loop oracles and helpers shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sipl::ipl::{instance_proposals, predict_masks, Pooling};
use sipl::numerics::{Graph, Interpolation, Mhsa, ParamStore, Tensor};
use sipl::smg::{aggregate_masks, update_queries};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Random row-stochastic `[rows, cols]`.
pub fn rand_stochastic(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = rand_tensor(rng, &[rows, cols], 0.01, 1.0);
    for r in t.data_mut().chunks_exact_mut(cols) {
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= s);
    }
    t
}

/// Every `[x, y, z]` with `x * y * z == p`.
pub fn grids(p: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for x in 1..=p {
        for y in 1..=p {
            if p.is_multiple_of(x * y) {
                out.push([x, y, p / (x * y)]);
            }
        }
    }
    out
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// `softmax_rows(m_pc . m_cc)`.
pub fn aggregate(m_pc: &Tensor, m_cc: &Tensor) -> Vec<f64> {
    let (p, n) = m_pc.rows_cols();
    let (_, c) = m_cc.rows_cols();
    let z = matmul(m_pc.data(), m_cc.data(), p, n, c);
    let mut out = vec![0.0; p * c];
    for r in 0..p {
        let row = &z[r * c..(r + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        for k in 0..c {
            out[r * c + k] = e[k] / s;
        }
    }
    out
}

/// Sum of the features of the pixels each active cluster wins under
/// `f . q^T`, ties to the lower index.
pub fn assignment_term(q: &Tensor, f: &Tensor, active: &[bool]) -> Vec<f64> {
    let (n, d) = q.rows_cols();
    let (p, _) = f.rows_cols();
    let mut out = vec![0.0; n * d];
    for px in 0..p {
        let mut best: Option<(usize, f64)> = None;
        for c in 0..n {
            if !active[c] {
                continue;
            }
            let mut s = 0.0;
            for t in 0..d {
                s += f.data()[px * d + t] * q.data()[c * d + t];
            }
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((c, s));
            }
        }
        let (c, _) = best.unwrap();
        for t in 0..d {
            out[c * d + t] += f.data()[px * d + t];
        }
    }
    out
}

/// Mass-normalised pooling `sum(M_k F) / sum(M_k)` over foreground columns,
/// plain average when the mass is below 1e-8.
pub fn proposals(f: &Tensor, mask: &Tensor) -> Vec<f64> {
    let (p, d) = f.rows_cols();
    let (_, k1) = mask.rows_cols();
    let mut out = vec![0.0; (k1 - 1) * d];
    for k in 0..k1 - 1 {
        let mass: f64 = (0..p).map(|v| mask.data()[v * k1 + k]).sum();
        for t in 0..d {
            let mut s = 0.0;
            for v in 0..p {
                let w = if mass < 1e-8 { 1.0 } else { mask.data()[v * k1 + k] };
                s += w * f.data()[v * d + t];
            }
            out[k * d + t] = s / if mass < 1e-8 { p as f64 } else { mass };
        }
    }
    out
}

/// `sigmoid(f . g_k)` per voxel and class.
pub fn predict(f: &Tensor, g: &Tensor) -> Vec<f64> {
    let (p, d) = f.rows_cols();
    let (k, _) = g.rows_cols();
    let mut out = vec![0.0; p * k];
    for v in 0..p {
        for c in 0..k {
            let mut s = 0.0;
            for t in 0..d {
                s += f.data()[v * d + t] * g.data()[c * d + t];
            }
            out[v * k + c] = 1.0 / (1.0 + (-s).exp());
        }
    }
    out
}

/// Aligned-corner trilinear resize by direct 8-corner weighting.
pub fn trilinear(x: &Tensor, dst: [usize; 3]) -> Tensor {
    let s = x.shape().to_vec();
    let (src, c) = ([s[0], s[1], s[2]], s[3]);
    let coord = |i: usize, n_in: usize, n_out: usize| {
        if n_out == 1 {
            (n_in as f64 - 1.0) / 2.0
        } else {
            i as f64 * (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
        }
    };
    let mut out = Tensor::zeros([dst[0], dst[1], dst[2], c]);
    for i in 0..dst[0] {
        for j in 0..dst[1] {
            for l in 0..dst[2] {
                let u = [
                    coord(i, src[0], dst[0]),
                    coord(j, src[1], dst[1]),
                    coord(l, src[2], dst[2]),
                ];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for corner in 0..8 {
                        let mut w = 1.0;
                        let mut idx = [0usize; 3];
                        for a in 0..3 {
                            let lo = (u[a].floor() as usize).min(src[a] - 1);
                            let hi = (lo + 1).min(src[a] - 1);
                            let t = u[a] - lo as f64;
                            let bit = (corner >> a) & 1;
                            idx[a] = if bit == 1 { hi } else { lo };
                            w *= if bit == 1 { t } else { 1.0 - t };
                        }
                        acc += w * x.at(&[idx[0], idx[1], idx[2], ch]);
                    }
                    let o = out.offset(&[i, j, l, ch]);
                    out.data_mut()[o] = acc;
                }
            }
        }
    }
    out
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Exhaustive oracle sweep over P <= 8, N <= 4, K <= 3. Returns the largest
/// deviation per operation: aggregate, assignment, proposals, predict.
pub fn oracle_sweep() -> [f64; 4] {
    let mut worst = [0.0f64; 4];
    let mut r = rng(2024);
    for p in 1..=8 {
        for n in 1..=4 {
            for k in 1..=3 {
                let d = 4;
                let mut g = Graph::new();
                // aggregate_masks
                let m_pc = rand_tensor(&mut r, &[p, n], -2.0, 2.0);
                let m_cc = rand_tensor(&mut r, &[n, k + 1], -2.0, 2.0);
                let a = g.constant(m_pc.clone());
                let b = g.constant(m_cc.clone());
                let m = aggregate_masks(&mut g, a, b).unwrap();
                worst[0] = worst[0].max(max_diff(g.value(m).data(), &aggregate(&m_pc, &m_cc)));

                // assignment term of update_queries, with attention zeroed
                let mut store = ParamStore::new();
                let attn = Mhsa::new(&mut store, "attn", d, 2, 0).unwrap();
                store.zero_all();
                g.bind(&store);
                let q = rand_tensor(&mut r, &[n, d], -1.0, 1.0);
                let f = rand_tensor(&mut r, &[p, d], -1.0, 1.0);
                let mut active: Vec<bool> = (0..n).map(|_| r.random_bool(0.6)).collect();
                if !active.contains(&true) {
                    active[r.random_range(0..n)] = true;
                }
                let qv = g.constant(q.clone());
                let fv = g.constant(f.clone());
                let (upd, _) = update_queries(&mut g, &attn, qv, fv, &active).unwrap();
                worst[1] = worst[1].max(max_diff(g.value(upd).data(), &assignment_term(&q, &f, &active)));

                for grid in grids(p) {
                    // instance_proposals, mask on the feature grid
                    let f4 = rand_tensor(&mut r, &[grid[0], grid[1], grid[2], d], -1.0, 1.0);
                    let mut mask = rand_stochastic(&mut r, p, k + 1);
                    if r.random_bool(0.2) {
                        // an empty class exercises the plain-average fallback
                        let c = r.random_range(0..k);
                        for v in 0..p {
                            mask.data_mut()[v * (k + 1) + c] = 0.0;
                        }
                    }
                    let fv = g.constant(f4.clone());
                    let mv = g.constant(mask.reshape([grid[0], grid[1], grid[2], k + 1]).unwrap());
                    let pr =
                        instance_proposals(&mut g, fv, mv, Pooling::MassNormalized, Interpolation::Trilinear).unwrap();
                    let flat = f4.reshape([p, d]).unwrap();
                    worst[2] = worst[2].max(max_diff(g.value(pr).data(), &proposals(&flat, &mask)));

                    // predict_masks
                    let proto = rand_tensor(&mut r, &[k, d], -1.0, 1.0);
                    let pv = g.constant(proto.clone());
                    let y = predict_masks(&mut g, fv, pv).unwrap();
                    worst[3] = worst[3].max(max_diff(g.value(y).data(), &predict(&flat, &proto)));
                }
            }
        }
    }
    worst
}
