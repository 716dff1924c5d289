//! Independent reference implementations shared by the integration tests.
//!
//! Nothing here calls the library's numeric kernels: vectors are plain
//! `Vec<Vec<f64>>` and every operation is written out directly.

#![allow(dead_code, clippy::needless_range_loop)]

pub mod criteria;

use idinject::lora::{ParamId, ParamStore, ReparamLinear};
use idinject::mm_attention::{MmAttentionBlock, StreamWeights};
use idinject::rope3d::RopeIndex;
use idinject::{Rng, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

fn param(store: &ParamStore, id: ParamId) -> Mat {
    to_mat(store.get(id))
}

/// `x Wᵀ + b + s · (x Dᵀ) Uᵀ`, one output row per input row.
pub fn linear(store: &ParamStore, layer: &ReparamLinear, x: &Mat) -> Mat {
    let w = param(store, layer.weight);
    let b = layer.bias.map(|b| store.get(b).data().to_vec());
    let lora = layer.adapter.as_ref().map(|a| (param(store, a.down), param(store, a.up), a.scale));
    x.iter()
        .map(|row| {
            (0..w.len())
                .map(|o| {
                    let mut acc: f64 = w[o].iter().zip(row).map(|(p, q)| p * q).sum();
                    if let Some(b) = &b {
                        acc += b[o];
                    }
                    if let Some((down, up, s)) = &lora {
                        for r in 0..down.len() {
                            let h: f64 = down[r].iter().zip(row).map(|(p, q)| p * q).sum();
                            acc += s * up[o][r] * h;
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn rms(x: &Mat) -> Mat {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let denom = (ms + 1e-6).sqrt();
            row.iter().map(|v| v / denom).collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Rotates each head of each row by the angles of its position; pairs are
/// adjacent elements, the head split into `(t, y, x)` chunks of sizes `part`.
pub fn rope(x: &Mat, idx: &[RopeIndex], heads: usize, part: (usize, usize, usize), theta: f64) -> Mat {
    let hd = part.0 + part.1 + part.2;
    x.iter()
        .zip(idx)
        .map(|(row, p)| {
            let mut out = row.clone();
            for h in 0..heads {
                let mut offset = h * hd;
                for (pos, d) in [(p.t, part.0), (p.y, part.1), (p.x, part.2)] {
                    for j in 0..d / 2 {
                        let ang = pos as f64 / theta.powf(2.0 * j as f64 / d as f64);
                        let (a, b) = (row[offset + 2 * j], row[offset + 2 * j + 1]);
                        out[offset + 2 * j] = a * ang.cos() - b * ang.sin();
                        out[offset + 2 * j + 1] = a * ang.sin() + b * ang.cos();
                    }
                    offset += d;
                }
            }
            out
        })
        .collect()
}

/// Softmax attention, per head, of every query over every key.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let width = q[0].len();
    let hd = width / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![vec![0.0; width]; q.len()];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> =
                k.iter().map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() * scale).collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, vj) in v.iter().enumerate() {
                for c in cols.clone() {
                    out[i][c] += e[j] / z * vj[c];
                }
            }
        }
    }
    out
}

fn ffn(store: &ParamStore, w: &StreamWeights, x: &Mat) -> Mat {
    let h = linear(store, &w.ffn.fc_in, x);
    let h: Mat = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    linear(store, &w.ffn.fc_out, &h)
}

/// Two-stream block computed as one attention over the concatenated streams.
pub fn mm_block(
    store: &ParamStore,
    block: &MmAttentionBlock,
    xv: &Mat,
    xt: &Mat,
    rv: &[RopeIndex],
    rt: &[RopeIndex],
) -> (Mat, Mat) {
    let heads = block.cfg.heads;
    let part = block.rope.partition();
    let theta = block.rope.theta();
    let proj = |w: &StreamWeights, x: &Mat, r: &[RopeIndex]| {
        let h = rms(x);
        let q = rope(&linear(store, &w.q, &h), r, heads, part, theta);
        let k = rope(&linear(store, &w.k, &h), r, heads, part, theta);
        (q, k, linear(store, &w.v, &h))
    };
    let (qv, kv, vv) = proj(&block.v_stream, xv, rv);
    let (qt, kt, vt) = proj(&block.t_stream, xt, rt);
    let cat = |a: Mat, b: Mat| a.into_iter().chain(b).collect::<Mat>();
    let att = attention(&cat(qv, qt), &cat(kv, kt), &cat(vv, vt), heads);
    let (att_v, att_t) = att.split_at(xv.len());
    let finish = |w: &StreamWeights, x: &Mat, a: &[Vec<f64>]| {
        let x1 = add(x, &linear(store, &w.out, &a.to_vec()));
        add(&x1, &ffn(store, w, &rms(&x1)))
    };
    (finish(&block.v_stream, xv, att_v), finish(&block.t_stream, xt, att_t))
}

/// Maximum clique by enumerating every vertex subset; ties go to the
/// lexicographically smallest ascending member list.
pub fn brute_max_clique(adj: &[Vec<bool>]) -> Vec<usize> {
    let n = adj.len();
    assert!(n <= 20);
    let masks: Vec<u32> =
        (0..n).map(|i| (0..n).filter(|&j| adj[i][j]).fold(0u32, |m, j| m | (1 << j))).collect();
    let mut best: Vec<usize> = Vec::new();
    for s in 1u32..(1u32 << n) {
        let members: Vec<usize> = (0..n).filter(|&i| s & (1 << i) != 0).collect();
        if members.len() < best.len() {
            continue;
        }
        let clique = members.iter().all(|&i| (s & !(1 << i)) & !masks[i] == 0);
        if clique && (members.len() > best.len() || members < best) {
            best = members;
        }
    }
    best
}

pub fn random_graph(rng: &mut Rng, n: usize, density: f64) -> Vec<Vec<bool>> {
    let mut adj = vec![vec![false; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let e = rng.uniform() < density;
            adj[i][j] = e;
            adj[j][i] = e;
        }
    }
    adj
}

/// Overwrites every trainable parameter with `N(0, std²)` noise so that
/// zero-initialized paths carry gradient.
pub fn randomize_trainable(store: &mut ParamStore, rng: &mut Rng, std: f64) {
    for id in store.trainable_ids() {
        let dims = store.get(id).dims().to_vec();
        store.set(id, rng.normal_tensor(&dims, std)).unwrap();
    }
}

/// Worst relative error between analytic and central-difference gradients.
pub struct FdReport {
    pub probes: usize,
    pub worst: f64,
    pub worst_at: String,
}

/// Floor on the relative-error denominator: below it the comparison is
/// effectively absolute.
pub const FD_FLOOR: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;

/// Central-difference check of `analytic` (gradients of `loss` at `store`)
/// on `probes` random elements, cycling through the trainable tensors.
pub fn fd_check(
    store: &ParamStore,
    analytic: &[(ParamId, Tensor)],
    loss: impl Fn(&ParamStore) -> f64,
    probes: usize,
    rng: &mut Rng,
) -> FdReport {
    assert!(!analytic.is_empty(), "no trainable parameters");
    let mut work = store.clone();
    let mut worst = (0.0f64, String::new());
    for p in 0..probes {
        let (id, grad) = &analytic[p % analytic.len()];
        let k = rng.below(grad.numel() as u64) as usize;
        let orig = work.get(*id).data()[k];
        work.value_mut(*id).data_mut()[k] = orig + FD_STEP;
        let up = loss(&work);
        work.value_mut(*id).data_mut()[k] = orig - FD_STEP;
        let down = loss(&work);
        work.value_mut(*id).data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = grad.data()[k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
        if rel > worst.0 {
            worst = (rel, format!("{}[{k}]: analytic {a:e}, numeric {numeric:e}", store.name(*id)));
        }
    }
    FdReport { probes, worst: worst.0, worst_at: worst.1 }
}
