//! Independent reference implementations used as test oracles.
//!
//! Everything here is written from the mathematical definitions with plain
//! loops and shares no code with the library beyond data containers.

#![allow(dead_code)]

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn randn_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)).collect()
}

/// Row-major `[t][c]` log-softmax of random scores.
pub fn random_log_probs(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> Vec<Vec<f64>> {
    (0..frames)
        .map(|_| {
            let row: Vec<f64> = (0..classes).map(|_| rng.random_range(-2.0..2.0)).collect();
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            row.iter().map(|v| v - lse).collect()
        })
        .collect()
}

fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, &k) in path.iter().enumerate() {
        if k != 0 && (i == 0 || path[i - 1] != k) {
            out.push(k);
        }
    }
    out
}

/// Calls `visit` with every path in `classes^frames`.
fn for_each_path(frames: usize, classes: usize, mut visit: impl FnMut(&[usize])) {
    let mut path = vec![0usize; frames];
    loop {
        visit(&path);
        let mut i = 0;
        loop {
            if i == frames {
                return;
            }
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Probability of every collapsed labelling, by enumeration of all paths.
pub fn labelling_probabilities(logp: &[Vec<f64>]) -> HashMap<Vec<usize>, f64> {
    let (frames, classes) = (logp.len(), logp[0].len());
    let mut out = HashMap::new();
    for_each_path(frames, classes, |path| {
        let p: f64 = path.iter().enumerate().map(|(t, &k)| logp[t][k]).sum::<f64>().exp();
        *out.entry(collapse(path)).or_insert(0.0) += p;
    });
    out
}

/// `-ln p(target)` by enumeration.
pub fn brute_ctc_loss(logp: &[Vec<f64>], target: &[usize]) -> f64 {
    -labelling_probabilities(logp).get(target).copied().unwrap_or(0.0).ln()
}

/// `d(-ln p(target)) / d logp[t][k]` by enumeration: minus the posterior
/// probability that a target path emits `k` at `t`.
pub fn brute_ctc_grad(logp: &[Vec<f64>], target: &[usize]) -> Vec<Vec<f64>> {
    let (frames, classes) = (logp.len(), logp[0].len());
    let mut occ = vec![vec![0.0; classes]; frames];
    let mut total = 0.0;
    for_each_path(frames, classes, |path| {
        if collapse(path) == target {
            let p: f64 = path.iter().enumerate().map(|(t, &k)| logp[t][k]).sum::<f64>().exp();
            total += p;
            for (t, &k) in path.iter().enumerate() {
                occ[t][k] += p;
            }
        }
    });
    occ.iter().map(|row| row.iter().map(|v| -v / total).collect()).collect()
}

/// `clamp(i - j, -L, L - 1) + L`.
pub fn bucket(i: usize, j: usize, l: usize) -> usize {
    let d = i as i64 - j as i64;
    (d.clamp(-(l as i64), l as i64 - 1) + l as i64) as usize
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-pair four-term score loop; row-major `[mq * mk]`.
#[allow(clippy::too_many_arguments)]
pub fn naive_drpe_scores(
    qf: &[Vec<f64>],
    kf: &[Vec<f64>],
    qp: &[Vec<f64>],
    kp: &[Vec<f64>],
    terms: [bool; 4],
    l: usize,
) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..qf.len() {
        for j in 0..kf.len() {
            let mut s = 0.0;
            if terms[0] {
                s += dot(&qf[i], &kf[j]);
            }
            if terms[1] {
                s += dot(&qf[i], &kp[bucket(j, i, l)]);
            }
            if terms[2] {
                s += dot(&qp[bucket(i, j, l)], &kf[j]);
            }
            if terms[3] {
                s += dot(&qp[bucket(i, j, l)], &kp[bucket(j, i, l)]);
            }
            out.push(s);
        }
    }
    out
}

/// Per-anchor content-aware gathering following the textbook procedure:
/// similarity row, windowed softmax without the anchor, mass split,
/// rounding, boundary shift, contiguous clip.
pub fn content_aware_clip(features: &[Vec<f64>], t: usize, l: usize, gamma: f64) -> Vec<usize> {
    let m = features.len();
    let d = features[0].len() as f64;
    let l_r = (gamma * l as f64).round() as i64;
    let lo = t.saturating_sub(l);
    let hi = (t + l).min(m - 1);
    let neighbours: Vec<usize> = (lo..=hi).filter(|&j| j != t).collect();
    let scores: Vec<f64> = neighbours.iter().map(|&j| dot(&features[t], &features[j]) / d.sqrt()).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    let before: f64 = neighbours.iter().zip(&scores).filter(|(&j, _)| j < t).map(|(_, s)| (s - max).exp() / z).sum();
    let mut l_minus = ((gamma * l as f64 * before).round() as i64).clamp(0, l_r);
    let mut l_plus = l_r - l_minus;
    let t = t as i64;
    if t - l_minus < 0 {
        l_plus += l_minus - t;
        l_minus = t;
    }
    if t + l_plus > m as i64 - 1 {
        let over = t + l_plus - (m as i64 - 1);
        l_plus -= over;
        l_minus += over;
    }
    ((t - l_minus)..=(t + l_plus)).map(|p| p as usize).collect()
}

/// `out[n][t][o] = b[o] + sum_{k,c} x[n][t+k][c] * w[k][c][o]`, flattened.
pub fn conv1d_oracle(x: &[f64], n: usize, t_in: usize, c_in: usize, w: &[f64], k: usize, c_out: usize, b: &[f64]) -> Vec<f64> {
    let t_out = t_in - k + 1;
    let mut out = Vec::with_capacity(n * t_out * c_out);
    for s in 0..n {
        for t in 0..t_out {
            for o in 0..c_out {
                let mut acc = b[o];
                for kk in 0..k {
                    for c in 0..c_in {
                        acc += x[(s * t_in + t + kk) * c_in + c] * w[(kk * c_in + c) * c_out + o];
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

/// Layer norm over the last axis with biased variance and `eps = 1e-5`.
pub fn layer_norm_oracle(x: &[f64], width: usize, gain: &[f64], bias: &[f64]) -> Vec<f64> {
    x.chunks(width)
        .flat_map(|row| {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter().enumerate().map(move |(i, v)| (v - mean) * inv * gain[i] + bias[i]).collect::<Vec<_>>()
        })
        .collect()
}

/// Maximum over the middle axis of `[n, t, c]`.
pub fn max_time_oracle(x: &[f64], n: usize, t: usize, c: usize) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; n * c];
    for s in 0..n {
        for tt in 0..t {
            for cc in 0..c {
                out[s * c + cc] = out[s * c + cc].max(x[(s * t + tt) * c + cc]);
            }
        }
    }
    out
}

/// `softmax(scale * q kᵀ + mask) v` with an explicit loop; masked entries are skipped.
pub fn attention_oracle(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], scale: f64, causal: bool) -> Vec<Vec<f64>> {
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let keys: Vec<usize> = (0..k.len()).filter(|&j| !causal || j <= i).collect();
            let s: Vec<f64> = keys.iter().map(|&j| scale * dot(qi, &k[j])).collect();
            let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - max).exp()).sum();
            let mut out = vec![0.0; v[0].len()];
            for (idx, &j) in keys.iter().enumerate() {
                let w = (s[idx] - max).exp() / z;
                for (o, vv) in out.iter_mut().zip(&v[j]) {
                    *o += w * vv;
                }
            }
            out
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
