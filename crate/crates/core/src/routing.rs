//! Dynamic routing-by-agreement between primary and output capsules.
//!
//! One iteration: couplings from a row softmax over the logits, weighted
//! vote sum, squash, then a logit update by the agreement between outputs
//! and votes. The logit update runs on all but the last iteration, so the
//! returned couplings are the ones of the final forward pass.

use crate::error::{Error, Result};
use crate::ops::{softmax_row_backward, softmax_row_inplace, squash_row_backward, squash_row_inplace};
use crate::tensor::Tensor;

/// How gradients flow through the routing iterations.
///
/// `LastIteration` differentiates the final coupling computation (through
/// the last agreement update, with the previous output poses held
/// constant) and the vote path. `FullUnroll` differentiates every
/// iteration; it is the exact derivative of the unrolled computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RoutingBackprop {
    #[default]
    LastIteration,
    FullUnroll,
}

/// Per-iteration activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct RoutingForward {
    /// Couplings of each iteration, `[I*J]` each.
    pub couplings: Vec<Vec<f64>>,
    /// Pre-squash output poses of each iteration, `[J*D]` each.
    pub s: Vec<Vec<f64>>,
    /// Squashed output poses of each iteration, `[J*D]` each.
    pub v: Vec<Vec<f64>>,
    /// Logits that produced the final couplings, `[I*J]`.
    pub logits: Vec<f64>,
}

impl RoutingForward {
    pub fn iters(&self) -> usize {
        self.couplings.len()
    }

    pub fn final_couplings(&self) -> &[f64] {
        self.couplings.last().expect("at least one iteration")
    }

    pub fn final_v(&self) -> &[f64] {
        self.v.last().expect("at least one iteration")
    }
}

/// Run `t` routing iterations over votes `[I, J, D]` with initial logits
/// `[I, J]`. Returns the final output poses `[J, D]` and couplings `[I, J]`.
pub fn dynamic_routing(votes: &Tensor, b_init: &Tensor, t: usize) -> Result<(Tensor, Tensor)> {
    let &[ni, nj, d] = votes.shape() else {
        return Err(Error::dimension(
            "dynamic_routing",
            format!("votes must be rank 3, got {:?}", votes.shape()),
        ));
    };
    if b_init.shape() != [ni, nj] {
        return Err(Error::dimension(
            "dynamic_routing",
            format!("logits shape {:?} vs votes [{ni},{nj},_]", b_init.shape()),
        ));
    }
    let fwd = routing_forward(votes.data(), b_init.data(), ni, nj, d, t)?;
    let v = Tensor::from_vec(&[nj, d], fwd.final_v().to_vec())?;
    let c = Tensor::from_vec(&[ni, nj], fwd.final_couplings().to_vec())?;
    Ok((v, c))
}

/// Slice-level routing loop used by both the public op and the model.
pub fn routing_forward(
    votes: &[f64],
    b_init: &[f64],
    ni: usize,
    nj: usize,
    d: usize,
    t: usize,
) -> Result<RoutingForward> {
    if t < 1 {
        return Err(Error::Config("routing needs at least one iteration".into()));
    }
    let mut b = b_init.to_vec();
    let mut fwd = RoutingForward {
        couplings: Vec::with_capacity(t),
        s: Vec::with_capacity(t),
        v: Vec::with_capacity(t),
        logits: Vec::new(),
    };
    for r in 0..t {
        let mut c = b.clone();
        for row in c.chunks_mut(nj) {
            softmax_row_inplace(row);
        }
        // s_j = sum_i c_ij * votes_ij
        let mut s = vec![0.0; nj * d];
        for i in 0..ni {
            for j in 0..nj {
                let cij = c[i * nj + j];
                let vote = &votes[(i * nj + j) * d..(i * nj + j + 1) * d];
                let srow = &mut s[j * d..(j + 1) * d];
                for (sv, &uv) in srow.iter_mut().zip(vote) {
                    *sv += cij * uv;
                }
            }
        }
        let mut v = s.clone();
        for row in v.chunks_mut(d) {
            squash_row_inplace(row);
        }
        if r + 1 < t {
            // b_ij += v_j . votes_ij
            for i in 0..ni {
                for j in 0..nj {
                    let vote = &votes[(i * nj + j) * d..(i * nj + j + 1) * d];
                    let vrow = &v[j * d..(j + 1) * d];
                    let mut agree = 0.0;
                    for (a, b) in vrow.iter().zip(vote) {
                        agree += a * b;
                    }
                    b[i * nj + j] += agree;
                }
            }
        } else {
            fwd.logits = b.clone();
        }
        fwd.couplings.push(c);
        fwd.s.push(s);
        fwd.v.push(v);
    }
    Ok(fwd)
}

/// Gradient of the routing output poses with respect to the votes.
///
/// `d_v_final` is the upstream gradient on the final `[J, D]` poses;
/// the result is `[I*J*D]`, the gradient on the votes.
pub fn routing_backward(
    votes: &[f64],
    fwd: &RoutingForward,
    ni: usize,
    nj: usize,
    d: usize,
    d_v_final: &[f64],
    mode: RoutingBackprop,
) -> Vec<f64> {
    let t = fwd.iters();
    let mut d_votes = vec![0.0; ni * nj * d];
    let mut d_s = vec![0.0; nj * d];
    let mut d_c = vec![0.0; ni * nj];
    let mut g_b = vec![0.0; ni * nj];

    let backprop_iteration =
        |r: usize, d_v: &[f64], d_votes: &mut [f64], d_s: &mut [f64], d_c: &mut [f64], g_b: &mut [f64]| {
            let c = &fwd.couplings[r];
            for j in 0..nj {
                squash_row_backward(
                    &fwd.s[r][j * d..(j + 1) * d],
                    &d_v[j * d..(j + 1) * d],
                    &mut d_s[j * d..(j + 1) * d],
                );
            }
            for i in 0..ni {
                for j in 0..nj {
                    let base = (i * nj + j) * d;
                    let vote = &votes[base..base + d];
                    let srow = &d_s[j * d..(j + 1) * d];
                    let cij = c[i * nj + j];
                    let mut dot = 0.0;
                    for (k, &g) in srow.iter().enumerate() {
                        dot += g * vote[k];
                        d_votes[base + k] += cij * g;
                    }
                    d_c[i * nj + j] = dot;
                }
            }
            let mut d_b_row = vec![0.0; nj];
            for i in 0..ni {
                softmax_row_backward(
                    &c[i * nj..(i + 1) * nj],
                    &d_c[i * nj..(i + 1) * nj],
                    &mut d_b_row,
                );
                for (gb, &db) in g_b[i * nj..(i + 1) * nj].iter_mut().zip(&d_b_row) {
                    *gb += db;
                }
            }
        };

    match mode {
        RoutingBackprop::LastIteration => {
            backprop_iteration(t - 1, d_v_final, &mut d_votes, &mut d_s, &mut d_c, &mut g_b);
            if t >= 2 {
                // The final logits include the last agreement v^{t-2} . votes;
                // let the gradient reach the votes through it with the pose
                // held constant.
                let v_prev = &fwd.v[t - 2];
                for i in 0..ni {
                    for j in 0..nj {
                        let g = g_b[i * nj + j];
                        if g == 0.0 {
                            continue;
                        }
                        let base = (i * nj + j) * d;
                        let vrow = &v_prev[j * d..(j + 1) * d];
                        for (k, &vv) in vrow.iter().enumerate() {
                            d_votes[base + k] += g * vv;
                        }
                    }
                }
            }
        }
        RoutingBackprop::FullUnroll => {
            let mut d_v = d_v_final.to_vec();
            for r in (0..t).rev() {
                backprop_iteration(r, &d_v, &mut d_votes, &mut d_s, &mut d_c, &mut g_b);
                if r > 0 {
                    // b^{(r)} = b^{(r-1)} + v^{(r-1)} . votes: split g_b into the
                    // agreement term and carry the rest to the previous logits.
                    let v_prev = &fwd.v[r - 1];
                    let mut d_v_prev = vec![0.0; nj * d];
                    for i in 0..ni {
                        for j in 0..nj {
                            let g = g_b[i * nj + j];
                            if g == 0.0 {
                                continue;
                            }
                            let base = (i * nj + j) * d;
                            let vote = &votes[base..base + d];
                            let vrow = &v_prev[j * d..(j + 1) * d];
                            let dvj = &mut d_v_prev[j * d..(j + 1) * d];
                            for k in 0..d {
                                d_votes[base + k] += g * vrow[k];
                                dvj[k] += g * vote[k];
                            }
                        }
                    }
                    d_v = d_v_prev;
                }
            }
        }
    }
    d_votes
}
