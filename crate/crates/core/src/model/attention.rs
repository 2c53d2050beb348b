//! Fused multi-head scaled-dot-product attention over ragged batches.
//!
//! Queries/keys/values are concatenations of per-sentence rows; each
//! sentence contributes one `(q_range, k_range)` span pair. Key ranges may
//! alias each other (beam hypotheses share one source encoding). The whole
//! batch runs as a single graph node so training steps stay cheap, with
//! softmax probabilities saved for the backward pass and optionally copied
//! out for alignment capture.

use crate::error::{Error, Result};
use crate::tensor::{kernels_dot, Tensor};
use std::ops::Range;

/// Fixed sinusoidal positional encodings, `[max_len × d]` row-major.
pub fn sinusoidal_positional_encoding(max_len: usize, d: usize) -> Vec<f32> {
    let mut pe = vec![0.0f32; max_len * d];
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[pos * d + 2 * i] = rate.sin() as f32;
            if 2 * i + 1 < d {
                pe[pos * d + 2 * i + 1] = rate.cos() as f32;
            }
        }
        if d % 2 == 1 {
            let i = d / 2;
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[pos * d + d - 1] = rate.sin() as f32;
        }
    }
    pe
}

/// Attention probabilities captured for one batch:
/// `capture[sentence][head]` is a `[q_len × k_len]` row-major matrix.
pub type AttnCapture = Vec<Vec<Vec<f32>>>;

pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    q_ranges: &[Range<usize>],
    k_ranges: &[Range<usize>],
    heads: usize,
    causal: bool,
    mut capture: Option<&mut AttnCapture>,
) -> Result<Tensor> {
    let (nq, d) = q.dims2()?;
    let (nk, dk) = k.dims2()?;
    let (nv, dv) = v.dims2()?;
    if dk != d || dv != d || nv != nk {
        return Err(Error::ShapeMismatch {
            op: "multi_head_attention",
            lhs: q.shape(),
            rhs: k.shape(),
        });
    }
    if d % heads != 0 {
        return Err(Error::Config(format!("d_model {d} not divisible by {heads} heads")));
    }
    if q_ranges.len() != k_ranges.len() {
        return Err(Error::Config("query/key span counts differ".into()));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();

    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    let mut out = vec![0.0f32; nq * d];
    // probs are stored dense per (sentence, head); disallowed causal slots stay 0
    let mut saved: Vec<Vec<f32>> = Vec::with_capacity(q_ranges.len() * heads);
    if let Some(cap) = capture.as_deref_mut() {
        cap.clear();
    }

    for (s, (qr, kr)) in q_ranges.iter().zip(k_ranges.iter()).enumerate() {
        let tq = qr.len();
        let tk = kr.len();
        if qr.end > nq || kr.end > nk || tq == 0 || tk == 0 {
            return Err(Error::Config(format!("attention span {s} out of bounds or empty")));
        }
        if capture.is_some() {
            capture.as_deref_mut().unwrap().push(Vec::with_capacity(heads));
        }
        for h in 0..heads {
            let c0 = h * dh;
            let mut probs = vec![0.0f32; tq * tk];
            for iq in 0..tq {
                let limit = if causal { (iq + 1).min(tk) } else { tk };
                let q_row = &qd[(qr.start + iq) * d + c0..(qr.start + iq) * d + c0 + dh];
                let row = &mut probs[iq * tk..iq * tk + tk];
                let mut max = f32::NEG_INFINITY;
                for ik in 0..limit {
                    let k_row = &kd[(kr.start + ik) * d + c0..(kr.start + ik) * d + c0 + dh];
                    let s = kernels_dot(q_row, k_row) * scale;
                    row[ik] = s;
                    if s > max {
                        max = s;
                    }
                }
                let mut sum = 0.0f32;
                for ik in 0..limit {
                    let e = (row[ik] - max).exp();
                    row[ik] = e;
                    sum += e;
                }
                for ik in 0..limit {
                    row[ik] /= sum;
                }
                // weighted sum of value rows
                let out_row = &mut out[(qr.start + iq) * d + c0..(qr.start + iq) * d + c0 + dh];
                for ik in 0..limit {
                    let p = row[ik];
                    let v_row = &vd[(kr.start + ik) * d + c0..(kr.start + ik) * d + c0 + dh];
                    for j in 0..dh {
                        out_row[j] += p * v_row[j];
                    }
                }
            }
            if let Some(cap) = capture.as_deref_mut() {
                cap[s].push(probs.clone());
            }
            saved.push(probs);
        }
    }
    drop(qd);
    drop(kd);
    drop(vd);

    let q_ranges_c: Vec<Range<usize>> = q_ranges.to_vec();
    let k_ranges_c: Vec<Range<usize>> = k_ranges.to_vec();
    Ok(Tensor::from_op(
        vec![nq, d],
        out,
        vec![q.clone(), k.clone(), v.clone()],
        Box::new(move |g, parents| {
            let mut dq = vec![0.0f32; nq * d];
            let mut dk_buf = vec![0.0f32; nk * d];
            let mut dv = vec![0.0f32; nk * d];
            {
                let qd = parents[0].data();
                let kd = parents[1].data();
                let vd = parents[2].data();
                for (s, (qr, kr)) in q_ranges_c.iter().zip(k_ranges_c.iter()).enumerate() {
                    let tq = qr.len();
                    let tk = kr.len();
                    for h in 0..heads {
                        let c0 = h * dh;
                        let probs = &saved[s * heads + h];
                        for iq in 0..tq {
                            let limit = if causal { (iq + 1).min(tk) } else { tk };
                            let g_row = &g[(qr.start + iq) * d + c0..(qr.start + iq) * d + c0 + dh];
                            let p_row = &probs[iq * tk..iq * tk + tk];
                            // dP and the softmax inner product
                            let mut dp = vec![0.0f32; limit];
                            let mut inner = 0.0f32;
                            for ik in 0..limit {
                                let v_row = &vd[(kr.start + ik) * d + c0..(kr.start + ik) * d + c0 + dh];
                                let val = kernels_dot(g_row, v_row);
                                dp[ik] = val;
                                inner += val * p_row[ik];
                            }
                            let q_row = &qd[(qr.start + iq) * d + c0..(qr.start + iq) * d + c0 + dh];
                            let dq_row = &mut dq[(qr.start + iq) * d + c0..(qr.start + iq) * d + c0 + dh];
                            for ik in 0..limit {
                                let ds = p_row[ik] * (dp[ik] - inner) * scale;
                                let p = p_row[ik];
                                let k_row = &kd[(kr.start + ik) * d + c0..(kr.start + ik) * d + c0 + dh];
                                let dk_row = &mut dk_buf[(kr.start + ik) * d + c0..(kr.start + ik) * d + c0 + dh];
                                let dv_row = &mut dv[(kr.start + ik) * d + c0..(kr.start + ik) * d + c0 + dh];
                                for j in 0..dh {
                                    dq_row[j] += ds * k_row[j];
                                    dk_row[j] += ds * q_row[j];
                                    dv_row[j] += p * g_row[j];
                                }
                            }
                        }
                    }
                }
            }
            if parents[0].requires_grad() {
                parents[0].accum_grad_add(&dq);
            }
            if parents[1].requires_grad() {
                parents[1].accum_grad_add(&dk_buf);
            }
            if parents[2].requires_grad() {
                parents[2].accum_grad_add(&dv);
            }
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradcheck, sum_all, mul};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::parameter(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn positional_encoding_matches_closed_form() {
        let pe = sinusoidal_positional_encoding(4, 6);
        let want = (2.0f64 / 10000f64.powf(2.0 / 6.0)).sin() as f32;
        assert!((pe[2 * 6 + 2] - want).abs() < 1e-6);
        assert_eq!(pe[0], 0.0); // sin(0)
        assert_eq!(pe[1], 1.0); // cos(0)
    }

    #[test]
    fn attention_rows_are_distributions_and_causal_rows_are_truncated() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = rand_t(5, 8, &mut rng);
        let k = rand_t(5, 8, &mut rng);
        let v = rand_t(5, 8, &mut rng);
        let ranges = vec![0..3, 3..5];
        let mut cap: AttnCapture = Vec::new();
        multi_head_attention(&q, &k, &v, &ranges, &ranges, 2, true, Some(&mut cap)).unwrap();
        assert_eq!(cap.len(), 2);
        for mats in &cap {
            assert_eq!(mats.len(), 2);
        }
        let first = &cap[0][0]; // 3x3 causal
        assert_eq!(first[1], 0.0); // future key masked in row 0
        for r in 0..3 {
            let sum: f32 = first[r * 3..r * 3 + 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-5);
            for c in r + 1..3 {
                assert_eq!(first[r * 3 + c], 0.0);
            }
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = rand_t(4, 4, &mut rng);
        let k = rand_t(4, 4, &mut rng);
        let v = rand_t(4, 4, &mut rng);
        for causal in [false, true] {
            let build = move |leaves: &[Tensor]| {
                let ranges = vec![0..2, 2..4];
                let ctx = multi_head_attention(
                    &leaves[0], &leaves[1], &leaves[2], &ranges, &ranges, 2, causal, None,
                )
                .unwrap();
                sum_all(&mul(&ctx, &ctx).unwrap())
            };
            gradcheck::check_gradients(&build, &[q.clone(), k.clone(), v.clone()], 1e-3, 1e-3)
                .unwrap_or_else(|e| panic!("causal={causal}: {e}"));
        }
    }

    #[test]
    fn shared_key_ranges_let_hypotheses_reuse_one_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = rand_t(4, 4, &mut rng);
        let kv = rand_t(3, 4, &mut rng);
        // two "hypotheses" both attend to the same key rows
        let out = multi_head_attention(&q, &kv, &kv, &[0..2, 2..4], &[0..3, 0..3], 1, false, None).unwrap();
        let od = out.to_vec();
        // identical queries would give identical rows; here just check shape and finiteness
        assert_eq!(out.shape(), vec![4, 4]);
        assert!(od.iter().all(|v| v.is_finite()));
    }
}
