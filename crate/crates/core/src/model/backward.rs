//! Manual backprop for TinyVLM. The loss is read at the answer position
//! only; gradients still flow to every earlier position through attention.
//! All loop orders are fixed, so gradients are bit-stable across runs and
//! thread counts.

use super::forward::{ForwardCache, LnCache};
use super::{HeadInterventionSpec, Params, Result, TinyVlm};
use crate::conflictgen::{EncodedPrompt, Vocab};
use crate::numerics::{dot_f64, softmax_f64, Mat};
use rayon::prelude::*;

/// Examples per parallel gradient chunk. Fixed (not thread-count derived)
/// so the reduction order never depends on the machine.
const GRAD_CHUNK: usize = 8;

impl TinyVlm {
    /// Accumulate parameter gradients for one example given the gradient
    /// of the loss w.r.t. the answer-position logits.
    pub(crate) fn backward_from_answer(
        &self,
        prompt: &EncodedPrompt,
        interventions: &[HeadInterventionSpec],
        cache: &ForwardCache,
        d_answer_logits: &[f32],
        grads: &mut Params,
    ) -> Result<()> {
        let cfg = &self.cfg;
        let seq = prompt.tokens.len();
        let d = cfg.d_model;
        let answer = prompt.answer_position;
        let (n_heads, d_head) = (cfg.n_heads, cfg.d_head());
        let inv_sqrt = 1.0 / (d_head as f64).sqrt();

        // Unembedding.
        let x_ans = cache.x_final.row(answer);
        for (i, &xi) in x_ans.iter().enumerate() {
            let g_row = grads.unembed.row_mut(i);
            for (g, &dl) in g_row.iter_mut().zip(d_answer_logits) {
                *g += xi * dl;
            }
        }
        let mut d_x = Mat::zeros(seq, d);
        {
            let d_row = d_x.row_mut(answer);
            for (i, dr) in d_row.iter_mut().enumerate() {
                *dr = dot_f64(self.params.unembed.row(i), d_answer_logits) as f32;
            }
        }

        for layer in (0..cfg.n_layers).rev() {
            let block = &self.params.blocks[layer];
            let bc = &cache.blocks[layer];
            let gb = &mut grads.blocks[layer];

            // MLP path: x_out = x_mid + W2·gelu(W1·ln2(x_mid) + b1) + b2.
            let d_mlp_out = &d_x;
            gb.w2.add_assign(&bc.mlp_act.matmul_tn(d_mlp_out)?)?;
            add_col_sums(&mut gb.b2, d_mlp_out);
            let d_act = d_mlp_out.matmul_nt(&block.w2)?;
            let mut d_pre = d_act;
            for (dp, &pre) in d_pre.data_mut().iter_mut().zip(bc.mlp_pre.data()) {
                *dp *= super::gelu_grad(pre);
            }
            gb.w1.add_assign(&bc.ln2.out.matmul_tn(&d_pre)?)?;
            add_col_sums(&mut gb.b1, &d_pre);
            let d_ln2_out = d_pre.matmul_nt(&block.w1)?;
            let d_from_ln2 = ln_backward(
                &d_ln2_out,
                &bc.ln2,
                &block.ln2_gamma,
                &mut gb.ln2_gamma,
                &mut gb.ln2_beta,
            );
            let mut d_x_mid = d_x;
            d_x_mid.add_assign(&d_from_ln2)?;

            // Attention path: x_mid = x_in + z·Wo with z the concatenated
            // (possibly alpha-scaled) head outputs.
            let d_attn_out = &d_x_mid;
            gb.wo.add_assign(&bc.z.matmul_tn(d_attn_out)?)?;
            let mut d_z = d_attn_out.matmul_nt(&block.wo)?;
            for spec in interventions {
                if spec.layer == layer {
                    let c0 = spec.head * d_head;
                    for dz in &mut d_z.row_mut(spec.position)[c0..c0 + d_head] {
                        *dz *= spec.alpha;
                    }
                }
            }

            let mut d_q = Mat::zeros(seq, d);
            let mut d_k = Mat::zeros(seq, d);
            let mut d_v = Mat::zeros(seq, d);
            for head in 0..n_heads {
                let c0 = head * d_head;
                let c1 = c0 + d_head;
                let probs = &bc.probs[head];
                for i in 0..seq {
                    let dz_i = &d_z.row(i)[c0..c1];
                    if dz_i.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let p_row = probs.row(i);
                    // d w.r.t. attention probabilities, then softmax jacobian.
                    let mut dp = vec![0.0f64; i + 1];
                    for (j, dpj) in dp.iter_mut().enumerate() {
                        *dpj = dot_f64(dz_i, &bc.v.row(j)[c0..c1]);
                    }
                    let mut s = 0.0f64;
                    for (j, &dpj) in dp.iter().enumerate() {
                        s += dpj * p_row[j] as f64;
                    }
                    let mut dq_acc = vec![0.0f64; d_head];
                    for (j, &dpj) in dp.iter().enumerate() {
                        let pj = p_row[j] as f64;
                        let ds = pj * (dpj - s) * inv_sqrt;
                        let k_j = &bc.k.row(j)[c0..c1];
                        let q_i = &bc.q.row(i)[c0..c1];
                        for (acc, &kv) in dq_acc.iter_mut().zip(k_j) {
                            *acc += ds * kv as f64;
                        }
                        let dk_j = &mut d_k.row_mut(j)[c0..c1];
                        for (dk, &qv) in dk_j.iter_mut().zip(q_i) {
                            *dk += (ds * qv as f64) as f32;
                        }
                        let dv_j = &mut d_v.row_mut(j)[c0..c1];
                        for (dv, &dzv) in dv_j.iter_mut().zip(dz_i) {
                            *dv += (pj * dzv as f64) as f32;
                        }
                    }
                    let dq_i = &mut d_q.row_mut(i)[c0..c1];
                    for (dq, &acc) in dq_i.iter_mut().zip(dq_acc.iter()) {
                        *dq += acc as f32;
                    }
                }
            }

            gb.wq.add_assign(&bc.ln1.out.matmul_tn(&d_q)?)?;
            gb.wk.add_assign(&bc.ln1.out.matmul_tn(&d_k)?)?;
            gb.wv.add_assign(&bc.ln1.out.matmul_tn(&d_v)?)?;
            let mut d_h = d_q.matmul_nt(&block.wq)?;
            d_h.add_assign(&d_k.matmul_nt(&block.wk)?)?;
            d_h.add_assign(&d_v.matmul_nt(&block.wv)?)?;
            let d_from_ln1 = ln_backward(
                &d_h,
                &bc.ln1,
                &block.ln1_gamma,
                &mut gb.ln1_gamma,
                &mut gb.ln1_beta,
            );
            d_x = d_x_mid;
            d_x.add_assign(&d_from_ln1)?;
        }

        // Embeddings.
        let mut patch_cursor = 0usize;
        for (pos, &tok) in prompt.tokens.iter().enumerate() {
            let d_row = d_x.row(pos).to_vec();
            for (g, &v) in grads.pos_emb.row_mut(pos).iter_mut().zip(&d_row) {
                *g += v;
            }
            if tok == Vocab::IMG {
                let patch = prompt.patches.as_ref().expect("validated").row(patch_cursor);
                patch_cursor += 1;
                for (pk, &pv) in patch.iter().enumerate() {
                    let g_row = grads.patch_proj.row_mut(pk);
                    for (g, &v) in g_row.iter_mut().zip(&d_row) {
                        *g += pv * v;
                    }
                }
            } else {
                let g_row = grads.tok_emb.row_mut(tok as usize);
                for (g, &v) in g_row.iter_mut().zip(&d_row) {
                    *g += v;
                }
            }
        }
        Ok(())
    }
}

fn add_col_sums(bias_grad: &mut Mat, d: &Mat) {
    let g = bias_grad.row_mut(0);
    for i in 0..d.rows() {
        for (gv, &dv) in g.iter_mut().zip(d.row(i)) {
            *gv += dv;
        }
    }
}

fn ln_backward(
    d_out: &Mat,
    cache: &LnCache,
    gamma: &Mat,
    d_gamma: &mut Mat,
    d_beta: &mut Mat,
) -> Mat {
    let (rows, d) = (d_out.rows(), d_out.cols());
    let g = gamma.row(0);
    let mut d_x = Mat::zeros(rows, d);
    for i in 0..rows {
        let dy = d_out.row(i);
        let hat = cache.hat.row(i);
        let rstd = cache.rstd[i] as f64;
        {
            let dg = d_gamma.row_mut(0);
            let db = d_beta.row_mut(0);
            for j in 0..d {
                dg[j] += dy[j] * hat[j];
                db[j] += dy[j];
            }
        }
        let mut mean_dhat = 0.0f64;
        let mut mean_dhat_hat = 0.0f64;
        for j in 0..d {
            let dhat = dy[j] as f64 * g[j] as f64;
            mean_dhat += dhat;
            mean_dhat_hat += dhat * hat[j] as f64;
        }
        mean_dhat /= d as f64;
        mean_dhat_hat /= d as f64;
        let dx = d_x.row_mut(i);
        for j in 0..d {
            let dhat = dy[j] as f64 * g[j] as f64;
            dx[j] = (rstd * (dhat - mean_dhat - hat[j] as f64 * mean_dhat_hat)) as f32;
        }
    }
    d_x
}

/// Mean cross-entropy at the answer position over a batch, plus parameter
/// gradients. Per-example work runs in fixed-size chunks (parallelizable);
/// chunk results are reduced in order, keeping gradients deterministic
/// regardless of thread count.
pub fn batch_loss_and_grads(
    model: &TinyVlm,
    batch: &[(&EncodedPrompt, u32)],
) -> Result<(f64, Params)> {
    let chunk_results: Vec<Result<(f64, Params)>> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grads = Params::zeros(&model.cfg);
            let mut loss = 0.0f64;
            for &(prompt, label) in chunk {
                let (out, cache) = model.forward_cached(prompt, &[])?;
                let logits: Vec<f64> = out.answer_logits.iter().map(|&x| x as f64).collect();
                let probs = softmax_f64(&logits);
                let label = label as usize;
                loss -= probs[label].max(f64::MIN_POSITIVE).ln();
                let d_logits: Vec<f32> = probs
                    .iter()
                    .enumerate()
                    .map(|(t, &p)| (p - if t == label { 1.0 } else { 0.0 }) as f32)
                    .collect();
                model.backward_from_answer(prompt, &[], &cache, &d_logits, &mut grads)?;
            }
            Ok((loss, grads))
        })
        .collect();

    let mut total = Params::zeros(&model.cfg);
    let mut loss_sum = 0.0f64;
    for r in chunk_results {
        let (l, g) = r?;
        loss_sum += l;
        total.accumulate(&g);
    }
    let n = batch.len().max(1);
    total.scale(1.0 / n as f32);
    Ok((loss_sum / n as f64, total))
}
