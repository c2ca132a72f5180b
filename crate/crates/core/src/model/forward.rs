//! Forward pass with optional activation capture and per-head output
//! scaling. The cached variant records everything backprop needs; both
//! variants run the identical arithmetic.

use super::{
    CaptureFlags, ForwardOutput, ForwardTrace, HeadInterventionSpec, ModelError, Result, TinyVlm,
};
use crate::conflictgen::{EncodedPrompt, Vocab};
use crate::numerics::{dot_f64, Mat};

const LN_EPS: f64 = 1e-5;

/// Layer-norm forward cache: normalized rows and reciprocal stddevs.
pub(crate) struct LnCache {
    pub hat: Mat,
    pub rstd: Vec<f32>,
    pub out: Mat,
}

pub(crate) struct BlockCache {
    pub ln1: LnCache,
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    /// Per-head attention probabilities, row i covering columns 0..=i.
    pub probs: Vec<Mat>,
    /// Concatenated head outputs after any intervention scaling.
    pub z: Mat,
    pub ln2: LnCache,
    pub mlp_pre: Mat,
    pub mlp_act: Mat,
}

pub(crate) struct ForwardCache {
    pub blocks: Vec<BlockCache>,
    pub x_final: Mat,
}

pub(crate) fn layer_norm(x: &Mat, gamma: &Mat, beta: &Mat) -> LnCache {
    let (rows, d) = (x.rows(), x.cols());
    let mut hat = Mat::zeros(rows, d);
    let mut out = Mat::zeros(rows, d);
    let mut rstd = Vec::with_capacity(rows);
    let g = gamma.row(0);
    let b = beta.row(0);
    for i in 0..rows {
        let row = x.row(i);
        let mut mean = 0.0f64;
        for &v in row {
            mean += v as f64;
        }
        mean /= d as f64;
        let mut var = 0.0f64;
        for &v in row {
            let c = v as f64 - mean;
            var += c * c;
        }
        var /= d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(r as f32);
        let hat_row = hat.row_mut(i);
        for (h, &v) in hat_row.iter_mut().zip(row) {
            *h = ((v as f64 - mean) * r) as f32;
        }
        let out_row = out.row_mut(i);
        for j in 0..d {
            out_row[j] = hat_row[j] * g[j] + b[j];
        }
    }
    LnCache { hat, rstd, out }
}

impl TinyVlm {
    /// Causal-mask forward pass returning answer-position logits.
    ///
    /// Each intervention scales head `(layer, head)`'s pre-projection
    /// output at `position` by `alpha` before the output projection; an
    /// empty list is identical to a plain forward.
    pub fn forward(
        &self,
        prompt: &EncodedPrompt,
        interventions: &[HeadInterventionSpec],
        capture: CaptureFlags,
    ) -> Result<ForwardOutput> {
        self.forward_impl(prompt, interventions, capture, false)
            .map(|(out, _)| out)
    }

    pub(crate) fn forward_cached(
        &self,
        prompt: &EncodedPrompt,
        interventions: &[HeadInterventionSpec],
    ) -> Result<(ForwardOutput, ForwardCache)> {
        let (out, cache) =
            self.forward_impl(prompt, interventions, CaptureFlags::default(), true)?;
        Ok((out, cache.expect("cache requested")))
    }

    fn forward_impl(
        &self,
        prompt: &EncodedPrompt,
        interventions: &[HeadInterventionSpec],
        capture: CaptureFlags,
        want_cache: bool,
    ) -> Result<(ForwardOutput, Option<ForwardCache>)> {
        let cfg = &self.cfg;
        let seq = prompt.tokens.len();
        if seq > cfg.max_seq {
            return Err(ModelError::PromptTooLong {
                len: seq,
                max_seq: cfg.max_seq,
            });
        }
        let n_img = prompt.tokens.iter().filter(|&&t| t == Vocab::IMG).count();
        let n_patches = prompt.patches.as_ref().map_or(0, Mat::rows);
        if n_img > 0 && n_img != n_patches {
            return Err(ModelError::PatchMismatch {
                got: n_img,
                patches: n_patches,
            });
        }
        for spec in interventions {
            if spec.layer >= cfg.n_layers {
                return Err(ModelError::Index {
                    context: "intervention layer",
                    index: spec.layer,
                    bound: cfg.n_layers,
                });
            }
            if spec.head >= cfg.n_heads {
                return Err(ModelError::Index {
                    context: "intervention head",
                    index: spec.head,
                    bound: cfg.n_heads,
                });
            }
            if spec.position >= seq {
                return Err(ModelError::Index {
                    context: "intervention position",
                    index: spec.position,
                    bound: seq,
                });
            }
        }

        let answer = prompt.answer_position;
        if answer >= seq {
            return Err(ModelError::Index {
                context: "answer position",
                index: answer,
                bound: seq,
            });
        }
        let d = cfg.d_model;
        let (n_heads, d_head) = (cfg.n_heads, cfg.d_head());

        // Embedding: IMG positions consume patch rows in order, everything
        // else reads the token table; learned absolute positions added.
        let mut x = Mat::zeros(seq, d);
        let mut patch_cursor = 0usize;
        for (pos, &tok) in prompt.tokens.iter().enumerate() {
            let row = x.row_mut(pos);
            if tok == Vocab::IMG {
                let patch = prompt
                    .patches
                    .as_ref()
                    .expect("checked above")
                    .row(patch_cursor);
                patch_cursor += 1;
                // row = patch · patch_proj, accumulated in f64.
                let mut acc = vec![0.0f64; row.len()];
                for (pk, &pv) in patch.iter().enumerate() {
                    let pv = pv as f64;
                    for (a, &w) in acc.iter_mut().zip(self.params.patch_proj.row(pk)) {
                        *a += pv * w as f64;
                    }
                }
                for (r, &a) in row.iter_mut().zip(acc.iter()) {
                    *r = a as f32;
                }
            } else {
                let t = tok as usize;
                if t >= cfg.vocab_size {
                    return Err(ModelError::Index {
                        context: "token id",
                        index: t,
                        bound: cfg.vocab_size,
                    });
                }
                row.copy_from_slice(self.params.tok_emb.row(t));
            }
            let pos_row = self.params.pos_emb.row(pos);
            for (r, &p) in row.iter_mut().zip(pos_row) {
                *r += p;
            }
        }

        let mut residuals = Vec::new();
        let mut head_outputs = Vec::new();
        if capture.residuals {
            residuals.push(x.row(answer).to_vec());
        }
        let mut block_caches = Vec::new();

        let inv_sqrt = 1.0 / (d_head as f64).sqrt();
        for (layer, block) in self.params.blocks.iter().enumerate() {
            let ln1 = layer_norm(&x, &block.ln1_gamma, &block.ln1_beta);
            let q = ln1.out.matmul(&block.wq)?;
            let k = ln1.out.matmul(&block.wk)?;
            let v = ln1.out.matmul(&block.wv)?;

            let mut z = Mat::zeros(seq, d);
            let mut probs_per_head = Vec::with_capacity(n_heads);
            for head in 0..n_heads {
                let c0 = head * d_head;
                let c1 = c0 + d_head;
                let mut probs = Mat::zeros(seq, seq);
                for i in 0..seq {
                    let qi = &q.row(i)[c0..c1];
                    let mut scores = Vec::with_capacity(i + 1);
                    for j in 0..=i {
                        scores.push(dot_f64(qi, &k.row(j)[c0..c1]) * inv_sqrt);
                    }
                    let p = crate::numerics::softmax_f64(&scores);
                    let prow = probs.row_mut(i);
                    let mut acc = vec![0.0f64; d_head];
                    for (j, &pj) in p.iter().enumerate() {
                        prow[j] = pj as f32;
                        let vj = &v.row(j)[c0..c1];
                        for (a, &vv) in acc.iter_mut().zip(vj) {
                            *a += pj * vv as f64;
                        }
                    }
                    let zi = &mut z.row_mut(i)[c0..c1];
                    for (zv, &a) in zi.iter_mut().zip(acc.iter()) {
                        *zv = a as f32;
                    }
                }
                probs_per_head.push(probs);
            }

            for spec in interventions {
                if spec.layer == layer {
                    let c0 = spec.head * d_head;
                    for zv in &mut z.row_mut(spec.position)[c0..c0 + d_head] {
                        *zv *= spec.alpha;
                    }
                }
            }
            if capture.head_outputs {
                let row = z.row(answer);
                head_outputs.push(
                    (0..n_heads)
                        .map(|h| row[h * d_head..(h + 1) * d_head].to_vec())
                        .collect::<Vec<_>>(),
                );
            }

            let attn_out = z.matmul(&block.wo)?;
            let mut x_mid = x;
            x_mid.add_assign(&attn_out)?;

            let ln2 = layer_norm(&x_mid, &block.ln2_gamma, &block.ln2_beta);
            let mut mlp_pre = ln2.out.matmul(&block.w1)?;
            for i in 0..seq {
                let b1 = block.b1.row(0);
                for (p, &b) in mlp_pre.row_mut(i).iter_mut().zip(b1) {
                    *p += b;
                }
            }
            let mut mlp_act = mlp_pre.clone();
            for a in mlp_act.data_mut() {
                *a = super::gelu(*a);
            }
            let mut mlp_out = mlp_act.matmul(&block.w2)?;
            for i in 0..seq {
                let b2 = block.b2.row(0);
                for (p, &b) in mlp_out.row_mut(i).iter_mut().zip(b2) {
                    *p += b;
                }
            }
            let mut x_next = x_mid.clone();
            x_next.add_assign(&mlp_out)?;

            if capture.residuals {
                residuals.push(x_next.row(answer).to_vec());
            }
            if want_cache {
                block_caches.push(BlockCache {
                    ln1,
                    q,
                    k,
                    v,
                    probs: probs_per_head,
                    z,
                    ln2,
                    mlp_pre,
                    mlp_act,
                });
            }
            x = x_next;
        }

        let answer_row = Mat::from_vec(1, d, x.row(answer).to_vec())?;
        let answer_logits = answer_row.matmul(&self.params.unembed)?.data().to_vec();
        let all_logits = if capture.all_logits {
            Some(x.matmul(&self.params.unembed)?)
        } else {
            None
        };

        let trace = (capture.residuals || capture.head_outputs).then(|| ForwardTrace {
            residuals,
            head_outputs: capture.head_outputs.then_some(head_outputs),
        });

        let cache = want_cache.then(|| ForwardCache {
            blocks: block_caches,
            x_final: x,
        });

        Ok((
            ForwardOutput {
                answer_logits,
                trace,
                all_logits,
            },
            cache,
        ))
    }
}
