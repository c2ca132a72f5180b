//! Hand-constructed models with known pathways, used to validate the
//! intervention machinery against ground truth no trained model can offer.
//!
//! The planted model runs one block with two heads under uniform causal
//! attention (Wq = Wk = 0). Head 0 copies patch channels (the image
//! pathway) plus a fixed option floor; head 1 copies caption-class
//! one-hots (the caption pathway). The output projection routes the two
//! pathways into disjoint residual blocks read by the unembedding, so
//! scaling head 1 by alpha moves answers from the image label to the
//! caption label with a flip point at alpha = W_IMG / W_CAP.

use super::{ModelConfig, Params, TinyVlm};
use crate::conflictgen::Vocab;

/// (layer, head) of the planted caption pathway.
pub const PLANTED_CAPTION_HEAD: (usize, usize) = (0, 1);
/// (layer, head) of the image pathway (also carries the option floor).
pub const PLANTED_IMAGE_HEAD: (usize, usize) = (0, 0);

const W_IMG: f32 = 3.0;
const W_FLOOR: f32 = 2.0;
const W_CAP: f32 = 0.3;
const PATCH_DIM: usize = 8;

/// Build the planted two-pathway model for up to 6 classes.
///
/// Feed it prompts over noise-free synthetic grids (sigma = 0): at
/// alpha = 1 the image label wins every inconsistent prompt; above
/// alpha = 10 (W_IMG / W_CAP) the caption label wins.
pub fn planted_caption_pathway_model(n_classes: usize) -> TinyVlm {
    assert!(
        (2..=6).contains(&n_classes),
        "planted model supports 2..=6 classes, got {n_classes}"
    );
    let vocab = Vocab::new(n_classes);
    let cfg = ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 32,
        vocab_size: vocab.size(),
        n_image_tokens: 16,
        max_seq: 32,
        n_classes,
        patch_dim: PATCH_DIM,
    };
    let mut params = Params::zeros(&cfg);

    // Residual-dimension layout.
    let cap_in = PATCH_DIM; // 8 .. 8+C: caption one-hots
    let img_out = cap_in + n_classes; // image pathway logit block
    let floor_out = img_out + n_classes; // option floor block
    let cap_out = floor_out + n_classes; // caption pathway logit block
    assert!(cap_out + n_classes <= cfg.d_model);
    let d_head = cfg.d_head();

    for c in 0..PATCH_DIM {
        params.patch_proj.set(c, c, 1.0);
    }
    for k in 0..n_classes {
        params
            .tok_emb
            .set(vocab.caption_token(k) as usize, cap_in + k, 1.0);
    }

    let block = &mut params.blocks[0];
    for m in [&mut block.ln1_gamma, &mut block.ln2_gamma] {
        for v in m.data_mut() {
            *v = 1.0;
        }
    }
    // Head 0 (z columns 0..16): patch channels then caption floor.
    for c in 0..PATCH_DIM {
        block.wv.set(c, c, 1.0);
    }
    for k in 0..n_classes {
        block.wv.set(cap_in + k, PATCH_DIM + k, 1.0);
    }
    // Head 1 (z columns 16..32): caption one-hots.
    for k in 0..n_classes {
        block.wv.set(cap_in + k, d_head + k, 1.0);
    }
    // Route pathways into disjoint residual blocks.
    for k in 0..n_classes {
        block.wo.set(k, img_out + k, W_IMG);
        block.wo.set(PATCH_DIM + k, floor_out + k, W_FLOOR);
        block.wo.set(d_head + k, cap_out + k, W_CAP);
    }

    for k in 0..n_classes {
        let ans = cfg.answer_token(k) as usize;
        params.unembed.set(img_out + k, ans, 1.0);
        params.unembed.set(floor_out + k, ans, 1.0);
        params.unembed.set(cap_out + k, ans, 1.0);
    }

    TinyVlm { cfg, params }
}
