mod common;

use common::criteria::attention_oracle;
use idinject::lora::ParamStore;
use idinject::mm_attention::{AttentionConfig, MmAttentionBlock};
use idinject::rope3d::RopeIndex;
use idinject::Rng;

#[test]
fn two_stream_block_matches_concat_attention() {
    attention_oracle().unwrap();
}

#[test]
fn single_token_streams() {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(4);
    let cfg = AttentionConfig { dim: 8, heads: 1, ffn_hidden: 8 };
    let block = MmAttentionBlock::new(&mut store, "b", cfg, true, &mut rng).unwrap();
    let xv = rng.normal_tensor(&[1, 8], 1.0);
    let xt = rng.normal_tensor(&[1, 8], 1.0);
    let r = [RopeIndex::ORIGIN];
    let (ov, ot) = block.forward_tensors(&store, &xv, &xt, &r, &r).unwrap();
    let (bv, bt) = common::mm_block(&store, &block, &common::to_mat(&xv), &common::to_mat(&xt), &r, &r);
    assert!(common::max_abs_diff(&common::to_mat(&ov), &bv) < 1e-12);
    assert!(common::max_abs_diff(&common::to_mat(&ot), &bt) < 1e-12);
}

#[test]
fn rope_length_mismatch_is_rejected() {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(5);
    let cfg = AttentionConfig { dim: 12, heads: 2, ffn_hidden: 8 };
    let block = MmAttentionBlock::new(&mut store, "b", cfg, true, &mut rng).unwrap();
    let xv = rng.normal_tensor(&[3, 12], 1.0);
    let xt = rng.normal_tensor(&[2, 12], 1.0);
    let r3 = vec![RopeIndex::ORIGIN; 3];
    assert!(block.forward_tensors(&store, &xv, &xt, &r3, &r3).is_err());
}
