use ragcap_core::corpus::synthetic::random_pairs;
use ragcap_core::model::tokenizer::{tokenize, tokenize_caption};
use ragcap_core::model::{
    decoder_forward, encode_neighbors, lift_visual, loss_and_grads, perceiver_resample, DecodeMode, Example, Tensor,
};
use ragcap_core::{ModelConfig, ModelParams};

fn small() -> ModelConfig {
    ModelConfig { image_dim: 16, ..ModelConfig::small() }
}

fn latents(params: &ModelParams, img: &[f32]) -> Tensor {
    perceiver_resample(params, &lift_visual(params, img).unwrap()).unwrap()
}

#[test]
fn logits_are_causal() {
    let params = ModelParams::init(&small()).unwrap();
    let corpus = random_pairs(2, 16, 1);
    let lat = latents(&params, corpus.records[0].embedding.as_slice());
    let enc = encode_neighbors(&params, &[tokenize("a red bus"), tokenize("cat")]).unwrap();
    let base = tokenize_caption("hello world");
    let full = decoder_forward(&params, &base, Some(&lat), Some(&enc), DecodeMode::Standard).unwrap();
    for j in 1..base.len() {
        let mut changed = base.clone();
        changed[j] = u32::from(b'#');
        let out = decoder_forward(&params, &changed, Some(&lat), Some(&enc), DecodeMode::Standard).unwrap();
        for row in 0..j {
            assert_eq!(full.row(row), out.row(row), "row {row} saw position {j}");
        }
        assert_ne!(full.row(j), out.row(j));
    }
}

#[test]
fn neighbor_order_does_not_matter() {
    let mut params = ModelParams::init(&small()).unwrap();
    params.set_gates(0.5);
    let a = tokenize("two dogs in snow");
    let b = tokenize("a kitchen");
    let e1 = encode_neighbors(&params, &[a.clone(), b.clone()]).unwrap();
    let e2 = encode_neighbors(&params, &[b, a]).unwrap();
    let toks = tokenize_caption("dogs");
    let x = decoder_forward(&params, &toks, None, Some(&e1), DecodeMode::Standard).unwrap();
    let y = decoder_forward(&params, &toks, None, Some(&e2), DecodeMode::Standard).unwrap();
    assert!(x.max_abs_diff(&y) < 1e-12, "{}", x.max_abs_diff(&y));
}

#[test]
fn encoder_shares_the_token_embedding() {
    let params = ModelParams::init(&small()).unwrap();
    let embed_id = params.specs().iter().position(|s| s.name == "token_embedding").unwrap();
    // 'Z' only appears in the neighbor, so its embedding row learns only
    // through the text encoder.
    let ex = Example::new(None, "abc").with_neighbors(vec![tokenize("ZZZ")]);
    let (_, grads) = loss_and_grads(&params, &ex).unwrap();
    let g = grads.get(embed_id).unwrap();
    assert!(g.row(usize::from(b'Z')).iter().any(|v| *v != 0.0));
    assert!(g.row(usize::from(b'q')).iter().all(|v| *v == 0.0));
}

#[test]
fn fresh_model_ignores_the_image() {
    let params = ModelParams::init(&small()).unwrap();
    let corpus = random_pairs(5, 16, 4);
    for r in &corpus.records {
        let toks = tokenize_caption(&r.caption);
        let lat = latents(&params, r.embedding.as_slice());
        let with = decoder_forward(&params, &toks, Some(&lat), None, DecodeMode::Standard).unwrap();
        let without = decoder_forward(&params, &toks, None, None, DecodeMode::Standard).unwrap();
        assert!(with.max_abs_diff(&without) <= 1e-6);
    }
}

#[test]
fn empty_neighbor_slots_equal_no_neighbors() {
    let mut params = ModelParams::init(&small()).unwrap();
    params.set_gates(0.7);
    let enc = encode_neighbors(&params, &[]).unwrap();
    assert!(enc.is_fully_masked());
    let toks = tokenize_caption("a cat");
    let a = decoder_forward(&params, &toks, None, Some(&enc), DecodeMode::Standard).unwrap();
    let b = decoder_forward(&params, &toks, None, None, DecodeMode::Standard).unwrap();
    assert_eq!(a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn perceiver_output_shape_is_fixed() {
    let cfg = small();
    let params = ModelParams::init(&cfg).unwrap();
    let lat = latents(&params, random_pairs(1, 16, 2).records[0].embedding.as_slice());
    assert_eq!(lat.shape(), (cfg.n_latents, cfg.d_model));
}
