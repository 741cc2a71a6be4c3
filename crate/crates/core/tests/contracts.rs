mod common;

use common::*;
use gms_core::data::Domain;
use gms_core::lmm::{LmmConfig, LmmModel};
use gms_core::tokenizer::FrozenTokenizer;
use gms_core::trainer::{train_on, TrainConfig};
use gms_core::{GmsError, Tensor};
use proptest::prelude::*;

#[test]
fn encode_224_gives_28_by_28_latents() {
    let x = Tensor::<f32>::from_fn(&[3, 224, 224], |i| (i % 251) as f32 / 250.0);
    let patch = FrozenTokenizer::<f32>::patch();
    assert_eq!(patch.encode_image(&x).unwrap().shape(), &[192, 28, 28]);
    let mut vae = FrozenTokenizer::<f32>::untrained_conv_vae(4, 1);
    vae.freeze();
    assert_eq!(vae.encode_image(&x).unwrap().shape(), &[4, 28, 28]);
    let z = vae.encode_image(&x).unwrap();
    assert_eq!(vae.decode_latent(&z).unwrap().shape(), &[3, 224, 224]);
}

#[test]
fn lmm_preserves_latent_shape() {
    let model = LmmModel::<f32>::new(LmmConfig::for_latent(192), 0).unwrap();
    let z = Tensor::<f32>::from_fn(&[1, 192, 28, 28], |i| ((i * 7919) % 1000) as f32 / 1000.0);
    assert_eq!(model.predict(&z).unwrap().shape(), z.shape());
    let model = LmmModel::<f32>::new(LmmConfig::for_latent(4), 0).unwrap();
    let z = Tensor::<f32>::zeros(&[2, 4, 8, 6]);
    assert_eq!(model.predict(&z).unwrap().shape(), z.shape());
}

#[test]
fn non_divisible_input_is_config_error() {
    let x = Tensor::<f32>::zeros(&[3, 60, 64]);
    match FrozenTokenizer::<f32>::patch().encode_image(&x) {
        Err(GmsError::Config(m)) => assert!(m.contains("resize")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn default_param_count_in_budget() {
    for c in [4, 192] {
        let n = LmmModel::<f32>::new(LmmConfig::for_latent(c), 0)
            .unwrap()
            .count_trainable_params();
        assert!((800_000..=2_000_000).contains(&n), "c_lat {c}: {n}");
    }
}

#[test]
fn training_leaves_tokenizer_untouched() {
    let data = synthetic_bundle(Domain::A, (8, 2, 2), 16, 3);
    let cfg = TrainConfig {
        lmm: Some(LmmConfig {
            width: 8,
            ..LmmConfig::for_latent(4)
        }),
        ..small_config(2, 16)
    };
    let mut vae = FrozenTokenizer::<f32>::untrained_conv_vae(4, 5);
    vae.freeze();
    let before = vae.param_hash();
    let out = train_on(&cfg, &vae, &data).unwrap();
    assert_eq!(vae.param_hash(), before);
    assert_eq!(out.best.tokenizer_hash, before);
    // Only LMM parameters are counted.
    assert_eq!(
        out.report.trainable_params,
        out.best.model.count_trainable_params()
    );
    assert_eq!(out.report.trainable_params, out.best.model.params().numel());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn patch_round_trip_is_bit_exact(h in 1usize..5, w in 1usize..5, n in 1usize..3, seed in any::<u64>()) {
        let mut rng = gms_core::rng::seeded(seed);
        let x = uniform(&mut rng, &[n, 3, 8 * h, 8 * w], 0.0, 1.0).cast::<f32>();
        let tok = FrozenTokenizer::<f32>::patch();
        let z = tok.encode_images(&x).unwrap();
        prop_assert_eq!(z.shape(), &[n, 192, h, w]);
        prop_assert_eq!(tok.decode_latent(&z).unwrap(), x);
    }
}
