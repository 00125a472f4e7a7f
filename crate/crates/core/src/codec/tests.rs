use super::*;
use crate::autodiff::check::relative_error;
use crate::channel::{generate_dataset, ArrayConfig, SceneConfig};

fn tiny() -> CodecConfig {
    CodecConfig {
        base_channels: 4,
        encoder_kernels: [3, 3, 3],
        downsample: [2, 2, 1],
        ..CodecConfig::default()
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_input(b: usize, n_c: usize, n_t: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(&[b, 2, n_c, n_t], |_| r.random_range(-1.0..1.0))
}

fn channels(count: usize, n_c: usize, n_t: usize) -> Vec<ChannelMatrix> {
    let mut cfg = SceneConfig::indoor(n_c);
    cfg.rng_seed = 5;
    generate_dataset(&cfg, &ArrayConfig::new(n_t), count).unwrap().remove(0)
}

#[test]
fn default_latent_shape() {
    let cfg = CodecConfig::default();
    assert_eq!(cfg.latent_shape(32, 32).unwrap(), [32, 2, 2]);
    assert_eq!(cfg.latent_shape(64, 32).unwrap(), [32, 4, 2]);
    assert!(matches!(cfg.latent_shape(24, 32), Err(CodecError::Shape(_))));
}

#[test]
fn encode_decode_shapes_and_indivisible_input() {
    let model = Model::new(CodecConfig::default(), 1, &mut rng(1)).unwrap();
    let x = random_input(3, 32, 32, 2);
    let m = model.encode(&x, 0).unwrap();
    assert_eq!(m.shape(), &[3, 32, 2, 2]);
    let y = model.decode(&[m]).unwrap();
    assert_eq!(y[0].shape(), x.shape());
    let bad = random_input(1, 30, 32, 3);
    assert!(matches!(model.encode(&bad, 0), Err(CodecError::Shape(_))));
}

#[test]
fn model_is_fully_convolutional() {
    let model = Model::new(tiny(), 1, &mut rng(4)).unwrap();
    for (n_c, n_t) in [(8, 8), (16, 8), (8, 24)] {
        let x = random_input(2, n_c, n_t, 5);
        let m = model.encode(&x, 0).unwrap();
        assert_eq!(m.shape(), &[2, 4, n_c / 4, n_t / 4]);
        assert_eq!(model.decode(&[m]).unwrap()[0].shape(), x.shape());
    }
}

#[test]
fn quantize_rounds_half_away_from_zero() {
    let t = Tensor::new(&[7], vec![0.5, -0.5, 2.5, -2.5, 0.49, 1e300, f64::NAN]).unwrap();
    assert_eq!(
        quantize(&t).data(),
        &[1.0, -1.0, 3.0, -3.0, 0.0, i32::MAX as f64, 0.0]
    );
}

#[test]
fn noise_models_have_their_ranges() {
    let z = Tensor::zeros(&[4000]);
    let c = add_noise(&z, NoiseModel::Centered, &mut rng(6));
    assert!(c.data().iter().all(|v| (-0.5..0.5).contains(v)));
    assert!(c.sum().abs() / 4000.0 < 0.02);
    let u = add_noise(&z, NoiseModel::Unit, &mut rng(6));
    assert!(u.data().iter().all(|v| (0.0..1.0).contains(v)));
    assert!((u.sum() / 4000.0 - 0.5).abs() < 0.02);
}

#[test]
fn zero_input_gives_bias_only_output_independent_of_batch() {
    let model = Model::new(tiny(), 1, &mut rng(7)).unwrap();
    let x = Tensor::zeros(&[2, 2, 8, 8]);
    let y = model.decode(&[model.encode(&x, 0).unwrap()]).unwrap().remove(0);
    assert_eq!(y.outer(0), y.outer(1));
    assert!(y.all_finite());
}

#[test]
fn batch_and_single_sample_eval_agree_exactly() {
    let model = Model::new(tiny(), 1, &mut rng(8)).unwrap();
    let x = random_input(3, 8, 8, 9);
    let batch = model.encode(&x, 0).unwrap();
    for n in 0..3 {
        let single = Tensor::new(&[1, 2, 8, 8], x.outer(n).to_vec()).unwrap();
        assert_eq!(model.encode(&single, 0).unwrap().data(), batch.outer(n));
    }
}

#[test]
fn zeroed_residual_branches_are_identity() {
    let mut cfg = tiny();
    let mut with_blocks = Model::new(cfg.clone(), 1, &mut rng(10)).unwrap();
    for r in 0..cfg.n_residual_blocks {
        for part in ["kernel", "bias"] {
            let t = with_blocks.params.get_mut(&format!("u0.dec.res{r}b.{part}")).unwrap();
            t.data_mut().fill(0.0);
        }
    }
    cfg.n_residual_blocks = 0;
    cfg.fusion_after_blocks.clear();
    let mut plain = Model::new(cfg, 1, &mut rng(11)).unwrap();
    for (name, value) in with_blocks.params.iter() {
        if plain.params.get(name).is_some() {
            plain.params.insert(name, value.clone());
        }
    }
    let m = random_input(2, 4, 2, 12).map(|v| v * 4.0);
    let m = Tensor::new(&[2, 4, 2, 2], m.data()[..32].to_vec()).unwrap();
    let a = with_blocks.decode(&[m.clone()]).unwrap().remove(0);
    let b = plain.decode(&[m]).unwrap().remove(0);
    let worst = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-12, "max deviation {worst}");
}

#[test]
fn zero_fusion_reproduces_independent_decoders() {
    let single = Model::new(tiny(), 1, &mut rng(13)).unwrap();
    let joint = Model::from_single_user(&single, 3).unwrap();
    let xs: Vec<Tensor> = (0..3).map(|k| random_input(2, 8, 8, 20 + k)).collect();
    let latents: Vec<Tensor> = xs.iter().enumerate().map(|(k, x)| joint.encode(x, k).unwrap()).collect();
    let outs = joint.decode(&latents).unwrap();
    for (k, x) in xs.iter().enumerate() {
        let alone = single.decode(&[single.encode(x, 0).unwrap()]).unwrap().remove(0);
        assert_eq!(outs[k], alone);
    }
}

#[test]
fn symmetric_joint_decoder_commutes_with_user_swap() {
    let single = Model::new(tiny(), 1, &mut rng(14)).unwrap();
    let mut joint = Model::from_single_user(&single, 2).unwrap();
    let mut r = rng(15);
    let shared = Tensor::from_fn(&[4, 4, 3, 3], |_| r.random_range(-0.2..0.2));
    for stage in 0..2 {
        joint.params.insert(fusion_name(stage, 0, 1), shared.clone());
        joint.params.insert(fusion_name(stage, 1, 0), shared.clone());
    }
    let a = random_input(2, 4, 2, 16);
    let a = Tensor::new(&[2, 4, 2, 2], a.data()[..32].to_vec()).unwrap();
    let b = a.map(|v| 3.0 * v - 0.5);
    let fwd = joint.decode(&[a.clone(), b.clone()]).unwrap();
    let rev = joint.decode(&[b, a]).unwrap();
    assert_eq!(fwd[0], rev[1]);
    assert_eq!(fwd[1], rev[0]);
}

#[test]
fn fusion_changes_output_when_nonzero() {
    let mut joint = Model::new(tiny(), 2, &mut rng(17)).unwrap();
    let m = Tensor::full(&[1, 4, 2, 2], 1.5);
    let fused = joint.decode(&[m.clone(), m.clone()]).unwrap();
    joint.zero_fusion();
    let plain = joint.decode(&[m.clone(), m]).unwrap();
    assert_ne!(fused[0], plain[0]);
}

#[test]
fn user_count_is_checked() {
    let model = Model::new(tiny(), 2, &mut rng(18)).unwrap();
    let m = Tensor::zeros(&[1, 4, 2, 2]);
    assert!(matches!(
        model.decode(&[m]),
        Err(CodecError::UserCount { expected: 2, got: 1 })
    ));
    assert!(model.encode(&Tensor::zeros(&[1, 2, 8, 8]), 2).is_err());
}

#[test]
fn transposed_upsampling_and_alternate_order_build() {
    for cfg in [
        CodecConfig {
            upsampling: Upsampling::Transposed,
            downsample: [2, 2, 2],
            ..tiny()
        },
        CodecConfig {
            block_order: BlockOrder::ConvPreluBn,
            decoder_plain_bn: false,
            ..tiny()
        },
    ] {
        let model = Model::new(cfg, 1, &mut rng(19)).unwrap();
        let x = random_input(2, 16, 8, 20);
        let y = model.decode(&[model.encode(&x, 0).unwrap()]).unwrap();
        assert_eq!(y[0].shape(), x.shape());
    }
    let bad = CodecConfig {
        upsampling: Upsampling::Transposed,
        ..tiny()
    };
    assert!(matches!(bad.validate(), Err(CodecError::Config(_))));
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = CodecConfig {
        downsample: [4, 4, 2],
        entropy_coding: false,
        ..CodecConfig::default()
    };
    let text = toml::to_string(&cfg).unwrap();
    assert_eq!(toml::from_str::<CodecConfig>(&text).unwrap(), cfg);
    let partial: CodecConfig = toml::from_str("base_channels = 16").unwrap();
    assert_eq!(partial.downsample, [4, 2, 2]);
    assert!(toml::from_str::<CodecConfig>("bogus = 1").is_err());
}

#[test]
fn complex_split_merge_round_trip() {
    let hs = channels(2, 8, 4);
    let t = batch_channels(&[&hs[0], &hs[1]]).unwrap();
    assert_eq!(t.shape(), &[2, 2, 8, 4]);
    assert_eq!(t.data()[32], hs[0].data()[0].im);
    let back = unbatch_channels(&t);
    assert_eq!(back[0].data(), hs[0].data());
    assert_eq!(back[1].data(), hs[1].data());
}

#[test]
fn compress_decompress_matches_quantized_reconstruction() {
    let frozen = FrozenCodec::new(Model::new(tiny(), 2, &mut rng(21)).unwrap(), vec![7, 9]).unwrap();
    let hs = channels(6, 8, 8);
    let users = [vec![&hs[0], &hs[1], &hs[2]], vec![&hs[3], &hs[4], &hs[5]]];
    let streams: Vec<Vec<Bitstream>> = users
        .iter()
        .enumerate()
        .map(|(u, list)| frozen.compress(list, u).unwrap())
        .collect();
    let wire: Vec<Vec<Bitstream>> = streams
        .iter()
        .map(|l| l.iter().map(|s| Bitstream::from_bytes(&s.to_bytes()).unwrap()).collect())
        .collect();
    let decoded = frozen.decompress(&wire).unwrap();
    let direct = frozen.reconstruct(&users).unwrap();
    assert_eq!(decoded, direct);
    assert_eq!(streams[0][0].lambda_code, 7);
    assert_eq!(streams[1][2].lambda_code, 9);
    assert_eq!(streams[0][0].model_id, frozen.model_id());
}

#[test]
fn foreign_model_id_is_rejected() {
    let a = FrozenCodec::new(Model::new(tiny(), 1, &mut rng(22)).unwrap(), vec![0]).unwrap();
    let b = FrozenCodec::new(Model::new(tiny(), 1, &mut rng(23)).unwrap(), vec![0]).unwrap();
    assert_ne!(a.model_id(), b.model_id());
    let hs = channels(1, 8, 8);
    let s = a.compress(&[&hs[0]], 0).unwrap();
    assert!(matches!(b.decompress(&[s]), Err(CodecError::Coder(CoderError::ModelMismatch { .. }))));
}

#[test]
fn fingerprint_is_stable_under_f32_rounding() {
    let model = Model::new(tiny(), 1, &mut rng(24)).unwrap();
    let mut rounded = model.clone();
    rounded.round_to_f32();
    assert_eq!(model.fingerprint(), rounded.fingerprint());
}

#[test]
fn disabled_entropy_coding_uses_fixed_length_code() {
    let cfg = CodecConfig {
        entropy_coding: false,
        ..tiny()
    };
    let frozen = FrozenCodec::new(Model::new(cfg, 1, &mut rng(25)).unwrap(), vec![0]).unwrap();
    let hs = channels(1, 8, 8);
    let q = frozen.quantized_latents(&[&hs[0]], 0).unwrap();
    assert!(q.max_abs() < 128.0);
    let s = frozen.compress(&[&hs[0]], 0).unwrap().remove(0);
    let symbols = q.len() as f64;
    let per_symbol = s.payload.bit_len as f64 / symbols;
    assert!((per_symbol - 8.0).abs() < 0.2, "{per_symbol} bits per symbol");
    assert_eq!(frozen.decompress(&[vec![s]]).unwrap()[0][0], frozen.reconstruct(&[vec![&hs[0]]]).unwrap()[0][0]);
}

#[test]
fn training_forward_gradients_match_finite_differences() {
    let cfg = CodecConfig {
        base_channels: 2,
        n_residual_blocks: 1,
        fusion_after_blocks: vec![1],
        ..tiny()
    };
    let base = Model::new(cfg, 2, &mut rng(26)).unwrap();
    let inputs: Vec<Tensor> = (0..2).map(|k| random_input(2, 8, 8, 30 + k)).collect();
    let loss_of = |model: &mut Model| -> (f64, Vec<Tensor>) {
        let mut f = model.forward_train(&inputs, &mut rng(40)).unwrap();
        let mut terms = Vec::new();
        for (k, &r) in f.recon.iter().enumerate() {
            terms.push((f.graph.squared_error(r, &inputs[k]).unwrap(), 0.7));
        }
        for &r in &f.rate {
            terms.push((r, 0.01));
        }
        let loss = f.graph.weighted_sum(&terms).unwrap();
        let value = f.graph.value(loss).item();
        let mut grads = f.graph.backward(loss).unwrap();
        let g = f.param_grads(&mut grads, &model.params);
        (value, g)
    };
    let mut model = base.clone();
    let (_, analytic) = loss_of(&mut model);
    let names = [
        "u0.enc.0.kernel",
        "u1.enc.1.bn.gamma",
        "u0.enc.2.bias",
        "u0.dec.res0a.prelu",
        "fuse0.1to0",
        "u1.dec.up2.kernel",
        "u1.entropy",
    ];
    for name in names {
        let i = base.params.position(name).unwrap();
        for j in [0, base.params.get(name).unwrap().len() - 1] {
            let h = 1e-5;
            let mut plus = base.clone();
            plus.params.get_mut(name).unwrap().data_mut()[j] += h;
            let mut minus = base.clone();
            minus.params.get_mut(name).unwrap().data_mut()[j] -= h;
            let numeric = (loss_of(&mut plus).0 - loss_of(&mut minus).0) / (2.0 * h);
            let err = relative_error(&[analytic[i].data()[j]], &[numeric]);
            assert!(err < 1e-5, "{name}[{j}]: {} vs {numeric}", analytic[i].data()[j]);
        }
    }
}
