use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsefocus::network::{HeadKind, Model, ModelConfig, OutputGrads, Tensor};
use sparsefocus::Variant;

fn random_tensor(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> Tensor<f64> {
    let data = (0..b * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(b, 1, h, w, data)
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        levels: 1,
        blocks_per_level: 1,
        base_channels: 2,
        dilation_schedule: vec![1],
        ..ModelConfig::default()
    }
}

/// Linear functional `Σ r·out` over every head present.
fn probe_loss(out: &sparsefocus::network::TaskOutputs<f64>, r: &[Vec<f64>; 3]) -> f64 {
    let dot = |t: &Tensor<f64>, r: &[f64]| t.data.iter().zip(r).map(|(a, b)| a * b).sum::<f64>();
    dot(&out.sct, &r[0])
        + out.bone.as_ref().map_or(0.0, |t| dot(t, &r[1]))
        + out.mask.as_ref().map_or(0.0, |t| dot(t, &r[2]))
}

fn grads_from(r: &[Vec<f64>; 3], x: &Tensor<f64>) -> OutputGrads<f64> {
    let t = |v: &Vec<f64>| Some(Tensor::from_vec(x.batch, 1, x.height, x.width, v.clone()));
    OutputGrads {
        sct: t(&r[0]),
        bone: t(&r[1]),
        mask: t(&r[2]),
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for variant in [Variant::ThreeTask, Variant::OneTaskGlobal] {
        let model = Model::<f64>::build(&tiny_config(), variant, 5).unwrap();
        let x = random_tensor(&mut rng, 2, 8, 8);
        let n = x.data.len();
        let r: [Vec<f64>; 3] =
            std::array::from_fn(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());

        let mut m = model.clone();
        let (_, cache) = m.forward_train(&x).unwrap();
        let analytic = m.backward(&cache, &grads_from(&r, &x)).unwrap();

        let h = 1e-3;
        let mut worst: f64 = 0.0;
        for i in 0..model.param_count() {
            let eval = |delta: f64| {
                let mut p = model.clone();
                p.params_mut()[i] += delta;
                let (out, _) = p.forward_train(&x).unwrap();
                probe_loss(&out, &r)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            assert!(
                rel <= 1e-3,
                "{variant}: {} analytic {a} numeric {numeric}",
                model.param_name(i).unwrap()
            );
        }
        assert!(worst <= 1e-3);
    }
}

#[test]
fn zero_output_gradients_give_zero_parameter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut m = Model::<f64>::build(&tiny_config(), Variant::ThreeTask, 1).unwrap();
    let x = random_tensor(&mut rng, 1, 16, 16);
    let (_, cache) = m.forward_train(&x).unwrap();
    let zero = Tensor::zeros(1, 1, 16, 16);
    let g = OutputGrads {
        sct: Some(zero.clone()),
        bone: Some(zero.clone()),
        mask: Some(zero),
    };
    assert!(m.backward(&cache, &g).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn frozen_head_exclusive_parameters_get_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut m = Model::<f64>::build(&tiny_config(), Variant::ThreeTask, 1).unwrap();
    let x = random_tensor(&mut rng, 2, 16, 16);
    let (_, cache) = m.forward_train(&x).unwrap();
    let g = Tensor::from_vec(2, 1, 16, 16, (0..512).map(|i| ((i * 7) % 13) as f64 - 6.0).collect());
    let grads = OutputGrads {
        sct: Some(g.clone()),
        bone: None,
        mask: Some(g),
    };
    let d = m.backward(&cache, &grads).unwrap();
    for r in m.head_param_ranges(HeadKind::Bone) {
        assert!(d[r].iter().all(|&v| v == 0.0));
    }
    assert!(m
        .head_param_ranges(HeadKind::Mask)
        .into_iter()
        .any(|r| d[r].iter().any(|&v| v != 0.0)));
}

/// Sum over declared layers, written out independently of the builder.
fn closed_form_param_count(levels: usize, blocks: usize, base: usize, heads: usize, head_bn: bool) -> usize {
    let block = |cin: usize, cout: usize| {
        let a = (cout + 1) / 2;
        let b = cout / 2;
        cin * a * 25 + cin * b * 9 + 2 * cout
    };
    let w = |l: usize| base * (1 << l);
    let mut total = 0;
    for l in 0..levels {
        let first_in = if l == 0 { 1 } else { w(l - 1) };
        total += block(first_in, w(l)) + (blocks - 1) * block(w(l), w(l));
        let dec_in = if l == levels - 1 { w(l) } else { w(l + 1) + w(l) };
        total += block(dec_in, w(l)) + (blocks - 1) * block(w(l), w(l));
    }
    total + heads * (base + if head_bn { 2 } else { 1 })
}

#[test]
fn parameter_count_matches_closed_form() {
    let cfg = ModelConfig::default();
    let m = Model::<f32>::build(&cfg, Variant::ThreeTask, 0).unwrap();
    assert_eq!(m.param_count(), closed_form_param_count(3, 2, 16, 3, true));
    // frozen from an independent hand evaluation of the same sum
    assert_eq!(m.param_count(), 362_438);

    for (variant, heads) in [(Variant::TwoTask, 2), (Variant::OneTaskFocused, 1)] {
        let mut cfg = ModelConfig::default();
        cfg.head_batchnorm = false;
        cfg.base_channels = 5;
        let m = Model::<f32>::build(&cfg, variant, 0).unwrap();
        assert_eq!(m.param_count(), closed_form_param_count(3, 2, 5, heads, false));
    }
}

#[test]
fn outputs_keep_input_resolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = ModelConfig {
        base_channels: 2,
        ..ModelConfig::default()
    };
    let m = Model::<f32>::build(&cfg, Variant::ThreeTask, 0).unwrap();
    for s in [16, 32, 64, 96] {
        let x: Tensor<f32> = random_tensor(&mut rng, 2, s, s).cast();
        let out = m.forward_eval(&x).unwrap();
        for t in [&out.sct, out.bone.as_ref().unwrap(), out.mask.as_ref().unwrap()] {
            assert_eq!((t.batch, t.channels, t.height, t.width), (2, 1, s, s));
        }
        assert!(out.bone.unwrap().data.iter().all(|&v| v >= 0.0));
        assert!(out.mask.unwrap().data.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn extreme_inputs_keep_head_ranges() {
    let cfg = ModelConfig {
        base_channels: 2,
        levels: 1,
        dilation_schedule: vec![1],
        head_batchnorm: false,
        ..ModelConfig::default()
    };
    let mut m = Model::<f32>::build(&cfg, Variant::ThreeTask, 9).unwrap();
    let x = Tensor::from_vec(1, 1, 16, 16, (0..256).map(|i| if i % 2 == 0 { 1e4 } else { -1e4 }).collect());
    let (out, _) = m.forward_train(&x).unwrap();
    assert!(out.mask.unwrap().data.iter().all(|&v| v > 0.0 && v < 1.0));
    assert!(out.bone.unwrap().data.iter().all(|&v| v >= 0.0));
}

#[test]
fn eval_forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = ModelConfig {
        base_channels: 4,
        ..ModelConfig::default()
    };
    let m = Model::<f32>::build(&cfg, Variant::ThreeTask, 0).unwrap();
    let x: Tensor<f32> = random_tensor(&mut rng, 2, 32, 32).cast();
    let a = m.forward_eval(&x).unwrap();
    let b = m.forward_eval(&x).unwrap();
    let bits = |t: &Tensor<f32>| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.sct), bits(&b.sct));
    assert_eq!(bits(a.mask.as_ref().unwrap()), bits(b.mask.as_ref().unwrap()));
}

#[test]
fn shifting_the_input_shifts_the_interior_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = ModelConfig {
        levels: 2,
        blocks_per_level: 1,
        base_channels: 3,
        dilation_schedule: vec![1, 2],
        ..ModelConfig::default()
    };
    let mut m = Model::<f64>::build(&cfg, Variant::ThreeTask, 0).unwrap();
    // populate running statistics so eval differs from the identity
    m.forward_train(&random_tensor(&mut rng, 2, 32, 32)).unwrap();

    let big = random_tensor(&mut rng, 1, 56, 56);
    let (crop, shift) = (48, 4);
    let cut = |oy: usize, ox: usize| {
        let mut v = Vec::with_capacity(crop * crop);
        for y in 0..crop {
            v.extend_from_slice(&big.data[(y + oy) * 56 + ox..(y + oy) * 56 + ox + crop]);
        }
        Tensor::from_vec(1, 1, crop, crop, v)
    };
    let a = m.forward_eval(&cut(0, 0)).unwrap();
    let b = m.forward_eval(&cut(shift, shift)).unwrap();
    // receptive radius: encoder 2+4, decoder 4+2
    let margin = 12;
    for (ta, tb) in [(&a.sct, &b.sct), (a.mask.as_ref().unwrap(), b.mask.as_ref().unwrap())] {
        for y in margin..crop - margin - shift {
            for x in margin..crop - margin - shift {
                let va = ta.data[(y + shift) * crop + x + shift];
                let vb = tb.data[y * crop + x];
                assert!((va - vb).abs() <= 1e-12 * va.abs().max(1.0), "({y},{x}) {va} vs {vb}");
            }
        }
    }
}

#[test]
fn composite_loss_reaches_every_trunk_parameter() {
    use sparsefocus::losses::{HeadPlanes, Objective, Targets};
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = ModelConfig {
        base_channels: 4,
        ..ModelConfig::default()
    };
    let mut m = Model::<f32>::build(&cfg, Variant::ThreeTask, 2).unwrap();
    let (b, s) = (2, 32);
    let x: Tensor<f32> = random_tensor(&mut rng, b, s, s).cast();
    let (out, cache) = m.forward_train(&x).unwrap();
    let objective = Objective::new(Variant::ThreeTask, Variant::ThreeTask.default_weights());
    let n = s * s;
    let mut gs = vec![Vec::new(); 3];
    for i in 0..b {
        let ct: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..3.0)).collect();
        let body: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let bone: Vec<u8> = body.iter().map(|&v| v & rng.random_range(0..2)).collect();
        let heads = HeadPlanes {
            sct: out.sct.sample(i),
            bone: out.bone.as_ref().map(|t| t.sample(i)),
            mask: out.mask.as_ref().map(|t| t.sample(i)),
        };
        let targets = Targets {
            ct: &ct,
            body: &body,
            bone: &bone,
        };
        let (_, g) = objective.loss_and_gradients(&heads, &targets).unwrap();
        gs[0].extend(g.sct.iter().map(|&v| v as f32));
        gs[1].extend(g.bone.unwrap().iter().map(|&v| v as f32));
        gs[2].extend(g.mask.unwrap().iter().map(|&v| v as f32));
    }
    let t = |v: &Vec<f32>| Some(Tensor::from_vec(b, 1, s, s, v.clone()));
    let d = m
        .backward(
            &cache,
            &OutputGrads {
                sct: t(&gs[0]),
                bone: t(&gs[1]),
                mask: t(&gs[2]),
            },
        )
        .unwrap();
    let trunk = &d[m.trunk_param_range()];
    let nonzero = trunk.iter().filter(|&&v| v != 0.0).count();
    assert!(
        nonzero as f64 > 0.99 * trunk.len() as f64,
        "{nonzero} of {} trunk gradients nonzero",
        trunk.len()
    );
}
