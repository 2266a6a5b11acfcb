use picanet::model::{image_shape, ModelConfig, ModuleKind, SaliencyModel, PRESETS};
use picanet::nn::BnMode;
use picanet::{Graph, Shape, Tensor};

fn small() -> ModelConfig {
    ModelConfig {
        channels: [4, 6, 8, 8, 8],
        convs: [1, 1, 1, 1, 1],
        fc_channels: 8,
        head_channels: 4,
        renet_hidden: 3,
        ..ModelConfig::default()
    }
}

fn images(n: usize, size: usize) -> Tensor<f64> {
    Tensor::from_fn(Shape::new(n, size, size, 3), |n, y, x, c| {
        (((n * 31 + y * 7 + x * 13 + c * 5) % 17) as f64) / 17.0
    })
    .unwrap()
}

#[test]
fn every_preset_runs_forward_and_backward() {
    for preset in PRESETS {
        let cfg = small().with_preset(preset).unwrap();
        let model = SaliencyModel::<f64>::new(cfg.clone(), 3).unwrap();
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let x = g.constant(images(2, 64));
        let out = model.forward(&mut g, &vars, x, BnMode::Train).unwrap();
        let sum = out.side.iter().fold(None, |acc, &s| {
            let m = g.mean(s);
            Some(match acc {
                None => m,
                Some(a) => g.add(a, m).unwrap(),
            })
        });
        let grads = g.backward(sum.unwrap()).unwrap();
        let touched = vars
            .values()
            .filter(|&&v| grads.get(v).data().iter().any(|x| *x != 0.0))
            .count();
        assert!(
            touched > vars.len() / 2,
            "{preset}: only {touched} of {} params get gradient",
            vars.len()
        );
        let attentive = cfg.modules.iter().filter(|k| k.has_attention()).count();
        assert_eq!(out.attention.len(), attentive, "{preset}");
    }
}

#[test]
fn side_outputs_follow_the_encoder_strides() {
    let cfg = small();
    let model = SaliencyModel::<f64>::new(cfg.clone(), 0).unwrap();
    let pred = model.predict(&images(1, 64)).unwrap();
    let sizes: Vec<usize> = pred.side.iter().map(|s| s.shape().h).collect();
    assert_eq!(sizes, vec![64, 32, 16, 8, 8, 8]);
    for (i, s) in pred.side.iter().enumerate() {
        assert_eq!(s.shape().c, 1);
        assert_eq!(s.shape().h, cfg.feature_size(i + 1));
        assert!(s.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn zero_weights_predict_one_half() {
    for preset in ["U-Net", "+6GAP_5432AC", "+6ReNet_5432LC"] {
        let model = SaliencyModel::<f64>::zeroed(small().with_preset(preset).unwrap()).unwrap();
        let pred = model.predict(&images(1, 64)).unwrap();
        for s in &pred.side {
            assert!(s.data().iter().all(|&v| v == 0.5), "{preset}");
        }
    }
}

#[test]
fn unet_has_no_attention() {
    let model = SaliencyModel::<f64>::new(small().with_preset("U-Net").unwrap(), 0).unwrap();
    assert!(model.predict(&images(1, 64)).unwrap().attention.is_empty());
    assert!(model.params().keys().all(|k| !k.contains(".head.")));
}

#[test]
fn same_seed_same_model_and_output() {
    let a = SaliencyModel::<f64>::new(small(), 9).unwrap();
    let b = SaliencyModel::<f64>::new(small(), 9).unwrap();
    let c = SaliencyModel::<f64>::new(small(), 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let x = images(1, 64);
    assert_eq!(a.predict(&x).unwrap().side, b.predict(&x).unwrap().side);
}

#[test]
fn attention_modules_add_parameters() {
    let count = |p: &str| {
        SaliencyModel::<f32>::new(small().with_preset(p).unwrap(), 0)
            .unwrap()
            .param_count()
    };
    let ladder = [
        "U-Net",
        "+6GAP",
        "+6GAP_5AC",
        "+6GAP_54AC",
        "+6GAP_543AC",
        "+6GAP_5432AC",
    ];
    for w in ladder.windows(2) {
        assert!(count(w[1]) > count(w[0]), "{} vs {}", w[1], w[0]);
    }
    assert_eq!(count("+6GAP_5432AC"), count("+6GAP_5432AC_w/o_L_GA"));
}

#[test]
fn saturated_gates_reduce_attention_conv_to_plain_conv() {
    let mut ac_cfg = small();
    ac_cfg.modules = [
        ModuleKind::None,
        ModuleKind::Ac,
        ModuleKind::Ac,
        ModuleKind::Ac,
        ModuleKind::Ac,
        ModuleKind::None,
    ];
    let mut lc_cfg = ac_cfg.clone();
    lc_cfg.modules = [
        ModuleKind::None,
        ModuleKind::Lc,
        ModuleKind::Lc,
        ModuleKind::Lc,
        ModuleKind::Lc,
        ModuleKind::None,
    ];

    let mut ac = SaliencyModel::<f64>::new(ac_cfg, 4).unwrap();
    for (name, t) in ac.params_mut().iter_mut() {
        if name.ends_with("head.logits.w") {
            *t = Tensor::zeros(t.shape());
        } else if name.ends_with("head.logits.b") {
            *t = Tensor::full(t.shape(), 50.0);
        }
    }
    let lc_params = ac
        .params()
        .iter()
        .filter(|(k, _)| !k.contains(".head."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let lc = SaliencyModel::from_parts(lc_cfg, lc_params, ac.buffers().clone()).unwrap();

    let x = images(2, 64);
    let (pa, pl) = (ac.predict(&x).unwrap(), lc.predict(&x).unwrap());
    for (a, l) in pa.side.iter().zip(&pl.side) {
        assert!(a.max_abs_diff(l) <= 1e-12, "{}", a.max_abs_diff(l));
    }
}

#[test]
fn wrong_input_size_is_rejected() {
    let model = SaliencyModel::<f64>::new(small(), 0).unwrap();
    assert!(model.predict(&images(1, 32)).is_err());
    assert_eq!(image_shape(model.config(), 2), Shape::new(2, 64, 64, 3));
}

#[test]
fn from_parts_checks_layout() {
    let model = SaliencyModel::<f64>::new(small(), 0).unwrap();
    let mut params = model.params().clone();
    params.remove("dec6.side.w");
    assert!(SaliencyModel::from_parts(small(), params, model.buffers().clone()).is_err());
}

/// Whole-model gradients against finite differences on randomly sampled
/// parameters. A few samples land within a step of a ReLU or max-pool kink,
/// or have gradients too small to resolve, so the bar is on the share.
#[test]
fn sampled_parameter_gradients_match_finite_differences() {
    use picanet::gradcheck::fd_check_sampled;
    use picanet::losses::LossWeights;
    use picanet::pipeline::gradsuite::{tiny_model_config, MODEL_EPS};
    use picanet::pipeline::objective;
    use rand::seq::index::sample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let (mut within, mut total) = (0, 0);
    for seed in 0..20u64 {
        let model = SaliencyModel::<f64>::new(tiny_model_config(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x = Tensor::from_fn(Shape::new(2, 16, 16, 3), |_, _, _, _| {
            rng.gen_range(0.0..1.0)
        })
        .unwrap();
        let m = Tensor::from_fn(Shape::new(2, 16, 16, 1), |n, y, xx, _| {
            if y + xx + 3 * n < 16 {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let names: Vec<String> = model.params().keys().cloned().collect();
        let params: Vec<Tensor<f64>> = model
            .params()
            .iter()
            .map(|(k, t)| {
                let d = t
                    .data()
                    .iter()
                    .map(|v| {
                        if k.ends_with(".b") {
                            v + rng.gen_range(-0.01..0.01)
                        } else {
                            *v
                        }
                    })
                    .collect();
                Tensor::new(t.shape(), d).unwrap()
            })
            .collect();
        let sizes: Vec<usize> = params.iter().map(|t| t.len()).collect();
        let weights = LossWeights::default();
        let op = |g: &mut Graph<f64>, v: &[picanet::Var]| {
            let vars = names.iter().cloned().zip(v.iter().copied()).collect();
            Ok(objective(&model, g, &vars, &x, &m, &weights, BnMode::Train)?.total)
        };
        for flat in sample(&mut rng, sizes.iter().sum(), 10) {
            let (mut i, mut j) = (0, flat);
            while j >= sizes[i] {
                j -= sizes[i];
                i += 1;
            }
            let err = fd_check_sampled(op, &params, MODEL_EPS, &[(i, j)]).unwrap();
            total += 1;
            within += usize::from(err < 1e-4);
        }
    }
    assert!(
        within * 100 >= total * 95,
        "{within}/{total} sampled gradients within 1e-4"
    );
}
