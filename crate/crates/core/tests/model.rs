use duoprompt_core::model::encoder::{prompted_window_attention, StagePrompts, WindowLayer};
use duoprompt_core::model::window::shift_mask;
use duoprompt_core::model::{Bound, Input, Model, ModelConfig, TransformerLayer};
use duoprompt_core::{rng, Domain, Error, Tape, Task, Tensor, Var};

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    Tensor::from_fn(shape, |_| rng::normal(&mut r))
}

fn image(size: usize, channels: usize, seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    Tensor::from_fn(&[channels, size, size], |_| rng::uniform(&mut r, 0.0, 1.0))
}

/// Positional bias plus optional shift mask laid out for `windows` windows
/// with `n` prompt tokens in front; prompt rows and columns stay zero.
fn manual_bias(model: &Model, layer: &WindowLayer, windows: usize, n: usize, mask: Option<&Tensor>) -> Tensor {
    let rel = model.params.get(layer.rel_bias);
    let heads = rel.shape()[0];
    let mm = rel.shape()[1];
    let t = n + mm;
    let mut out = Tensor::zeros(&[windows, heads, t, t]);
    for w in 0..windows {
        for h in 0..heads {
            for i in 0..mm {
                for j in 0..mm {
                    let mut v = rel.data()[(h * mm + i) * mm + j];
                    if let Some(m) = mask {
                        v += m.data()[(w * mm + i) * mm + j];
                    }
                    out.data_mut()[((w * heads + h) * t + n + i) * t + n + j] = v;
                }
            }
        }
    }
    out
}

#[test]
fn prompt_free_layer_matches_plain_windowed_layer() {
    let model = Model::new(ModelConfig::toy()).unwrap();
    let stage = &model.encoder.stages[0];
    assert_eq!(stage.layers[1].shift, 2);
    for layer in &stage.layers {
        let mm = layer.window * layer.window;
        let nw = stage.side * stage.side / mm;
        let mask = (layer.shift > 0).then(|| shift_mask(stage.side, layer.window, layer.shift));
        let tape = Tape::new();
        let p = Bound::new(&tape, &model.params);
        let x = tape.constant(randn(&[nw, mm, stage.channels], 1));
        let (got, _) = prompted_window_attention(&p, x, StagePrompts::none(), layer, mask.as_ref()).unwrap();
        let bias = tape.constant(manual_bias(&model, layer, nw, 0, mask.as_ref()));
        let plain = layer.block.forward(&p, x, Some(bias)).unwrap();
        assert_eq!(got.value().data(), plain.value().data());
    }
}

#[test]
fn twenty_two_token_windows() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let stage = &model.encoder.stages[1];
    assert_eq!((stage.side, stage.channels), (8, 32));
    let layer = &stage.layers[0];
    let tape = Tape::new();
    let p = Bound::new(&tape, &model.params);
    let x = tape.constant(randn(&[4, 16, 32], 2));
    let prompts = StagePrompts {
        domain: Some(tape.constant(randn(&[1, 32], 3))),
        task: Some(tape.constant(randn(&[5, 32], 4))),
    };
    let (tokens, next) = prompted_window_attention(&p, x, prompts, layer, None).unwrap();
    assert_eq!(tokens.shape(), vec![4, 16, 32]);
    assert_eq!(next.domain.unwrap().shape(), vec![1, 32]);
    assert_eq!(next.task.unwrap().shape(), vec![5, 32]);

    // joint attention over 1 + 5 + 16 = 22 tokens per window
    let joined = Var::concat(&[prompts.domain.unwrap(), prompts.task.unwrap()], 0).unwrap();
    let rep = Var::concat(&[joined.reshape(&[1, 6, 32]).unwrap(); 4], 0).unwrap();
    let seq = Var::concat(&[rep, x], 1).unwrap();
    assert_eq!(seq.shape(), vec![4, 22, 32]);
    let bias = tape.constant(manual_bias(&model, layer, 4, 6, None));
    let y = layer.block.forward(&p, seq, Some(bias)).unwrap();
    let expect_tokens = y.slice(1, 6, 16).unwrap();
    assert_eq!(tokens.value().data(), expect_tokens.value().data());
    let expect_prompts = y.slice(1, 0, 6).unwrap().mean(0).unwrap();
    for (a, b) in next.task.unwrap().value().data().iter().zip(&expect_prompts.value().data()[32..]) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn single_window_average_is_that_window() {
    let model = Model::new(ModelConfig::toy()).unwrap();
    // stage 1 of the toy config is a single 4x4 window
    let stage = &model.encoder.stages[1];
    assert_eq!(stage.side, 4);
    let layer = &stage.layers[0];
    let tape = Tape::new();
    let p = Bound::new(&tape, &model.params);
    let x = tape.constant(randn(&[1, 16, 8], 5));
    let prompts = StagePrompts {
        domain: Some(tape.constant(randn(&[2, 8], 6))),
        task: None,
    };
    let (_, next) = prompted_window_attention(&p, x, prompts, layer, None).unwrap();
    let seq = Var::concat(&[prompts.domain.unwrap().reshape(&[1, 2, 8]).unwrap(), x], 1).unwrap();
    let bias = tape.constant(manual_bias(&model, layer, 1, 2, None));
    let y = layer.block.forward(&p, seq, Some(bias)).unwrap();
    let slice = y.slice(1, 0, 2).unwrap().reshape(&[2, 8]).unwrap();
    assert_eq!(next.domain.unwrap().value().data(), slice.value().data());
    assert!(next.task.is_none());
}

#[test]
fn prompt_channel_mismatch_is_rejected() {
    let model = Model::new(ModelConfig::toy()).unwrap();
    let layer = &model.encoder.stages[1].layers[0];
    let tape = Tape::new();
    let p = Bound::new(&tape, &model.params);
    let x = tape.constant(randn(&[1, 16, 8], 5));
    let bad = StagePrompts {
        domain: Some(tape.constant(randn(&[1, 4], 6))),
        task: None,
    };
    assert!(matches!(
        prompted_window_attention(&p, x, bad, layer, None),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn stage_token_counts_at_default_size() {
    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone()).unwrap();
    let tape = Tape::new();
    let p = Bound::new(&tape, &model.params);
    let img = tape.constant(image(64, 3, 7));
    let prompts = model.bank.select(Domain::Rgb, Task::Sod).bind(&p);
    let feats = model.encoder.forward(&p, img, &prompts).unwrap();
    let shapes: Vec<Vec<usize>> = feats.iter().map(|f| f.shape()).collect();
    assert_eq!(shapes, vec![vec![256, 16], vec![64, 32], vec![16, 64], vec![4, 128]]);
}

#[test]
fn decoder_sees_twenty_eight_tokens_at_coarsest_level() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.decoder_levels(), vec![2, 1, 0]);
    let model = Model::new(cfg.clone()).unwrap();
    assert_eq!(model.decoder.sequence_len(0, cfg.decoder_task_prompt_length), 2 + 10 + 16);
    assert_eq!(model.decoder.sequence_len(2, 0), 2 + 256);
}

#[test]
fn decoder_prompts_are_not_inert() {
    let with = ModelConfig::toy();
    let without = ModelConfig {
        decoder_task_prompt_length: 0,
        ..with.clone()
    };
    let rgb = image(16, 3, 8);
    let input = Input { rgb: &rgb, aux: None };
    let a = Model::new(with).unwrap().predict(input, Domain::Rgb, Task::Sod).unwrap();
    let b = Model::new(without).unwrap().predict(input, Domain::Rgb, Task::Sod).unwrap();
    assert_eq!(a.mask_logits.shape(), b.mask_logits.shape());
    assert_ne!(a.mask_logits, b.mask_logits);
}

#[test]
fn zero_shot_composition_is_accepted() {
    let model = Model::new(ModelConfig::toy()).unwrap();
    let rgb = image(16, 3, 9);
    let aux = image(16, 1, 10);
    let pred = model
        .predict(Input { rgb: &rgb, aux: Some(&aux) }, Domain::Depth, Task::Cod)
        .unwrap();
    assert_eq!(pred.mask_logits.shape(), &[16, 16]);
    let probs = pred.mask_probs();
    assert!(probs.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    let err = model.predict(Input { rgb: &rgb, aux: None }, Domain::Flow, Task::Cod).unwrap_err();
    assert!(matches!(err, Error::MissingAux(_)));
}

#[test]
fn every_selection_agrees_without_prompts() {
    let cfg = ModelConfig::toy().with_prompt_lengths(0, 0, 0);
    let model = Model::new(cfg).unwrap();
    let rgb = image(16, 3, 11);
    let aux = image(16, 1, 12);
    let input = Input { rgb: &rgb, aux: Some(&aux) };
    let reference = model.predict(input, Domain::Depth, Task::Sod).unwrap();
    for d in [Domain::Depth, Domain::Thermal, Domain::Flow] {
        for t in Task::ALL {
            assert_eq!(model.predict(input, d, t).unwrap(), reference);
        }
    }
    let plain = Input { rgb: &rgb, aux: None };
    let reference = model.predict(plain, Domain::Rgb, Task::Sod).unwrap();
    assert_eq!(model.predict(plain, Domain::Rgb, Task::Cod).unwrap(), reference);
}

#[test]
fn prompt_count_formula() {
    let cfg = ModelConfig::default();
    let c = cfg.stage_channels;
    let nd = cfg.domain_prompt_lengths;
    let nt = cfg.task_prompt_lengths;
    let by_hand: usize = (0..4).map(|i| 4 * nd[i] * c[i] + 2 * nt[i] * c[i]).sum::<usize>()
        + 2 * cfg.decoder_task_prompt_length * cfg.decoder_width;
    // 4*(16+32+64+128) + 2*(16+32+320+1280) + 2*10*32
    assert_eq!(by_hand, 960 + 3296 + 640);
    assert_eq!(cfg.prompt_param_count(), by_hand);
    let model = Model::new(cfg.clone()).unwrap();
    assert_eq!(model.prompt_param_count(), by_hand);
    assert_eq!(model.param_count(), cfg.total_param_count());
    assert!((by_hand as f64) < 0.01 * model.param_count() as f64);
}

#[test]
fn convertor_layers_are_standard_layers() {
    let cfg = ModelConfig::default();
    let deeper = ModelConfig {
        convertor_depth: cfg.convertor_depth + 1,
        ..cfg.clone()
    };
    assert_eq!(
        deeper.total_param_count() - cfg.total_param_count(),
        TransformerLayer::param_count(cfg.decoder_width, cfg.mlp_ratio)
    );
    let model = Model::new(cfg).unwrap();
    let tape = Tape::new();
    let p = Bound::new(&tape, &model.params);
    let f = tape.constant(randn(&[4, 32], 13));
    assert_eq!(model.convertor_forward(&p, f).unwrap().shape(), vec![4, 32]);
}
