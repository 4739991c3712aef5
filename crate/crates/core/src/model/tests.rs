use rand::Rng as _;

use super::*;
use crate::autodiff::grad_check_many;
use crate::corpus::{generate_corpus, GeneratorConfig, KeypointKind, KeypointPair, TemplateMix};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 4,
        num_queries: 5,
        ffn_hidden: 16,
        stem_channels: 4,
        image_height: 16,
        image_width: 16,
        ..ModelConfig::default()
    }
}

fn stats() -> CooccurrenceStats {
    let g = GeneratorConfig::default();
    let c = generate_corpus(3, 40, &TemplateMix::uniform(&g.templates), &g).unwrap();
    CooccurrenceStats::from_corpus(&c).unwrap()
}

fn random_input(config: &ModelConfig, seed: u64) -> SceneInput {
    let mut rng = stream(seed);
    let pixels = Tensor::from_fn(&[3, config.image_height, config.image_width], |_| rng.random());
    let mut keypoints = Keypoints::default();
    for kind in KeypointKind::ALL {
        if rng.random::<f64>() < 0.8 {
            let y: f64 = rng.random_range(-0.2..1.2);
            keypoints.pairs[kind.index()] = Some(KeypointPair {
                left: [rng.random(), y],
                right: [rng.random(), y + rng.random_range(-0.05..0.05)],
                score_left: rng.random(),
                score_right: rng.random(),
            });
        }
    }
    SceneInput { pixels, keypoints }
}

/// Randomizes every context-encoder parameter so relation weights are nonzero.
fn randomize_context(det: &mut Detector, seed: u64) {
    let mut rng = stream(seed);
    let ids: Vec<ParamId> = det
        .store
        .iter()
        .filter(|(_, name, _)| name.starts_with("ctx."))
        .map(|(id, _, _)| id)
        .collect();
    for id in ids {
        for v in det.store.get_mut(id).data_mut() {
            *v = rng.random_range(-1.5..1.5);
        }
    }
}

fn hooked<'a>(h: &'a mut RelationHook<'a>) -> ForwardOptions<'a> {
    ForwardOptions {
        relation_hook: Some(h),
        ..ForwardOptions::default()
    }
}

fn forward_values(det: &Detector, input: &SceneInput, stats: Option<&CooccurrenceStats>) -> Vec<LayerPrediction> {
    det.predict(input, stats).unwrap()
}

fn random_context(n: usize, seed: u64) -> ContextMatrices {
    let mut rng = stream(seed);
    let mut ctx = ContextMatrices::zeros(n);
    for v in ctx.co.iter_mut().chain(ctx.pos.iter_mut()).chain(ctx.human.iter_mut()) {
        *v = rng.random_range(-3.0..3.0);
    }
    ctx
}

#[test]
fn memory_shape_for_default_config() {
    let det = Detector::new(ModelConfig::default(), 1).unwrap();
    let mut tape = Tape::new();
    let p = det.params().bind_frozen(&mut tape);
    let input = random_input(det.config(), 2);
    let px = tape.constant(input.pixels.clone());
    let m = det.stem_and_encode(&mut tape, &p, px).unwrap();
    assert_eq!(tape.shape(m), &[256, 64]);
    let wrong = tape.constant(Tensor::zeros(&[3, 32, 32]));
    assert!(matches!(det.stem_and_encode(&mut tape, &p, wrong), Err(Error::Shape { .. })));
}

#[test]
fn encoder_is_permutation_equivariant_without_positions() {
    let det = Detector::new(tiny_config(), 4).unwrap();
    let mut rng = stream(5);
    let t = 16;
    let tokens = Tensor::from_fn(&[t, 8], |_| rng.random_range(-1.0..1.0));
    let perm: Vec<usize> = (0..t).map(|i| (i * 5 + 3) % t).collect();
    let mut tape = Tape::new();
    let p = det.params().bind_frozen(&mut tape);
    let zero = tape.constant(Tensor::zeros(&[t, 8]));
    let x = tape.constant(tokens);
    let xp = tape.gather_rows(x, &perm).unwrap();
    let y = det.encode_tokens(&mut tape, &p, x, zero).unwrap();
    let yp = det.encode_tokens(&mut tape, &p, xp, zero).unwrap();
    let y = tape.value(y).clone();
    let yp = tape.value(yp).clone();
    for (r, &src) in perm.iter().enumerate() {
        for (a, b) in yp.row(r).iter().zip(y.row(src)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn stem_output_finite_over_random_rasters() {
    let det = Detector::new(ModelConfig::default(), 7).unwrap();
    for seed in 0..100 {
        let mut input = random_input(det.config(), seed);
        if seed % 10 == 0 {
            // saturated and empty images
            let fill = if seed % 20 == 0 { 1.0 } else { 0.0 };
            input.pixels.data_mut().fill(fill);
        }
        let mut tape = Tape::new();
        let p = det.params().bind_frozen(&mut tape);
        let px = tape.constant(input.pixels);
        let m = det.stem_and_encode(&mut tape, &p, px).unwrap();
        assert!(tape.value(m).all_finite(), "seed {seed}");
    }
}

#[test]
fn zero_initialized_context_encoder_outputs_zero() {
    let det = Detector::new(tiny_config(), 9).unwrap();
    for layer in det.config().context_layers() {
        let w = det.relation_weights(layer, &random_context(5, layer as u64)).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn zero_context_and_zero_biases_output_zero() {
    let mut det = Detector::new(tiny_config(), 9).unwrap();
    randomize_context(&mut det, 3);
    let biases: Vec<ParamId> = det
        .store
        .iter()
        .filter(|(_, n, _)| n.starts_with("ctx.") && n.ends_with(".b"))
        .map(|(id, _, _)| id)
        .collect();
    for id in biases {
        det.store.get_mut(id).data_mut().fill(0.0);
    }
    let w = det.relation_weights(4, &ContextMatrices::zeros(5)).unwrap();
    assert!(w.data().iter().all(|&v| v == 0.0));
    let w = det.relation_weights(4, &random_context(5, 1)).unwrap();
    assert!(w.data().iter().any(|&v| v != 0.0));
}

#[test]
fn context_encoder_gradients_match_central_differences() {
    let mut det = Detector::new(tiny_config(), 11).unwrap();
    randomize_context(&mut det, 12);
    let layer = 3;
    let enc = det.context_encoder(layer).unwrap().clone();
    let ctx = random_context(4, 13);
    let ids: Vec<usize> = det
        .store
        .iter()
        .filter(|(_, n, _)| n.starts_with("ctx.2."))
        .map(|(id, _, _)| id.0)
        .collect();
    let values: Vec<Tensor> = ids.iter().map(|&i| det.store.get(ParamId(i)).clone()).collect();
    let total = det.store.len();
    let report = grad_check_many(
        |tape, xs| {
            let mut p: Vec<Var> = (0..total).map(|_| tape.constant(Tensor::scalar(0.0))).collect();
            for (k, &i) in ids.iter().enumerate() {
                p[i] = xs[k];
            }
            let w = det.context_encoder_forward(tape, &p, &enc, &ctx, Branches::ALL)?;
            tape.sum(w, None)
        },
        &values,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn zero_relation_weights_match_unbiased_attention_bitwise() {
    let config = ModelConfig {
        context_layers: Some(vec![]),
        ..tiny_config()
    };
    let vanilla = Detector::new(config, 21).unwrap();
    let mut holi = Detector::new(tiny_config(), 21).unwrap();
    randomize_context(&mut holi, 22);
    let s = stats();
    let input = random_input(holi.config(), 23);
    let expected = forward_values(&vanilla, &input, None);

    let mut tape = Tape::new();
    let p = holi.params().bind_frozen(&mut tape);
    let mut zero = |tape: &mut Tape, _l: usize, w: Option<Var>| -> Result<Option<Var>> {
        Ok(w.map(|w| tape.scale(w, 0.0)))
    };
    let out = holi.forward_with(&mut tape, &p, &input, Some(&s), hooked(&mut zero)).unwrap();
    let got: Vec<LayerPrediction> = out.layers.iter().map(|l| LayerPrediction::read(&tape, l)).collect();
    assert_eq!(got, expected);
}

#[test]
fn constant_shift_of_relation_weights_is_neutral() {
    let mut holi = Detector::new(tiny_config(), 31).unwrap();
    randomize_context(&mut holi, 32);
    let s = stats();
    for seed in 0..5 {
        let input = random_input(holi.config(), 40 + seed);
        let base = forward_values(&holi, &input, Some(&s));
        for c in [-7.5, 0.25, 30.0] {
            let mut tape = Tape::new();
            let p = holi.params().bind_frozen(&mut tape);
            let mut shift = |tape: &mut Tape, _l: usize, w: Option<Var>| -> Result<Option<Var>> {
                Ok(w.map(|w| tape.add_scalar(w, c)))
            };
            let out = holi.forward_with(&mut tape, &p, &input, Some(&s), hooked(&mut shift)).unwrap();
            for (l, o) in out.layers.iter().enumerate() {
                let got = LayerPrediction::read(&tape, o);
                for (a, b) in got.logits.data().iter().zip(base[l].logits.data()) {
                    assert!((a - b).abs() < 1e-10);
                }
                for (a, b) in got.boxes.data().iter().zip(base[l].boxes.data()) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
        // constant matrix versus zero
        let mut tape = Tape::new();
        let p = holi.params().bind_frozen(&mut tape);
        let mut constant = |tape: &mut Tape, _l: usize, w: Option<Var>| -> Result<Option<Var>> {
            Ok(w.map(|w| {
                let z = tape.scale(w, 0.0);
                tape.add_scalar(z, 3.0)
            }))
        };
        let a = holi.forward_with(&mut tape, &p, &input, Some(&s), hooked(&mut constant)).unwrap();
        let mut zero = |tape: &mut Tape, _l: usize, w: Option<Var>| -> Result<Option<Var>> {
            Ok(w.map(|w| tape.scale(w, 0.0)))
        };
        let b = holi.forward_with(&mut tape, &p, &input, Some(&s), hooked(&mut zero)).unwrap();
        for (x, y) in a.layers.iter().zip(&b.layers) {
            for (u, v) in tape.value(x.logits).data().iter().zip(tape.value(y.logits).data()) {
                assert!((u - v).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn large_bias_concentrates_attention() {
    let holi = Detector::new(tiny_config(), 51).unwrap();
    let s = stats();
    let input = random_input(holi.config(), 52);
    let mut tape = Tape::new();
    let p = holi.params().bind_frozen(&mut tape);
    let mut spike = |tape: &mut Tape, _l: usize, w: Option<Var>| -> Result<Option<Var>> {
        Ok(w.map(|_| {
            let mut t = Tensor::zeros(&[5, 5]);
            t.data_mut()[1] = 50.0;
            tape.constant(t)
        }))
    };
    let out = holi.forward_with(&mut tape, &p, &input, Some(&s), hooked(&mut spike)).unwrap();
    for layer in holi.config().context_layers() {
        for &a in &out.layers[layer - 1].self_attention {
            assert!(tape.value(a).at2(0, 1) >= 0.999);
        }
    }
}

#[test]
fn ablated_branches_equal_vanilla_decoder_bitwise() {
    let vanilla = Detector::new(
        ModelConfig {
            context_layers: Some(vec![]),
            ..tiny_config()
        },
        61,
    )
    .unwrap();
    let mut holi = Detector::new(tiny_config(), 61).unwrap();
    randomize_context(&mut holi, 62);
    for ((_, na, ta), (_, nb, tb)) in vanilla.params().iter().zip(holi.params().iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta, tb);
    }
    holi.set_branches(Branches::NONE);
    for seed in 0..3 {
        let input = random_input(holi.config(), 63 + seed);
        assert_eq!(forward_values(&holi, &input, None), forward_values(&vanilla, &input, None));
    }
}

#[test]
fn missing_stats_with_co_branch_is_config_error() {
    let holi = Detector::new(tiny_config(), 71).unwrap();
    let input = random_input(holi.config(), 72);
    assert!(matches!(holi.predict(&input, None), Err(Error::Config(_))));
    let mut kp_only = holi.clone();
    kp_only.set_branches(Branches::parse("kp").unwrap());
    kp_only.predict(&input, None).unwrap();
}

#[test]
fn context_path_is_detached_from_earlier_layers() {
    let mut holi = Detector::new(tiny_config(), 81).unwrap();
    randomize_context(&mut holi, 82);
    let s = stats();
    let input = random_input(holi.config(), 83);
    let mut tape = Tape::new();
    let p = holi.params().bind(&mut tape);
    let out = holi.forward(&mut tape, &p, &input, Some(&s)).unwrap();
    let mut parts = Vec::new();
    for l in &out.layers {
        if let Some(w) = l.relation_weights {
            parts.push(tape.sum(w, None).unwrap());
        }
    }
    assert_eq!(parts.len(), 3);
    let flat: Vec<Var> = parts.iter().map(|&v| tape.reshape(v, &[1]).unwrap()).collect();
    let cat = tape.concat(&flat, 0).unwrap();
    let loss = tape.sum(cat, None).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut ctx_grad = 0.0;
    for (id, name, t) in holi.params().iter() {
        let g = grads.get_or_zeros(p[id.0], t.len());
        let norm: f64 = g.iter().map(|v| v * v).sum();
        if name.starts_with("ctx.") {
            ctx_grad += norm;
        } else {
            assert_eq!(norm, 0.0, "{name} receives gradient through the context path");
        }
    }
    assert!(ctx_grad > 0.0);
}

#[test]
fn context_layers_consume_preceding_predictions() {
    let config = ModelConfig {
        n_decoder_layers: 6,
        ..tiny_config()
    };
    let mut holi = Detector::new(config, 91).unwrap();
    randomize_context(&mut holi, 92);
    let s = stats();
    let input = random_input(holi.config(), 93);
    let mut tape = Tape::new();
    let p = holi.params().bind_frozen(&mut tape);
    let out = holi.forward(&mut tape, &p, &input, Some(&s)).unwrap();
    for (l, layer) in out.layers.iter().enumerate() {
        let number = l + 1;
        assert_eq!(layer.context.is_some(), [4, 5, 6].contains(&number));
        if let Some(ctx) = &layer.context {
            let q = LayerPrediction::read(&tape, &out.layers[l - 1]).query_state();
            let expected = relate::build_context(&q, Some(&s), &input.keypoints, 0.3, Branches::ALL).unwrap();
            assert_eq!(ctx, &expected);
        }
    }
}

#[test]
fn permuting_queries_permutes_predictions() {
    let mut holi = Detector::new(tiny_config(), 101).unwrap();
    randomize_context(&mut holi, 102);
    let s = stats();
    let input = random_input(holi.config(), 103);
    let base = forward_values(&holi, &input, Some(&s));
    let perm = [3usize, 0, 4, 1, 2];
    let mut permuted = holi.clone();
    let q = holi.net.query_embed;
    let src = holi.store.get(q).clone();
    let dst = permuted.store.get_mut(q);
    for (r, &from) in perm.iter().enumerate() {
        dst.data_mut()[r * 8..(r + 1) * 8].copy_from_slice(src.row(from));
    }
    let got = forward_values(&permuted, &input, Some(&s));
    for (a, b) in got.iter().zip(&base) {
        for (r, &from) in perm.iter().enumerate() {
            for (x, y) in a.logits.row(r).iter().zip(b.logits.row(from)) {
                assert!((x - y).abs() < 1e-10);
            }
            for (x, y) in a.boxes.row(r).iter().zip(b.boxes.row(from)) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn predictions_are_bounded_and_finite() {
    let holi = Detector::new(tiny_config(), 111).unwrap();
    let s = stats();
    let pred = forward_values(&holi, &random_input(holi.config(), 112), Some(&s));
    assert_eq!(pred.len(), 4);
    for l in &pred {
        assert_eq!(l.logits.shape(), &[5, 13]);
        assert!(l.logits.all_finite());
        assert!(l.boxes.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn no_nonfinite_activation_under_fuzzing() {
    let mut holi = Detector::new(tiny_config(), 121).unwrap();
    randomize_context(&mut holi, 122);
    let s = stats();
    let mut rng = stream(123);
    for i in 0..1000u64 {
        let mut input = random_input(holi.config(), 1000 + i);
        if i % 7 == 0 {
            for v in input.pixels.data_mut() {
                *v = rng.random_range(-50.0..50.0);
            }
        }
        if i % 11 == 0 {
            // keypoint exactly on every box center row is handled by the EPS floor
            for pair in input.keypoints.pairs.iter_mut().flatten() {
                pair.left[1] = 0.5;
                pair.right[1] = 0.5;
            }
        }
        let mut tape = Tape::new();
        let p = holi.params().bind(&mut tape);
        holi.forward(&mut tape, &p, &input, Some(&s)).unwrap();
        for v in 0..tape.len() {
            assert!(tape.value(Var(v)).all_finite(), "pass {i}, node {v}");
        }
    }
}

#[test]
fn checkpoint_round_trip_keeps_config_and_weights() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt-0.bin");
    let mut det = Detector::new(tiny_config(), 131).unwrap();
    randomize_context(&mut det, 132);
    det.save(&path, serde_json::json!({"seed": 131})).unwrap();
    let (back, extra) = Detector::load(&path).unwrap();
    assert_eq!(back.config(), det.config());
    assert_eq!(back.params(), det.params());
    assert_eq!(extra["seed"], 131);
    let other = ModelConfig {
        d_model: 16,
        ..tiny_config()
    };
    assert!(Detector::from_store(other, det.params().clone()).is_err());
}
