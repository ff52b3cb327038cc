mod common;

use amde::diffcore::{Tape, Tensor};
use amde::encoder::ops::{global_pool, lstm_encode, lstm_step, row_pool_reduce};
use amde::encoder::{BoundLayer, EncoderConfig, EncoderModel, LocalBranch, LocalParams};
use common::{lstm_encode_scalar, lstm_step_scalar, rng, tensor, uniform};
use proptest::prelude::*;

fn small(local_branch: LocalBranch) -> EncoderConfig {
    EncoderConfig {
        input_shape: [1, 32, 16],
        backbone_channels: [4, 6],
        feature_channels: 8,
        map_height: 4,
        map_width: 2,
        reduced_channels: 5,
        lstm_hidden: 4,
        embed_dim: 6,
        num_classes: 5,
        local_branch,
        ..EncoderConfig::default()
    }
}

fn run_lstm(w: &Tensor, b: Option<&Tensor>, steps: &[Tensor]) -> Vec<f64> {
    let mut tape = Tape::new();
    let wv = tape.constant(w.clone());
    let bv = b.map(|b| tape.constant(b.clone()));
    let xs: Vec<_> = steps.iter().map(|s| tape.constant(s.clone())).collect();
    let h = lstm_encode(&mut tape, &xs, wv, bv).unwrap();
    tape.value(h).data().to_vec()
}

#[test]
fn lstm_matches_scalar_transcription() {
    let mut r = rng(20);
    for case in 0..100 {
        let c = 1 + case % 4;
        let e = 1 + (case / 4) % 4;
        let len = 1 + case % 8;
        let w = Tensor::new(
            vec![4 * e, c + e],
            uniform(&mut r, 4 * e * (c + e), -1.5, 1.5),
        )
        .unwrap();
        let b = Tensor::from_vec(uniform(&mut r, 4 * e, -1.0, 1.0));
        let seq: Vec<Vec<f64>> = (0..len).map(|_| uniform(&mut r, c, -2.0, 2.0)).collect();
        let steps: Vec<Tensor> = seq
            .iter()
            .map(|s| Tensor::new(vec![1, c], s.clone()).unwrap())
            .collect();
        let bias = (case % 2 == 0).then_some(&b);
        let got = run_lstm(&w, bias, &steps);
        let want = lstm_encode_scalar(w.data(), bias.map(|b| b.data()), &seq, e);
        for (g, o) in got.iter().zip(&want) {
            assert!((g - o).abs() <= 1e-10, "case {case}: {g} vs {o}");
        }
    }
}

#[test]
fn lstm_step_matches_scalar_step_with_state() {
    let mut r = rng(21);
    for _ in 0..50 {
        let (c, e) = (3, 4);
        let w = Tensor::new(
            vec![4 * e, c + e],
            uniform(&mut r, 4 * e * (c + e), -1.0, 1.0),
        )
        .unwrap();
        let b = Tensor::from_vec(uniform(&mut r, 4 * e, -1.0, 1.0));
        let (s, h, d) = (
            uniform(&mut r, c, -1.0, 1.0),
            uniform(&mut r, e, -1.0, 1.0),
            uniform(&mut r, e, -2.0, 2.0),
        );
        let mut tape = Tape::new();
        let wv = tape.constant(w.clone());
        let bv = tape.constant(b.clone());
        let sv = tape.constant(Tensor::new(vec![1, c], s.clone()).unwrap());
        let hv = tape.constant(Tensor::new(vec![1, e], h.clone()).unwrap());
        let dv = tape.constant(Tensor::new(vec![1, e], d.clone()).unwrap());
        let (h1, d1) = lstm_step(&mut tape, sv, hv, dv, wv, Some(bv)).unwrap();
        let (h_ref, d_ref) = lstm_step_scalar(w.data(), Some(b.data()), &s, &h, &d);
        for u in 0..e {
            assert!((tape.value(h1).data()[u] - h_ref[u]).abs() <= 1e-10);
            assert!((tape.value(d1).data()[u] - d_ref[u]).abs() <= 1e-10);
        }
    }
}

#[test]
fn zero_weight_lstm_sits_at_its_fixed_point() {
    let (c, e) = (3, 2);
    let w = Tensor::zeros(vec![4 * e, c + e]);
    let mut tape = Tape::new();
    let wv = tape.constant(w.clone());
    let s = tape.constant(Tensor::new(vec![1, c], vec![0.3, -2.0, 5.0]).unwrap());
    let z = tape.constant(Tensor::zeros(vec![1, e]));
    let (h, d) = lstm_step(&mut tape, s, z, z, wv, None).unwrap();
    assert_eq!(tape.value(h).data(), [0.0, 0.0]);
    assert_eq!(tape.value(d).data(), [0.0, 0.0]);
    let steps = vec![Tensor::new(vec![1, c], vec![1.0, 2.0, 3.0]).unwrap(); 8];
    assert_eq!(run_lstm(&w, None, &steps), [0.0, 0.0]);
}

#[test]
fn single_step_sequence_equals_one_step() {
    let mut r = rng(22);
    let (c, e) = (4, 3);
    let w = tensor(&mut r, &[4 * e, c + e]);
    let b = tensor(&mut r, &[4 * e]);
    let s = tensor(&mut r, &[2, c]);
    let mut tape = Tape::new();
    let (wv, bv, sv) = (
        tape.constant(w.clone()),
        tape.constant(b.clone()),
        tape.constant(s.clone()),
    );
    let z = tape.constant(Tensor::zeros(vec![2, e]));
    let (h, _) = lstm_step(&mut tape, sv, z, z, wv, Some(bv)).unwrap();
    let encoded = run_lstm(&w, Some(&b), &[s]);
    assert_eq!(tape.value(h).data(), encoded.as_slice());
}

#[test]
fn default_backbone_shape_and_sequence_length() {
    let model = EncoderModel::new(EncoderConfig::default(), 0).unwrap();
    let mut r = rng(23);
    let img = tensor(&mut r, &[1, 64, 32]);
    assert_eq!(model.feature_map(&img).unwrap().shape(), [64, 8, 4]);

    let mut tape = Tape::new();
    let enc = model.bind(&mut tape, false);
    let x = tape.constant(Tensor::stack(&[img]).unwrap());
    let fmap = amde::encoder::ops::backbone_forward(&mut tape, &enc, x).unwrap();
    let stacked = row_pool_reduce(&mut tape, fmap, enc.reduction.unwrap()).unwrap();
    let steps = amde::encoder::ops::sequence_steps(&mut tape, stacked).unwrap();
    assert_eq!(steps.len(), 8);
}

#[test]
fn zero_backbone_gives_zero_map() {
    let mut model = EncoderModel::new(small(LocalBranch::Lstm), 1).unwrap();
    for l in &mut model.backbone {
        l.weight.data_mut().fill(0.0);
        l.bias.data_mut().fill(0.0);
    }
    let mut r = rng(24);
    let map = model.feature_map(&tensor(&mut r, &[1, 32, 16])).unwrap();
    assert!(map.data().iter().all(|&v| v == 0.0));
}

#[test]
fn global_pool_matches_channel_means_and_ignores_order() {
    let mut r = rng(25);
    let (b, c, h, w) = (2, 3, 4, 5);
    let map = tensor(&mut r, &[b, c, h, w]);
    let pooled = |m: &Tensor| {
        let mut tape = Tape::new();
        let v = tape.constant(m.clone());
        let p = global_pool(&mut tape, v).unwrap();
        tape.value(p).clone()
    };
    let out = pooled(&map);
    for n in 0..b {
        for ch in 0..c {
            let base = (n * c + ch) * h * w;
            let mean = map.data()[base..base + h * w].iter().sum::<f64>() / (h * w) as f64;
            assert!((out.data()[n * c + ch] - mean).abs() <= 1e-12);
        }
    }
    // Reverse the spatial positions of every channel.
    let mut flipped = map.clone();
    for chunk in flipped.data_mut().chunks_mut(h * w) {
        chunk.reverse();
    }
    let again = pooled(&flipped);
    for (x, y) in out.data().iter().zip(again.data()) {
        assert!((x - y).abs() <= 1e-12);
    }
    let constant = pooled(&Tensor::full(vec![1, c, h, w], -0.75));
    assert!(constant.data().iter().all(|&v| (v + 0.75).abs() <= 1e-15));
}

// Index loops keep the oracle a literal transcription.
#[allow(clippy::needless_range_loop)]
#[test]
fn row_pool_matches_two_stage_oracle() {
    let mut r = rng(26);
    let (b, cf, h, w, c) = (2, 6, 4, 3, 5);
    let map = tensor(&mut r, &[b, cf, h, w]);
    let weight = tensor(&mut r, &[c, cf, 1, 1]);
    let bias = tensor(&mut r, &[c]);
    let mut tape = Tape::new();
    let m = tape.constant(map.clone());
    let layer = BoundLayer {
        weight: tape.constant(weight.clone()),
        bias: tape.constant(bias.clone()),
    };
    let out = row_pool_reduce(&mut tape, m, layer).unwrap();
    let out = tape.value(out).clone();
    assert_eq!(out.shape(), [b, c, h, 1]);
    for n in 0..b {
        // Stage one: explicit row means.
        let mut rows = vec![vec![0.0; cf]; h];
        for ch in 0..cf {
            for y in 0..h {
                let base = ((n * cf + ch) * h + y) * w;
                rows[y][ch] = map.data()[base..base + w].iter().sum::<f64>() / w as f64;
            }
        }
        // Stage two: explicit matrix multiply.
        for o in 0..c {
            for (y, row) in rows.iter().enumerate() {
                let mut acc = bias.data()[o];
                for ch in 0..cf {
                    acc += weight.data()[o * cf + ch] * row[ch];
                }
                assert!((out.data()[(n * c + o) * h + y] - acc).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn identity_reduction_passes_constant_rows_through() {
    let (cf, h, w) = (4, 3, 2);
    let mut eye = Tensor::zeros(vec![cf, cf, 1, 1]);
    for i in 0..cf {
        eye.data_mut()[i * cf + i] = 1.0;
    }
    let mut tape = Tape::new();
    let m = tape.constant(Tensor::full(vec![1, cf, h, w], 0.4));
    let layer = BoundLayer {
        weight: tape.constant(eye),
        bias: tape.constant(Tensor::zeros(vec![cf])),
    };
    let out = row_pool_reduce(&mut tape, m, layer).unwrap();
    assert!(tape
        .value(out)
        .data()
        .iter()
        .all(|&v| (v - 0.4).abs() <= 1e-15));
}

#[test]
fn output_lengths_follow_config() {
    for branch in [
        LocalBranch::None,
        LocalBranch::Conv,
        LocalBranch::Fc,
        LocalBranch::Rnn,
        LocalBranch::Lstm,
    ] {
        let cfg = small(branch);
        let model = EncoderModel::new(cfg.clone(), 2).unwrap();
        let mut r = rng(27);
        let out = model.forward(&tensor(&mut r, &[1, 32, 16])).unwrap();
        assert_eq!(out.embedding.len(), cfg.embed_dim);
        assert_eq!(out.logits.len(), cfg.num_classes);
        assert_eq!(out.self_feature.is_some(), branch != LocalBranch::None);
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = small(LocalBranch::Lstm);
    let a = EncoderModel::new(cfg.clone(), 9).unwrap();
    let b = EncoderModel::new(cfg, 9).unwrap();
    let mut r = rng(28);
    let img = tensor(&mut r, &[1, 32, 16]);
    let (x, y) = (a.forward(&img).unwrap(), b.forward(&img).unwrap());
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&x.embedding), bits(&y.embedding));
    assert_eq!(bits(&x.logits), bits(&y.logits));
}

#[test]
fn zero_lstm_gives_zero_self_feature() {
    let mut model = EncoderModel::new(small(LocalBranch::Lstm), 3).unwrap();
    let LocalParams::Lstm(p) = &mut model.local else {
        unreachable!()
    };
    p.weight.data_mut().fill(0.0);
    if let Some(b) = &mut p.bias {
        b.data_mut().fill(0.0);
    }
    let mut r = rng(29);
    let out = model.forward(&tensor(&mut r, &[1, 32, 16])).unwrap();
    assert!(out.self_feature.unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn forget_gate_bias_starts_at_one() {
    let model = EncoderModel::new(small(LocalBranch::Lstm), 4).unwrap();
    let LocalParams::Lstm(p) = &model.local else {
        unreachable!()
    };
    let e = model.config.lstm_hidden;
    let b = p.bias.as_ref().unwrap().data();
    assert!(b[..e].iter().all(|&v| v == 0.0));
    assert!(b[e..2 * e].iter().all(|&v| v == 1.0));
    assert!(b[2 * e..].iter().all(|&v| v == 0.0));
    assert_eq!(p.weight.shape(), [4 * e, model.config.reduced_channels + e]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lstm_output_is_bounded(seed in 0u64..100_000, scale in 0.1f64..50.0) {
        let mut r = rng(seed);
        let (c, e, len) = (3, 3, 6);
        let w = Tensor::new(vec![4 * e, c + e], uniform(&mut r, 4 * e * (c + e), -scale, scale)).unwrap();
        let b = Tensor::from_vec(uniform(&mut r, 4 * e, -scale, scale));
        let steps: Vec<Tensor> = (0..len)
            .map(|_| Tensor::new(vec![1, c], uniform(&mut r, c, -scale, scale)).unwrap())
            .collect();
        for v in run_lstm(&w, Some(&b), &steps) {
            prop_assert!(v > -1.0 && v < 1.0);
        }
    }

    #[test]
    fn row_pool_only_sees_its_own_row(seed in 0u64..100_000, row in 0usize..4) {
        let mut r = rng(seed);
        let (cf, h, w, c) = (3, 4, 5, 2);
        let map = tensor(&mut r, &[1, cf, h, w]);
        let weight = tensor(&mut r, &[c, cf, 1, 1]);
        let bias = tensor(&mut r, &[c]);
        let pool = |m: &Tensor| {
            let mut tape = Tape::new();
            let mv = tape.constant(m.clone());
            let layer = BoundLayer { weight: tape.constant(weight.clone()), bias: tape.constant(bias.clone()) };
            let out = row_pool_reduce(&mut tape, mv, layer).unwrap();
            tape.value(out).clone()
        };
        let base = pool(&map);
        // Permute positions inside `row` and overwrite another row.
        let mut changed = map.clone();
        let other = (row + 1) % h;
        for ch in 0..cf {
            let start = (ch * h + row) * w;
            changed.data_mut()[start..start + w].rotate_left(2);
            let o = (ch * h + other) * w;
            changed.data_mut()[o..o + w].fill(9.0);
        }
        let after = pool(&changed);
        for o in 0..c {
            prop_assert!((base.data()[o * h + row] - after.data()[o * h + row]).abs() <= 1e-12);
        }
    }

    #[test]
    fn global_only_encoder_ignores_row_internal_order(seed in 0u64..100_000) {
        let model = EncoderModel::new(small(LocalBranch::None), seed).unwrap();
        let mut r = rng(seed);
        let map = tensor(&mut r, &[1, 8, 4, 2]);
        let embed = |m: &Tensor| {
            let mut tape = Tape::new();
            let enc = model.bind(&mut tape, false);
            let mv = tape.constant(m.clone());
            let g = global_pool(&mut tape, mv).unwrap();
            let wt = tape.transpose(enc.fusion.weight).unwrap();
            let e = tape.matmul(g, wt).unwrap();
            let e = tape.add_bias(e, enc.fusion.bias).unwrap();
            tape.value(e).clone()
        };
        let mut swapped = map.clone();
        for chunk in swapped.data_mut().chunks_mut(2) {
            chunk.swap(0, 1);
        }
        let (a, b) = (embed(&map), embed(&swapped));
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}
