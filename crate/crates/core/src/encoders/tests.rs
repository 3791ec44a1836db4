use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::gradcheck::gradcheck_params;

fn small() -> EncoderConfig {
    EncoderConfig {
        proprio_dim: 5,
        frames: 2,
        height: 8,
        width: 8,
        patch: 4,
        token_width: 6,
        proprio_hidden: vec![7, 7],
        proprio_embed: 4,
        visual_embed: 5,
        max_range: 5.0,
        temporal_pos: false,
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_f64(shape, &(0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>()).unwrap()
}

#[test]
fn token_count_law() {
    assert_eq!(visual_token_count(16, 16, 4).unwrap(), 16);
    assert_eq!(visual_token_count(64, 64, 8).unwrap(), 64);
    assert_eq!(visual_token_count(12, 8, 4).unwrap(), 6);
    assert!(visual_token_count(10, 16, 4).is_err());
    let bad = EncoderConfig { height: 18, ..small() };
    assert!(Encoders::new(&mut ParamStore::<f64>::new(), &bad, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn patchify_raster_order_and_frames_as_channels() {
    // 1 batch, 2 frames, 4x4 image, patch 2: value encodes (frame, row, col)
    let data: Vec<f64> = (0..2)
        .flat_map(|f| (0..4).flat_map(move |r| (0..4).map(move |c| (f * 100 + r * 10 + c) as f64)))
        .collect();
    let t = Tensor::<f64>::from_f64(&[1, 2, 4, 4], &data).unwrap();
    let p = patchify(&t, 2).unwrap();
    assert_eq!(p.shape(), &[1, 4, 8]);
    // second patch in raster order is rows 0..2, cols 2..4
    assert_eq!(&p.data()[8..16], &[2.0, 3.0, 12.0, 13.0, 102.0, 103.0, 112.0, 113.0]);
    assert!(patchify(&Tensor::<f64>::zeros(&[1, 1, 4, 5]), 2).is_err());
}

#[test]
fn zero_proprio_with_zero_biases_gives_zero_embedding() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let enc = Encoders::new(&mut store, &small(), &mut rng).unwrap();
    let tape = Tape::<f64>::no_grad();
    let x = tape.constant(Tensor::zeros(&[3, 5])).unwrap();
    let z = tape.value(enc.encode_proprio(&tape, &store, x).unwrap());
    assert_eq!(z.shape(), &[3, 4]);
    assert!(z.data().iter().all(|&v| v == 0.0));
    // wrong width
    let bad = tape.constant(Tensor::zeros(&[3, 4])).unwrap();
    assert!(enc.encode_proprio(&tape, &store, bad).is_err());

    let zv = tape.value(enc.encode_depth(&tape, &store, &Tensor::zeros(&[2, 2, 8, 8])).unwrap());
    assert_eq!(zv.shape(), &[2, 4, 5]);
    assert!(zv.data().iter().all(|&v| v == 0.0));
}

#[test]
fn finalized_rows_are_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let mut enc = Encoders::new(&mut store, &small(), &mut rng).unwrap();
    // the default eps shrinks the variance by v/(v+eps); take it out of the picture
    enc.norm.eps = 1e-12;
    let tape = Tape::<f64>::no_grad();
    let prop = rand_tensor(&mut rng, &[2, 5], -1.0, 1.0);
    let depth = rand_tensor(&mut rng, &[2, 2, 8, 8], 0.0, 5.0);
    let out = tape.value(enc.encode(&tape, &store, &prop, &depth, enc.layout(true, true)).unwrap());
    assert_eq!(out.shape(), &[2, 5, 6]);
    for row in out.data().chunks(6) {
        let mean = row.iter().sum::<f64>() / 6.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4, "{var}");
    }
}

#[test]
fn layernorm_is_idempotent_with_zero_codes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let mut enc = Encoders::new(&mut store, &small(), &mut rng).unwrap();
    // the default eps shrinks the variance by v/(v+eps); take it out of the picture
    enc.norm.eps = 1e-12;
    store.set(enc.pos, Tensor::zeros(&[5, 6])).unwrap();
    store.set(enc.modality, Tensor::zeros(&[2, 6])).unwrap();
    let tape = Tape::<f64>::no_grad();
    let prop = rand_tensor(&mut rng, &[1, 5], -1.0, 1.0);
    let depth = rand_tensor(&mut rng, &[1, 2, 8, 8], 0.0, 5.0);
    let once = enc.encode(&tape, &store, &prop, &depth, enc.layout(true, true)).unwrap();
    let twice = enc.norm.forward(&tape, &store, once).unwrap();
    assert!(tape.value(once).max_abs_diff(&tape.value(twice)) < 1e-6);
}

#[test]
fn modality_table_has_two_distinct_rows_and_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let enc = Encoders::new(&mut store, &small(), &mut rng).unwrap();
    let m = store.get(enc.modality);
    assert_eq!(m.shape(), &[2, 6]);
    assert!(m.data()[..6] != m.data()[6..]);

    let prop = rand_tensor(&mut rng, &[1, 5], -1.0, 1.0);
    let depth = rand_tensor(&mut rng, &[1, 2, 8, 8], 0.0, 5.0);
    let a = {
        let tape = Tape::<f64>::no_grad();
        let zp = enc.encode_proprio(&tape, &store, tape.constant(prop.clone()).unwrap()).unwrap();
        let zv = enc.encode_depth(&tape, &store, &depth).unwrap();
        tape.value(enc.assemble(&tape, &store, Some(zp), Some(zv)).unwrap())
    };
    let b = {
        let tape = Tape::<f64>::no_grad();
        let zv = enc.encode_depth(&tape, &store, &depth).unwrap();
        let zp = enc.encode_proprio(&tape, &store, tape.constant(prop.clone()).unwrap()).unwrap();
        tape.value(enc.assemble(&tape, &store, Some(zp), Some(zv)).unwrap())
    };
    assert_eq!(a, b);
}

#[test]
fn permuting_visual_tokens_permutes_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let enc = Encoders::new(&mut store, &small(), &mut rng).unwrap();
    // identical positional codes so only the token content decides each row
    store.set(enc.pos, Tensor::zeros(&[5, 6])).unwrap();
    let zv = rand_tensor(&mut rng, &[1, 4, 5], -1.0, 1.0);
    let perm = [2usize, 0, 3, 1];
    let permuted: Vec<f64> = perm.iter().flat_map(|&i| zv.data()[i * 5..(i + 1) * 5].to_vec()).collect();
    let run = |z: Tensor<f64>| {
        let tape = Tape::<f64>::no_grad();
        let v = tape.constant(z).unwrap();
        tape.value(enc.assemble(&tape, &store, None, Some(v)).unwrap())
    };
    let base = run(zv.clone());
    let moved = run(Tensor::new(vec![1, 4, 5], permuted).unwrap());
    for (row, &src) in perm.iter().enumerate() {
        assert_eq!(&moved.data()[row * 6..(row + 1) * 6], &base.data()[src * 6..(src + 1) * 6]);
    }
}

#[test]
fn encoder_gradcheck_all_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f64>::new();
    let cfg = EncoderConfig { temporal_pos: true, ..small() };
    let enc = Encoders::new(&mut store, &cfg, &mut rng).unwrap();
    let prop = rand_tensor(&mut rng, &[2, 5], -1.0, 1.0);
    let depth = rand_tensor(&mut rng, &[2, 2, 8, 8], 0.0, 5.0);
    let w = rand_tensor(&mut rng, &[2, 5, 6], -1.0, 1.0);
    let layout = enc.layout(true, true);
    let res = gradcheck_params("encoders", &store, &enc.params(layout), &[prop], |tape, st, v| {
        let zp = enc.encode_proprio(tape, st, v[0])?;
        let zv = enc.encode_depth(tape, st, &depth)?;
        let out = enc.assemble(tape, st, Some(zp), Some(zv))?;
        tape.sum_all(tape.mul(out, tape.constant(w.clone())?)?)
    })
    .unwrap();
    assert!(res.max_rel_err < 1e-6, "{res:?}");
}

#[test]
fn depth_salt_noise_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let frame: Vec<f32> = (0..256).map(|_| rng.random_range(0.0..4.9)).collect();
        let seed = rng.random::<u64>();
        let (out, picked) = perturb_depth(&frame, 5.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let changed: Vec<usize> = (0..256).filter(|&i| out[i] != frame[i]).collect();
        assert!((3..=30).contains(&changed.len()));
        assert!(changed.iter().all(|&i| out[i] == 5.0));
        let mut sorted = picked.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, changed);
        let (again, _) = perturb_depth(&frame, 5.0, &mut ChaCha8Rng::seed_from_u64(seed));
        assert_eq!(out, again);
    }
}

#[test]
fn default_config_gives_65_tokens_of_width_128() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::<f32>::new();
    let enc = Encoders::new(&mut store, &EncoderConfig::default(), &mut rng).unwrap();
    let tape = Tape::<f32>::no_grad();
    let out = enc
        .encode(&tape, &store, &Tensor::zeros(&[1, 93]), &Tensor::full(&[1, 4, 64, 64], 2.0), enc.layout(true, true))
        .unwrap();
    assert_eq!(tape.shape(out), vec![1, 65, 128]);
}
