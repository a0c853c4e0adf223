use dynamixer::mixer::weights::{Linear, ReweightWeights};
use dynamixer::mixer::{
    build_model, drop_path, dynamixer_block, dynamixer_op, generate_mixing_matrices, model_forward, BlockWeights,
    DynaMixerOpWeights, Leaf, Mode, Params,
};
use dynamixer::oracle::{
    grid_from_tensor, naive_block, naive_dynamixer_op, naive_mixing_matrices, naive_model_forward, param_formula, Grid,
    Mat, OracleBlock, OracleInstance, OracleOpWeights,
};
use dynamixer::{Graph, MixGenKind, ModelConfig, Real, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KINDS: [MixGenKind; 3] = [MixGenKind::Dynamic, MixGenKind::DensePerToken, MixGenKind::StaticRandom];

fn run_op(w: &DynaMixerOpWeights<Tensor>, x: &Tensor, segments: usize) -> Tensor {
    let mut g = Graph::no_grad();
    let wv = w.bind(&mut g);
    let xv = g.constant(x.clone());
    dynamixer_op(&mut g, &xv, &wv, segments).unwrap().to_tensor()
}

fn matrices(w: &DynaMixerOpWeights<Tensor>, x: &Tensor, segments: usize) -> Tensor {
    let mut g = Graph::no_grad();
    let wv = w.bind(&mut g);
    let xv = g.constant(x.clone());
    generate_mixing_matrices(&mut g, &xv, &wv, segments)
        .unwrap()
        .to_tensor()
}

fn linear(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Linear<Tensor> {
    Linear {
        weight: Leaf(Tensor::randn(&[fan_in, fan_out], 0.5, rng)),
        bias: Leaf(Tensor::randn(&[fan_out], 0.5, rng)),
    }
}

struct BlockCase {
    h: usize,
    w: usize,
    d: usize,
    segments: usize,
    share: bool,
    weights: BlockWeights<Tensor>,
}

fn random_block(rng: &mut ChaCha8Rng) -> BlockCase {
    let segments = rng.gen_range(1..=3);
    let d = segments * rng.gen_range(1..=3);
    let share = rng.gen_bool(0.2);
    let h = rng.gen_range(1..=8);
    let w = if share { h } else { rng.gen_range(1..=8) };
    let kind = KINDS[rng.gen_range(0..3)];
    let reduced = rng.gen_range(1..=2);
    let (mut row, mut col, mut chan) = (true, true, true);
    match rng.gen_range(0..6) {
        0 => row = false,
        1 => col = false,
        2 => chan = false,
        _ => {}
    }
    let reweight = rng.gen_bool(0.8);
    let weights = BlockWeights {
        row_op: row.then(|| DynaMixerOpWeights::random(kind, w, d, segments, reduced, 0.5, rng)),
        col_op: (col && !share).then(|| DynaMixerOpWeights::random(kind, h, d, segments, reduced, 0.5, rng)),
        proj_c: chan.then(|| linear(d, d, rng)),
        reweight: reweight.then(|| {
            let r = (d / 4).max(1);
            ReweightWeights {
                w1: Leaf(Tensor::randn(&[d, r], 0.5, rng)),
                w2: Leaf(Tensor::randn(&[r, 3 * d], 0.5, rng)),
            }
        }),
        proj_o: linear(d, d, rng),
    };
    BlockCase {
        h,
        w,
        d,
        segments,
        share,
        weights,
    }
}

fn flat(grid: &Grid) -> Vec<f64> {
    grid.iter().flatten().flatten().copied().collect()
}

fn max_diff(a: &[Real], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (*x as f64 - y).abs()).fold(0.0, f64::max)
}

#[test]
fn op_matches_oracle_on_200_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.gen_range(1..=8);
        let segments = rng.gen_range(1..=3);
        let d = segments * rng.gen_range(1..=4);
        let reduced = rng.gen_range(1..=3);
        let kind = KINDS[rng.gen_range(0..3)];
        let w = DynaMixerOpWeights::random(kind, n, d, segments, reduced, 0.5, &mut rng);
        let x = Tensor::randn(&[n, d], 1.0, &mut rng);
        let inst = OracleInstance {
            segments,
            x: Mat::from_tensor(&x),
            weights: OracleOpWeights::from_weights(&w),
        };

        worst = worst.max(max_diff(
            run_op(&w, &x, segments).data(),
            &naive_dynamixer_op(&inst).unwrap().data,
        ));
        let fast_p = matrices(&w, &x, segments);
        let slow_p: Vec<f64> = naive_mixing_matrices(&inst)
            .unwrap()
            .into_iter()
            .flat_map(|m| m.data)
            .collect();
        worst = worst.max(max_diff(fast_p.data(), &slow_p));
    }
    assert!(worst < 1e-12, "max deviation {worst:e}");
}

#[test]
fn block_matches_oracle_on_200_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 200 {
        let case = random_block(&mut rng);
        let w = &case.weights;
        if w.row_op.is_none() && w.col_op.is_none() && w.proj_c.is_none() && !case.share {
            continue;
        }
        let x = Tensor::randn(&[1, case.h, case.w, case.d], 1.0, &mut rng);
        let mut g = Graph::no_grad();
        let wv = w.map_params("", &mut |_, t: &Tensor| g.constant(t.clone()));
        let xv = g.constant(x.clone());
        let fast = match dynamixer_block(&mut g, &xv, &wv, case.segments, case.share) {
            Ok(v) => v.to_tensor(),
            Err(_) => {
                // only the all-branches-disabled configuration is rejected
                assert!(w.row_op.is_none() && w.proj_c.is_none());
                continue;
            }
        };
        let grid = grid_from_tensor(&x.reshape(&[case.h, case.w, case.d]).unwrap()).unwrap();
        let slow = naive_block(&grid, &OracleBlock::from_weights(w, case.share), case.segments).unwrap();
        worst = worst.max(max_diff(fast.data(), &flat(&slow)));
        checked += 1;
    }
    assert!(worst < 1e-12, "max deviation {worst:e}");
}

#[test]
fn batched_block_equals_per_image_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let case = random_block(&mut rng);
    let x = Tensor::randn(&[3, case.h, case.w, case.d], 1.0, &mut rng);
    let per = case.h * case.w * case.d;
    let mut g = Graph::no_grad();
    let wv = case.weights.map_params("", &mut |_, t: &Tensor| g.constant(t.clone()));
    let xv = g.constant(x.clone());
    let Ok(all) = dynamixer_block(&mut g, &xv, &wv, case.segments, case.share) else {
        return;
    };
    for b in 0..3 {
        let xb = Tensor::new(&[1, case.h, case.w, case.d], x.data()[b * per..(b + 1) * per].to_vec()).unwrap();
        let xbv = g.constant(xb);
        let one = dynamixer_block(&mut g, &xbv, &wv, case.segments, case.share).unwrap();
        assert_eq!(one.value().data(), &all.value().data()[b * per..(b + 1) * per]);
    }
}

#[test]
fn single_token_block_with_unit_weights_triples_input() {
    // H = W = 1: every mixing matrix is [1], so each mixing branch returns
    // X·W_o; with identity maps, zero biases and no reweighting the block
    // output is 3X.
    let d = 4;
    let eye = || Leaf(Tensor::eye(d));
    let op = || DynaMixerOpWeights {
        generator: dynamixer::mixer::MixGenerator::DensePerToken {
            dense: vec![Leaf(Tensor::zeros(&[d, 1]))],
        },
        out_fuse: eye(),
    };
    let identity = || Linear {
        weight: eye(),
        bias: Leaf(Tensor::zeros(&[d])),
    };
    let w = BlockWeights {
        row_op: Some(op()),
        col_op: Some(op()),
        proj_c: Some(identity()),
        reweight: None,
        proj_o: identity(),
    };
    let x = Tensor::new(&[1, 1, 1, d], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let mut g = Graph::no_grad();
    let wv = w.map_params("", &mut |_, t: &Tensor| g.constant(t.clone()));
    let xv = g.constant(x.clone());
    let y = dynamixer_block(&mut g, &xv, &wv, 1, false).unwrap();
    assert_eq!(y.value().data(), &[3.0, -6.0, 1.5, 9.0]);

    let channel_only = BlockWeights {
        row_op: None,
        col_op: None,
        ..w
    };
    let wv = channel_only.map_params("", &mut |_, t: &Tensor| g.constant(t.clone()));
    let y = dynamixer_block(&mut g, &xv, &wv, 1, false).unwrap();
    assert_eq!(y.value().data(), x.data());
}

#[test]
fn model_forward_matches_oracle_forward() {
    let cfg = ModelConfig::preset("tiny").unwrap();
    let mut weights = build_model(&cfg, 4).unwrap();
    // larger weights exercise the nonlinearities beyond their linear regime
    weights.for_each_mut(|_, t| *t = t.map(|v| v * 20.0));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let images = Tensor::randn(&[2, 3, 32, 32], 1.0, &mut rng);
    let mut g = Graph::no_grad();
    let wv = weights.bind_frozen(&g);
    let xv = g.constant(images.clone());
    let logits = model_forward(&mut g, &xv, &wv, &cfg, &mut Mode::Eval)
        .unwrap()
        .to_tensor();
    assert_eq!(logits.shape(), &[2, 10]);
    let per = 3 * 32 * 32;
    for b in 0..2 {
        let img = Tensor::new(&[3, 32, 32], images.data()[b * per..(b + 1) * per].to_vec()).unwrap();
        let slow = naive_model_forward(&img, &weights, &cfg).unwrap();
        let d = max_diff(&logits.data()[b * 10..(b + 1) * 10], &slow);
        assert!(d < 1e-10, "image {b}: {d:e}");
    }
}

#[test]
fn dynamic_op_params_match_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for n in 1..=8u64 {
        for segments in 1..=4u64 {
            for per in 1..=3u64 {
                for reduced in 1..=3u64 {
                    let d = segments * per;
                    let w = DynaMixerOpWeights::random(
                        MixGenKind::Dynamic,
                        n as usize,
                        d as usize,
                        segments as usize,
                        reduced as usize,
                        1.0,
                        &mut rng,
                    );
                    let enumerated = w.num_params();
                    let formula = param_formula(n, d, reduced, segments).unwrap();
                    assert_eq!(enumerated as u64, formula, "N={n} D={d} d={reduced} S={segments}");
                    assert_eq!(formula, segments * d * reduced + n.pow(3) * reduced + d * d);
                }
            }
        }
    }
}

#[test]
fn static_generator_is_input_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = DynaMixerOpWeights::random(MixGenKind::StaticRandom, 5, 6, 2, 1, 0.5, &mut rng);
    let a = matrices(&w, &Tensor::randn(&[5, 6], 1.0, &mut rng), 2);
    let b = matrices(&w, &Tensor::randn(&[5, 6], 10.0, &mut rng), 2);
    assert_eq!(a, b);
}

#[test]
fn dense_generator_rows_depend_only_on_their_token() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, d, s) = (6, 8, 2);
    let w = DynaMixerOpWeights::random(MixGenKind::DensePerToken, n, d, s, 1, 0.5, &mut rng);
    let x = Tensor::randn(&[n, d], 1.0, &mut rng);
    let base = matrices(&w, &x, s);
    for j in 0..n {
        let mut xp = x.clone();
        for c in 0..d {
            xp.data_mut()[j * d + c] += 0.3;
        }
        let p = matrices(&w, &xp, s);
        for seg in 0..s {
            for i in 0..n {
                let off = (seg * n + i) * n;
                let change = max_diff(
                    &p.data()[off..off + n],
                    &base.data()[off..off + n].iter().map(|&v| v as f64).collect::<Vec<_>>(),
                );
                if i == j {
                    assert!(change > 1e-6, "row {i} did not react to its own token");
                } else {
                    assert!(change < 1e-12, "row {i} changed by {change:e} when token {j} moved");
                }
            }
        }
    }
}

#[test]
fn dynamic_generator_is_cross_token_and_cross_segment() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, d, s) = (5, 8, 2);
    let w = DynaMixerOpWeights::random(MixGenKind::Dynamic, n, d, s, 2, 0.5, &mut rng);
    let x = Tensor::randn(&[n, d], 1.0, &mut rng);
    let base = matrices(&w, &x, s);
    let h = 1e-6;

    // token j only: does row i != j of P⁽⁰⁾ react?
    let j = 3;
    let mut xp = x.clone();
    xp.data_mut()[j * d] += h;
    let p = matrices(&w, &xp, s);
    let cross_token = (0..n)
        .filter(|&i| i != j)
        .flat_map(|i| (0..n).map(move |k| i * n + k))
        .map(|idx| ((p.data()[idx] - base.data()[idx]) / h).abs() as f64)
        .fold(0.0, f64::max);
    assert!(cross_token > 1e-6, "{cross_token:e}");

    // channels of segment 1 only: does P⁽⁰⁾ react?
    let mut xp = x.clone();
    for t in 0..n {
        xp.data_mut()[t * d + d / 2] += h;
    }
    let p = matrices(&w, &xp, s);
    let cross_segment = (0..n * n)
        .map(|idx| ((p.data()[idx] - base.data()[idx]) / h).abs() as f64)
        .fold(0.0, f64::max);
    assert!(cross_segment > 1e-6, "{cross_segment:e}");
}

#[test]
fn drop_path_eval_is_identity_and_full_rate_zeroes_branch() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::no_grad();
    let branch = g.constant(Tensor::randn(&[4, 2, 2, 3], 1.0, &mut rng));
    let out = drop_path(&mut g, &branch, 0.5, &mut Mode::Eval).unwrap();
    assert_eq!(out.value(), branch.value());
    let out = drop_path(&mut g, &branch, 1.0, &mut Mode::Train { rng: &mut rng }).unwrap();
    assert!(out.value().data().iter().all(|&v| v == 0.0));
    let out = drop_path(&mut g, &branch, 0.5, &mut Mode::Train { rng: &mut rng }).unwrap();
    for (o, b) in out.value().data().chunks(12).zip(branch.value().data().chunks(12)) {
        let dropped = o.iter().all(|&v| v == 0.0);
        let kept = o.iter().zip(b).all(|(x, y)| *x == 2.0 * y);
        assert!(dropped || kept);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_rows_are_stochastic(
        n in 1usize..=8,
        segments in 1usize..=3,
        per in 1usize..=4,
        reduced in 1usize..=3,
        dense in any::<bool>(),
        scale in 0.1f64..5.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = segments * per;
        let kind = if dense { MixGenKind::DensePerToken } else { MixGenKind::Dynamic };
        let w = DynaMixerOpWeights::random(kind, n, d, segments, reduced, scale as Real, &mut rng);
        let x = Tensor::randn(&[3, n, d], 3.0, &mut rng);
        let p = matrices(&w, &x, segments);
        prop_assert_eq!(p.shape(), &[3 * segments, n, n]);
        for row in p.data().chunks(n) {
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}
