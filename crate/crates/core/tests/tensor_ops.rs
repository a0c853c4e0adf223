use dynamixer::tensor::{grad_check, Graph, Real, Tensor, Var};
use dynamixer::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[Real]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn matmul_small_example() {
    let g = &mut Graph::new();
    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let c = g.matmul(&a, &b).unwrap();
    assert_eq!(c.value().data(), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn matmul_inner_dimension_mismatch() {
    let g = &mut Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(&a, &b), Err(Error::Shape { .. })));
}

#[test]
fn softmax_of_ln2_and_zero() {
    let g = &mut Graph::new();
    let x = g.constant(t(&[1, 2], &[(2.0 as Real).ln(), 0.0]));
    let p = g.softmax_last(&x).unwrap();
    assert!((p.value().data()[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((p.value().data()[1] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn softmax_large_logits_stay_finite() {
    let g = &mut Graph::new();
    let x = g.constant(t(&[1, 3], &[1000.0, 0.0, -1000.0]));
    let p = g.softmax_last(&x).unwrap();
    assert_eq!(p.value().data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn gelu_at_one_uses_exact_erf() {
    let g = &mut Graph::new();
    let x = g.constant(t(&[3], &[1.0, 0.0, -1.0]));
    let y = g.gelu(&x).unwrap();
    let v = y.value().data();
    assert!((v[0] - 0.841_344_746_068_542_9).abs() < 1e-12);
    assert_eq!(v[1], 0.0);
    assert!((v[2] + 0.158_655_253_931_457_05).abs() < 1e-12);
}

#[test]
fn layer_norm_examples() {
    let g = &mut Graph::new();
    let ones = g.constant(Tensor::ones(&[2]));
    let zeros = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(t(&[2], &[1.0, -1.0]));
    let y = g.layer_norm(&x, &ones, &zeros, 1e-12).unwrap();
    for (a, b) in y.value().data().iter().zip([1.0, -1.0]) {
        assert!((a - b).abs() < 1e-9);
    }

    let c = g.constant(t(&[3], &[2.5, 2.5, 2.5]));
    let ones3 = g.constant(Tensor::ones(&[3]));
    let zeros3 = g.constant(Tensor::zeros(&[3]));
    let y = g.layer_norm(&c, &ones3, &zeros3, 1e-6).unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));

    let bias = g.constant(t(&[3], &[0.1, 0.2, 0.3]));
    let x = g.constant(t(&[3], &[4.0, -2.0, 9.0]));
    let y = g.layer_norm(&x, &zeros3, &bias, 1e-6).unwrap();
    assert_eq!(y.value().data(), &[0.1, 0.2, 0.3]);
}

#[test]
fn mean_of_ones_is_one() {
    let g = &mut Graph::new();
    let x = g.constant(Tensor::ones(&[2, 3, 4]));
    let m = g.mean_axes(&x, &[0, 1, 2]).unwrap();
    assert_eq!(m.value().item().unwrap(), 1.0);
}

#[test]
fn cross_entropy_uniform_is_ln2() {
    let g = &mut Graph::new();
    let logits = g.constant(Tensor::zeros(&[1, 2]));
    let l = g.cross_entropy(&logits, &[0], 0.0).unwrap();
    assert!((l.value().item().unwrap() - (2.0 as Real).ln()).abs() < 1e-15);
}

#[test]
fn cross_entropy_rejects_bad_target() {
    let g = &mut Graph::new();
    let logits = g.constant(Tensor::zeros(&[1, 2]));
    assert!(g.cross_entropy(&logits, &[2], 0.0).is_err());
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::ones(&[3]));
    let y = g.scale(&x, 2.0).unwrap();
    assert!(matches!(g.backward(&y), Err(Error::Contract(_))));
}

#[test]
fn no_grad_graph_records_nothing() {
    let mut g = Graph::no_grad();
    let x = g.param(Tensor::ones(&[3]));
    let y = g.sum(&x).unwrap();
    assert_eq!(g.num_nodes(), 0);
    assert_eq!(y.value().item().unwrap(), 3.0);
}

#[test]
fn broadcasting_gradient_sums_over_expanded_axes() {
    let mut g = Graph::new();
    let a = g.param(Tensor::ones(&[2, 3]));
    let b = g.param(t(&[3], &[1.0, 2.0, 3.0]));
    let c = g.mul(&a, &b).unwrap();
    let s = g.sum(&c).unwrap();
    let grads = g.backward(&s).unwrap();
    assert_eq!(grads.get(&b).unwrap().data(), &[2.0, 2.0, 2.0]);
    assert_eq!(grads.get(&a).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
}

#[test]
fn gradcheck_sum_is_exact() {
    let theta = Tensor::randn(&[4, 5], 1.0, &mut rng(0));
    let r = grad_check(|g, v| g.sum(&v[0]), &[theta], 1e-4, 500, &mut rng(1)).unwrap();
    assert!(r.max_rel_err < 1e-10, "{}", r.max_rel_err);
}

#[test]
fn gradcheck_quadratic() {
    let theta = Tensor::randn(&[30], 1.0, &mut rng(2));
    let r = grad_check(
        |g, v| {
            let sq = g.mul(&v[0], &v[0])?;
            g.sum(&sq)
        },
        &[theta],
        1e-4,
        500,
        &mut rng(3),
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-8, "{}", r.max_rel_err);
}

#[test]
fn gradcheck_rejects_vector_function() {
    let theta = Tensor::ones(&[3]);
    let r = grad_check(|g, v| g.scale(&v[0], 1.0), &[theta], 1e-4, 10, &mut rng(0));
    assert!(matches!(r, Err(Error::Contract(_))));
}

type OpFn = fn(&mut Graph, &[Var]) -> dynamixer::Result<Var>;

/// Each op is reduced to a scalar through a fixed random projection so
/// that every output coordinate contributes to the checked gradient.
fn project(g: &mut Graph, y: &Var, seed: u64) -> dynamixer::Result<Var> {
    let w = g.constant(Tensor::randn(y.shape(), 1.0, &mut rng(seed)));
    let p = g.mul(y, &w)?;
    g.sum(&p)
}

#[test]
fn every_differentiable_op_passes_gradcheck() {
    let cases: Vec<(&str, Vec<Vec<usize>>, OpFn)> = vec![
        ("matmul", vec![vec![2, 3, 4], vec![4, 5]], |g, v| {
            let y = g.matmul(&v[0], &v[1])?;
            project(g, &y, 10)
        }),
        ("bmm", vec![vec![3, 2, 4], vec![3, 4, 2]], |g, v| {
            let y = g.bmm(&v[0], &v[1])?;
            project(g, &y, 11)
        }),
        ("add/sub broadcast", vec![vec![2, 3], vec![3]], |g, v| {
            let y = g.add(&v[0], &v[1])?;
            let y = g.sub(&y, &v[1])?;
            let y = g.add(&y, &v[1])?;
            project(g, &y, 12)
        }),
        ("mul", vec![vec![2, 3], vec![2, 1]], |g, v| {
            let y = g.mul(&v[0], &v[1])?;
            project(g, &y, 13)
        }),
        ("permute/reshape", vec![vec![2, 3, 4]], |g, v| {
            let y = g.permute(&v[0], &[2, 0, 1])?;
            let y = g.reshape(&y, &[4, 6])?;
            project(g, &y, 14)
        }),
        ("concat/narrow/split", vec![vec![2, 3], vec![2, 2]], |g, v| {
            let c = g.concat_last(&[v[0].clone(), v[1].clone()])?;
            let parts = g.split_last(&c, &[1, 4])?;
            let n = g.narrow(&parts[1], 0, 1, 1)?;
            let a = project(g, &n, 15)?;
            let b = project(g, &parts[0], 16)?;
            g.add(&a, &b)
        }),
        ("expand/sum_to", vec![vec![1, 3]], |g, v| {
            let e = g.expand(&v[0], &[4, 3])?;
            let e = g.mul(&e, &e)?;
            let s = g.sum_to(&e, &[1, 3])?;
            project(g, &s, 17)
        }),
        ("mean_axes", vec![vec![2, 3, 4]], |g, v| {
            let m = g.mean_axes(&v[0], &[0, 2])?;
            project(g, &m, 18)
        }),
        ("softmax", vec![vec![3, 5]], |g, v| {
            let p = g.softmax_last(&v[0])?;
            project(g, &p, 19)
        }),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |g, v| {
            let y = g.layer_norm(&v[0], &v[1], &v[2], 1e-6)?;
            project(g, &y, 20)
        }),
        ("gelu", vec![vec![4, 4]], |g, v| {
            let y = g.gelu(&v[0])?;
            project(g, &y, 21)
        }),
        ("cross_entropy", vec![vec![3, 4]], |g, v| {
            g.cross_entropy(&v[0], &[0, 3, 1], 0.1)
        }),
        ("scale", vec![vec![5]], |g, v| {
            let y = g.scale(&v[0], -1.5)?;
            project(g, &y, 22)
        }),
    ];
    for (i, (name, shapes, f)) in cases.into_iter().enumerate() {
        let params: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(j, s)| Tensor::randn(s, 1.0, &mut rng(100 + 10 * i as u64 + j as u64)))
            .collect();
        let r = grad_check(f, &params, 1e-5, 1000, &mut rng(i as u64)).unwrap();
        assert!(r.max_rel_err < 1e-6, "{name}: {}", r.max_rel_err);
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.param(Tensor::randn(&[3, 7], 1.0, &mut rng(5)));
        let w = g.param(Tensor::randn(&[7, 4], 1.0, &mut rng(6)));
        let y = g.matmul(&x, &w).unwrap();
        let y = g.gelu(&y).unwrap();
        g.softmax_last(&y).unwrap().to_tensor()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>()) {
        let x = Tensor::uniform(&[rows, cols], -50.0, 50.0, &mut rng(seed));
        let mut g = Graph::no_grad();
        let xv = g.constant(x);
        let p = g.softmax_last(&xv).unwrap();
        for row in p.value().data().chunks(cols) {
            let s: Real = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn softmax_is_shift_invariant(cols in 1usize..9, c in -100.0f64..100.0, seed in any::<u64>()) {
        let x = Tensor::uniform(&[2, cols], -50.0, 50.0, &mut rng(seed));
        let shifted = x.map(|v| v + c as Real);
        let mut g = Graph::no_grad();
        let a = g.constant(x);
        let b = g.constant(shifted);
        let pa = g.softmax_last(&a).unwrap();
        let pb = g.softmax_last(&b).unwrap();
        prop_assert!(pa.value().max_abs_diff(pb.value()).unwrap() < 1e-6);
    }

    #[test]
    fn tensor_new_checks_length(dims in proptest::collection::vec(1usize..4, 1..4), extra in 1usize..3) {
        let n: usize = dims.iter().product();
        prop_assert!(Tensor::new(&dims, vec![0.0; n]).is_ok());
        prop_assert!(Tensor::new(&dims, vec![0.0; n + extra]).is_err());
    }
}
