use dte_autograd::gradcheck::check;
use dte_autograd::{concat, grad, no_grad, Array, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_array(shape: &[usize], seed: u64) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn assert_grads(f: &dyn Fn(&[Tensor]) -> Tensor, inputs: &[Array]) {
    let r = check(f, inputs, 1e-6, 1e-6);
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn elementwise_ops() {
    let a = rand_array(&[3, 4], 1);
    let b = rand_array(&[3, 4], 2).map(|v| v.abs() + 0.5);
    assert_grads(
        &|t| {
            let x = &t[0];
            let y = &t[1];
            x.mul(y)
                .add(&x.tanh())
                .sub(&y.log())
                .add(&x.sigmoid().div(y))
                .add(&y.sqrt().mul(&x.exp()))
                .add(&y.powf(1.7))
                .add(&x.leaky_relu(0.2).mul_scalar(3.0))
                .add_scalar(2.0)
                .neg()
                .sum()
        },
        &[a, b],
    );
}

#[test]
fn broadcasting_ops() {
    let a = rand_array(&[2, 3, 4], 3);
    let b = rand_array(&[3, 1], 4);
    let c = rand_array(&[1, 3, 1], 5).map(|v| v + 2.0);
    assert_grads(
        &|t| t[0].add(&t[1]).mul(&t[0]).div(&t[2]).sum_keep(&[0, 2]).square().mean(),
        &[a, b, c],
    );
}

#[test]
fn matmul_transpose_and_shape_ops() {
    let a = rand_array(&[3, 5], 6);
    let b = rand_array(&[5, 2], 7);
    let table = rand_array(&[4, 3], 8);
    assert_grads(
        &|t| {
            let m = t[0].matmul(&t[1]); // 3x2
            let e = t[2].index_select(&[1, 3, 1]); // 3x3
            let joined = concat(&[m.clone(), e.narrow(1, 0, 2)], 1); // 3x4
            let padded = joined.narrow(1, 1, 2).pad_axis(1, 1, 4);
            padded.t().reshape(&[12]).mul(&joined.reshape(&[12])).sum()
        },
        &[a, b, table],
    );
}

#[test]
fn conv_pool_upsample() {
    let x = rand_array(&[2, 3, 4, 4], 9);
    let w = rand_array(&[2, 3, 3, 3], 10);
    let w1 = rand_array(&[3, 2, 1, 1], 11);
    assert_grads(
        &|t| {
            let h = t[0].conv2d(&t[1]).leaky_relu(0.2);
            let h = h.upsample_bilinear2().avg_pool2().avg_pool2();
            let h = h.conv2d(&t[2]);
            h.square().sum()
        },
        &[x, w, w1],
    );
}

#[test]
fn second_order_through_conv_stack() {
    // f(x, w) = || d/dx sum(g(x, w)) ||^2, differentiated w.r.t. x and w.
    let x = rand_array(&[2, 2, 4, 4], 12);
    let w = rand_array(&[3, 2, 3, 3], 13);
    let v = rand_array(&[3 * 2 * 2, 1], 14);
    let f = move |t: &[Tensor]| {
        let (x, w) = (&t[0], &t[1]);
        // The caller may hand in constants; differentiate w.r.t. fresh leaves.
        let xl = if x.requires_grad() {
            x.clone()
        } else {
            Tensor::param(x.to_array())
        };
        let h = xl.conv2d(w).tanh().avg_pool2();
        let logit = h.reshape(&[2, 12]).matmul(&Tensor::constant(v.clone())).sum();
        let gx = grad(&logit, &[&xl], true).unwrap().remove(0).unwrap();
        gx.square().sum().add(&w.square().sum().mul_scalar(0.1))
    };
    let r = check(&f, &[x, w], 1e-5, 1e-6);
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn second_order_through_upsample_and_matmul() {
    let x = rand_array(&[1, 2, 2, 3], 15);
    let w = rand_array(&[2, 2, 1, 1], 16);
    let f = |t: &[Tensor]| {
        let xl = if t[0].requires_grad() {
            t[0].clone()
        } else {
            Tensor::param(t[0].to_array())
        };
        let y = xl.conv2d(&t[1]).upsample_bilinear2().sigmoid().sum();
        let g = grad(&y, &[&xl], true).unwrap().remove(0).unwrap();
        g.square().sum().sqrt()
    };
    let r = check(&f, &[x, w], 1e-6, 1e-6);
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn unreachable_inputs_have_no_gradient() {
    let a = Tensor::param(Array::new(&[2], vec![1.0, 2.0]));
    let b = Tensor::param(Array::new(&[2], vec![3.0, 4.0]));
    let loss = a.mul(&b.detach()).sum();
    let g = grad(&loss, &[&a, &b], false).unwrap();
    assert_eq!(g[0].as_ref().unwrap().data(), &[3.0, 4.0]);
    assert!(g[1].is_none());
}

#[test]
fn no_grad_records_nothing() {
    let a = Tensor::param(Array::new(&[2], vec![1.0, 2.0]));
    let y = no_grad(|| a.mul(&a).sum());
    assert!(!y.requires_grad());
    assert!(y.is_leaf());
}

#[test]
fn grad_of_intermediate_tensor() {
    let a = Tensor::param(Array::new(&[3], vec![1.0, -2.0, 0.5]));
    let mid = a.mul_scalar(2.0);
    let loss = mid.square().sum();
    let g = grad(&loss, &[&mid], false).unwrap().remove(0).unwrap();
    assert_eq!(g.data(), &[4.0, -8.0, 2.0]);
}

#[test]
fn deep_chain_drops_without_overflow() {
    let mut x = Tensor::param(Array::scalar(1.0));
    for _ in 0..200_000 {
        x = x.add_scalar(1e-6);
    }
    assert!((x.item() - 1.2).abs() < 1e-9);
}

proptest! {
    #[test]
    fn broadcast_then_sum_to_is_scaling(vals in proptest::collection::vec(-5.0f64..5.0, 6), reps in 1usize..5) {
        let x = Tensor::from_vec(&[2, 1, 3], vals.clone());
        let y = x.broadcast_to(&[2, reps, 3]).sum_to(&[2, 1, 3]);
        for (a, b) in y.data().iter().zip(&vals) {
            prop_assert!((a - b * reps as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_is_linear_in_input(seed in 0u64..1000, s in -3.0f64..3.0) {
        let x = Tensor::constant(rand_array(&[1, 2, 3, 5], seed));
        let w = Tensor::constant(rand_array(&[2, 2, 3, 3], seed + 1));
        let a = x.mul_scalar(s).conv2d(&w);
        let b = x.conv2d(&w).mul_scalar(s);
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() < 1e-10);
        }
    }
}
