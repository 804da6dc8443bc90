use dte_autograd::{no_grad, Array, Tensor};
use dte_core::eval::{fid, inception_score};
use dte_core::generator::{kl_divergence, sample_noise};
use dte_core::losses::{contrastive_loss, hinge_d};
use dte_core::nn::{largest_singular_value, Buffers, Ctx, Group, Mode, ParamBuilder, ParamStore, Vars};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Array::new(&[rows, cols], d))
}

fn nonzero_rows(a: &Array) -> bool {
    let c = a.shape()[1];
    a.data().chunks(c).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6)
}

fn contrastive(f: &Array, s: &Array, tau: f64, symmetric: bool) -> f64 {
    contrastive_loss(
        &Tensor::constant(f.clone()),
        &Tensor::constant(s.clone()),
        tau,
        symmetric,
    )
    .unwrap()
    .item()
}

fn permute_rows(a: &Array, perm: &[usize]) -> Array {
    let c = a.shape()[1];
    let d = perm
        .iter()
        .flat_map(|&i| a.data()[i * c..(i + 1) * c].to_vec())
        .collect();
    Array::new(a.shape(), d)
}

fn scale_rows(a: &Array, scales: &[f64]) -> Array {
    let c = a.shape()[1];
    Array::from_fn(a.shape(), |i| a.data()[i] * scales[i / c])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contrastive_is_nonnegative_and_invariant(
        f in matrix(4, 5),
        s in matrix(4, 5),
        tau in 0.05f64..2.0,
        symmetric in any::<bool>(),
        scales in prop::collection::vec(0.1f64..10.0, 8),
        perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        prop_assume!(nonzero_rows(&f) && nonzero_rows(&s));
        let base = contrastive(&f, &s, tau, symmetric);
        prop_assert!(base >= 0.0);
        let scaled = contrastive(&scale_rows(&f, &scales[..4]), &scale_rows(&s, &scales[4..]), tau, symmetric);
        prop_assert!((base - scaled).abs() <= 1e-9 * base.max(1.0));
        let permuted = contrastive(&permute_rows(&f, &perm), &permute_rows(&s, &perm), tau, symmetric);
        prop_assert!((base - permuted).abs() <= 1e-9 * base.max(1.0));
    }

    #[test]
    fn hinge_is_nonnegative(real in prop::collection::vec(-5.0f64..5.0, 1..8), fake in prop::collection::vec(-5.0f64..5.0, 1..8)) {
        let r = Tensor::from_vec(&[real.len()], real.clone());
        let f = Tensor::from_vec(&[fake.len()], fake.clone());
        let v = hinge_d(&r, &f).unwrap().item();
        prop_assert!(v >= 0.0);
        if real.iter().all(|x| *x >= 1.0) && fake.iter().all(|x| *x <= -1.0) {
            prop_assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn kl_is_nonnegative(mu in matrix(3, 4), logvar in matrix(3, 4)) {
        let v = kl_divergence(&Tensor::constant(mu), &Tensor::constant(logvar)).item();
        prop_assert!(v >= -1e-12);
    }

    #[test]
    fn fid_grows_with_mean_shift(seed in 0u64..1000, small in 0.1f64..1.0, extra in 0.5f64..3.0) {
        let n = 400;
        let d = 3;
        let base = sample_noise(n, d, None, seed).unwrap();
        let other = sample_noise(n, d, None, seed + 10_000).unwrap();
        let shifted = |delta: f64| Array::from_fn(&[n, d], |i| other.data()[i] + delta);
        let near = fid(&base, &shifted(small)).unwrap();
        let far = fid(&base, &shifted(small + extra)).unwrap();
        prop_assert!(near >= -1e-9);
        prop_assert!(far > near);
    }

    #[test]
    fn inception_score_lies_between_one_and_class_count(
        logits in matrix(12, 5),
        splits in 1usize..4,
    ) {
        let p = Array::from_fn(logits.shape(), |i| {
            let row = &logits.data()[(i / 5) * 5..(i / 5) * 5 + 5];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            logits.data()[i].exp() / z
        });
        let (mean, _) = inception_score(&p, splits).unwrap();
        prop_assert!((1.0 - 1e-9..=5.0 + 1e-9).contains(&mean));
    }

    #[test]
    fn truncated_noise_stays_within_threshold(seed in any::<u64>(), psi in 0.1f64..3.0) {
        let z = sample_noise(16, 8, Some(psi), seed).unwrap();
        prop_assert!(z.data().iter().all(|v| v.abs() <= psi));
    }

    #[test]
    fn spectral_norm_bounds_largest_singular_value(seed in any::<u64>(), rows in 2usize..9, cols in 2usize..9) {
        let mut store = ParamStore::new();
        let mut buffers = Buffers::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ParamBuilder { store: &mut store, buffers: &mut buffers, rng: &mut rng, group: Group::Disc }
            .linear("l", cols, rows)
            .unwrap();
        let vars = Vars::new(&store, &[]);
        let ctx = Ctx::new(&vars, &mut buffers, Mode::Train);
        let w = no_grad(|| {
            for _ in 0..200 {
                ctx.sn_weight("l.w");
            }
            ctx.sn_weight("l.w").to_array()
        });
        let sigma = largest_singular_value(w.data(), rows, cols, 500);
        prop_assert!(sigma <= 1.0 + 1e-2, "sigma {}", sigma);
    }
}
