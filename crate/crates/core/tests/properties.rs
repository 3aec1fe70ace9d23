use certvote::certify::certified_radius;
use certvote::defense::rank_verify;
use certvote::net::{input_gradient, softmax_t, CrossEntropy, LayerSpec, LogitComponent, LogitObjective, Network, SoftmaxComponent};
use certvote::stats::{clopper_pearson_lower, inv_norm_cdf, norm_cdf};
use certvote::Tensor;
use proptest::prelude::*;

fn small_net(seed: u64, temperature: f64) -> Network {
    Network::new(
        &[6],
        &[
            LayerSpec::Dense { in_dim: 6, out_dim: 8 },
            LayerSpec::Relu,
            LayerSpec::Dense { in_dim: 8, out_dim: 4 },
        ],
        temperature,
        seed,
    )
    .unwrap()
}

fn central_difference(net: &Network, x: &[f64], objective: &dyn LogitObjective, i: usize) -> f64 {
    let h = 1e-6;
    let eval = |v: f64| {
        let mut y = x.to_vec();
        y[i] = v;
        objective.value(net.logits(&Tensor::vector(y).unwrap()).unwrap().data())
    };
    (eval(x[i] + h) - eval(x[i] - h)) / (2.0 * h)
}

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, 2..12)
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(z in logits(), t in 0.05f64..200.0) {
        let p = softmax_t(&Tensor::vector(z).unwrap(), t).unwrap();
        let sum: f64 = p.data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn temperature_keeps_the_argmax(z in logits(), t in 0.05f64..200.0) {
        let v = Tensor::vector(z).unwrap();
        prop_assert_eq!(softmax_t(&v, t).unwrap().argmax(), v.argmax());
    }

    #[test]
    fn temperature_equals_scaled_logits(z in logits(), t in 0.05f64..200.0) {
        let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
        let a = softmax_t(&Tensor::vector(z).unwrap(), t).unwrap();
        let b = softmax_t(&Tensor::vector(scaled).unwrap(), 1.0).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences(
        seed in 0u64..1000,
        x in prop::collection::vec(-1.0f64..1.0, 6),
        class in 0usize..4,
        t in prop::sample::select(vec![1.0, 10.0, 40.0]),
    ) {
        let net = small_net(seed, t);
        let objectives: [&dyn LogitObjective; 3] = [
            &LogitComponent(class),
            &SoftmaxComponent { class, temperature: t },
            &CrossEntropy { label: class, temperature: t },
        ];
        for obj in objectives {
            let g = input_gradient(&net, &Tensor::vector(x.clone()).unwrap(), obj).unwrap();
            for i in 0..x.len() {
                let fd = central_difference(&net, &x, obj, i);
                prop_assert!((g.data()[i] - fd).abs() <= 1e-5 * (1.0 + fd.abs()), "{} vs {}", g.data()[i], fd);
            }
        }
    }

    // Scaling T by k scales the cross-entropy logit gradient by 1/k once the
    // logits are scaled by k too.
    #[test]
    fn cross_entropy_gradient_scales_inversely_with_temperature(
        z in logits(),
        k in 1.5f64..20.0,
    ) {
        let label = 0;
        let kz: Vec<f64> = z.iter().map(|v| v * k).collect();
        let g1 = CrossEntropy { label, temperature: 1.0 }.gradient(&z);
        let gk = CrossEntropy { label, temperature: k }.gradient(&kz);
        for (a, b) in g1.iter().zip(&gk) {
            prop_assert!((a / k - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lower_bound_is_monotone_in_successes(n in 1u64..400, frac in 0.0f64..1.0, alpha in 0.001f64..0.5) {
        let k = ((n as f64) * frac).floor() as u64;
        let lo = clopper_pearson_lower(k, n, alpha).unwrap();
        prop_assert!((0.0..=(k as f64 / n as f64) + 1e-12).contains(&lo));
        if k < n {
            prop_assert!(clopper_pearson_lower(k + 1, n, alpha).unwrap() >= lo);
        }
    }

    #[test]
    fn radius_is_monotone_and_linear_in_sigma(p in 0.5001f64..0.9999, sigma in 0.01f64..2.0) {
        let r = certified_radius(sigma, p).unwrap();
        prop_assert!(r > 0.0);
        prop_assert!((certified_radius(2.0 * sigma, p).unwrap() - 2.0 * r).abs() < 1e-12);
        prop_assert!(certified_radius(sigma, (p + 1.0) / 2.0).unwrap() >= r);
        prop_assert!((norm_cdf(r / sigma) - p).abs() < 1e-9);
    }

    #[test]
    fn quantile_inverts_the_cdf(p in 1e-6f64..(1.0 - 1e-6)) {
        prop_assert!((norm_cdf(inv_norm_cdf(p).unwrap()) - p).abs() < 1e-9 * p.max(1e-3));
    }

    #[test]
    fn rank_test_weakens_as_the_split_narrows(n_b in 0usize..30, gap in 0usize..30, alpha in 0.001f64..0.5) {
        let n_a = n_b + gap;
        prop_assume!(n_a > 0);
        let wide = rank_verify(n_a + 1, n_b, alpha).unwrap();
        let narrow = rank_verify(n_a, n_b, alpha).unwrap();
        prop_assert!(wide.pvalue <= narrow.pvalue + 1e-12);
        prop_assert!(narrow.pvalue <= 1.0);
    }
}
