//! Property tests over the numeric core: softmax simplex outputs,
//! encode/decode identity, fitter equivariance and exactness, and
//! permutation invariance of the position-free transformer.

use proptest::prelude::*;

use icl_core::analysis::power_law::fit_power_law;
use icl_core::tape::Tape;
use icl_core::tasks::{evaluate, sample_task, TaskParams, TaskSpec};
use icl_core::tensor::Tensor;
use icl_core::transformer::{decode_prompt, encode_context, forward, init_model, ModelConfig};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_outputs_form_a_probability_simplex(
        rows in 1usize..5,
        cols in 1usize..7,
        temp in 0.1f64..10.0,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let y = tape.softmax(x, 1, temp).unwrap();
        let v = tape.value(y);
        for r in 0..rows {
            let row = &v.data[r * cols..(r + 1) * cols];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn encode_decode_identity(
        k in 0usize..5,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig {
            depth: 1,
            width: 8,
            heads: 2,
            ffn_multiplier: 2,
            max_context_pairs: 5,
            d_x: 3,
            d_y: 2,
            positional: true,
            seed: 0,
        };
        let xs: Vec<Vec<f64>> = (0..k).map(|_| (0..3).map(|_| rng.gen_range(-10.0..10.0)).collect()).collect();
        let ys: Vec<Vec<f64>> = (0..k).map(|_| (0..2).map(|_| rng.gen_range(-10.0..10.0)).collect()).collect();
        let q: Vec<f64> = (0..3).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let p = encode_context(&cfg, &xs, &ys, &q).unwrap();
        let (xs2, ys2, q2) = decode_prompt(&cfg, &p);
        prop_assert_eq!(xs, xs2);
        prop_assert_eq!(ys, ys2);
        prop_assert_eq!(q, q2);
    }

    #[test]
    fn power_law_fit_is_exact_on_noiseless_curves(
        exponent in 0.05f64..2.0,
        amplitude in 0.01f64..1e4,
    ) {
        let points: Vec<(f64, f64)> = (0..10)
            .map(|i| {
                let x = 10.0 * 3f64.powi(i);
                (x, amplitude * x.powf(-exponent))
            })
            .collect();
        let fit = fit_power_law(&points).unwrap();
        prop_assert!((fit.exponent - exponent).abs() < 1e-10, "{} vs {exponent}", fit.exponent);
        prop_assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn power_law_fit_scale_equivariance(
        scale in prop::sample::select(vec![0.25f64, 0.5, 2.0, 4.0, 1024.0, 3.7, 1e-3]),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<(f64, f64)> = (0..8)
            .map(|i| {
                let x = 10.0 * 2f64.powi(i);
                (x, 5.0 * x.powf(-0.7) * rng.gen_range(0.9..1.1))
            })
            .collect();
        let base = fit_power_law(&points).unwrap();
        let scaled: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x, scale * y)).collect();
        let fit = fit_power_law(&scaled).unwrap();
        // equal up to log-evaluation rounding
        prop_assert!(
            (fit.exponent - base.exponent).abs() < 1e-12,
            "{} vs {}", fit.exponent, base.exponent
        );
    }

    #[test]
    fn sparse_tasks_ignore_off_support_perturbations(
        seed in any::<u64>(),
        bump in -100.0f64..100.0,
    ) {
        let spec = TaskSpec::sparse_linear(8, 3, 0.0);
        let task = sample_task(&spec, seed).unwrap();
        let TaskParams::Weights(w) = &task.params else { unreachable!() };
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let base = evaluate(&task, &x);
        let mut x2 = x.clone();
        for (i, wv) in w.iter().enumerate() {
            if *wv == 0.0 {
                x2[i] += bump;
            }
        }
        prop_assert_eq!(base, evaluate(&task, &x2));
    }
}

proptest! {
    // the transformer forward is heavier; fewer cases
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn position_free_model_is_permutation_invariant(
        seed in any::<u64>(),
        rot in 1usize..4,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig {
            depth: 2,
            width: 8,
            heads: 2,
            ffn_multiplier: 2,
            max_context_pairs: 4,
            d_x: 3,
            d_y: 1,
            positional: false,
            seed,
        };
        let mut model = init_model(&cfg).unwrap();
        model.w_out = Tensor::new(vec![8, 1], (0..8).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let ys: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
        let q: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = forward(&model, &encode_context(&cfg, &xs, &ys, &q).unwrap()).unwrap();
        let mut xs_p = xs.clone();
        let mut ys_p = ys.clone();
        xs_p.rotate_left(rot);
        ys_p.rotate_left(rot);
        let b = forward(&model, &encode_context(&cfg, &xs_p, &ys_p, &q).unwrap()).unwrap();
        prop_assert!((a[0] - b[0]).abs() < 1e-6, "{} vs {}", a[0], b[0]);
    }
}
