use agedit_core::acg::{denormalize_age, normalize_age};
use agedit_core::autodiff::Tape;
use agedit_core::diffusion::{ddim_timesteps, forward_diffuse, make_schedule, ScheduleKind};
use agedit_core::eval::paired_t;
use agedit_core::model::{patchify_index, unpatchify_index, token_of_pixel, TOKENS};
use agedit_core::rng;
use agedit_core::synthface::{cosine, oracle_age, render_face, stratified_specs, SyntheticFaceSpec, IMAGE_SIZE};
use agedit_core::train::window_means;
use agedit_core::Tensor;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Tensor::new(&[rows, cols], v).unwrap())
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k) = a.as_matrix_dims();
    let n = b.as_matrix_dims().1;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a.at(i, p) * b.at(p, j)).sum();
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(x in matrix(3, 5), shift in -50.0f64..50.0) {
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let s = tape.softmax_rows(a).unwrap();
        let shifted = tape.constant(x.map(|v| v + shift));
        let s2 = tape.softmax_rows(shifted).unwrap();
        let (p, q) = (tape.value(s).clone(), tape.value(s2).clone());
        for r in 0..3 {
            let row: f64 = (0..5).map(|c| p.at(r, c)).sum();
            prop_assert!((row - 1.0).abs() < 1e-12);
        }
        prop_assert!(p.data().iter().all(|&v| v > 0.0));
        prop_assert!(p.max_abs_diff(&q) < 1e-12);
    }

    #[test]
    fn matmul_matches_the_definition(a in matrix(4, 3), b in matrix(3, 5)) {
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        let want = naive_matmul(&a, &b);
        for (x, y) in tape.value(c).data().iter().zip(&want) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_of_sum_of_matmul_is_row_and_column_sums(a in matrix(2, 3), b in matrix(3, 4)) {
        let mut tape = Tape::new();
        let (va, vb) = (tape.param(a.clone()), tape.param(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        let ga = tape.grad(va).unwrap();
        for i in 0..2 {
            for p in 0..3 {
                let want: f64 = (0..4).map(|j| b.at(p, j)).sum();
                prop_assert!((ga[i * 3 + p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_diffuse_is_affine_in_the_noise(t in 1usize..=200, seed in any::<u64>()) {
        let sched = make_schedule(200, ScheduleKind::Linear, 5e-4, 0.1).unwrap();
        let mut r = rng::stream(seed);
        let z0: Tensor<f64> = rng::normal_tensor(&mut r, &[1, 4, 4]);
        let e: Tensor<f64> = rng::normal_tensor(&mut r, &[1, 4, 4]);
        let zero = Tensor::zeros(&[1, 4, 4]);
        let zt = forward_diffuse(&z0, t, &e, &sched).unwrap();
        let signal = forward_diffuse(&z0, t, &zero, &sched).unwrap();
        let ab = sched.alpha_bar(t);
        for i in 0..16 {
            prop_assert!((signal.data()[i] - ab.sqrt() * z0.data()[i]).abs() < 1e-12);
            prop_assert!((zt.data()[i] - signal.data()[i] - (1.0 - ab).sqrt() * e.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_bar_decreases(t in 1usize..200) {
        let sched = make_schedule(200, ScheduleKind::Linear, 5e-4, 0.1).unwrap();
        prop_assert!(sched.alpha_bar(t + 1) < sched.alpha_bar(t));
        prop_assert!(sched.alpha_bar(t) > 0.0 && sched.alpha_bar(t) < 1.0);
    }

    #[test]
    fn ddim_timesteps_ascend_to_t(total in 1usize..300, frac in 0.0f64..1.0) {
        let steps = 1 + ((total - 1) as f64 * frac) as usize;
        let ts = ddim_timesteps(total, steps).unwrap();
        prop_assert_eq!(ts.len(), steps);
        prop_assert_eq!(*ts.last().unwrap(), total);
        prop_assert!(ts.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(ts[0] >= 1);
    }

    #[test]
    fn age_normalization_inverts(age in 1.0f64..85.0) {
        prop_assert!((denormalize_age(normalize_age(age)) - age).abs() < 1e-12);
    }

    #[test]
    fn cosine_is_bounded_and_scale_free(a in prop::collection::vec(-1.0f64..1.0, 8), k in 0.1f64..10.0) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3));
        let b: Vec<f64> = a.iter().map(|v| v * k).collect();
        prop_assert!((cosine(&a, &b) - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        prop_assert!((cosine(&a, &neg) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn renders_are_bounded_and_oracle_recovers_age(seed in any::<u64>(), age in 1u32..=85) {
        let spec = SyntheticFaceSpec::random(&mut rng::stream(seed), age);
        let img = render_face::<f64>(&spec).unwrap();
        prop_assert_eq!(img.shape(), &[1, IMAGE_SIZE, IMAGE_SIZE]);
        prop_assert!(img.data().iter().all(|v| v.abs() <= 1.0));
        prop_assert!((oracle_age(&img).age - age as f64).abs() <= 1.0);
    }

    #[test]
    fn paired_t_is_antisymmetric(a in prop::collection::vec(-1.0f64..1.0, 5..30), d in 0.01f64..1.0) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v - d * (1.0 + (i % 3) as f64)).collect();
        let t = paired_t(&a, &b);
        prop_assert!(t > 0.0);
        prop_assert!((paired_t(&b, &a) + t).abs() < 1e-9);
    }

    #[test]
    fn window_means_average_each_chunk(v in prop::collection::vec(-5.0f64..5.0, 0..50), w in 1usize..10) {
        let m = window_means(&v, w);
        prop_assert_eq!(m.len(), v.len() / w);
        for (i, x) in m.iter().enumerate() {
            let want = v[i * w..(i + 1) * w].iter().sum::<f64>() / w as f64;
            prop_assert!((x - want).abs() < 1e-12);
        }
    }
}

#[test]
fn patch_index_maps_are_inverse_and_respect_token_layout() {
    let fwd = patchify_index(2);
    let inv = unpatchify_index(2);
    for (i, &j) in fwd.iter().enumerate() {
        assert_eq!(inv[j], i);
    }
    // Pixel (r, c) of image 0 lands in the token the layout function names.
    for r in 0..IMAGE_SIZE {
        for c in 0..IMAGE_SIZE {
            let pixel = r * IMAGE_SIZE + c;
            let pos = inv[pixel];
            assert_eq!(pos / (fwd.len() / 2 / TOKENS), token_of_pixel(r, c));
        }
    }
}

#[test]
fn stratified_specs_are_reproducible() {
    assert_eq!(stratified_specs(20, 4), stratified_specs(20, 4));
    assert_ne!(stratified_specs(20, 4), stratified_specs(20, 5));
}
