use approx::assert_abs_diff_eq;
use autograd::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trackcore::losses::{
    asso_loss, inner_frame_triplet_loss, inter_frame_loss, label_matrix, memory_loss, paired_cosine, total_loss,
    total_loss_value, LossConfig, MemoryBank, ASSO_EPS,
};
use trackcore::Matrix;

fn scalar(v: autograd::Var<'_>) -> f64 {
    v.value().item()
}

#[test]
fn label_matrix_examples() {
    assert_eq!(label_matrix(&[2, 1], &[1, 2]), Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]));
    assert_eq!(label_matrix(&[3, 4], &[1, 2]), Matrix::zeros(2, 2));
    assert_eq!(
        label_matrix(&[5, 6, 7], &[5, 6, 7]),
        Matrix::from_fn(3, 3, |r, c| if r == c { 1.0 } else { 0.0 })
    );
}

#[test]
fn inter_frame_loss_closed_forms() {
    let g = Graph::new();
    let y = Matrix::from_rows(&[&[0.0, 1.0, 0.0, 0.0]]);
    // Uniform row: cross-entropy of a uniform softmax over four classes.
    let s = g.input(Tensor::full(&[1, 4], 0.3));
    assert_abs_diff_eq!(scalar(inter_frame_loss(s, &y, 1.0, 0.0).unwrap()), 4f64.ln(), epsilon = 1e-12);

    let s = g.input(Tensor::new(&[1, 4], vec![0.0, 10.0, 0.0, 0.0]).unwrap());
    let saturated = scalar(inter_frame_loss(s, &y, 1.0, 0.0).unwrap());
    assert_abs_diff_eq!(saturated, (1.0 + 3.0 * (-10f64).exp()).ln(), epsilon = 1e-12);
    assert!(saturated < 2e-4);

    // Similarities that equal the label pattern under the default logit map.
    let cfg = LossConfig::default();
    let y = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let s = g.input(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    assert!(scalar(inter_frame_loss(s, &y, cfg.logit_scale, cfg.logit_center).unwrap()) < 1e-3);

    assert!(inter_frame_loss(g.input(Tensor::zeros(&[2, 3])), &y, 1.0, 0.0).is_err());
}

#[test]
fn inter_frame_loss_scores_unmatched_rows_against_no_match() {
    let g = Graph::new();
    // All-zero label row: the zero logit is the target class.
    let y = Matrix::zeros(1, 3);
    let s = g.input(Tensor::zeros(&[1, 3]));
    assert_abs_diff_eq!(scalar(inter_frame_loss(s, &y, 1.0, 0.0).unwrap()), 4f64.ln(), epsilon = 1e-12);
}

#[test]
fn memory_ratio_examples() {
    let mut bank = MemoryBank::new();
    assert_eq!(bank.update(&[0.3, 0.4], 1), 1.0);
    assert_eq!(bank.update(&[0.3, 0.4], 1), 1.0);
    assert_eq!(bank.get(1).unwrap(), &[0.3, 0.4]);

    let mut bank = MemoryBank::new();
    bank.update(&[1.0, 0.0], 1);
    bank.update(&[0.0, 1.0], 2);
    let e = std::f64::consts::E;
    assert_abs_diff_eq!(bank.ratio(&[2.0, 0.0], 1).unwrap(), e / (e + 1.0), epsilon = 1e-15);
    assert!(bank.ratio(&[1.0, 0.0], 9).is_none());
}

#[test]
fn ratio_stays_in_unit_interval_over_ten_thousand_states() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10_000 {
        let k = rng.random_range(1..=8);
        let d = rng.random_range(1..=6);
        let mut bank = MemoryBank::new();
        for id in 0..k {
            let f: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            bank.update(&f, id);
        }
        let feat: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let alpha = bank.ratio(&feat, rng.random_range(0..k)).unwrap();
        assert!(alpha > 0.0 && alpha <= 1.0, "alpha {alpha}");
    }
}

#[test]
fn memory_loss_examples() {
    let g = Graph::new();
    let mut bank = MemoryBank::new();
    bank.update(&[0.2, -0.7, 0.1], 4);
    let f = g.input(Tensor::new(&[1, 3], vec![1.0, 1.0, 1.0]).unwrap());
    assert_eq!(scalar(memory_loss(&bank, f, &[4], 0.1).unwrap()), 0.0);

    let mut bank = MemoryBank::new();
    bank.update(&[1.0, 0.0, 0.0], 1);
    bank.update(&[0.0, 1.0, 0.0], 2);
    bank.update(&[0.0, 0.0, 1.0], 3);
    let f = g.input(Tensor::new(&[1, 3], vec![0.0, 5.0, 0.0]).unwrap());
    let low_t = scalar(memory_loss(&bank, f, &[2], 0.01).unwrap());
    assert!(low_t < 1e-40, "{low_t}");
    assert!(memory_loss(&bank, f, &[8], 0.1).is_err());
}

#[test]
fn triplet_examples() {
    let g = Graph::new();
    let t = |rows: &[Vec<f64>]| g.input(Tensor::from_rows(rows));
    // Positive cosine 1, hard negative cosine 0: the hinge is inactive.
    let cur = t(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let prev = t(&[vec![2.0, 0.0], vec![0.0, 3.0]]);
    assert_eq!(scalar(inner_frame_triplet_loss(cur, prev, &[1, 2], &[1, 2], 0.3).unwrap()), 0.0);

    // Positive equals the negative feature: the term is the margin.
    let cur = t(&[vec![1.0, 0.2], vec![0.4, 1.0]]);
    let prev = t(&[vec![0.4, 1.0]]);
    assert_abs_diff_eq!(
        scalar(inner_frame_triplet_loss(cur, prev, &[1, 2], &[1], 0.3).unwrap()),
        0.3,
        epsilon = 1e-15
    );

    let single = t(&[vec![1.0, 0.0]]);
    assert_eq!(scalar(inner_frame_triplet_loss(single, single, &[1], &[1], 0.3).unwrap()), 0.0);
}

#[test]
fn total_loss_uses_the_configured_weights() {
    let cfg = LossConfig::default();
    assert_eq!((cfg.lambda1, cfg.lambda2), (0.2, 1.0));
    assert_eq!(total_loss_value(1.0, 2.0, 3.0, &cfg), 4.4);
    let g = Graph::new();
    let c = |v: f64| g.input(Tensor::scalar(v));
    assert_eq!(scalar(total_loss(c(1.0), c(2.0), c(3.0), &cfg).unwrap()), 4.4);
    let off = LossConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        ..cfg.clone()
    };
    assert_eq!(total_loss_value(0.7, 2.0, 3.0, &off), 0.7);
    assert_eq!(total_loss_value(0.0, 0.0, 0.0, &cfg), 0.0);
}

#[test]
fn asso_loss_examples() {
    let g = Graph::new();
    let v = |x: Vec<f64>| g.input(Tensor::vector(x));
    assert!(scalar(asso_loss(v(vec![1.0 - ASSO_EPS]), &[1.0]).unwrap()) < 1e-6);
    for y in [0.0, 1.0] {
        assert_abs_diff_eq!(scalar(asso_loss(v(vec![0.5]), &[y]).unwrap()), 2f64.ln(), epsilon = 1e-15);
    }
    // Clipping keeps an exact 0 or 1 finite.
    assert!(scalar(asso_loss(v(vec![0.0, 1.0]), &[1.0, 0.0]).unwrap()).is_finite());
    assert!(asso_loss(v(vec![]), &[]).is_err());
}

#[test]
fn paired_cosine_is_clamped() {
    let g = Graph::new();
    let a = g.input(Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]));
    let b = g.input(Tensor::from_rows(&[vec![-1.0, 0.0], vec![2.0, 2.0]]));
    let s = paired_cosine(a, b).unwrap().value();
    assert_eq!(s.data()[0], 0.0);
    assert_abs_diff_eq!(s.data()[1], 1.0, epsilon = 1e-15);
}

proptest! {
    #[test]
    fn memory_update_is_a_convex_combination(
        old in prop::collection::vec(-4.0f64..4.0, 5),
        other in prop::collection::vec(-4.0f64..4.0, 5),
        new in prop::collection::vec(-4.0f64..4.0, 5),
    ) {
        let mut bank = MemoryBank::new();
        bank.update(&old, 1);
        bank.update(&other, 2);
        let alpha = bank.update(&new, 1);
        prop_assert!(alpha > 0.0 && alpha <= 1.0);
        for ((m, o), n) in bank.get(1).unwrap().iter().zip(&old).zip(&new) {
            prop_assert!((m - (alpha * n + (1.0 - alpha) * o)).abs() < 1e-12);
            prop_assert!(*m >= o.min(*n) - 1e-12 && *m <= o.max(*n) + 1e-12);
        }
    }

    #[test]
    fn losses_are_nonnegative(
        sims in prop::collection::vec(0.0f64..=1.0, 1..8),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<f64> = sims.iter().map(|_| f64::from(rng.random::<bool>())).collect();
        let g = Graph::new();
        prop_assert!(scalar(asso_loss(g.input(Tensor::vector(sims.clone())), &labels).unwrap()) >= 0.0);
        let n = sims.len();
        let y = Matrix::from_fn(1, n, |_, c| if c == 0 { 1.0 } else { 0.0 });
        let s = g.input(Tensor::new(&[1, n], sims).unwrap());
        prop_assert!(scalar(inter_frame_loss(s, &y, 20.0, 0.5).unwrap()) >= 0.0);
    }
}
