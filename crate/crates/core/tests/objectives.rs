mod common;

use candle_core::Var;
use common::*;
use harmonize_core::gradcheck::{check_var, DEFAULT_STEP};
use harmonize_core::objectives::*;
use harmonize_core::HarmonizeError;
use proptest::prelude::*;

fn abs_sum(h: &[f64], g: &[f64], weight: impl Fn(usize) -> f64) -> f64 {
    h.iter().zip(g).enumerate().map(|(i, (a, b))| (a - b).abs() * weight(i)).sum()
}

#[test]
fn l1_examples() {
    let mut r = rng(1);
    let g = random(&mut r, &[1, 3, 4, 4]);
    assert_eq!(scalar(&l1_whole(&g, &g).unwrap()), 0.0);
    let shifted = (&g + 0.1).unwrap();
    assert!((scalar(&l1_whole(&shifted, &g).unwrap()) - 0.1).abs() < 1e-15);

    let hv = uniform(&mut r, 12, 0.0, 1.0);
    let gv = uniform(&mut r, 12, 0.0, 1.0);
    let got = scalar(&l1_whole(&tensor(hv.clone(), &[1, 3, 2, 2]), &tensor(gv.clone(), &[1, 3, 2, 2])).unwrap());
    assert!((got - abs_sum(&hv, &gv, |_| 1.0) / 12.0).abs() < 1e-15);
}

#[test]
fn l_pixel_examples() {
    let mut r = rng(2);
    let h = random(&mut r, &[2, 3, 4, 4]);
    let g = random(&mut r, &[2, 3, 4, 4]);
    let zeros = tensor(vec![0.0; 32], &[2, 1, 4, 4]);
    assert_eq!(scalar(&l_pixel(&h, &g, &zeros).unwrap()), 0.0);
    let ones = tensor(vec![1.0; 32], &[2, 1, 4, 4]);
    let lp = scalar(&l_pixel(&h, &g, &ones).unwrap());
    assert!((lp - scalar(&l1_whole(&h, &g).unwrap())).abs() < 1e-15);

    let hv = uniform(&mut r, 12, 0.0, 1.0);
    let gv = uniform(&mut r, 12, 0.0, 1.0);
    let m = [1.0, 0.0, 1.0, 0.0];
    let got = scalar(
        &l_pixel(&tensor(hv.clone(), &[1, 3, 2, 2]), &tensor(gv.clone(), &[1, 3, 2, 2]), &tensor(m.to_vec(), &[1, 1, 2, 2]))
            .unwrap(),
    );
    let want = abs_sum(&hv, &gv, |i| m[i % 4]) / 6.0;
    assert!((got - want).abs() < 1e-15);

    let soft = [0.25, 0.5, 0.0, 1.0];
    let got = scalar(
        &l_pixel(&tensor(hv.clone(), &[1, 3, 2, 2]), &tensor(gv.clone(), &[1, 3, 2, 2]), &tensor(soft.to_vec(), &[1, 1, 2, 2]))
            .unwrap(),
    );
    let want = abs_sum(&hv, &gv, |i| soft[i % 4]) / (1.75 * 3.0);
    assert!((got - want).abs() < 1e-15);
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut r = rng(3);
    let a = random(&mut r, &[1, 3, 4, 4]);
    let b = random(&mut r, &[1, 3, 4, 2]);
    assert!(matches!(l1_whole(&a, &b), Err(HarmonizeError::Shape(_))));
    let m = random(&mut r, &[1, 1, 2, 2]);
    assert!(matches!(l_pixel(&a, &a, &m), Err(HarmonizeError::Shape(_))));
}

#[test]
fn default_weights_and_combination() {
    let w = LossWeights::default();
    assert_eq!((w.lambda1, w.lambda2, w.lambda3), (0.4, 0.5, 0.1));
    let r = combine(1.0, 1.0, 1.0, w, 0).unwrap();
    assert!((r.total - 1.0).abs() < 1e-15);
    let r = combine(0.3, 0.7, 0.0, w, 2).unwrap();
    assert!((r.total - (0.4 * 0.3 + 0.5 * 0.7)).abs() < 1e-15);
    assert_eq!(r.skipped_contrastive, 2);
    let mut g = rng(4);
    for _ in 0..20 {
        let c = uniform(&mut g, 3, 0.0, 5.0);
        let r = combine(c[0], c[1], c[2], w, 0).unwrap();
        assert!((r.total - (0.4 * c[0] + 0.5 * c[1] + 0.1 * c[2])).abs() < 1e-12);
    }
}

#[test]
fn non_finite_components_name_themselves() {
    let err = combine(0.1, f64::NAN, 0.0, LossWeights::default(), 0).unwrap_err();
    match err {
        HarmonizeError::Numeric { component, .. } => assert_eq!(component, "l_pixel"),
        e => panic!("{e}"),
    }
    let err = combine(0.1, 0.2, f64::INFINITY, LossWeights::default(), 0).unwrap_err();
    assert!(matches!(err, HarmonizeError::Numeric { component, .. } if component == "l_hcl"));
}

#[test]
fn negative_weight_is_rejected() {
    let w = LossWeights {
        lambda2: -0.1,
        ..Default::default()
    };
    assert!(matches!(w.validate(), Err(HarmonizeError::Config(_))));
}

#[test]
fn total_is_zero_at_the_optimum() {
    let mut r = rng(5);
    let g = random(&mut r, &[2, 3, 4, 4]);
    let m = binary_mask(&mut r, &[2, 1, 4, 4], 0.5);
    let zero = tensor(vec![0.0], &[]);
    let (t, rep) = total_loss(&g, &g, &m, LossWeights::default(), LossTerms::default(), Some((&zero, 2))).unwrap();
    assert_eq!(scalar(&t), 0.0);
    assert_eq!(rep.total, 0.0);
}

#[test]
fn total_loss_tensor_agrees_with_report() {
    let mut r = rng(6);
    let h = random(&mut r, &[2, 3, 4, 4]);
    let g = random(&mut r, &[2, 3, 4, 4]);
    let m = binary_mask(&mut r, &[2, 1, 4, 4], 0.5);
    let hcl = tensor(vec![2.5], &[]);
    let w = LossWeights::default();
    let (t, rep) = total_loss(&h, &g, &m, w, LossTerms::default(), Some((&hcl, 0))).unwrap();
    let l1 = scalar(&l1_whole(&h, &g).unwrap());
    let lp = scalar(&l_pixel(&h, &g, &m).unwrap());
    assert!((rep.total - (0.4 * l1 + 0.5 * lp + 0.25)).abs() < 1e-12);
    assert!((scalar(&t) - rep.total).abs() < 1e-12);
    assert_eq!(rep.l_hcl, 2.5);

    let off = LossTerms {
        use_lpixel: false,
        use_lhcl: false,
    };
    let (t, rep) = total_loss(&h, &g, &m, w, off, Some((&hcl, 0))).unwrap();
    assert!((scalar(&t) - 0.4 * l1).abs() < 1e-15);
    assert_eq!((rep.weights.lambda2, rep.weights.lambda3, rep.l_hcl), (0.0, 0.0, 0.0));
    assert_eq!(rep.l_pixel, lp);

    let (_, rep) = total_loss(&h, &g, &m, w, LossTerms::default(), None).unwrap();
    assert!((rep.total - (0.4 * l1 + 0.5 * lp)).abs() < 1e-12);
}

#[test]
fn l_pixel_gradients_match_finite_differences() {
    let mut r = rng(7);
    for case in 0..5 {
        let h = Var::from_tensor(&random(&mut r, &[2, 3, 4, 4])).unwrap();
        let g = random(&mut r, &[2, 3, 4, 4]);
        let m = random(&mut r, &[2, 1, 4, 4]).abs().unwrap();
        let f = || l_pixel(h.as_tensor(), &g, &m);
        let c = check_var(f, &h, DEFAULT_STEP, None, case).unwrap();
        assert!(c.passes(1e-3), "{c:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn l1_terms_scale_with_the_residual(seed in 0u64..100_000, a in 0.1f64..10.0) {
        let mut r = rng(seed);
        let g = random(&mut r, &[1, 3, 4, 4]);
        let d = random(&mut r, &[1, 3, 4, 4]);
        let m = binary_mask(&mut r, &[1, 1, 4, 4], 0.5);
        let h1 = (&g + &d).unwrap();
        let ha = (&g + (&d * a).unwrap()).unwrap();
        let l1 = scalar(&l1_whole(&h1, &g).unwrap());
        let l1a = scalar(&l1_whole(&ha, &g).unwrap());
        prop_assert!((l1a - a * l1).abs() <= 1e-12 * l1a.max(1.0));
        let lp = scalar(&l_pixel(&h1, &g, &m).unwrap());
        let lpa = scalar(&l_pixel(&ha, &g, &m).unwrap());
        prop_assert!((lpa - a * lp).abs() <= 1e-12 * lpa.max(1.0));
    }

    #[test]
    fn report_total_is_weighted_sum(l1 in 0.0f64..10.0, lp in 0.0f64..10.0, lh in 0.0f64..10.0,
                                     w1 in 0.0f64..1.0, w2 in 0.0f64..1.0, w3 in 0.0f64..1.0) {
        let w = LossWeights { lambda1: w1, lambda2: w2, lambda3: w3 };
        let r = combine(l1, lp, lh, w, 0).unwrap();
        prop_assert!((r.total - (w1 * l1 + w2 * lp + w3 * lh)).abs() <= 1e-6);
    }
}
