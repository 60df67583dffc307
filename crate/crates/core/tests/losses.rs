mod common;

use evstereo::losses::{
    aux_2d_loss, box_regression_loss, depth_losses, focal_cls_loss, focal_loss, masked_smooth_l1, smooth_l1,
    total_loss, AnchorLabel, LossTerms, FOCAL_ALPHA, FOCAL_GAMMA,
};
use evstereo::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn smooth_l1_oracle(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        0.5 * x * x / beta
    } else {
        x.abs() - 0.5 * beta
    }
}

fn smooth_l1_slope(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

fn focal_oracle(x: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    let p = 1.0 / (1.0 + (-x).exp());
    -alpha * t * (1.0 - p).powf(gamma) * p.ln() - (1.0 - alpha) * (1.0 - t) * p.powf(gamma) * (1.0 - p).ln()
}

proptest! {
    #[test]
    fn smooth_l1_value_and_gradient(p in prop::collection::vec(-4.0f64..4.0, 1..20), beta in 0.1f64..2.0) {
        let n = p.len();
        let t: Vec<f64> = p.iter().map(|v| v * 0.3 - 0.1).collect();
        let mut g = Graph::new();
        let a = g.param(Tensor::new(vec![n], p.clone()).unwrap());
        let b = g.constant(Tensor::new(vec![n], t.clone()).unwrap());
        let l = smooth_l1(&mut g, a, b, beta).unwrap();
        let want: f64 = p.iter().zip(&t).map(|(x, y)| smooth_l1_oracle(x - y, beta)).sum::<f64>() / n as f64;
        prop_assert!((g.value(l).item().unwrap() - want).abs() < 1e-12);
        let grad = g.backward(l).unwrap().wrt(a);
        for (i, (x, y)) in p.iter().zip(&t).enumerate() {
            prop_assert!((grad.data()[i] - smooth_l1_slope(x - y, beta) / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_matches_probability_form(x in prop::collection::vec(-8.0f64..8.0, 1..20), seed in 0u64..1000) {
        let mut r = common::rng(seed);
        let n = x.len();
        let t: Vec<f64> = (0..n).map(|_| r.random_range(0.0..=1.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| r.random_range(0..3) as f64).collect();
        let mut g = Graph::new();
        let v = g.param(Tensor::new(vec![n], x.clone()).unwrap());
        let l = focal_loss(&mut g, v, &t, &w, FOCAL_ALPHA, FOCAL_GAMMA).unwrap();
        let norm: f64 = w.iter().sum();
        let want = if norm == 0.0 {
            0.0
        } else {
            (0..n).map(|i| w[i] * focal_oracle(x[i], t[i], FOCAL_ALPHA, FOCAL_GAMMA)).sum::<f64>() / norm
        };
        prop_assert!((g.value(l).item().unwrap() - want).abs() < 1e-10 * want.abs().max(1.0));
    }
}

#[test]
fn focal_is_stable_at_extreme_logits() {
    let mut g = Graph::new();
    let v = g.param(Tensor::new(vec![4], vec![800.0, -800.0, 800.0, -800.0]).unwrap());
    let l = focal_loss(&mut g, v, &[1.0, 0.0, 0.0, 1.0], &[1.0; 4], FOCAL_ALPHA, FOCAL_GAMMA).unwrap();
    let val = g.value(l).item().unwrap();
    // Confident correct logits cost nothing; confident wrong ones cost ~|x|.
    let want = (FOCAL_ALPHA * 800.0 + (1.0 - FOCAL_ALPHA) * 800.0) / 4.0;
    assert!((val - want).abs() < 1e-9, "{val}");
    let grad = g.backward(l).unwrap().wrt(v);
    assert!(grad.data().iter().all(|x| x.is_finite()));
}

#[test]
fn ignored_anchors_do_not_contribute() {
    let logits = vec![1.5, -0.5, 3.0, -2.0];
    let labels = [AnchorLabel::Positive, AnchorLabel::Negative, AnchorLabel::Ignore, AnchorLabel::Negative];
    let mut g = Graph::new();
    let v = g.param(Tensor::new(vec![4], logits.clone()).unwrap());
    let l = focal_cls_loss(&mut g, v, &labels, FOCAL_ALPHA, FOCAL_GAMMA).unwrap();
    let want = (focal_oracle(1.5, 1.0, FOCAL_ALPHA, FOCAL_GAMMA)
        + focal_oracle(-0.5, 0.0, FOCAL_ALPHA, FOCAL_GAMMA)
        + focal_oracle(-2.0, 0.0, FOCAL_ALPHA, FOCAL_GAMMA))
        / 3.0;
    assert!((g.value(l).item().unwrap() - want).abs() < 1e-12);
    assert_eq!(g.backward(l).unwrap().wrt(v).data()[2], 0.0);
    let all_ignored = focal_cls_loss(&mut g, v, &[AnchorLabel::Ignore; 4], FOCAL_ALPHA, FOCAL_GAMMA).unwrap();
    assert_eq!(g.value(all_ignored).item().unwrap(), 0.0);
}

#[test]
fn aux_heatmap_averages_over_pixels() {
    let mut r = common::rng(6);
    let hm = Tensor::from_fn(vec![1, 3, 4], |_| r.random_range(0.0..1.0));
    let x = Tensor::from_fn(vec![1, 3, 4], |_| r.random_range(-3.0..3.0));
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let l = aux_2d_loss(&mut g, v, &hm).unwrap();
    let want: f64 = x
        .data()
        .iter()
        .zip(hm.data())
        .map(|(&a, &t)| focal_oracle(a, t, FOCAL_ALPHA, FOCAL_GAMMA))
        .sum::<f64>()
        / 12.0;
    assert!((g.value(l).item().unwrap() - want).abs() < 1e-12);
    let wrong = Tensor::zeros(vec![1, 4, 3]);
    assert!(aux_2d_loss(&mut g, v, &wrong).is_err());
}

#[test]
fn masked_depth_losses_use_only_masked_pixels() {
    let gt = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
    let mask = [true, false, false, true];
    let mut g = Graph::new();
    let init = g.param(Tensor::new(vec![2, 2], vec![5.5, 100.0, -100.0, 10.0]).unwrap());
    let refined = g.param(Tensor::new(vec![2, 2], vec![5.0, 0.0, 0.0, 8.0]).unwrap());
    let (li, lr) = depth_losses(&mut g, init, refined, &gt, &mask).unwrap();
    assert!((g.value(li).item().unwrap() - (0.125 + 1.5) / 2.0).abs() < 1e-12);
    assert_eq!(g.value(lr).item().unwrap(), 0.0);
    let t = g.constant(gt.clone());
    let none = masked_smooth_l1(&mut g, init, t, &[false; 4], 1.0).unwrap();
    assert_eq!(g.value(none).item().unwrap(), 0.0);
    assert!(masked_smooth_l1(&mut g, init, t, &[true; 3], 1.0).is_err());
}

#[test]
fn empty_regression_is_zero_and_total_is_the_sum() {
    let mut g = Graph::new();
    let pred = g.param(Tensor::zeros(vec![7, 0]));
    let z = box_regression_loss(&mut g, pred, &Tensor::zeros(vec![7, 0])).unwrap();
    assert_eq!(g.value(z).item().unwrap(), 0.0);
    let vals = [0.5, 0.25, 1.0, 2.0, 0.125, 4.0];
    let terms = vals.map(|v| g.param(Tensor::scalar(v)));
    let (total, b) = total_loss(&mut g, &LossTerms(terms)).unwrap();
    assert_eq!(g.value(total).item().unwrap(), vals.iter().sum::<f64>());
    assert_eq!(b.components(), vals);
    assert_eq!(b.non_finite(), None);
    let grads = g.backward(total).unwrap();
    for t in terms {
        assert_eq!(grads.wrt(t).data(), &[1.0]);
    }
}
