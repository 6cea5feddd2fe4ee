mod support;

use hvx_core::hyperball::{
    clip_to_ball, hyperbolic_distill_loss, log_map, log_map_zero, mobius_add, to_tangent, BallPoint, PoincareBall,
};
use hvx_core::FeatureRows;
use proptest::prelude::*;

#[test]
fn identities_hold_at_three_curvatures() {
    for (i, k) in [0.5, 1.0, 2.0].into_iter().enumerate() {
        support::check_hyperbolic_identities(k, 1000, 11 + i as u64).unwrap();
    }
}

#[test]
fn distill_of_one_voxel_is_atanh_half() {
    let ball = PoincareBall::new(-1.0, 1e-5).unwrap();
    let t = FeatureRows::from_rows(&[&[0.5, 0.0]]).unwrap();
    let s = FeatureRows::from_rows(&[&[0.0, 0.0]]).unwrap();
    let out = hyperbolic_distill_loss(&[t], &[s], &ball).unwrap();
    assert!((out.loss - 0.5f64.atanh()).abs() < 1e-9);
}

#[test]
fn strides_add_up() {
    let ball = PoincareBall::new(-2.0, 1e-5).unwrap();
    let a = FeatureRows::from_rows(&[&[0.1, 0.2], &[-0.3, 0.05]]).unwrap();
    let b = FeatureRows::from_rows(&[&[0.0, -0.4], &[0.2, 0.2]]).unwrap();
    let c = FeatureRows::from_rows(&[&[0.6]]).unwrap();
    let d = FeatureRows::from_rows(&[&[-0.1]]).unwrap();
    let one = hyperbolic_distill_loss(&[a.clone()], &[b.clone()], &ball).unwrap().loss;
    let two = hyperbolic_distill_loss(&[c.clone()], &[d.clone()], &ball).unwrap().loss;
    let both = hyperbolic_distill_loss(&[a, c], &[b, d], &ball).unwrap();
    assert_eq!(both.per_stride, vec![one, two]);
    assert_eq!(both.loss, one + two);
}

fn ball_strategy() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.5), Just(1.0), Just(2.0), 0.1f64..4.0]
}

proptest! {
    #[test]
    fn mobius_stays_inside(k in ball_strategy(), z in prop::collection::vec(-3.0f64..3.0, 3), x in prop::collection::vec(-3.0f64..3.0, 3)) {
        let ball = PoincareBall::new(-k, 1e-5).unwrap();
        let z = clip_to_ball(&z, &ball).unwrap();
        let x = clip_to_ball(&x, &ball).unwrap();
        if let Ok(s) = mobius_add(&z, &x, &ball) {
            let n = s.coords().iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(n < ball.radius());
        }
    }

    #[test]
    fn clip_is_idempotent_bitwise(k in ball_strategy(), x in prop::collection::vec(-5.0f64..5.0, 1..6)) {
        let ball = PoincareBall::new(-k, 1e-5).unwrap();
        let once = clip_to_ball(&x, &ball).unwrap();
        let twice = clip_to_ball(once.coords(), &ball).unwrap();
        prop_assert_eq!(once.coords(), twice.coords());
    }

    #[test]
    fn tangent_of_inside_point_is_log(k in ball_strategy(), x in prop::collection::vec(-0.3f64..0.3, 2..5)) {
        let ball = PoincareBall::new(-k, 1e-5).unwrap();
        let p = BallPoint::new(x.clone(), &ball);
        prop_assume!(p.is_ok());
        let p = p.unwrap();
        prop_assert_eq!(to_tangent(&x, &ball).unwrap(), log_map_zero(&p, &ball));
    }

    #[test]
    fn log_at_origin_agrees(k in ball_strategy(), x in prop::collection::vec(-0.3f64..0.3, 2..5)) {
        let ball = PoincareBall::new(-k, 1e-5).unwrap();
        let p = BallPoint::new(x.clone(), &ball);
        prop_assume!(p.is_ok());
        let p = p.unwrap();
        let general = log_map(&BallPoint::origin(x.len()), &p, &ball).unwrap();
        let zero = log_map_zero(&p, &ball);
        for (a, b) in general.coords().iter().zip(zero.coords()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn distill_is_symmetric_and_nonnegative(rows in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..6)) {
        let ball = PoincareBall::new(-1.0, 1e-5).unwrap();
        let t: Vec<[f64; 2]> = rows.iter().map(|&(a, b)| [a, b]).collect();
        let s: Vec<[f64; 2]> = rows.iter().map(|&(a, b)| [b, -a]).collect();
        let t = FeatureRows::from_flat(2, t.concat()).unwrap();
        let s = FeatureRows::from_flat(2, s.concat()).unwrap();
        let ab = hyperbolic_distill_loss(&[t.clone()], &[s.clone()], &ball).unwrap().loss;
        let ba = hyperbolic_distill_loss(&[s], &[t], &ball).unwrap().loss;
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, ba);
    }
}
