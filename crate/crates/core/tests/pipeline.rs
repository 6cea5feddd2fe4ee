mod support;

use hvx_core::objective::{grad_check_par, Config};
use hvx_core::pipeline::Pipeline;
use hvx_core::scenegen::{generate_scene, SyntheticScene};
use support::{small_config, small_spec};

#[test]
fn empty_scene_has_zero_loss() {
    let scene = SyntheticScene::empty(&small_spec(), 0).unwrap();
    let pipe = Pipeline::prepare(&scene, &Config::default()).unwrap();
    let model = pipe.init_model().unwrap();
    let eval = pipe.evaluate(&model, true).unwrap();
    assert_eq!(eval.bundle.total, 0.0);
    for c in pipe.counts(&eval) {
        assert_eq!((c.input, c.merged, c.output), (0, 0, 0));
    }
    assert!(eval.grad.unwrap().to_flat().iter().all(|&g| g == 0.0));
}

#[test]
fn partition_splits_the_input() {
    let scene = generate_scene(&Default::default(), 9).unwrap();
    let pipe = Pipeline::prepare(&scene, &Config::default()).unwrap();
    let eval = pipe.evaluate(&pipe.init_model().unwrap(), false).unwrap();
    let counts = pipe.counts(&eval);
    assert_eq!(counts.len(), Config::default().strides.len());
    for c in counts {
        assert_eq!(c.foreground + c.background, c.input);
        assert!(c.foreground > 0 && c.background > 0);
        assert!(c.densified <= 27 * c.foreground);
        assert!(c.sparsified <= c.background);
        assert!(c.filtered <= Config::default().top_k);
    }
}

#[test]
fn evaluation_is_repeatable() {
    let scene = generate_scene(&small_spec(), 4).unwrap();
    let cfg = small_config(true);
    let a = Pipeline::prepare(&scene, &cfg).unwrap();
    let b = Pipeline::prepare(&scene, &cfg).unwrap();
    let ea = a.evaluate(&a.init_model().unwrap(), true).unwrap();
    let eb = b.evaluate(&b.init_model().unwrap(), true).unwrap();
    assert_eq!(ea.bundle, eb.bundle);
    assert_eq!(ea.grad.unwrap().to_flat(), eb.grad.unwrap().to_flat());
}

// With the teacher not detached every weighted term is differentiated,
// so the backward pass must agree with central differences.
#[test]
fn model_gradient_matches_differences() {
    let scene = generate_scene(&small_spec(), 1).unwrap();
    let pipe = Pipeline::prepare(&scene, &small_config(false)).unwrap();
    let model = pipe.init_model().unwrap();
    let g = pipe.evaluate(&model, true).unwrap().grad.unwrap().to_flat();
    let x = model.to_flat();
    let report = grad_check_par(|v| pipe.objective_at(&model, v).unwrap(), &x, &g, 1e-6, 1e-4).unwrap();
    // coordinates with tiny gradients are roundoff-limited; compare those absolutely
    let bad: Vec<usize> = report
        .failing
        .iter()
        .copied()
        .filter(|&i| (report.analytic[i] - report.numeric[i]).abs() > 1e-7)
        .collect();
    assert!(bad.is_empty(), "{} of {} coordinates off: {:?}", bad.len(), x.len(), &bad[..bad.len().min(5)]);
}

#[test]
fn detached_teacher_gets_no_gradient() {
    let scene = generate_scene(&small_spec(), 1).unwrap();
    let on = Pipeline::prepare(&scene, &small_config(true)).unwrap();
    let off = Pipeline::prepare(&scene, &small_config(false)).unwrap();
    let model = on.init_model().unwrap();
    let g_on = on.evaluate(&model, true).unwrap().grad.unwrap();
    let g_off = off.evaluate(&model, true).unwrap().grad.unwrap();
    // the fused teacher feeds no other loss term
    assert!(g_on.fuse.to_flat().iter().chain(&g_on.gate.to_flat()).all(|&v| v == 0.0));
    assert!(g_off.fuse.to_flat().iter().any(|&v| v != 0.0));
    assert_ne!(g_on.student.to_flat(), g_off.student.to_flat());
}

#[test]
fn descent_lowers_the_objective() {
    for seed in 0..3 {
        for detach in [true, false] {
            support::check_descent(seed, detach).unwrap();
        }
    }
}
