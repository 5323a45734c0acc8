mod common;

use common::{check_model_fn, op_cases, probe_loss, strict, uniform};
use salientsleep::gradcheck::{gradient_check, GradCheckOptions};
use salientsleep::model::{Model, ModelConfig, Specs, UUnit, Variant};
use salientsleep::{Mode, Shape};

#[test]
fn every_primitive_matches_central_differences() {
    for (name, run) in op_cases() {
        let r = run().unwrap();
        assert_eq!(r.coords_skipped, 0, "{name}: a probe crossed a kink");
        assert!(r.coords_checked > 0, "{name}");
        assert!(r.max_rel_error < 1e-6, "{name}: {r:?}");
    }
}

#[test]
fn loss_gradient_is_tight() {
    let (_, run) = op_cases().into_iter().find(|(n, _)| *n == "weighted_cross_entropy").unwrap();
    assert!(run().unwrap().max_rel_error < 1e-5);
}

#[test]
fn a_detached_path_is_caught() {
    // The second factor enters as a constant, so backward misses half the gradient.
    let x = uniform(Shape::new(1, 4, 2), 0.5, 1.0, 3);
    let r = gradient_check(&[x], strict(), |g, v| {
        let c = g.constant(v[0].value().clone());
        let y = g.mul(&v[0], &c)?;
        probe_loss(g, &y, 0)
    })
    .unwrap();
    assert!(r.max_rel_error > 0.1, "{r:?}");
}

#[test]
fn u_unit_on_a_short_two_channel_input() {
    let u = UUnit::new("u", 5, 2, 4, 3, 4);
    let mut specs = Specs::default();
    u.collect(&mut specs);
    let mut params = salientsleep::model::ModelParams::init(&specs, 11);
    let x = uniform(Shape::new(1, 64, 2), -1.0, 1.0, 12);
    // The bridge normalizes only 4 values, a strongly curved map, so the
    // step is smaller than the 1e-4 used elsewhere to keep truncation error
    // well under the bound.
    let opts = GradCheckOptions { eps: 1e-5, ..strict() };
    for mode in [Mode::Train, Mode::Eval] {
        let r = check_model_fn(&specs, &mut params, opts, mode, |cx| {
            let x = cx.graph.constant(x.clone());
            let y = u.forward(cx, &x)?;
            probe_loss(cx.graph, &y, 5)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{mode:?}: {r:?}");
        assert!(r.coords_checked * 2 > r.coords_checked + r.coords_skipped, "{mode:?}: {r:?}");
    }
}

#[test]
fn toy_stream() {
    let model = Model::new(ModelConfig::toy().with_variant(Variant::Full)).unwrap();
    let mut specs = Specs::default();
    model.eeg.collect(&mut specs);
    let mut params = salientsleep::model::ModelParams::init(&specs, 2);
    let x = uniform(Shape::new(2, 200, 1), -1.0, 1.0, 4);
    let opts = GradCheckOptions {
        max_coords_per_param: 3,
        ..strict()
    };
    let r = check_model_fn(&specs, &mut params, opts, Mode::Train, |cx| {
        let x = cx.graph.constant(x.clone());
        let y = model.eeg.forward(cx, &x)?;
        probe_loss(cx.graph, &y, 6)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
    assert!(r.coords_checked > 200, "{r:?}");
}
