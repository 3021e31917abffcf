use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::backward;
use crate::train::Adam;
use crate::wpgm::PriorRecord;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

fn rand_map(r: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor {
    Tensor::from_fn(&[h, w, c], |_| r.gen_range(-0.5..0.5))
}

fn test_cfg() -> DraConfig {
    DraConfig {
        channels: 4,
        heads: 2,
        points: 2,
        paths: 3,
        layers: 2,
    }
}

fn make_record(store: &mut ParamStore, len: usize, value: f64) -> PriorRecord {
    let param = store.add("rec.bank", &[2, len], vec![value; 2 * len]);
    let tape = Tape::new();
    let prior = ops::select_row(&tape, &store.get(param), 0).unwrap();
    PriorRecord {
        layer: 0,
        latent: Tensor::filled(&[len], value),
        prior,
        index: 0,
        bank: store.get(param),
    }
}

#[test]
fn flow_estimator_zero_head_gives_zero_flow() {
    let mut store = ParamStore::new();
    let mut r = rng();
    let est = FlowEstimator::new(&mut store, "flow", 8, &mut r);
    let tape = Tape::new();
    let a = rand_map(&mut r, 4, 4, 3);
    let b = rand_map(&mut r, 4, 4, 3);
    let c = rand_map(&mut r, 4, 4, 3);
    let flows = est.estimate(&store, &tape, &a, &b, &c).unwrap();
    assert_eq!(flows.from_prev.shape(), &[4, 4, 2]);
    assert_eq!(flows.from_next.shape(), &[4, 4, 2]);
    assert!(flows.from_prev.data().iter().all(|&v| v == 0.0));
    assert!(flows.from_next.data().iter().all(|&v| v == 0.0));
}

#[test]
fn flow_training_converges_to_small_flow_on_static_clip() {
    let mut store = ParamStore::new();
    let mut r = rng();
    let est = FlowEstimator::new(&mut store, "flow", 8, &mut r);
    // knock the head off zero to simulate a mid-training state
    let n = 3 * 3 * 8 * 2;
    store.set_data(
        est.head.w,
        (0..n).map(|_| (r.gen_range(-0.3..0.3) as f32) as f64).collect(),
    );
    let frame = rand_map(&mut r, 6, 6, 3);
    let mut opt = Adam::new(&store);
    let mut mean_abs = f64::INFINITY;
    for _ in 0..150 {
        let tape = Tape::new();
        let flows = est.estimate(&store, &tape, &frame, &frame, &frame).unwrap();
        let loss = warp_loss(&tape, &frame, &frame, &frame, &flows).unwrap();
        backward(&tape, &loss).unwrap();
        opt.step(&store, 3e-3);
        mean_abs = flows
            .from_prev
            .data()
            .iter()
            .chain(flows.from_next.data())
            .map(|v| v.abs())
            .sum::<f64>()
            / (flows.from_prev.numel() + flows.from_next.numel()) as f64;
    }
    assert!(mean_abs < 0.5, "mean |flow| stayed at {mean_abs}");
}

#[test]
fn warp_loss_zero_for_identical_frames_and_zero_flow() {
    let mut r = rng();
    let frame = rand_map(&mut r, 5, 5, 3);
    let tape = Tape::new();
    let flows = FlowField {
        from_prev: Tensor::zeros(&[5, 5, 2]),
        from_next: Tensor::zeros(&[5, 5, 2]),
    };
    let loss = warp_loss(&tape, &frame, &frame, &frame, &flows).unwrap();
    assert_eq!(loss.item(), 0.0);
}

#[test]
fn warp_loss_shift_construction_matches_on_interior() {
    let mut r = rng();
    let prev = rand_map(&mut r, 4, 6, 1);
    // mid = prev shifted left by one column (content moves by (0,1))
    let mid = Tensor::from_fn(&[4, 6, 1], |i| {
        let (row, col) = (i / 6, i % 6);
        if col < 5 {
            prev.data()[row * 6 + col + 1]
        } else {
            0.0
        }
    });
    let flow = Tensor::from_fn(&[4, 6, 2], |i| if i % 2 == 1 { 1.0 } else { 0.0 });
    let tape = Tape::new();
    let warped = ops::warp(&tape, &prev, &flow).unwrap();
    for row in 0..4 {
        for col in 0..5 {
            let idx = row * 6 + col;
            assert!((warped.data()[idx] - mid.data()[idx]).abs() < 1e-12);
        }
    }
}

#[test]
fn warp_loss_zero_flow_is_twice_the_mse() {
    let mut r = rng();
    let a = rand_map(&mut r, 4, 4, 3);
    let b = rand_map(&mut r, 4, 4, 3);
    let tape = Tape::new();
    let flows = FlowField {
        from_prev: Tensor::zeros(&[4, 4, 2]),
        from_next: Tensor::zeros(&[4, 4, 2]),
    };
    let loss = warp_loss(&tape, &a, &b, &a, &flows).unwrap();
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    assert!((loss.item() - 2.0 * mse).abs() < 1e-12);
}

#[test]
fn aggregate_prior_tiles_and_averages() {
    let mut store = ParamStore::new();
    let r1 = make_record(&mut store, 2, 1.0);
    let r2 = make_record(&mut store, 4, 2.0);
    let tape = Tape::new();
    let agg = aggregate_prior(&tape, &[r1, r2], 4).unwrap();
    assert_eq!(agg.data(), &[1.5, 1.5, 1.5, 1.5]);
}

#[test]
fn aggregate_prior_single_record_at_target_is_unchanged() {
    let mut store = ParamStore::new();
    let rec = make_record(&mut store, 4, 0.3);
    let tape = Tape::new();
    let agg = aggregate_prior(&tape, &[rec], 4).unwrap();
    assert!(agg.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
}

#[test]
fn aggregate_prior_rejects_indivisible_lengths() {
    let mut store = ParamStore::new();
    let rec = make_record(&mut store, 3, 0.1);
    let tape = Tape::new();
    assert!(aggregate_prior(&tape, &[rec], 4).is_err());
}

#[test]
fn path_controller_zero_weights_give_uniform_routing() {
    let mut store = ParamStore::new();
    let mut r = rng();
    let ctrl = PathController::new(&mut store, "ctrl", 4, 3, &mut r);
    store.set_data(ctrl.proj.w, vec![0.0; 12]);
    let tape = Tape::new();
    let fused = rand_map(&mut r, 3, 3, 4);
    let alpha = ctrl
        .forward(&store, &tape, &fused, &Tensor::zeros(&[4]))
        .unwrap();
    for &a in alpha.data() {
        assert!((a - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn path_controller_closed_form_logits() {
    let mut store = ParamStore::new();
    let mut r = rng();
    let ctrl = PathController::new(&mut store, "ctrl", 2, 2, &mut r);
    // identity projection: pooled features become the logits directly
    store.set_data(ctrl.proj.w, vec![1.0, 0.0, 0.0, 1.0]);
    let tape = Tape::new();
    let fused = Tensor::from_fn(&[1, 1, 2], |i| if i == 0 { 1f64.ln() } else { 3f64.ln() });
    let alpha = ctrl
        .forward(&store, &tape, &fused, &Tensor::zeros(&[2]))
        .unwrap();
    assert!((alpha.data()[0] - 0.25).abs() < 1e-12);
    assert!((alpha.data()[1] - 0.75).abs() < 1e-12);
}

#[test]
fn path_controller_is_shift_invariant() {
    let mut store = ParamStore::new();
    let mut r = rng();
    let ctrl = PathController::new(&mut store, "ctrl", 3, 4, &mut r);
    let tape = Tape::new();
    let fused = rand_map(&mut r, 2, 2, 3);
    let a1 = ctrl
        .forward(&store, &tape, &fused, &Tensor::zeros(&[3]))
        .unwrap();
    // adding a constant to every logit via the bias leaves alpha unchanged
    store.set_data(ctrl.proj.b, vec![2.5; 4]);
    let a2 = ctrl
        .forward(&store, &tape, &fused, &Tensor::zeros(&[3]))
        .unwrap();
    for (x, y) in a1.data().iter().zip(a2.data()) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn routing_weights_stay_on_the_simplex() {
    let mut store = ParamStore::new();
    let mut r = rng();
    let ctrl = PathController::new(&mut store, "ctrl", 4, 5, &mut r);
    let tape = Tape::new();
    for _ in 0..10 {
        let fused = rand_map(&mut r, 3, 3, 4);
        let prior = Tensor::from_fn(&[4], |_| r.gen_range(-1.0..1.0));
        let alpha = ctrl.forward(&store, &tape, &fused, &prior).unwrap();
        let s: f64 = alpha.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(alpha.data().iter().all(|&a| a >= 0.0));
    }
}

#[test]
fn harden_zero_noise_low_temperature_is_argmax() {
    let tape = Tape::new();
    let alpha = Tensor::new(&[3], vec![0.2, 0.5, 0.3]);
    let hard = harden_with_noise(&tape, &alpha, 1e-4, &[0.0, 0.0, 0.0]).unwrap();
    assert_eq!(hard.data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn harden_output_is_always_one_hot() {
    let mut r = rng();
    let tape = Tape::new();
    for _ in 0..50 {
        let raw: Vec<f64> = (0..4).map(|_| r.gen_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let alpha = Tensor::new(&[4], raw.iter().map(|v| v / s).collect());
        let hard = harden(&tape, &alpha, 1.0, &mut r).unwrap();
        let ones = hard.data().iter().filter(|&&v| v == 1.0).count();
        let zeros = hard.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!((ones, zeros), (1, 3));
    }
}

#[test]
fn harden_selection_frequency_matches_soft_weights() {
    let mut r = rng();
    let alpha = Tensor::new(&[3], vec![0.5, 0.3, 0.2]);
    let mut counts = [0usize; 3];
    let trials = 10_000;
    for _ in 0..trials {
        let tape = Tape::inference();
        let hard = harden(&tape, &alpha, 1.0, &mut r).unwrap();
        let idx = hard.data().iter().position(|&v| v == 1.0).unwrap();
        counts[idx] += 1;
    }
    for (i, &c) in counts.iter().enumerate() {
        let freq = c as f64 / trials as f64;
        assert!(
            (freq - alpha.data()[i]).abs() < 0.03,
            "path {i}: frequency {freq} vs weight {}",
            alpha.data()[i]
        );
    }
}

#[test]
fn modify_set_overhead_count_is_exact() {
    let mut store = ParamStore::new();
    let before = store.total_values();
    let mods = ModifySet::new(&mut store, "m", 3, 3, 8, 16);
    let added = store.total_values() - before;
    assert_eq!(added, mods.value_count());
    assert_eq!(added, 3 * (2 * 3 + 8 + 16));
}

#[test]
fn dma_project_shapes_and_normalization() {
    let mut store = ParamStore::new();
    let mut r = rng();
    let cfg = test_cfg();
    let layer = DraLayer::new(&mut store, "dra", cfg, &mut r).unwrap();
    let tape = Tape::new();
    let (h, w, c) = (3, 3, cfg.channels);
    let fused = rand_map(&mut r, h, w, c);
    let fp = rand_map(&mut r, h, w, c);
    let fnx = rand_map(&mut r, h, w, c);
    let alpha = Tensor::new(&[3], vec![0.2, 0.3, 0.5]);
    let (attn, offsets, values) = layer
        .dma_project(&store, &tape, &fused, &fp, &fnx, &fp, &fnx, &alpha)
        .unwrap();
    let slots = cfg.slots();
    assert_eq!(attn.shape(), &[h, w, slots]);
    assert_eq!(offsets.shape(), &[h, w, 2 * slots]);
    assert_eq!(values.shape(), &[h, w, c * WINDOW]);

    // zero-initialized offset head
    assert!(offsets.data().iter().all(|&v| v == 0.0));

    // per-head, per-position softmax over T*K slots
    let per_head = WINDOW * cfg.points;
    for px in 0..h * w {
        for head in 0..cfg.heads {
            let base = px * slots + head * per_head;
            let s: f64 = attn.data()[base..base + per_head].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn dra_layer_zero_value_convs_leave_stream_unchanged() {
    let mut store = ParamStore::new();
    let mut r = rng();
    let layer = DraLayer::new(&mut store, "dra", test_cfg(), &mut r).unwrap();
    store.set_data(
        layer.value_proj.w,
        vec![0.0; store.get(layer.value_proj.w).numel()],
    );
    let tape = Tape::new();
    let fused = rand_map(&mut r, 3, 3, 4);
    let fp = rand_map(&mut r, 3, 3, 4);
    let fnx = rand_map(&mut r, 3, 3, 4);
    let (next, alpha) = layer
        .forward(&store, &tape, &fused, &fp, &fnx, &fp, &fnx, &Tensor::zeros(&[4]), None)
        .unwrap();
    assert_eq!(next.data(), fused.data());
    assert_eq!(alpha.numel(), 3);
}

#[test]
fn dra_layer_matches_hand_composed_pipeline() {
    let mut store = ParamStore::new();
    let mut r = rng();
    let cfg = test_cfg();
    let layer = DraLayer::new(&mut store, "dra", cfg, &mut r).unwrap();
    // give the offset head real values so sampling actually deforms
    let n_off = store.get(layer.offset_proj.w).numel();
    store.set_data(
        layer.offset_proj.w,
        (0..n_off).map(|_| (r.gen_range(-0.1..0.1) as f32) as f64).collect(),
    );
    let fused = rand_map(&mut r, 4, 4, 4);
    let fp = rand_map(&mut r, 4, 4, 4);
    let fnx = rand_map(&mut r, 4, 4, 4);
    let fpw = rand_map(&mut r, 4, 4, 4);
    let fnw = rand_map(&mut r, 4, 4, 4);
    let prior = Tensor::from_fn(&[4], |_| r.gen_range(-0.5..0.5));

    let tape = Tape::new();
    let (next, alpha) = layer
        .forward(&store, &tape, &fused, &fp, &fnx, &fpw, &fnw, &prior, None)
        .unwrap();

    // hand composition with the same primitives
    let tape2 = Tape::new();
    let alpha2 = layer.controller.forward(&store, &tape2, &fused, &prior).unwrap();
    assert_eq!(alpha.data(), alpha2.data());
    let warped_cat = ops::concat_channels(&tape2, &[&fpw, &fused, &fnw]).unwrap();
    let attn_raw = layer
        .attn_proj
        .forward(&store, &tape2, &warped_cat, &alpha2)
        .unwrap();
    let attn = ops::softmax_rows(&tape2, &attn_raw, WINDOW * cfg.points).unwrap();
    let offsets = layer
        .offset_proj
        .forward(&store, &tape2, &warped_cat, &alpha2)
        .unwrap();
    let value_cat = ops::concat_channels(&tape2, &[&fused, &fp, &fnx]).unwrap();
    let values = layer
        .value_proj
        .forward(&store, &tape2, &value_cat, &alpha2)
        .unwrap();
    let gathered = ops::deformable_gather(
        &tape2,
        &values,
        &attn,
        &offsets,
        cfg.heads,
        WINDOW,
        cfg.points,
    )
    .unwrap();
    let projected = layer
        .out_proj
        .forward(&store, &tape2, &gathered, &alpha2)
        .unwrap();
    let expect = ops::add(&tape2, &fused, &projected).unwrap();
    for (a, b) in next.data().iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn identity_modifiers_make_routing_bit_invariant() {
    // all-ones modify sets: any two exactly-summing-to-one routings agree bitwise
    let mut store = ParamStore::new();
    let mut r = rng();
    let layer = DraLayer::new(&mut store, "dra", test_cfg(), &mut r).unwrap();
    let fused = rand_map(&mut r, 3, 3, 4);
    let fp = rand_map(&mut r, 3, 3, 4);
    let fnx = rand_map(&mut r, 3, 3, 4);

    let run = |alpha: Vec<f64>| {
        let tape = Tape::inference();
        let a = Tensor::new(&[3], alpha);
        layer
            .forward_routed(&store, &tape, &fused, &fp, &fnx, &fp, &fnx, &a)
            .unwrap()
    };
    let base = run(vec![1.0, 0.0, 0.0]);
    for alpha in [
        vec![0.0, 0.0, 1.0],
        vec![0.5, 0.25, 0.25],
        vec![0.3, 0.3, 0.4],
    ] {
        assert_eq!(run(alpha).data(), base.data());
    }
}

#[test]
fn parameter_and_kernel_mixing_forms_agree() {
    // routed kernel == sum_i alpha_i * (outer(B_i) .* W), to 1e-10 relative
    let mut store = ParamStore::new();
    let mut r = rng();
    let rc = RoutedConv::new(&mut store, "rc", 3, 4, 5, 3, &mut r);
    // random (non-identity) modify vectors
    for id in [rc.mods.u, rc.mods.v, rc.mods.cin, rc.mods.cout] {
        let n = store.get(id).numel();
        store.set_data(id, (0..n).map(|_| r.gen_range(0.5..1.5)).collect());
    }
    let alpha = Tensor::new(&[3], vec![0.2, 0.5, 0.3]);
    let tape = Tape::inference();
    let routed = rc.routed_kernel(&store, &tape, &alpha).unwrap();

    let mut mixed = vec![0.0; routed.numel()];
    for path in 0..3 {
        let branch = rc.branch_kernel(&store, path);
        for (m, &b) in mixed.iter_mut().zip(branch.data()) {
            *m += alpha.data()[path] * b;
        }
    }
    for (a, b) in routed.data().iter().zip(&mixed) {
        let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
        assert!(rel < 1e-10);
    }
}

#[test]
fn one_hot_routing_equals_materialized_branch() {
    let mut store = ParamStore::new();
    let mut r = rng();
    let rc = RoutedConv::new(&mut store, "rc", 3, 3, 4, 3, &mut r);
    for id in [rc.mods.u, rc.mods.v, rc.mods.cin, rc.mods.cout] {
        let n = store.get(id).numel();
        store.set_data(id, (0..n).map(|_| r.gen_range(0.5..1.5)).collect());
    }
    let x = rand_map(&mut r, 4, 4, 3);
    let tape = Tape::inference();
    for path in 0..3 {
        let mut alpha = vec![0.0; 3];
        alpha[path] = 1.0;
        let routed = rc
            .forward(&store, &tape, &x, &Tensor::new(&[3], alpha))
            .unwrap();
        let branch = rc.branch_kernel(&store, path);
        let direct = ops::conv2d(&tape, &x, &branch, 1, 1).unwrap();
        let direct = ops::bias_add(&tape, &direct, &store.get(rc.b)).unwrap();
        for (a, b) in routed.data().iter().zip(direct.data()) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
            assert!(rel < 1e-10);
        }
    }
}

#[test]
fn dra_gradients_flow_through_every_piece() {
    let mut store = ParamStore::new();
    let mut r = rng();
    let layer = DraLayer::new(&mut store, "dra", test_cfg(), &mut r).unwrap();
    // non-zero offsets so offset gradients are live
    let n_off = store.get(layer.offset_proj.w).numel();
    store.set_data(
        layer.offset_proj.w,
        (0..n_off).map(|_| (r.gen_range(-0.2..0.2) as f32) as f64).collect(),
    );
    // identity modifiers make routing locally inert (dalpha is constant and
    // softmax kills constant cotangents), so perturb them off ones first
    for rc in [&layer.attn_proj, &layer.offset_proj, &layer.value_proj, &layer.out_proj] {
        for id in [rc.mods.u, rc.mods.v, rc.mods.cin, rc.mods.cout] {
            let n = store.get(id).numel();
            store.set_data(id, (0..n).map(|_| r.gen_range(0.8..1.2)).collect());
        }
    }
    let tape = Tape::new();
    let fused = rand_map(&mut r, 3, 3, 4);
    let fp = rand_map(&mut r, 3, 3, 4);
    let fnx = rand_map(&mut r, 3, 3, 4);
    let prior = Tensor::from_fn(&[4], |_| r.gen_range(-0.5..0.5));
    let (next, _) = layer
        .forward(&store, &tape, &fused, &fp, &fnx, &fp, &fnx, &prior, None)
        .unwrap();
    let loss = ops::mean(&tape, &ops::mul(&tape, &next, &next).unwrap()).unwrap();
    backward(&tape, &loss).unwrap();
    for id in [
        layer.controller.proj.w,
        layer.attn_proj.w,
        layer.offset_proj.w,
        layer.value_proj.w,
        layer.out_proj.w,
        layer.value_proj.mods.u,
    ] {
        let g = store.get(id).grad().unwrap();
        assert!(
            g.iter().any(|&v| v != 0.0),
            "no gradient reached {}",
            store.name(id)
        );
    }
}
