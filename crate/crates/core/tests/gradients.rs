use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segxfer::engine::gradcheck::{check_graph, op_suite, GradCheckOptions};
use segxfer::engine::{Graph, Mode, Tensor};
use segxfer::metrics::{weighted_ce_cls, weighted_ce_seg, LabelWeights};
use segxfer::nets::{build_cls_head, build_mnet, build_scratch, ClsHeadSpec, MNetSpec, ScratchSpec};

#[test]
fn every_op_twenty_instances() {
    for r in op_suite(20, 11).unwrap() {
        assert!(r.instances >= 20);
        assert!(r.max_rel_error < 1e-4, "{}: {:e}", r.op, r.max_rel_error);
    }
}

fn random_input(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Moves every parameter off its initialization so no ReLU input sits exactly
/// on the kink (zero biases over zero-padded regions produce exact zeros).
fn jitter(g: &mut Graph<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in g.params_mut() {
        let var = p.name.ends_with("running_var");
        for v in p.tensor.data_mut() {
            *v += rng.random_range(-0.1..0.1) * if var { 0.5 } else { 1.0 };
        }
    }
}

fn opts(mode: Mode) -> GradCheckOptions {
    GradCheckOptions {
        mode,
        seed: 3,
        max_elements: 12,
        check_input: true,
    }
}

#[test]
fn mnet_composite_2d() {
    let mut g = build_mnet::<f64>(&MNetSpec::new(2, &[16, 16], 1, 3), 1).unwrap();
    jitter(&mut g, 1);
    let r = check_graph(&mut g, &random_input(vec![2, 1, 16, 16], 2), opts(Mode::Train)).unwrap();
    assert!(r.max_rel_error < 1e-4, "{} {:e}", r.worst, r.max_rel_error);
    let r = check_graph(&mut g, &random_input(vec![1, 1, 16, 16], 4), opts(Mode::Eval)).unwrap();
    assert!(r.max_rel_error < 1e-4, "{} {:e}", r.worst, r.max_rel_error);
}

#[test]
fn mnet_composite_3d() {
    let mut g = build_mnet::<f64>(&MNetSpec::new(3, &[16, 16, 16], 1, 2), 5).unwrap();
    jitter(&mut g, 5);
    let r = check_graph(&mut g, &random_input(vec![2, 1, 16, 16, 16], 6), opts(Mode::Train)).unwrap();
    assert!(r.max_rel_error < 1e-4, "{} {:e}", r.worst, r.max_rel_error);
}

#[test]
fn classifier_composites() {
    let head = ClsHeadSpec {
        dim: 2,
        input_channels: 3,
        spatial: vec![16, 16],
        n_c: 2,
        n_fc: 4,
        r: 2,
        n_classes: 3,
    };
    let mut g = build_cls_head::<f64>(&head, 7).unwrap();
    jitter(&mut g, 7);
    let r = check_graph(&mut g, &random_input(vec![3, 3, 16, 16], 8), opts(Mode::Train)).unwrap();
    assert!(r.max_rel_error < 1e-4, "{} {:e}", r.worst, r.max_rel_error);

    let scratch = ScratchSpec {
        dim: 2,
        in_channels: 1,
        spatial: vec![32, 32],
        n_c: 1,
        n_fc: 4,
        n_classes: 3,
        batchnorm: true,
    };
    let mut g = build_scratch::<f64>(&scratch, 9).unwrap();
    jitter(&mut g, 9);
    let r = check_graph(&mut g, &random_input(vec![2, 1, 32, 32], 10), opts(Mode::Train)).unwrap();
    assert!(r.max_rel_error < 1e-4, "{} {:e}", r.worst, r.max_rel_error);
}

/// Probabilities as a softmax of random logits.
fn random_probs(b: usize, c: usize, s: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut data = vec![0.0; b * c * s];
    for bi in 0..b {
        for x in 0..s {
            let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for ch in 0..c {
                data[(bi * c + ch) * s + x] = logits[ch].exp() / z;
            }
        }
    }
    let shape = if s == 1 { vec![b, c] } else { vec![b, c, s] };
    Tensor::new(shape, data).unwrap()
}

fn check_loss_grad(probs: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> (f64, Tensor<f64>)) {
    let (_, grad) = f(probs);
    for i in 0..probs.data().len() {
        let h = 1e-6;
        let mut up = probs.clone();
        up.data_mut()[i] += h;
        let mut down = probs.clone();
        down.data_mut()[i] -= h;
        let numeric = (f(&up).0 - f(&down).0) / (2.0 * h);
        let analytic = grad.data()[i];
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
        assert!(rel < 1e-4, "element {i}: analytic {analytic} numeric {numeric}");
    }
}

#[test]
fn weighted_losses_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let (b, c, s) = (rng.random_range(1..=3), rng.random_range(2..=4), rng.random_range(2..=6));
        let w = LabelWeights {
            weights: (0..c).map(|_| rng.random_range(0.1..3.0)).collect(),
            frequencies: vec![1; c],
        };
        let probs = random_probs(b, c, s, &mut rng);
        let labels: Vec<u8> = (0..b * s).map(|_| rng.random_range(0..c as u8)).collect();
        check_loss_grad(&probs, |p| {
            let l = weighted_ce_seg(p, &labels, &w).unwrap();
            (l.value, l.grad)
        });
        let probs = random_probs(b, c, 1, &mut rng);
        let classes: Vec<u8> = (0..b).map(|_| rng.random_range(0..c as u8)).collect();
        check_loss_grad(&probs, |p| {
            let l = weighted_ce_cls(p, &classes, &w).unwrap();
            (l.value, l.grad)
        });
    }
}
