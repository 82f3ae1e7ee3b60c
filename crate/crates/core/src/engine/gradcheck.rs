//! Central finite-difference gradient checking for 64-bit graphs.
//!
//! The scalar objective is a fixed random projection `sum(c * y)` of the graph
//! output, so every output element contributes. The checker only ever calls
//! `forward`; the analytic side comes from a single `backward`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{Graph, GraphBuilder, Loss, Mode, NodeId, ParamRole, Tensor};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)` over
    /// the checked tensors, each measured in the 2-norm; `floor` is the
    /// finite-difference roundoff scale of the objective (at least 1e-6).
    pub max_rel_error: f64,
    /// Name of the tensor with the largest error.
    pub worst: String,
    /// Number of scalar partial derivatives compared.
    pub checked: usize,
    /// Elements whose finite-difference stencil crossed a ReLU or max-pool
    /// branch; those are replaced by other elements of the same tensor.
    pub skipped: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub mode: Mode,
    /// Seed for the dropout masks, replayed on every evaluation.
    pub seed: u64,
    /// Upper bound on elements probed per tensor (randomly chosen beyond it).
    pub max_elements: usize,
    pub check_input: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            mode: Mode::Train,
            seed: 0,
            max_elements: usize::MAX,
            check_input: true,
        }
    }
}

/// Objective value and the branch signature of the pass that produced it.
fn objective(graph: &mut Graph<f64>, input: &Tensor<f64>, coeffs: &[f64], opts: &GradCheckOptions) -> Result<(f64, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let y = graph.forward(input, opts.mode, &mut rng)?;
    let sig = graph.branch_signature().unwrap_or(0);
    Ok((y.data().iter().zip(coeffs).map(|(a, b)| a * b).sum(), sig))
}

fn step(theta: f64) -> f64 {
    1e-5 * theta.abs().max(1.0)
}

/// Candidate element order: all elements in order when there are at most
/// `max`, otherwise a seeded permutation to draw from.
fn candidate_order(len: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if len > max {
        idx.shuffle(rng);
    }
    idx
}

enum Target {
    Param(usize),
    Input,
}

/// Central difference at one element, or `None` when either side of the
/// stencil crossed a ReLU or max-pool branch of the reference pass.
fn central_difference(
    graph: &mut Graph<f64>,
    x: &mut Tensor<f64>,
    target: &Target,
    i: usize,
    coeffs: &[f64],
    opts: &GradCheckOptions,
    reference: u64,
) -> Result<Option<f64>> {
    fn slot<'a>(graph: &'a mut Graph<f64>, x: &'a mut Tensor<f64>, target: &Target, i: usize) -> &'a mut f64 {
        match target {
            Target::Param(pi) => &mut graph.params_mut()[*pi].tensor.data_mut()[i],
            Target::Input => &mut x.data_mut()[i],
        }
    }
    let theta = *slot(graph, x, target, i);
    let h = step(theta);
    *slot(graph, x, target, i) = theta + h;
    let (up, sig_up) = objective(graph, x, coeffs, opts)?;
    *slot(graph, x, target, i) = theta - h;
    let (down, sig_down) = objective(graph, x, coeffs, opts)?;
    *slot(graph, x, target, i) = theta;
    if sig_up != reference || sig_down != reference {
        return Ok(None);
    }
    Ok(Some((up - down) / (2.0 * h)))
}

fn rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(floor)
}

/// Denominator floor for one tensor. Gradients that vanish identically (e.g.
/// a bias feeding train-mode batch normalization) leave only roundoff in the
/// numeric side, about `eps * sum|c * y| / h` per element; a difference at
/// that level scores 1e-4.
fn noise_floor(terms: f64, elements: usize) -> f64 {
    let roundoff = f64::EPSILON * terms / step(0.0);
    (1e4 * roundoff * (elements as f64).sqrt()).max(1e-6)
}

/// Compare the analytic gradients of `graph` (all trainable parameters, plus
/// the input when requested) against central finite differences.
pub fn check_graph(graph: &mut Graph<f64>, input: &Tensor<f64>, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut fwd_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let probe = graph.forward(input, opts.mode, &mut fwd_rng)?;
    let coeffs: Vec<f64> = (0..probe.len()).map(|_| rng.random_range(-1.0..1.0)).collect();

    graph.zero_grads();
    graph.set_input_grad(opts.check_input);
    let mut fwd_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let y = graph.forward(input, opts.mode, &mut fwd_rng)?;
    let loss = Loss {
        value: y.data().iter().zip(&coeffs).map(|(a, b)| a * b).sum(),
        grad: Tensor::new(y.shape().to_vec(), coeffs.clone())?,
    };
    let input_grad = graph.backward(&loss)?;
    let terms: f64 = y.data().iter().zip(&coeffs).map(|(a, b)| (a * b).abs()).sum();
    let reference = graph.branch_signature().unwrap_or(0);
    graph.set_input_grad(false);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        skipped: 0,
    };
    let mut x = input.clone_values();
    let mut targets: Vec<(String, Target, Vec<f64>)> = Vec::new();
    for (pi, param) in graph.params().iter().enumerate() {
        if param.role.trainable() {
            let grad = param.tensor.grad.clone().unwrap_or_else(|| vec![0.0; param.tensor.len()]);
            targets.push((param.name.clone(), Target::Param(pi), grad));
        }
    }
    if let Some(dx) = input_grad {
        targets.push(("input".to_string(), Target::Input, dx.data().to_vec()));
    }

    for (name, target, grad) in targets {
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for i in candidate_order(grad.len(), opts.max_elements, &mut rng) {
            if analytic.len() == opts.max_elements {
                break;
            }
            match central_difference(graph, &mut x, &target, i, &coeffs, &opts, reference)? {
                Some(n) => {
                    analytic.push(grad[i]);
                    numeric.push(n);
                }
                None => report.skipped += 1,
            }
        }
        let e = rel_error(&analytic, &numeric, noise_floor(terms, analytic.len()));
        report.checked += analytic.len();
        if e >= report.max_rel_error {
            report.max_rel_error = e;
            report.worst = name;
        }
    }
    graph.zero_grads();
    Ok(report)
}


/// Outcome of checking one op kind over several random instances.
#[derive(Clone, Debug)]
pub struct OpSuiteResult {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

type Build = fn(&mut GraphBuilder<f64>, NodeId, &mut ChaCha8Rng) -> Result<NodeId>;

struct OpCase {
    op: &'static str,
    spatial_rank: usize,
    mode: Mode,
    build: Build,
    min_batch: usize,
}

fn op_cases() -> Vec<OpCase> {
    fn conv(b: &mut GraphBuilder<f64>, x: NodeId, r: &mut ChaCha8Rng) -> Result<NodeId> {
        b.conv(x, r.random_range(1..=3), "conv")
    }
    fn conv1(b: &mut GraphBuilder<f64>, x: NodeId, r: &mut ChaCha8Rng) -> Result<NodeId> {
        b.pointwise_conv(x, r.random_range(1..=3), "conv1")
    }
    fn pool(b: &mut GraphBuilder<f64>, x: NodeId, _: &mut ChaCha8Rng) -> Result<NodeId> {
        b.maxpool(x, "pool")
    }
    fn up(b: &mut GraphBuilder<f64>, x: NodeId, _: &mut ChaCha8Rng) -> Result<NodeId> {
        b.upsample(x, "up")
    }
    fn bn(b: &mut GraphBuilder<f64>, x: NodeId, _: &mut ChaCha8Rng) -> Result<NodeId> {
        b.batchnorm(x, "bn")
    }
    fn relu(b: &mut GraphBuilder<f64>, x: NodeId, _: &mut ChaCha8Rng) -> Result<NodeId> {
        b.relu(x, "relu")
    }
    fn drop(b: &mut GraphBuilder<f64>, x: NodeId, _: &mut ChaCha8Rng) -> Result<NodeId> {
        b.dropout(x, 0.5, "drop")
    }
    fn cat(b: &mut GraphBuilder<f64>, x: NodeId, r: &mut ChaCha8Rng) -> Result<NodeId> {
        // Second operand depends on x through a conv so both branches carry gradient.
        let y = b.conv(x, r.random_range(1..=2), "branch")?;
        b.concat(&[x, y, x], "cat")
    }
    fn add(b: &mut GraphBuilder<f64>, x: NodeId, _: &mut ChaCha8Rng) -> Result<NodeId> {
        let c = b.node(x).channels;
        let y = b.conv(x, c, "branch")?;
        b.add(x, y, "add")
    }
    fn dense(b: &mut GraphBuilder<f64>, x: NodeId, r: &mut ChaCha8Rng) -> Result<NodeId> {
        let f = b.flatten(x, "flat")?;
        b.dense(f, r.random_range(1..=4), "fc")
    }
    fn dense_bn(b: &mut GraphBuilder<f64>, x: NodeId, r: &mut ChaCha8Rng) -> Result<NodeId> {
        let f = b.flatten(x, "flat")?;
        let d = b.dense(f, r.random_range(2..=4), "fc")?;
        b.batchnorm(d, "bn")
    }
    fn soft(b: &mut GraphBuilder<f64>, x: NodeId, r: &mut ChaCha8Rng) -> Result<NodeId> {
        let c = b.pointwise_conv(x, r.random_range(2..=4), "logits")?;
        b.softmax(c, "softmax")
    }
    let case = |op, spatial_rank, mode, build: Build| OpCase {
        op,
        spatial_rank,
        mode,
        build,
        min_batch: 1,
    };
    vec![
        case("conv_nd/2d", 2, Mode::Train, conv),
        case("conv_nd/3d", 3, Mode::Train, conv),
        case("conv_1x", 2, Mode::Train, conv1),
        case("maxpool_nd/2d", 2, Mode::Train, pool),
        case("maxpool_nd/3d", 3, Mode::Train, pool),
        case("upsample_nd/2d", 2, Mode::Train, up),
        case("upsample_nd/3d", 3, Mode::Train, up),
        case("batchnorm/train", 2, Mode::Train, bn),
        case("batchnorm/eval", 2, Mode::Eval, bn),
        OpCase {
            min_batch: 2,
            ..case("batchnorm/dense", 2, Mode::Train, dense_bn)
        },
        case("relu", 2, Mode::Train, relu),
        case("dropout", 2, Mode::Train, drop),
        case("concat", 2, Mode::Train, cat),
        case("residual_add", 2, Mode::Train, add),
        case("dense", 2, Mode::Train, dense),
        case("softmax", 2, Mode::Train, soft),
    ]
}

/// Random instance geometry: even extents so pooling always applies.
fn random_instance(case: &OpCase, rng: &mut ChaCha8Rng) -> (usize, usize, Vec<usize>) {
    let batch = rng.random_range(case.min_batch..=3);
    let channels = rng.random_range(1..=3);
    let spatial = (0..case.spatial_rank)
        .map(|_| 2 * rng.random_range(1..=if case.spatial_rank == 3 { 2 } else { 3 }))
        .collect();
    (batch, channels, spatial)
}

/// Check every layer kind on `instances` random small graphs each.
pub fn op_suite(instances: usize, seed: u64) -> Result<Vec<OpSuiteResult>> {
    let mut out = Vec::new();
    for (ci, case) in op_cases().into_iter().enumerate() {
        let mut worst = 0.0f64;
        for k in 0..instances {
            let inst_seed = seed ^ ((ci as u64) << 32) ^ k as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(inst_seed);
            let (batch, channels, spatial) = random_instance(&case, &mut rng);
            let mut b = GraphBuilder::<f64>::new(inst_seed);
            let x = b.input(channels, &spatial)?;
            let y = (case.build)(&mut b, x, &mut rng)?;
            let mut graph = b.finish(y)?;
            // Non-trivial affine and running statistics for normalization layers.
            for p in graph.params_mut() {
                match p.role {
                    ParamRole::Scale | ParamRole::Shift | ParamRole::RunningMean | ParamRole::Bias => {
                        p.tensor.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0))
                    }
                    ParamRole::RunningVar => {
                        p.tensor.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0))
                    }
                    ParamRole::Weight => {}
                }
            }
            let mut shape = vec![batch, channels];
            shape.extend(&spatial);
            let n: usize = shape.iter().product();
            let values: Vec<f64> = (0..n)
                .map(|_| {
                    // Keep away from the ReLU kink and from pooling ties.
                    let v: f64 = rng.random_range(0.05..1.0);
                    if rng.random::<bool>() {
                        v
                    } else {
                        -v
                    }
                })
                .collect();
            let input = Tensor::new(shape, values)?;
            let report = check_graph(
                &mut graph,
                &input,
                GradCheckOptions {
                    mode: case.mode,
                    seed: inst_seed,
                    ..Default::default()
                },
            )?;
            worst = worst.max(report.max_rel_error);
        }
        out.push(OpSuiteResult {
            op: case.op,
            instances,
            max_rel_error: worst,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_a_quick_check() {
        for r in op_suite(3, 5).unwrap() {
            assert!(r.max_rel_error < 1e-4, "{} {}", r.op, r.max_rel_error);
        }
    }

    #[test]
    fn roundoff_floor_grows_with_the_objective() {
        assert_eq!(noise_floor(1.0, 1), 1e-6);
        let f = noise_floor(4000.0, 4);
        assert!((f - 1e4 * f64::EPSILON * 4000.0 / 1e-5 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn stencils_across_a_relu_kink_are_replaced() {
        let mut b = GraphBuilder::<f64>::new(1);
        let x = b.input(1, &[2, 2]).unwrap();
        let y = b.relu(x, "relu").unwrap();
        let mut g = b.finish(y).unwrap();
        let input = Tensor::new(vec![1, 1, 2, 2], vec![-1.0, 0.0, 2.0, 3.0]).unwrap();
        let r = check_graph(&mut g, &input, GradCheckOptions::default()).unwrap();
        assert_eq!((r.checked, r.skipped), (3, 1));
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn relative_error_is_scale_free() {
        assert_eq!(rel_error(&[1.0, 0.0], &[1.0, 0.0], 1e-6), 0.0);
        let e = rel_error(&[1000.0], &[1000.1], 1e-6);
        assert!((e - 1e-4).abs() < 1e-6);
        assert_eq!(rel_error(&[0.0], &[0.0], 1e-6), 0.0);
        assert!(rel_error(&[1e-17], &[1e-12], 1e-6) < 1e-5);
    }
}
