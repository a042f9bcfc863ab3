//! Central finite-difference checks of the analytic gradients.
//!
//! Every loss evaluation runs on a fresh clone of the graph, so dropout draws the
//! same mask and batchnorm sees the same batch each time.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{BatchNorm, Conv2d, Dense, Pool2d};
use super::{cross_entropy, Activation, Layer, Merge, ModelGraph, Node, PadMode, PoolKind, Tensor};
use crate::error::{Error, Result};

/// Denominator floor of the relative error. Central differences in f64 with a 1e-5
/// step carry roundoff near 1e-11, so gradients that are exactly zero in theory (a bias
/// feeding batchnorm) are judged by an absolute error of about `1e-4 * GRAD_FLOOR`.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `parameter[index]` with the largest error.
    pub worst: String,
}

fn loss(graph: &ModelGraph<f64>, batch: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let mut g = graph.clone();
    let p = g.forward(batch, true)?;
    Ok(cross_entropy(&p, labels)?.0)
}

/// Compares back-propagated gradients of the cross-entropy loss with central
/// differences of step `step` on up to `samples` randomly chosen trainable scalars.
///
/// The error of one scalar is `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`.
pub fn gradient_check(
    graph: &ModelGraph<f64>,
    batch: &Tensor<f64>,
    labels: &[usize],
    samples: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheck> {
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut analytic = graph.clone();
    let probs = analytic.forward(batch, true)?;
    let (_, dl) = cross_entropy(&probs, labels)?;
    analytic.backward(&dl)?;

    // (param ordinal, element index) of every trainable scalar
    let mut slots = Vec::new();
    let mut names = Vec::new();
    let mut grads = Vec::new();
    let mut ordinal = 0;
    analytic.visit_params(|p| {
        if p.trainable {
            slots.extend((0..p.value.len()).map(|i| (ordinal, i)));
            names.push(p.name.clone());
            grads.push(p.grad.data().to_vec());
        }
        ordinal += usize::from(p.trainable);
    });
    if slots.is_empty() {
        return Err(Error::invalid("graph has no trainable parameters"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if slots.len() <= samples {
        (0..slots.len()).collect()
    } else {
        sample(&mut rng, slots.len(), samples).into_vec()
    };

    let mut report = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for pick in picks {
        let (pi, ei) = slots[pick];
        let shifted = |delta: f64| -> Result<f64> {
            let mut g = graph.clone();
            let mut k = 0;
            g.visit_params_mut(|p| {
                if p.trainable {
                    if k == pi {
                        p.value.data_mut()[ei] += delta;
                    }
                    k += 1;
                }
            });
            loss(&g, batch, labels)
        };
        let numeric = (shifted(step)? - shifted(-step)?) / (2.0 * step);
        let a = grads[pi][ei];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = err;
            report.worst = format!("{}[{ei}]", names[pi]);
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Random batch of shape `(n, maps, height, width)` and labels for `graph`.
pub fn random_batch(graph: &ModelGraph<f64>, n: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [m, h, w] = graph.input_shape;
    let data = (0..n * m * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|i| i % graph.n_classes).collect();
    (Tensor::from_vec(&[n, m, h, w], data).expect("batch shape"), labels)
}

fn node(name: &str, layer: Layer<f64>) -> Node<f64> {
    Node {
        name: name.into(),
        layer,
    }
}

/// Small graphs isolating each layer kind, each closed by flatten → dense → softmax.
///
/// Inputs are `(1, 3, 12)`; three classes.
pub fn layer_probes(seed: u64) -> Vec<(&'static str, ModelGraph<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (3, 12);
    let mut probes = Vec::new();
    let mut add = |kind: &'static str, body: Vec<Node<f64>>, features: usize, rng: &mut ChaCha8Rng| {
        let mut nodes = body;
        nodes.push(node("flatten", Layer::Flatten(None)));
        nodes.push(node("dense", Layer::Dense(Dense::new("dense", features, 3, rng))));
        nodes.push(node("softmax", Layer::Act(Activation::Softmax, None)));
        probes.push((kind, ModelGraph::new(kind, [1, h, w], 3, nodes, seed)));
    };
    let conv = |name: &str, cin, cout, groups, k, pad, bias, rng: &mut ChaCha8Rng| {
        node(name, Layer::Conv(Conv2d::new(name, cin, cout, groups, k, pad, bias, rng)))
    };
    let widen = |rng: &mut ChaCha8Rng| conv("widen", 1, 4, 1, (1, 3), PadMode::Same, true, rng);

    add("dense", vec![], h * w, &mut rng);
    let c = conv("conv", 1, 2, 1, (2, 4), PadMode::Valid, true, &mut rng);
    add("conv2d-valid", vec![c], 2 * 2 * 9, &mut rng);
    let c = conv("conv", 1, 2, 1, (2, 5), PadMode::Same, false, &mut rng);
    add("conv2d-same", vec![c], 2 * h * w, &mut rng);
    let body = vec![widen(&mut rng), conv("depthwise", 4, 8, 4, (h, 1), PadMode::Valid, false, &mut rng)];
    add("depthwise-conv2d", body, 8 * w, &mut rng);
    let dw = Conv2d::new("sep.depthwise", 4, 4, 4, (1, 4), PadMode::Same, false, &mut rng);
    let pw = Conv2d::new("sep.pointwise", 4, 3, 1, (1, 1), PadMode::Valid, false, &mut rng);
    let body = vec![widen(&mut rng), node("sep", Layer::Separable(dw, pw))];
    add("separable-conv2d", body, 3 * h * w, &mut rng);
    let body = vec![widen(&mut rng), node("bn", Layer::BatchNorm(BatchNorm::new("bn", 4)))];
    add("batchnorm", body, 4 * h * w, &mut rng);
    let pool = |kind, k, s, pad| node("pool", Layer::Pool(Pool2d::new(kind, k, s, pad)));
    add("avg-pool-valid", vec![pool(PoolKind::Avg, (1, 3), (1, 2), PadMode::Valid)], h * 5, &mut rng);
    add("avg-pool-same", vec![pool(PoolKind::Avg, (2, 4), (1, 1), PadMode::Same)], h * w, &mut rng);
    add("max-pool", vec![pool(PoolKind::Max, (1, 2), (1, 2), PadMode::Valid)], h * 6, &mut rng);
    let act = |a| node("act", Layer::Act(a, None));
    add("elu", vec![act(Activation::Elu)], h * w, &mut rng);
    add("square", vec![act(Activation::Square)], h * w, &mut rng);
    add("log", vec![act(Activation::Square), node("log", Layer::Act(Activation::Log, None))], h * w, &mut rng);
    add("dropout", vec![node("dropout", Layer::Dropout { rate: 0.5, mask: None })], h * w, &mut rng);
    let branches = vec![
        vec![conv("a", 1, 2, 1, (1, 3), PadMode::Same, false, &mut rng)],
        vec![
            pool(PoolKind::Avg, (1, 2), (1, 1), PadMode::Same),
            conv("b", 1, 1, 1, (1, 1), PadMode::Valid, true, &mut rng),
        ],
    ];
    let body = vec![node(
        "concat",
        Layer::Branches {
            branches,
            merge: Merge::Channels,
            widths: Vec::new(),
        },
    )];
    add("concat-channels", body, 3 * h * w, &mut rng);
    let branches = vec![
        vec![node("flat_a", Layer::Flatten(None))],
        vec![
            conv("c", 1, 2, 1, (h, 1), PadMode::Valid, false, &mut rng),
            node("flat_b", Layer::Flatten(None)),
        ],
    ];
    let mut nodes = vec![node(
        "concat",
        Layer::Branches {
            branches,
            merge: Merge::Features,
            widths: Vec::new(),
        },
    )];
    nodes.push(node("dense", Layer::Dense(Dense::new("dense", h * w + 2 * w, 3, &mut rng))));
    nodes.push(node("softmax", Layer::Act(Activation::Softmax, None)));
    probes.push(("concat-features", ModelGraph::new("concat-features", [1, h, w], 3, nodes, seed)));
    probes
}
