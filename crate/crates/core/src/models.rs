//! Builders for the five EEGNet-family architectures.
//!
//! Temporal kernel lengths are fractions of the sampling rate (see
//! [`kernel_from_fs`]) so the same builder serves 128, 250 and 500 Hz data.
//! Inputs are `(1, electrodes, samples)` per window.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nnengine::layers::{Conv2d, Dense, Pool2d};
use crate::nnengine::{Activation, Layer, Merge, ModelGraph, Node, PadMode, PoolKind, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ArchitectureKind {
    ShallowConvNet,
    DeepConvNet,
    EegNet,
    EegNetFusion,
    MiEegNet,
}

impl ArchitectureKind {
    pub const ALL: [ArchitectureKind; 5] = [
        ArchitectureKind::ShallowConvNet,
        ArchitectureKind::DeepConvNet,
        ArchitectureKind::EegNet,
        ArchitectureKind::EegNetFusion,
        ArchitectureKind::MiEegNet,
    ];

    pub fn id(self) -> &'static str {
        match self {
            ArchitectureKind::ShallowConvNet => "shallow_convnet",
            ArchitectureKind::DeepConvNet => "deep_convnet",
            ArchitectureKind::EegNet => "eegnet",
            ArchitectureKind::EegNetFusion => "eegnet_fusion",
            ArchitectureKind::MiEegNet => "mi_eegnet",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ArchitectureKind::ShallowConvNet => "Shallow ConvNet",
            ArchitectureKind::DeepConvNet => "Deep ConvNet",
            ArchitectureKind::EegNet => "EEGNet",
            ArchitectureKind::EegNetFusion => "EEGNet Fusion",
            ArchitectureKind::MiEegNet => "MI-EEGNet",
        }
    }
}

impl fmt::Display for ArchitectureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl serde::Serialize for ArchitectureKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.id())
    }
}

impl<'de> serde::Deserialize<'de> for ArchitectureKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for ArchitectureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchitectureKind::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| Error::invalid(format!("unknown network `{s}`")))
    }
}

/// Shape of the windows a network consumes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputSignature {
    pub channels: usize,
    pub samples: usize,
    pub fs: f64,
    pub n_classes: usize,
}

impl InputSignature {
    /// Two-second windows at `fs`.
    pub fn two_second(channels: usize, fs: f64, n_classes: usize) -> Self {
        InputSignature {
            channels,
            samples: (2.0 * fs).round() as usize,
            fs,
            n_classes,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.channels < 1 || self.n_classes < 2 || !(self.fs > 0.0) {
            return Err(Error::invalid(format!("invalid input signature {self:?}")));
        }
        Ok(())
    }
}

/// Kernel length as a fraction of the sampling rate: `round(fraction * fs)`, at least 2.
pub fn kernel_from_fs(fs: f64, fraction: f64) -> usize {
    ((fraction * fs).round() as usize).max(2)
}

struct Builder<F: Real> {
    rng: ChaCha8Rng,
    _f: std::marker::PhantomData<F>,
}

fn node<F>(name: &str, layer: Layer<F>) -> Node<F> {
    Node {
        name: name.to_string(),
        layer,
    }
}

impl<F: Real> Builder<F> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, groups: usize, k: (usize, usize), pad: PadMode, bias: bool) -> Node<F> {
        node(name, Layer::Conv(Conv2d::new(name, cin, cout, groups, k, pad, bias, &mut self.rng)))
    }

    fn depthwise(&mut self, name: &str, cin: usize, depth: usize, k: (usize, usize), max_norm: Option<f64>) -> Node<F> {
        let mut c = Conv2d::new(name, cin, cin * depth, cin, k, PadMode::Valid, false, &mut self.rng);
        c.weight.max_norm = max_norm;
        node(name, Layer::Conv(c))
    }

    fn separable(&mut self, name: &str, cin: usize, cout: usize, k: (usize, usize)) -> Node<F> {
        let dw = Conv2d::new(&format!("{name}.depthwise"), cin, cin, cin, k, PadMode::Same, false, &mut self.rng);
        let pw = Conv2d::new(&format!("{name}.pointwise"), cin, cout, 1, (1, 1), PadMode::Valid, false, &mut self.rng);
        node(name, Layer::Separable(dw, pw))
    }

    fn dense(&mut self, name: &str, fin: usize, fout: usize, max_norm: Option<f64>) -> Node<F> {
        let mut d = Dense::new(name, fin, fout, &mut self.rng);
        d.weight.max_norm = max_norm;
        node(name, Layer::Dense(d))
    }
}

fn bn<F: Real>(name: &str, ch: usize) -> Node<F> {
    node(name, Layer::BatchNorm(crate::nnengine::layers::BatchNorm::new(name, ch)))
}

fn act<F: Real>(name: &str, a: Activation) -> Node<F> {
    node(name, Layer::Act(a, None))
}

fn pool<F: Real>(name: &str, kind: PoolKind, k: (usize, usize), s: (usize, usize), pad: PadMode) -> Node<F> {
    node(name, Layer::Pool(Pool2d::new(kind, k, s, pad)))
}

fn dropout<F: Real>(name: &str, rate: f64) -> Node<F> {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
    node(name, Layer::Dropout { rate, mask: None })
}

fn flatten<F: Real>(name: &str) -> Node<F> {
    node(name, Layer::Flatten(None))
}

const DROPOUT: f64 = 0.5;

/// Hyperparameters of one EEGNet feature extractor (everything up to flatten).
#[derive(Clone, Copy, Debug)]
struct EegNetBlock {
    f1: usize,
    temporal_fraction: f64,
    depth: usize,
    f2: usize,
}

impl EegNetBlock {
    const STANDARD: EegNetBlock = EegNetBlock {
        f1: 8,
        temporal_fraction: 0.5,
        depth: 2,
        f2: 16,
    };

    fn nodes<F: Real>(&self, b: &mut Builder<F>, sig: &InputSignature, prefix: &str) -> (Vec<Node<F>>, usize) {
        let p = |s: &str| format!("{prefix}{s}");
        let k1 = kernel_from_fs(sig.fs, self.temporal_fraction);
        let k2 = kernel_from_fs(sig.fs, 0.125);
        let fd = self.f1 * self.depth;
        let nodes = vec![
            b.conv(&p("temporal_conv"), 1, self.f1, 1, (1, k1), PadMode::Same, false),
            bn(&p("bn1"), self.f1),
            b.depthwise(&p("depthwise"), self.f1, self.depth, (sig.channels, 1), Some(1.0)),
            bn(&p("bn2"), fd),
            act(&p("elu1"), Activation::Elu),
            pool(&p("pool1"), PoolKind::Avg, (1, 4), (1, 4), PadMode::Valid),
            dropout(&p("dropout1"), DROPOUT),
            b.separable(&p("separable"), fd, self.f2, (1, k2)),
            bn(&p("bn3"), self.f2),
            act(&p("elu2"), Activation::Elu),
            pool(&p("pool2"), PoolKind::Avg, (1, 8), (1, 8), PadMode::Valid),
            dropout(&p("dropout2"), DROPOUT),
            flatten(&p("flatten")),
        ];
        let width = sig.samples / 4 / 8;
        (nodes, self.f2 * width)
    }

    fn largest_kernel(&self, fs: f64) -> usize {
        kernel_from_fs(fs, self.temporal_fraction)
    }
}

fn eegnet<F: Real>(b: &mut Builder<F>, sig: &InputSignature) -> Vec<Node<F>> {
    let (mut nodes, features) = EegNetBlock::STANDARD.nodes(b, sig, "");
    nodes.push(b.dense("dense", features, sig.n_classes, Some(0.25)));
    nodes.push(act("softmax", Activation::Softmax));
    nodes
}

const FUSION_BRANCHES: [EegNetBlock; 3] = [
    EegNetBlock {
        f1: 8,
        temporal_fraction: 0.5,
        depth: 2,
        f2: 16,
    },
    EegNetBlock {
        f1: 16,
        temporal_fraction: 0.75,
        depth: 2,
        f2: 32,
    },
    EegNetBlock {
        f1: 32,
        temporal_fraction: 1.0,
        depth: 2,
        f2: 64,
    },
];

fn eegnet_fusion<F: Real>(b: &mut Builder<F>, sig: &InputSignature) -> Vec<Node<F>> {
    let mut branches = Vec::new();
    let mut features = 0;
    for blk in FUSION_BRANCHES {
        let (nodes, f) = blk.nodes(b, sig, "");
        branches.push(nodes);
        features += f;
    }
    vec![
        node(
            "fusion",
            Layer::Branches {
                branches,
                merge: Merge::Features,
                widths: Vec::new(),
            },
        ),
        b.dense("dense", features, sig.n_classes, None),
        act("softmax", Activation::Softmax),
    ]
}

fn shallow_convnet<F: Real>(b: &mut Builder<F>, sig: &InputSignature) -> Vec<Node<F>> {
    let k = kernel_from_fs(sig.fs, 0.1);
    let pk = kernel_from_fs(sig.fs, 0.3);
    let ps = kernel_from_fs(sig.fs, 0.06);
    let t1 = sig.samples + 1 - k;
    let width = (t1.saturating_sub(pk)) / ps + 1;
    vec![
        b.conv("temporal_conv", 1, 40, 1, (1, k), PadMode::Valid, true),
        b.conv("spatial_conv", 40, 40, 1, (sig.channels, 1), PadMode::Valid, false),
        bn("bn", 40),
        act("square", Activation::Square),
        pool("pool", PoolKind::Avg, (1, pk), (1, ps), PadMode::Valid),
        act("log", Activation::Log),
        dropout("dropout", DROPOUT),
        flatten("flatten"),
        b.dense("dense", 40 * width, sig.n_classes, None),
        act("softmax", Activation::Softmax),
    ]
}

fn deep_convnet<F: Real>(b: &mut Builder<F>, sig: &InputSignature) -> Vec<Node<F>> {
    let k = kernel_from_fs(sig.fs, 0.04);
    let mut nodes = vec![
        b.conv("block1.temporal_conv", 1, 25, 1, (1, k), PadMode::Valid, true),
        b.conv("block1.spatial_conv", 25, 25, 1, (sig.channels, 1), PadMode::Valid, true),
    ];
    let mut width = sig.samples;
    let mut channels = 25;
    for (i, filters) in [25usize, 50, 100, 200].into_iter().enumerate() {
        let blk = format!("block{}", i + 1);
        if i > 0 {
            nodes.push(b.conv(&format!("{blk}.conv"), channels, filters, 1, (1, k), PadMode::Valid, true));
        }
        width = (width + 1).saturating_sub(k);
        width /= 2;
        channels = filters;
        nodes.push(bn(&format!("{blk}.bn"), filters));
        nodes.push(act(&format!("{blk}.elu"), Activation::Elu));
        nodes.push(pool(&format!("{blk}.pool"), PoolKind::Max, (1, 2), (1, 2), PadMode::Valid));
        nodes.push(dropout(&format!("{blk}.dropout"), DROPOUT));
    }
    nodes.push(flatten("flatten"));
    nodes.push(b.dense("dense", channels * width, sig.n_classes, None));
    nodes.push(act("softmax", Activation::Softmax));
    nodes
}

fn mi_eegnet<F: Real>(b: &mut Builder<F>, sig: &InputSignature) -> Vec<Node<F>> {
    let f1 = 16;
    let fd = f1 * 2;
    let width = sig.samples / 4;
    let mut branches: Vec<Vec<Node<F>>> = [0.125, 0.25, 0.5]
        .iter()
        .enumerate()
        .map(|(i, &frac)| vec![b.separable(&format!("inception.sep{i}"), fd, 16, (1, kernel_from_fs(sig.fs, frac)))])
        .collect();
    branches.push(vec![
        pool("inception.pool", PoolKind::Avg, (1, 4), (1, 1), PadMode::Same),
        b.conv("inception.pool_pointwise", fd, 16, 1, (1, 1), PadMode::Valid, false),
    ]);
    vec![
        b.conv("temporal_conv", 1, f1, 1, (1, kernel_from_fs(sig.fs, 0.5)), PadMode::Same, false),
        bn("bn1", f1),
        b.depthwise("depthwise", f1, 2, (sig.channels, 1), Some(1.0)),
        bn("bn2", fd),
        act("elu1", Activation::Elu),
        pool("pool1", PoolKind::Avg, (1, 4), (1, 4), PadMode::Valid),
        dropout("dropout1", DROPOUT),
        node(
            "inception",
            Layer::Branches {
                branches: std::mem::take(&mut branches),
                merge: Merge::Channels,
                widths: Vec::new(),
            },
        ),
        bn("bn3", 64),
        act("elu2", Activation::Elu),
        pool("global_pool", PoolKind::Avg, (1, width.max(1)), (1, 1), PadMode::Valid),
        dropout("dropout2", DROPOUT),
        flatten("flatten"),
        b.dense("dense", 64, sig.n_classes, None),
        act("softmax", Activation::Softmax),
    ]
}

/// Longest temporal kernel of an architecture at sampling rate `fs`.
pub fn largest_temporal_kernel(kind: ArchitectureKind, fs: f64) -> usize {
    match kind {
        ArchitectureKind::ShallowConvNet => kernel_from_fs(fs, 0.1).max(kernel_from_fs(fs, 0.3)),
        ArchitectureKind::DeepConvNet => kernel_from_fs(fs, 0.04),
        ArchitectureKind::EegNet => EegNetBlock::STANDARD.largest_kernel(fs),
        ArchitectureKind::EegNetFusion => FUSION_BRANCHES
            .iter()
            .map(|b| b.largest_kernel(fs))
            .max()
            .unwrap_or(2),
        ArchitectureKind::MiEegNet => kernel_from_fs(fs, 0.5),
    }
}

/// Builds an initialized graph: Glorot-uniform conv/dense weights, batchnorm
/// gamma 1 / beta 0, all drawn from `seed`.
pub fn build_model<F: Real>(kind: ArchitectureKind, sig: &InputSignature, seed: u64) -> Result<ModelGraph<F>> {
    sig.validate()?;
    let need = largest_temporal_kernel(kind, sig.fs);
    if sig.samples < need {
        return Err(Error::invalid(format!(
            "{kind} at {} Hz needs at least {need} samples per window, got {}",
            sig.fs, sig.samples
        )));
    }
    let mut b = Builder::<F> {
        rng: ChaCha8Rng::seed_from_u64(seed),
        _f: std::marker::PhantomData,
    };
    let nodes = match kind {
        ArchitectureKind::ShallowConvNet => shallow_convnet(&mut b, sig),
        ArchitectureKind::DeepConvNet => deep_convnet(&mut b, sig),
        ArchitectureKind::EegNet => eegnet(&mut b, sig),
        ArchitectureKind::EegNetFusion => eegnet_fusion(&mut b, sig),
        ArchitectureKind::MiEegNet => mi_eegnet(&mut b, sig),
    };
    let graph = ModelGraph::new(kind.id(), [1, sig.channels, sig.samples], sig.n_classes, nodes, seed);
    // Reject signatures whose pooling chain collapses to nothing.
    let mut shape = vec![1, 1, sig.channels, sig.samples];
    for n in &graph.nodes {
        shape = n.layer.output_shape(&n.name, &shape).map_err(|e| {
            Error::invalid(format!(
                "{kind} cannot process {} x {} windows: layer `{}` expected {}",
                sig.channels, sig.samples, e.layer, e.expected
            ))
        })?;
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "{kind} cannot process {} x {} windows: layer `{}` output is empty",
                sig.channels, sig.samples, n.name
            )));
        }
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_lengths() {
        assert_eq!(kernel_from_fs(128.0, 0.5), 64);
        assert_eq!(kernel_from_fs(500.0, 0.5), 250);
        assert_eq!(kernel_from_fs(250.0, 0.1), 25);
        assert_eq!(kernel_from_fs(10.0, 0.01), 2);
    }

    #[test]
    fn parses_ids() {
        for k in ArchitectureKind::ALL {
            assert_eq!(k.id().parse::<ArchitectureKind>().unwrap(), k);
        }
        assert!("resnet".parse::<ArchitectureKind>().is_err());
    }

    #[test]
    fn too_short_window_names_minimum() {
        let sig = InputSignature {
            channels: 8,
            samples: 40,
            fs: 128.0,
            n_classes: 2,
        };
        let err = build_model::<f32>(ArchitectureKind::EegNet, &sig, 0).unwrap_err();
        assert!(err.to_string().contains("at least 64"), "{err}");
    }

    fn small() -> InputSignature {
        InputSignature {
            channels: 3,
            samples: 64,
            fs: 32.0,
            n_classes: 3,
        }
    }

    #[test]
    fn every_architecture_matches_finite_differences() {
        use crate::nnengine::{gradient_check, random_batch};
        for kind in ArchitectureKind::ALL {
            let g = build_model::<f64>(kind, &small(), 4).unwrap();
            let (x, y) = random_batch(&g, 4, 9);
            let r = gradient_check(&g, &x, &y, 50, 1e-5, 1).unwrap();
            assert_eq!(r.checked, 50, "{kind}");
            assert!(r.max_rel_error < 1e-4, "{kind}: {r:?}");
        }
    }

    /// Closed-form EEGNet count: temporal conv, depthwise, separable (depthwise +
    /// pointwise), three batchnorms (gamma and beta) and the dense head.
    fn eegnet_count(c: usize, t: usize, fs: f64, classes: usize) -> usize {
        let (f1, d, f2) = (8, 2, 16);
        let k1 = (fs / 2.0).round() as usize;
        let k2 = (fs / 8.0).round() as usize;
        let temporal = f1 * k1;
        let depthwise = f1 * d * c;
        let separable = f1 * d * k2 + f1 * d * f2;
        let norms = 2 * (f1 + f1 * d + f2);
        let dense = f2 * (t / 32) * classes + classes;
        temporal + depthwise + separable + norms + dense
    }

    #[test]
    fn eegnet_parameter_count_and_shapes() {
        let sig = InputSignature {
            channels: 22,
            samples: 256,
            fs: 128.0,
            n_classes: 4,
        };
        let g = build_model::<f32>(ArchitectureKind::EegNet, &sig, 0).unwrap();
        assert_eq!(g.parameter_count(), eegnet_count(22, 256, 128.0, 4));
        assert_eq!(g.parameter_count(), 1972);
        let rows = g.describe();
        let first = &g.nodes[0];
        match &first.layer {
            Layer::Conv(c) => assert_eq!(c.kernel, (1, 64)),
            _ => panic!("first layer is not a convolution"),
        }
        let dw = rows.iter().find(|r| r.name == "depthwise").unwrap();
        assert_eq!(dw.output_shape, vec![16, 1, 256]);
        assert_eq!(rows.iter().map(|r| r.params).sum::<usize>(), g.parameter_count());
        assert!(g.describe_table().lines().last().unwrap().trim_end().ends_with("1972"));
    }

    #[test]
    fn shallow_squares_before_log() {
        let g = build_model::<f32>(ArchitectureKind::ShallowConvNet, &small(), 0).unwrap();
        let kinds: Vec<&str> = g.describe().iter().map(|r| r.kind).collect();
        let sq = kinds.iter().position(|k| *k == "square").unwrap();
        let lg = kinds.iter().position(|k| *k == "log").unwrap();
        assert!(sq < lg);
    }

    #[test]
    fn fusion_concatenates_three_branches() {
        let sig = InputSignature {
            channels: 22,
            samples: 256,
            fs: 128.0,
            n_classes: 4,
        };
        let g = build_model::<f32>(ArchitectureKind::EegNetFusion, &sig, 0).unwrap();
        let Layer::Branches { branches, merge, .. } = &g.nodes[0].layer else {
            panic!("fusion must start with parallel branches")
        };
        assert_eq!(branches.len(), 3);
        assert_eq!(*merge, Merge::Features);
        assert!(branches.iter().all(|b| b.last().unwrap().layer.kind_name() == "flatten"));
        let Layer::Dense(d) = &g.nodes[1].layer else {
            panic!("dense head expected after the merge")
        };
        // flattened widths: F2 * T/32 per branch
        assert_eq!(d.weight.value.shape()[1], (16 + 32 + 64) * 8);
    }

    #[test]
    fn benchmark_signatures_build_and_normalize() {
        use crate::nnengine::Tensor;
        for (c, fs) in [(64, 128.0), (62, 500.0), (22, 250.0), (64, 500.0)] {
            let sig = InputSignature::two_second(c, fs, 2);
            for kind in ArchitectureKind::ALL {
                let mut g = build_model::<f32>(kind, &sig, 1).unwrap();
                if fs == 128.0 {
                    let p = g.forward(&Tensor::zeros(&[2, 1, c, sig.samples]), false).unwrap();
                    assert_eq!(p.shape(), &[2, 2]);
                    for row in p.data().chunks(2) {
                        assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
                        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn fs_changes_only_kernel_lengths() {
        let a = build_model::<f32>(ArchitectureKind::MiEegNet, &InputSignature::two_second(8, 128.0, 2), 0).unwrap();
        let b = build_model::<f32>(ArchitectureKind::MiEegNet, &InputSignature::two_second(8, 250.0, 2), 0).unwrap();
        let names = |g: &ModelGraph<f32>| g.describe().into_iter().map(|r| (r.name, r.kind)).collect::<Vec<_>>();
        assert_eq!(names(&a), names(&b));
    }

    #[test]
    fn seeded_initialization_is_reproducible() {
        let a = build_model::<f32>(ArchitectureKind::DeepConvNet, &small(), 7).unwrap();
        let b = build_model::<f32>(ArchitectureKind::DeepConvNet, &small(), 7).unwrap();
        let c = build_model::<f32>(ArchitectureKind::DeepConvNet, &small(), 8).unwrap();
        assert_eq!(a.state(), b.state());
        assert_ne!(a.state(), c.state());
    }
}
