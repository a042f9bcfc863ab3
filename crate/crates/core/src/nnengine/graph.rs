use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Ctx, Layer, Node, Param};
use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pass {
    None,
    Inference,
    Training,
}

/// Bias-corrected Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct AdamState<F> {
    step: u64,
    moments: Vec<(Vec<F>, Vec<F>)>,
}

/// A trainable network: an ordered list of nodes, some of which hold parallel branches.
#[derive(Clone, Debug)]
pub struct ModelGraph<F: Real = f32> {
    pub name: String,
    /// `(maps, height, width)` of one input sample.
    pub input_shape: [usize; 3],
    pub n_classes: usize,
    pub nodes: Vec<Node<F>>,
    rng: ChaCha8Rng,
    pass: Pass,
    grads_ready: bool,
    adam: AdamState<F>,
}

/// One row of [`ModelGraph::describe`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRow {
    pub name: String,
    pub kind: &'static str,
    pub output_shape: Vec<usize>,
    pub params: usize,
}

impl<F: Real> ModelGraph<F> {
    pub fn new(name: impl Into<String>, input_shape: [usize; 3], n_classes: usize, nodes: Vec<Node<F>>, seed: u64) -> Self {
        ModelGraph {
            name: name.into(),
            input_shape,
            n_classes,
            nodes,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d80f),
            pass: Pass::None,
            grads_ready: false,
            adam: AdamState::default(),
        }
    }

    /// Runs the network on a `(batch, maps, height, width)` batch and returns class probabilities.
    ///
    /// Dropout is active and batchnorm uses batch statistics only when `training` is set.
    pub fn forward(&mut self, batch: &Tensor<F>, training: bool) -> Result<Tensor<F>> {
        let want = [self.input_shape[0], self.input_shape[1], self.input_shape[2]];
        match batch.shape() {
            [n, rest @ ..] if *n >= 1 && rest == want => {}
            found => {
                return Err(Error::ShapeMismatch {
                    layer: "input".into(),
                    expected: format!("(batch, {}, {}, {})", want[0], want[1], want[2]),
                    found: format!("{found:?}"),
                })
            }
        }
        let mut shape = batch.shape().to_vec();
        for node in &self.nodes {
            shape = node.layer.output_shape(&node.name, &shape).map_err(|e| Error::ShapeMismatch {
                layer: e.layer,
                expected: e.expected,
                found: format!("{:?}", e.found),
            })?;
        }
        let mut ctx = Ctx {
            training,
            rng: &mut self.rng,
        };
        let mut x = batch.clone();
        for node in &mut self.nodes {
            x = node.layer.forward(x, &mut ctx);
        }
        self.pass = if training { Pass::Training } else { Pass::Inference };
        self.grads_ready = false;
        Ok(x)
    }

    /// Back-propagates `loss_grad` (gradient w.r.t. the output probabilities) and
    /// overwrites every parameter gradient.
    pub fn backward(&mut self, loss_grad: &Tensor<F>) -> Result<()> {
        if self.pass != Pass::Training {
            return Err(Error::InvalidState(
                "backward requires a preceding training-mode forward pass".into(),
            ));
        }
        self.zero_grad();
        let mut g = loss_grad.clone();
        for (i, node) in self.nodes.iter_mut().enumerate().rev() {
            match node.layer.backward(g, i > 0) {
                Some(next) => g = next,
                None => {
                    debug_assert_eq!(i, 0, "only the first layer may skip its input gradient");
                    g = Tensor::zeros(&[0]);
                }
            }
        }
        self.pass = Pass::None;
        self.grads_ready = true;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(|p| p.grad.fill(F::zero()));
    }

    pub fn visit_params(&self, mut f: impl FnMut(&Param<F>)) {
        for node in &self.nodes {
            node.layer.visit(&mut f);
        }
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&mut Param<F>)) {
        for node in &mut self.nodes {
            node.layer.visit_mut(&mut f);
        }
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|p| {
            if p.trainable {
                n += p.value.len();
            }
        });
        n
    }

    /// One bias-corrected Adam update followed by the max-norm projections.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if !self.grads_ready {
            return Err(Error::InvalidState("adam_step called without populated gradients".into()));
        }
        if self.adam.moments.is_empty() {
            let mut moments = Vec::new();
            self.visit_params(|p| {
                if p.trainable {
                    moments.push((vec![F::zero(); p.value.len()], vec![F::zero(); p.value.len()]));
                }
            });
            self.adam.moments = moments;
        }
        self.adam.step += 1;
        let t = self.adam.step as i32;
        let b1 = F::of(cfg.beta1);
        let b2 = F::of(cfg.beta2);
        let c1 = F::one() - F::of(cfg.beta1.powi(t));
        let c2 = F::one() - F::of(cfg.beta2.powi(t));
        let lr = F::of(cfg.lr);
        let eps = F::of(cfg.epsilon);
        let mut moments = std::mem::take(&mut self.adam.moments).into_iter();
        let mut used = Vec::new();
        self.visit_params_mut(|p| {
            if !p.trainable {
                return;
            }
            let (mut m, mut v) = moments.next().expect("moment per trainable parameter");
            for (((w, g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (F::one() - b1) * *g;
                *vi = b2 * *vi + (F::one() - b2) * *g * *g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            if let Some(bound) = p.max_norm {
                max_norm_project(&mut p.value, bound, NormGroup::Leading);
            }
            used.push((m, v));
        });
        self.adam.moments = used;
        self.grads_ready = false;
        Ok(())
    }

    /// Clears optimizer moments, e.g. before fine-tuning loaded weights.
    pub fn reset_optimizer(&mut self) {
        self.adam = AdamState::default();
    }

    /// Copies of every parameter and buffer in visiting order.
    pub fn state(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::new();
        self.visit_params(|p| out.push((p.name.clone(), p.value.clone())));
        out
    }

    pub fn load_state(&mut self, state: &[(String, Tensor<F>)]) -> Result<()> {
        let mut count = 0;
        let mut err = None;
        self.visit_params(|p| {
            match state.get(count) {
                Some((name, t)) if *name == p.name && t.shape() == p.value.shape() => {}
                Some((name, t)) => {
                    err.get_or_insert_with(|| {
                        format!(
                            "record {count} is `{name}` {:?}, graph expects `{}` {:?}",
                            t.shape(),
                            p.name,
                            p.value.shape()
                        )
                    });
                }
                None => {
                    err.get_or_insert_with(|| format!("missing record for `{}`", p.name));
                }
            }
            count += 1;
        });
        if count != state.len() {
            err.get_or_insert_with(|| format!("{} records for {count} parameters", state.len()));
        }
        if let Some(e) = err {
            return Err(Error::Container(e));
        }
        let mut it = state.iter();
        self.visit_params_mut(|p| p.value = it.next().expect("validated").1.clone());
        Ok(())
    }

    /// Layer-by-layer table of output shapes (batch axis dropped) and trainable parameter counts.
    pub fn describe(&self) -> Vec<LayerRow> {
        fn walk<F: Real>(nodes: &[Node<F>], input: &[usize], prefix: &str, rows: &mut Vec<LayerRow>) -> Vec<usize> {
            let mut shape = input.to_vec();
            for node in nodes {
                let name = format!("{prefix}{}", node.name);
                if let Layer::Branches { branches, .. } = &node.layer {
                    for (i, b) in branches.iter().enumerate() {
                        walk(b, &shape, &format!("{name}.{i}."), rows);
                    }
                }
                shape = node.layer.output_shape(&node.name, &shape).expect("graph is shape-consistent");
                let mut params = 0;
                if !matches!(node.layer, Layer::Branches { .. }) {
                    node.layer.visit(&mut |p: &Param<F>| {
                        if p.trainable {
                            params += p.value.len()
                        }
                    });
                }
                rows.push(LayerRow {
                    name,
                    kind: node.layer.kind_name(),
                    output_shape: shape[1..].to_vec(),
                    params,
                });
            }
            shape
        }
        let mut rows = Vec::new();
        let input = [1, self.input_shape[0], self.input_shape[1], self.input_shape[2]];
        walk(&self.nodes, &input, "", &mut rows);
        rows
    }

    /// [`describe`](Self::describe) rendered as an aligned plain-text table.
    pub fn describe_table(&self) -> String {
        let rows = self.describe();
        let shapes: Vec<String> = rows
            .iter()
            .map(|r| {
                let parts: Vec<String> = r.output_shape.iter().map(|d| d.to_string()).collect();
                format!("({})", parts.join(", "))
            })
            .collect();
        let wn = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(5);
        let wk = rows.iter().map(|r| r.kind.len()).max().unwrap_or(0).max(4);
        let ws = shapes.iter().map(|s| s.len()).max().unwrap_or(0).max(12);
        let mut out = format!("{:<wn$}  {:<wk$}  {:<ws$}  {:>10}\n", "layer", "kind", "output shape", "params");
        let mut total = 0;
        for (r, s) in rows.iter().zip(&shapes) {
            total += r.params;
            out.push_str(&format!("{:<wn$}  {:<wk$}  {:<ws$}  {:>10}\n", r.name, r.kind, s, r.params));
        }
        out.push_str(&format!("{:<wn$}  {:<wk$}  {:<ws$}  {:>10}\n", "total", "", "", total));
        out
    }
}

/// How [`max_norm_project`] groups tensor entries into constrained vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormGroup {
    /// One vector per index of the leading axis (per filter / per output unit).
    Leading,
    /// One vector per index of the trailing axis.
    Trailing,
}

/// Rescales every group whose Euclidean norm exceeds `bound` onto the bound.
pub fn max_norm_project<F: Real>(tensor: &mut Tensor<F>, bound: f64, group: NormGroup) {
    assert!(bound > 0.0, "max-norm bound must be positive");
    if tensor.is_empty() {
        return;
    }
    let lead = tensor.shape()[0];
    let len = tensor.len();
    let inner = len / lead;
    let b = F::of(bound);
    match group {
        NormGroup::Leading => {
            for row in tensor.data_mut().chunks_mut(inner) {
                let norm = row.iter().map(|v| *v * *v).sum::<F>().sqrt();
                if norm > b {
                    let s = b / norm;
                    row.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        NormGroup::Trailing => {
            let last = *tensor.shape().last().expect("rank >= 1");
            let data = tensor.data_mut();
            for j in 0..last {
                let norm = data.iter().skip(j).step_by(last).map(|v| *v * *v).sum::<F>().sqrt();
                if norm > b {
                    let s = b / norm;
                    data.iter_mut().skip(j).step_by(last).for_each(|v| *v *= s);
                }
            }
        }
    }
}

/// Lower clamp applied to probabilities before taking the log.
pub const PROB_CLAMP: f64 = 1e-7;

/// Mean negative log-probability of the true class, with its gradient w.r.t. the probabilities.
pub fn cross_entropy<F: Real>(probs: &Tensor<F>, labels: &[usize]) -> Result<(f64, Tensor<F>)> {
    let (n, k) = match probs.shape() {
        [n, k] => (*n, *k),
        s => return Err(Error::invalid(format!("probabilities must be (batch, classes), got {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let mut grad = Tensor::zeros(probs.shape());
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (i, &l) in labels.iter().enumerate() {
        let p = probs.data()[i * k + l].to_f64().unwrap_or(0.0);
        let clamped = p.max(PROB_CLAMP);
        loss -= clamped.ln();
        if p > PROB_CLAMP {
            grad.data_mut()[i * k + l] = F::of(-inv_n / p);
        }
    }
    Ok((loss * inv_n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnengine::layers::{Conv2d, Dense};
    use crate::nnengine::{layer_probes, random_batch, Activation, Merge, PadMode};

    fn node<F>(name: &str, layer: Layer<F>) -> Node<F> {
        Node {
            name: name.into(),
            layer,
        }
    }

    fn scalar_graph(w: f64) -> ModelGraph<f64> {
        // dense 1 -> 1 with no bias contribution to the update test
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = Dense::new("d", 1, 1, &mut rng);
        d.weight.value.data_mut()[0] = w;
        ModelGraph::new("scalar", [1, 1, 1], 1, vec![node("d", Layer::Dense(d))], 0)
    }

    fn set_grad(g: &mut ModelGraph<f64>, value: f64) {
        g.visit_params_mut(|p| p.grad.fill(value));
        g.grads_ready = true;
    }

    fn weight(g: &ModelGraph<f64>) -> f64 {
        g.state()[0].1.data()[0]
    }

    #[test]
    fn adam_first_step_is_minus_lr_sign() {
        let mut g = scalar_graph(0.0);
        set_grad(&mut g, 1.0);
        g.adam_step(&AdamConfig { lr: 0.1, ..AdamConfig::default() }).unwrap();
        assert!((weight(&g) + 0.1).abs() < 1e-7);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut g = scalar_graph(0.3);
        let before = g.state();
        set_grad(&mut g, 0.0);
        g.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(g.state(), before);
    }

    #[test]
    fn adam_shrinks_quadratic() {
        // scalar simulation of Adam on w^2, run independently of the graph
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let (mut w, mut m, mut v) = (1.0f64, 0.0, 0.0);
        let mut g = scalar_graph(1.0);
        let mut prev = 1.0f64;
        for t in 1..=3 {
            let grad = 2.0 * w;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            w -= cfg.lr * mh / (vh.sqrt() + cfg.epsilon);

            let gw = 2.0 * weight(&g);
            g.visit_params_mut(|p| p.grad.fill(gw));
            g.grads_ready = true;
            g.adam_step(&cfg).unwrap();
            assert!((weight(&g) - w).abs() < 1e-12);
            assert!(weight(&g).abs() < prev);
            prev = weight(&g).abs();
        }
    }

    #[test]
    fn adam_needs_gradients() {
        let mut g = scalar_graph(0.0);
        assert!(matches!(g.adam_step(&AdamConfig::default()), Err(Error::InvalidState(_))));
    }

    #[test]
    fn backward_needs_training_forward() {
        let (_, mut g) = layer_probes(0).remove(0);
        let dl = Tensor::zeros(&[2, 3]);
        assert!(matches!(g.backward(&dl), Err(Error::InvalidState(_))));
        let (x, _) = random_batch(&g, 2, 0);
        g.forward(&x, false).unwrap();
        assert!(g.backward(&dl).is_err());
        g.forward(&x, true).unwrap();
        assert!(g.backward(&dl).is_ok());
    }

    #[test]
    fn max_norm_examples() {
        let mut t = Tensor::from_vec(&[1, 2], vec![0.3f64, 0.4]).unwrap();
        max_norm_project(&mut t, 1.0, NormGroup::Leading);
        assert_eq!(t.data(), &[0.3, 0.4]);
        let mut t = Tensor::from_vec(&[1, 2], vec![3.0f64, 4.0]).unwrap();
        max_norm_project(&mut t, 1.0, NormGroup::Leading);
        assert!((t.data()[0] - 0.6).abs() < 1e-12 && (t.data()[1] - 0.8).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = (0..40).map(|_| rand::Rng::gen_range(&mut rng, -2.0f32..2.0)).collect();
        let mut t = Tensor::from_vec(&[8, 5], data).unwrap();
        max_norm_project(&mut t, 0.25, NormGroup::Leading);
        for row in t.data().chunks(5) {
            assert!(row.iter().map(|v| v * v).sum::<f32>().sqrt() <= 0.25 + 1e-7);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let p = Tensor::from_vec(&[1, 2], vec![0.7f64, 0.3]).unwrap();
        assert!((cross_entropy(&p, &[1]).unwrap().0 - 1.20397).abs() < 1e-5);
        let u = Tensor::filled(&[3, 4], 0.25f64);
        assert!((cross_entropy(&u, &[0, 1, 3]).unwrap().0 - 4f64.ln()).abs() < 1e-12);
        let one = Tensor::from_vec(&[1, 2], vec![1.0f64, 0.0]).unwrap();
        assert!(cross_entropy(&one, &[0]).unwrap().0 <= -(1.0f64 - 1e-6).ln());
        assert!(cross_entropy(&one, &[2]).is_err());
        // clamped probability: finite loss, no gradient through the clamp
        let (l, g) = cross_entropy(&one, &[1]).unwrap();
        assert!((l + PROB_CLAMP.ln()).abs() < 1e-12);
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn dense_softmax_gradient_is_p_minus_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let nodes = vec![
            node("flatten", Layer::Flatten(None)),
            node("d", Layer::Dense(Dense::new("d", 3, 2, &mut rng))),
            node("softmax", Layer::Act(Activation::Softmax, None)),
        ];
        let mut g = ModelGraph::<f64>::new("dense", [1, 1, 3], 2, nodes, 0);
        let x = Tensor::from_vec(&[2, 1, 1, 3], vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75]).unwrap();
        let labels = [1, 0];
        let p = g.forward(&x, true).unwrap();
        let (_, dl) = cross_entropy(&p, &labels).unwrap();
        g.backward(&dl).unwrap();
        // dL/dz = (p - onehot) / batch; dL/dW = x^T dz, dL/db = sum dz
        let mut dz = p.data().to_vec();
        for (i, &l) in labels.iter().enumerate() {
            dz[i * 2 + l] -= 1.0;
        }
        dz.iter_mut().for_each(|v| *v /= 2.0);
        let state: Vec<(String, Tensor<f64>, Tensor<f64>)> = {
            let mut out = Vec::new();
            g.visit_params(|p| out.push((p.name.clone(), p.value.clone(), p.grad.clone())));
            out
        };
        let w_grad = &state.iter().find(|s| s.0 == "d.weight").unwrap().2;
        let b_grad = &state.iter().find(|s| s.0 == "d.bias").unwrap().2;
        // weights are stored (out, in)
        for o in 0..2 {
            let want_b = dz[o] + dz[2 + o];
            assert!((b_grad.data()[o] - want_b).abs() < 1e-12);
            for i in 0..3 {
                let want = x.data()[i] * dz[o] + x.data()[3 + i] * dz[2 + o];
                assert!((w_grad.data()[o * 3 + i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dead_branch_gets_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut dead = Conv2d::new("dead", 1, 1, 1, (1, 1), PadMode::Valid, true, &mut rng);
        dead.weight.value.fill(0.0);
        let live = Conv2d::new("live", 1, 1, 1, (1, 3), PadMode::Same, false, &mut rng);
        let mut head = Dense::new("d", 2 * 4, 2, &mut rng);
        // columns reading the dead branch's output are zero, so its parameters never reach the loss
        for o in 0..2 {
            for i in 4..8 {
                head.weight.value.data_mut()[o * 8 + i] = 0.0;
            }
        }
        let nodes = vec![
            node(
                "branches",
                Layer::Branches {
                    branches: vec![vec![node("live", Layer::Conv(live))], vec![node("dead", Layer::Conv(dead))]],
                    merge: Merge::Channels,
                    widths: Vec::new(),
                },
            ),
            node("flatten", Layer::Flatten(None)),
            node("d", Layer::Dense(head)),
            node("softmax", Layer::Act(Activation::Softmax, None)),
        ];
        let mut g = ModelGraph::<f64>::new("dead", [1, 1, 4], 2, nodes, 0);
        let (x, y) = random_batch(&g, 3, 1);
        let p = g.forward(&x, true).unwrap();
        let (_, dl) = cross_entropy(&p, &y).unwrap();
        g.backward(&dl).unwrap();
        g.visit_params(|p| {
            if p.name.starts_with("dead") {
                assert!(p.grad.data().iter().all(|v| *v == 0.0), "{}", p.name);
            }
            if p.name == "live.weight" {
                assert!(p.grad.data().iter().any(|v| *v != 0.0));
            }
        });
    }

    #[test]
    fn dropout_rate_and_inverted_scaling() {
        let r = 0.3;
        let n = 20_000;
        let nodes = vec![node("drop", Layer::Dropout { rate: r, mask: None })];
        let mut g = ModelGraph::<f64>::new("drop", [1, 1, n], 2, nodes, 5);
        let x = Tensor::filled(&[1, 1, 1, n], 1.0);
        let y = g.forward(&x, true).unwrap();
        let zeros = y.data().iter().filter(|v| **v == 0.0).count() as f64;
        let sd = (n as f64 * r * (1.0 - r)).sqrt();
        assert!((zeros - n as f64 * r).abs() <= 3.0 * sd, "{zeros}");
        let kept = 1.0 / (1.0 - r);
        assert!(y.data().iter().all(|v| *v == 0.0 || (v - kept).abs() < 1e-12));
        assert_eq!(g.forward(&x, false).unwrap(), x);
    }

    #[test]
    fn inference_is_deterministic_and_rowwise() {
        let (_, mut g) = layer_probes(4).into_iter().find(|(k, _)| *k == "batchnorm").unwrap();
        let (x, _) = random_batch(&g, 1, 3);
        let twice = Tensor::stack(&[&x.clone().reshape(&[1, 3, 12]).unwrap(), &x.clone().reshape(&[1, 3, 12]).unwrap()]).unwrap();
        let a = g.forward(&twice, false).unwrap();
        assert_eq!(a.row(0), a.row(1));
        for row in a.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let mut h = g.clone();
        assert_eq!(g.forward(&twice, true).unwrap(), h.forward(&twice, true).unwrap());
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let (_, mut g) = layer_probes(0).into_iter().find(|(k, _)| *k == "conv2d-valid").unwrap();
        let err = g.forward(&Tensor::zeros(&[2, 1, 3, 11]), false).unwrap_err();
        assert!(err.to_string().contains("input"), "{err}");
        // a graph whose dense head disagrees with the conv output
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let nodes = vec![
            node("conv", Layer::Conv(Conv2d::new("conv", 1, 2, 1, (1, 2), PadMode::Valid, false, &mut rng))),
            node("flatten", Layer::Flatten(None)),
            node("head", Layer::Dense(Dense::new("head", 99, 2, &mut rng))),
        ];
        let mut g = ModelGraph::<f32>::new("bad", [1, 2, 5], 2, nodes, 0);
        let err = g.forward(&Tensor::zeros(&[1, 1, 2, 5]), false).unwrap_err();
        assert!(err.to_string().contains("head"), "{err}");
    }

    #[test]
    fn elu_continuous_and_log_finite() {
        let nodes = vec![node("elu", Layer::Act(Activation::Elu, None))];
        let mut g = ModelGraph::<f64>::new("elu", [1, 1, 3], 2, nodes, 0);
        let y = g.forward(&Tensor::from_vec(&[1, 1, 1, 3], vec![-1e-12, 0.0, 1e-12]).unwrap(), false).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-11));
        let nodes = vec![
            node("sq", Layer::Act(Activation::Square, None)),
            node("log", Layer::Act(Activation::Log, None)),
        ];
        let mut g = ModelGraph::<f32>::new("sqlog", [1, 1, 2], 2, nodes, 0);
        let y = g.forward(&Tensor::zeros(&[1, 1, 1, 2]), true).unwrap();
        assert!(y.all_finite());
    }
}
