//! Shared/private architecture: a shared extractor, one private extractor per
//! domain, a multinomial domain discriminator on shared features and a
//! sentiment classifier on the concatenated features.

use rand::{Rng, SeedableRng};

use crate::autodiff::{Gradients, Graph, ParamId, Tensor, Var};
use crate::error::{MranError, Result};
use crate::SeededRng;

pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Debug)]
pub struct Param {
    pub id: ParamId,
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

/// Layer widths `[input, hidden.., output]` plus the dropout applied after
/// every hidden activation.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub dropout: f64,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(MranError::Config(format!(
                "an MLP needs at least one hidden layer, got widths {:?}",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(MranError::Config(format!(
                "MLP widths must be positive, got {:?}",
                self.widths
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(MranError::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

impl Mlp {
    fn init(spec: MlpSpec, prefix: &str, next_id: &mut usize, rng: &mut SeededRng) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.widths.len() - 1);
        for (l, pair) in spec.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let weight = Param {
                id: ParamId(*next_id),
                name: format!("{prefix}.{l}.weight"),
                tensor: Tensor::matrix(fan_in, fan_out, w)?.with_grad(),
            };
            let bias = Param {
                id: ParamId(*next_id + 1),
                name: format!("{prefix}.{l}.bias"),
                tensor: Tensor::zeros(vec![fan_out])?.with_grad(),
            };
            *next_id += 2;
            layers.push(Linear { weight, bias });
        }
        Ok(Mlp { spec, layers })
    }

    pub fn input_width(&self) -> usize {
        self.spec.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.spec.widths.last().expect("validated widths")
    }

    /// Linear layers with relu + dropout between them; the output layer is
    /// left linear.
    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        x: Var,
        pass: &mut Pass<'_>,
        trainable: bool,
    ) -> Result<Var> {
        let width = g.value(x).cols();
        if g.value(x).shape().len() != 2 || width != self.input_width() {
            return Err(MranError::dim(
                "mlp input",
                g.value(x).shape(),
                &[g.value(x).rows(), self.input_width()],
            ));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (w, b) = if trainable {
                (
                    g.param(&layer.weight.tensor, layer.weight.id),
                    g.param(&layer.bias.tensor, layer.bias.id),
                )
            } else {
                (
                    g.constant_ref(&layer.weight.tensor),
                    g.constant_ref(&layer.bias.tensor),
                )
            };
            h = g.matmul(h, w)?;
            h = g.add_bias(h, b)?;
            if l < last {
                h = g.relu(h);
                h = pass.dropout(g, h, self.spec.dropout)?;
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }
}

/// Which parameter groups receive gradients in a forward pass. `features`
/// covers the shared extractor, the domain extractors and the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub features: bool,
    pub discriminator: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        features: true,
        discriminator: true,
    };
    pub const NONE: Trainable = Trainable {
        features: false,
        discriminator: false,
    };
    pub const FEATURES: Trainable = Trainable {
        features: true,
        discriminator: false,
    };
    pub const DISCRIMINATOR: Trainable = Trainable {
        features: false,
        discriminator: true,
    };
}

/// Per-pass switches: train/eval mode, the dropout stream and which groups
/// are differentiable.
pub struct Pass<'r> {
    pub training: bool,
    pub trainable: Trainable,
    rng: Option<&'r mut SeededRng>,
}

impl<'r> Pass<'r> {
    pub fn train(rng: &'r mut SeededRng, trainable: Trainable) -> Self {
        Pass {
            training: true,
            trainable,
            rng: Some(rng),
        }
    }

    /// Deterministic pass without dropout.
    pub fn eval(trainable: Trainable) -> Pass<'static> {
        Pass {
            training: false,
            trainable,
            rng: None,
        }
    }

    fn dropout(&mut self, g: &mut Graph<'_>, x: Var, rate: f64) -> Result<Var> {
        match (&mut self.rng, self.training) {
            (Some(rng), true) => g.dropout(x, rate, true, &mut **rng),
            (None, true) if rate > 0.0 => Err(MranError::Usage(
                "training pass with dropout needs a random stream".into(),
            )),
            _ => Ok(x),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub domains: usize,
    pub input_dim: usize,
    pub extractor_hidden: Vec<usize>,
    pub shared_dim: usize,
    pub domain_dim: usize,
    pub dropout: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            domains: 4,
            input_dim: 5000,
            extractor_hidden: vec![1000, 500],
            shared_dim: 128,
            domain_dim: 64,
            dropout: 0.4,
        }
    }
}

impl ModelSpec {
    fn extractor(&self, out: usize) -> MlpSpec {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.extractor_hidden);
        widths.push(out);
        MlpSpec {
            widths,
            dropout: self.dropout,
        }
    }

    pub fn shared_spec(&self) -> MlpSpec {
        self.extractor(self.shared_dim)
    }

    pub fn domain_spec(&self) -> MlpSpec {
        self.extractor(self.domain_dim)
    }

    /// One hidden layer as wide as the input.
    pub fn discriminator_spec(&self) -> MlpSpec {
        MlpSpec {
            widths: vec![self.shared_dim, self.shared_dim, self.domains],
            dropout: self.dropout,
        }
    }

    pub fn classifier_spec(&self) -> MlpSpec {
        let width = self.shared_dim + self.domain_dim;
        MlpSpec {
            widths: vec![width, width, NUM_CLASSES],
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    Shared,
    Domain(usize),
    Discriminator,
    Classifier,
}

#[derive(Clone, Debug)]
pub struct MranModel {
    spec: ModelSpec,
    pub shared: Mlp,
    pub domain: Vec<Mlp>,
    pub discriminator: Mlp,
    pub classifier: Mlp,
}

impl MranModel {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = SeededRng::seed_from_u64(seed);
        MranModel::init_with(spec, &mut rng)
    }

    pub fn init_with(spec: ModelSpec, rng: &mut SeededRng) -> Result<Self> {
        if spec.domains < 2 {
            return Err(MranError::Config(format!(
                "at least two domains are required, got {}",
                spec.domains
            )));
        }
        let mut next = 0;
        let shared = Mlp::init(spec.shared_spec(), "shared", &mut next, rng)?;
        let domain = (0..spec.domains)
            .map(|i| Mlp::init(spec.domain_spec(), &format!("domain{i}"), &mut next, rng))
            .collect::<Result<Vec<_>>>()?;
        let discriminator = Mlp::init(spec.discriminator_spec(), "discriminator", &mut next, rng)?;
        let classifier = Mlp::init(spec.classifier_spec(), "classifier", &mut next, rng)?;
        Ok(MranModel {
            spec,
            shared,
            domain,
            discriminator,
            classifier,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn domains(&self) -> usize {
        self.spec.domains
    }

    fn check_domain(&self, i: usize) -> Result<()> {
        if i >= self.spec.domains {
            return Err(MranError::Usage(format!(
                "domain index {i} out of range for {} domains",
                self.spec.domains
            )));
        }
        Ok(())
    }

    pub fn forward_shared<'a>(&'a self, g: &mut Graph<'a>, x: Var, pass: &mut Pass<'_>) -> Result<Var> {
        let t = pass.trainable.features;
        self.shared.forward(g, x, pass, t)
    }

    pub fn forward_domain<'a>(
        &'a self,
        g: &mut Graph<'a>,
        i: usize,
        x: Var,
        pass: &mut Pass<'_>,
    ) -> Result<Var> {
        self.check_domain(i)?;
        let t = pass.trainable.features;
        self.domain[i].forward(g, x, pass, t)
    }

    /// Class log-probabilities from shared and private features.
    pub fn forward_classifier<'a>(
        &'a self,
        g: &mut Graph<'a>,
        shared: Var,
        domain_feat: Var,
        pass: &mut Pass<'_>,
    ) -> Result<Var> {
        let (ws, wd) = (g.value(shared).cols(), g.value(domain_feat).cols());
        if ws != self.spec.shared_dim || wd != self.spec.domain_dim {
            return Err(MranError::dim(
                "forward_classifier",
                &[ws, wd],
                &[self.spec.shared_dim, self.spec.domain_dim],
            ));
        }
        let joint = g.concat(shared, domain_feat)?;
        let t = pass.trainable.features;
        let logits = self.classifier.forward(g, joint, pass, t)?;
        g.log_softmax(logits)
    }

    /// Domain log-probabilities from shared features.
    pub fn forward_discriminator<'a>(
        &'a self,
        g: &mut Graph<'a>,
        shared: Var,
        pass: &mut Pass<'_>,
    ) -> Result<Var> {
        let t = pass.trainable.discriminator;
        let logits = self.discriminator.forward(g, shared, pass, t)?;
        g.log_softmax(logits)
    }

    /// `C(F_s(x) ++ F_d^i(x))` as log-probabilities.
    pub fn classify<'a>(&'a self, g: &mut Graph<'a>, i: usize, x: Var, pass: &mut Pass<'_>) -> Result<Var> {
        let s = self.forward_shared(g, x, pass)?;
        let d = self.forward_domain(g, i, x, pass)?;
        self.forward_classifier(g, s, d, pass)
    }

    /// Eval-mode class log-probabilities for a dense batch.
    pub fn class_log_probs(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let mut pass = Pass::eval(Trainable::NONE);
        let out = self.classify(&mut g, i, xv, &mut pass)?;
        Ok(g.value(out).clone())
    }

    /// Eval-mode domain log-probabilities of the shared features of `x`.
    pub fn domain_log_probs(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let mut pass = Pass::eval(Trainable::NONE);
        let s = self.forward_shared(&mut g, xv, &mut pass)?;
        let out = self.forward_discriminator(&mut g, s, &mut pass)?;
        Ok(g.value(out).clone())
    }

    /// Predicted class per row; ties go to class 0.
    pub fn predict(&self, i: usize, x: &Tensor) -> Result<Vec<usize>> {
        let lp = self.class_log_probs(i, x)?;
        Ok((0..lp.rows()).map(|r| argmax(lp.row(r))).collect())
    }

    /// All parameters ordered by id.
    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.shared.params().collect();
        for d in &self.domain {
            out.extend(d.params());
        }
        out.extend(self.discriminator.params());
        out.extend(self.classifier.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.shared.params_mut().collect();
        for d in &mut self.domain {
            out.extend(d.params_mut());
        }
        out.extend(self.discriminator.params_mut());
        out.extend(self.classifier.params_mut());
        out
    }

    pub fn component(&self, c: Component) -> &Mlp {
        match c {
            Component::Shared => &self.shared,
            Component::Domain(i) => &self.domain[i],
            Component::Discriminator => &self.discriminator,
            Component::Classifier => &self.classifier,
        }
    }

    pub fn component_tensors_mut(&mut self, c: Component) -> Vec<&mut Tensor> {
        let mlp = match c {
            Component::Shared => &mut self.shared,
            Component::Domain(i) => &mut self.domain[i],
            Component::Discriminator => &mut self.discriminator,
            Component::Classifier => &mut self.classifier,
        };
        mlp.params_mut().map(|p| &mut p.tensor).collect()
    }

    pub fn components(&self) -> Vec<Component> {
        let mut out = vec![Component::Shared];
        out.extend((0..self.spec.domains).map(Component::Domain));
        out.push(Component::Discriminator);
        out.push(Component::Classifier);
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Adds a backward sweep's parameter gradients into the grad buffers.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        let mut params = self.params_mut();
        for (id, g) in grads.param_grads() {
            let p = params
                .get_mut(id.0)
                .ok_or_else(|| MranError::Usage(format!("unknown parameter id {}", id.0)))?;
            p.tensor.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.tensor.len()).sum()
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{max_relative_error, numeric_gradient};
    use proptest::prelude::*;
    use rand::Rng;

    pub(crate) fn tiny_spec(domains: usize) -> ModelSpec {
        ModelSpec {
            domains,
            input_dim: 6,
            extractor_hidden: vec![7, 5],
            shared_dim: 4,
            domain_dim: 3,
            dropout: 0.0,
        }
    }

    fn random_input(seed: u64, rows: usize, cols: usize) -> Tensor {
        let mut rng = SeededRng::seed_from_u64(seed);
        let v = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, v).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = MranModel::init(tiny_spec(3), 11).unwrap();
        let b = MranModel::init(tiny_spec(3), 11).unwrap();
        for (p, q) in a.params().iter().zip(b.params()) {
            assert_eq!(p.tensor.values(), q.tensor.values());
        }
        let c = MranModel::init(tiny_spec(3), 12).unwrap();
        assert_ne!(a.params()[0].tensor.values(), c.params()[0].tensor.values());
    }

    #[test]
    fn rejects_single_domain() {
        assert!(matches!(
            MranModel::init(tiny_spec(1), 0),
            Err(MranError::Config(_))
        ));
    }

    #[test]
    fn default_layout_matches_reference_sizes() {
        let spec = ModelSpec::default();
        assert_eq!(spec.shared_spec().widths, vec![5000, 1000, 500, 128]);
        assert_eq!(spec.domain_spec().widths, vec![5000, 1000, 500, 64]);
        assert_eq!(spec.discriminator_spec().widths, vec![128, 128, 4]);
        assert_eq!(spec.classifier_spec().widths, vec![192, 192, 2]);
    }

    #[test]
    fn full_size_shared_extractor_shapes() {
        let m = MranModel::init(ModelSpec::default(), 1).unwrap();
        let shapes: Vec<_> = m.shared.layers.iter().map(|l| l.weight.tensor.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![5000, 1000], vec![1000, 500], vec![500, 128]]);
        assert_eq!(m.domain.len(), 4);
        assert_eq!(m.discriminator.output_width(), 4);
        assert_eq!(m.classifier.input_width(), 192);
        let bound = (6.0f64 / 6000.0).sqrt();
        assert!(m.shared.layers[0].weight.tensor.values().iter().all(|v| v.abs() <= bound));
        assert!(m.shared.layers[0].bias.tensor.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn param_ids_are_positions_and_partition() {
        let m = MranModel::init(tiny_spec(3), 2).unwrap();
        for (i, p) in m.params().iter().enumerate() {
            assert_eq!(p.id.0, i);
        }
        let total: usize = m.components().iter().map(|c| m.component(*c).params().count()).sum();
        assert_eq!(total, m.params().len());
        let names: std::collections::HashSet<_> = m.params().iter().map(|p| p.name.clone()).collect();
        assert_eq!(names.len(), m.params().len());
    }

    #[test]
    fn zero_input_gives_zero_shared_output() {
        let m = MranModel::init(tiny_spec(2), 3).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![3, 6]).unwrap());
        let mut pass = Pass::eval(Trainable::NONE);
        let s = m.forward_shared(&mut g, x, &mut pass).unwrap();
        assert_eq!(g.value(s).shape(), &[3, 4]);
        assert!(g.value(s).values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_shapes_and_errors() {
        let m = MranModel::init(tiny_spec(3), 4).unwrap();
        let x = random_input(1, 5, 6);
        let mut g = Graph::new();
        let xv = g.input(x);
        let mut pass = Pass::eval(Trainable::NONE);
        let d = m.forward_domain(&mut g, 2, xv, &mut pass).unwrap();
        assert_eq!(g.value(d).shape(), &[5, 3]);
        assert!(matches!(
            m.forward_domain(&mut g, 3, xv, &mut pass),
            Err(MranError::Usage(_))
        ));
        let s = m.forward_shared(&mut g, xv, &mut pass).unwrap();
        let lp = m.forward_discriminator(&mut g, s, &mut pass).unwrap();
        assert_eq!(g.value(lp).shape(), &[5, 3]);
        let c = m.forward_classifier(&mut g, s, d, &mut pass).unwrap();
        assert_eq!(g.value(c).shape(), &[5, 2]);
        for r in 0..5 {
            let total: f64 = g.value(c).row(r).iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert!(m.forward_classifier(&mut g, d, s, &mut pass).is_err());
        let wide = g.input(Tensor::zeros(vec![2, 7]).unwrap());
        assert!(matches!(
            m.forward_shared(&mut g, wide, &mut pass),
            Err(MranError::Dimension { .. })
        ));
    }

    #[test]
    fn domain_extractors_differ() {
        let m = MranModel::init(tiny_spec(3), 5).unwrap();
        let x = random_input(2, 4, 6);
        let mut g = Graph::new();
        let xv = g.input(x);
        let mut pass = Pass::eval(Trainable::NONE);
        let a = m.forward_domain(&mut g, 0, xv, &mut pass).unwrap();
        let b = m.forward_domain(&mut g, 1, xv, &mut pass).unwrap();
        assert_ne!(g.value(a).values(), g.value(b).values());
    }

    #[test]
    fn eval_is_deterministic_even_with_dropout() {
        let mut spec = tiny_spec(2);
        spec.dropout = 0.4;
        let m = MranModel::init(spec, 6).unwrap();
        let x = random_input(3, 4, 6);
        assert_eq!(m.class_log_probs(1, &x).unwrap(), m.class_log_probs(1, &x).unwrap());
        assert_eq!(m.domain_log_probs(&x).unwrap(), m.domain_log_probs(&x).unwrap());
    }

    #[test]
    fn uniform_discriminator_gives_log_quarter() {
        let mut m = MranModel::init(tiny_spec(4), 7).unwrap();
        for p in m.discriminator.params_mut() {
            p.tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let lp = m.domain_log_probs(&random_input(4, 3, 6)).unwrap();
        for v in lp.values() {
            assert!((v + 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_tie_breaks_to_zero() {
        assert_eq!(argmax(&[-0.1, -2.3]), 0);
        assert_eq!(argmax(&[-0.7, -0.7]), 0);
        assert_eq!(argmax(&[-2.0, -0.1]), 1);
    }

    proptest! {
        #[test]
        fn argmax_invariant_under_monotone_maps(a in -50.0f64..50.0, b in -50.0f64..50.0, scale in 0.01f64..10.0, shift in -100.0f64..100.0) {
            let f = |v: f64| (v * scale + shift).tanh() * 3.0 + v * 1e-3;
            prop_assert_eq!(argmax(&[a, b]), argmax(&[f(a), f(b)]));
        }
    }

    fn classification_loss(m: &MranModel, i: usize, x: &Tensor, y: &Tensor) -> (f64, Gradients) {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let mut pass = Pass::eval(Trainable::ALL);
        let lp = m.classify(&mut g, i, xv, &mut pass).unwrap();
        let l = g.nll_soft(lp, y).unwrap();
        let v = g.scalar(l).unwrap();
        (v, g.backward(l).unwrap())
    }

    #[test]
    fn gradient_routing() {
        let mut m = MranModel::init(tiny_spec(3), 8).unwrap();
        let x = random_input(5, 4, 6);
        let y = Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let (_, grads) = classification_loss(&m, 1, &x, &y);
        m.zero_grad();
        m.accumulate(&grads).unwrap();
        let nonzero = |c: Component, m: &MranModel| {
            m.component(c)
                .params()
                .any(|p| p.tensor.grad().unwrap().iter().any(|g| *g != 0.0))
        };
        assert!(nonzero(Component::Shared, &m));
        assert!(nonzero(Component::Domain(1), &m));
        assert!(nonzero(Component::Classifier, &m));
        assert!(!nonzero(Component::Domain(0), &m));
        assert!(!nonzero(Component::Domain(2), &m));
        assert!(!nonzero(Component::Discriminator, &m));
    }

    #[test]
    fn classification_gradient_matches_oracle() {
        let m = MranModel::init(tiny_spec(2), 9).unwrap();
        let x = random_input(6, 3, 6);
        let y = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.3, 0.7]).unwrap();
        let (_, grads) = classification_loss(&m, 0, &x, &y);
        for (id, analytic) in grads.param_grads() {
            let numeric = numeric_gradient(m.params()[id.0].tensor.values(), 1e-5, |vals| {
                let mut probe = m.clone();
                probe.params_mut()[id.0].tensor.values_mut().copy_from_slice(vals);
                Ok(classification_loss(&probe, 0, &x, &y).0)
            })
            .unwrap();
            let err = max_relative_error(analytic, &numeric);
            assert!(err < 1e-4, "{}: {err}", m.params()[id.0].name);
        }
    }
}
