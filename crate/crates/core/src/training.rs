//! Alternating min-max optimisation.
//!
//! Each training step draws one batch per domain, runs `k_d` discriminator
//! updates on the domain-classification loss with the shared features held
//! fixed, then one update of the extractors and the classifier on
//!
//! ```text
//! L_c + λ_a·L_a + λ_u·L_u − λ_d·(L_adv + λ_m·L_adv_mix)
//! ```
//!
//! with the discriminator frozen. Every term is always evaluated (so random
//! streams advance identically across ablations); terms whose weight is zero
//! are simply not connected to the objective.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{densify, SparseExample, SplitData};
use crate::error::{MranError, Result};
use crate::mixup::{
    adversarial_loss, classification_loss, domain_mixup_adv_loss, labeled_category_mixup_loss, one_hot,
    pair_permutation, sample_lambda, unlabeled_consistency_loss, MixPair,
};
use crate::model::{argmax, Component, ModelSpec, MranModel, Pass, Trainable, NUM_CLASSES};
use crate::optim::{AdamConfig, AdamState};
use crate::SeededRng;

/// Objective weights. A weight of exactly zero disconnects its term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_a: f64,
    pub lambda_u: f64,
    pub lambda_m: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_d: 1.0,
            lambda_a: 0.001,
            lambda_u: 0.1,
            lambda_m: 0.00001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_d, self.lambda_a, self.lambda_u, self.lambda_m];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(MranError::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }

    /// Same weights with every mixup term switched off.
    pub fn without_mixup(self) -> Self {
        LossWeights {
            lambda_a: 0.0,
            lambda_u: 0.0,
            lambda_m: 0.0,
            ..self
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Discriminator updates per feature update.
    pub k_d: usize,
    pub alpha: f64,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub per_pair_lambda: bool,
    pub consistency_target_grad: bool,
    pub log_counts: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            max_epochs: 50,
            k_d: 5,
            alpha: 0.2,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            per_pair_lambda: false,
            consistency_target_grad: false,
            log_counts: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(MranError::Config("batch_size must be at least 1".into()));
        }
        if self.k_d == 0 {
            return Err(MranError::Config("k_d must be at least 1".into()));
        }
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return Err(MranError::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        self.weights.validate()
    }
}

/// One domain's share of a training step. Rows of each pool are paired with
/// the rows given by the matching permutation for mixup.
#[derive(Clone, Debug)]
pub struct Batch {
    pub domain: usize,
    pub labeled_x: Tensor,
    pub labeled_y: Vec<usize>,
    pub labeled_perm: Vec<usize>,
    pub labeled_lambdas: Vec<f64>,
    /// Drawn from labelled plus unlabeled instances.
    pub adv_x: Tensor,
    pub adv_perm: Vec<usize>,
    pub adv_lambdas: Vec<f64>,
    pub unlabeled_x: Tensor,
    pub unlabeled_perm: Vec<usize>,
    pub unlabeled_lambdas: Vec<f64>,
}

impl Batch {
    pub fn labeled_pair(&self) -> Result<MixPair> {
        let y = one_hot(&self.labeled_y, NUM_CLASSES)?;
        let ys = y.select_rows(&self.labeled_perm)?;
        MixPair::from_permutation(self.domain, &self.labeled_x, &self.labeled_perm, self.labeled_lambdas.clone())?
            .with_labels(y, ys)
    }

    pub fn unlabeled_pair(&self) -> Result<MixPair> {
        MixPair::from_permutation(
            self.domain,
            &self.unlabeled_x,
            &self.unlabeled_perm,
            self.unlabeled_lambdas.clone(),
        )
    }

    pub fn adv_pair(&self) -> Result<MixPair> {
        MixPair::from_permutation(self.domain, &self.adv_x, &self.adv_perm, self.adv_lambdas.clone())
    }
}

fn check_batches(model: &MranModel, batches: &[Batch]) -> Result<()> {
    if batches.len() != model.domains() {
        return Err(MranError::Usage(format!(
            "a step needs one batch per domain ({}), got {}",
            model.domains(),
            batches.len()
        )));
    }
    for (i, b) in batches.iter().enumerate() {
        if b.domain != i {
            return Err(MranError::Usage(format!("batch {i} belongs to domain {}", b.domain)));
        }
    }
    Ok(())
}

/// Graph handles of the discriminator objective.
pub struct DiscriminatorTerms {
    pub total: Var,
    pub plain: Var,
    pub mixed: Var,
    /// Per-domain log-probabilities of the plain adversarial batches.
    pub log_probs: Vec<Var>,
}

/// `L_adv + λ_m·L_adv_mix` on the adversarial pools.
pub fn discriminator_objective<'a>(
    g: &mut Graph<'a>,
    model: &'a MranModel,
    batches: &[Batch],
    weights: &LossWeights,
    pass: &mut Pass<'_>,
) -> Result<DiscriminatorTerms> {
    check_batches(model, batches)?;
    let mut plain_terms = Vec::with_capacity(batches.len());
    let mut log_probs = Vec::with_capacity(batches.len());
    for b in batches {
        let x = g.input(b.adv_x.clone());
        let s = model.forward_shared(g, x, pass)?;
        let lp = model.forward_discriminator(g, s, pass)?;
        let target = one_hot(&vec![b.domain; b.adv_x.rows()], model.domains())?;
        plain_terms.push(g.nll_soft(lp, &target)?);
        log_probs.push(lp);
    }
    let plain = g.add_all(&plain_terms)?;
    let pairs = batches.iter().map(Batch::adv_pair).collect::<Result<Vec<_>>>()?;
    let mixed = domain_mixup_adv_loss(g, model, &pairs, pass)?;
    let total = if weights.lambda_m > 0.0 {
        let w = g.scale(mixed, weights.lambda_m);
        g.add(plain, w)?
    } else {
        plain
    };
    Ok(DiscriminatorTerms {
        total,
        plain,
        mixed,
        log_probs,
    })
}

/// Graph handles of the feature-side objective.
pub struct FeatureTerms {
    pub total: Var,
    pub l_c: Var,
    pub l_a: Var,
    pub l_u: Var,
    pub l_adv: Var,
    pub l_adv_m: Var,
}

/// `L_c + λ_a·L_a + λ_u·L_u − λ_d·(L_adv + λ_m·L_adv_mix)`.
pub fn feature_objective<'a>(
    g: &mut Graph<'a>,
    model: &'a MranModel,
    batches: &[Batch],
    weights: &LossWeights,
    pass: &mut Pass<'_>,
    consistency_target_grad: bool,
) -> Result<FeatureTerms> {
    check_batches(model, batches)?;
    let mut c_terms = Vec::new();
    let mut a_terms = Vec::new();
    let mut u_terms = Vec::new();
    for b in batches {
        let y = one_hot(&b.labeled_y, NUM_CLASSES)?;
        c_terms.push(classification_loss(g, model, b.domain, &b.labeled_x, &y, pass)?);
        a_terms.push(labeled_category_mixup_loss(g, model, &b.labeled_pair()?, pass)?);
        u_terms.push(unlabeled_consistency_loss(
            g,
            model,
            &b.unlabeled_pair()?,
            pass,
            consistency_target_grad,
        )?);
    }
    let l_c = g.add_all(&c_terms)?;
    let l_a = g.add_all(&a_terms)?;
    let l_u = g.add_all(&u_terms)?;
    let adv: Vec<Tensor> = batches.iter().map(|b| b.adv_x.clone()).collect();
    let l_adv = adversarial_loss(g, model, &adv, pass)?;
    let pairs = batches.iter().map(Batch::adv_pair).collect::<Result<Vec<_>>>()?;
    let l_adv_m = domain_mixup_adv_loss(g, model, &pairs, pass)?;

    let mut parts = vec![l_c];
    if weights.lambda_a > 0.0 {
        parts.push(g.scale(l_a, weights.lambda_a));
    }
    if weights.lambda_u > 0.0 {
        parts.push(g.scale(l_u, weights.lambda_u));
    }
    if weights.lambda_d > 0.0 {
        let disc = if weights.lambda_m > 0.0 {
            let w = g.scale(l_adv_m, weights.lambda_m);
            g.add(l_adv, w)?
        } else {
            l_adv
        };
        parts.push(g.scale(disc, -weights.lambda_d));
    }
    let total = g.add_all(&parts)?;
    Ok(FeatureTerms {
        total,
        l_c,
        l_a,
        l_u,
        l_adv,
        l_adv_m,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DiscriminatorStep {
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

/// Values of every term of one feature update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_a: f64,
    pub l_u: f64,
    pub l_adv: f64,
    pub l_adv_m: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        [self.l_c, self.l_a, self.l_u, self.l_adv, self.l_adv_m, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochMetrics {
    pub steps: usize,
    pub losses: LossBreakdown,
    pub d_loss: f64,
    pub d_accuracy: f64,
}

/// Reshuffling cyclic sampler over one pool.
#[derive(Clone, Debug)]
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(len: usize, rng: &mut SeededRng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        Cycler { order, pos: 0 }
    }

    fn take(&mut self, n: usize, rng: &mut SeededRng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Per-domain samplers for the labelled, adversarial and unlabeled pools.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    labeled: Vec<Cycler>,
    adv: Vec<Cycler>,
    unlabeled: Vec<Cycler>,
}

fn adv_pool(d: &crate::data::DomainSplit) -> Vec<&SparseExample> {
    let mut pool: Vec<&SparseExample> = d.train.iter().collect();
    if !d.unlabeled_from_train {
        pool.extend(&d.unlabeled);
    }
    pool
}

/// Independent random streams of one run.
#[derive(Clone, Debug)]
pub struct RunRngs {
    pub data: SeededRng,
    pub dropout: SeededRng,
    pub mixup: SeededRng,
}

impl RunRngs {
    pub fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = SeededRng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        RunRngs {
            data: stream(1),
            dropout: stream(2),
            mixup: stream(3),
        }
    }

    /// Stream used for parameter initialisation.
    pub fn init_stream(seed: u64) -> SeededRng {
        let mut r = SeededRng::seed_from_u64(seed);
        r.set_stream(0);
        r
    }
}

/// Model, optimiser states (one per component), counters and random streams.
pub struct TrainState {
    pub model: MranModel,
    pub config: TrainConfig,
    optimizers: Vec<(Component, AdamState)>,
    pub step: u64,
    pub epoch: usize,
    pub rngs: RunRngs,
}

impl TrainState {
    pub fn new(spec: ModelSpec, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let model = MranModel::init_with(spec, &mut RunRngs::init_stream(seed))?;
        Ok(TrainState::from_model(model, config, seed))
    }

    pub fn from_model(model: MranModel, config: TrainConfig, seed: u64) -> Self {
        let optimizers = model
            .components()
            .into_iter()
            .map(|c| (c, AdamState::new(config.adam.clone())))
            .collect();
        TrainState {
            model,
            config,
            optimizers,
            step: 0,
            epoch: 0,
            rngs: RunRngs::new(seed),
        }
    }

    fn step_components(&mut self, which: impl Fn(Component) -> bool) -> Result<()> {
        for (c, opt) in self.optimizers.iter_mut().filter(|(c, _)| which(*c)) {
            let mut tensors = self.model.component_tensors_mut(*c);
            opt.step(&mut tensors)?;
        }
        Ok(())
    }

    fn zero_components(&mut self, which: impl Fn(Component) -> bool) {
        for c in self.model.components().into_iter().filter(|c| which(*c)) {
            for t in self.model.component_tensors_mut(c) {
                t.zero_grad();
            }
        }
    }

    pub fn sampler(&mut self, data: &SplitData) -> Result<BatchSampler> {
        if data.num_domains() != self.model.domains() {
            return Err(MranError::Usage(format!(
                "data has {} domains, model has {}",
                data.num_domains(),
                self.model.domains()
            )));
        }
        let rng = &mut self.rngs.data;
        let mut s = BatchSampler {
            labeled: Vec::new(),
            adv: Vec::new(),
            unlabeled: Vec::new(),
        };
        for d in &data.domains {
            if d.train.is_empty() || d.unlabeled.is_empty() {
                return Err(MranError::Usage(format!("domain `{}` has an empty training pool", d.name)));
            }
            s.labeled.push(Cycler::new(d.train.len(), rng));
            s.adv.push(Cycler::new(adv_pool(d).len(), rng));
            s.unlabeled.push(Cycler::new(d.unlabeled.len(), rng));
        }
        Ok(s)
    }

    /// Draws one batch per domain together with the step's mixing coefficients.
    pub fn draw_batches(&mut self, sampler: &mut BatchSampler, data: &SplitData) -> Result<Vec<Batch>> {
        let n = self.config.batch_size;
        let alpha = self.config.alpha;
        let per_pair = self.config.per_pair_lambda;
        let shared = sample_lambda(alpha, &mut self.rngs.mixup)?;
        let log_counts = self.config.log_counts;
        let lambdas = |rng: &mut SeededRng| -> Result<Vec<f64>> {
            if per_pair {
                (0..n).map(|_| sample_lambda(alpha, rng)).collect()
            } else {
                Ok(vec![shared; n])
            }
        };
        let mut out = Vec::with_capacity(data.num_domains());
        for (i, d) in data.domains.iter().enumerate() {
            let rng = &mut self.rngs.data;
            let li = sampler.labeled[i].take(n, rng);
            let ai = sampler.adv[i].take(n, rng);
            let ui = sampler.unlabeled[i].take(n, rng);
            let labeled: Vec<&SparseExample> = li.iter().map(|&j| &d.train[j]).collect();
            let pool = adv_pool(d);
            let adv: Vec<&SparseExample> = ai.iter().map(|&j| pool[j]).collect();
            let unl: Vec<&SparseExample> = ui.iter().map(|&j| &d.unlabeled[j]).collect();
            let labeled_y = labeled
                .iter()
                .map(|e| e.label.ok_or_else(|| MranError::Validation("unlabelled training example".into())))
                .collect::<Result<Vec<_>>>()?;
            let mix = &mut self.rngs.mixup;
            out.push(Batch {
                domain: i,
                labeled_x: densify(&labeled, data.dim, log_counts)?,
                labeled_y,
                labeled_perm: pair_permutation(n, mix),
                labeled_lambdas: lambdas(mix)?,
                adv_x: densify(&adv, data.dim, log_counts)?,
                adv_perm: pair_permutation(n, mix),
                adv_lambdas: lambdas(mix)?,
                unlabeled_x: densify(&unl, data.dim, log_counts)?,
                unlabeled_perm: pair_permutation(n, mix),
                unlabeled_lambdas: lambdas(mix)?,
            });
        }
        Ok(out)
    }

    /// One update of the discriminator only; shared features are constants.
    pub fn discriminator_step(&mut self, batches: &[Batch]) -> Result<DiscriminatorStep> {
        self.zero_components(|c| c == Component::Discriminator);
        let weights = self.config.weights;
        let (result, grads) = {
            let mut g = Graph::new();
            let mut pass = Pass::train(&mut self.rngs.dropout, Trainable::DISCRIMINATOR);
            let terms = discriminator_objective(&mut g, &self.model, batches, &weights, &mut pass)?;
            let mut correct = 0;
            let mut total = 0;
            for (i, lp) in terms.log_probs.iter().enumerate() {
                let t = g.value(*lp);
                for r in 0..t.rows() {
                    correct += usize::from(argmax(t.row(r)) == i);
                    total += 1;
                }
            }
            let step = DiscriminatorStep {
                loss: g.scalar(terms.total)?,
                correct,
                total,
            };
            let grads = g.backward(terms.total)?;
            if weights.lambda_m == 0.0 && grads.reached(terms.mixed) {
                return Err(MranError::Usage("disabled domain mixup term reached the objective".into()));
            }
            (step, grads)
        };
        self.model.accumulate(&grads)?;
        self.step_components(|c| c == Component::Discriminator)?;
        Ok(result)
    }

    /// One update of the extractors and the classifier with the
    /// discriminator frozen.
    pub fn main_step(&mut self, batches: &[Batch]) -> Result<LossBreakdown> {
        let features = |c: Component| c != Component::Discriminator;
        self.zero_components(features);
        let weights = self.config.weights;
        let target_grad = self.config.consistency_target_grad;
        let (breakdown, grads) = {
            let mut g = Graph::new();
            let mut pass = Pass::train(&mut self.rngs.dropout, Trainable::FEATURES);
            let t = feature_objective(&mut g, &self.model, batches, &weights, &mut pass, target_grad)?;
            let grads = g.backward(t.total)?;
            let isolated = [
                (weights.lambda_a, t.l_a, "l_a"),
                (weights.lambda_u, t.l_u, "l_u"),
                (weights.lambda_d * weights.lambda_m, t.l_adv_m, "l_adv_m"),
                (weights.lambda_d, t.l_adv, "l_adv"),
            ];
            for (w, v, name) in isolated {
                if w == 0.0 && grads.reached(v) {
                    return Err(MranError::Usage(format!("term {name} has weight 0 but contributes gradient")));
                }
            }
            let b = LossBreakdown {
                l_c: g.scalar(t.l_c)?,
                l_a: g.scalar(t.l_a)?,
                l_u: g.scalar(t.l_u)?,
                l_adv: g.scalar(t.l_adv)?,
                l_adv_m: g.scalar(t.l_adv_m)?,
                total: g.scalar(t.total)?,
            };
            (b, grads)
        };
        self.model.accumulate(&grads)?;
        self.step_components(features)?;
        self.step += 1;
        Ok(breakdown)
    }

    /// Steps until the largest labelled pool has been seen once.
    pub fn train_epoch(&mut self, data: &SplitData) -> Result<EpochMetrics> {
        let mut sampler = self.sampler(data)?;
        let largest = data.domains.iter().map(|d| d.train.len()).max().unwrap_or(0);
        let steps = largest.div_ceil(self.config.batch_size);
        let mut m = EpochMetrics::default();
        let (mut d_correct, mut d_total, mut d_loss_sum, mut d_steps) = (0, 0, 0.0, 0);
        for _ in 0..steps {
            let batches = self.draw_batches(&mut sampler, data)?;
            for _ in 0..self.config.k_d {
                let d = self.discriminator_step(&batches)?;
                d_correct += d.correct;
                d_total += d.total;
                d_loss_sum += d.loss;
                d_steps += 1;
            }
            let b = self.main_step(&batches)?;
            m.losses.l_c += b.l_c;
            m.losses.l_a += b.l_a;
            m.losses.l_u += b.l_u;
            m.losses.l_adv += b.l_adv;
            m.losses.l_adv_m += b.l_adv_m;
            m.losses.total += b.total;
        }
        if steps > 0 {
            let n = steps as f64;
            m.losses.l_c /= n;
            m.losses.l_a /= n;
            m.losses.l_u /= n;
            m.losses.l_adv /= n;
            m.losses.l_adv_m /= n;
            m.losses.total /= n;
            m.d_loss = d_loss_sum / d_steps as f64;
            m.d_accuracy = d_correct as f64 / d_total as f64;
        }
        m.steps = steps;
        self.epoch += 1;
        Ok(m)
    }
}

/// Per-domain accuracy (fractions) and their unweighted mean.
#[derive(Clone, Debug, PartialEq)]
pub struct Accuracy {
    pub per_domain: Vec<f64>,
    pub average: f64,
}

impl Accuracy {
    pub fn from_per_domain(per_domain: Vec<f64>) -> Self {
        let average = mean(&per_domain);
        Accuracy { per_domain, average }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

const EVAL_CHUNK: usize = 256;

/// Eval-mode sentiment accuracy of each domain's own path.
pub fn evaluate(model: &MranModel, sets: &[&[SparseExample]], dim: usize, log_counts: bool) -> Result<Accuracy> {
    if sets.is_empty() || sets.iter().any(|s| s.is_empty()) {
        return Err(MranError::Usage("evaluation needs a non-empty split for every domain".into()));
    }
    let mut per_domain = Vec::with_capacity(sets.len());
    for (i, set) in sets.iter().enumerate() {
        let mut correct = 0;
        for chunk in set.chunks(EVAL_CHUNK) {
            let refs: Vec<&SparseExample> = chunk.iter().collect();
            let x = densify(&refs, dim, log_counts)?;
            let pred = model.predict(i, &x)?;
            for (p, ex) in pred.iter().zip(chunk) {
                let y = ex
                    .label
                    .ok_or_else(|| MranError::Usage("evaluation split contains unlabelled examples".into()))?;
                correct += usize::from(*p == y);
            }
        }
        per_domain.push(correct as f64 / set.len() as f64);
    }
    Ok(Accuracy::from_per_domain(per_domain))
}

/// Eval-mode accuracy of the discriminator at telling domains apart, pooled
/// over all examples.
pub fn domain_accuracy(model: &MranModel, sets: &[&[SparseExample]], dim: usize, log_counts: bool) -> Result<f64> {
    let (mut correct, mut total) = (0usize, 0usize);
    for (i, set) in sets.iter().enumerate() {
        for chunk in set.chunks(EVAL_CHUNK) {
            let refs: Vec<&SparseExample> = chunk.iter().collect();
            let x = densify(&refs, dim, log_counts)?;
            let lp = model.domain_log_probs(&x)?;
            correct += (0..lp.rows()).filter(|&r| argmax(lp.row(r)) == i).count();
            total += chunk.len();
        }
    }
    if total == 0 {
        return Err(MranError::Usage("domain accuracy of an empty split".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Append-only `epoch,phase,domain,metric,value` stream.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W) -> std::io::Result<Self> {
        writeln!(out, "epoch,phase,domain,metric,value")?;
        Ok(MetricsWriter { out })
    }

    pub fn record(&mut self, epoch: usize, phase: &str, domain: &str, metric: &str, value: f64) -> std::io::Result<()> {
        writeln!(self.out, "{epoch},{phase},{domain},{metric},{value}")
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: Option<EpochMetrics>,
    pub valid: Accuracy,
}

pub struct FitResult {
    pub model: MranModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid: Accuracy,
    pub test: Accuracy,
}

fn write_accuracy<W: Write>(
    w: &mut MetricsWriter<W>,
    epoch: usize,
    phase: &str,
    names: &[String],
    acc: &Accuracy,
) -> std::io::Result<()> {
    for (name, a) in names.iter().zip(&acc.per_domain) {
        w.record(epoch, phase, name, "accuracy", *a)?;
    }
    w.record(epoch, phase, "AVG", "accuracy", acc.average)
}

fn io_err(e: std::io::Error) -> MranError {
    MranError::io("metrics stream", e)
}

/// Trains for up to `max_epochs`, keeping the snapshot with the best
/// validation average (epoch 0 is the initial model), and reports its test
/// accuracy.
pub fn fit<W: Write>(
    spec: ModelSpec,
    config: &TrainConfig,
    data: &SplitData,
    seed: u64,
    mut metrics: Option<&mut MetricsWriter<W>>,
) -> Result<FitResult> {
    let mut state = TrainState::new(spec, config.clone(), seed)?;
    let names: Vec<String> = data.domains.iter().map(|d| d.name.clone()).collect();
    let valid: Vec<&[SparseExample]> = data.domains.iter().map(|d| d.valid.as_slice()).collect();
    let test: Vec<&[SparseExample]> = data.domains.iter().map(|d| d.test.as_slice()).collect();

    let v0 = evaluate(&state.model, &valid, data.dim, config.log_counts)?;
    if let Some(w) = metrics.as_deref_mut() {
        write_accuracy(w, 0, "valid", &names, &v0).map_err(io_err)?;
        w.flush().map_err(io_err)?;
    }
    let mut best = (0, v0.clone(), state.model.clone());
    let mut history = vec![EpochRecord {
        epoch: 0,
        train: None,
        valid: v0,
    }];
    for epoch in 1..=config.max_epochs {
        let m = state.train_epoch(data)?;
        let v = evaluate(&state.model, &valid, data.dim, config.log_counts)?;
        if let Some(w) = metrics.as_deref_mut() {
            let l = &m.losses;
            for (name, value) in [
                ("l_c", l.l_c),
                ("l_a", l.l_a),
                ("l_u", l.l_u),
                ("l_adv", l.l_adv),
                ("l_adv_m", l.l_adv_m),
                ("l_total", l.total),
                ("d_loss", m.d_loss),
                ("d_accuracy", m.d_accuracy),
            ] {
                w.record(epoch, "train", "all", name, value).map_err(io_err)?;
            }
            write_accuracy(w, epoch, "valid", &names, &v).map_err(io_err)?;
            w.flush().map_err(io_err)?;
        }
        if v.average > best.1.average {
            best = (epoch, v.clone(), state.model.clone());
        }
        history.push(EpochRecord {
            epoch,
            train: Some(m),
            valid: v,
        });
    }
    let (best_epoch, best_valid, model) = best;
    let test = evaluate(&model, &test, data.dim, config.log_counts)?;
    if let Some(w) = metrics {
        write_accuracy(w, best_epoch, "test", &names, &test).map_err(io_err)?;
        w.flush().map_err(io_err)?;
    }
    Ok(FitResult {
        model,
        history,
        best_epoch,
        best_valid,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_folds, split, synth_generate, SynthParams};

    fn tiny_spec(domains: usize, input_dim: usize) -> ModelSpec {
        ModelSpec {
            domains,
            input_dim,
            extractor_hidden: vec![16, 12],
            shared_dim: 8,
            domain_dim: 4,
            dropout: 0.0,
        }
    }

    fn tiny_data(domains: usize, shift: f64, seed: u64) -> SplitData {
        let p = SynthParams {
            domains,
            n_labeled: 40,
            n_unlabeled: 20,
            dim: 8,
            shared_signal: 2.0,
            domain_shift: shift,
            noise: 0.5,
        };
        let ds = synth_generate(&p, seed).unwrap();
        let plan = make_folds(&ds, seed).unwrap();
        split(&ds, &plan, 0)
    }

    fn config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            max_epochs: 2,
            k_d: 2,
            adam: AdamConfig {
                learning_rate: 1e-3,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn averages_match_reference_table() {
        let acc = Accuracy::from_per_domain(vec![84.60, 85.60, 89.10, 91.25]);
        assert!((acc.average - 87.64).abs() < 0.005);
        assert_eq!(std_dev(&[1.0]), 0.0);
        assert!((std_dev(&[1.0, 3.0]) - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn evaluate_constant_predictor_and_errors() {
        let mut m = MranModel::init(tiny_spec(2, 8), 0).unwrap();
        // bias the classifier output towards class 0
        for p in m.classifier.params_mut() {
            p.tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let last = m.classifier.layers.last_mut().unwrap();
        last.bias.tensor.values_mut()[0] = 1.0;
        let data = tiny_data(2, 1.0, 1);
        let sets: Vec<&[SparseExample]> = data.domains.iter().map(|d| d.test.as_slice()).collect();
        let acc = evaluate(&m, &sets, 8, false).unwrap();
        assert_eq!(acc.per_domain, vec![0.5, 0.5]);
        assert_eq!(acc, evaluate(&m, &sets, 8, false).unwrap());
        let empty: Vec<&[SparseExample]> = vec![&[], &[]];
        assert!(matches!(evaluate(&m, &empty, 8, false), Err(MranError::Usage(_))));
    }

    #[test]
    fn step_requires_every_domain() {
        let data = tiny_data(3, 1.0, 2);
        let mut st = TrainState::new(tiny_spec(3, 8), config(), 3).unwrap();
        let mut sampler = st.sampler(&data).unwrap();
        let batches = st.draw_batches(&mut sampler, &data).unwrap();
        assert!(matches!(st.discriminator_step(&batches[..2]), Err(MranError::Usage(_))));
        assert!(matches!(st.main_step(&batches[1..]), Err(MranError::Usage(_))));
    }

    #[test]
    fn fresh_discriminator_is_near_uniform() {
        let data = tiny_data(4, 1.0, 4);
        let mut st = TrainState::new(tiny_spec(4, 8), config(), 5).unwrap();
        let mut sampler = st.sampler(&data).unwrap();
        let batches = st.draw_batches(&mut sampler, &data).unwrap();
        let d = st.discriminator_step(&batches).unwrap();
        // four domains, each contributing about ln 4
        let per_domain = d.loss / 4.0;
        assert!((per_domain - 4f64.ln()).abs() < 0.5, "{per_domain}");
    }

    #[test]
    fn breakdown_is_finite_and_runs_are_deterministic() {
        let data = tiny_data(2, 1.0, 6);
        let run = || {
            let mut st = TrainState::new(tiny_spec(2, 8), config(), 7).unwrap();
            (0..2).map(|_| st.train_epoch(&data).unwrap()).collect::<Vec<_>>()
        };
        let a = run();
        assert!(a.iter().all(|m| m.losses.all_finite()));
        assert_eq!(a, run());
    }

    #[test]
    fn unequal_pools_still_serve_every_domain() {
        let mut data = tiny_data(2, 1.0, 8);
        data.domains[1].train.truncate(3);
        let mut st = TrainState::new(tiny_spec(2, 8), config(), 9).unwrap();
        let m = st.train_epoch(&data).unwrap();
        assert_eq!(m.steps, data.domains[0].train.len().div_ceil(4));
    }

    #[test]
    fn fit_with_zero_epochs_returns_initial_model() {
        let data = tiny_data(2, 1.0, 10);
        let mut cfg = config();
        cfg.max_epochs = 0;
        let r = fit::<Vec<u8>>(tiny_spec(2, 8), &cfg, &data, 11, None).unwrap();
        let init = MranModel::init_with(tiny_spec(2, 8), &mut RunRngs::init_stream(11)).unwrap();
        assert_eq!(r.best_epoch, 0);
        assert_eq!(r.history.len(), 1);
        for (p, q) in r.model.params().iter().zip(init.params()) {
            assert_eq!(p.tensor.values(), q.tensor.values());
        }
    }

    #[test]
    fn fit_bookkeeping_and_metrics_stream() {
        let data = tiny_data(2, 1.0, 12);
        let mut w = MetricsWriter::new(Vec::new()).unwrap();
        let r = fit(tiny_spec(2, 8), &config(), &data, 13, Some(&mut w)).unwrap();
        let best = r.history.iter().map(|h| h.valid.average).fold(f64::MIN, f64::max);
        assert_eq!(r.best_valid.average, best);
        assert_eq!(r.history[r.best_epoch].valid, r.best_valid);
        let text = String::from_utf8(w.into_inner()).unwrap();
        assert!(text.starts_with("epoch,phase,domain,metric,value\n"));
        assert!(text.contains("1,train,all,l_c,"));
        assert!(text.lines().any(|l| l.contains(",test,AVG,accuracy,")));
    }

    #[test]
    fn supervised_only_training_fits_separable_data() {
        let data = tiny_data(2, 0.5, 14);
        let cfg = TrainConfig {
            weights: LossWeights {
                lambda_d: 0.0,
                lambda_a: 0.0,
                lambda_u: 0.0,
                lambda_m: 0.0,
            },
            k_d: 1,
            ..config()
        };
        let mut st = TrainState::new(tiny_spec(2, 8), cfg, 15).unwrap();
        let mut last = f64::MAX;
        for _ in 0..40 {
            last = st.train_epoch(&data).unwrap().losses.l_c;
        }
        // summed over two domains
        assert!(last / 2.0 < 0.1, "final loss {last}");
    }
}
