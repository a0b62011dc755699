//! Central-difference verification of every loss term on a tiny model.
//!
//! Each term is evaluated without dropout on fixed random batches; its
//! analytic gradient with respect to all parameters (or, for `mix_input`,
//! the endpoint inputs of a labelled pair) is compared with central
//! differences.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::autodiff::{max_relative_error, numeric_gradient, Gradients, Graph, Tensor, Var};
use crate::error::{MranError, Result};
use crate::mixup::{
    adversarial_loss, classification_loss, domain_mixup_adv_loss, labeled_category_mixup_loss, one_hot,
    interpolate_rows, pair_permutation, unlabeled_consistency_loss, MixPair,
};
use crate::model::{Mlp, ModelSpec, MranModel, Pass, Trainable, NUM_CLASSES};
use crate::training::{discriminator_objective, feature_objective, Batch, LossWeights};
use crate::SeededRng;

pub const STEP: f64 = 1e-5;
pub const THRESHOLD: f64 = 1e-4;

/// Terms in check order.
pub const TERMS: [&str; 8] = ["l_adv", "l_c", "mix_input", "l_a", "l_u", "l_adv_m", "l_disc", "l_total"];

#[derive(Clone, Debug, PartialEq)]
pub struct TermCheck {
    pub term: String,
    pub coordinates: usize,
    pub max_relative_error: f64,
}

impl TermCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error < THRESHOLD
    }
}

/// Model and batches shared by every term.
pub struct Fixture {
    pub model: MranModel,
    pub batches: Vec<Batch>,
    pub weights: LossWeights,
}

const ROWS: usize = 3;

fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Tensor {
    let values = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, values).expect("positive shape")
}

/// Independent forward of the consistency discrepancy with targets taken
/// from `target_model` as constants.
fn fixed_target_consistency<'a>(
    g: &mut Graph<'a>,
    model: &'a MranModel,
    target_model: &MranModel,
    pair: &MixPair,
) -> Result<Var> {
    let lk = target_model.class_log_probs(pair.domain, &pair.x_k)?;
    let ls = target_model.class_log_probs(pair.domain, &pair.x_s)?;
    let mut target = lk.values().to_vec();
    let mut mixed = pair.x_k.values().to_vec();
    for (r, lam) in pair.lambdas().iter().enumerate() {
        let c = lk.cols();
        for j in 0..c {
            target[r * c + j] = lam * lk.row(r)[j] + (1.0 - lam) * ls.row(r)[j];
        }
        let d = pair.x_k.cols();
        for j in 0..d {
            mixed[r * d + j] = lam * pair.x_k.row(r)[j] + (1.0 - lam) * pair.x_s.row(r)[j];
        }
    }
    let t = g.input(Tensor::new(lk.shape().to_vec(), target)?);
    let x = g.input(Tensor::new(pair.x_k.shape().to_vec(), mixed)?);
    let mut pass = Pass::eval(Trainable::ALL);
    let lp = model.classify(g, pair.domain, x, &mut pass)?;
    g.l1_distance(lp, t)
}

/// Pairs every row with a different one; a row mixed with itself would sit
/// on the zero of the consistency discrepancy.
fn derangement(rng: &mut SeededRng) -> Vec<usize> {
    loop {
        let p = pair_permutation(ROWS, rng);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return p;
        }
    }
}

/// Hidden pre-activations and output of an MLP, computed directly from the
/// parameter values.
fn plain_forward(mlp: &Mlp, x: &[Vec<f64>]) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
    let mut hidden: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut h: Vec<Vec<f64>> = x.to_vec();
    let last = mlp.layers.len() - 1;
    for (l, layer) in mlp.layers.iter().enumerate() {
        let w = &layer.weight.tensor;
        let b = layer.bias.tensor.values();
        let z: Vec<Vec<f64>> = h
            .iter()
            .map(|row| {
                (0..w.cols())
                    .map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w.row(i)[j]).sum::<f64>())
                    .collect()
            })
            .collect();
        if l == last {
            return (hidden, z);
        }
        h = z.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
        hidden.push(z);
    }
    unreachable!("an MLP has an output layer")
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Distance every non-smooth point must keep from the evaluation point.
const MARGIN: f64 = 1e-3;

/// Smallest gradient magnitude checked. Rounding puts roughly 1e-11 of
/// noise on central differences at `STEP`, a tenth of the threshold here.
const RESOLUTION: f64 = 1e-6;

impl Fixture {
    /// Three domains, width-6 inputs, layers no wider than 16. Parameters and
    /// batches are drawn at random until the point is generic (see
    /// [`Fixture::is_generic`]).
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = SeededRng::seed_from_u64(seed);
        for _ in 0..1000 {
            let f = Fixture::draw(&mut rng)?;
            if f.is_generic()? {
                return Ok(f);
            }
        }
        Err(MranError::Usage("could not draw a generic gradient-check point".into()))
    }

    fn draw(rng: &mut SeededRng) -> Result<Self> {
        let spec = ModelSpec {
            domains: 3,
            input_dim: 6,
            extractor_hidden: vec![8, 6],
            shared_dim: 5,
            domain_dim: 4,
            dropout: 0.0,
        };
        let mut model = MranModel::init_with(spec, rng)?;
        // random rather than zero biases, so that units fed only by dead
        // activations do not sit exactly on the relu kink
        for p in model.params_mut().into_iter().filter(|p| p.name.ends_with("bias")) {
            for v in p.tensor.values_mut() {
                *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let lambdas = |rng: &mut SeededRng| (0..ROWS).map(|_| rng.random_range(0.2..0.8)).collect::<Vec<f64>>();
        let mut batches = Vec::new();
        for domain in 0..3 {
            batches.push(Batch {
                domain,
                labeled_x: random_matrix(rng, ROWS, 6),
                labeled_y: (0..ROWS).map(|r| (r + domain) % NUM_CLASSES).collect(),
                labeled_perm: derangement(rng),
                labeled_lambdas: lambdas(rng),
                adv_x: random_matrix(rng, ROWS, 6),
                adv_perm: derangement(rng),
                adv_lambdas: lambdas(rng),
                unlabeled_x: random_matrix(rng, ROWS, 6),
                unlabeled_perm: derangement(rng),
                unlabeled_lambdas: lambdas(rng),
            });
        }
        // large enough that every term visibly shapes the composite objectives
        let weights = LossWeights {
            lambda_d: 0.7,
            lambda_a: 0.5,
            lambda_u: 0.3,
            lambda_m: 0.4,
        };
        Ok(Fixture { model, batches, weights })
    }

    /// True when the point keeps `MARGIN` from every relu kink and every
    /// zero of the consistency discrepancy, and every gradient coordinate is
    /// either exactly zero or resolvable. With two classes the ℓ1
    /// discrepancy gives rows that share an activation pattern per-row
    /// gradients of equal magnitude, so balanced signs cancel exactly and
    /// leave only rounding noise for the finite differences; such points
    /// are rejected too.
    pub fn is_generic(&self) -> Result<bool> {
        let m = &self.model;
        for b in &self.batches {
            let mut inputs = vec![b.labeled_x.clone(), b.adv_x.clone(), b.unlabeled_x.clone()];
            for pair in [b.labeled_pair()?, b.adv_pair()?, b.unlabeled_pair()?] {
                inputs.push(pair.mix()?.0);
                inputs.push(pair.x_s.clone());
            }
            for x in &inputs {
                let x = rows_of(x);
                let (hs, s) = plain_forward(&m.shared, &x);
                let (hd, d) = plain_forward(&m.domain[b.domain], &x);
                let (hdisc, _) = plain_forward(&m.discriminator, &s);
                let joined: Vec<Vec<f64>> = s.iter().zip(&d).map(|(a, c)| [a.clone(), c.clone()].concat()).collect();
                let (hc, _) = plain_forward(&m.classifier, &joined);
                let near_kink = [hs, hd, hdisc, hc]
                    .iter()
                    .flatten()
                    .flatten()
                    .flatten()
                    .any(|z| z.abs() < MARGIN);
                if near_kink {
                    return Ok(false);
                }
            }
        }

        for b in &self.batches {
            let pair = b.unlabeled_pair()?;
            let (x, _) = pair.mix()?;
            let pred = m.class_log_probs(b.domain, &x)?;
            let target = interpolate_rows(
                &m.class_log_probs(b.domain, &pair.x_k)?,
                &m.class_log_probs(b.domain, &pair.x_s)?,
                pair.lambdas(),
            )?;
            if pred.values().iter().zip(target.values()).any(|(p, t)| (p - t).abs() < MARGIN) {
                return Ok(false);
            }
        }

        for term in TERMS.iter().filter(|t| **t != "mix_input") {
            if self.analytic_params(term)?.iter().any(|a| *a != 0.0 && a.abs() < RESOLUTION) {
                return Ok(false);
            }
        }
        // per-row contributions of the consistency term
        let total = self.analytic_params("l_u")?;
        let mut largest = vec![0.0f64; total.len()];
        for b in &self.batches {
            let pair = b.unlabeled_pair()?;
            for r in 0..ROWS {
                let one = MixPair::per_row(
                    b.domain,
                    pair.x_k.select_rows(&[r])?,
                    pair.x_s.select_rows(&[r])?,
                    vec![pair.lambdas()[r]],
                )?;
                let mut g = Graph::new();
                let mut pass = Pass::eval(Trainable::ALL);
                let loss = unlabeled_consistency_loss(&mut g, m, &one, &mut pass, false)?;
                let grads = g.backward(loss)?;
                for (l, d) in largest.iter_mut().zip(Fixture::flatten(m, &grads)) {
                    *l = l.max(d.abs() / ROWS as f64);
                }
            }
        }
        Ok(total.iter().zip(&largest).all(|(t, l)| *l < RESOLUTION || t.abs() >= RESOLUTION))
    }

    /// Parameter gradients summed per id and laid out in id order.
    fn flatten(model: &MranModel, grads: &Gradients) -> Vec<f64> {
        let mut out: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        // a parameter used by several forward passes appears once per use
        for (id, gr) in grads.param_grads() {
            out[id.0].iter_mut().zip(gr).for_each(|(a, d)| *a += d);
        }
        out.concat()
    }

    fn analytic_params(&self, term: &str) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let loss = self.build(term, &mut g, &self.model, None)?;
        let grads = g.backward(loss)?;
        Ok(Fixture::flatten(&self.model, &grads))
    }

    /// `frozen`, when given, supplies the (constant) consistency targets so
    /// that perturbing `model` leaves them unchanged.
    fn build<'a>(
        &self,
        term: &str,
        g: &mut Graph<'a>,
        model: &'a MranModel,
        frozen: Option<&MranModel>,
    ) -> Result<Var> {
        let mut pass = Pass::eval(Trainable::ALL);
        let p = &mut pass;
        let terms = |g: &mut Graph<'a>, f: &mut dyn FnMut(&mut Graph<'a>, &Batch) -> Result<Var>| {
            let vars = self.batches.iter().map(|b| f(g, b)).collect::<Result<Vec<_>>>()?;
            g.add_all(&vars)
        };
        match term {
            "l_adv" => {
                let xs: Vec<Tensor> = self.batches.iter().map(|b| b.adv_x.clone()).collect();
                adversarial_loss(g, model, &xs, p)
            }
            "l_c" => terms(g, &mut |g, b| {
                classification_loss(g, model, b.domain, &b.labeled_x, &one_hot(&b.labeled_y, NUM_CLASSES)?, p)
            }),
            "l_a" => terms(g, &mut |g, b| labeled_category_mixup_loss(g, model, &b.labeled_pair()?, p)),
            // detached targets, as in training; the target path is covered by
            // l_total
            "l_u" => terms(g, &mut |g, b| {
                let pair = b.unlabeled_pair()?;
                match frozen {
                    None => unlabeled_consistency_loss(g, model, &pair, p, false),
                    Some(t) => fixed_target_consistency(g, model, t, &pair),
                }
            }),
            "l_adv_m" => {
                let pairs = self.batches.iter().map(Batch::adv_pair).collect::<Result<Vec<_>>>()?;
                domain_mixup_adv_loss(g, model, &pairs, p)
            }
            "l_disc" => Ok(discriminator_objective(g, model, &self.batches, &self.weights, p)?.total),
            // the full derivative, so the function differenced is exactly the
            // one differentiated
            "l_total" => Ok(feature_objective(g, model, &self.batches, &self.weights, p, true)?.total),
            other => Err(MranError::Usage(format!("unknown gradient-check term `{other}`"))),
        }
    }

    fn params_flat(model: &MranModel) -> Vec<f64> {
        model.params().iter().flat_map(|p| p.tensor.values().to_vec()).collect()
    }

    fn set_params(model: &mut MranModel, flat: &[f64]) {
        let mut off = 0;
        for p in model.params_mut() {
            let v = p.tensor.values_mut();
            let n = v.len();
            v.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    fn check_params(&self, term: &str) -> Result<TermCheck> {
        let analytic = self.analytic_params(term)?;

        let point = Fixture::params_flat(&self.model);
        let mut probe = self.model.clone();
        let numeric = numeric_gradient(&point, STEP, |vals| {
            Fixture::set_params(&mut probe, vals);
            let mut g = Graph::new();
            let v = self.build(term, &mut g, &probe, Some(&self.model))?;
            g.scalar(v)
        })?;
        Ok(TermCheck {
            term: term.to_string(),
            coordinates: point.len(),
            max_relative_error: max_relative_error(&analytic, &numeric),
        })
    }

    /// Soft-label NLL at `λ x_k + (1-λ) x_s` as a function of both endpoints.
    fn check_mix_input<'s>(&'s self) -> Result<TermCheck> {
        let b = &self.batches[0];
        let pair = b.labeled_pair()?;
        let (_, y) = pair.mix()?;
        let y = y.expect("labelled pair");
        let lambdas = pair.lambdas().to_vec();
        let complement: Vec<f64> = lambdas.iter().map(|l| 1.0 - l).collect();
        let n = pair.x_k.len();
        let shape = pair.x_k.shape().to_vec();
        let loss = |g: &mut Graph<'s>, xk: Var, xs: Var| -> Result<Var> {
            let a = g.scale_rows(xk, &lambdas)?;
            let c = g.scale_rows(xs, &complement)?;
            let x = g.add(a, c)?;
            let mut pass = Pass::eval(Trainable::NONE);
            let lp = self.model.classify(g, b.domain, x, &mut pass)?;
            g.nll_soft(lp, &y)
        };

        let mut g = Graph::new();
        let xk = g.leaf(pair.x_k.clone());
        let xs = g.leaf(pair.x_s.clone());
        let l = loss(&mut g, xk, xs)?;
        let grads = g.backward(l)?;
        let mut analytic = grads.grad(xk).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        analytic.extend(grads.grad(xs).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]));

        let mut point = pair.x_k.values().to_vec();
        point.extend(pair.x_s.values());
        let numeric = numeric_gradient(&point, STEP, |vals| {
            let mut g = Graph::new();
            let xk = g.input(Tensor::new(shape.clone(), vals[..n].to_vec())?);
            let xs = g.input(Tensor::new(shape.clone(), vals[n..].to_vec())?);
            let l = loss(&mut g, xk, xs)?;
            g.scalar(l)
        })?;
        Ok(TermCheck {
            term: "mix_input".into(),
            coordinates: point.len(),
            max_relative_error: max_relative_error(&analytic, &numeric),
        })
    }

    pub fn check(&self, term: &str) -> Result<TermCheck> {
        match term {
            "mix_input" => self.check_mix_input(),
            t if TERMS.contains(&t) => self.check_params(t),
            other => Err(MranError::Usage(format!(
                "unknown gradient-check term `{other}` (expected one of {})",
                TERMS.join(", ")
            ))),
        }
    }
}

/// Checks one term, or all of them when `term` is `None`.
pub fn run(seed: u64, term: Option<&str>) -> Result<Vec<TermCheck>> {
    let fixture = Fixture::new(seed)?;
    match term {
        Some(t) => Ok(vec![fixture.check(t)?]),
        None => TERMS.iter().map(|t| fixture.check(t)).collect(),
    }
}
