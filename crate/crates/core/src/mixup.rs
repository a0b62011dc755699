//! Beta-distributed interpolation and the mixup regularisers.
//!
//! All losses are built onto a caller-provided [`Graph`] so they can be
//! combined into one objective and differentiated together.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{MranError, Result};
use crate::model::{MranModel, Pass, Trainable};
use crate::SeededRng;

/// One draw from `Beta(alpha, alpha)` as `g1 / (g1 + g2)` with
/// `g1, g2 ~ Gamma(alpha, 1)`.
pub fn sample_lambda(alpha: f64, rng: &mut SeededRng) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(MranError::Config(format!("alpha must be positive, got {alpha}")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| MranError::Config(e.to_string()))?;
    let g1: f64 = gamma.sample(rng);
    let g2: f64 = gamma.sample(rng);
    let total = g1 + g2;
    // both draws can underflow for very small alpha
    if total == 0.0 {
        return Ok(0.5);
    }
    Ok((g1 / total).clamp(0.0, 1.0))
}

/// Random partner assignment within a batch: row `r` is paired with row
/// `perm[r]`. Fixed points are allowed.
pub fn pair_permutation(n: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

/// Convex combination of two equally shaped batches, with optional soft
/// labels. Row `r` is mixed with coefficient `lambdas[r]`.
#[derive(Clone, Debug)]
pub struct MixPair {
    pub domain: usize,
    pub x_k: Tensor,
    pub x_s: Tensor,
    pub y_k: Option<Tensor>,
    pub y_s: Option<Tensor>,
    lambdas: Vec<f64>,
}

impl MixPair {
    /// Pair sharing one coefficient across all rows.
    pub fn new(domain: usize, x_k: Tensor, x_s: Tensor, lambda: f64) -> Result<Self> {
        let rows = x_k.rows();
        MixPair::per_row(domain, x_k, x_s, vec![lambda; rows])
    }

    pub fn per_row(domain: usize, x_k: Tensor, x_s: Tensor, lambdas: Vec<f64>) -> Result<Self> {
        if x_k.shape() != x_s.shape() {
            return Err(MranError::dim("mix", x_k.shape(), x_s.shape()));
        }
        if lambdas.len() != x_k.rows() {
            return Err(MranError::dim("mix", x_k.shape(), &[lambdas.len()]));
        }
        if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(MranError::Validation(format!("mixing coefficient {l} outside [0, 1]")));
        }
        Ok(MixPair {
            domain,
            x_k,
            x_s,
            y_k: None,
            y_s: None,
            lambdas,
        })
    }

    /// Builds the pair `(x, x[perm])` from one batch.
    pub fn from_permutation(domain: usize, x: &Tensor, perm: &[usize], lambdas: Vec<f64>) -> Result<Self> {
        MixPair::per_row(domain, x.clone(), x.select_rows(perm)?, lambdas)
    }

    pub fn with_labels(mut self, y_k: Tensor, y_s: Tensor) -> Result<Self> {
        for y in [&y_k, &y_s] {
            if y.rows() != self.x_k.rows() || y.shape().len() != 2 {
                return Err(MranError::dim("mix labels", self.x_k.shape(), y.shape()));
            }
            check_distributions(y)?;
        }
        if y_k.shape() != y_s.shape() {
            return Err(MranError::dim("mix labels", y_k.shape(), y_s.shape()));
        }
        self.y_k = Some(y_k);
        self.y_s = Some(y_s);
        Ok(self)
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// Swapped endpoints with complementary coefficients.
    pub fn swapped(&self) -> MixPair {
        MixPair {
            domain: self.domain,
            x_k: self.x_s.clone(),
            x_s: self.x_k.clone(),
            y_k: self.y_s.clone(),
            y_s: self.y_k.clone(),
            lambdas: self.lambdas.iter().map(|l| 1.0 - l).collect(),
        }
    }

    /// `(λ x_k + (1 − λ) x_s, λ y_k + (1 − λ) y_s)`.
    pub fn mix(&self) -> Result<(Tensor, Option<Tensor>)> {
        let x = interpolate_rows(&self.x_k, &self.x_s, &self.lambdas)?;
        let y = match (&self.y_k, &self.y_s) {
            (Some(a), Some(b)) => Some(interpolate_rows(a, b, &self.lambdas)?),
            _ => None,
        };
        Ok((x, y))
    }
}

fn check_distributions(y: &Tensor) -> Result<()> {
    for r in 0..y.rows() {
        let row = y.row(r);
        let total: f64 = row.iter().sum();
        if row.iter().any(|v| *v < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(MranError::Validation(format!("label row {r} is not a distribution: {row:?}")));
        }
    }
    Ok(())
}

/// Row-wise `λ_r a_r + (1 − λ_r) b_r`.
pub fn interpolate_rows(a: &Tensor, b: &Tensor, lambdas: &[f64]) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(MranError::dim("interpolate", a.shape(), b.shape()));
    }
    if lambdas.len() != a.rows() {
        return Err(MranError::dim("interpolate", a.shape(), &[lambdas.len()]));
    }
    let c = a.cols();
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .enumerate()
        .map(|(j, (x, y))| {
            let l = lambdas[j / c];
            l * x + (1.0 - l) * y
        })
        .collect();
    Tensor::new(a.shape().to_vec(), values)
}

/// One-hot rows for integer class labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut v = vec![0.0; labels.len() * classes];
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(MranError::Validation(format!("label {y} out of range for {classes} classes")));
        }
        v[r * classes + y] = 1.0;
    }
    Tensor::matrix(labels.len(), classes, v)
}

fn nonempty(x: &Tensor, what: &str) -> Result<()> {
    if x.is_empty() {
        return Err(MranError::Usage(format!("{what}: empty batch")));
    }
    Ok(())
}

/// Mean NLL of the classifier on labelled instances of domain `i`.
pub fn classification_loss<'a>(
    g: &mut Graph<'a>,
    model: &'a MranModel,
    i: usize,
    x: &Tensor,
    y: &Tensor,
    pass: &mut Pass<'_>,
) -> Result<Var> {
    nonempty(x, "classification loss")?;
    let xv = g.input(x.clone());
    let lp = model.classify(g, i, xv, pass)?;
    g.nll_soft(lp, y)
}

/// `-sum_i mean log D_i(F_s(x))` over one batch per domain, batch `i`
/// belonging to domain `i`.
pub fn adversarial_loss<'a>(
    g: &mut Graph<'a>,
    model: &'a MranModel,
    batches: &[Tensor],
    pass: &mut Pass<'_>,
) -> Result<Var> {
    if batches.len() != model.domains() {
        return Err(MranError::Usage(format!(
            "adversarial loss needs one batch per domain ({}), got {}",
            model.domains(),
            batches.len()
        )));
    }
    let mut terms = Vec::with_capacity(batches.len());
    for (i, x) in batches.iter().enumerate() {
        nonempty(x, "adversarial loss")?;
        let xv = g.input(x.clone());
        terms.push(domain_nll(g, model, i, xv, pass)?);
    }
    g.add_all(&terms)
}

fn domain_nll<'a>(g: &mut Graph<'a>, model: &'a MranModel, i: usize, x: Var, pass: &mut Pass<'_>) -> Result<Var> {
    let rows = g.value(x).rows();
    let s = model.forward_shared(g, x, pass)?;
    let lp = model.forward_discriminator(g, s, pass)?;
    let target = one_hot(&vec![i; rows], model.domains())?;
    g.nll_soft(lp, &target)
}

/// Soft-label NLL of the classifier at the mixed inputs of a labelled pair.
pub fn labeled_category_mixup_loss<'a>(
    g: &mut Graph<'a>,
    model: &'a MranModel,
    pair: &MixPair,
    pass: &mut Pass<'_>,
) -> Result<Var> {
    nonempty(&pair.x_k, "labeled category mixup")?;
    let (x, y) = pair.mix()?;
    let y = y.ok_or_else(|| MranError::Usage("labeled category mixup needs labels on both sides".into()))?;
    let xv = g.input(x);
    let lp = model.classify(g, pair.domain, xv, pass)?;
    g.nll_soft(lp, &y)
}

/// l1 discrepancy between the log-probabilities at the mixed input and the
/// interpolation of the endpoint log-probabilities.
///
/// Endpoint predictions are computed without dropout. With
/// `target_grad == false` they are constants.
pub fn unlabeled_consistency_loss<'a>(
    g: &mut Graph<'a>,
    model: &'a MranModel,
    pair: &MixPair,
    pass: &mut Pass<'_>,
    target_grad: bool,
) -> Result<Var> {
    nonempty(&pair.x_k, "unlabeled consistency")?;
    let i = pair.domain;
    let (x, _) = pair.mix()?;
    let target = if target_grad {
        let mut clean = Pass::eval(pass.trainable);
        let xk = g.input(pair.x_k.clone());
        let xs = g.input(pair.x_s.clone());
        let pk = model.classify(g, i, xk, &mut clean)?;
        let ps = model.classify(g, i, xs, &mut clean)?;
        let complement: Vec<f64> = pair.lambdas.iter().map(|l| 1.0 - l).collect();
        let a = g.scale_rows(pk, &pair.lambdas)?;
        let b = g.scale_rows(ps, &complement)?;
        g.add(a, b)?
    } else {
        let pk = model.class_log_probs(i, &pair.x_k)?;
        let ps = model.class_log_probs(i, &pair.x_s)?;
        g.input(interpolate_rows(&pk, &ps, &pair.lambdas)?)
    };
    let xv = g.input(x);
    let p_mixed = model.classify(g, i, xv, pass)?;
    g.l1_distance(p_mixed, target)
}

/// `-sum_i mean log D_i(F_s(x̃_i))` with one within-domain pair per domain.
pub fn domain_mixup_adv_loss<'a>(
    g: &mut Graph<'a>,
    model: &'a MranModel,
    pairs: &[MixPair],
    pass: &mut Pass<'_>,
) -> Result<Var> {
    if pairs.len() != model.domains() {
        return Err(MranError::Usage(format!(
            "domain mixup needs one pair per domain ({}), got {}",
            model.domains(),
            pairs.len()
        )));
    }
    let mut terms = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        if pair.domain != i {
            return Err(MranError::Usage(format!(
                "pair at position {i} belongs to domain {}; pairs may not straddle domains",
                pair.domain
            )));
        }
        nonempty(&pair.x_k, "domain mixup")?;
        let (x, _) = pair.mix()?;
        let xv = g.input(x);
        terms.push(domain_nll(g, model, i, xv, pass)?);
    }
    g.add_all(&terms)
}

/// Convenience for evaluating a loss builder to a plain number in eval mode.
pub fn eval_loss<F>(model: &MranModel, build: F) -> Result<f64>
where
    F: for<'a> FnOnce(&mut Graph<'a>, &'a MranModel, &mut Pass<'_>) -> Result<Var>,
{
    let mut g = Graph::new();
    let mut pass = Pass::eval(Trainable::NONE);
    let v = build(&mut g, model, &mut pass)?;
    g.scalar(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use rand::{Rng, SeedableRng};

    fn tiny(domains: usize, seed: u64) -> MranModel {
        let spec = ModelSpec {
            domains,
            input_dim: 5,
            extractor_hidden: vec![6, 4],
            shared_dim: 4,
            domain_dim: 3,
            dropout: 0.0,
        };
        MranModel::init(spec, seed).unwrap()
    }

    fn rand_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sample_lambda_rejects_bad_alpha() {
        let mut rng = SeededRng::seed_from_u64(0);
        assert!(matches!(sample_lambda(0.0, &mut rng), Err(MranError::Config(_))));
        assert!(sample_lambda(-1.0, &mut rng).is_err());
        for _ in 0..1000 {
            let l = sample_lambda(0.2, &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&l));
        }
    }

    #[test]
    fn sample_lambda_mean_is_half() {
        let mut rng = SeededRng::seed_from_u64(1);
        for alpha in [0.2, 1.0, 3.0] {
            let n = 100_000;
            let mean = (0..n).map(|_| sample_lambda(alpha, &mut rng).unwrap()).sum::<f64>() / n as f64;
            assert!((mean - 0.5).abs() < 0.01, "alpha {alpha}: mean {mean}");
        }
    }

    #[test]
    fn mix_examples() {
        let xk = Tensor::matrix(1, 2, vec![0.0, 2.0]).unwrap();
        let xs = Tensor::matrix(1, 2, vec![2.0, 0.0]).unwrap();
        let yk = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let ys = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        let pair = MixPair::new(0, xk.clone(), xs.clone(), 0.5).unwrap();
        assert_eq!(pair.mix().unwrap().0.values(), &[1.0, 1.0]);

        let pair = MixPair::new(0, xk.clone(), xs.clone(), 1.0)
            .unwrap()
            .with_labels(yk.clone(), ys.clone())
            .unwrap();
        let (x, y) = pair.mix().unwrap();
        assert_eq!(x, xk);
        assert_eq!(y.unwrap(), yk);

        let pair = MixPair::new(0, xk, xs, 0.3).unwrap().with_labels(yk, ys).unwrap();
        let y = pair.mix().unwrap().1.unwrap();
        assert!((y.values()[0] - 0.3).abs() < 1e-15 && (y.values()[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn mix_validation() {
        let a = Tensor::matrix(1, 2, vec![0.0, 2.0]).unwrap();
        let b = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        assert!(matches!(MixPair::new(0, a.clone(), b, 0.5), Err(MranError::Dimension { .. })));
        assert!(MixPair::new(0, a.clone(), a.clone(), 1.5).is_err());
        let bad = Tensor::matrix(1, 2, vec![0.6, 0.6]).unwrap();
        assert!(MixPair::new(0, a.clone(), a, 0.5).unwrap().with_labels(bad.clone(), bad).is_err());
    }

    #[test]
    fn labeled_mixup_endpoint_and_degenerate() {
        let model = tiny(2, 3);
        let mut rng = SeededRng::seed_from_u64(4);
        let xk = rand_matrix(&mut rng, 4, 5);
        let xs = rand_matrix(&mut rng, 4, 5);
        let yk = one_hot(&[0, 1, 1, 0], 2).unwrap();
        let ys = one_hot(&[1, 1, 0, 0], 2).unwrap();
        let plain = eval_loss(&model, |g, m, p| classification_loss(g, m, 1, &xk, &yk, p)).unwrap();
        let pair = MixPair::new(1, xk.clone(), xs.clone(), 1.0)
            .unwrap()
            .with_labels(yk.clone(), ys.clone())
            .unwrap();
        let mixed = eval_loss(&model, |g, m, p| labeled_category_mixup_loss(g, m, &pair, p)).unwrap();
        assert!((plain - mixed).abs() < 1e-12);

        let same = MixPair::new(1, xk.clone(), xk.clone(), 0.37)
            .unwrap()
            .with_labels(yk.clone(), yk.clone())
            .unwrap();
        let mixed = eval_loss(&model, |g, m, p| labeled_category_mixup_loss(g, m, &same, p)).unwrap();
        assert!((plain - mixed).abs() < 1e-12);

        let unlabeled = MixPair::new(1, xk.clone(), xs, 0.5).unwrap();
        assert!(eval_loss(&model, |g, m, p| labeled_category_mixup_loss(g, m, &unlabeled, p)).is_err());
    }

    #[test]
    fn labeled_mixup_soft_label_linearity() {
        let model = tiny(2, 5);
        let mut rng = SeededRng::seed_from_u64(6);
        let xk = rand_matrix(&mut rng, 3, 5);
        let xs = rand_matrix(&mut rng, 3, 5);
        let yk = one_hot(&[0, 1, 1], 2).unwrap();
        let ys = one_hot(&[1, 1, 0], 2).unwrap();
        let lam = 0.42;
        let pair = MixPair::new(0, xk.clone(), xs.clone(), lam)
            .unwrap()
            .with_labels(yk.clone(), ys.clone())
            .unwrap();
        let mixed = eval_loss(&model, |g, m, p| labeled_category_mixup_loss(g, m, &pair, p)).unwrap();
        let (xt, _) = pair.mix().unwrap();
        let nk = eval_loss(&model, |g, m, p| classification_loss(g, m, 0, &xt, &yk, p)).unwrap();
        let ns = eval_loss(&model, |g, m, p| classification_loss(g, m, 0, &xt, &ys, p)).unwrap();
        assert!((mixed - (lam * nk + (1.0 - lam) * ns)).abs() < 1e-12);
    }

    #[test]
    fn consistency_zero_cases() {
        let model = tiny(3, 7);
        let mut rng = SeededRng::seed_from_u64(8);
        let xk = rand_matrix(&mut rng, 4, 5);
        let xs = rand_matrix(&mut rng, 4, 5);
        let same = MixPair::new(2, xk.clone(), xk.clone(), 0.3).unwrap();
        let v = eval_loss(&model, |g, m, p| unlabeled_consistency_loss(g, m, &same, p, false)).unwrap();
        assert!(v.abs() < 1e-12, "{v}");
        let endpoint = MixPair::new(2, xk.clone(), xs.clone(), 1.0).unwrap();
        let v = eval_loss(&model, |g, m, p| unlabeled_consistency_loss(g, m, &endpoint, p, false)).unwrap();
        assert!(v.abs() < 1e-12, "{v}");
        let generic = MixPair::new(2, xk, xs, 0.5).unwrap();
        let v = eval_loss(&model, |g, m, p| unlabeled_consistency_loss(g, m, &generic, p, false)).unwrap();
        assert!(v > 0.0);
    }

    #[test]
    fn consistency_vanishes_for_linear_maps_only() {
        let mut rng = SeededRng::seed_from_u64(9);
        let w = rand_matrix(&mut rng, 5, 3);
        let xk = rand_matrix(&mut rng, 4, 5);
        let xs = rand_matrix(&mut rng, 4, 5);
        let lam = 0.3;
        let xt = interpolate_rows(&xk, &xs, &[lam; 4]).unwrap();
        let penalty = |softmax: bool| {
            let mut g = Graph::new();
            let wv = g.input(w.clone());
            let p = |g: &mut Graph<'_>, x: &Tensor| {
                let xv = g.input(x.clone());
                let h = g.matmul(xv, wv).unwrap();
                if softmax {
                    g.log_softmax(h).unwrap()
                } else {
                    h
                }
            };
            let pm = p(&mut g, &xt);
            let pk = p(&mut g, &xk);
            let ps = p(&mut g, &xs);
            let a = g.scale(pk, lam);
            let b = g.scale(ps, 1.0 - lam);
            let target = g.add(a, b).unwrap();
            let d = g.l1_distance(pm, target).unwrap();
            g.scalar(d).unwrap()
        };
        assert!(penalty(false) < 1e-12);
        assert!(penalty(true) > 1e-6);
    }

    #[test]
    fn consistency_target_detach_option() {
        let model = tiny(2, 10);
        let mut rng = SeededRng::seed_from_u64(11);
        let pair = MixPair::new(0, rand_matrix(&mut rng, 3, 5), rand_matrix(&mut rng, 3, 5), 0.6).unwrap();
        let value = |both: bool| {
            let mut g = Graph::new();
            let mut pass = Pass::eval(Trainable::ALL);
            let l = unlabeled_consistency_loss(&mut g, &model, &pair, &mut pass, both).unwrap();
            let v = g.scalar(l).unwrap();
            let n = g.backward(l).unwrap().param_grads().count();
            (v, n)
        };
        let (detached, n_detached) = value(false);
        let (attached, n_attached) = value(true);
        assert!((detached - attached).abs() < 1e-12);
        assert!(n_attached > n_detached);
    }

    #[test]
    fn domain_mixup_endpoint_uniform_and_errors() {
        let model = tiny(4, 12);
        let mut rng = SeededRng::seed_from_u64(13);
        let xs: Vec<Tensor> = (0..4).map(|_| rand_matrix(&mut rng, 3, 5)).collect();
        let other: Vec<Tensor> = (0..4).map(|_| rand_matrix(&mut rng, 3, 5)).collect();
        let pairs: Vec<MixPair> = (0..4)
            .map(|i| MixPair::new(i, xs[i].clone(), other[i].clone(), 1.0).unwrap())
            .collect();
        let plain = eval_loss(&model, |g, m, p| adversarial_loss(g, m, &xs, p)).unwrap();
        let mixed = eval_loss(&model, |g, m, p| domain_mixup_adv_loss(g, m, &pairs, p)).unwrap();
        assert!((plain - mixed).abs() < 1e-12);

        let mut flat = model.clone();
        for p in flat.discriminator.params_mut() {
            p.tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let v = eval_loss(&flat, |g, m, p| domain_mixup_adv_loss(g, m, &pairs, p)).unwrap();
        assert!((v - 4.0 * 4f64.ln()).abs() < 1e-12);
        assert!((v - 5.545).abs() < 1e-3);

        let mut straddle = pairs.clone();
        straddle[1].domain = 2;
        assert!(matches!(
            eval_loss(&model, |g, m, p| domain_mixup_adv_loss(g, m, &straddle, p)),
            Err(MranError::Usage(_))
        ));
        assert!(eval_loss(&model, |g, m, p| domain_mixup_adv_loss(g, m, &pairs[..3], p)).is_err());
    }
}
