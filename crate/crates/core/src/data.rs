//! Review corpus ingestion, vocabulary, fold planning and a synthetic
//! multi-domain generator.
//!
//! On disk every domain is a directory holding `positive.review`,
//! `negative.review` and optionally `unlabeled.review`. Each line is one
//! example written as whitespace-separated `token:count` pairs, with the
//! sentiment carried by a `#label#:positive` / `#label#:negative` pair.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::error::{MranError, Result};
use crate::SeededRng;

pub const LABEL_TOKEN: &str = "#label#";
pub const POSITIVE_FILE: &str = "positive.review";
pub const NEGATIVE_FILE: &str = "negative.review";
pub const UNLABELED_FILE: &str = "unlabeled.review";
pub const NUM_FOLDS: usize = 5;

/// Token counts of one parsed line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawExample {
    pub counts: BTreeMap<String, f64>,
    pub label: Option<usize>,
}

impl RawExample {
    pub fn total(&self) -> f64 {
        self.counts.values().sum()
    }
}

/// Parses one `token:count ... #label#:value` line. `line_no` is 1-based and
/// only used in error messages.
pub fn parse_review_line(line: &str, line_no: usize) -> Result<RawExample> {
    let mut ex = RawExample::default();
    for pair in line.split_whitespace() {
        let err = |message: String| MranError::Parse {
            line: line_no,
            message,
        };
        // tokens may themselves contain ':', the count follows the last one
        let (token, value) = pair
            .rsplit_once(':')
            .ok_or_else(|| err(format!("pair `{pair}` has no `:`")))?;
        if token.is_empty() {
            return Err(err(format!("pair `{pair}` has an empty token")));
        }
        if token == LABEL_TOKEN {
            ex.label = Some(match value {
                "positive" => 1,
                "negative" => 0,
                other => return Err(err(format!("unknown label value `{other}` in `{pair}`"))),
            });
            continue;
        }
        let count: f64 = value
            .parse()
            .map_err(|_| err(format!("pair `{pair}` has a non-numeric count")))?;
        if !count.is_finite() || count == 0.0 {
            return Err(err(format!("pair `{pair}` has an invalid count")));
        }
        *ex.counts.entry(token.to_string()).or_insert(0.0) += count;
    }
    Ok(ex)
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| MranError::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

/// Reads a review file. `label` forces the class of every line (and rejects
/// lines tagged otherwise); `None` reads the lines as unlabeled.
pub fn read_review_file(path: &Path, label: Option<usize>) -> Result<Vec<RawExample>> {
    let mut out = Vec::new();
    for (no, line) in read_lines(path)? {
        let mut ex = parse_review_line(&line, no).map_err(|e| match e {
            MranError::Parse { line, message } => MranError::Parse {
                line,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })?;
        match (label, ex.label) {
            (Some(want), Some(got)) if want != got => {
                return Err(MranError::Parse {
                    line: no,
                    message: format!("{}: label {got} in a file of class {want}", path.display()),
                })
            }
            (Some(want), _) => ex.label = Some(want),
            (None, _) => ex.label = None,
        }
        out.push(ex);
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct RawDomain {
    pub name: String,
    pub labeled: Vec<RawExample>,
    pub unlabeled: Vec<RawExample>,
}

fn layout_help(dir: &Path) -> String {
    format!(
        "expected {}/<domain>/{{{POSITIVE_FILE},{NEGATIVE_FILE}[,{UNLABELED_FILE}]}}",
        dir.display()
    )
}

/// Loads the listed domains, or every subdirectory (sorted by name) when
/// `names` is empty.
pub fn load_corpus(dir: &Path, names: &[String]) -> Result<Vec<RawDomain>> {
    if !dir.is_dir() {
        return Err(MranError::Config(format!(
            "data directory {} not found; {}",
            dir.display(),
            layout_help(dir)
        )));
    }
    let names: Vec<String> = if names.is_empty() {
        let mut found = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| MranError::io(dir, e))? {
            let entry = entry.map_err(|e| MranError::io(dir, e))?;
            if entry.path().join(POSITIVE_FILE).is_file() {
                found.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        found.sort();
        found
    } else {
        names.to_vec()
    };
    if names.len() < 2 {
        return Err(MranError::Config(format!(
            "found {} domain(s) under {}; at least two are required; {}",
            names.len(),
            dir.display(),
            layout_help(dir)
        )));
    }
    let mut domains = Vec::with_capacity(names.len());
    for name in names {
        let d = dir.join(&name);
        let pos = d.join(POSITIVE_FILE);
        let neg = d.join(NEGATIVE_FILE);
        if !pos.is_file() || !neg.is_file() {
            return Err(MranError::Config(format!(
                "domain `{name}` is missing review files; {}",
                layout_help(dir)
            )));
        }
        let mut labeled = read_review_file(&pos, Some(1))?;
        labeled.extend(read_review_file(&neg, Some(0))?);
        let unl = d.join(UNLABELED_FILE);
        let unlabeled = if unl.is_file() {
            read_review_file(&unl, None)?
        } else {
            Vec::new()
        };
        domains.push(RawDomain {
            name,
            labeled,
            unlabeled,
        });
    }
    Ok(domains)
}

/// Feature strings by id.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(MranError::Validation(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Vocabulary::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| MranError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MranError::io(path, e))?;
        Vocabulary::from_text(&text)
    }
}

/// Keeps the `size` features with the largest total count; equal counts are
/// ordered lexicographically.
pub fn build_vocabulary<'e>(examples: impl IntoIterator<Item = &'e RawExample>, size: usize) -> Result<Vocabulary> {
    if size == 0 {
        return Err(MranError::Config("vocabulary size must be at least 1".into()));
    }
    let mut totals: HashMap<&str, f64> = HashMap::new();
    for ex in examples {
        for (t, c) in &ex.counts {
            *totals.entry(t.as_str()).or_insert(0.0) += c;
        }
    }
    let mut ranked: Vec<(&str, f64)> = totals.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    if ranked.len() < size {
        log::warn!(
            "only {} distinct features available, vocabulary of {size} requested; keeping all",
            ranked.len()
        );
    }
    ranked.truncate(size);
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()).collect())
}

/// A vectorised example: strictly increasing feature ids with non-zero
/// values, optional class label and a 0-based domain index.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseExample {
    pub features: Vec<(u32, f64)>,
    pub label: Option<usize>,
    pub domain: usize,
}

impl SparseExample {
    pub fn new(mut features: Vec<(u32, f64)>, label: Option<usize>, domain: usize) -> Result<Self> {
        features.sort_by_key(|f| f.0);
        if features.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(MranError::Validation("duplicate feature id".into()));
        }
        if features.iter().any(|f| !f.1.is_finite() || f.1 == 0.0) {
            return Err(MranError::Validation("feature values must be finite and non-zero".into()));
        }
        Ok(SparseExample {
            features,
            label,
            domain,
        })
    }

    pub fn total(&self) -> f64 {
        self.features.iter().map(|f| f.1).sum()
    }
}

/// Maps token counts onto vocabulary ids, dropping unknown tokens.
pub fn vectorize(raw: &RawExample, vocab: &Vocabulary, domain: usize) -> SparseExample {
    let mut features: Vec<(u32, f64)> = raw
        .counts
        .iter()
        .filter_map(|(t, c)| vocab.id(t).map(|id| (id as u32, *c)))
        .collect();
    features.sort_by_key(|f| f.0);
    SparseExample {
        features,
        label: raw.label,
        domain,
    }
}

/// Dense `rows x dim` batch. `log_counts` applies `ln(1 + v)`.
pub fn densify(examples: &[&SparseExample], dim: usize, log_counts: bool) -> Result<Tensor> {
    let mut values = vec![0.0; examples.len() * dim];
    for (r, ex) in examples.iter().enumerate() {
        for &(id, v) in &ex.features {
            let id = id as usize;
            if id >= dim {
                return Err(MranError::dim("densify", &[id], &[dim]));
            }
            values[r * dim + id] = if log_counts { v.ln_1p() } else { v };
        }
    }
    Tensor::matrix(examples.len(), dim, values)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainData {
    pub name: String,
    pub labeled: Vec<SparseExample>,
    pub unlabeled: Vec<SparseExample>,
}

/// Vectorised multi-domain corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub domains: Vec<DomainData>,
}

impl Dataset {
    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.name.clone()).collect()
    }
}

/// Builds the joint vocabulary over all labelled and unlabeled text and
/// vectorises every domain.
pub fn vectorize_corpus(raw: &[RawDomain], vocab_size: usize) -> Result<(Dataset, Vocabulary)> {
    let all = raw.iter().flat_map(|d| d.labeled.iter().chain(&d.unlabeled));
    let vocab = build_vocabulary(all, vocab_size)?;
    let domains = raw
        .iter()
        .enumerate()
        .map(|(i, d)| DomainData {
            name: d.name.clone(),
            labeled: d.labeled.iter().map(|e| vectorize(e, &vocab, i)).collect(),
            unlabeled: d.unlabeled.iter().map(|e| vectorize(e, &vocab, i)).collect(),
        })
        .collect();
    Ok((
        Dataset {
            dim: vocab.len(),
            domains,
        },
        vocab,
    ))
}

/// Fold index of every labelled example, per domain.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldPlan {
    pub assignment: Vec<Vec<usize>>,
}

/// Fold roles for one rotation of the cross-validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FoldRoles {
    pub train: [usize; 3],
    pub valid: usize,
    pub test: usize,
}

impl FoldPlan {
    /// Rotation `r`: fold `r` tests, fold `r + 1` validates, the rest train.
    pub fn roles(rotation: usize) -> FoldRoles {
        let test = rotation % NUM_FOLDS;
        let valid = (rotation + 1) % NUM_FOLDS;
        let mut train = [0; 3];
        let mut k = 0;
        for f in 0..NUM_FOLDS {
            if f != test && f != valid {
                train[k] = f;
                k += 1;
            }
        }
        FoldRoles { train, valid, test }
    }

    pub fn fold_members(&self, domain: usize, fold: usize) -> Vec<usize> {
        self.assignment[domain]
            .iter()
            .enumerate()
            .filter(|(_, f)| **f == fold)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Label-stratified five-fold assignment within each domain.
pub fn make_folds(dataset: &Dataset, seed: u64) -> Result<FoldPlan> {
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut assignment = Vec::with_capacity(dataset.domains.len());
    for d in &dataset.domains {
        if d.labeled.len() < NUM_FOLDS {
            return Err(MranError::Config(format!(
                "domain `{}` has {} labelled examples; {NUM_FOLDS} folds need at least {NUM_FOLDS}",
                d.name,
                d.labeled.len()
            )));
        }
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, ex) in d.labeled.iter().enumerate() {
            let y = ex.label.ok_or_else(|| {
                MranError::Validation(format!("unlabelled example {i} in the labelled pool of `{}`", d.name))
            })?;
            by_class.entry(y).or_default().push(i);
        }
        let mut folds = vec![0; d.labeled.len()];
        // dealing continues across classes, so overall sizes differ by <= 1
        let mut next = 0;
        for members in by_class.values_mut() {
            members.shuffle(&mut rng);
            for &i in members.iter() {
                folds[i] = next % NUM_FOLDS;
                next += 1;
            }
        }
        assignment.push(folds);
    }
    Ok(FoldPlan { assignment })
}

/// Per-domain pools for one cross-validation rotation.
#[derive(Clone, Debug)]
pub struct DomainSplit {
    pub name: String,
    pub train: Vec<SparseExample>,
    pub unlabeled: Vec<SparseExample>,
    pub valid: Vec<SparseExample>,
    pub test: Vec<SparseExample>,
    /// True when no unlabeled file existed and the training examples (labels
    /// hidden) stand in for the unlabeled pool.
    pub unlabeled_from_train: bool,
}

#[derive(Clone, Debug)]
pub struct SplitData {
    pub dim: usize,
    pub domains: Vec<DomainSplit>,
}

impl SplitData {
    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }
}

pub fn split(dataset: &Dataset, plan: &FoldPlan, rotation: usize) -> SplitData {
    let roles = FoldPlan::roles(rotation);
    let domains = dataset
        .domains
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let pick = |folds: &[usize]| -> Vec<SparseExample> {
                d.labeled
                    .iter()
                    .zip(&plan.assignment[i])
                    .filter(|(_, f)| folds.contains(f))
                    .map(|(e, _)| e.clone())
                    .collect()
            };
            let train = pick(&roles.train);
            let (unlabeled, from_train) = if d.unlabeled.is_empty() {
                let hidden = train
                    .iter()
                    .map(|e| SparseExample {
                        label: None,
                        ..e.clone()
                    })
                    .collect();
                (hidden, true)
            } else {
                (d.unlabeled.clone(), false)
            };
            DomainSplit {
                name: d.name.clone(),
                train,
                unlabeled,
                valid: pick(&[roles.valid]),
                test: pick(&[roles.test]),
                unlabeled_from_train: from_train,
            }
        })
        .collect();
    SplitData {
        dim: dataset.dim,
        domains,
    }
}

/// Parameters of the synthetic multi-domain task.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub domains: usize,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub dim: usize,
    pub shared_signal: f64,
    pub domain_shift: f64,
    pub noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            domains: 4,
            n_labeled: 100,
            n_unlabeled: 200,
            dim: 64,
            shared_signal: 1.0,
            domain_shift: 2.0,
            noise: 1.0,
        }
    }
}

fn unit_vector(rng: &mut SeededRng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Per domain `i`: `x = shared_signal * u * y' + domain_shift * v_i + noise * z`
/// with `y' in {-1, +1}`, unit directions `u` (shared by all domains) and
/// `v_i`, and `z` standard normal. Labelled sets are class-balanced.
pub fn synth_generate(params: &SynthParams, seed: u64) -> Result<Dataset> {
    if params.dim < 4 || params.domains < 2 {
        return Err(MranError::Config(format!(
            "synthetic task needs dim >= 4 and at least two domains, got dim {} and {} domains",
            params.dim, params.domains
        )));
    }
    if params.n_labeled == 0 {
        return Err(MranError::Config("synthetic task needs labelled examples".into()));
    }
    if [params.shared_signal, params.domain_shift, params.noise]
        .iter()
        .any(|v| !v.is_finite() || *v < 0.0)
    {
        return Err(MranError::Config("synthetic scales must be finite and non-negative".into()));
    }
    let mut rng = SeededRng::seed_from_u64(seed);
    let class_dir = unit_vector(&mut rng, params.dim);
    let offsets: Vec<Vec<f64>> = (0..params.domains).map(|_| unit_vector(&mut rng, params.dim)).collect();
    let draw = |rng: &mut SeededRng, domain: usize, label: usize| -> SparseExample {
        let sign = if label == 1 { 1.0 } else { -1.0 };
        let features = (0..params.dim)
            .filter_map(|j| {
                let z: f64 = rng.sample(StandardNormal);
                let v = params.shared_signal * class_dir[j] * sign
                    + params.domain_shift * offsets[domain][j]
                    + params.noise * z;
                (v != 0.0).then_some((j as u32, v))
            })
            .collect();
        SparseExample {
            features,
            label: Some(label),
            domain,
        }
    };
    let domains = (0..params.domains)
        .map(|i| {
            let labeled = (0..params.n_labeled).map(|j| draw(&mut rng, i, (j + 1) % 2)).collect();
            let unlabeled = (0..params.n_unlabeled)
                .map(|j| SparseExample {
                    label: None,
                    ..draw(&mut rng, i, (j + 1) % 2)
                })
                .collect();
            DomainData {
                name: format!("domain{i}"),
                labeled,
                unlabeled,
            }
        })
        .collect();
    Ok(Dataset {
        dim: params.dim,
        domains,
    })
}

fn format_line(ex: &SparseExample) -> String {
    let mut s = String::new();
    for (id, v) in &ex.features {
        let _ = write!(s, "{id}:{v} ");
    }
    match ex.label {
        Some(1) => s.push_str("#label#:positive"),
        Some(_) => s.push_str("#label#:negative"),
        None => {
            s.pop();
        }
    }
    s
}

/// Writes a vectorised dataset in the review layout with feature ids as tokens.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    for d in &dataset.domains {
        let ddir = dir.join(&d.name);
        fs::create_dir_all(&ddir).map_err(|e| MranError::io(&ddir, e))?;
        let mut files: [(String, String); 3] = Default::default();
        for ex in &d.labeled {
            let slot = if ex.label == Some(1) { 0 } else { 1 };
            files[slot].1.push_str(&format_line(ex));
            files[slot].1.push('\n');
        }
        for ex in &d.unlabeled {
            files[2].1.push_str(&format_line(ex));
            files[2].1.push('\n');
        }
        files[0].0 = POSITIVE_FILE.into();
        files[1].0 = NEGATIVE_FILE.into();
        files[2].0 = UNLABELED_FILE.into();
        for (name, body) in &files {
            let path = ddir.join(name);
            fs::write(&path, body).map_err(|e| MranError::io(&path, e))?;
        }
    }
    Ok(())
}
