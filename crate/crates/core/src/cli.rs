//! Subcommand implementations behind the `mran` binary.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::info;

use crate::checkpoint;
use crate::config::{Ablation, ExperimentConfig};
use crate::data::{load_corpus, make_folds, split, synth_generate, vectorize_corpus, write_dataset, Dataset, NUM_FOLDS};
use crate::error::{MranError, Result};
use crate::gradcheck::{self, TermCheck, THRESHOLD};
use crate::training::{fit, mean, std_dev, Accuracy, LossWeights, MetricsWriter};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MranError::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| MranError::io(path, e))
}

/// The corpus named by the configuration, or the synthetic task.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match (&cfg.data_dir, cfg.synth) {
        (Some(_), true) => Err(MranError::Usage(
            "use either a data directory or the synthetic task, not both".into(),
        )),
        (None, true) => synth_generate(&cfg.synth_params, cfg.seed),
        (Some(dir), false) => {
            let raw = load_corpus(dir, &cfg.domain_names)?;
            let (dataset, vocab) = vectorize_corpus(&raw, cfg.vocab_size)?;
            create_dir(&cfg.output_dir)?;
            vocab.save(&cfg.output_dir.join("vocab.txt"))?;
            Ok(dataset)
        }
        (None, false) => Err(MranError::Usage("no data: pass --data-dir PATH or --synth".into())),
    }
}

/// Test accuracies of every (repeat, fold) run of one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSet {
    pub names: Vec<String>,
    pub runs: Vec<Accuracy>,
    /// Domains without an unlabeled file, whose training examples (labels
    /// hidden) served as the unlabeled pool.
    pub unlabeled_from_train: Vec<String>,
}

impl RunSet {
    pub fn domain_mean(&self, i: usize) -> f64 {
        mean(&self.runs.iter().map(|a| a.per_domain[i]).collect::<Vec<_>>())
    }

    pub fn domain_std(&self, i: usize) -> f64 {
        std_dev(&self.runs.iter().map(|a| a.per_domain[i]).collect::<Vec<_>>())
    }

    pub fn average_mean(&self) -> f64 {
        mean(&self.runs.iter().map(|a| a.average).collect::<Vec<_>>())
    }

    pub fn average_std(&self) -> f64 {
        std_dev(&self.runs.iter().map(|a| a.average).collect::<Vec<_>>())
    }
}

/// Seed of one fit: distinct for every repeat and fold.
pub fn run_seed(seed: u64, repeat: usize, rotation: usize) -> u64 {
    seed.wrapping_add((repeat * NUM_FOLDS + rotation) as u64)
}

/// Cross-validated training with the given weights. Each run writes
/// `metrics.csv` and `best.ckpt` under `out/repeat<r>/fold<k>/`.
pub fn run_cross_validation(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    weights: LossWeights,
    out: &Path,
) -> Result<RunSet> {
    cfg.validate()?;
    let mut train = cfg.train.clone();
    train.weights = weights;
    let spec = cfg.model_spec(dataset.dim, dataset.num_domains());
    let echo = cfg.echo();
    let mut runs = Vec::new();
    let mut borrowed = Vec::new();
    for repeat in 0..cfg.repeats {
        let plan = make_folds(dataset, cfg.seed.wrapping_add(repeat as u64))?;
        for rotation in 0..cfg.rotations {
            let dir = out.join(format!("repeat{repeat}")).join(format!("fold{rotation}"));
            create_dir(&dir)?;
            let data = split(dataset, &plan, rotation);
            for d in data.domains.iter().filter(|d| d.unlabeled_from_train) {
                if !borrowed.contains(&d.name) {
                    info!("domain `{}` has no unlabeled pool; using its training examples", d.name);
                    borrowed.push(d.name.clone());
                }
            }
            let metrics_path = dir.join("metrics.csv");
            let file = File::create(&metrics_path).map_err(|e| MranError::io(&metrics_path, e))?;
            let mut metrics = MetricsWriter::new(BufWriter::new(file)).map_err(|e| MranError::io(&metrics_path, e))?;
            let result = fit(
                spec.clone(),
                &train,
                &data,
                run_seed(cfg.seed, repeat, rotation),
                Some(&mut metrics),
            )?;
            checkpoint::save(&dir.join("best.ckpt"), &result.model, &echo)?;
            info!(
                "repeat {repeat} fold {rotation}: best epoch {}, valid {:.4}, test {:.4}",
                result.best_epoch, result.best_valid.average, result.test.average
            );
            runs.push(result.test);
        }
    }
    Ok(RunSet {
        names: dataset.names(),
        runs,
        unlabeled_from_train: borrowed,
    })
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Per-domain and average test accuracy (mean ± std over runs, in percent)
/// followed by the configuration echo.
pub fn format_summary(set: &RunSet, cfg: &ExperimentConfig) -> String {
    let width = set.names.iter().map(String::len).max().unwrap_or(0).max(6);
    let mut s = String::new();
    let _ = writeln!(s, "runs: {} ({} repeats x {} folds)", set.runs.len(), cfg.repeats, cfg.rotations);
    if !set.unlabeled_from_train.is_empty() {
        let _ = writeln!(
            s,
            "unlabeled pool taken from training examples (labels hidden) for: {}",
            set.unlabeled_from_train.join(", ")
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<width$}  accuracy", "domain");
    for (i, name) in set.names.iter().enumerate() {
        let _ = writeln!(s, "{name:<width$}  {} ± {}", pct(set.domain_mean(i)), pct(set.domain_std(i)));
    }
    let _ = writeln!(s, "{:<width$}  {} ± {}", "AVG", pct(set.average_mean()), pct(set.average_std()));
    let _ = writeln!(s);
    let _ = writeln!(s, "[config]");
    s.push_str(&cfg.echo());
    s
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunSet> {
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    create_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join("config.echo"), &cfg.echo())?;
    let set = run_cross_validation(cfg, &dataset, cfg.weights(), &cfg.output_dir)?;
    let summary = format_summary(&set, cfg);
    write_file(&cfg.output_dir.join("summary.txt"), &summary)?;
    Ok(set)
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub result: RunSet,
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let names = &first.result.names;
    let cols: Vec<usize> = names.iter().map(|n| n.len().max(6)).collect();
    let mut s = format!("{:<8}", "model");
    for (n, w) in names.iter().zip(&cols) {
        let _ = write!(s, "  {n:>w$}");
    }
    s.push_str("     AVG\n");
    for row in rows {
        let _ = write!(s, "{:<8}", row.label);
        for (i, w) in cols.iter().enumerate() {
            let _ = write!(s, "  {:>w$}", pct(row.result.domain_mean(i)));
        }
        let _ = writeln!(s, "  {:>6}", pct(row.result.average_mean()));
    }
    s
}

/// Full model plus each single ablation, on identical folds and seeds.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    if !cfg.ablations.is_empty() {
        return Err(MranError::Usage(
            "ablate runs every variant itself; drop the ablate setting".into(),
        ));
    }
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    create_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join("config.echo"), &cfg.echo())?;
    let base = cfg.train.weights;
    let mut variants: Vec<(String, String, LossWeights)> = vec![("MRAN".into(), "full".into(), base)];
    for a in Ablation::ALL {
        variants.push((a.label().into(), format!("without_{}", a.key()), a.apply(base)));
    }
    let mut rows = Vec::new();
    for (label, dir, weights) in variants {
        info!("ablation variant {label}");
        let out = cfg.output_dir.join(&dir);
        let result = run_cross_validation(cfg, &dataset, weights, &out)?;
        write_file(&out.join("summary.txt"), &format_summary(&result, cfg))?;
        rows.push(AblationRow { label, result });
    }
    write_file(&cfg.output_dir.join("ablation.txt"), &format_ablation(&rows))?;
    Ok(rows)
}

pub fn format_gradcheck(checks: &[TermCheck]) -> String {
    let mut s = String::new();
    for c in checks {
        let _ = writeln!(
            s,
            "{:<10} {:>5} coords  max rel err {:.3e}  {}",
            c.term,
            c.coordinates,
            c.max_relative_error,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    let _ = writeln!(s, "threshold {THRESHOLD:e}");
    s
}

/// Finite-difference check of every loss term (or only `term`).
pub fn cmd_gradcheck(cfg: &ExperimentConfig, term: Option<&str>) -> Result<Vec<TermCheck>> {
    if cfg.is_explicit("dropout") && cfg.model.dropout > 0.0 {
        return Err(MranError::Config(format!(
            "gradient checking needs dropout off, but dropout = {} was requested",
            cfg.model.dropout
        )));
    }
    gradcheck::run(cfg.seed, term)
}

/// Writes the synthetic task in the review-file layout.
pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dataset = synth_generate(&cfg.synth_params, cfg.seed)?;
    write_dataset(&dataset, &cfg.output_dir)?;
    write_file(&cfg.output_dir.join("config.echo"), &cfg.echo())?;
    Ok(cfg.output_dir.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(out: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.apply_text(
            "synth = true\nsynth_domains = 2\nsynth_labeled = 20\nsynth_unlabeled = 10\nsynth_dim = 6\n\
             extractor_hidden = 6\nshared_dim = 4\ndomain_dim = 3\nmax_epochs = 1\nbatch_size = 4\nk_d = 1\n\
             rotations = 2\n",
        )
        .unwrap();
        c.output_dir = out.to_path_buf();
        c
    }

    #[test]
    fn train_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let set = cmd_train(&cfg).unwrap();
        assert_eq!(set.runs.len(), 2);
        let summary = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
        assert!(summary.contains("AVG"));
        assert!(summary.contains(&cfg.echo()));
        let fold = dir.path().join("repeat0").join("fold1");
        assert!(fold.join("metrics.csv").exists());
        let ck = checkpoint::load(&fold.join("best.ckpt")).unwrap();
        assert_eq!(ck.config_echo, cfg.echo());
    }

    #[test]
    fn missing_data_is_usage_error() {
        let cfg = ExperimentConfig::default();
        assert!(matches!(load_dataset(&cfg), Err(MranError::Usage(_))));
    }

    #[test]
    fn gradcheck_refuses_dropout() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("dropout", "0.5").unwrap();
        assert!(matches!(cmd_gradcheck(&cfg, Some("l_c")), Err(MranError::Config(_))));
        let cfg = ExperimentConfig::default();
        assert!(cmd_gradcheck(&cfg, Some("l_c")).unwrap()[0].passed());
    }

    #[test]
    fn summary_statistics() {
        let set = RunSet {
            names: vec!["a".into(), "b".into()],
            runs: vec![
                Accuracy::from_per_domain(vec![0.8, 0.9]),
                Accuracy::from_per_domain(vec![0.6, 0.7]),
            ],
            unlabeled_from_train: Vec::new(),
        };
        assert!((set.domain_mean(0) - 0.7).abs() < 1e-12);
        assert!((set.average_mean() - 0.75).abs() < 1e-12);
        assert!((set.average_std() - 0.2f64.hypot(0.0) / 2f64.sqrt()).abs() < 1e-12);
        let text = format_summary(&set, &ExperimentConfig::default());
        assert!(text.contains("AVG     75.00 ± 14.14"), "{text}");
        assert!(!text.contains("unlabeled pool"));
        let flagged = RunSet {
            unlabeled_from_train: vec!["b".into()],
            ..set
        };
        let text = format_summary(&flagged, &ExperimentConfig::default());
        assert!(text.contains("unlabeled pool taken from training examples (labels hidden) for: b"));
    }

    #[test]
    fn ablation_table_has_one_row_per_variant() {
        let set = RunSet {
            names: vec!["books".into()],
            runs: vec![Accuracy::from_per_domain(vec![0.5])],
            unlabeled_from_train: Vec::new(),
        };
        let rows: Vec<AblationRow> = ["MRAN", "w/o DM"]
            .iter()
            .map(|l| AblationRow {
                label: l.to_string(),
                result: set.clone(),
            })
            .collect();
        let t = format_ablation(&rows);
        assert_eq!(t.lines().count(), 3);
        assert!(t.lines().nth(2).unwrap().starts_with("w/o DM"));
    }
}
