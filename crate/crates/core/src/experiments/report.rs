//! Scoring a corpus with a bundle and summarising the result.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corpus::{alignment_score, Corpus, CorpusConfig, CorpusEntry, Split};
use super::stats::{jonckheere_terpstra_decreasing, pearson, quartile_split, welch_t_test, TrendTestResult};
use crate::engine::{ExpertBundle, LatentSpace};
use crate::error::{EmoeError, Result};
use crate::text::fnv1a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    /// Seed of every prompt's starting latent.
    pub seed: u64,
    pub space: LatentSpace,
    /// Splits pooled for the quartile analysis.
    pub quartile_splits: Vec<Split>,
    /// Run the full rollout and score alignment for every prompt.
    pub rollout: bool,
    pub histogram_bins: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            seed: 0,
            space: LatentSpace::MidPost,
            quartile_splits: vec![Split::InDist, Split::OodUnseenToken],
            rollout: true,
            histogram_bins: 20,
        }
    }
}

impl ExperimentConfig {
    pub fn hash(&self) -> Result<String> {
        Ok(format!("{:016x}", fnv1a(serde_json::to_string(self)?.as_bytes())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt: String,
    pub language_tag: String,
    pub split: Split,
    pub source: String,
    pub eu: f64,
    pub reported: f64,
    pub alignment: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population mean and standard deviation.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuartileStats {
    /// 1-based: Q1 holds the lowest uncertainties.
    pub quartile: usize,
    pub count: usize,
    pub reported_min: f64,
    pub reported_max: f64,
    pub alignment: MeanStd,
    pub chars: MeanStd,
    pub words: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuartileReport {
    pub splits: Vec<Split>,
    pub quartiles: Vec<QuartileStats>,
    /// Mean alignment never rises from Q1 to Q4.
    pub alignment_non_increasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTests {
    /// JT against decreasing alignment across Q1..Q4.
    pub quartile_trend: Option<TrendTestResult>,
    /// Welch, reported uncertainty of `ood_remap` above `in_dist`.
    pub ood_remap_vs_in_dist: Option<TrendTestResult>,
    pub ood_unseen_vs_in_dist: Option<TrendTestResult>,
    /// Correlation of reported uncertainty with alignment over the quartile pool.
    pub pearson_reported_alignment: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: Split,
    pub count: usize,
    pub reported: MeanStd,
    pub alignment: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub split: Split,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub seed: u64,
    pub space: LatentSpace,
    pub per_prompt: Vec<PromptRecord>,
    pub splits: Vec<SplitSummary>,
    pub quartiles: Option<QuartileReport>,
    pub tests: ExperimentTests,
    pub histogram: Vec<HistogramBin>,
}

fn score_entry(bundle: &ExpertBundle, entry: &CorpusEntry, config: &ExperimentConfig) -> Result<PromptRecord> {
    let g = &bundle.weights().geometry;
    let steps = bundle.schedule().steps();
    let (estimate, alignment) = if config.rollout {
        let r = bundle.emoe_rollout(&entry.prompt, config.seed, steps, config.space)?;
        let source = entry.source_prompt()?;
        let total = r
            .latents
            .iter()
            .map(|z| alignment_score(z, &source, g))
            .sum::<Result<f64>>()?;
        (r.estimate, Some(total / r.latents.len() as f64))
    } else {
        (bundle.estimate_uncertainty(&entry.prompt, config.seed, config.space)?, None)
    };
    Ok(PromptRecord {
        prompt: entry.prompt.text.clone(),
        language_tag: entry.prompt.language_tag.clone(),
        split: entry.split,
        source: entry.source.clone(),
        eu: estimate.eu,
        reported: estimate.reported,
        alignment,
    })
}

/// Scores every prompt, in corpus order.
pub fn score_corpus(bundle: &ExpertBundle, corpus: &Corpus, config: &ExperimentConfig) -> Result<Vec<PromptRecord>> {
    corpus
        .entries
        .par_iter()
        .map(|e| score_entry(bundle, e, config))
        .collect()
}

fn reported_of(records: &[PromptRecord], split: Split) -> Vec<f64> {
    records.iter().filter(|r| r.split == split).map(|r| r.reported).collect()
}

fn welch_if_possible(a: &[f64], b: &[f64]) -> Result<Option<TrendTestResult>> {
    if a.len() < 2 || b.len() < 2 {
        return Ok(None);
    }
    welch_t_test(a, b).map(Some)
}

fn quartile_report(records: &[PromptRecord], splits: &[Split]) -> Result<Option<(QuartileReport, Vec<Vec<f64>>)>> {
    let pool: Vec<&PromptRecord> = records
        .iter()
        .filter(|r| splits.contains(&r.split) && r.alignment.is_some())
        .collect();
    if pool.len() < 4 {
        return Ok(None);
    }
    let reported: Vec<f64> = pool.iter().map(|r| r.reported).collect();
    let bins = quartile_split(&reported)?;
    let mut groups: Vec<Vec<&PromptRecord>> = vec![Vec::new(); 4];
    for (r, q) in pool.iter().zip(bins) {
        groups[q].push(r);
    }
    let alignment_groups: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| g.iter().filter_map(|r| r.alignment).collect())
        .collect();
    let quartiles: Vec<QuartileStats> = groups
        .iter()
        .zip(&alignment_groups)
        .enumerate()
        .map(|(q, (g, align))| {
            let rep: Vec<f64> = g.iter().map(|r| r.reported).collect();
            let chars: Vec<f64> = g.iter().map(|r| r.prompt.chars().count() as f64).collect();
            let words: Vec<f64> = g.iter().map(|r| r.prompt.split_whitespace().count() as f64).collect();
            QuartileStats {
                quartile: q + 1,
                count: g.len(),
                reported_min: rep.iter().copied().fold(f64::INFINITY, f64::min),
                reported_max: rep.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                alignment: MeanStd::of(align),
                chars: MeanStd::of(&chars),
                words: MeanStd::of(&words),
            }
        })
        .collect();
    let alignment_non_increasing = quartiles
        .windows(2)
        .all(|w| w[0].alignment.mean >= w[1].alignment.mean);
    Ok(Some((
        QuartileReport {
            splits: splits.to_vec(),
            quartiles,
            alignment_non_increasing,
        },
        alignment_groups,
    )))
}

fn histogram(records: &[PromptRecord], bins: usize) -> Vec<HistogramBin> {
    let bins = bins.max(1);
    let hi = records.iter().map(|r| r.reported).fold(0.0, f64::max);
    let width = if hi > 0.0 { hi / bins as f64 } else { 1.0 };
    let mut out = Vec::new();
    for split in Split::ALL {
        let values = reported_of(records, split);
        if values.is_empty() {
            continue;
        }
        let mut counts = vec![0usize; bins];
        for v in values {
            counts[((v / width) as usize).min(bins - 1)] += 1;
        }
        for (b, count) in counts.into_iter().enumerate() {
            out.push(HistogramBin {
                split,
                lo: b as f64 * width,
                hi: (b + 1) as f64 * width,
                count,
            });
        }
    }
    out
}

/// Summarises already scored records.
pub fn build_report(records: Vec<PromptRecord>, config: &ExperimentConfig) -> Result<ExperimentReport> {
    if records.is_empty() {
        return Err(EmoeError::Empty("corpus"));
    }
    if records.iter().all(|r| r.eu == 0.0) {
        return Err(EmoeError::DegenerateEnsemble);
    }
    let in_dist = reported_of(&records, Split::InDist);
    let tests_base = ExperimentTests {
        quartile_trend: None,
        ood_remap_vs_in_dist: welch_if_possible(&reported_of(&records, Split::OodRemap), &in_dist)?,
        ood_unseen_vs_in_dist: welch_if_possible(&reported_of(&records, Split::OodUnseenToken), &in_dist)?,
        pearson_reported_alignment: None,
    };
    let (quartiles, tests) = match quartile_report(&records, &config.quartile_splits)? {
        Some((report, groups)) => {
            let (x, y): (Vec<f64>, Vec<f64>) = records
                .iter()
                .filter(|r| config.quartile_splits.contains(&r.split))
                .filter_map(|r| r.alignment.map(|a| (r.reported, a)))
                .unzip();
            let tests = ExperimentTests {
                quartile_trend: Some(jonckheere_terpstra_decreasing(&groups)?),
                pearson_reported_alignment: pearson(&x, &y).ok(),
                ..tests_base
            };
            (Some(report), tests)
        }
        None => (None, tests_base),
    };
    let splits = Split::ALL
        .into_iter()
        .filter_map(|split| {
            let rs: Vec<&PromptRecord> = records.iter().filter(|r| r.split == split).collect();
            if rs.is_empty() {
                return None;
            }
            let rep: Vec<f64> = rs.iter().map(|r| r.reported).collect();
            let align: Vec<f64> = rs.iter().filter_map(|r| r.alignment).collect();
            Some(SplitSummary {
                split,
                count: rs.len(),
                reported: MeanStd::of(&rep),
                alignment: (!align.is_empty()).then(|| MeanStd::of(&align)),
            })
        })
        .collect();
    Ok(ExperimentReport {
        config_hash: config.hash()?,
        seed: config.seed,
        space: config.space,
        histogram: histogram(&records, config.histogram_bins),
        per_prompt: records,
        splits,
        quartiles,
        tests,
    })
}

pub fn run_experiment(bundle: &ExpertBundle, corpus: &Corpus, config: &ExperimentConfig) -> Result<ExperimentReport> {
    if corpus.is_empty() {
        return Err(EmoeError::Empty("corpus"));
    }
    build_report(score_corpus(bundle, corpus, config)?, config)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?)
}

/// Writes `report.json`, `per_prompt.csv`, `quartiles.csv` and
/// `histogram.csv` into `dir`.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(report, &dir.join("report.json"))?;

    let mut w = csv_writer(&dir.join("per_prompt.csv"))?;
    w.write_record(["prompt", "language_tag", "split", "eu", "reported", "alignment"])?;
    for r in &report.per_prompt {
        w.write_record([
            r.prompt.clone(),
            r.language_tag.clone(),
            r.split.to_string(),
            r.eu.to_string(),
            r.reported.to_string(),
            r.alignment.map(|a| a.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    let mut w = csv_writer(&dir.join("quartiles.csv"))?;
    w.write_record([
        "quartile",
        "count",
        "reported_min",
        "reported_max",
        "alignment_mean",
        "alignment_std",
        "chars_mean",
        "words_mean",
    ])?;
    for q in report.quartiles.iter().flat_map(|q| &q.quartiles) {
        w.write_record([
            q.quartile.to_string(),
            q.count.to_string(),
            q.reported_min.to_string(),
            q.reported_max.to_string(),
            q.alignment.mean.to_string(),
            q.alignment.std.to_string(),
            q.chars.mean.to_string(),
            q.words.mean.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv_writer(&dir.join("histogram.csv"))?;
    w.write_record(["split", "lo", "hi", "count"])?;
    for b in &report.histogram {
        w.write_record([b.split.to_string(), b.lo.to_string(), b.hi.to_string(), b.count.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Mean reported uncertainty per split, for quick summaries.
pub fn split_means(records: &[PromptRecord]) -> BTreeMap<Split, f64> {
    Split::ALL
        .into_iter()
        .filter_map(|s| {
            let v = reported_of(records, s);
            (!v.is_empty()).then(|| (s, v.iter().sum::<f64>() / v.len() as f64))
        })
        .collect()
}
