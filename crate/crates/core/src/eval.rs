//! Distribution metrics on enumerable supports, chain diagnostics,
//! segmentation scores and the ablation sweep harness.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::EnumerableDataset;
use crate::error::{Error, Result};
use crate::predictor::{Cond, Predictor};
use crate::rng::derive_seed;
use crate::sampler::{Chain, Conditioning, GumbelMode, Sampler, SamplerConfig};
use crate::tokens::TokenSeq;

/// Stated in every report: exact distances on an enumerable support stand
/// in for perceptual sample-quality scores.
pub const METRIC_BASIS: &str =
    "exact total variation and KL against an enumerable ground-truth distribution (no perceptual metrics)";

pub fn count_samples(samples: &[TokenSeq]) -> HashMap<TokenSeq, u64> {
    let mut counts = HashMap::new();
    for s in samples {
        *counts.entry(s.clone()).or_insert(0) += 1;
    }
    counts
}

/// Entries in key order. Sums run in this order so results do not depend
/// on hash-map iteration order.
fn sorted<V: Copy>(map: &HashMap<TokenSeq, V>) -> Vec<(&TokenSeq, V)> {
    let mut entries: Vec<_> = map.iter().map(|(k, &v)| (k, v)).collect();
    entries.sort_unstable_by(|a, b| a.0.cmp(b.0));
    entries
}

/// `1/2 sum |p - q|` over the union of supports.
pub fn tv_between(p: &HashMap<TokenSeq, f64>, q: &HashMap<TokenSeq, f64>) -> f64 {
    let mut total = 0.0;
    for (x, pv) in sorted(p) {
        total += (pv - q.get(x).copied().unwrap_or(0.0)).abs();
    }
    for (x, qv) in sorted(q) {
        if !p.contains_key(x) {
            total += qv;
        }
    }
    (0.5 * total).clamp(0.0, 1.0)
}

fn normalize(empirical: &HashMap<TokenSeq, u64>) -> Result<HashMap<TokenSeq, f64>> {
    let n: u64 = empirical.values().sum();
    if n == 0 {
        return Err(Error::Input("empirical distribution is empty".into()));
    }
    Ok(empirical
        .iter()
        .map(|(k, &c)| (k.clone(), c as f64 / n as f64))
        .collect())
}

/// Total variation between sample counts and the dataset law.
pub fn tv_distance(empirical: &HashMap<TokenSeq, u64>, exact: &EnumerableDataset) -> Result<f64> {
    let p = normalize(empirical)?;
    Ok(tv_between(&p, &crate::datasets::distribution(exact)))
}

/// `(KL(p_hat || p), leakage)`. Leakage is the empirical mass on sequences
/// outside the support; the KL is taken over the in-support part,
/// renormalized, and is `None` when nothing lands in the support.
pub fn kl_with_leakage(
    empirical: &HashMap<TokenSeq, u64>,
    exact: &EnumerableDataset,
) -> Result<(Option<f64>, f64)> {
    let p_hat = normalize(empirical)?;
    let p_hat = sorted(&p_hat);
    let inside: f64 = p_hat
        .iter()
        .filter(|(x, _)| exact.prob_of(x) > 0.0)
        .map(|(_, v)| v)
        .sum();
    let leakage = (1.0 - inside).max(0.0);
    if inside <= 0.0 {
        return Ok((None, leakage));
    }
    let mut kl = 0.0;
    for &(x, v) in &p_hat {
        let p = exact.prob_of(x);
        if p > 0.0 {
            let q = v / inside;
            kl += q * (q / p).ln();
        }
    }
    Ok((Some(kl.max(0.0)), leakage))
}

/// Mean masked fraction at each snapshot index, with the first chain's
/// snapshot times.
pub fn mask_fraction_curve(chains: &[Chain]) -> Result<Vec<(f64, f64)>> {
    let first = chains
        .first()
        .ok_or_else(|| Error::Input("no chains".into()))?;
    let steps = first.snapshots.len();
    if chains.iter().any(|c| c.snapshots.len() != steps) {
        return Err(Error::Input("chains differ in length".into()));
    }
    Ok((0..steps)
        .map(|i| {
            let total: f64 = chains
                .iter()
                .map(|c| c.snapshots[i].masked_count as f64 / c.snapshots[i].tokens.len() as f64)
                .sum();
            (first.snapshots[i].t, total / chains.len() as f64)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    /// `None` for classes absent from both prediction and truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
}

pub fn segmentation_scores(
    predicted: &[u32],
    truth: &[u32],
    num_classes: usize,
) -> Result<SegmentationScores> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::Shape(format!(
            "prediction has {} labels, truth {}",
            predicted.len(),
            truth.len()
        )));
    }
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p as usize >= num_classes || t as usize >= num_classes {
            return Err(Error::Input(format!(
                "label out of range for {num_classes} classes"
            )));
        }
        if p == t {
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[t as usize] += 1;
        }
    }
    let per_class_iou: Vec<Option<f64>> = inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
        .collect();
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let mean_iou = present.iter().sum::<f64>() / present.len().max(1) as f64;
    let correct = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(SegmentationScores {
        per_class_iou,
        mean_iou,
        pixel_accuracy: correct as f64 / truth.len() as f64,
    })
}

/// One evaluated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metric_basis: String,
    pub point: usize,
    pub config_hash: String,
    pub seed: u64,
    pub nfe: usize,
    pub omega: f64,
    pub temperature: f64,
    pub gumbel: GumbelMode,
    pub samples: usize,
    pub tv: Option<f64>,
    pub kl: Option<f64>,
    pub leakage_mass: Option<f64>,
    /// Mean dataset-class posterior of the samples for the requested class.
    pub class_mass: Option<f64>,
    pub masked_fraction_curve: Option<Vec<(f64, f64)>>,
    pub per_class_iou: Option<Vec<Option<f64>>>,
    pub mean_iou: Option<f64>,
    pub accuracy: Option<f64>,
    pub residual_mask_fraction: Option<f64>,
    #[serde(default)]
    pub extra: BTreeMap<String, f64>,
    pub error: Option<String>,
}

impl MetricsReport {
    pub fn new(point: usize, config: &SamplerConfig, samples: usize) -> Self {
        Self {
            metric_basis: METRIC_BASIS.to_string(),
            point,
            config_hash: config_hash(config),
            seed: config.seed,
            nfe: config.nfe,
            omega: config.cfg_omega,
            temperature: config.temperature,
            gumbel: config.gumbel_mode,
            samples,
            tv: None,
            kl: None,
            leakage_mass: None,
            class_mass: None,
            masked_fraction_curve: None,
            per_class_iou: None,
            mean_iou: None,
            accuracy: None,
            residual_mask_fraction: None,
            extra: BTreeMap::new(),
            error: None,
        }
    }

    /// Fills `tv`, `kl` and `leakage_mass` from samples of the full sequence.
    pub fn with_distribution(
        mut self,
        samples: &[TokenSeq],
        dataset: &EnumerableDataset,
    ) -> Result<Self> {
        let counts = count_samples(samples);
        self.tv = Some(tv_distance(&counts, dataset)?);
        let (kl, leak) = kl_with_leakage(&counts, dataset)?;
        self.kl = kl;
        self.leakage_mass = Some(leak);
        Ok(self)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("reports serialize")
    }
}

/// Hex SHA-256 of the config's canonical JSON.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let value = serde_json::to_value(config).expect("configs serialize");
    let digest = Sha256::digest(value.to_string().as_bytes());
    hex::encode(digest)
}

/// Axes of an ablation sweep; points are the cartesian product with `nfe`
/// varying slowest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub nfe: Vec<usize>,
    pub temperature: Vec<f64>,
    pub cfg_omega: Vec<f64>,
    pub gumbel: Vec<GumbelMode>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            nfe: vec![4, 16, 64, 256],
            temperature: vec![1.0],
            cfg_omega: vec![0.0],
            gumbel: vec![GumbelMode::None],
        }
    }
}

impl SweepGrid {
    pub fn points(&self, base: &SamplerConfig) -> Vec<SamplerConfig> {
        let mut out = Vec::new();
        for &nfe in &self.nfe {
            for &temperature in &self.temperature {
                for &cfg_omega in &self.cfg_omega {
                    for &gumbel_mode in &self.gumbel {
                        let index = out.len() as u64;
                        out.push(SamplerConfig {
                            nfe,
                            temperature,
                            cfg_omega,
                            gumbel_mode,
                            seed: derive_seed(base.seed, index),
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

/// What a sweep point samples and scores.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepTask {
    pub chains: usize,
    /// Class to condition on; scored by `class_mass`.
    pub class: Option<u32>,
}

/// Samples and scores one configuration.
pub fn evaluate_point(
    point: usize,
    config: &SamplerConfig,
    predictor: &dyn Predictor,
    dataset: &EnumerableDataset,
    task: &SweepTask,
) -> Result<MetricsReport> {
    let sampler = Sampler::new(predictor, config.clone())?;
    let ctx = Conditioning {
        cond: task.class.map_or(Cond::Null, Cond::Class),
        observed: None,
    };
    let batch = sampler.run_batch(task.chains, |_| ctx.clone())?;
    let mut report = MetricsReport::new(point, config, task.chains)
        .with_distribution(&batch.samples, dataset)?;
    report.masked_fraction_curve = Some(batch.mask_fraction_curve());
    report.residual_mask_fraction = Some(batch.mean_residual_fraction());
    if let Some(c) = task.class {
        let mass: f64 = batch
            .samples
            .iter()
            .map(|s| dataset.class_posterior(s, c))
            .sum();
        report.class_mass = Some(mass / task.chains as f64);
    }
    Ok(report)
}

/// Runs every grid point, appending one JSON line per point to `out` as it
/// finishes. Points already present in `out` with a matching config hash
/// are reused, so an interrupted sweep resumes where it stopped. A failing
/// point yields a report carrying the error.
pub fn sweep(
    grid: &SweepGrid,
    base: &SamplerConfig,
    predictor: &dyn Predictor,
    dataset: &EnumerableDataset,
    task: &SweepTask,
    out: Option<&Path>,
) -> Result<Vec<MetricsReport>> {
    let points = grid.points(base);
    let mut done = match out {
        Some(path) if path.exists() => load_reports(path)?,
        _ => Vec::new(),
    };
    // keep only the valid prefix of earlier work
    let valid = done
        .iter()
        .zip(&points)
        .enumerate()
        .take_while(|(i, (r, cfg))| r.point == *i && r.config_hash == config_hash(cfg))
        .count();
    done.truncate(valid);
    if let Some(path) = out {
        let text: String = done.iter().map(|r| r.to_json_line() + "\n").collect();
        fs::write(path, text)?;
    }
    for (i, cfg) in points.iter().enumerate().skip(valid) {
        let report = evaluate_point(i, cfg, predictor, dataset, task).unwrap_or_else(|e| {
            let mut r = MetricsReport::new(i, cfg, task.chains);
            r.error = Some(e.to_string());
            r
        });
        if let Some(path) = out {
            let mut file = OpenOptions::new().append(true).create(true).open(path)?;
            writeln!(file, "{}", report.to_json_line())?;
        }
        done.push(report);
    }
    Ok(done)
}

pub fn load_reports(path: &Path) -> Result<Vec<MetricsReport>> {
    let text = fs::read_to_string(path)?;
    let mut reports = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => reports.push(r),
            // a torn final line from an interrupted write
            Err(_) if i + 1 == text.lines().count() => break,
            Err(e) => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })
            }
        }
    }
    Ok(reports)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

/// Aligned plain-text summary of a report set.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let header = [
        "point",
        "nfe",
        "temp",
        "omega",
        "gumbel",
        "tv",
        "kl",
        "leak",
        "class_mass",
        "residual",
        "error",
    ];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.point.to_string(),
                r.nfe.to_string(),
                format!("{}", r.temperature),
                format!("{}", r.omega),
                r.gumbel.to_string(),
                fmt_opt(r.tv),
                fmt_opt(r.kl),
                fmt_opt(r.leakage_mass),
                fmt_opt(r.class_mass),
                fmt_opt(r.residual_mask_fraction),
                r.error.clone().unwrap_or_default(),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<String>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = format!("# {METRIC_BASIS}\n");
    out.push_str(&line(header.iter().map(|s| s.to_string()).collect()));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{build, DatasetSpec, TableEntry};
    use crate::rng::seeded;

    fn two_point() -> EnumerableDataset {
        let spec = DatasetSpec::Table {
            length: 1,
            data_size: 3,
            entries: vec![
                TableEntry {
                    tokens: vec![0],
                    prob: 0.7,
                    class: None,
                },
                TableEntry {
                    tokens: vec![1],
                    prob: 0.3,
                    class: None,
                },
            ],
            num_classes: 0,
        };
        build(&spec, &mut seeded(0)).unwrap()
    }

    fn counts(pairs: &[(u32, u64)]) -> HashMap<TokenSeq, u64> {
        pairs
            .iter()
            .map(|&(t, c)| (TokenSeq::new(vec![t]), c))
            .collect()
    }

    #[test]
    fn tv_examples() {
        let ds = two_point();
        assert!(tv_distance(&counts(&[(0, 7), (1, 3)]), &ds).unwrap().abs() < 1e-12);
        assert_eq!(tv_distance(&counts(&[(2, 5)]), &ds).unwrap(), 1.0);
        assert!((tv_distance(&counts(&[(0, 1), (1, 1)]), &ds).unwrap() - 0.2).abs() < 1e-12);
        assert!(tv_distance(&HashMap::new(), &ds).is_err());
    }

    #[test]
    fn kl_and_leakage() {
        let ds = two_point();
        let (kl, leak) = kl_with_leakage(&counts(&[(0, 7), (1, 3)]), &ds).unwrap();
        assert!(kl.unwrap().abs() < 1e-12 && leak == 0.0);
        let (kl, leak) = kl_with_leakage(&counts(&[(0, 1), (1, 1), (2, 2)]), &ds).unwrap();
        let expected = 0.5 * (0.5f64 / 0.7).ln() + 0.5 * (0.5f64 / 0.3).ln();
        assert!((kl.unwrap() - expected).abs() < 1e-12);
        assert!((leak - 0.5).abs() < 1e-12);
        let (kl, leak) = kl_with_leakage(&counts(&[(2, 2)]), &ds).unwrap();
        assert_eq!((kl, leak), (None, 1.0));
    }

    #[test]
    fn metrics_do_not_depend_on_map_order() {
        let spec = DatasetSpec::Markov(crate::datasets::MarkovSpec::uniform(4, 3));
        let ds = build(&spec, &mut seeded(0)).unwrap();
        let mut rng = seeded(1);
        let samples: Vec<TokenSeq> = (0..500)
            .map(|_| ds.support()[ds.sample_index(&mut rng)].clone())
            .collect();
        let first = (
            tv_distance(&count_samples(&samples), &ds).unwrap(),
            kl_with_leakage(&count_samples(&samples), &ds).unwrap(),
        );
        for _ in 0..20 {
            // every new map gets a fresh hasher seed and iteration order
            let again = (
                tv_distance(&count_samples(&samples), &ds).unwrap(),
                kl_with_leakage(&count_samples(&samples), &ds).unwrap(),
            );
            assert_eq!(first.0.to_bits(), again.0.to_bits());
            assert_eq!(first.1 .0.map(f64::to_bits), again.1 .0.map(f64::to_bits));
        }
    }

    #[test]
    fn tv_is_symmetric() {
        let p: HashMap<TokenSeq, f64> =
            [(TokenSeq::new(vec![0]), 0.2), (TokenSeq::new(vec![1]), 0.8)].into();
        let q: HashMap<TokenSeq, f64> =
            [(TokenSeq::new(vec![1]), 0.5), (TokenSeq::new(vec![2]), 0.5)].into();
        assert_eq!(tv_between(&p, &q), tv_between(&q, &p));
        assert_eq!(tv_between(&p, &p), 0.0);
    }

    #[test]
    fn segmentation_examples() {
        let s = segmentation_scores(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap();
        assert_eq!(s.per_class_iou, vec![Some(1.0), Some(1.0)]);
        assert_eq!((s.mean_iou, s.pixel_accuracy), (1.0, 1.0));
        // truth foreground {0, 1}, prediction foreground {1, 2}
        let s = segmentation_scores(&[0, 1, 1, 0], &[1, 1, 0, 0], 2).unwrap();
        assert!((s.per_class_iou[1].unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let s = segmentation_scores(&[1, 1, 0, 0], &[0, 0, 0, 0], 3).unwrap();
        assert_eq!(s.per_class_iou[1], Some(0.0));
        assert_eq!(s.per_class_iou[2], None);
        assert!(segmentation_scores(&[0, 1], &[0], 2).is_err());
    }

    #[test]
    fn grid_points_derive_seeds() {
        let grid = SweepGrid {
            nfe: vec![4, 8],
            temperature: vec![1.0, 0.5],
            cfg_omega: vec![0.0],
            gumbel: vec![GumbelMode::None],
        };
        let base = SamplerConfig {
            seed: 7,
            ..SamplerConfig::default()
        };
        let points = grid.points(&base);
        assert_eq!(points.len(), 4);
        assert_eq!((points[1].nfe, points[1].temperature), (4, 0.5));
        assert_eq!(points[2].seed, derive_seed(7, 2));
        assert_ne!(config_hash(&points[0]), config_hash(&points[1]));
    }

    #[test]
    fn table_is_aligned() {
        let cfg = SamplerConfig::default();
        let mut a = MetricsReport::new(0, &cfg, 10);
        a.tv = Some(0.25);
        let b = MetricsReport::new(1, &cfg, 10);
        let table = render_table(&[a, b]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[2].contains("0.2500"));
    }
}
