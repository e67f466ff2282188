//! Modality contributions at corpus, dimension, and sentence level, plus
//! k-means clustering of per-sentence contribution profiles.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{write_json, Stamp};
use crate::corpus::MiscLabel;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::fusion::SelectionMap;
use crate::modality::ModalityId;
use crate::model::{Inference, MaleficModel};

pub const KMEANS_RESTARTS: usize = 20;
pub const K_RANGE: (usize, usize) = (2, 10);
const KMEANS_MAX_ITER: usize = 300;
pub const HISTOGRAM_BINS: usize = 10;

/// Share of fused dimensions taken from each of `m` modalities.
pub fn contribution_profile(selection: &SelectionMap, m: usize) -> Vec<f64> {
    let c = selection.chosen.len() as f64;
    selection.counts(m).into_iter().map(|n| n as f64 / c).collect()
}

/// Mean contribution profile over samples.
pub fn overall_contribution(selections: &[SelectionMap], m: usize) -> Result<Vec<f64>> {
    if selections.is_empty() {
        return Err(Error::Empty("selection maps"));
    }
    let mut total = vec![0.0; m];
    for s in selections {
        for (t, q) in total.iter_mut().zip(contribution_profile(s, m)) {
            *t += q;
        }
    }
    let n = selections.len() as f64;
    Ok(total.into_iter().map(|t| t / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Specialization {
    /// `frequency[m][d]`: fraction of samples taking dimension `d` from
    /// modality `m`.
    pub frequency: Vec<Vec<f64>>,
    /// `(modality index, dimension)` pairs selected in every sample.
    pub specialized: Vec<(usize, usize)>,
    /// `(modality index, dimension)` pairs never selected.
    pub dead: Vec<(usize, usize)>,
}

impl Specialization {
    /// Mean over dimensions for every modality.
    pub fn dimension_mean(&self) -> Vec<f64> {
        self.frequency
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len() as f64)
            .collect()
    }
}

/// Per-dimension selection frequencies.
pub fn dimension_specialization(selections: &[SelectionMap], m: usize) -> Result<Specialization> {
    let first = selections.first().ok_or(Error::Empty("selection maps"))?;
    let c = first.chosen.len();
    if selections.iter().any(|s| s.chosen.len() != c) {
        return Err(Error::Parameter("selection maps differ in fused dimension".into()));
    }
    let mut counts = vec![vec![0usize; c]; m];
    for s in selections {
        for (d, &i) in s.chosen.iter().enumerate() {
            counts[i][d] += 1;
        }
    }
    let n = selections.len();
    let mut specialized = Vec::new();
    let mut dead = Vec::new();
    for (i, row) in counts.iter().enumerate() {
        for (d, &k) in row.iter().enumerate() {
            if k == n {
                specialized.push((i, d));
            } else if k == 0 {
                dead.push((i, d));
            }
        }
    }
    let frequency = counts
        .into_iter()
        .map(|row| row.into_iter().map(|k| k as f64 / n as f64).collect())
        .collect();
    Ok(Specialization {
        frequency,
        specialized,
        dead,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd iterations from the given centroids until assignments settle.
/// Inertia never increases along the way.
pub fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> KMeansFit {
    let dim = points[0].len();
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    for _ in 0..KMEANS_MAX_ITER {
        let k = centroids.len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut sizes = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            sizes[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if sizes[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / sizes[j] as f64).collect();
            }
        }
        let next: Vec<usize> = points
            .iter()
            .zip(&assignments)
            .map(|(p, &a)| {
                let (j, d) = nearest(p, &centroids);
                // Keep the current cluster on ties so the loop terminates.
                if d < sq_dist(p, &centroids[a]) {
                    j
                } else {
                    a
                }
            })
            .collect();
        if next == assignments {
            break;
        }
        assignments = next;
    }
    let inertia = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum();
    KMeansFit {
        centroids,
        assignments,
        inertia,
    }
}

/// Adds k-means++ centers to `centroids` until it holds `k`.
fn plus_plus(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    if centroids.is_empty() {
        centroids.push(points[rng.random_range(0..points.len())].clone());
    }
    while centroids.len() < k {
        let weights: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = points.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                acc += w;
                if u < acc && *w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[pick].clone());
    }
    centroids
}

/// Best of `restarts` k-means++ runs. With `warm` centroids from a fit with
/// fewer clusters, one extra run starts from them, which keeps the best
/// inertia non-increasing in `k`.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, warm: Option<&[Vec<f64>]>, seed: u64) -> Result<KMeansFit> {
    if k == 0 || points.len() < k {
        return Err(Error::Parameter(format!("k-means with k = {k} on {} points", points.len())));
    }
    let mut runs: Vec<KMeansFit> = (0..restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            lloyd(points, plus_plus(points, Vec::new(), k, &mut rng))
        })
        .collect();
    if let Some(w) = warm.filter(|w| !w.is_empty() && w.len() < k) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        runs.push(lloyd(points, plus_plus(points, w.to_vec(), k, &mut rng)));
    }
    Ok(runs
        .into_iter()
        .reduce(|best, r| if r.inertia < best.inertia { r } else { best })
        .expect("at least one run"))
}

/// Mean silhouette (euclidean). Points in singleton clusters score 0.
pub fn silhouette(points: &[Vec<f64>], assignments: &[usize]) -> f64 {
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return 0.0;
    }
    // Collect before summing so the float reduction order is fixed.
    let scores: Vec<f64> = (0..points.len())
        .into_par_iter()
        .map(|i| {
            let own = assignments[i];
            if sizes[own] <= 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for (j, p) in points.iter().enumerate() {
                if j != i {
                    sums[assignments[j]] += sq_dist(&points[i], p).sqrt();
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .collect();
    scores.iter().sum::<f64>() / points.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    /// False when the inertia curve is flat (e.g. identical points) and no
    /// elbow can be claimed; `k` is then the smallest candidate.
    pub elbow_found: bool,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub silhouette: f64,
    /// `(k, best inertia)` from `k_min - 1` (at least 1) to `k_max`.
    pub inertia_curve: Vec<(usize, f64)>,
    /// Fraction of points per cluster.
    pub cluster_shares: Vec<f64>,
}

/// Fits k-means over `k_min - 1 ..= k_max` and picks the elbow as the
/// candidate `k` in `k_min ..= k_max - 1` with the largest second difference
/// `I(k-1) - 2 I(k) + I(k+1)` of the inertia curve.
pub fn cluster_contributions(profiles: &[Vec<f64>], k_range: (usize, usize), restarts: usize, seed: u64) -> Result<ClusterReport> {
    let (k_min, k_max) = k_range;
    if k_min < 2 || k_max <= k_min {
        return Err(Error::Parameter(format!("invalid k range {k_min}..={k_max}")));
    }
    if profiles.len() < k_max {
        return Err(Error::Parameter(format!(
            "{} profiles cannot be split into {k_max} clusters",
            profiles.len()
        )));
    }
    let mut fits: Vec<(usize, KMeansFit)> = Vec::new();
    for k in (k_min - 1)..=k_max {
        let warm = fits.last().map(|(_, f)| f.centroids.as_slice());
        let fit = kmeans(profiles, k, restarts, warm, seed.wrapping_add(k as u64))?;
        fits.push((k, fit));
    }
    let curve: Vec<(usize, f64)> = fits.iter().map(|(k, f)| (*k, f.inertia)).collect();
    let scale = curve[0].1;
    let mut best: Option<(usize, f64)> = None;
    for w in curve.windows(3) {
        let second = w[0].1 - 2.0 * w[1].1 + w[2].1;
        if best.is_none_or(|(_, s)| second > s) {
            best = Some((w[1].0, second));
        }
    }
    let elbow_found = scale > 1e-12 && best.is_some_and(|(_, s)| s > 1e-12 * scale);
    let k = if elbow_found { best.expect("candidate").0 } else { k_min };
    let fit = fits.into_iter().find(|(kk, _)| *kk == k).expect("fitted").1;
    let mut shares = vec![0.0; k];
    for &a in &fit.assignments {
        shares[a] += 1.0 / profiles.len() as f64;
    }
    Ok(ClusterReport {
        k,
        elbow_found,
        silhouette: silhouette(profiles, &fit.assignments),
        assignments: fit.assignments,
        centroids: fit.centroids,
        inertia_curve: curve,
        cluster_shares: shares,
    })
}

/// Eval-mode results for the samples carrying every model modality.
pub fn full_modality_inferences<'a>(model: &MaleficModel, samples: &'a [Sample]) -> Result<Vec<(&'a Sample, Inference)>> {
    samples
        .par_iter()
        .filter(|s| model.modalities().iter().all(|&m| s.inputs.available(m)))
        .map(|s| Ok((s, model.infer(&s.inputs, None)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stamp: Option<Stamp>,
    pub modalities: Vec<ModalityId>,
    pub n_samples: usize,
    pub overall: Vec<f64>,
    pub specialized: Vec<(ModalityId, usize)>,
    pub dead: Vec<(ModalityId, usize)>,
    /// Per modality, counts of contribution shares in equal-width bins over
    /// `[0, 1]`.
    pub histograms: Vec<Vec<usize>>,
    pub clusters: Option<ClusterReport>,
}

/// Contribution analysis of a trained model on full-modality samples.
pub struct Interpretation {
    pub report: InterpretReport,
    pub specialization: Specialization,
    pub sample_ids: Vec<String>,
    pub profiles: Vec<Vec<f64>>,
}

pub fn histogram(values: impl Iterator<Item = f64>, bins: usize) -> Vec<usize> {
    let mut h = vec![0; bins];
    for v in values {
        let b = ((v * bins as f64).floor() as usize).min(bins - 1);
        h[b] += 1;
    }
    h
}

pub fn interpret(model: &MaleficModel, samples: &[Sample], k_range: (usize, usize), restarts: usize, seed: u64) -> Result<Interpretation> {
    let m = model.num_modalities();
    let results = full_modality_inferences(model, samples)?;
    if results.is_empty() {
        return Err(Error::Empty("samples with every model modality available"));
    }
    let selections: Vec<SelectionMap> = results.iter().map(|(_, r)| r.output.selection.clone()).collect();
    let overall = overall_contribution(&selections, m)?;
    let specialization = dimension_specialization(&selections, m)?;
    let profiles: Vec<Vec<f64>> = selections.iter().map(|s| contribution_profile(s, m)).collect();
    let histograms = (0..m)
        .map(|i| histogram(profiles.iter().map(|p| p[i]), HISTOGRAM_BINS))
        .collect();
    let clusters = if profiles.len() >= k_range.1 {
        Some(cluster_contributions(&profiles, k_range, restarts, seed)?)
    } else {
        None
    };
    let mods = model.modalities();
    Ok(Interpretation {
        report: InterpretReport {
            stamp: None,
            modalities: mods.to_vec(),
            n_samples: profiles.len(),
            overall,
            specialized: specialization.specialized.iter().map(|&(i, d)| (mods[i], d)).collect(),
            dead: specialization.dead.iter().map(|&(i, d)| (mods[i], d)).collect(),
            histograms,
            clusters,
        },
        specialization,
        sample_ids: results.iter().map(|(s, _)| s.id.clone()).collect(),
        profiles,
    })
}

impl Interpretation {
    /// `sample_id, <share per modality>, cluster`.
    pub fn contributions_csv(&self) -> String {
        let mut out = self.report.stamp.as_ref().map(Stamp::csv_comment).unwrap_or_default();
        out.push_str("sample_id");
        for m in &self.report.modalities {
            let _ = write!(out, ",{m}");
        }
        out.push_str(",cluster\n");
        for (i, (id, p)) in self.sample_ids.iter().zip(&self.profiles).enumerate() {
            out.push_str(id);
            for q in p {
                let _ = write!(out, ",{q}");
            }
            match &self.report.clusters {
                Some(c) => {
                    let _ = writeln!(out, ",{}", c.assignments[i]);
                }
                None => out.push_str(",\n"),
            }
        }
        out
    }

    /// One row per modality, one column per fused dimension.
    pub fn specialization_csv(&self) -> String {
        let mut out = self.report.stamp.as_ref().map(Stamp::csv_comment).unwrap_or_default();
        out.push_str("modality");
        let c = self.specialization.frequency.first().map_or(0, Vec::len);
        for d in 0..c {
            let _ = write!(out, ",d{d}");
        }
        out.push('\n');
        for (m, row) in self.report.modalities.iter().zip(&self.specialization.frequency) {
            out.push_str(m.name());
            for f in row {
                let _ = write!(out, ",{f}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("interpret.json"), &self.report)?;
        let files = [
            ("contributions.csv", self.contributions_csv()),
            ("specialization.csv", self.specialization_csv()),
        ];
        for (name, text) in files {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stamp: Option<Stamp>,
    pub n_samples: usize,
    pub modalities: Vec<ModalityId>,
    pub fusion_dim: usize,
    /// Modality -> CSV of docked embeddings (`sample_id, available, d0..`).
    pub docked: Vec<(ModalityId, String)>,
    /// `sample_id, label, prediction, d0..`.
    pub fused: String,
    /// Directory with one `<sample_id>.sel.json` per sample.
    pub selections: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub sample_id: String,
    pub modalities: Vec<ModalityId>,
    pub selection: SelectionMap,
    pub profile: Vec<f64>,
}

/// Writes docked and fused embeddings, labels, predictions, and selection
/// maps for every sample into `dir`. Floats use shortest round-trip text, so
/// reading them back reproduces every bit.
pub fn export_embeddings(model: &MaleficModel, samples: &[Sample], dir: &Path, stamp: Option<&Stamp>) -> Result<BundleManifest> {
    let results: Vec<Inference> = samples
        .par_iter()
        .map(|s| model.infer(&s.inputs, None))
        .collect::<Result<_>>()?;
    let sel_dir = dir.join("selections");
    fs::create_dir_all(&sel_dir).map_err(|e| Error::io(&sel_dir, e))?;
    let header = stamp.map(Stamp::csv_comment).unwrap_or_default();
    let c = model.config().fusion_dim;
    let dims: String = (0..c).map(|d| format!(",d{d}")).collect();

    let mut docked_files = Vec::new();
    for (i, &m) in model.modalities().iter().enumerate() {
        let name = format!("docked_{}.csv", m.name());
        let mut out = format!("{header}sample_id,available{dims}\n");
        for (s, r) in samples.iter().zip(&results) {
            let _ = write!(out, "{},{}", s.id, r.docked[i].available);
            for v in &r.docked[i].vector {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        let p = dir.join(&name);
        fs::write(&p, out).map_err(|e| Error::io(&p, e))?;
        docked_files.push((m, name));
    }

    let mut fused = format!("{header}sample_id,label,prediction{dims}\n");
    for (s, r) in samples.iter().zip(&results) {
        let pred = predicted_label(&r.class_probs);
        let _ = write!(fused, "{},{},{}", s.id, s.label.name(), pred.name());
        for v in &r.output.fused {
            let _ = write!(fused, ",{v}");
        }
        fused.push('\n');
        let record = SelectionRecord {
            sample_id: s.id.clone(),
            modalities: model.modalities().to_vec(),
            profile: contribution_profile(&r.output.selection, model.num_modalities()),
            selection: r.output.selection.clone(),
        };
        write_json(&sel_dir.join(format!("{}.sel.json", s.id)), &record)?;
    }
    let p = dir.join("fused.csv");
    fs::write(&p, fused).map_err(|e| Error::io(&p, e))?;

    let manifest = BundleManifest {
        format: "malefic-embedding-bundle".into(),
        stamp: stamp.cloned(),
        n_samples: samples.len(),
        modalities: model.modalities().to_vec(),
        fusion_dim: c,
        docked: docked_files,
        fused: "fused.csv".into(),
        selections: "selections".into(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Highest-probability class; ties go to the lower class index.
pub fn predicted_label(class_probs: &[f64]) -> MiscLabel {
    let mut best = 0;
    for (i, &p) in class_probs.iter().enumerate() {
        if p > class_probs[best] {
            best = i;
        }
    }
    MiscLabel::from_index(best).expect("three classes")
}
