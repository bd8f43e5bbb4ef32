//! Threshold-free multi-label ranking metrics.
//!
//! - **Recall@k**: fraction of a sample's true labels found among its top-k classes.
//! - **P@k / AP@k**: precision-weighted average over relevant ranks within the top k.
//! - **mAP**: per class, rank every sample by that class's score and take the
//!   uninterpolated average precision over the positive samples; average over classes.
//!
//! Rankings break score ties by ascending class index (per sample) or ascending
//! sample index (per class), so results never depend on sort stability.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::LabelVector;

/// Convention recorded in every report.
pub const MAP_CONVENTION: &str = "per-class sample ranking, uninterpolated AP, mean over classes with >=1 positive";

fn desc_then_index(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Class indices ordered by descending score; ties by ascending index.
pub fn rank_classes(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(desc_then_index(scores));
    idx
}

fn check(labels: &LabelVector, scores: &[f64], k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if labels.class_count() != scores.len() {
        return Err(Error::Shape(format!(
            "{} labels vs {} scores",
            labels.class_count(),
            scores.len()
        )));
    }
    match labels.popcount() {
        0 => Err(Error::NoPositiveLabels),
        n => Ok(n),
    }
}

pub fn recall_at_k(labels: &LabelVector, scores: &[f64], k: usize) -> Result<f64> {
    let positives = check(labels, scores, k)?;
    let hits = rank_classes(scores)
        .into_iter()
        .take(k)
        .filter(|c| labels.contains(*c))
        .count();
    Ok(hits as f64 / positives as f64)
}

pub fn precision_at_k(labels: &LabelVector, scores: &[f64], k: usize) -> Result<f64> {
    check(labels, scores, k)?;
    let hits = rank_classes(scores)
        .into_iter()
        .take(k)
        .filter(|c| labels.contains(*c))
        .count();
    Ok(hits as f64 / k as f64)
}

/// `(1 / min(|Y+|, k)) * sum_{i<=k} P@i * r(i)`.
pub fn ap_at_k(labels: &LabelVector, scores: &[f64], k: usize) -> Result<f64> {
    let positives = check(labels, scores, k)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, class) in rank_classes(scores).into_iter().take(k).enumerate() {
        if labels.contains(class) {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives.min(k) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanAveragePrecision {
    pub map: f64,
    /// `None` for classes without positive samples.
    pub per_class: Vec<Option<f64>>,
    pub skipped_classes: Vec<usize>,
}

/// Average precision of one class given every sample's relevance and score.
fn class_average_precision(relevant: &[bool], scores: &[f64]) -> Option<f64> {
    let total = relevant.iter().filter(|r| **r).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(desc_then_index(scores));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, sample) in order.into_iter().enumerate() {
        if relevant[sample] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

pub fn mean_average_precision<S: AsRef<[f64]>>(
    labels: &[LabelVector],
    scores: &[S],
) -> Result<MeanAveragePrecision> {
    if labels.len() != scores.len() {
        return Err(Error::Shape(format!(
            "{} label rows vs {} score rows",
            labels.len(),
            scores.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = labels[0].class_count();
    for (l, s) in labels.iter().zip(scores) {
        if l.class_count() != classes || s.as_ref().len() != classes {
            return Err(Error::Shape("ragged label/score matrix".into()));
        }
    }
    let mut per_class = Vec::with_capacity(classes);
    let mut skipped = Vec::new();
    let mut column = vec![0.0; labels.len()];
    let mut relevant = vec![false; labels.len()];
    for c in 0..classes {
        for (i, (l, s)) in labels.iter().zip(scores).enumerate() {
            column[i] = s.as_ref()[c];
            relevant[i] = l.contains(c);
        }
        let ap = class_average_precision(&relevant, &column);
        if ap.is_none() {
            skipped.push(c);
        }
        per_class.push(ap);
    }
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::NoPositiveLabels);
    }
    Ok(MeanAveragePrecision {
        map: valid.iter().sum::<f64>() / valid.len() as f64,
        per_class,
        skipped_classes: skipped,
    })
}

/// Which cut-offs a report contains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportSpec {
    pub recall_ks: Vec<usize>,
    pub ap_ks: Vec<usize>,
}

impl Default for ReportSpec {
    fn default() -> Self {
        Self {
            recall_ks: vec![5, 10, 15, 20],
            ap_ks: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    pub recall_at: BTreeMap<usize, f64>,
    pub ap_at: BTreeMap<usize, f64>,
    /// Sub-reports keyed by tab count; empty inside sub-reports.
    #[serde(default)]
    pub per_tab: BTreeMap<usize, MetricsReport>,
    pub sample_count: usize,
    /// Classes excluded from mAP because no evaluated sample carries them.
    #[serde(default)]
    pub skipped_classes: Vec<usize>,
    pub map_convention: String,
}

impl MetricsReport {
    /// Scores every sample; `tab_counts`, when given, drives the per-tab breakdown.
    pub fn compute<S: AsRef<[f64]>>(
        labels: &[LabelVector],
        scores: &[S],
        tab_counts: Option<&[usize]>,
        spec: &ReportSpec,
    ) -> Result<Self> {
        let mut report = Self::flat(labels, scores, spec)?;
        if let Some(tabs) = tab_counts {
            if tabs.len() != labels.len() {
                return Err(Error::Shape("tab count per sample required".into()));
            }
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, t) in tabs.iter().enumerate() {
                groups.entry(*t).or_default().push(i);
            }
            for (tab, idx) in groups {
                let l: Vec<LabelVector> = idx.iter().map(|&i| labels[i].clone()).collect();
                let s: Vec<&[f64]> = idx.iter().map(|&i| scores[i].as_ref()).collect();
                report.per_tab.insert(tab, Self::flat(&l, &s, spec)?);
            }
        }
        Ok(report)
    }

    fn flat<S: AsRef<[f64]>>(labels: &[LabelVector], scores: &[S], spec: &ReportSpec) -> Result<Self> {
        let map = mean_average_precision(labels, scores)?;
        let mut recall_at = BTreeMap::new();
        let mut ap_at = BTreeMap::new();
        let scored: Vec<(&LabelVector, &[f64])> = labels
            .iter()
            .zip(scores)
            .filter(|(l, _)| l.popcount() > 0)
            .map(|(l, s)| (l, s.as_ref()))
            .collect();
        let n = scored.len().max(1) as f64;
        for &k in &spec.recall_ks {
            let mut total = 0.0;
            for (l, s) in &scored {
                total += recall_at_k(l, s, k)?;
            }
            recall_at.insert(k, total / n);
        }
        for &k in &spec.ap_ks {
            let mut total = 0.0;
            for (l, s) in &scored {
                total += ap_at_k(l, s, k)?;
            }
            ap_at.insert(k, total / n);
        }
        Ok(Self {
            map: map.map,
            recall_at,
            ap_at,
            per_tab: BTreeMap::new(),
            sample_count: labels.len(),
            skipped_classes: map.skipped_classes,
            map_convention: MAP_CONVENTION.to_string(),
        })
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }

    pub fn ap(&self, k: usize) -> Option<f64> {
        self.ap_at.get(&k).copied()
    }

    /// Aligned table in percent: one overall row plus one row per tab count.
    pub fn render_table(&self) -> String {
        let mut rows = vec![("all".to_string(), self)];
        rows.extend(self.per_tab.iter().map(|(t, r)| (format!("{t}-tab"), r)));
        render_rows("subset", &rows)
    }
}

/// Renders several labelled reports as one aligned comparison table.
pub fn render_comparison(rows: &[(String, MetricsReport)]) -> String {
    let refs: Vec<(String, &MetricsReport)> =
        rows.iter().map(|(n, r)| (n.clone(), r)).collect();
    render_rows("run", &refs)
}

fn render_rows(first: &str, rows: &[(String, &MetricsReport)]) -> String {
    let Some((_, head)) = rows.first() else {
        return String::new();
    };
    let mut cols = vec![first.to_string(), "n".to_string()];
    cols.extend(head.recall_at.keys().map(|k| format!("Recall@{k}")));
    cols.extend(head.ap_at.keys().map(|k| format!("AP@{k}")));
    cols.push("mAP".into());

    let mut table: Vec<Vec<String>> = vec![cols];
    for (name, r) in rows {
        let mut line = vec![name.clone(), r.sample_count.to_string()];
        line.extend(r.recall_at.values().map(|v| format!("{:.2}", v * 100.0)));
        line.extend(r.ap_at.values().map(|v| format!("{:.2}", v * 100.0)));
        line.push(format!("{:.2}", r.map * 100.0));
        table.push(line);
    }
    let ncols = table.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..ncols)
        .map(|c| table.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in table.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| {
                if c == 0 {
                    format!("{v:<w$}", w = widths[c])
                } else {
                    format!("{v:>w$}", w = widths[c])
                }
            })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  "));
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1);
            let _ = writeln!(out, "{}", "-".repeat(total));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(ids: &[usize], n: usize) -> LabelVector {
        LabelVector::encode(ids.iter().copied(), n).unwrap()
    }

    #[test]
    fn recall_counts_hits_in_top_k() {
        // classes A..D = 0..3; true {A,B,C}; top-2 = {A,D}
        let labels = lv(&[0, 1, 2], 4);
        let scores = [0.9, 0.1, 0.2, 0.8];
        assert!((recall_at_k(&labels, &scores, 2).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(recall_at_k(&labels, &scores, 4).unwrap(), 1.0);
        assert_eq!(recall_at_k(&labels, &scores, 10).unwrap(), 1.0);
    }

    #[test]
    fn recall_miss_when_ranked_below_k() {
        let labels = lv(&[0], 8);
        let scores = [0.3, 0.9, 0.8, 0.7, 0.6, 0.5, 0.1, 0.0];
        assert_eq!(recall_at_k(&labels, &scores, 5).unwrap(), 0.0);
        assert_eq!(recall_at_k(&labels, &scores, 6).unwrap(), 1.0);
    }

    #[test]
    fn ties_break_by_class_index() {
        assert_eq!(rank_classes(&[0.5, 0.5, 0.5]), vec![0, 1, 2]);
        let labels = lv(&[2], 3);
        assert_eq!(recall_at_k(&labels, &[0.5, 0.5, 0.5], 2).unwrap(), 0.0);
    }

    #[test]
    fn ap_at_k_worked_example() {
        // ranking [rel, nonrel, rel]
        let labels = lv(&[0, 2], 3);
        let scores = [0.9, 0.5, 0.1];
        let ap = ap_at_k(&labels, &scores, 3).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn ap_at_k_bounds() {
        let labels = lv(&[0, 1, 2, 3], 6);
        let scores = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4];
        assert_eq!(ap_at_k(&labels, &scores, 3).unwrap(), 1.0);
        let labels = lv(&[4, 5], 6);
        assert_eq!(ap_at_k(&labels, &scores, 3).unwrap(), 0.0);
    }

    #[test]
    fn empty_positive_set_is_an_error() {
        let labels = lv(&[], 3);
        assert!(matches!(recall_at_k(&labels, &[0.1, 0.2, 0.3], 1), Err(Error::NoPositiveLabels)));
        assert!(ap_at_k(&labels, &[0.1, 0.2, 0.3], 1).is_err());
    }

    #[test]
    fn map_perfect_and_enumerated() {
        let labels = vec![lv(&[0], 2), lv(&[1], 2), lv(&[0, 1], 2)];
        let scores: Vec<Vec<f64>> = labels
            .iter()
            .map(|l| l.bits().iter().map(|b| *b as f64).collect())
            .collect();
        assert_eq!(mean_average_precision(&labels, &scores).unwrap().map, 1.0);

        // one class, positives ranked 1st and 3rd of 4
        let labels = vec![lv(&[0], 1), lv(&[], 1), lv(&[0], 1), lv(&[], 1)];
        let scores = vec![vec![0.9], vec![0.8], vec![0.7], vec![0.1]];
        let m = mean_average_precision(&labels, &scores).unwrap();
        assert!((m.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn map_skips_classes_without_positives() {
        let labels = vec![lv(&[0], 3), lv(&[0], 3)];
        let scores = vec![vec![0.9, 0.1, 0.2], vec![0.8, 0.3, 0.1]];
        let m = mean_average_precision(&labels, &scores).unwrap();
        assert_eq!(m.skipped_classes, vec![1, 2]);
        assert_eq!(m.map, 1.0);
    }

    #[test]
    fn report_has_per_tab_rows() {
        let labels = vec![lv(&[0], 3), lv(&[1, 2], 3), lv(&[2], 3)];
        let scores = vec![vec![0.9, 0.1, 0.2], vec![0.1, 0.8, 0.7], vec![0.2, 0.1, 0.9]];
        let r = MetricsReport::compute(&labels, &scores, Some(&[1, 2, 1]), &ReportSpec::default())
            .unwrap();
        assert_eq!(r.per_tab.keys().copied().collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(r.per_tab[&1].sample_count, 2);
        assert_eq!(r.recall(5), Some(1.0));
        let table = r.render_table();
        assert!(table.contains("Recall@5") && table.contains("2-tab"));
    }
}
