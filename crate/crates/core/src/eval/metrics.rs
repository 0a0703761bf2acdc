use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::PredictionRecord;

pub const REPORT_KS: [usize; 3] = [1, 5, 10];

/// Top-k accuracies of one configuration on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub config: String,
    pub dataset: String,
    pub samples: usize,
    pub errors: usize,
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
}

/// Percentage of samples whose label is among the first `k` entries of
/// their ranking, for each requested `k`. `k` beyond the ranking length
/// counts the whole ranking.
pub fn topk_accuracy(rankings: &[Vec<usize>], labels: &[usize], ks: &[usize]) -> Result<Vec<f64>> {
    if rankings.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} rankings but {} labels",
            rankings.len(),
            labels.len()
        )));
    }
    if rankings.is_empty() {
        return Ok(vec![0.0; ks.len()]);
    }
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = rankings
                .iter()
                .zip(labels)
                .filter(|(r, l)| r.iter().take(k).any(|c| c == *l))
                .count();
            100.0 * hits as f64 / rankings.len() as f64
        })
        .collect())
}

/// Accuracy report over prediction records. Records with errors or without
/// a label are counted in `errors` and excluded.
pub fn accuracy_report(
    records: &[PredictionRecord],
    config: &str,
    dataset: &str,
) -> AccuracyReport {
    let mut rankings = Vec::new();
    let mut labels = Vec::new();
    let mut errors = 0;
    for r in records {
        match (r.ranking(), r.label) {
            (Some(rank), Some(label)) => {
                rankings.push(rank);
                labels.push(label);
            }
            _ => errors += 1,
        }
    }
    let acc = topk_accuracy(&rankings, &labels, &REPORT_KS).expect("aligned by construction");
    AccuracyReport {
        config: config.to_string(),
        dataset: dataset.to_string(),
        samples: labels.len(),
        errors,
        top1: acc[0],
        top5: acc[1],
        top10: acc[2],
    }
}

/// Top-1 accuracy in percent over records that carry a prediction, or
/// `None` if there are none.
pub fn top1(records: &[&PredictionRecord]) -> Option<f64> {
    let scored: Vec<_> = records
        .iter()
        .filter_map(|r| Some((r.prediction()?, r.label?)))
        .collect();
    if scored.is_empty() {
        return None;
    }
    let hits = scored.iter().filter(|(p, l)| p == l).count();
    Some(100.0 * hits as f64 / scored.len() as f64)
}

/// Population standard deviation (divides by n).
pub fn population_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 || xs.iter().all(|&x| x == xs[0]) {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_accuracy() {
        // labels: hit@1, hit@2, miss, hit@1
        let rankings = vec![vec![0, 1, 2], vec![2, 1, 0], vec![0, 2, 1], vec![2, 0, 1]];
        let labels = vec![0, 1, 1, 2];
        assert_eq!(
            topk_accuracy(&rankings, &labels, &[1, 2]).unwrap(),
            vec![50.0, 75.0]
        );
        assert_eq!(
            topk_accuracy(&rankings, &labels, &[3, 10]).unwrap(),
            vec![100.0, 100.0]
        );
        assert!(topk_accuracy(&rankings, &labels[..3], &[1]).is_err());
    }

    #[test]
    fn all_correct() {
        let rankings = vec![vec![1, 0], vec![0, 1]];
        assert_eq!(
            topk_accuracy(&rankings, &[1, 0], &REPORT_KS).unwrap(),
            vec![100.0; 3]
        );
    }

    #[test]
    fn std_examples() {
        assert_eq!(population_std(&[0.3; 10]), 0.0);
        assert!((population_std(&[0.4, 0.6]) - 0.1).abs() < 1e-15);
        assert_eq!(population_std(&[]), 0.0);
    }
}
