//! Per-episode metrics, CSV output and seed-level aggregation.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub discounted_return: f64,
    pub success: bool,
    pub final_distance: f64,
    pub episode_length: usize,
    pub seed: u64,
    pub algo: String,
    pub env: String,
    pub her_ratio: f64,
    pub noise: f64,
}

/// Labels shared by every record of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLabels {
    pub algo: String,
    pub env: String,
    pub her_ratio: f64,
    pub noise: f64,
}

pub fn write_csv<W: Write>(records: &[MetricsRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if records.is_empty() {
        w.write_record([
            "discounted_return",
            "success",
            "final_distance",
            "episode_length",
            "seed",
            "algo",
            "env",
            "her_ratio",
            "noise",
        ])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean (sample deviation over `√n`); zero for a single value.
pub fn std_err(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Averages of one run's episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub mean_return: f64,
    pub success_rate: f64,
    pub mean_final_distance: f64,
}

pub fn summarize(records: &[MetricsRecord]) -> RunSummary {
    let returns: Vec<f64> = records.iter().map(|r| r.discounted_return).collect();
    let succ: Vec<f64> = records.iter().map(|r| if r.success { 1.0 } else { 0.0 }).collect();
    let dist: Vec<f64> = records.iter().map(|r| r.final_distance).collect();
    RunSummary { mean_return: mean(&returns), success_rate: mean(&succ), mean_final_distance: mean(&dist) }
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let (rx, ry) = (ranks(xs), ranks(ys));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let recs = vec![MetricsRecord {
            discounted_return: 1.25,
            success: true,
            final_distance: 0.0,
            episode_length: 50,
            seed: 7,
            algo: "gofar".into(),
            env: "grid5".into(),
            her_ratio: 0.0,
            noise: 0.2,
        }];
        let mut buf = Vec::new();
        write_csv(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "discounted_return,success,final_distance,episode_length,seed,algo,env,her_ratio,noise\n"
        ));
        assert_eq!(read_csv(&text).unwrap(), recs);
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn std_err_matches_hand_value() {
        assert!((std_err(&[1.0, 2.0, 3.0]) - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
