use std::fmt::Write as _;

use serde::Serialize;

use super::tub::Tub;
use crate::{Error, Result};

/// Equal-width histogram over [-1, 1]; the upper edge falls in the last bin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn of(values: impl IntoIterator<Item = f64>, bins: usize) -> Self {
        let bins = bins.max(1);
        let edges = (0..=bins)
            .map(|i| -1.0 + 2.0 * i as f64 / bins as f64)
            .collect();
        let mut counts = vec![0; bins];
        for v in values {
            let b = (((v + 1.0) / 2.0) * bins as f64).floor();
            counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
        }
        Self { edges, counts }
    }

    /// Number of bins with at least one sample.
    pub fn occupied_bins(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub stddev: f64,
}

impl ChannelStats {
    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        // shifted by the first sample so identical values give exactly zero spread
        let origin = values.first().copied().unwrap_or(0.0);
        let shift_mean = values.iter().map(|v| v - origin).sum::<f64>() / n;
        let var = values
            .iter()
            .map(|v| (v - origin - shift_mean).powi(2))
            .sum::<f64>()
            / n;
        Self {
            mean: origin + shift_mean,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            stddev: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub count: usize,
    pub steering: ChannelStats,
    pub throttle: ChannelStats,
    pub steering_histogram: Histogram,
    pub throttle_histogram: Histogram,
    /// Per RGB channel, on the 0-255 scale.
    pub pixel_mean: [f64; 3],
    pub pixel_stddev: [f64; 3],
    pub duration_s: f64,
    pub manual_records: usize,
    pub autopilot_records: usize,
}

impl DatasetStats {
    /// Histogram rows as CSV: `channel,bin_low,bin_high,count`.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("channel,bin_low,bin_high,count\n");
        for (name, h) in [
            ("steering", &self.steering_histogram),
            ("throttle", &self.throttle_histogram),
        ] {
            for (i, c) in h.counts.iter().enumerate() {
                let _ = writeln!(out, "{name},{},{},{c}", h.edges[i], h.edges[i + 1]);
            }
        }
        out
    }
}

/// Summary statistics over every record and image of a tub.
pub fn summarize(tub: &Tub, bins: usize) -> Result<DatasetStats> {
    if tub.is_empty() {
        return Err(Error::Tub("cannot summarize an empty tub".into()));
    }
    let records = tub.records();
    let steering: Vec<f64> = records.iter().map(|r| r.steering_norm).collect();
    let throttle: Vec<f64> = records.iter().map(|r| r.throttle_norm).collect();

    let mut sum = [0f64; 3];
    let mut sum_sq = [0f64; 3];
    let mut n_px = 0u64;
    for i in 0..tub.len() {
        let frame = tub.read_image(i)?;
        for px in frame.pixels.chunks_exact(3) {
            for c in 0..3 {
                let v = px[c] as f64;
                sum[c] += v;
                sum_sq[c] += v * v;
            }
        }
        n_px += (frame.width_px * frame.height_px) as u64;
    }
    let n = n_px as f64;
    let pixel_mean = sum.map(|s| s / n);
    let mut pixel_stddev = [0.0; 3];
    for c in 0..3 {
        pixel_stddev[c] = (sum_sq[c] / n - pixel_mean[c] * pixel_mean[c]).max(0.0).sqrt();
    }

    let first = records.iter().map(|r| r.timestamp_ms).min().unwrap_or(0);
    let last = records.iter().map(|r| r.timestamp_ms).max().unwrap_or(0);
    let autopilot_records = records
        .iter()
        .filter(|r| r.mode == super::RecordMode::Autopilot)
        .count();

    Ok(DatasetStats {
        count: records.len(),
        steering: ChannelStats::of(&steering),
        throttle: ChannelStats::of(&throttle),
        steering_histogram: Histogram::of(steering.iter().copied(), bins),
        throttle_histogram: Histogram::of(throttle.iter().copied(), bins),
        pixel_mean,
        pixel_stddev,
        duration_s: (last - first) as f64 / 1000.0,
        manual_records: records.len() - autopilot_records,
        autopilot_records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DriveRecord, Manifest, RecordMode};
    use crate::sim::ImageFrame;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tub_with(dir: &std::path::Path, steering: impl IntoIterator<Item = f64>) -> Tub {
        let mut tub = Tub::create(dir.join("t"), Manifest::new(2, 2, "now")).unwrap();
        let frame = ImageFrame::filled(2, 2, [10, 20, 30]);
        for (i, s) in steering.into_iter().enumerate() {
            let r = DriveRecord::new(s, 0.25, i as u64 * 50, RecordMode::Manual);
            tub.append_record(&frame, r).unwrap();
        }
        tub
    }

    #[test]
    fn identical_records_have_no_spread() {
        let dir = tempfile::tempdir().unwrap();
        let tub = tub_with(dir.path(), std::iter::repeat_n(0.3, 40));
        let stats = summarize(&tub, 10).unwrap();
        assert_eq!(stats.count, 40);
        assert_eq!(stats.steering.stddev, 0.0);
        assert_eq!(stats.steering.max - stats.steering.min, 0.0);
        assert_eq!(stats.steering_histogram.occupied_bins(), 1);
        assert_eq!(stats.throttle_histogram.occupied_bins(), 1);
        assert_eq!(stats.pixel_mean, [10.0, 20.0, 30.0]);
        assert_eq!(stats.pixel_stddev, [0.0; 3]);
        assert!((stats.duration_s - 1.95).abs() < 1e-12);
    }

    #[test]
    fn uniform_steering_gives_flat_histogram() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 2000;
        let tub = tub_with(dir.path(), (0..n).map(|_| rng.gen_range(-1.0..=1.0)));
        let bins = 10;
        let stats = summarize(&tub, bins).unwrap();
        let expected = n as f64 / bins as f64;
        let chi2: f64 = stats
            .steering_histogram
            .counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 99.9th percentile of chi-square with 9 degrees of freedom
        assert!(chi2 < 27.88, "chi2 = {chi2}");
    }

    #[test]
    fn empty_tub_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let tub = tub_with(dir.path(), []);
        assert!(summarize(&tub, 10).is_err());
    }

    #[test]
    fn histogram_edges_and_extremes() {
        let h = Histogram::of([-1.0, 1.0, 0.0], 4);
        assert_eq!(h.edges, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(h.counts, vec![1, 0, 1, 1]);
    }
}
