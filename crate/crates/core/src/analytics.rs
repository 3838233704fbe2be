//! Label-aware measurement: false-negative ratios, representation probes and
//! the per-round metrics files.
//!
//! This is the only module that reads labels.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::math::EncoderParams;
use crate::{rng, Error, Result};

/// Fraction of negatives sharing the query's label, averaged over queries.
pub fn empirical_fn_ratio(query_labels: &[u16], negative_labels: &[u16]) -> Result<f64> {
    if negative_labels.is_empty() {
        return Err(Error::Empty("negative set"));
    }
    if query_labels.is_empty() {
        return Err(Error::Empty("query set"));
    }
    let mut counts = std::collections::HashMap::new();
    for &l in negative_labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let n = negative_labels.len() as f64;
    let sum: f64 = query_labels
        .iter()
        .map(|q| counts.get(q).copied().unwrap_or(0) as f64 / n)
        .sum();
    Ok(sum / query_labels.len() as f64)
}

fn check_sizes(m: usize, sizes: &[usize], indicators: &[bool]) -> Result<()> {
    if m == 0 {
        return Err(Error::InvalidArgument("m must be >= 1".into()));
    }
    if sizes.len() != indicators.len() {
        return Err(Error::DimensionMismatch {
            context: "bank sizes vs indicators",
            expected: sizes.len(),
            actual: indicators.len(),
        });
    }
    Ok(())
}

/// Closed-form FN ratio with local and remote negatives:
/// `((1/m)|Q_l,c| + Σ_i I(i,q)(1/m)|Q_l,i|) / (|Q_l,c| + Σ_i |Q_l,i|)`.
pub fn theoretical_fn_ratio_fused(
    m: usize,
    local_size: usize,
    remote_sizes: &[usize],
    indicators: &[bool],
) -> Result<f64> {
    check_sizes(m, remote_sizes, indicators)?;
    let inv_m = 1.0 / m as f64;
    let shared: f64 = remote_sizes
        .iter()
        .zip(indicators)
        .filter(|(_, &i)| i)
        .fold(0.0, |acc, (&s, _)| acc + s as f64);
    let total = local_size as f64 + remote_sizes.iter().sum::<usize>() as f64;
    if total == 0.0 {
        return Err(Error::Empty("negative banks"));
    }
    Ok(inv_m * (local_size as f64 + shared) / total)
}

/// Closed-form FN ratio with remote negatives only:
/// `Σ_i I(i,q)(1/m)|Q_l,i| / Σ_i |Q_l,i|`.
pub fn theoretical_fn_ratio_remote(m: usize, remote_sizes: &[usize], indicators: &[bool]) -> Result<f64> {
    check_sizes(m, remote_sizes, indicators)?;
    let total: usize = remote_sizes.iter().sum();
    if remote_sizes.is_empty() || total == 0 {
        return Err(Error::Empty("remote clients"));
    }
    let shared: f64 = remote_sizes
        .iter()
        .zip(indicators)
        .filter(|(_, &i)| i)
        .fold(0.0, |acc, (&s, _)| acc + s as f64);
    Ok(shared / (m as f64 * total as f64))
}

/// FN ratios for one client in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientFnRatios {
    pub client: u32,
    pub empirical_local_only: Option<f64>,
    pub empirical_fused: Option<f64>,
    pub empirical_remote_only: Option<f64>,
    pub theoretical_fused: Option<f64>,
    pub theoretical_remote_only: Option<f64>,
}

/// Client-averaged FN ratios (over clients where each value is defined).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FnRatioReport {
    pub empirical_local_only: Option<f64>,
    pub empirical_fused: Option<f64>,
    pub empirical_remote_only: Option<f64>,
    pub theoretical_fused: Option<f64>,
    pub theoretical_remote_only: Option<f64>,
    pub per_client: Vec<ClientFnRatios>,
}

/// Label-side view of one client's banks at training time.
#[derive(Debug, Clone)]
pub struct FnInputs<'a> {
    pub client: u32,
    /// Classes the client holds (m = its size).
    pub class_count: usize,
    pub query_labels: &'a [u16],
    pub local_labels: &'a [u16],
    /// Per remote source: labels of its uploaded features and whether it
    /// holds each query class.
    pub remote: Vec<RemoteSource<'a>>,
}

#[derive(Debug, Clone)]
pub struct RemoteSource<'a> {
    pub labels: &'a [u16],
    pub classes: &'a std::collections::BTreeSet<u16>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Empirical and closed-form ratios for one client. Closed forms are
/// averaged over the query sample (the indicator depends on the query class).
pub fn client_fn_ratios(input: &FnInputs<'_>) -> ClientFnRatios {
    let remote_labels: Vec<u16> = input.remote.iter().flat_map(|r| r.labels.iter().copied()).collect();
    let fused_labels: Vec<u16> = input.local_labels.iter().copied().chain(remote_labels.iter().copied()).collect();
    let q = input.query_labels;
    let sizes: Vec<usize> = input.remote.iter().map(|r| r.labels.len()).collect();
    let per_query = |f: &dyn Fn(&[bool]) -> Result<f64>| -> Option<f64> {
        if q.is_empty() {
            return None;
        }
        let vals: Result<Vec<f64>> = q
            .iter()
            .map(|label| {
                let ind: Vec<bool> = input.remote.iter().map(|r| r.classes.contains(label)).collect();
                f(&ind)
            })
            .collect();
        vals.ok().map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    ClientFnRatios {
        client: input.client,
        empirical_local_only: empirical_fn_ratio(q, input.local_labels).ok(),
        empirical_fused: empirical_fn_ratio(q, &fused_labels).ok(),
        empirical_remote_only: empirical_fn_ratio(q, &remote_labels).ok(),
        theoretical_fused: per_query(&|ind| {
            theoretical_fn_ratio_fused(input.class_count, input.local_labels.len(), &sizes, ind)
        }),
        theoretical_remote_only: per_query(&|ind| theoretical_fn_ratio_remote(input.class_count, &sizes, ind)),
    }
}

pub fn aggregate_fn_ratios(per_client: Vec<ClientFnRatios>) -> FnRatioReport {
    FnRatioReport {
        empirical_local_only: mean_defined(per_client.iter().map(|c| c.empirical_local_only)),
        empirical_fused: mean_defined(per_client.iter().map(|c| c.empirical_fused)),
        empirical_remote_only: mean_defined(per_client.iter().map(|c| c.empirical_remote_only)),
        theoretical_fused: mean_defined(per_client.iter().map(|c| c.theoretical_fused)),
        theoretical_remote_only: mean_defined(per_client.iter().map(|c| c.theoretical_remote_only)),
        per_client,
    }
}

fn encode_all(encoder: &EncoderParams, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    ds.samples
        .iter()
        .map(|s| {
            let x: Vec<f64> = s.x.iter().map(|&v| v as f64).collect();
            encoder.encode(&x)
        })
        .collect()
}

fn knn_classify(train: &[Vec<f64>], train_labels: &[u16], query: &[f64], k: usize, classes: usize) -> u16 {
    let mut sims: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .map(|(i, z)| (crate::math::dot(z, query), i))
        .collect();
    let k = k.min(sims.len());
    sims.select_nth_unstable_by(k - 1, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut votes = vec![(0usize, 0.0f64); classes];
    for &(s, i) in &sims[..k] {
        let v = &mut votes[train_labels[i] as usize];
        v.0 += 1;
        v.1 += s;
    }
    // most votes, then highest summed similarity, then lowest label
    let mut best = 0;
    for c in 1..classes {
        let (bc, bs) = votes[best];
        let (cc, cs) = votes[c];
        if cc > bc || (cc == bc && cs > bs) {
            best = c;
        }
    }
    best as u16
}

/// Accuracy of a `k`-nearest-neighbour (cosine) vote over frozen features.
pub fn knn_probe(encoder: &EncoderParams, train: &Dataset, test: &Dataset, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Empty("probe set"));
    }
    let classes = train.num_classes.max(test.num_classes);
    let train_z = encode_all(encoder, train)?;
    let train_y = train.labels();
    let test_z = encode_all(encoder, test)?;
    let correct = test_z
        .iter()
        .zip(&test.samples)
        .filter(|(z, s)| knn_classify(&train_z, &train_y, z, k, classes) == s.label)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Multinomial logistic regression on frozen features, trained by mini-batch
/// SGD. Returns test accuracy.
pub fn linear_probe(
    encoder: &EncoderParams,
    train: &Dataset,
    test: &Dataset,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Empty("probe set"));
    }
    let classes = train.num_classes.max(test.num_classes);
    let train_z = encode_all(encoder, train)?;
    let train_y = train.labels();
    let d = encoder.output_dim();
    let mut w = vec![0.0f64; classes * d];
    let mut b = vec![0.0f64; classes];
    let mut order: Vec<usize> = (0..train_z.len()).collect();
    let mut r = rng::stream(seed, &[rng::purpose::PROBE]);
    const BATCH: usize = 32;
    let logits = |w: &[f64], b: &[f64], z: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|c| b[c] + crate::math::dot(&w[c * d..(c + 1) * d], z))
            .collect()
    };
    for _ in 0..epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(BATCH) {
            let mut gw = vec![0.0; classes * d];
            let mut gb = vec![0.0; classes];
            for &i in chunk {
                let z = &train_z[i];
                let l = logits(&w, &b, z);
                let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                for c in 0..classes {
                    let g = e[c] / s - f64::from(train_y[i] as usize == c);
                    gb[c] += g;
                    gw[c * d..(c + 1) * d]
                        .iter_mut()
                        .zip(z)
                        .for_each(|(a, x)| *a += g * x);
                }
            }
            let step = lr / chunk.len() as f64;
            w.iter_mut().zip(&gw).for_each(|(a, g)| *a -= step * g);
            b.iter_mut().zip(&gb).for_each(|(a, g)| *a -= step * g);
        }
    }
    let test_z = encode_all(encoder, test)?;
    let correct = test_z
        .iter()
        .zip(&test.samples)
        .filter(|(z, s)| {
            let l = logits(&w, &b, z);
            let pred = (0..classes).fold(0, |best, c| if l[c] > l[best] { c } else { best });
            pred == s.label as usize
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ProbeReport {
    pub knn_accuracy: f64,
    pub linear_accuracy: Option<f64>,
    /// Fingerprint of the probe settings.
    pub config_digest: u64,
}

/// Column order of the metrics table.
pub const METRICS_HEADER: [&str; 12] = [
    "round",
    "mode",
    "contrast_loss",
    "neigh_loss",
    "fn_local_only",
    "fn_fused",
    "fn_remote_only",
    "fn_theory_fused",
    "fn_theory_remote",
    "knn_acc",
    "linear_acc",
    "wall_time_s",
];

/// One row of the metrics table. Optional fields are written as empty cells
/// (CSV) or `null` (JSON lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: u32,
    pub mode: String,
    pub contrast_loss: f64,
    pub neigh_loss: f64,
    pub fn_local_only: Option<f64>,
    pub fn_fused: Option<f64>,
    pub fn_remote_only: Option<f64>,
    pub fn_theory_fused: Option<f64>,
    pub fn_theory_remote: Option<f64>,
    pub knn_acc: f64,
    pub linear_acc: Option<f64>,
    pub wall_time_s: f64,
}

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSONL: &str = "metrics.jsonl";

/// Writes `metrics.csv` and `metrics.jsonl` into `dir`.
pub fn emit_metrics(rows: &[MetricsRow], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::at_path(dir))?;
    let csv_path = dir.join(METRICS_CSV);
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&csv_path)
        .map_err(|e| csv_error(&csv_path, e))?;
    w.write_record(METRICS_HEADER).map_err(|e| csv_error(&csv_path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(&csv_path, e))?;
    }
    w.flush().map_err(Error::at_path(&csv_path))?;

    let json_path = dir.join(METRICS_JSONL);
    let mut out = BufWriter::new(File::create(&json_path).map_err(Error::at_path(&json_path))?);
    for row in rows {
        let line = serde_json::to_string(row).expect("metrics rows serialise");
        writeln!(out, "{line}").map_err(Error::at_path(&json_path))?;
    }
    out.flush().map_err(Error::at_path(&json_path))?;
    Ok(())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::PathIo {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

/// Checks a metrics table: fixed header, numeric cells finite. Returns the
/// number of data rows.
pub fn validate_metrics(path: &Path) -> Result<usize> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != METRICS_HEADER {
        return Err(Error::Format(format!("unexpected header {:?}", header)));
    }
    let mut rows = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() != METRICS_HEADER.len() {
            return Err(Error::Format(format!("row {} has {} fields", i + 1, rec.len())));
        }
        for (name, cell) in METRICS_HEADER.iter().zip(rec.iter()) {
            if *name == "mode" {
                cell.parse::<crate::objective::TrainingMode>()?;
                continue;
            }
            let optional = name.starts_with("fn_") || *name == "linear_acc";
            if cell.is_empty() && optional {
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::Format(format!("row {} column {name}: {cell:?} is not numeric", i + 1)))?;
            if !v.is_finite() {
                return Err(Error::Format(format!("row {} column {name} is not finite", i + 1)));
            }
        }
        rows += 1;
    }
    Ok(rows)
}
