//! Gaussian-mixture datasets, client partitioning and two-view augmentation.
//!
//! Labels travel with samples so analytics can measure false negatives, but
//! training code only ever sees [`ClientShard::inputs`].

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::rng::{self, purpose};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub x: Vec<f32>,
    pub label: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub dim: usize,
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<u16> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// Class means `separation · u_c` plus isotropic noise.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    num_classes: usize,
    dim: usize,
    means: Vec<Vec<f64>>,
    noise_sigma: f64,
}

impl GaussianMixture {
    /// Class directions are the first `num_classes` canonical axes when
    /// `dim >= num_classes`, otherwise random unit vectors drawn from `seed`.
    pub fn new(
        num_classes: usize,
        dim: usize,
        separation: f64,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if num_classes > u16::MAX as usize {
            return Err(Error::InvalidArgument("too many classes".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        if !(separation > 0.0 && separation.is_finite()) {
            return Err(Error::InvalidArgument(format!("separation {separation} must be > 0")));
        }
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise sigma {noise_sigma} must be >= 0")));
        }
        let means = if dim >= num_classes {
            (0..num_classes)
                .map(|c| {
                    let mut m = vec![0.0; dim];
                    m[c] = separation;
                    m
                })
                .collect()
        } else {
            let mut r = rng::stream(seed, &[purpose::DATA, 0]);
            (0..num_classes)
                .map(|_| {
                    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
                    let n = crate::math::l2_norm(&v).max(1e-12);
                    v.iter().map(|x| separation * x / n).collect()
                })
                .collect()
        };
        Ok(GaussianMixture {
            num_classes,
            dim,
            means,
            noise_sigma,
        })
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// `per_class_n` samples of each class, class-major order.
    pub fn sample<R: Rng + ?Sized>(&self, per_class_n: usize, rng: &mut R) -> Dataset {
        let mut samples = Vec::with_capacity(per_class_n * self.num_classes);
        for (c, mean) in self.means.iter().enumerate() {
            for _ in 0..per_class_n {
                let x = mean
                    .iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(rng);
                        (m + self.noise_sigma * z) as f32
                    })
                    .collect();
                samples.push(LabeledSample { x, label: c as u16 });
            }
        }
        Dataset {
            num_classes: self.num_classes,
            dim: self.dim,
            samples,
        }
    }
}

/// Balanced labelled mixture, deterministic in `seed`.
pub fn generate_gaussian_mixture(
    num_classes: usize,
    per_class_n: usize,
    dim: usize,
    separation: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if per_class_n == 0 {
        return Err(Error::InvalidArgument("per_class_n must be positive".into()));
    }
    let mix = GaussianMixture::new(num_classes, dim, separation, noise_sigma, seed)?;
    Ok(mix.sample(per_class_n, &mut rng::stream(seed, &[purpose::DATA, 1])))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionMode {
    Iid,
    /// Each client holds exactly `classes_per_client` classes. With
    /// `cover_all`, a partition leaving some class unassigned is an error.
    NonIid {
        classes_per_client: usize,
        cover_all: bool,
    },
}

/// One client's slice of the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: u32,
    samples: Vec<LabeledSample>,
    /// Row index of each sample in the source dataset.
    pub source_rows: Vec<usize>,
    pub class_set: BTreeSet<u16>,
}

impl ClientShard {
    pub fn new(client_id: u32, samples: Vec<LabeledSample>, source_rows: Vec<usize>) -> Self {
        let class_set = samples.iter().map(|s| s.label).collect();
        ClientShard {
            client_id,
            samples,
            source_rows,
            class_set,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Label-free view used by every training path.
    pub fn inputs(&self) -> Vec<Vec<f32>> {
        self.samples.iter().map(|s| s.x.clone()).collect()
    }

    /// Analytics-only access to labels.
    pub fn label(&self, i: usize) -> u16 {
        self.samples[i].label
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn to_dataset(&self, num_classes: usize) -> Dataset {
        Dataset {
            num_classes,
            dim: self.samples.first().map_or(0, |s| s.x.len()),
            samples: self.samples.clone(),
        }
    }
}

/// Splits `chunk` as evenly as possible into `parts` contiguous pieces.
fn split_even<T: Clone>(items: &[T], parts: usize) -> Vec<Vec<T>> {
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = base + usize::from(i < extra);
        out.push(items[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Distributes `dataset` across `clients` shards.
///
/// IID deals a shuffled copy round-robin. Non-IID gives client `i` classes
/// `{i·m, …, i·m+m−1}` when `m·C = M`; otherwise slot `i·m + j` takes
/// `shuffled_classes[(i·m + j) mod M]`, so per-class owner counts differ by
/// at most one. Each class's samples are then split evenly among its owners.
pub fn partition(
    dataset: &Dataset,
    clients: usize,
    mode: PartitionMode,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut r = rng::stream(seed, &[purpose::PARTITION]);
    let num_classes = dataset.num_classes;
    let mut rows_per_client: Vec<Vec<usize>> = vec![Vec::new(); clients];

    match mode {
        PartitionMode::Iid => {
            let mut rows: Vec<usize> = (0..dataset.len()).collect();
            rows.shuffle(&mut r);
            for (i, row) in rows.into_iter().enumerate() {
                rows_per_client[i % clients].push(row);
            }
        }
        PartitionMode::NonIid {
            classes_per_client: m,
            cover_all,
        } => {
            if m == 0 || m > num_classes {
                return Err(Error::InvalidArgument(format!(
                    "classes per client {m} must be in 1..={num_classes}"
                )));
            }
            let assignment: Vec<Vec<usize>> = if m * clients == num_classes {
                (0..clients).map(|i| (i * m..i * m + m).collect()).collect()
            } else {
                let mut order: Vec<usize> = (0..num_classes).collect();
                order.shuffle(&mut r);
                (0..clients)
                    .map(|i| (0..m).map(|j| order[(i * m + j) % num_classes]).collect())
                    .collect()
            };
            let mut owners: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
            for (client, classes) in assignment.iter().enumerate() {
                for &c in classes {
                    owners[c].push(client);
                }
            }
            let uncovered: Vec<usize> = (0..num_classes).filter(|&c| owners[c].is_empty()).collect();
            if cover_all && !uncovered.is_empty() {
                return Err(Error::UncoveredClasses(uncovered));
            }
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
            for (row, s) in dataset.samples.iter().enumerate() {
                by_class[s.label as usize].push(row);
            }
            for (c, rows) in by_class.iter_mut().enumerate() {
                if owners[c].is_empty() {
                    continue;
                }
                rows.shuffle(&mut r);
                for (owner, piece) in owners[c].iter().zip(split_even(rows, owners[c].len())) {
                    rows_per_client[*owner].extend(piece);
                }
            }
        }
    }

    Ok(rows_per_client
        .into_iter()
        .enumerate()
        .map(|(id, mut rows)| {
            rows.sort_unstable();
            let samples = rows.iter().map(|&i| dataset.samples[i].clone()).collect();
            ClientShard::new(id as u32, samples, rows)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view_a: Vec<f32>,
    pub view_b: Vec<f32>,
    pub origin_index: usize,
}

fn augment_once<R: Rng + ?Sized>(x: &[f32], noise: Option<&Normal<f64>>, drop_prob: f64, rng: &mut R) -> Vec<f32> {
    x.iter()
        .map(|&v| {
            let kept = if drop_prob > 0.0 && rng.random::<f64>() < drop_prob {
                0.0
            } else {
                v as f64
            };
            let jitter = noise.map_or(0.0, |n| n.sample(rng));
            (kept + jitter) as f32
        })
        .collect()
}

/// Two independent stochastic views of `x`: coordinate dropout at rate
/// `drop_prob`, then additive `N(0, aug_sigma²)` jitter.
pub fn augment_two_views<R: Rng + ?Sized>(
    x: &[f32],
    origin_index: usize,
    aug_sigma: f64,
    drop_prob: f64,
    rng: &mut R,
) -> Result<ViewPair> {
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(Error::InvalidArgument(format!("drop probability {drop_prob} not in [0, 1)")));
    }
    if !(aug_sigma >= 0.0 && aug_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("augmentation sigma {aug_sigma} must be >= 0")));
    }
    let noise = if aug_sigma > 0.0 {
        Some(Normal::new(0.0, aug_sigma).expect("sigma validated"))
    } else {
        None
    };
    let view_a = augment_once(x, noise.as_ref(), drop_prob, rng);
    let view_b = augment_once(x, noise.as_ref(), drop_prob, rng);
    Ok(ViewPair {
        view_a,
        view_b,
        origin_index,
    })
}

const MAGIC: &[u8; 4] = b"FCLD";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 14;

/// Serialises as `FCLD | version u16 | M u16 | n u32 | p u16 | f32 rows | u16 labels`,
/// all little-endian.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let m = u16::try_from(ds.num_classes).map_err(|_| Error::Format("too many classes".into()))?;
    let n = u32::try_from(ds.len()).map_err(|_| Error::Format("too many samples".into()))?;
    let p = u16::try_from(ds.dim).map_err(|_| Error::Format("dimension too large".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + ds.len() * (ds.dim * 4 + 2));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&m.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&p.to_le_bytes());
    for s in &ds.samples {
        if s.x.len() != ds.dim {
            return Err(Error::DimensionMismatch {
                context: "dataset row",
                expected: ds.dim,
                actual: s.x.len(),
            });
        }
        for v in &s.x {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for s in &ds.samples {
        out.extend_from_slice(&s.label.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("header needs {HEADER_LEN} bytes, got {}", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let m = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let n = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let p = u16::from_le_bytes([bytes[12], bytes[13]]) as usize;
    let expected = HEADER_LEN + n * p * 4 + n * 2;
    if bytes.len() != expected {
        return Err(Error::Format(format!("expected {expected} bytes, got {}", bytes.len())));
    }
    let body = &bytes[HEADER_LEN..];
    let (rows, labels) = body.split_at(n * p * 4);
    let samples = rows
        .chunks_exact((p * 4).max(1))
        .take(n)
        .zip(labels.chunks_exact(2))
        .map(|(row, lab)| {
            let x = row
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            LabeledSample {
                x,
                label: u16::from_le_bytes([lab[0], lab[1]]),
            }
        })
        .collect::<Vec<_>>();
    if let Some(bad) = samples.iter().find(|s| s.label as usize >= m) {
        return Err(Error::Format(format!("label {} outside {m} classes", bad.label)));
    }
    Ok(Dataset {
        num_classes: m,
        dim: p,
        samples,
    })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    let mut f = std::fs::File::create(path).map_err(Error::at_path(path))?;
    f.write_all(&bytes).map_err(Error::at_path(path))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(Error::at_path(path))?;
    decode_dataset(&bytes)
}
