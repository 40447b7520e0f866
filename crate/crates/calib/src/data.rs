//! Dataset generation, stratified splitting, and CSV ingestion.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Feature matrix with integer labels and a name for reporting.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub name: String,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, name: impl Into<String>) -> Self {
        assert_eq!(
            features.rows(),
            labels.len(),
            "dataset: {} feature rows vs {} labels",
            features.rows(),
            labels.len()
        );
        assert!(features.all_finite(), "dataset: non-finite features");
        Dataset {
            features,
            labels,
            name: name.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    /// Labels are required to cover 0..K-1, so K is max + 1.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Dataset {
        Dataset {
            features: self.features.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            name: name.into(),
        }
    }
}

/// Two interleaving half-circles with Gaussian noise: class 0 on the upper
/// half unit circle, class 1 on the reflected arc offset by (1, -0.5).
/// Classes are balanced (odd n gives class 0 the extra point).
pub fn make_two_moons(n: usize, noise: f64, seed: u64) -> Dataset {
    assert!(n >= 2, "two_moons: n {n} < 2");
    assert!(noise >= 0.0, "two_moons: negative noise");
    let n_outer = n / 2 + n % 2;
    let n_inner = n / 2;
    let mut rng = Rng::substream(seed, 0x30017);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n_outer {
        let t = std::f64::consts::PI * i as f64 / (n_outer - 1).max(1) as f64;
        rows.push(vec![t.cos(), t.sin()]);
        labels.push(0);
    }
    for i in 0..n_inner {
        let t = std::f64::consts::PI * i as f64 / (n_inner - 1).max(1) as f64;
        rows.push(vec![1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    if noise > 0.0 {
        for row in rows.iter_mut() {
            for x in row.iter_mut() {
                *x += rng.normal() * noise;
            }
        }
    }
    Dataset::new(Tensor::from_rows(&rows), labels, "two_moons")
}

/// Stratified split into (train, val, test): per-class seeded shuffles, then
/// largest-remainder apportionment of each split across classes, then a
/// seeded shuffle of each split so rows are not class-ordered. Keeps class
/// balance within +/-2 per split and is deterministic per seed.
pub fn split(ds: &Dataset, sizes: (usize, usize, usize), seed: u64) -> (Dataset, Dataset, Dataset) {
    let (n_train, n_val, n_test) = sizes;
    let total = n_train + n_val + n_test;
    assert!(
        total <= ds.len(),
        "split: sizes {:?} oversubscribe dataset of {} rows",
        sizes,
        ds.len()
    );

    let k = ds.num_classes();
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in ds.labels.iter().enumerate() {
        per_class[y].push(i);
    }
    for (c, indices) in per_class.iter_mut().enumerate() {
        let mut rng = Rng::substream(seed, 0x5317 + c as u64);
        rng.shuffle(indices);
    }

    let mut remaining: Vec<usize> = per_class.iter().map(Vec::len).collect();
    let mut cursor: Vec<usize> = vec![0; k];
    let mut splits: Vec<Vec<usize>> = Vec::with_capacity(3);
    for (which, &size) in [n_train, n_val, n_test].iter().enumerate() {
        let pool: usize = remaining.iter().sum();
        let quotas = apportion(size, &remaining, pool);
        let mut indices = Vec::with_capacity(size);
        for c in 0..k {
            let take = quotas[c];
            indices.extend_from_slice(&per_class[c][cursor[c]..cursor[c] + take]);
            cursor[c] += take;
            remaining[c] -= take;
        }
        let mut rng = Rng::substream(seed, 0x9134 + which as u64);
        rng.shuffle(&mut indices);
        splits.push(indices);
    }

    let base = &ds.name;
    (
        ds.subset(&splits[0], format!("{base}.train")),
        ds.subset(&splits[1], format!("{base}.val")),
        ds.subset(&splits[2], format!("{base}.test")),
    )
}

/// Largest-remainder apportionment of `size` slots across groups, capped by
/// per-group availability.
fn apportion(size: usize, available: &[usize], pool: usize) -> Vec<usize> {
    if size == 0 || pool == 0 {
        return vec![0; available.len()];
    }
    let mut quotas: Vec<usize> = Vec::with_capacity(available.len());
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(available.len());
    let mut assigned = 0;
    for (c, &avail) in available.iter().enumerate() {
        let exact = size as f64 * avail as f64 / pool as f64;
        let floor = (exact.floor() as usize).min(avail);
        quotas.push(floor);
        assigned += floor;
        remainders.push((exact - floor as f64, c));
    }
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut left = size - assigned;
    let mut idx = 0;
    while left > 0 {
        let (_, c) = remainders[idx % remainders.len()];
        if quotas[c] < available[c] {
            quotas[c] += 1;
            left -= 1;
        }
        idx += 1;
    }
    quotas
}

/// How confidence levels are placed in (0, 1).
#[derive(Clone, Debug)]
pub enum Spacing {
    /// Level i at (i + 0.5) / k.
    Uniform,
    /// Explicit levels, strictly increasing, strictly inside (0, 1).
    Custom(Vec<f64>),
}

/// A discrete source of true confidence levels with Bernoulli outcomes:
/// each sample picks a level by weight and then succeeds with probability
/// equal to that level.
#[derive(Clone, Debug)]
pub struct ConfidenceChannel {
    pub levels: Vec<f64>,
    pub weights: Vec<f64>,
    /// (level index, outcome) pairs.
    pub samples: Vec<(usize, bool)>,
}

impl ConfidenceChannel {
    /// Empirical success rate per level (NaN-free: levels with no samples
    /// report 0 count).
    pub fn empirical_rates(&self) -> Vec<(usize, f64)> {
        let k = self.levels.len();
        let mut count = vec![0usize; k];
        let mut hits = vec![0usize; k];
        for &(level, outcome) in &self.samples {
            count[level] += 1;
            if outcome {
                hits[level] += 1;
            }
        }
        (0..k)
            .map(|i| {
                (
                    count[i],
                    if count[i] == 0 {
                        0.0
                    } else {
                        hits[i] as f64 / count[i] as f64
                    },
                )
            })
            .collect()
    }
}

pub fn make_channel(k: usize, n: usize, spacing: Spacing, seed: u64) -> ConfidenceChannel {
    assert!(k >= 1, "channel: k {k} < 1");
    assert!(n >= 1, "channel: n {n} < 1");
    let levels: Vec<f64> = match spacing {
        Spacing::Uniform => (0..k).map(|i| (i as f64 + 0.5) / k as f64).collect(),
        Spacing::Custom(levels) => {
            assert_eq!(
                levels.len(),
                k,
                "channel: {} custom levels for k {k}",
                levels.len()
            );
            assert!(
                levels.iter().all(|&c| c > 0.0 && c < 1.0),
                "channel: custom levels must lie strictly inside (0, 1)"
            );
            assert!(
                levels.windows(2).all(|w| w[0] < w[1]),
                "channel: custom levels must be strictly increasing"
            );
            levels
        }
    };
    let weights = vec![1.0 / k as f64; k];
    let mut rng = Rng::substream(seed, 0xC4A1);
    let samples = (0..n)
        .map(|_| {
            let level = rng.weighted(&weights);
            let outcome = rng.bernoulli(levels[level]);
            (level, outcome)
        })
        .collect();
    ConfidenceChannel {
        levels,
        weights,
        samples,
    }
}

/// Which column of a CSV file holds the label.
#[derive(Clone, Debug)]
pub enum LabelColumn {
    Name(String),
    Index(usize),
}

/// Parse a dataset from CSV: UTF-8, comma-delimited, header row required,
/// no quoting. Feature cells must be finite numbers; the label column must
/// hold integers covering 0..K-1 with no gaps. Row numbers in errors count
/// from the header as row 1.
pub fn load_csv(path: &Path, label_column: &LabelColumn) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })?;
    parse_csv(&text, label_column, path)
}

pub fn parse_csv(text: &str, label_column: &LabelColumn, path: &Path) -> Result<Dataset> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty csv", path.display())))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let label_idx = match label_column {
        LabelColumn::Name(name) => columns.iter().position(|c| c == name).ok_or_else(|| {
            Error::Data(format!(
                "{}: no column named {name:?} in header",
                path.display()
            ))
        })?,
        LabelColumn::Index(i) => {
            if *i >= columns.len() {
                return Err(Error::Data(format!(
                    "{}: label column index {i} out of range for {} columns",
                    path.display(),
                    columns.len()
                )));
            }
            *i
        }
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (line_no, line) in lines {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != columns.len() {
            return Err(Error::Parse {
                path: path.into(),
                row: line_no + 1,
                column: "<row>".into(),
                message: format!("{} cells, expected {}", cells.len(), columns.len()),
            });
        }
        let mut row = Vec::with_capacity(columns.len() - 1);
        for (ci, cell) in cells.iter().enumerate() {
            if ci == label_idx {
                let value: i64 = cell.parse().map_err(|_| Error::Parse {
                    path: path.into(),
                    row: line_no + 1,
                    column: columns[ci].into(),
                    message: format!("label {cell:?} is not an integer"),
                })?;
                if value < 0 {
                    return Err(Error::Parse {
                        path: path.into(),
                        row: line_no + 1,
                        column: columns[ci].into(),
                        message: format!("negative label {value}"),
                    });
                }
                labels.push(value as usize);
            } else {
                let value: f64 = cell.parse().map_err(|_| Error::Parse {
                    path: path.into(),
                    row: line_no + 1,
                    column: columns[ci].into(),
                    message: format!("feature {cell:?} is not a number"),
                })?;
                if !value.is_finite() {
                    return Err(Error::Parse {
                        path: path.into(),
                        row: line_no + 1,
                        column: columns[ci].into(),
                        message: "non-finite feature".into(),
                    });
                }
                row.push(value);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }

    // k classes need at least k rows, so a max label at or beyond the row
    // count already implies a gap; this also bounds the table below.
    let max_label = labels.iter().copied().max().unwrap();
    if max_label >= labels.len() {
        return Err(Error::Data(format!(
            "{}: labels have a gap: max label {max_label} with only {} rows",
            path.display(),
            labels.len()
        )));
    }
    let k = max_label + 1;
    let mut seen = vec![false; k];
    for &y in &labels {
        seen[y] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Data(format!(
            "{}: labels have a gap: class {missing} absent but max label is {}",
            path.display(),
            k - 1
        )));
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    Ok(Dataset::new(Tensor::from_rows(&rows), labels, name))
}

/// Write a dataset in the same schema `load_csv` reads: feature columns
/// named f0..f{d-1} and a final `label` column.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    let d = ds.num_features();
    for j in 0..d {
        out.push_str(&format!("f{j},"));
    }
    out.push_str("label\n");
    for i in 0..ds.len() {
        for &x in ds.features.row(i) {
            out.push_str(&format!("{x},"));
        }
        out.push_str(&format!("{}\n", ds.labels[i]));
    }
    std::fs::write(path, out).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })
}

/// A Gaussian blob of points whose labels keep the base class with
/// probability `label_keep_prob` and flip to a uniformly random other class
/// otherwise. Used to inject known aleatoric noise per region.
#[derive(Clone, Debug)]
pub struct NoisyRegion {
    pub center: (f64, f64),
    pub std: f64,
    pub base_label: usize,
    pub label_keep_prob: f64,
}

/// Build a dataset of noisy regions; returns the dataset plus each row's
/// region index.
pub fn make_noisy_regions(
    regions: &[NoisyRegion],
    n_per_region: usize,
    num_classes: usize,
    seed: u64,
) -> (Dataset, Vec<usize>) {
    assert!(!regions.is_empty() && n_per_region > 0);
    assert!(num_classes >= 2);
    let mut rng = Rng::substream(seed, 0x4E015E);
    let mut rows = Vec::with_capacity(regions.len() * n_per_region);
    let mut labels = Vec::with_capacity(rows.capacity());
    let mut region_of = Vec::with_capacity(rows.capacity());
    for (r, region) in regions.iter().enumerate() {
        assert!(region.base_label < num_classes);
        for _ in 0..n_per_region {
            rows.push(vec![
                region.center.0 + rng.normal() * region.std,
                region.center.1 + rng.normal() * region.std,
            ]);
            let label = if rng.bernoulli(region.label_keep_prob) {
                region.base_label
            } else {
                let mut other = rng.below(num_classes - 1);
                if other >= region.base_label {
                    other += 1;
                }
                other
            };
            labels.push(label);
            region_of.push(r);
        }
    }
    (
        Dataset::new(Tensor::from_rows(&rows), labels, "noisy_regions"),
        region_of,
    )
}
