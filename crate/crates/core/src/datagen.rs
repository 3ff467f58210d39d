//! Seeded two-dimensional classification datasets.
//!
//! Three families of increasing difficulty: `blobs` (Gaussian clusters on a
//! grid, linearly separable at low noise), `rings` (concentric annuli) and
//! `spirals` (interleaved arms). Train, validation and test splits come from
//! independent ChaCha streams of the same seed.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AcllError, Result};
use crate::net::Matrix;

/// Angular extent of each spiral arm, in full turns.
pub const SPIRAL_TURNS: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Blobs,
    Rings,
    Spirals,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub class_count: usize,
    pub n_per_split: usize,
    pub noise_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    fn stream(self) -> u64 {
        match self {
            SplitTag::Train => 1,
            SplitTag::Val => 2,
            SplitTag::Test => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub tag: SplitTag,
}

impl DatasetSplit {
    pub fn new(inputs: Matrix, labels: Vec<usize>, class_count: usize, tag: SplitTag) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(AcllError::Shape(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(AcllError::InvalidData(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        Ok(Self { inputs, labels, class_count, tag })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Writes `x1,x2,label` rows with a header line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "{}", (1..=self.inputs.cols()).map(|c| format!("x{c},")).collect::<String>())?;
        writeln!(out, "label")?;
        for (r, label) in self.labels.iter().enumerate() {
            for v in self.inputs.row(r) {
                write!(out, "{v},")?;
            }
            writeln!(out, "{label}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
}

impl Dataset {
    pub fn class_count(&self) -> usize {
        self.train.class_count
    }
}

pub fn validate_params(params: &DatasetParams) -> Result<()> {
    if params.class_count < 2 {
        return Err(AcllError::InvalidSpec(format!(
            "class_count must be at least 2, got {}",
            params.class_count
        )));
    }
    if params.n_per_split < params.class_count {
        return Err(AcllError::InvalidSpec(format!(
            "n_per_split ({}) must be at least class_count ({})",
            params.n_per_split, params.class_count
        )));
    }
    if !(params.noise_std.is_finite() && params.noise_std >= 0.0) {
        return Err(AcllError::InvalidSpec(format!(
            "noise_std must be finite and non-negative, got {}",
            params.noise_std
        )));
    }
    Ok(())
}

pub fn generate_dataset(kind: DatasetKind, params: &DatasetParams, seed: u64) -> Result<Dataset> {
    validate_params(params)?;
    Ok(Dataset {
        train: generate_split(kind, params, seed, SplitTag::Train),
        val: generate_split(kind, params, seed, SplitTag::Val),
        test: generate_split(kind, params, seed, SplitTag::Test),
    })
}

fn generate_split(kind: DatasetKind, params: &DatasetParams, seed: u64, tag: SplitTag) -> DatasetSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag.stream());
    let k = params.class_count;
    let n = params.n_per_split;
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        let (x, y) = match kind {
            DatasetKind::Blobs => blob_center(class, k),
            DatasetKind::Rings => {
                let radius = 1.5 * (class + 1) as f64 / k as f64;
                let angle = 2.0 * PI * rng.random::<f64>();
                (radius * angle.cos(), radius * angle.sin())
            }
            DatasetKind::Spirals => {
                let t: f64 = rng.random();
                let radius = 0.1 + 1.4 * t;
                let angle = 2.0 * PI * (class as f64 / k as f64 + SPIRAL_TURNS * t);
                (radius * angle.cos(), radius * angle.sin())
            }
        };
        let nx: f64 = StandardNormal.sample(&mut rng);
        let ny: f64 = StandardNormal.sample(&mut rng);
        data.push(x + params.noise_std * nx);
        data.push(y + params.noise_std * ny);
        labels.push(class);
    }
    DatasetSplit {
        inputs: Matrix::from_vec(n, 2, data),
        labels,
        class_count: k,
        tag,
    }
}

/// Centers on a square grid with unit spacing 2, centered at the origin.
fn blob_center(class: usize, k: usize) -> (f64, f64) {
    let side = (k as f64).sqrt().ceil() as usize;
    let rows = k.div_ceil(side);
    let col = class % side;
    let row = class / side;
    let x = 2.0 * col as f64 - (side - 1) as f64;
    let y = 2.0 * row as f64 - (rows - 1) as f64;
    (x, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(k: usize, n: usize, noise: f64) -> DatasetParams {
        DatasetParams { class_count: k, n_per_split: n, noise_std: noise }
    }

    #[test]
    fn same_seed_same_splits() {
        for kind in [DatasetKind::Blobs, DatasetKind::Rings, DatasetKind::Spirals] {
            let a = generate_dataset(kind, &params(3, 90, 0.1), 11).unwrap();
            let b = generate_dataset(kind, &params(3, 90, 0.1), 11).unwrap();
            assert_eq!(a, b);
            let c = generate_dataset(kind, &params(3, 90, 0.1), 12).unwrap();
            assert_ne!(a.train.inputs, c.train.inputs);
        }
    }

    #[test]
    fn classes_balanced_within_one() {
        let d = generate_dataset(DatasetKind::Spirals, &params(5, 103, 0.05), 3).unwrap();
        for split in [&d.train, &d.val, &d.test] {
            let mut counts = [0usize; 5];
            for &l in &split.labels {
                counts[l] += 1;
            }
            let target = 103.0 / 5.0;
            for c in counts {
                assert!((c as f64 - target).abs() <= 1.0, "{counts:?}");
            }
        }
    }

    #[test]
    fn splits_share_no_rows() {
        let d = generate_dataset(DatasetKind::Rings, &params(3, 300, 0.05), 5).unwrap();
        let mut seen = std::collections::HashSet::new();
        for split in [&d.train, &d.val, &d.test] {
            for r in 0..split.len() {
                let row: Vec<u64> = split.inputs.row(r).iter().map(|v| v.to_bits()).collect();
                assert!(seen.insert(row), "duplicate row across splits");
            }
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert!(generate_dataset(DatasetKind::Blobs, &params(1, 10, 0.0), 0).is_err());
        assert!(generate_dataset(DatasetKind::Blobs, &params(4, 3, 0.0), 0).is_err());
        assert!(generate_dataset(DatasetKind::Blobs, &params(2, 10, -0.1), 0).is_err());
        assert!(generate_dataset(DatasetKind::Blobs, &params(2, 10, f64::NAN), 0).is_err());
    }

    #[test]
    fn zero_noise_blobs_sit_on_centers() {
        let d = generate_dataset(DatasetKind::Blobs, &params(2, 10, 0.0), 0).unwrap();
        for r in 0..d.train.len() {
            let expected = if d.train.labels[r] == 0 { [-1.0, 0.0] } else { [1.0, 0.0] };
            assert_eq!(d.train.inputs.row(r), &expected);
        }
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let d = generate_dataset(DatasetKind::Blobs, &params(2, 4, 0.0), 0).unwrap();
        let mut buf = Vec::new();
        d.test.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "x1,x2,label");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[1], "-1,0,0");
    }
}
