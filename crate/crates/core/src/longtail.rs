//! Long-tailed class-count profiles and the datasets built from them.
//!
//! A profile assigns `round(n_0 * mu^i)` samples to class `i` (0-indexed),
//! rounding half to even and flooring at one. Synthetic data places each
//! class at a random direction scaled by `class_mean_scale` and adds
//! isotropic Gaussian noise. Training splits follow the profile; test splits
//! are balanced.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::effnum::ClassCounts;
use crate::error::{domain, Error, Result};

/// `mu = imbalance^(-1/(C-1))`, so the last class gets `n_0 / imbalance`
/// before rounding.
pub fn mu_from_imbalance(n_classes: usize, imbalance: f64) -> Result<f64> {
    if n_classes < 2 {
        return Err(domain("imbalance needs at least two classes"));
    }
    if !(imbalance >= 1.0 && imbalance.is_finite()) {
        return Err(domain(format!(
            "imbalance factor must be >= 1, got {imbalance}"
        )));
    }
    Ok(imbalance.powf(-1.0 / (n_classes - 1) as f64))
}

/// Largest class count over smallest.
pub fn imbalance_factor(counts: &ClassCounts) -> Result<f64> {
    let c = counts.as_slice();
    if let Some(class) = c.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass { class });
    }
    let max = *c.iter().max().expect("non-empty");
    let min = *c.iter().min().expect("non-empty");
    Ok(max as f64 / min as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongTailProfile {
    pub n_classes: usize,
    pub base_count: u64,
    pub mu: f64,
    pub counts: ClassCounts,
}

pub fn build_profile(n_classes: usize, base_count: u64, mu: f64) -> Result<LongTailProfile> {
    if n_classes == 0 {
        return Err(domain("profile needs at least one class"));
    }
    if base_count == 0 {
        return Err(domain("base count must be >= 1"));
    }
    if !(mu > 0.0 && mu <= 1.0) {
        return Err(domain(format!("mu must lie in (0, 1], got {mu}")));
    }
    let counts = (0..n_classes)
        .map(|i| {
            let target = base_count as f64 * mu.powi(i as i32);
            (target.round_ties_even() as u64).max(1)
        })
        .collect();
    Ok(LongTailProfile {
        n_classes,
        base_count,
        mu,
        counts: ClassCounts::new(counts)?,
    })
}

impl LongTailProfile {
    pub fn from_imbalance(n_classes: usize, base_count: u64, imbalance: f64) -> Result<Self> {
        build_profile(
            n_classes,
            base_count,
            mu_from_imbalance(n_classes, imbalance)?,
        )
    }

    pub fn uniform(n_classes: usize, per_class: u64) -> Result<Self> {
        build_profile(n_classes, per_class, 1.0)
    }

    pub fn imbalance(&self) -> f64 {
        imbalance_factor(&self.counts).expect("profile counts are floored at 1")
    }

    /// Writes `class_index,count` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_counts_csv(&self.counts, path)
    }
}

pub fn write_counts_csv(counts: &ClassCounts, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["class_index", "count"])?;
    for (i, c) in counts.as_slice().iter().enumerate() {
        w.write_record([i.to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `class_index,count` file. Indices must be `0..C` in order.
pub fn read_counts_csv(path: &Path) -> Result<ClassCounts> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["class_index", "count"] {
        return Err(Error::Schema(format!(
            "{}: expected header 'class_index,count'",
            path.display()
        )));
    }
    let mut counts = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let idx: usize = rec
            .get(0)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("class_index: {e}")))?;
        if idx != counts.len() {
            return Err(parse_err(format!(
                "expected class_index {}, got {idx}",
                counts.len()
            )));
        }
        let n: u64 = rec
            .get(1)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("count: {e}")))?;
        counts.push(n);
    }
    ClassCounts::new(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataSpec {
    pub dim: usize,
    pub class_mean_scale: f64,
    pub noise_std: f64,
    pub rng_seed: u64,
}

const MEANS_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

impl SyntheticDataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(domain("dim must be >= 1"));
        }
        if !(self.class_mean_scale > 0.0 && self.class_mean_scale.is_finite()) {
            return Err(domain("class_mean_scale must be positive"));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(domain("noise_std must be positive"));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(stream);
        rng
    }

    /// Class centers: uniformly random directions scaled to `class_mean_scale`.
    /// Depends only on the seed and `dim`, so train and test splits share them.
    pub fn class_means(&self, n_classes: usize) -> Vec<Vec<f64>> {
        let mut rng = self.rng(MEANS_STREAM);
        (0..n_classes)
            .map(|_| loop {
                let v: Vec<f64> = (0..self.dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    break v
                        .into_iter()
                        .map(|x| x * self.class_mean_scale / norm)
                        .collect();
                }
            })
            .collect()
    }

    fn generate(&self, counts: &ClassCounts, stream: u64) -> Result<Dataset> {
        self.validate()?;
        let means = self.class_means(counts.n_classes());
        let mut rng = self.rng(stream);
        let total = counts.total() as usize;
        let mut features = Vec::with_capacity(total * self.dim);
        let mut labels = Vec::with_capacity(total);
        for (class, (&n, mean)) in counts.as_slice().iter().zip(&means).enumerate() {
            for _ in 0..n {
                features.extend(mean.iter().map(|&m| {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    m + self.noise_std * eps
                }));
                labels.push(class);
            }
        }
        Dataset::new(self.dim, features, labels, counts.n_classes())
    }
}

/// Training split following `profile`.
pub fn generate_synthetic(profile: &LongTailProfile, spec: &SyntheticDataSpec) -> Result<Dataset> {
    spec.generate(&profile.counts, TRAIN_STREAM)
}

/// Balanced test split drawn around the same class means as
/// [`generate_synthetic`] with the same spec.
pub fn generate_balanced_test(
    n_classes: usize,
    per_class: u64,
    spec: &SyntheticDataSpec,
) -> Result<Dataset> {
    let profile = LongTailProfile::uniform(n_classes, per_class)?;
    spec.generate(&profile.counts, TEST_STREAM)
}

/// Feature matrix (row-major), labels and the per-class counts they imply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    class_counts: ClassCounts,
}

impl Dataset {
    pub fn new(
        dim: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::Shape(format!(
                "{} feature values for {} samples of dim {dim}",
                features.len(),
                labels.len()
            )));
        }
        let mut counts = vec![0u64; n_classes];
        for &y in &labels {
            *counts.get_mut(y).ok_or(Error::ClassIndex {
                index: y,
                n_classes,
            })? += 1;
        }
        Ok(Self {
            dim,
            features,
            labels,
            class_counts: ClassCounts::new(counts)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_counts.n_classes()
    }

    pub fn class_counts(&self) -> &ClassCounts {
        &self.class_counts
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(self.dim, features, labels, self.n_classes())
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.n_classes()];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }

    /// Stratified split: each class sends `floor(fraction * n_c)` samples to
    /// the second dataset, always leaving at least one behind.
    pub fn split_stratified(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(domain(format!(
                "split fraction must lie in [0, 1), got {fraction}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = Vec::new();
        let mut held = Vec::new();
        for members in self.indices_by_class() {
            let n = members.len();
            let n_held = ((fraction * n as f64).floor() as usize).min(n.saturating_sub(1));
            let mut chosen: Vec<usize> = sample(&mut rng, n, n_held).into_iter().collect();
            chosen.sort_unstable();
            let mut c = chosen.iter().peekable();
            for (k, &idx) in members.iter().enumerate() {
                if c.peek() == Some(&&k) {
                    c.next();
                    held.push(idx);
                } else {
                    keep.push(idx);
                }
            }
        }
        if held.is_empty() {
            return Err(domain("split leaves the held-out part empty"));
        }
        Ok((self.select(&keep)?, self.select(&held)?))
    }

    /// Writes `label,x0,...,x{d-1}` with shortest round-trip float formatting.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header: Vec<String> = std::iter::once("label".to_string())
            .chain((0..self.dim).map(|j| format!("x{j}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.len() {
            write!(out, "{}", self.labels[i])?;
            for v in self.row(i) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Uniformly subsamples each class without replacement down to the profile
/// counts. Selected rows keep their original order and bits.
pub fn subsample_to_profile(
    data: &Dataset,
    profile: &LongTailProfile,
    seed: u64,
) -> Result<Dataset> {
    subsample_to_counts(data, &profile.counts, seed)
}

pub fn subsample_to_counts(data: &Dataset, target: &ClassCounts, seed: u64) -> Result<Dataset> {
    if target.n_classes() != data.n_classes() {
        return Err(Error::Shape(format!(
            "profile has {} classes, dataset has {}",
            target.n_classes(),
            data.n_classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(target.total() as usize);
    for (class, (members, &want)) in data
        .indices_by_class()
        .iter()
        .zip(target.as_slice())
        .enumerate()
    {
        let want = want as usize;
        if want > members.len() {
            return Err(Error::NotEnoughSamples {
                class,
                available: members.len(),
                requested: want,
            });
        }
        picked.extend(
            sample(&mut rng, members.len(), want)
                .into_iter()
                .map(|k| members[k]),
        );
    }
    picked.sort_unstable();
    data.select(&picked)
}

/// Expected shape of an ingested CSV. `n_classes` bounds the labels when set;
/// otherwise the class count is one past the largest label seen.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub n_classes: Option<usize>,
}

/// Reads `label,feature_1,...,feature_d` rows after a header line.
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let n_fields = r.headers()?.len();
    if n_fields < 2 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            reason: "header needs a label column and at least one feature column".into(),
        });
    }
    let dim = n_fields - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(row + 2);
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        };
        if rec.len() != n_fields {
            return Err(parse_err(format!(
                "row {} has {} fields, expected {n_fields}",
                row + 1,
                rec.len()
            )));
        }
        let label: usize = rec[0]
            .parse()
            .map_err(|e| parse_err(format!("label '{}': {e}", &rec[0])))?;
        if let Some(c) = schema.n_classes {
            if label >= c {
                return Err(parse_err(format!(
                    "label {label} out of range for {c} classes"
                )));
            }
        }
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|e| parse_err(format!("feature '{field}': {e}")))?;
            features.push(v);
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n_classes = schema
        .n_classes
        .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(dim, features, labels, n_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn spec(seed: u64) -> SyntheticDataSpec {
        SyntheticDataSpec {
            dim: 2,
            class_mean_scale: 3.0,
            noise_std: 1.0,
            rng_seed: seed,
        }
    }

    #[test]
    fn mu_examples() {
        // 0.01^(1/9) = 0.59948425031894101481...
        assert!((mu_from_imbalance(10, 100.0).unwrap() - 0.599_484_250_318_941).abs() < 1e-14);
        assert_eq!(mu_from_imbalance(10, 1.0).unwrap(), 1.0);
        assert!((mu_from_imbalance(2, 200.0).unwrap() - 0.005).abs() < 1e-15);
        assert!(mu_from_imbalance(1, 10.0).is_err());
        assert!(mu_from_imbalance(10, 0.5).is_err());
    }

    #[test]
    fn profile_examples() {
        let p = build_profile(4, 5000, 0.5).unwrap();
        assert_eq!(p.counts.as_slice(), &[5000, 2500, 1250, 625]);
        let p = build_profile(3, 10, 0.1).unwrap();
        assert_eq!(p.counts.as_slice(), &[10, 1, 1]);
        let p = LongTailProfile::from_imbalance(10, 5000, 100.0).unwrap();
        assert!((p.imbalance() - 100.0).abs() <= 5.0);
        assert!(build_profile(3, 0, 0.5).is_err());
        assert!(build_profile(3, 10, 0.0).is_err());
        assert!(build_profile(3, 10, 1.5).is_err());
    }

    #[test]
    fn rounding_is_half_to_even() {
        // 5 * 0.5 = 2.5 -> 2, 5 * 0.5^2 = 1.25 -> 1
        assert_eq!(
            build_profile(3, 5, 0.5).unwrap().counts.as_slice(),
            &[5, 2, 1]
        );
        // 7 * 0.5 = 3.5 -> 4
        assert_eq!(build_profile(2, 7, 0.5).unwrap().counts.as_slice(), &[7, 4]);
    }

    #[test]
    fn profile_is_log_linear_up_to_rounding() {
        let p = LongTailProfile::from_imbalance(100, 5000, 200.0).unwrap();
        let c = p.counts.as_slice();
        assert!(c.windows(2).all(|w| w[0] >= w[1]));
        for (i, &n) in c.iter().enumerate() {
            let exact = 5000.0 * p.mu.powi(i as i32);
            assert!((n as f64 - exact).abs() <= 0.5 + 1e-9);
        }
    }

    #[test]
    fn imbalance_examples() {
        assert_eq!(
            imbalance_factor(&ClassCounts::new(vec![5000, 625]).unwrap()).unwrap(),
            8.0
        );
        assert_eq!(
            imbalance_factor(&ClassCounts::new(vec![7, 7, 7]).unwrap()).unwrap(),
            1.0
        );
        let p = LongTailProfile::from_imbalance(10, 5000, 200.0).unwrap();
        assert!((p.imbalance() - 200.0).abs() / 200.0 < 0.05);
        assert!(imbalance_factor(&ClassCounts::new(vec![3, 0]).unwrap()).is_err());
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let profile = LongTailProfile::uniform(2, 10).unwrap();
        let a = generate_synthetic(&profile, &spec(1)).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a.class_counts().as_slice(), &[10, 10]);
        let b = generate_synthetic(&profile, &spec(1)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&profile, &spec(2)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn vanishing_noise_collapses_to_means() {
        let mut s = spec(4);
        s.noise_std = 1e-300;
        let profile = build_profile(3, 8, 0.5).unwrap();
        let data = generate_synthetic(&profile, &s).unwrap();
        let means = s.class_means(3);
        for i in 0..data.len() {
            assert_eq!(data.row(i), means[data.labels()[i]].as_slice());
        }
        for m in &means {
            let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn test_split_shares_means() {
        let s = spec(9);
        let test = generate_balanced_test(3, 5, &s).unwrap();
        assert_eq!(test.class_counts().as_slice(), &[5, 5, 5]);
        let mut tiny = s.clone();
        tiny.noise_std = 1e-300;
        let t = generate_balanced_test(3, 1, &tiny).unwrap();
        assert_eq!(t.row(2), tiny.class_means(3)[2].as_slice());
    }

    #[test]
    fn subsample_examples() {
        let data =
            generate_synthetic(&LongTailProfile::uniform(2, 100).unwrap(), &spec(3)).unwrap();
        let target = build_profile(2, 100, 0.5).unwrap();
        let sub = subsample_to_profile(&data, &target, 5).unwrap();
        assert_eq!(sub.class_counts().as_slice(), &[100, 50]);

        let full = LongTailProfile::uniform(2, 100).unwrap();
        assert_eq!(subsample_to_profile(&data, &full, 5).unwrap(), data);

        let too_many = LongTailProfile::uniform(2, 101).unwrap();
        assert!(matches!(
            subsample_to_profile(&data, &too_many, 5),
            Err(Error::NotEnoughSamples {
                available: 100,
                requested: 101,
                ..
            })
        ));
    }

    #[test]
    fn subsample_keeps_rows_bit_exact() {
        let data = generate_synthetic(&build_profile(3, 40, 0.7).unwrap(), &spec(8)).unwrap();
        let target = ClassCounts::new(vec![10, 7, 3]).unwrap();
        let sub = subsample_to_counts(&data, &target, 77).unwrap();
        for i in 0..sub.len() {
            let row = sub.row(i);
            assert!(
                (0..data.len()).any(|j| data.row(j) == row && data.labels()[j] == sub.labels()[i])
            );
        }
        assert_eq!(sub, subsample_to_counts(&data, &target, 77).unwrap());
    }

    #[test]
    fn stratified_split() {
        let data = generate_synthetic(&build_profile(3, 50, 0.5).unwrap(), &spec(8)).unwrap();
        let (train, val) = data.split_stratified(0.2, 1).unwrap();
        assert_eq!(val.class_counts().as_slice(), &[10, 5, 2]);
        assert_eq!(train.class_counts().as_slice(), &[40, 20, 10]);
        assert_eq!(train.len() + val.len(), data.len());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_synthetic(&build_profile(3, 6, 0.5).unwrap(), &spec(2)).unwrap();
        let path = dir.path().join("d.csv");
        data.write_csv(&path).unwrap();
        let back = ingest_csv(&path, &CsvSchema::default()).unwrap();
        assert_eq!(back, data);

        let good = dir.path().join("good.csv");
        fs::write(&good, "label,a,b\n0,1.0,2.0\n1,0.5,-1\n0,3,4\n").unwrap();
        let d = ingest_csv(&good, &CsvSchema::default()).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.class_counts().as_slice(), &[2, 1]);

        let ragged = dir.path().join("ragged.csv");
        fs::write(&ragged, "label,a,b\n0,1.0,2.0\n1,0.5\n").unwrap();
        let err = ingest_csv(&ragged, &CsvSchema::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 3") && err.contains("row 2"), "{err}");

        let empty = dir.path().join("empty.csv");
        fs::write(&empty, "label,a,b\n").unwrap();
        assert_eq!(
            ingest_csv(&empty, &CsvSchema::default())
                .unwrap_err()
                .to_string(),
            "empty dataset"
        );

        let schema = CsvSchema { n_classes: Some(2) };
        let oor = dir.path().join("oor.csv");
        fs::write(&oor, "label,a\n0,1\n2,1\n").unwrap();
        assert!(ingest_csv(&oor, &schema)
            .unwrap_err()
            .to_string()
            .contains("out of range"));

        assert!(matches!(
            ingest_csv(&dir.path().join("missing.csv"), &schema),
            Err(Error::Csv(_))
        ));
    }

    #[test]
    fn counts_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = build_profile(4, 5000, 0.5).unwrap();
        let path = dir.path().join("profile.csv");
        p.write_csv(&path).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            "class_index,count\n0,5000\n1,2500\n2,1250\n3,625\n"
        );
        assert_eq!(read_counts_csv(&path).unwrap(), p.counts);
    }
}
