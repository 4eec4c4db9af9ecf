//! Synthetic domain pairs built from Gaussian class-conditional mixtures,
//! CSV ingestion, and class-weighted resampling.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// Feature rows with optional integer class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
    pub domain: Domain,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Option<Vec<usize>>, domain: Domain) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::Shape(format!(
                    "{} labels for {} rows",
                    l.len(),
                    features.rows()
                )));
            }
        }
        Ok(Self {
            features,
            labels,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Data("dataset has no labels".into()))
    }

    /// Fraction of rows in each of `class_count` classes.
    pub fn class_frequencies(&self, class_count: usize) -> Result<Vec<f64>> {
        let labels = self.labels()?;
        if labels.is_empty() {
            return Err(Error::Data("empty dataset".into()));
        }
        let mut counts = vec![0usize; class_count];
        for &y in labels {
            *counts.get_mut(y).ok_or(Error::Index {
                index: y,
                len: class_count,
            })? += 1;
        }
        Ok(counts
            .into_iter()
            .map(|c| c as f64 / labels.len() as f64)
            .collect())
    }
}

/// Class-conditional Gaussian mixture. Target-domain samples use the same
/// conditionals with each class mean moved by `domain_shift[c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub class_count: usize,
    pub means: Vec<Vec<f64>>,
    /// Isotropic standard deviation per class.
    pub scales: Vec<f64>,
    pub priors: Vec<f64>,
    pub domain_shift: Vec<Vec<f64>>,
}

impl MixtureSpec {
    /// Unit-variance classes with means at `separation · e_c` (wrapping over
    /// coordinates when `class_count > dim`), uniform priors and a uniform
    /// 0.5 per-coordinate target shift.
    pub fn simplex(class_count: usize, dim: usize, separation: f64) -> Result<Self> {
        if class_count == 0 || dim == 0 {
            return Err(Error::Parameter("need at least one class and one dimension".into()));
        }
        let means = (0..class_count)
            .map(|c| {
                let mut m = vec![0.0; dim];
                m[c % dim] += separation * if c >= dim { -1.0 } else { 1.0 };
                m
            })
            .collect();
        let spec = Self {
            class_count,
            means,
            scales: vec![1.0; class_count],
            priors: vec![1.0 / class_count as f64; class_count],
            domain_shift: vec![vec![0.5; dim]; class_count],
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Two unit-variance classes in the plane. Coordinate 0 separates them
    /// (means `∓separation`) in both domains. Coordinate 1 is a cue
    /// (means `∓cue`) that the target shift moves by `±flip`, so for
    /// `flip > 2·cue` it points the wrong way on the target.
    pub fn spurious_cue(separation: f64, cue: f64, flip: f64) -> Result<Self> {
        let spec = Self {
            class_count: 2,
            means: vec![vec![-separation, -cue], vec![separation, cue]],
            scales: vec![1.0; 2],
            priors: vec![0.5; 2],
            domain_shift: vec![vec![0.0, flip], vec![0.0, -flip]],
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The same spec with every domain shift set to zero.
    pub fn without_shift(&self) -> Self {
        Self {
            domain_shift: vec![vec![0.0; self.dim()]; self.class_count],
            ..self.clone()
        }
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.class_count;
        if c == 0 {
            return Err(Error::Parameter("mixture needs at least one class".into()));
        }
        if self.means.len() != c || self.scales.len() != c || self.priors.len() != c || self.domain_shift.len() != c {
            return Err(Error::Parameter(format!(
                "mixture arrays must all have {c} entries"
            )));
        }
        let d = self.dim();
        if d == 0 {
            return Err(Error::Parameter("mixture means must be non-empty".into()));
        }
        if self.means.iter().chain(&self.domain_shift).any(|m| m.len() != d) {
            return Err(Error::Parameter(format!("all means and shifts must have dimension {d}")));
        }
        if self
            .means
            .iter()
            .chain(&self.domain_shift)
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(Error::Parameter("non-finite mean or shift".into()));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Parameter("scales must be nonnegative".into()));
        }
        validate_priors(&self.priors)
    }

    /// Same conditionals with different class priors.
    pub fn with_priors(&self, priors: Vec<f64>) -> Result<Self> {
        let spec = Self {
            priors,
            ..self.clone()
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The target-domain mixture: means moved by `domain_shift`, zero further shift.
    pub fn target_domain(&self, target_priors: Vec<f64>) -> Result<Self> {
        let means = self
            .means
            .iter()
            .zip(&self.domain_shift)
            .map(|(m, s)| m.iter().zip(s).map(|(a, b)| a + b).collect())
            .collect();
        let spec = Self {
            class_count: self.class_count,
            means,
            scales: self.scales.clone(),
            priors: target_priors,
            domain_shift: vec![vec![0.0; self.dim()]; self.class_count],
        };
        spec.validate()?;
        Ok(spec)
    }
}

pub(crate) fn validate_priors(p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Parameter("priors must be nonnegative".into()));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!("priors sum to {total}, not 1")));
    }
    Ok(())
}

/// Draws `n` labeled samples: labels from the priors, features from the
/// corresponding Gaussian conditional. Fully determined by `(spec, n, seed)`.
pub fn sample_mixture(spec: &MixtureSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Parameter("sample size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = WeightedIndex::new(&spec.priors)
        .map_err(|e| Error::Parameter(format!("priors: {e}")))?;
    let d = spec.dim();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = classes.sample(&mut rng);
        labels.push(c);
        let scale = spec.scales[c];
        for &mu in &spec.means[c] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(mu + scale * z);
        }
    }
    Dataset::new(Matrix::new(n, d, data)?, Some(labels), Domain::Source)
}

/// Target features with labels held back for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDomain {
    features: Matrix,
    labels: Vec<usize>,
}

impl TargetDomain {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} rows",
                labels.len(),
                features.rows()
            )));
        }
        Ok(Self { features, labels })
    }

    /// The only view handed to training code.
    pub fn features(&self) -> &Matrix {
        &self.features
    }

    /// Labeled view for scoring predictions.
    pub fn evaluation_set(&self) -> Dataset {
        Dataset {
            features: self.features.clone(),
            labels: Some(self.labels.clone()),
            domain: Domain::Target,
        }
    }
}

/// A labeled source dataset and an unlabeled (for training) target domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPair {
    pub source: Dataset,
    pub target: TargetDomain,
}

const TARGET_SEED_SALT: u64 = 0x7461_7267_6574;

/// Source drawn from `base` (with its own priors), target drawn from the
/// shifted conditionals with `target_priors`.
pub fn make_bias_pair(
    base: &MixtureSpec,
    target_priors: &[f64],
    n_src: usize,
    n_tgt: usize,
    seed: u64,
) -> Result<DomainPair> {
    let source = sample_mixture(base, n_src, seed)?;
    let tgt_spec = base.target_domain(target_priors.to_vec())?;
    let tgt = sample_mixture(&tgt_spec, n_tgt, seed ^ TARGET_SEED_SALT)?;
    let labels = tgt.labels.expect("sampled datasets are labeled");
    Ok(DomainPair {
        source,
        target: TargetDomain::new(tgt.features, labels)?,
    })
}

/// Bootstrap resample of `n` rows with row `i` drawn with probability
/// proportional to `class_weights[y_i]`.
pub fn resample_by_class_weights(
    data: &Dataset,
    class_weights: &[f64],
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    let labels = data.labels()?;
    let w: Vec<f64> = labels
        .iter()
        .map(|&y| {
            class_weights.get(y).copied().ok_or(Error::Index {
                index: y,
                len: class_weights.len(),
            })
        })
        .collect::<Result<_>>()?;
    let dist = WeightedIndex::new(&w)
        .map_err(|e| Error::DegenerateWeights(format!("resampling weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..n).map(|_| dist.sample(&mut rng)).collect();
    Dataset::new(
        data.features.select_rows(&idx)?,
        Some(idx.iter().map(|&i| labels[i]).collect()),
        data.domain,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum HeaderMode {
    /// Treat the first line as a header if any field fails to parse as a number.
    #[default]
    Detect,
    Present,
    Absent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub header: HeaderMode,
    /// Last column holds an integer class label.
    pub labeled: bool,
}

impl CsvSchema {
    pub fn labeled() -> Self {
        Self {
            header: HeaderMode::Detect,
            labeled: true,
        }
    }

    pub fn unlabeled() -> Self {
        Self {
            header: HeaderMode::Detect,
            labeled: false,
        }
    }
}

/// Loads a comma-separated feature file. The feature width is fixed by the
/// header (if any) or the first data row.
pub fn load_csv(path: impl AsRef<Path>, schema: CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;

    let mut width: Option<usize> = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0usize;

    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(i as u64 + 1, |p| p.line());
        if record.iter().all(str::is_empty) {
            continue;
        }
        if i == 0 {
            let numeric = record.iter().all(|f| f.parse::<f64>().is_ok());
            let header = match schema.header {
                HeaderMode::Present => true,
                HeaderMode::Absent => false,
                HeaderMode::Detect => !numeric,
            };
            if header {
                width = Some(record.len());
                continue;
            }
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                msg: format!("line {line} has {} fields, expected {w}", record.len()),
            });
        }
        let n_features = if schema.labeled { w.saturating_sub(1) } else { w };
        if n_features == 0 {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                msg: "no feature columns".into(),
            });
        }
        for field in record.iter().take(n_features) {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("'{field}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("'{field}' is not finite"),
                });
            }
            data.push(v);
        }
        if schema.labeled {
            let field = &record[w - 1];
            let y: usize = field.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("label '{field}' is not a nonnegative integer"),
            })?;
            labels.push(y);
        }
        rows += 1;
    }

    if rows == 0 {
        return Err(Error::Data(format!("{} contains no samples", path.display())));
    }
    let cols = data.len() / rows;
    Dataset::new(
        Matrix::new(rows, cols, data)?,
        schema.labeled.then_some(labels),
        Domain::Source,
    )
}

/// Writes features (and labels, if present) in the format [`load_csv`] reads.
pub fn write_csv(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("x{j}")).collect();
    if data.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for (i, row) in data.features.iter_rows().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        if let Some(l) = &data.labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn two_class() -> MixtureSpec {
        MixtureSpec::simplex(2, 2, 3.0).unwrap()
    }

    #[test]
    fn degenerate_priors_give_one_class() {
        let spec = two_class().with_priors(vec![1.0, 0.0]).unwrap();
        let d = sample_mixture(&spec, 200, 1).unwrap();
        assert!(d.labels().unwrap().iter().all(|&y| y == 0));
    }

    #[test]
    fn sampled_frequencies_follow_priors() {
        let spec = two_class().with_priors(vec![0.3, 0.7]).unwrap();
        let d = sample_mixture(&spec, 10_000, 2).unwrap();
        let f = d.class_frequencies(2).unwrap();
        assert!((f[0] - 0.3).abs() < 0.02 && (f[1] - 0.7).abs() < 0.02);
    }

    #[test]
    fn sampling_is_reproducible() {
        let spec = two_class();
        assert_eq!(sample_mixture(&spec, 50, 9).unwrap(), sample_mixture(&spec, 50, 9).unwrap());
        assert_ne!(sample_mixture(&spec, 50, 9).unwrap(), sample_mixture(&spec, 50, 10).unwrap());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = two_class();
        spec.priors = vec![0.6, 0.6];
        assert!(matches!(sample_mixture(&spec, 5, 0), Err(Error::Parameter(_))));
        let mut spec = two_class();
        spec.means[1] = vec![0.0];
        assert!(spec.validate().is_err());
        assert!(sample_mixture(&two_class(), 0, 0).is_err());
    }

    #[test]
    fn bias_pair_target_priors() {
        let pair = make_bias_pair(&two_class(), &[0.9, 0.1], 500, 5000, 3).unwrap();
        let f = pair.target.evaluation_set().class_frequencies(2).unwrap();
        assert!((f[0] - 0.9).abs() < 0.02);
        let pair = make_bias_pair(&two_class(), &[1.0, 0.0], 100, 300, 3).unwrap();
        assert!(pair.target.evaluation_set().labels().unwrap().iter().all(|&y| y == 0));
        assert_eq!(pair.source.dim(), pair.target.features().cols());
    }

    #[test]
    fn target_is_shifted() {
        let spec = two_class();
        let pair = make_bias_pair(&spec, &[0.5, 0.5], 4000, 4000, 5).unwrap();
        let mean = |m: &Matrix, j: usize| m.iter_rows().map(|r| r[j]).sum::<f64>() / m.rows() as f64;
        let diff = mean(pair.target.features(), 1) - mean(&pair.source.features, 1);
        assert!((diff - 0.5).abs() < 0.1, "{diff}");
    }

    #[test]
    fn spurious_cue_flips_on_target() {
        let spec = MixtureSpec::spurious_cue(2.0, 1.0, 2.5).unwrap();
        let t = spec.target_domain(vec![0.5, 0.5]).unwrap();
        assert_eq!(t.means, vec![vec![-2.0, 1.5], vec![2.0, -1.5]]);
        let flat = spec.without_shift();
        assert!(flat.domain_shift.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(flat.means, spec.means);
    }

    #[test]
    fn reweighting_reproduces_target_priors() {
        let spec = two_class();
        let src = sample_mixture(&spec, 10_000, 6).unwrap();
        let alpha = [0.9 / 0.5, 0.1 / 0.5];
        let r = resample_by_class_weights(&src, &alpha, 10_000, 7).unwrap();
        let f = r.class_frequencies(2).unwrap();
        assert!((f[0] - 0.9).abs() < 0.02, "{f:?}");
    }

    fn write_file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_fixture_files() {
        let f = write_file("1.0,2.0\n3.0,4.0\n5.0,6.5\n");
        let d = load_csv(f.path(), CsvSchema::unlabeled()).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.dim(), 2);
        assert!(d.labels.is_none());

        let f = write_file("a,b,label\n1.0,2.0,0\n3.0,4.0,1\n");
        let d = load_csv(f.path(), CsvSchema::labeled()).unwrap();
        assert_eq!(d.labels().unwrap(), &[0, 1]);
        assert_eq!(d.features.row(1), &[3.0, 4.0]);

        let f = write_file("");
        assert!(matches!(load_csv(f.path(), CsvSchema::unlabeled()), Err(Error::Data(_))));
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let f = write_file("x,y\n1.0,2.0\n1.0,oops\n");
        match load_csv(f.path(), CsvSchema::unlabeled()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let f = write_file("1.0,2.0\n1.0\n");
        assert!(matches!(load_csv(f.path(), CsvSchema::unlabeled()), Err(Error::Schema { .. })));
        let f = write_file("1.0,2.0,0.5\n");
        assert!(matches!(load_csv(f.path(), CsvSchema::labeled()), Err(Error::Parse { .. })));
    }

    #[test]
    fn csv_write_then_load() {
        let d = sample_mixture(&two_class(), 20, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        write_csv(&p, &d).unwrap();
        let back = load_csv(&p, CsvSchema::labeled()).unwrap();
        assert_eq!(back.features, d.features);
        assert_eq!(back.labels, d.labels);
    }
}
