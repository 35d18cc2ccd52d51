//! The frozen generalist: a fixed random `tanh` feature map followed by a
//! cosine-similarity head against one unit prototype per class, plus a reader
//! for logits produced by an external model.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SailError};
use crate::linalg::{self, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneralistConfig {
    pub feature_dim: usize,
    /// Multiplier applied to cosine similarities.
    pub temperature: f64,
    /// Standard deviation of the feature-map weights is `gain / √d_in`.
    pub gain: f64,
}

impl Default for GeneralistConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            temperature: 100.0,
            gain: 1.0,
        }
    }
}

/// Immutable cosine classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeClassifier {
    feature_weight: Matrix,
    feature_bias: Vec<f64>,
    prototypes: Vec<Vec<f64>>,
    temperature: f64,
}

impl PrototypeClassifier {
    /// Builds the classifier from explicit parts. Prototypes are normalized.
    pub fn from_parts(
        feature_weight: Matrix,
        feature_bias: Vec<f64>,
        prototypes: Vec<Vec<f64>>,
        temperature: f64,
    ) -> Result<Self> {
        if feature_bias.len() != feature_weight.rows() {
            return Err(SailError::invalid("feature bias length mismatch"));
        }
        if prototypes.len() < 2 {
            return Err(SailError::invalid("need at least two prototypes"));
        }
        let mut unit = Vec::with_capacity(prototypes.len());
        for (k, p) in prototypes.into_iter().enumerate() {
            if p.len() != feature_weight.rows() {
                return Err(SailError::invalid(format!("prototype {k} has wrong dimension")));
            }
            let n = linalg::norm(&p);
            if n == 0.0 {
                return Err(SailError::invalid(format!("prototype {k} is the zero vector")));
            }
            unit.push(p.into_iter().map(|x| x / n).collect());
        }
        Ok(Self {
            feature_weight,
            feature_bias,
            prototypes: unit,
            temperature,
        })
    }

    /// Checks shapes and that every prototype has unit norm.
    pub fn validate(&self) -> Result<()> {
        let m = self.feature_weight.rows();
        if self.feature_bias.len() != m || self.prototypes.len() < 2 || !(self.temperature > 0.0) {
            return Err(SailError::invalid("malformed prototype classifier"));
        }
        for (k, p) in self.prototypes.iter().enumerate() {
            if p.len() != m || (linalg::norm(p) - 1.0).abs() > 1e-9 {
                return Err(SailError::invalid(format!("prototype {k} is not a unit vector of length {m}")));
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn d_in(&self) -> usize {
        self.feature_weight.cols()
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// `φ(x) = tanh(W x + b)` for every row.
    pub fn features(&self, batch: &Matrix) -> Matrix {
        let mut f = batch.matmul_t(&self.feature_weight);
        f.add_row_vector(&self.feature_bias);
        f.map(f64::tanh)
    }

    /// Cosine logits for precomputed features.
    pub fn logits_from_features(&self, features: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(features.rows(), self.classes());
        for i in 0..features.rows() {
            let phi = features.row(i);
            let n = linalg::norm(phi);
            let row = out.row_mut(i);
            for (k, psi) in self.prototypes.iter().enumerate() {
                row[k] = if n == 0.0 {
                    0.0
                } else {
                    self.temperature * linalg::dot(phi, psi) / n
                };
            }
        }
        out
    }

    /// `temperature · cos(φ(x), ψ_k)` for each row and class.
    pub fn predict(&self, batch: &Matrix) -> Matrix {
        self.logits_from_features(&self.features(batch))
    }

    /// Every parameter in a fixed order (feature weight, bias, prototypes,
    /// temperature), for fingerprinting.
    pub fn values(&self) -> Vec<f64> {
        let mut v = self.feature_weight.as_slice().to_vec();
        v.extend_from_slice(&self.feature_bias);
        for p in &self.prototypes {
            v.extend_from_slice(p);
        }
        v.push(self.temperature);
        v
    }
}

/// Seeded random feature map with zero bias.
pub fn random_feature_map(d_in: usize, config: &GeneralistConfig, seed: u64) -> (Matrix, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = config.gain / (d_in as f64).sqrt();
    (
        Matrix::random_normal(config.feature_dim, d_in, std, &mut rng),
        vec![0.0; config.feature_dim],
    )
}

/// Prototypes are the normalized mean feature of each class over `data`.
pub fn fit_prototypes(
    features: &Matrix,
    labels: &[usize],
    classes: usize,
    config: &GeneralistConfig,
    seed: u64,
) -> Result<PrototypeClassifier> {
    if features.rows() != labels.len() {
        return Err(SailError::invalid("features and labels differ in length"));
    }
    if config.feature_dim == 0 || !(config.temperature > 0.0) {
        return Err(SailError::Config("generalist needs feature_dim > 0 and temperature > 0".into()));
    }
    let (w, b) = random_feature_map(features.cols(), config, seed);
    let probe = PrototypeClassifier {
        feature_weight: w,
        feature_bias: b,
        prototypes: Vec::new(),
        temperature: config.temperature,
    };
    let phi = probe.features(features);
    let mut sums = vec![vec![0.0; config.feature_dim]; classes];
    let mut counts = vec![0usize; classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(SailError::invalid(format!("label {y} out of range")));
        }
        counts[y] += 1;
        for (s, f) in sums[y].iter_mut().zip(phi.row(i)) {
            *s += f;
        }
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(SailError::Fit { class });
    }
    let means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|x| x / c as f64).collect())
        .collect();
    PrototypeClassifier::from_parts(probe.feature_weight, probe.feature_bias, means, config.temperature)
}

/// One line of an external logits file.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitRecord {
    pub sample_id: String,
    pub label: Option<usize>,
    pub logits: Vec<f64>,
}

/// Streaming reader for external logits files.
///
/// Grammar, one record per line (UTF-8):
///
/// ```text
/// record    := sample_id "," label "," logit ("," logit)+
/// sample_id := one or more characters other than "," and whitespace
/// label     := "-" | non-negative integer
/// logit     := finite decimal floating-point number
/// ```
///
/// Blank lines and lines starting with `#` are ignored. Every record must
/// carry the same number of logits (at least 2) and sample ids must be
/// unique.
pub struct ExternalLogitReader<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    classes: Option<usize>,
    seen: HashSet<String>,
    source: String,
}

impl<R: BufRead> ExternalLogitReader<R> {
    pub fn new(reader: R, source: impl Into<String>) -> Self {
        Self {
            lines: reader.lines(),
            line_no: 0,
            classes: None,
            seen: HashSet::new(),
            source: source.into(),
        }
    }

    /// Class count, known once the first record has been read.
    pub fn classes(&self) -> Option<usize> {
        self.classes
    }

    fn err(&self, msg: impl Into<String>) -> SailError {
        SailError::parse(format!("{}:{}", self.source, self.line_no), msg)
    }

    fn parse_line(&mut self, line: &str) -> Result<LogitRecord> {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 4 {
            return Err(self.err(format!(
                "expected sample_id,label,logit,logit[,...], found {} fields",
                fields.len()
            )));
        }
        let id = fields[0];
        if id.is_empty() || id.contains(char::is_whitespace) {
            return Err(self.err("sample_id must be non-empty without whitespace"));
        }
        let label = match fields[1] {
            "-" => None,
            s => Some(
                s.parse::<usize>()
                    .map_err(|_| self.err(format!("label `{s}` is neither `-` nor a class index")))?,
            ),
        };
        let mut logits = Vec::with_capacity(fields.len() - 2);
        for (j, s) in fields[2..].iter().enumerate() {
            let v: f64 = s
                .parse()
                .map_err(|_| self.err(format!("logit {} (`{s}`) is not a number", j + 1)))?;
            if !v.is_finite() {
                return Err(self.err(format!("logit {} is not finite", j + 1)));
            }
            logits.push(v);
        }
        match self.classes {
            None => self.classes = Some(logits.len()),
            Some(k) if k != logits.len() => {
                return Err(self.err(format!(
                    "record has {} logits, earlier records have {k}",
                    logits.len()
                )))
            }
            _ => {}
        }
        if let Some(y) = label {
            if y >= logits.len() {
                return Err(self.err(format!("label {y} out of range for {} classes", logits.len())));
            }
        }
        if !self.seen.insert(id.to_string()) {
            return Err(self.err(format!("duplicate sample_id `{id}`")));
        }
        Ok(LogitRecord {
            sample_id: id.to_string(),
            label,
            logits,
        })
    }
}

impl<R: BufRead> Iterator for ExternalLogitReader<R> {
    type Item = Result<LogitRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            return Some(self.parse_line(t));
        }
    }
}

/// Opens an external logits file for streaming.
pub fn load_external_logits(path: &Path) -> Result<ExternalLogitReader<BufReader<File>>> {
    let f = File::open(path).map_err(|e| SailError::Io(format!("{}: {e}", path.display())))?;
    Ok(ExternalLogitReader::new(BufReader::new(f), path.display().to_string()))
}

/// Writes records in the external logits format. Values use the shortest
/// decimal that round-trips exactly.
pub fn write_external_logits<W: Write>(records: &[LogitRecord], mut w: W) -> Result<()> {
    for r in records {
        write!(w, "{},", r.sample_id)?;
        match r.label {
            Some(y) => write!(w, "{y}")?,
            None => write!(w, "-")?,
        }
        for v in &r.logits {
            write!(w, ",{v:?}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn toy() -> (Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::random_normal(30, 5, 2.0, &mut rng);
        let y = (0..30).map(|i| i % 3).collect();
        (x, y)
    }

    #[test]
    fn prototypes_are_unit_and_deterministic() {
        let (x, y) = toy();
        let cfg = GeneralistConfig::default();
        let a = fit_prototypes(&x, &y, 3, &cfg, 7).unwrap();
        assert_eq!(a, fit_prototypes(&x, &y, 3, &cfg, 7).unwrap());
        for p in a.prototypes() {
            assert!((linalg::norm(p) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_sample_prototype_is_its_feature() {
        let (x, _) = toy();
        let x = x.select_rows(&[0, 1]);
        let cfg = GeneralistConfig::default();
        let c = fit_prototypes(&x, &[0, 1], 2, &cfg, 1).unwrap();
        let phi = c.features(&x);
        for k in 0..2 {
            let n = linalg::norm(phi.row(k));
            for (a, b) in c.prototypes()[k].iter().zip(phi.row(k)) {
                assert!((a - b / n).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicated_data_gives_same_prototypes() {
        let (x, y) = toy();
        let idx: Vec<usize> = (0..30).chain(0..30).collect();
        let y2: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        let cfg = GeneralistConfig::default();
        let a = fit_prototypes(&x, &y, 3, &cfg, 2).unwrap();
        let b = fit_prototypes(&x.select_rows(&idx), &y2, 3, &cfg, 2).unwrap();
        for (p, q) in a.prototypes().iter().zip(b.prototypes()) {
            for (u, v) in p.iter().zip(q) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_class_is_a_fit_error() {
        let (x, _) = toy();
        let y = vec![0; 30];
        let err = fit_prototypes(&x, &y, 2, &GeneralistConfig::default(), 0).unwrap_err();
        assert_eq!(err, SailError::Fit { class: 1 });
    }

    #[test]
    fn parallel_and_orthogonal_features() {
        let w = Matrix::identity(2);
        let c = PrototypeClassifier::from_parts(w, vec![0.0; 2], vec![vec![1.0, 0.0], vec![0.0, 2.0]], 100.0)
            .unwrap();
        let f = Matrix::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.0]]);
        let z = c.logits_from_features(&f);
        assert!((z[(0, 0)] - 100.0).abs() < 1e-12);
        assert_eq!(z[(0, 1)], 0.0);
        assert_eq!(z.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn argmax_matches_naive_nearest_prototype() {
        let (x, y) = toy();
        let c = fit_prototypes(&x, &y, 3, &GeneralistConfig::default(), 4).unwrap();
        let z = c.predict(&x);
        let phi = c.features(&x);
        for i in 0..x.rows() {
            let mut best = 0;
            let mut best_cos = f64::NEG_INFINITY;
            for (k, psi) in c.prototypes().iter().enumerate() {
                let cos = linalg::cosine(phi.row(i), psi);
                if cos > best_cos {
                    best_cos = cos;
                    best = k;
                }
            }
            assert_eq!(linalg::argmax(z.row(i)), best);
        }
    }

    proptest! {
        #[test]
        fn feature_rescaling_leaves_logits(scale in 0.01..100.0f64, seed in 0u64..100) {
            let (x, y) = toy();
            let c = fit_prototypes(&x, &y, 3, &GeneralistConfig::default(), seed).unwrap();
            let phi = c.features(&x);
            let a = c.logits_from_features(&phi);
            let b = c.logits_from_features(&phi.map(|v| v * scale));
            for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }
    }

    fn read_all(text: &str) -> Result<Vec<LogitRecord>> {
        ExternalLogitReader::new(text.as_bytes(), "mem").collect()
    }

    #[test]
    fn external_empty_file() {
        assert!(read_all("").unwrap().is_empty());
    }

    #[test]
    fn external_schema_errors_carry_line() {
        let err = read_all("a,-,1,2,3,4,5\nb,1,1,2,3\n").unwrap_err();
        match err {
            SailError::Parse { location, .. } => assert_eq!(location, "mem:2"),
            other => panic!("{other:?}"),
        }
        assert!(read_all("a,-,1,2\na,-,3,4\n").is_err());
        assert!(read_all("a,x,1,2\n").is_err());
        assert!(read_all("a,5,1,2\n").is_err());
        assert!(read_all("a,-,1,nan\n").is_err());
        assert!(read_all("a,-,1\n").is_err());
    }

    #[test]
    fn external_comments_and_labels() {
        let r = read_all("# header\n\ns1,2,0.5,1,-3\ns2,-,0,0,0\n").unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].label, Some(2));
        assert_eq!(r[1].label, None);
        assert_eq!(r[0].logits, vec![0.5, 1.0, -3.0]);
    }

    #[test]
    fn external_roundtrip_1000_records() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let records: Vec<LogitRecord> = (0..1000)
            .map(|i| LogitRecord {
                sample_id: format!("s{i}"),
                label: if i % 3 == 0 { None } else { Some(i % 7) },
                logits: (0..7).map(|_| rng.random_range(-1e3..1e3) * rng.random::<f64>()).collect(),
            })
            .collect();
        let mut buf = Vec::new();
        write_external_logits(&records, &mut buf).unwrap();
        let back = read_all(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back.len(), records.len());
        for (a, b) in records.iter().zip(&back) {
            assert_eq!(a.sample_id, b.sample_id);
            assert_eq!(a.label, b.label);
            for (u, v) in a.logits.iter().zip(&b.logits) {
                assert!((u - v).abs() <= 1e-12);
            }
        }
    }
}
