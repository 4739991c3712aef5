//! Class-class co-occurrence counts and the three derived measurements.
//!
//! Conventions that keep every entry finite:
//! * normalized count: rows with a zero denominator are zero
//! * Pearson: zero-variance columns give 0; the diagonal is 1 where variance is positive
//! * tanh-PMI: `N_t = M` (images); `A[u,v] = 0` with both frequencies positive gives -1;
//!   a class that never occurs gives 0

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const STATS_VERSION: &str = "holi-cooccurrence/v1";

/// Image-level class pair counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountMatrix {
    pub num_classes: usize,
    pub num_images: u64,
    /// Row-major `num_classes x num_classes`.
    pub counts: Vec<u64>,
}

impl CountMatrix {
    pub fn zeros(num_classes: usize) -> Self {
        CountMatrix {
            num_classes,
            num_images: 0,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn get(&self, u: usize, v: usize) -> u64 {
        self.counts[u * self.num_classes + v]
    }

    /// Images containing class `u`.
    pub fn frequency(&self, u: usize) -> u64 {
        self.get(u, u)
    }

    /// Adds one image's class set (duplicates count once).
    pub fn add_image(&mut self, classes: &[usize]) -> Result<()> {
        let n = self.num_classes;
        let mut present = vec![false; n];
        for &c in classes {
            if c >= n {
                return Err(Error::Index {
                    what: "class table",
                    index: c,
                    size: n,
                });
            }
            present[c] = true;
        }
        let members: Vec<usize> = (0..n).filter(|&c| present[c]).collect();
        for &u in &members {
            for &v in &members {
                self.counts[u * n + v] += 1;
            }
        }
        self.num_images += 1;
        Ok(())
    }

    /// Associative merge of partial counts.
    pub fn merge(&mut self, other: &CountMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape {
                op: "count merge",
                lhs: vec![self.num_classes],
                rhs: vec![other.num_classes],
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.num_images += other.num_images;
        Ok(())
    }
}

/// Square real matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Matrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[u * self.n + v]
    }

    fn set(&mut self, u: usize, v: usize, x: f64) {
        self.data[u * self.n + v] = x;
    }

    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("class");
        for n in names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for u in 0..self.n {
            out.push_str(names.get(u).map_or("", String::as_str));
            for v in 0..self.n {
                out.push_str(&format!(",{}", self.get(u, v)));
            }
            out.push('\n');
        }
        out
    }
}

pub fn accumulate_cooccurrence(corpus: &Corpus) -> Result<CountMatrix> {
    let mut cm = CountMatrix::zeros(corpus.num_classes());
    for scene in &corpus.scenes {
        let classes: Vec<usize> = scene.items.iter().map(|i| i.class_id).collect();
        cm.add_image(&classes).map_err(|e| Error::Validation {
            scene: scene.id.clone(),
            msg: e.to_string(),
        })?;
    }
    Ok(cm)
}

/// `A[u,v] / sum_v' A[u,v']`.
pub fn normalized_count(cm: &CountMatrix) -> Matrix {
    let n = cm.num_classes;
    let mut out = Matrix::zeros(n);
    for u in 0..n {
        let total: u64 = (0..n).map(|v| cm.get(u, v)).sum();
        if total == 0 {
            continue;
        }
        for v in 0..n {
            out.set(u, v, cm.get(u, v) as f64 / total as f64);
        }
    }
    out
}

/// Pearson correlation between columns of `A`, taken over the `N_c` entries.
pub fn pearson(cm: &CountMatrix) -> Matrix {
    let n = cm.num_classes;
    let mut out = Matrix::zeros(n);
    if n == 0 {
        return out;
    }
    let col = |u: usize| -> Vec<f64> { (0..n).map(|r| cm.get(r, u) as f64).collect() };
    let centered: Vec<Vec<f64>> = (0..n)
        .map(|u| {
            let c = col(u);
            let mean = c.iter().sum::<f64>() / n as f64;
            c.into_iter().map(|x| x - mean).collect()
        })
        .collect();
    let norms: Vec<f64> = centered
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    for u in 0..n {
        for v in 0..n {
            if norms[u] == 0.0 || norms[v] == 0.0 {
                continue;
            }
            let r = if u == v {
                1.0
            } else {
                let dot: f64 = centered[u].iter().zip(&centered[v]).map(|(a, b)| a * b).sum();
                (dot / (norms[u] * norms[v])).clamp(-1.0, 1.0)
            };
            out.set(u, v, r);
        }
    }
    out
}

/// `tanh(log(A[u,v] * M / (f(u) f(v))))`.
pub fn tanh_pmi(cm: &CountMatrix) -> Matrix {
    let n = cm.num_classes;
    let m = cm.num_images as u128;
    let mut out = Matrix::zeros(n);
    for u in 0..n {
        for v in 0..n {
            let (fu, fv) = (cm.frequency(u) as u128, cm.frequency(v) as u128);
            if fu == 0 || fv == 0 {
                continue;
            }
            let a = cm.get(u, v) as u128;
            let value = if a == 0 {
                -1.0
            } else {
                let ratio = (a * m) as f64 / (fu * fv) as f64;
                ratio.ln().tanh()
            };
            out.set(u, v, value);
        }
    }
    out
}

/// Counts plus the three measurement matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceStats {
    pub version: String,
    pub class_names: Vec<String>,
    pub counts: CountMatrix,
    pub normalized_count: Matrix,
    pub pearson: Matrix,
    pub tanh_pmi: Matrix,
    #[serde(default)]
    pub source_checksum: Option<String>,
    /// Free-form run provenance (config hash, seed).
    #[serde(default)]
    pub provenance: Option<serde_json::Value>,
}

impl CooccurrenceStats {
    pub fn from_counts(counts: CountMatrix, class_names: Vec<String>) -> Self {
        CooccurrenceStats {
            version: STATS_VERSION.to_string(),
            normalized_count: normalized_count(&counts),
            pearson: pearson(&counts),
            tanh_pmi: tanh_pmi(&counts),
            counts,
            class_names,
            source_checksum: None,
            provenance: None,
        }
    }

    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        let counts = accumulate_cooccurrence(corpus)?;
        Ok(Self::from_counts(counts, corpus.class_names.clone()))
    }

    pub fn num_classes(&self) -> usize {
        self.counts.num_classes
    }

    pub fn expect_classes(&self, n: usize) -> Result<()> {
        if self.num_classes() != n {
            return Err(Error::Config(format!(
                "statistics cover {} classes, model expects {n}",
                self.num_classes()
            )));
        }
        Ok(())
    }

    /// `[normalized count, pearson, tanh-pmi]` for a class pair.
    pub fn triple(&self, u: usize, v: usize) -> [f64; 3] {
        [
            self.normalized_count.get(u, v),
            self.pearson.get(u, v),
            self.tanh_pmi.get(u, v),
        ]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let obj = raw
            .as_object()
            .ok_or_else(|| Error::arg("stats", "top level must be an object"))?;
        let version = obj
            .get("version")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::MissingField("version".into()))?;
        if version != STATS_VERSION {
            return Err(Error::Version {
                expected: STATS_VERSION.into(),
                found: version.into(),
            });
        }
        for field in ["class_names", "counts", "normalized_count", "pearson", "tanh_pmi"] {
            if !obj.contains_key(field) {
                return Err(Error::MissingField(field.into()));
            }
        }
        let stats: CooccurrenceStats = serde_json::from_value(raw)?;
        let n = stats.counts.num_classes;
        for (name, m) in [
            ("normalized_count", &stats.normalized_count),
            ("pearson", &stats.pearson),
            ("tanh_pmi", &stats.tanh_pmi),
        ] {
            if m.n != n || m.data.len() != n * n {
                return Err(Error::Shape {
                    op: "stats load",
                    lhs: vec![n, n],
                    rhs: vec![m.n, m.data.len()],
                });
            }
            if let Some(i) = m.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("{name}[{i}]")));
            }
        }
        if stats.counts.counts.len() != n * n || stats.class_names.len() != n {
            return Err(Error::Shape {
                op: "stats load",
                lhs: vec![n, n],
                rhs: vec![stats.counts.counts.len(), stats.class_names.len()],
            });
        }
        Ok(stats)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// One CSV per measurement, keyed by file stem.
    pub fn csv_exports(&self) -> Vec<(&'static str, String)> {
        vec![
            ("normalized_count", self.normalized_count.to_csv(&self.class_names)),
            ("pearson", self.pearson.to_csv(&self.class_names)),
            ("tanh_pmi", self.tanh_pmi.to_csv(&self.class_names)),
        ]
    }
}
