//! Labeled datasets, the label access guard, and the plain-text dataset format.
//!
//! The format is one header line `d_in,C,count,domain` followed by one line
//! per sample: `d_in` features then the integer label, comma separated.
//! Reals are written with 17 significant digits so they round-trip exactly.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Decimal text with 17 significant digits; parses back to the same bits.
pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl FromStr for Domain {
    type Err = crate::ExclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(invalid(format!("unknown domain tag `{other}`"))),
        }
    }
}

/// Counts label reads made while the guard is armed.
#[derive(Debug, Default)]
struct LabelGuard {
    armed: AtomicUsize,
    trips: AtomicUsize,
}

/// Disarms the label guard when dropped.
#[must_use]
pub struct ArmedLabelGuard<'a> {
    guard: &'a LabelGuard,
}

impl Drop for ArmedLabelGuard<'_> {
    fn drop(&mut self) {
        self.guard.armed.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Feature-only view handed to the adaptation path.
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledView<'a> {
    features: &'a [Vec<f64>],
    categories: usize,
}

impl<'a> UnlabeledView<'a> {
    pub fn features(&self) -> &'a [Vec<f64>] {
        self.features
    }

    pub fn get(&self, i: usize) -> &'a [f64] {
        &self.features[i]
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn categories(&self) -> usize {
        self.categories
    }
}

#[derive(Debug)]
pub struct Dataset {
    d_in: usize,
    categories: usize,
    domain: Domain,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    guard: LabelGuard,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Self {
            d_in: self.d_in,
            categories: self.categories,
            domain: self.domain,
            features: self.features.clone(),
            labels: self.labels.clone(),
            guard: LabelGuard::default(),
        }
    }
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.d_in == other.d_in
            && self.categories == other.categories
            && self.domain == other.domain
            && self.features == other.features
            && self.labels == other.labels
    }
}

impl Dataset {
    pub fn new(
        d_in: usize,
        categories: usize,
        domain: Domain,
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(invalid(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(i) = features.iter().position(|f| f.len() != d_in) {
            return Err(invalid(format!("sample {i} does not have {d_in} features")));
        }
        if let Some(i) = features
            .iter()
            .position(|f| f.iter().any(|v| !v.is_finite()))
        {
            return Err(invalid(format!("sample {i} has a non-finite feature")));
        }
        if let Some(i) = labels.iter().position(|&l| l >= categories) {
            return Err(invalid(format!(
                "sample {i} has label {} outside 0..{categories}",
                labels[i]
            )));
        }
        Ok(Self {
            d_in,
            categories,
            domain,
            features,
            labels,
            guard: LabelGuard::default(),
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn unlabeled(&self) -> UnlabeledView<'_> {
        UnlabeledView {
            features: &self.features,
            categories: self.categories,
        }
    }

    /// Ground-truth labels. Reads while the guard is armed are counted as trips.
    pub fn labels(&self) -> &[usize] {
        if self.guard.armed.load(Ordering::SeqCst) > 0 {
            self.guard.trips.fetch_add(1, Ordering::SeqCst);
        }
        &self.labels
    }

    /// Arms the label guard until the returned handle is dropped.
    pub fn arm_label_guard(&self) -> ArmedLabelGuard<'_> {
        self.guard.armed.fetch_add(1, Ordering::SeqCst);
        ArmedLabelGuard { guard: &self.guard }
    }

    pub fn label_guard_trips(&self) -> usize {
        self.guard.trips.load(Ordering::SeqCst)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{},{},{},{}\n",
            self.d_in,
            self.categories,
            self.len(),
            self.domain
        );
        for (f, l) in self.features.iter().zip(&self.labels) {
            for v in f {
                out.push_str(&format_real(*v));
                out.push(',');
            }
            out.push_str(&l.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| invalid("empty dataset file"))?;
        let fields: Vec<&str> = header.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(invalid(format!(
                "dataset header must be `d_in,C,count,domain`, got `{header}`"
            )));
        }
        let parse_count = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| invalid(format!("dataset header: bad {what} `{s}`")))
        };
        let d_in = parse_count(fields[0], "d_in")?;
        let categories = parse_count(fields[1], "category count")?;
        let count = parse_count(fields[2], "sample count")?;
        let domain: Domain = fields[3].parse()?;

        let mut features = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != d_in + 1 {
                return Err(invalid(format!(
                    "line {}: expected {} fields, got {}",
                    lineno + 1,
                    d_in + 1,
                    parts.len()
                )));
            }
            let row = parts[..d_in]
                .iter()
                .map(|p| {
                    p.trim()
                        .parse::<f64>()
                        .map_err(|_| invalid(format!("line {}: bad real `{p}`", lineno + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            let label = parts[d_in].trim().parse::<usize>().map_err(|_| {
                invalid(format!("line {}: bad label `{}`", lineno + 1, parts[d_in]))
            })?;
            features.push(row);
            labels.push(label);
        }
        if features.len() != count {
            return Err(invalid(format!(
                "dataset header declares {count} samples, found {}",
                features.len()
            )));
        }
        Self::new(d_in, categories, domain, features, labels)
    }
}
