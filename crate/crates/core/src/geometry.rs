//! Geometric medians (Weiszfeld iteration) and per-category center banks.

use std::collections::BTreeMap;

use crate::error::{invalid, Result};
use crate::numerics::euclidean_distance;

/// Lower clamp on point-to-iterate distances inside the Weiszfeld weights.
pub const WEISZFELD_MIN_DISTANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeiszfeldOptions {
    pub max_iter: usize,
    pub eps_conv: f64,
}

impl Default for WeiszfeldOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            eps_conv: 1e-9,
        }
    }
}

/// Sum of Euclidean distances from `y` to every point.
pub fn weiszfeld_objective<P: AsRef<[f64]>>(points: &[P], y: &[f64]) -> f64 {
    points
        .iter()
        .fold(0.0, |acc, p| acc + euclidean_distance(p.as_ref(), y))
}

fn check_points<P: AsRef<[f64]>>(points: &[P]) -> Result<usize> {
    let first = points
        .first()
        .ok_or_else(|| invalid("geometric median of an empty point set"))?;
    let dim = first.as_ref().len();
    if let Some(i) = points.iter().position(|p| p.as_ref().len() != dim) {
        return Err(invalid(format!(
            "point {i} has dimension {}, expected {dim}",
            points[i].as_ref().len()
        )));
    }
    Ok(dim)
}

fn mean<P: AsRef<[f64]>>(points: &[P], dim: usize) -> Vec<f64> {
    let mut y = vec![0.0; dim];
    for p in points {
        for (acc, v) in y.iter_mut().zip(p.as_ref()) {
            *acc += v;
        }
    }
    let n = points.len() as f64;
    y.iter_mut().for_each(|v| *v /= n);
    y
}

fn weiszfeld_update<P: AsRef<[f64]>>(points: &[P], y: &[f64]) -> Vec<f64> {
    let mut num = vec![0.0; y.len()];
    let mut den = 0.0;
    for p in points {
        let p = p.as_ref();
        let w = 1.0 / euclidean_distance(p, y).max(WEISZFELD_MIN_DISTANCE);
        for (acc, v) in num.iter_mut().zip(p) {
            *acc += w * v;
        }
        den += w;
    }
    num.iter_mut().for_each(|v| *v /= den);
    num
}

/// Every iterate of the Weiszfeld scheme, starting at the arithmetic mean.
pub fn weiszfeld_iterates<P: AsRef<[f64]>>(
    points: &[P],
    opts: WeiszfeldOptions,
) -> Result<Vec<Vec<f64>>> {
    let dim = check_points(points)?;
    let mut path = vec![mean(points, dim)];
    for _ in 0..opts.max_iter {
        let current = path.last().expect("path starts non-empty");
        let next = weiszfeld_update(points, current);
        let step = euclidean_distance(&next, current);
        path.push(next);
        if step < opts.eps_conv {
            break;
        }
    }
    Ok(path)
}

/// Point minimizing the summed Euclidean distance to `points`.
pub fn weiszfeld_median<P: AsRef<[f64]>>(points: &[P], opts: WeiszfeldOptions) -> Result<Vec<f64>> {
    Ok(weiszfeld_iterates(points, opts)?
        .pop()
        .expect("at least the initial iterate"))
}

/// One robust center per category, keyed by category index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CenterBank {
    centers: BTreeMap<usize, Vec<f64>>,
    support: BTreeMap<usize, usize>,
}

impl CenterBank {
    pub fn get(&self, category: usize) -> Option<&[f64]> {
        self.centers.get(&category).map(Vec::as_slice)
    }

    pub fn support_count(&self, category: usize) -> usize {
        self.support.get(&category).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn categories(&self) -> impl Iterator<Item = usize> + '_ {
        self.centers.keys().copied()
    }

    pub fn insert(&mut self, category: usize, center: Vec<f64>, support: usize) {
        assert!(
            support >= 1,
            "a stored center needs at least one supporting sample"
        );
        self.centers.insert(category, center);
        self.support.insert(category, support);
    }
}

/// Weiszfeld center of each category's features; empty categories are omitted.
pub fn class_centers<P: AsRef<[f64]>>(
    features: &[P],
    labels: &[usize],
    num_categories: usize,
    opts: WeiszfeldOptions,
) -> Result<CenterBank> {
    if features.len() != labels.len() {
        return Err(invalid(format!(
            "class_centers: {} features but {} labels",
            features.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_categories) {
        return Err(invalid(format!(
            "label {bad} out of range for {num_categories} categories"
        )));
    }
    let mut groups: Vec<Vec<&[f64]>> = vec![Vec::new(); num_categories];
    for (f, &l) in features.iter().zip(labels) {
        groups[l].push(f.as_ref());
    }
    let mut bank = CenterBank::default();
    for (category, group) in groups.iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        bank.insert(category, weiszfeld_median(group, opts)?, group.len());
    }
    Ok(bank)
}
