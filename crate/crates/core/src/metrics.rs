//! Sample-quality metrics: exact Wasserstein-1 between equal-size point
//! clouds and mode coverage on the Gaussian grid.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::games::{MixtureSpec, NUM_MODES};

fn check_cloud(name: &str, a: &Array2<f64>) -> Result<()> {
    if a.nrows() == 0 {
        return Err(Error::Shape(format!("{name} is empty")));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{name} has non-finite coordinates"
        )));
    }
    Ok(())
}

/// Dense Euclidean cost matrix, row `i` for `a[i]`.
pub fn cost_matrix(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, m) = (a.nrows(), b.nrows());
    let mut c = Array2::zeros((n, m));
    for i in 0..n {
        let ai = a.row(i);
        for j in 0..m {
            let d2: f64 = ai
                .iter()
                .zip(b.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            c[[i, j]] = d2.sqrt();
        }
    }
    c
}

/// Minimum-cost perfect matching on a square cost matrix.
///
/// Returns `row_to_col`. Jonker–Volgenant: column reduction, reduction
/// transfer, augmenting row reduction, then shortest augmenting paths.
pub fn linear_assignment(cost: &Array2<f64>) -> Result<Vec<usize>> {
    let (n, m) = cost.dim();
    if n != m {
        return Err(Error::SizeMismatch { left: n, right: m });
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    const NONE: usize = usize::MAX;
    let owned;
    let flat: &[f64] = match cost.as_slice() {
        Some(s) => s,
        None => {
            owned = cost.iter().copied().collect::<Vec<f64>>();
            &owned
        }
    };
    let c = |i: usize, j: usize| flat[i * n + j];
    let mut rowsol = vec![NONE; n];
    let mut colsol = vec![NONE; n];
    let mut v = vec![0.0; n];
    let mut matches = vec![0usize; n];

    // column reduction
    for j in (0..n).rev() {
        let mut imin = 0;
        let mut min = c(0, j);
        for i in 1..n {
            if c(i, j) < min {
                min = c(i, j);
                imin = i;
            }
        }
        v[j] = min;
        matches[imin] += 1;
        if matches[imin] == 1 {
            rowsol[imin] = j;
            colsol[j] = imin;
        } else if v[j] < v[rowsol[imin]] {
            let j1 = rowsol[imin];
            rowsol[imin] = j;
            colsol[j] = imin;
            colsol[j1] = NONE;
        } else {
            colsol[j] = NONE;
        }
    }

    // reduction transfer
    let mut free = Vec::with_capacity(n);
    for i in 0..n {
        if matches[i] == 0 {
            free.push(i);
        } else if matches[i] == 1 {
            let j1 = rowsol[i];
            let mut min = f64::INFINITY;
            for j in 0..n {
                if j != j1 && c(i, j) - v[j] < min {
                    min = c(i, j) - v[j];
                }
            }
            if min.is_finite() {
                v[j1] -= min;
            }
        }
    }
    // rows displaced by column reduction hold no column
    for i in 0..n {
        if matches[i] > 1 && colsol[rowsol[i]] != i {
            rowsol[i] = NONE;
        }
    }

    // augmenting row reduction; on geometric costs rows bounce between
    // nearby columns for a long time, so re-queueing is capped at n and the
    // rest is left to the augmenting-path phase
    let mut budget = n;
    for _ in 0..2 {
        let mut queue: std::collections::VecDeque<usize> = free.drain(..).collect();
        while let Some(i) = queue.pop_front() {
            let mut umin = c(i, 0) - v[0];
            let mut j1 = 0;
            let mut usubmin = f64::INFINITY;
            let mut j2 = NONE;
            for j in 1..n {
                let h = c(i, j) - v[j];
                if h < usubmin {
                    if h >= umin {
                        usubmin = h;
                        j2 = j;
                    } else {
                        usubmin = umin;
                        umin = h;
                        j2 = j1;
                        j1 = j;
                    }
                }
            }
            let mut i0 = colsol[j1];
            let strict = umin < usubmin;
            if strict {
                v[j1] -= usubmin - umin;
            } else if i0 != NONE && j2 != NONE {
                j1 = j2;
                i0 = colsol[j2];
            }
            rowsol[i] = j1;
            colsol[j1] = i;
            if i0 != NONE {
                rowsol[i0] = NONE;
                if strict && budget > 0 {
                    budget -= 1;
                    queue.push_front(i0);
                } else {
                    free.push(i0);
                }
            }
        }
    }

    // shortest augmenting paths for the remaining free rows
    let mut d = vec![0.0; n];
    let mut pred = vec![0usize; n];
    let mut collist: Vec<usize> = (0..n).collect();
    for &freerow in &free {
        for j in 0..n {
            d[j] = c(freerow, j) - v[j];
            pred[j] = freerow;
            collist[j] = j;
        }
        let mut low = 0;
        let mut up = 0;
        let mut last = 0;
        let mut min = 0.0;
        let endofpath;
        'search: loop {
            if up == low {
                last = low;
                min = d[collist[up]];
                up += 1;
                // the scan range is fixed at entry while `up` moves inside
                #[allow(clippy::mut_range_bound)]
                for k in up..n {
                    let j = collist[k];
                    let h = d[j];
                    if h <= min {
                        if h < min {
                            up = low;
                            min = h;
                        }
                        collist[k] = collist[up];
                        collist[up] = j;
                        up += 1;
                    }
                }
                for &j in &collist[low..up] {
                    if colsol[j] == NONE {
                        endofpath = j;
                        break 'search;
                    }
                }
            }
            let j1 = collist[low];
            low += 1;
            let i = colsol[j1];
            let h = c(i, j1) - v[j1] - min;
            let mut k = up;
            while k < n {
                let j = collist[k];
                let v2 = c(i, j) - v[j] - h;
                if v2 < d[j] {
                    pred[j] = i;
                    if v2 == min {
                        if colsol[j] == NONE {
                            endofpath = j;
                            break 'search;
                        }
                        collist[k] = collist[up];
                        collist[up] = j;
                        up += 1;
                    }
                    d[j] = v2;
                }
                k += 1;
            }
        }
        // columns scanned before the last frontier reset keep feasible duals
        for &j1 in &collist[..last] {
            v[j1] += d[j1] - min;
        }
        let mut end = endofpath;
        loop {
            let i = pred[end];
            colsol[end] = i;
            std::mem::swap(&mut rowsol[i], &mut end);
            if i == freerow {
                break;
            }
        }
    }
    debug_assert!(rowsol.iter().all(|&j| j != NONE));
    Ok(rowsol)
}

/// Exact W1 between the uniform empirical measures on `a` and `b`:
/// `(1/k)·min_σ Σᵢ ‖aᵢ − b_σ(i)‖`.
pub fn wasserstein1(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(Error::SizeMismatch {
            left: a.nrows(),
            right: b.nrows(),
        });
    }
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "point dimension {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    check_cloud("first sample", a)?;
    check_cloud("second sample", b)?;
    let cost = cost_matrix(a, b);
    let sol = linear_assignment(&cost)?;
    let total: f64 = sol.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    Ok(total / a.nrows() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModeReport {
    pub counts: [usize; NUM_MODES],
    pub unassigned: usize,
    /// Modes with at least one sample.
    pub coverage: usize,
}

impl ModeReport {
    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.unassigned
    }
}

/// Assigns each sample to its nearest mean when within `radius_sigma·σ`.
pub fn mode_stats(
    samples: &Array2<f64>,
    spec: &MixtureSpec,
    radius_sigma: f64,
) -> Result<ModeReport> {
    if !(radius_sigma > 0.0) {
        return Err(Error::Domain(format!(
            "radius must be > 0, got {radius_sigma}"
        )));
    }
    if samples.ncols() != 2 {
        return Err(Error::Shape(format!(
            "expected k x 2 samples, got {:?}",
            samples.dim()
        )));
    }
    spec.validate()?;
    let means = spec.means();
    let radius = radius_sigma * spec.sigma;
    let mut counts = [0usize; NUM_MODES];
    let mut unassigned = 0;
    for row in samples.rows() {
        let (x, y) = (row[0], row[1]);
        let mut best = (usize::MAX, f64::INFINITY);
        for (m, mean) in means.iter().enumerate() {
            let d = ((x - mean[0]).powi(2) + (y - mean[1]).powi(2)).sqrt();
            if d < best.1 {
                best = (m, d);
            }
        }
        if best.1 <= radius {
            counts[best.0] += 1;
        } else {
            unassigned += 1;
        }
    }
    let coverage = counts.iter().filter(|c| **c > 0).count();
    Ok(ModeReport {
        counts,
        unassigned,
        coverage,
    })
}
