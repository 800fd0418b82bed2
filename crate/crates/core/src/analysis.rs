//! Closed-form EMA behaviour on the bilinear flow and local stability of the
//! EMA operator: Jacobians, the block operator matrix and a dense real
//! eigenvalue solver.

use ndarray::{s, Array2};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::params::ParamVector;

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "beta must lie in (0, 1), got {beta}"
        )))
    }
}

/// Normalised EMA of `sin` over `[0, T]` with per-unit-time discount `β`:
/// `C·∫₀ᵀ β^(T−t) sin t dt` where `C` makes the EMA of a constant equal to it.
///
/// Equal to `(−ln β)/(1+ln²β) · (βᵀ − cos T − ln β·sin T)/(1 − βᵀ)`; the
/// small differences are formed with `expm1` so the result stays accurate
/// when `T` or `ln β` is tiny.
pub fn ema_integral_closed_form(beta: f64, t_end: f64) -> Result<f64> {
    check_beta(beta)?;
    if !(t_end > 0.0) || !t_end.is_finite() {
        return Err(Error::Domain(format!(
            "T must be positive and finite, got {t_end}"
        )));
    }
    let l = beta.ln();
    let em1 = (l * t_end).exp_m1();
    let half = (0.5 * t_end).sin();
    // βᵀ − cos T − l·sin T
    let num = em1 + 2.0 * half * half - l * t_end.sin();
    let den = -em1;
    Ok(-l / (1.0 + l * l) * num / den)
}

/// Amplitude `|ln β|/√(1+ln²β)` of the periodic part left after transients.
pub fn ema_amplitude(beta: f64) -> Result<f64> {
    check_beta(beta)?;
    let l = beta.ln();
    Ok(l.abs() / (1.0 + l * l).sqrt())
}

/// Central-difference Jacobian, column `i = (F(x+h·eᵢ) − F(x−h·eᵢ))/(2h)`.
pub fn jacobian_fd<F>(f: F, x: &ParamVector, h: f64) -> Result<Array2<f64>>
where
    F: Fn(&ParamVector) -> Result<ParamVector>,
{
    if !(h > 0.0) {
        return Err(Error::Domain(format!("step must be > 0, got {h}")));
    }
    let n = x.len();
    let mut jac: Option<Array2<f64>> = None;
    let mut probe = x.clone();
    for i in 0..n {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let plus = f(&probe)?;
        probe.as_mut_slice()[i] = orig - h;
        let minus = f(&probe)?;
        probe.as_mut_slice()[i] = orig;
        let m = plus.len();
        if minus.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "operator output length changed: {m} vs {}",
                minus.len()
            )));
        }
        let j = jac.get_or_insert_with(|| Array2::zeros((m, n)));
        if j.nrows() != m {
            return Err(Error::DimensionMismatch(format!(
                "operator output length changed: {} vs {m}",
                j.nrows()
            )));
        }
        for (r, (p, q)) in plus.as_slice().iter().zip(minus.as_slice()).enumerate() {
            j[[r, i]] = (p - q) / (2.0 * h);
        }
    }
    Ok(jac.unwrap_or_else(|| Array2::zeros((0, 0))))
}

/// `[[β·I + J_F, −β·J_F], [I, 0]]`.
pub fn ema_operator_jacobian(jf: &Array2<f64>, beta: f64) -> Result<Array2<f64>> {
    let n = square_dim(jf)?;
    let mut out = Array2::zeros((2 * n, 2 * n));
    out.slice_mut(s![..n, ..n]).assign(jf);
    out.slice_mut(s![..n, n..]).assign(&(jf * -beta));
    for i in 0..n {
        out[[i, i]] += beta;
        out[[n + i, i]] = 1.0;
    }
    Ok(out)
}

/// One step of the EMA recursion written in averaged iterates only:
/// `(x̂_t, x̂_{t−1}) ↦ (β·x̂_t + (1−β)·F((x̂_t − β·x̂_{t−1})/(1−β)), x̂_t)`.
///
/// `stacked` holds `[x̂_t, x̂_{t−1}]`; its partition is that of the first half.
pub fn ema_operator_step<F>(f: F, stacked: &ParamVector, beta: f64) -> Result<ParamVector>
where
    F: Fn(&ParamVector) -> Result<ParamVector>,
{
    check_beta(beta)?;
    let total = stacked.len();
    if !total.is_multiple_of(2) {
        return Err(Error::DimensionMismatch(format!(
            "stacked state has odd length {total}"
        )));
    }
    let n = total / 2;
    let (cur, prev) = stacked.as_slice().split_at(n);
    let p = stacked.p().min(n);
    let raw: Vec<f64> = cur
        .iter()
        .zip(prev)
        .map(|(a, b)| (a - beta * b) / (1.0 - beta))
        .collect();
    let fx = f(&ParamVector::new(raw, p)?)?;
    if fx.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "operator maps {n} to {}",
            fx.len()
        )));
    }
    let mut out = Vec::with_capacity(total);
    out.extend(
        cur.iter()
            .zip(fx.as_slice())
            .map(|(a, y)| beta * a + (1.0 - beta) * y),
    );
    out.extend_from_slice(cur);
    ParamVector::new(out, stacked.p())
}

fn square_dim(a: &Array2<f64>) -> Result<usize> {
    let (r, c) = a.dim();
    if r != c {
        return Err(Error::DimensionMismatch(format!(
            "matrix is {r}x{c}, not square"
        )));
    }
    Ok(r)
}

/// Scales rows and columns by powers of two so their norms are comparable.
fn balance(a: &mut Array2<f64>) {
    const RADIX: f64 = 2.0;
    let sqrdx = RADIX * RADIX;
    let n = a.nrows();
    let mut done = false;
    while !done {
        done = true;
        for i in 0..n {
            let mut r = 0.0;
            let mut c = 0.0;
            for j in 0..n {
                if j != i {
                    c += a[[j, i]].abs();
                    r += a[[i, j]].abs();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let mut g = r / RADIX;
            while c < g {
                f *= RADIX;
                c *= sqrdx;
            }
            g = r * RADIX;
            while c > g {
                f /= RADIX;
                c /= sqrdx;
            }
            if (c + r) / f < 0.95 * s {
                done = false;
                let g = 1.0 / f;
                for j in 0..n {
                    a[[i, j]] *= g;
                }
                for j in 0..n {
                    a[[j, i]] *= f;
                }
            }
        }
    }
}

/// Householder reduction to upper Hessenberg form, in place.
fn hessenberg(a: &mut Array2<f64>) {
    let n = a.nrows();
    if n < 3 {
        return;
    }
    let mut v = vec![0.0; n];
    for k in 0..n - 2 {
        let norm = (k + 1..n)
            .map(|i| a[[i, k]] * a[[i, k]])
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            continue;
        }
        let x0 = a[[k + 1, k]];
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        for i in k + 1..n {
            v[i] = a[[i, k]];
        }
        v[k + 1] -= alpha;
        let vnorm2: f64 = (k + 1..n).map(|i| v[i] * v[i]).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        // A ← (I − 2vvᵀ/vᵀv) A
        for j in k..n {
            let dot: f64 = (k + 1..n).map(|i| v[i] * a[[i, j]]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k + 1..n {
                a[[i, j]] -= f * v[i];
            }
        }
        // A ← A (I − 2vvᵀ/vᵀv)
        for i in 0..n {
            let dot: f64 = (k + 1..n).map(|j| a[[i, j]] * v[j]).sum();
            let f = 2.0 * dot / vnorm2;
            for j in k + 1..n {
                a[[i, j]] -= f * v[j];
            }
        }
        a[[k + 1, k]] = alpha;
        for i in k + 2..n {
            a[[i, k]] = 0.0;
        }
    }
}

fn sign(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        a.abs()
    } else {
        -a.abs()
    }
}

/// Francis double-shift QR on an upper Hessenberg matrix.
fn hessenberg_qr(a: &mut Array2<f64>) -> Result<Vec<Complex64>> {
    let n = a.nrows();
    let mut wr = vec![Complex64::new(0.0, 0.0); n];
    let eps = f64::EPSILON;
    let mut anorm = 0.0;
    for i in 0..n {
        for j in i.saturating_sub(1)..n {
            anorm += a[[i, j]].abs();
        }
    }
    let max_sweeps = 100 * n.max(1);
    let mut sweeps = 0usize;
    let mut nn = n as isize - 1;
    let mut t = 0.0;
    while nn >= 0 {
        let mut its = 0usize;
        loop {
            let nu = nn as usize;
            let mut l = nu;
            while l > 0 {
                let mut s = a[[l - 1, l - 1]].abs() + a[[l, l]].abs();
                if s == 0.0 {
                    s = anorm;
                }
                if a[[l, l - 1]].abs() <= eps * s {
                    a[[l, l - 1]] = 0.0;
                    break;
                }
                l -= 1;
            }
            let mut x = a[[nu, nu]];
            if l == nu {
                wr[nu] = Complex64::new(x + t, 0.0);
                nn -= 1;
            } else {
                let mut y = a[[nu - 1, nu - 1]];
                let mut w = a[[nu, nu - 1]] * a[[nu - 1, nu]];
                if l + 1 == nu {
                    let p = 0.5 * (y - x);
                    let q = p * p + w;
                    let mut z = q.abs().sqrt();
                    x += t;
                    if q >= 0.0 {
                        z = p + sign(z, p);
                        wr[nu - 1] = Complex64::new(x + z, 0.0);
                        wr[nu] = wr[nu - 1];
                        if z != 0.0 {
                            wr[nu] = Complex64::new(x - w / z, 0.0);
                        }
                    } else {
                        wr[nu] = Complex64::new(x + p, -z);
                        wr[nu - 1] = wr[nu].conj();
                    }
                    nn -= 2;
                } else {
                    if sweeps >= max_sweeps {
                        return Err(Error::NoConvergence { sweeps });
                    }
                    if its > 0 && its.is_multiple_of(10) {
                        // exceptional shift
                        t += x;
                        for i in 0..=nu {
                            a[[i, i]] -= x;
                        }
                        let s = a[[nu, nu - 1]].abs() + a[[nu - 1, nu - 2]].abs();
                        x = 0.75 * s;
                        y = x;
                        w = -0.4375 * s * s;
                    }
                    its += 1;
                    sweeps += 1;
                    francis_sweep(a, l, nu, x, y, w, eps);
                }
            }
            if l as isize + 1 >= nn {
                break;
            }
        }
    }
    Ok(wr)
}

/// One implicit double-shift step on the active block `l..=nu`.
#[allow(clippy::too_many_arguments)]
fn francis_sweep(a: &mut Array2<f64>, l: usize, nu: usize, x: f64, y: f64, w: f64, eps: f64) {
    let (mut p, mut q, mut r);
    let mut m = nu - 2;
    loop {
        let z = a[[m, m]];
        let rr = x - z;
        let ss = y - z;
        p = (rr * ss - w) / a[[m + 1, m]] + a[[m, m + 1]];
        q = a[[m + 1, m + 1]] - z - rr - ss;
        r = a[[m + 2, m + 1]];
        let s = p.abs() + q.abs() + r.abs();
        p /= s;
        q /= s;
        r /= s;
        if m == l {
            break;
        }
        let u = a[[m, m - 1]].abs() * (q.abs() + r.abs());
        let v = p.abs() * (a[[m - 1, m - 1]].abs() + z.abs() + a[[m + 1, m + 1]].abs());
        if u <= eps * v {
            break;
        }
        m -= 1;
    }
    for i in m..nu - 1 {
        a[[i + 2, i]] = 0.0;
        if i != m {
            a[[i + 2, i - 1]] = 0.0;
        }
    }
    let mut xk = 0.0;
    for k in m..nu {
        if k != m {
            p = a[[k, k - 1]];
            q = a[[k + 1, k - 1]];
            r = if k + 1 != nu { a[[k + 2, k - 1]] } else { 0.0 };
            xk = p.abs() + q.abs() + r.abs();
            if xk != 0.0 {
                p /= xk;
                q /= xk;
                r /= xk;
            }
        }
        let s = sign((p * p + q * q + r * r).sqrt(), p);
        if s == 0.0 {
            continue;
        }
        if k == m {
            if l != m {
                a[[k, k - 1]] = -a[[k, k - 1]];
            }
        } else {
            a[[k, k - 1]] = -s * xk;
        }
        p += s;
        let xx = p / s;
        let yy = q / s;
        let zz = r / s;
        q /= p;
        r /= p;
        for j in k..=nu {
            let mut pp = a[[k, j]] + q * a[[k + 1, j]];
            if k + 1 != nu {
                pp += r * a[[k + 2, j]];
                a[[k + 2, j]] -= pp * zz;
            }
            a[[k + 1, j]] -= pp * yy;
            a[[k, j]] -= pp * xx;
        }
        let mmin = if nu < k + 3 { nu } else { k + 3 };
        for i in l..=mmin {
            let mut pp = xx * a[[i, k]] + yy * a[[i, k + 1]];
            if k + 1 != nu {
                pp += zz * a[[i, k + 2]];
                a[[i, k + 2]] -= pp * r;
            }
            a[[i, k + 1]] -= pp * q;
            a[[i, k]] -= pp;
        }
    }
}

/// All eigenvalues of a dense real matrix, with multiplicity.
///
/// Complex eigenvalues come out as exact conjugate pairs.
pub fn eigenvalues(a: &Array2<f64>) -> Result<Vec<Complex64>> {
    let n = square_dim(a)?;
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix has non-finite entries".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut h = a.clone();
    balance(&mut h);
    hessenberg(&mut h);
    hessenberg_qr(&mut h)
}

/// LU with partial pivoting on a complex matrix; returns the factors and the
/// permutation parity, or `None` for an exactly singular pivot.
fn complex_lu(m: &mut Array2<Complex64>) -> (Vec<usize>, bool, bool) {
    let n = m.nrows();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut odd = false;
    let mut singular = false;
    for k in 0..n {
        let mut piv = k;
        let mut best = m[[k, k]].norm();
        for i in k + 1..n {
            let v = m[[i, k]].norm();
            if v > best {
                best = v;
                piv = i;
            }
        }
        if best == 0.0 {
            singular = true;
            continue;
        }
        if piv != k {
            for j in 0..n {
                let tmp = m[[k, j]];
                m[[k, j]] = m[[piv, j]];
                m[[piv, j]] = tmp;
            }
            perm.swap(k, piv);
            odd = !odd;
        }
        let d = m[[k, k]];
        for i in k + 1..n {
            let f = m[[i, k]] / d;
            m[[i, k]] = f;
            for j in k + 1..n {
                let u = m[[k, j]];
                m[[i, j]] -= f * u;
            }
        }
    }
    (perm, odd, singular)
}

pub fn complex_det(m: &Array2<Complex64>) -> Result<Complex64> {
    let (r, c) = m.dim();
    if r != c {
        return Err(Error::DimensionMismatch(format!(
            "matrix is {r}x{c}, not square"
        )));
    }
    let mut lu = m.clone();
    let (_, odd, singular) = complex_lu(&mut lu);
    if singular {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let mut det = Complex64::new(if odd { -1.0 } else { 1.0 }, 0.0);
    for i in 0..r {
        det *= lu[[i, i]];
    }
    Ok(det)
}

/// `det(γ·I − A)`.
pub fn char_poly_at(a: &Array2<f64>, gamma: Complex64) -> Result<Complex64> {
    let n = square_dim(a)?;
    let m = Array2::from_shape_fn((n, n), |(i, j)| {
        let d = if i == j {
            gamma
        } else {
            Complex64::new(0.0, 0.0)
        };
        d - a[[i, j]]
    });
    complex_det(&m)
}

/// Residual `‖A·v − γ·v‖ / ‖v‖` of the vector found by inverse iteration
/// near `γ`.
pub fn eigen_residual(a: &Array2<f64>, gamma: Complex64) -> Result<f64> {
    let n = square_dim(a)?;
    let scale = a
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    // nudge off the eigenvalue so the shifted matrix is numerically invertible
    let shift = gamma + Complex64::new(1e-10 * scale, 1e-10 * scale);
    let mut lu = Array2::from_shape_fn((n, n), |(i, j)| {
        let d = if i == j {
            shift
        } else {
            Complex64::new(0.0, 0.0)
        };
        Complex64::new(a[[i, j]], 0.0) - d
    });
    let (perm, _, singular) = complex_lu(&mut lu);
    let mut v: Vec<Complex64> = (0..n)
        .map(|i| Complex64::new(1.0 + 0.1 * i as f64, 0.05 * i as f64))
        .collect();
    if !singular {
        for _ in 0..3 {
            let b: Vec<Complex64> = perm.iter().map(|&p| v[p]).collect();
            let mut y = b;
            for i in 0..n {
                for k in 0..i {
                    let t = lu[[i, k]] * y[k];
                    y[i] -= t;
                }
            }
            for i in (0..n).rev() {
                for k in i + 1..n {
                    let t = lu[[i, k]] * y[k];
                    y[i] -= t;
                }
                y[i] /= lu[[i, i]];
            }
            let norm = y.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            v = y.into_iter().map(|c| c / norm).collect();
        }
    }
    let norm_v = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let mut res = 0.0;
    for i in 0..n {
        let mut acc = -gamma * v[i];
        for j in 0..n {
            acc += v[j] * a[[i, j]];
        }
        res += acc.norm_sqr();
    }
    Ok(res.sqrt() / norm_v)
}

/// Greedy nearest matching: each expected value takes the closest unused
/// computed one, ties going to the smaller index. Returns the worst distance.
pub fn match_multisets(expected: &[Complex64], computed: &[Complex64]) -> Result<f64> {
    if expected.len() != computed.len() {
        return Err(Error::SizeMismatch {
            left: expected.len(),
            right: computed.len(),
        });
    }
    let mut used = vec![false; computed.len()];
    let mut worst: f64 = 0.0;
    for e in expected {
        let mut best: Option<(usize, f64)> = None;
        for (j, c) in computed.iter().enumerate() {
            if used[j] {
                continue;
            }
            let d = (e - c).norm();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        let (j, d) = best.expect("sizes match");
        used[j] = true;
        worst = worst.max(d);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumMatchReport {
    /// Eigenvalues of the EMA operator Jacobian.
    pub operator_eigenvalues: Vec<Complex64>,
    /// `{β}ⁿ ∪ eig(J_F)`.
    pub predicted: Vec<Complex64>,
    pub max_distance: f64,
    pub passed: bool,
}

/// Checks that the EMA operator Jacobian has spectrum `{β}ⁿ ∪ eig(J_F)`.
pub fn verify_ema_spectrum(jf: &Array2<f64>, beta: f64, tol: f64) -> Result<SpectrumMatchReport> {
    check_beta(beta)?;
    let n = square_dim(jf)?;
    let op = ema_operator_jacobian(jf, beta)?;
    let operator_eigenvalues = eigenvalues(&op)?;
    let mut predicted = vec![Complex64::new(beta, 0.0); n];
    predicted.extend(eigenvalues(jf)?);
    let max_distance = match_multisets(&predicted, &operator_eigenvalues)?;
    Ok(SpectrumMatchReport {
        operator_eigenvalues,
        predicted,
        max_distance,
        passed: max_distance <= tol,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    pub eigenvalues: Vec<Complex64>,
    pub spectral_radius: f64,
    /// `spectral_radius < 1`.
    pub stable: bool,
    pub matrix_dim: usize,
}

pub fn stability_verdict(j: &Array2<f64>) -> Result<SpectrumReport> {
    let eigenvalues = eigenvalues(j)?;
    let spectral_radius = eigenvalues.iter().map(|z| z.norm()).fold(0.0, f64::max);
    Ok(SpectrumReport {
        spectral_radius,
        stable: spectral_radius < 1.0,
        matrix_dim: j.nrows(),
        eigenvalues,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmaStability {
    pub beta: f64,
    pub base: SpectrumReport,
    pub operator: SpectrumReport,
    /// `β > ρ(J_F)`: the averaged iterates converge at rate `β`, slower than
    /// the underlying method.
    pub beta_dominates: bool,
}

pub fn ema_stability(jf: &Array2<f64>, beta: f64) -> Result<EmaStability> {
    check_beta(beta)?;
    let base = stability_verdict(jf)?;
    let operator = stability_verdict(&ema_operator_jacobian(jf, beta)?)?;
    Ok(EmaStability {
        beta,
        beta_dominates: beta > base.spectral_radius,
        base,
        operator,
    })
}
