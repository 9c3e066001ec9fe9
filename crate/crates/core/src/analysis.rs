//! Image and trace analysis: radial profiles, torus edges, power-law,
//! bi-exponential and linear fits, and masked Pearson correlation.

use serde::{Deserialize, Serialize};

use crate::error::AnalysisError;
use crate::protocol::ReadoutImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialProfile {
    pub center: [f64; 2],
    /// Bin centres, µm.
    pub radii: Vec<f64>,
    /// Mean value per annulus, kcps.
    pub values: Vec<f64>,
    pub pixels: Vec<usize>,
}

impl RadialProfile {
    pub fn peak(&self) -> (f64, f64) {
        self.radii.iter().zip(&self.values).fold(
            (0.0, f64::NEG_INFINITY),
            |best, (&r, &v)| if v > best.1 { (r, v) } else { best },
        )
    }
}

/// Azimuthal average around `center` in annuli of `bin_width`, out to the
/// largest circle that fits inside the image.
pub fn radial_profile(image: &ReadoutImage, center: [f64; 2], bin_width: f64) -> Result<RadialProfile, AnalysisError> {
    if !(bin_width >= image.pitch) {
        return Err(AnalysisError::EmptyAnnulus {
            index: 0,
            radius: 0.5 * bin_width,
        });
    }
    let (x0, y0) = image.pixel_center(0, 0);
    let (x1, y1) = image.pixel_center(image.nx - 1, image.ny - 1);
    let half = 0.5 * image.pitch;
    if center[0] < x0 - half || center[0] > x1 + half || center[1] < y0 - half || center[1] > y1 + half {
        return Err(AnalysisError::DegenerateInput(
            "profile centre lies outside the image".into(),
        ));
    }
    let r_max = (center[0] - x0)
        .min(x1 - center[0])
        .min(center[1] - y0)
        .min(y1 - center[1])
        .max(0.0);
    let nbins = ((r_max / bin_width).floor() as usize).max(1);
    let mut sums = vec![0.0; nbins];
    let mut counts = vec![0usize; nbins];
    for iy in 0..image.ny {
        for ix in 0..image.nx {
            let (x, y) = image.pixel_center(ix, iy);
            let r = (x - center[0]).hypot(y - center[1]);
            let k = (r / bin_width) as usize;
            if k < nbins {
                sums[k] += image.at(ix, iy);
                counts[k] += 1;
            }
        }
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(AnalysisError::EmptyAnnulus {
            index: k,
            radius: (k as f64 + 0.5) * bin_width,
        });
    }
    Ok(RadialProfile {
        center,
        radii: (0..nbins).map(|k| (k as f64 + 0.5) * bin_width).collect(),
        values: sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect(),
        pixels: counts,
    })
}

/// Edge detection threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    /// kcps.
    Absolute(f64),
    /// Fraction of the profile maximum.
    Fraction(f64),
}

impl Threshold {
    pub fn level(&self, profile: &RadialProfile) -> f64 {
        match *self {
            Threshold::Absolute(v) => v,
            Threshold::Fraction(f) => f * profile.peak().1,
        }
    }
}

/// Outermost radius at which the profile falls through the threshold,
/// linearly interpolated between bins.
pub fn torus_edge_radius(profile: &RadialProfile, threshold: Threshold) -> Result<f64, AnalysisError> {
    if profile.values.is_empty() {
        return Err(AnalysisError::DegenerateInput("empty profile".into()));
    }
    let level = threshold.level(profile);
    let v = &profile.values;
    let last_above = v.iter().rposition(|&x| x > level).ok_or(AnalysisError::NoCrossing)?;
    if last_above + 1 == v.len() {
        return Err(AnalysisError::EdgeOutsideProfile);
    }
    let (r0, r1) = (profile.radii[last_above], profile.radii[last_above + 1]);
    let (v0, v1) = (v[last_above], v[last_above + 1]);
    Ok(r0 + (v0 - level) / (v0 - v1) * (r1 - r0))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub slope_stderr: f64,
    pub intercept_stderr: f64,
}

fn ols(x: &[f64], y: &[f64]) -> Result<LinearFit, AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::DegenerateInput("x and y lengths differ".into()));
    }
    if x.len() < 3 {
        return Err(AnalysisError::DegenerateInput(format!(
            "{} points, need at least 3",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(AnalysisError::DegenerateInput("non-finite value".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(AnalysisError::DegenerateInput("all x values are equal".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let sst: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let r_squared = if sst > 0.0 {
        (1.0 - ssr / sst).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let n = x.len() as f64;
    let s2 = ssr / (n - 2.0);
    let slope_stderr = (s2 / sxx).sqrt();
    let intercept_stderr = (s2 * (1.0 / n + mx * mx / sxx)).sqrt();
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
        slope_stderr,
        intercept_stderr,
    })
}

/// Ordinary least squares of rate against power.
pub fn fit_rate_vs_power(powers: &[f64], rates: &[f64]) -> Result<LinearFit, AnalysisError> {
    ols(powers, rates)
}

/// Front growth law `radius = D^{1/2} · t^{1/n}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub d: f64,
    pub n: f64,
    pub n_stderr: f64,
    pub residual_norm: f64,
    pub fixed_n: bool,
}

/// Least squares of ln(radius) against ln(t). With `fixed_n` only the
/// prefactor is fitted.
pub fn fit_power_law(t: &[f64], radius: &[f64], fixed_n: Option<f64>) -> Result<PowerLawFit, AnalysisError> {
    if t.len() != radius.len() || t.len() < 3 {
        return Err(AnalysisError::DegenerateInput(format!(
            "need at least 3 paired points, got {} and {}",
            t.len(),
            radius.len()
        )));
    }
    if t.iter().chain(radius).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(AnalysisError::DegenerateInput(
            "power-law fit needs positive values".into(),
        ));
    }
    let x: Vec<f64> = t.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = radius.iter().map(|v| v.ln()).collect();
    match fixed_n {
        Some(n) => {
            if !(n > 0.0) {
                return Err(AnalysisError::DegenerateInput("fixed exponent must be positive".into()));
            }
            let a = mean(&y.iter().zip(&x).map(|(b, a)| b - a / n).collect::<Vec<_>>());
            let ssr: f64 = x.iter().zip(&y).map(|(a0, b)| (b - a - a0 / n).powi(2)).sum();
            Ok(PowerLawFit {
                d: (2.0 * a).exp(),
                n,
                n_stderr: 0.0,
                residual_norm: ssr.sqrt(),
                fixed_n: true,
            })
        }
        None => {
            let fit = ols(&x, &y)?;
            if !(fit.slope > 0.0) {
                return Err(AnalysisError::DegenerateInput("radius does not grow with time".into()));
            }
            let ssr: f64 = x
                .iter()
                .zip(&y)
                .map(|(a, b)| (b - fit.intercept - fit.slope * a).powi(2))
                .sum();
            Ok(PowerLawFit {
                d: (2.0 * fit.intercept).exp(),
                n: 1.0 / fit.slope,
                n_stderr: fit.slope_stderr / (fit.slope * fit.slope),
                residual_norm: ssr.sqrt(),
                fixed_n: false,
            })
        }
    }
}

/// `y = a1·exp(−k1·t) + a2·exp(−k2·t) + offset`, k1 ≥ k2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiExpFit {
    pub a1: f64,
    pub k1: f64,
    pub a2: f64,
    pub k2: f64,
    pub offset: f64,
    pub residual_norm: f64,
    pub iterations: usize,
    /// Set when the weaker component is below 1e-3 of the stronger one; the
    /// fit is then reported as a single exponential in (a1, k1).
    pub single_exponential: bool,
}

impl BiExpFit {
    pub fn eval(&self, t: f64) -> f64 {
        self.a1 * (-self.k1 * t).exp() + self.a2 * (-self.k2 * t).exp() + self.offset
    }
}

const FALLBACK_RATIO: f64 = 1e-3;
const MAX_ITERATIONS: usize = 500;
const REL_TOL: f64 = 1e-9;

/// Solves the small dense system `m·x = b` by Gaussian elimination with
/// partial pivoting.
fn solve_dense(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs()))?;
        if m[p][c].abs() < 1e-300 {
            return None;
        }
        m.swap(c, p);
        b.swap(c, p);
        let pivot = m[c].clone();
        for r in c + 1..n {
            let f = m[r][c] / pivot[c];
            for (v, p) in m[r][c..].iter_mut().zip(&pivot[c..]) {
                *v -= f * p;
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| m[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / m[r][r];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Linear least squares on the given basis columns.
fn lsq(cols: &[Vec<f64>], y: &[f64]) -> Option<(Vec<f64>, f64)> {
    let m: Vec<Vec<f64>> = cols
        .iter()
        .map(|a| cols.iter().map(|b| a.iter().zip(b).map(|(p, q)| p * q).sum()).collect())
        .collect();
    let rhs: Vec<f64> = cols.iter().map(|a| a.iter().zip(y).map(|(p, q)| p * q).sum()).collect();
    let coef = solve_dense(m, rhs)?;
    let ssr = y
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let f: f64 = cols.iter().zip(&coef).map(|(c, a)| c[i] * a).sum();
            (v - f).powi(2)
        })
        .sum();
    Some((coef, ssr))
}

/// Amplitudes (non-negative) and offset for fixed decay rates, with the SSR.
fn project(t: &[f64], y: &[f64], rates: &[f64]) -> (Vec<f64>, f64, f64) {
    let ones = vec![1.0; t.len()];
    let basis: Vec<Vec<f64>> = rates
        .iter()
        .map(|k| t.iter().map(|x| (-k * x).exp()).collect())
        .collect();
    let mut best: Option<(Vec<f64>, f64, f64)> = None;
    // enumerate active sets so amplitudes stay non-negative
    for mask in (0..1u32 << rates.len()).rev() {
        let active: Vec<usize> = (0..rates.len()).filter(|i| mask & (1 << i) != 0).collect();
        let mut cols: Vec<Vec<f64>> = active.iter().map(|&i| basis[i].clone()).collect();
        cols.push(ones.clone());
        let Some((coef, ssr)) = lsq(&cols, y) else { continue };
        if coef[..active.len()].iter().any(|&a| a < 0.0) {
            continue;
        }
        if best.as_ref().is_none_or(|b| ssr < b.2) {
            let mut amps = vec![0.0; rates.len()];
            for (j, &i) in active.iter().enumerate() {
                amps[i] = coef[j];
            }
            best = Some((amps, coef[active.len()], ssr));
        }
    }
    best.unwrap_or_else(|| {
        (
            vec![0.0; rates.len()],
            mean(y),
            y.iter().map(|v| (v - mean(y)).powi(2)).sum(),
        )
    })
}

/// Levenberg–Marquardt over log-rates with the amplitudes projected out.
fn refine(t: &[f64], y: &[f64], start: &[f64]) -> (Vec<f64>, f64, usize, bool) {
    let p = start.len();
    let mut u: Vec<f64> = start.iter().map(|k| k.ln()).collect();
    let ssr_of = |u: &[f64]| project(t, y, &u.iter().map(|v| v.exp()).collect::<Vec<_>>()).2;
    let resid = |u: &[f64]| {
        let k: Vec<f64> = u.iter().map(|v| v.exp()).collect();
        let (a, c, _) = project(t, y, &k);
        t.iter()
            .zip(y)
            .map(|(x, v)| v - c - a.iter().zip(&k).map(|(ai, ki)| ai * (-ki * x).exp()).sum::<f64>())
            .collect::<Vec<f64>>()
    };
    let mut ssr = ssr_of(&u);
    let mut lambda = 1e-3;
    let scale: f64 = y.iter().map(|v| v * v).sum::<f64>().max(1e-300);
    for it in 1..=MAX_ITERATIONS {
        if ssr <= 1e-28 * scale {
            return (u.iter().map(|v| v.exp()).collect(), ssr, it, true);
        }
        let r0 = resid(&u);
        let h = 1e-6;
        let jac: Vec<Vec<f64>> = (0..p)
            .map(|j| {
                let mut up = u.clone();
                let mut dn = u.clone();
                up[j] += h;
                dn[j] -= h;
                let (rp, rm) = (resid(&up), resid(&dn));
                rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
            })
            .collect();
        let jtj: Vec<Vec<f64>> = (0..p)
            .map(|a| {
                (0..p)
                    .map(|b| jac[a].iter().zip(&jac[b]).map(|(x, z)| x * z).sum())
                    .collect()
            })
            .collect();
        let jtr: Vec<f64> = (0..p)
            .map(|a| -jac[a].iter().zip(&r0).map(|(x, z)| x * z).sum::<f64>())
            .collect();
        let mut accepted = false;
        for _ in 0..30 {
            let mut m = jtj.clone();
            for d in 0..p {
                m[d][d] += lambda * jtj[d][d].max(1e-12);
            }
            let Some(step) = solve_dense(m, jtr.clone()) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = u.iter().zip(&step).map(|(a, b)| a + b.clamp(-5.0, 5.0)).collect();
            let s = ssr_of(&trial);
            if s.is_finite() && s <= ssr {
                let rel = (ssr - s) / ssr.max(1e-300);
                u = trial;
                ssr = s;
                lambda = (lambda * 0.3).max(1e-12);
                accepted = true;
                if rel < REL_TOL {
                    return (u.iter().map(|v| v.exp()).collect(), ssr, it, true);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            return (u.iter().map(|v| v.exp()).collect(), ssr, it, true);
        }
    }
    (u.iter().map(|v| v.exp()).collect(), ssr, MAX_ITERATIONS, false)
}

fn rate_grid(t: &[f64]) -> Vec<f64> {
    let span = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - t.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut sorted = t.to_vec();
    sorted.sort_by(f64::total_cmp);
    let min_gap = sorted
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|g| *g > 0.0)
        .fold(span, f64::min);
    let (lo, hi) = (0.1 / span, 3.0 / min_gap);
    let n = 16;
    (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect()
}

/// Bi-exponential decay fit: coarse multi-start grid over the two rates, then
/// Levenberg–Marquardt refinement with amplitudes and offset solved linearly.
pub fn fit_biexponential(t: &[f64], y: &[f64]) -> Result<BiExpFit, AnalysisError> {
    if t.len() != y.len() || t.len() < 6 {
        return Err(AnalysisError::DegenerateInput(format!(
            "need at least 6 paired points, got {} and {}",
            t.len(),
            y.len()
        )));
    }
    if t.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(AnalysisError::DegenerateInput("non-finite value".into()));
    }
    let my = mean(y);
    let spread = y.iter().map(|v| (v - my).abs()).fold(0.0, f64::max);
    if spread <= 1e-12 * my.abs().max(1e-300) {
        return Ok(BiExpFit {
            a1: 0.0,
            k1: 0.0,
            a2: 0.0,
            k2: 0.0,
            offset: my,
            residual_norm: 0.0,
            iterations: 0,
            single_exponential: false,
        });
    }
    let grid = rate_grid(t);
    let mut starts: Vec<(f64, [f64; 2])> = Vec::new();
    for (i, &ka) in grid.iter().enumerate() {
        for &kb in &grid[..i] {
            starts.push((project(t, y, &[ka, kb]).2, [ka, kb]));
        }
    }
    starts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best: Option<(Vec<f64>, f64, usize)> = None;
    let mut converged_any = false;
    for (_, s) in starts.iter().take(4) {
        let (k, ssr, it, ok) = refine(t, y, s);
        converged_any |= ok;
        if ssr.is_finite() && best.as_ref().is_none_or(|b| ssr < b.1) {
            best = Some((k, ssr, it));
        }
    }
    let (k, ssr, iterations) = best.ok_or_else(|| AnalysisError::NonConvergence("no finite start".into()))?;
    if !converged_any && !ssr.is_finite() {
        return Err(AnalysisError::NonConvergence(format!("{MAX_ITERATIONS} iterations")));
    }
    let (amps, offset, _) = project(t, y, &k);
    let (mut a1, mut k1, mut a2, mut k2) = (amps[0], k[0], amps[1], k[1]);
    if k2 > k1 {
        std::mem::swap(&mut a1, &mut a2);
        std::mem::swap(&mut k1, &mut k2);
    }
    let (big, small) = (a1.max(a2), a1.min(a2));
    if small < FALLBACK_RATIO * big {
        // refit a single exponential from the dominant component
        let k0 = if a1 >= a2 { k1 } else { k2 };
        let (ks, ssr1, it1, _) = refine(t, y, &[k0]);
        let (a, c, _) = project(t, y, &ks);
        return Ok(BiExpFit {
            a1: a[0],
            k1: ks[0],
            a2: 0.0,
            k2: 0.0,
            offset: c,
            residual_norm: ssr1.sqrt(),
            iterations: iterations + it1,
            single_exponential: true,
        });
    }
    Ok(BiExpFit {
        a1,
        k1,
        a2,
        k2,
        offset,
        residual_norm: ssr.sqrt(),
        iterations,
        single_exponential: false,
    })
}

/// Rate 1/τ where τ is the first time the trace falls to `baseline + (y0 − baseline)/e`,
/// linearly interpolated.
pub fn e_folding_rate(t: &[f64], y: &[f64], baseline: f64) -> Result<f64, AnalysisError> {
    if t.len() != y.len() || t.len() < 2 {
        return Err(AnalysisError::DegenerateInput("need at least 2 paired points".into()));
    }
    let level = baseline + (y[0] - baseline) / std::f64::consts::E;
    for i in 1..t.len() {
        if y[i] <= level {
            let f = (y[i - 1] - level) / (y[i - 1] - y[i]);
            let tau = t[i - 1] + f * (t[i] - t[i - 1]) - t[0];
            return Ok(1.0 / tau);
        }
    }
    Err(AnalysisError::NoCrossing)
}

/// Pearson correlation of two images over the masked pixels.
pub fn anticorrelation(a: &[f64], b: &[f64], mask: &[bool]) -> Result<f64, AnalysisError> {
    if a.len() != b.len() || a.len() != mask.len() {
        return Err(AnalysisError::DegenerateInput("image and mask shapes differ".into()));
    }
    let (xa, xb): (Vec<f64>, Vec<f64>) = a
        .iter()
        .zip(b)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&p, &q), _)| (p, q))
        .unzip();
    if xa.len() < 10 {
        return Err(AnalysisError::DegenerateInput(format!(
            "mask selects {} pixels, need at least 10",
            xa.len()
        )));
    }
    let (ma, mb) = (mean(&xa), mean(&xb));
    let saa: f64 = xa.iter().map(|v| (v - ma).powi(2)).sum();
    let sbb: f64 = xb.iter().map(|v| (v - mb).powi(2)).sum();
    if saa <= 0.0 {
        return Err(AnalysisError::ZeroVariance("first image".into()));
    }
    if sbb <= 0.0 {
        return Err(AnalysisError::ZeroVariance("second image".into()));
    }
    let sab: f64 = xa.iter().zip(&xb).map(|(p, q)| (p - ma) * (q - mb)).sum();
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pixels of `image` whose centres lie in `r_in <= r <= r_out` from `center`.
pub fn annulus_mask(image: &ReadoutImage, center: [f64; 2], r_in: f64, r_out: f64) -> Vec<bool> {
    let mut mask = Vec::with_capacity(image.pixels.len());
    for iy in 0..image.ny {
        for ix in 0..image.nx {
            let (x, y) = image.pixel_center(ix, iy);
            let r = (x - center[0]).hypot(y - center[1]);
            mask.push(r >= r_in && r <= r_out);
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::photophysics::Beam;
    use crate::protocol::ReadoutMode;

    pub(crate) fn image(n: usize, pitch: f64, f: impl Fn(f64, f64) -> f64) -> ReadoutImage {
        let origin = [-(n as f64 - 1.0) * 0.5 * pitch; 2];
        let mut pixels = Vec::new();
        for iy in 0..n {
            for ix in 0..n {
                pixels.push(f(origin[0] + ix as f64 * pitch, origin[1] + iy as f64 * pitch));
            }
        }
        ReadoutImage {
            channel: "c".into(),
            label: "l".into(),
            nx: n,
            ny: n,
            pitch,
            origin,
            pixels,
            beam: Beam::new(857.0, 0.29, 0.45),
            mode: ReadoutMode::Ideal,
            timestamp: 0.0,
        }
    }

    #[test]
    fn uniform_image_has_flat_profile() {
        let img = image(40, 0.25, |_, _| 3.5);
        let p = radial_profile(&img, [0.0, 0.0], 0.25).unwrap();
        assert!(p.values.iter().all(|&v| v == 3.5));
        assert!(matches!(
            radial_profile(&img, [0.0, 0.0], 0.2),
            Err(AnalysisError::EmptyAnnulus { .. })
        ));
    }

    #[test]
    fn annulus_indicator_peaks_at_its_radius() {
        let img = image(64, 0.25, |x, y| {
            let r = x.hypot(y);
            if (2.5..3.0).contains(&r) {
                1.0
            } else {
                0.0
            }
        });
        let p = radial_profile(&img, [0.0, 0.0], 0.25).unwrap();
        assert!((p.peak().0 - 2.75).abs() <= 0.25);
    }

    #[test]
    fn rotation_leaves_profile_unchanged() {
        let img = image(33, 0.2, |x, y| (x + 2.0 * y).sin() + x * x);
        let mut rot = img.clone();
        for iy in 0..33 {
            for ix in 0..33 {
                rot.pixels[iy * 33 + ix] = img.at(iy, 32 - ix);
            }
        }
        let a = radial_profile(&img, [0.0, 0.0], 0.3).unwrap();
        let b = radial_profile(&rot, [0.0, 0.0], 0.3).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    fn profile(values: Vec<f64>) -> RadialProfile {
        RadialProfile {
            center: [0.0, 0.0],
            radii: (0..values.len()).map(|i| i as f64 + 0.5).collect(),
            pixels: vec![1; values.len()],
            values,
        }
    }

    #[test]
    fn edge_of_step_and_double_step() {
        let step = profile(
            (0..10)
                .map(|i| if (i as f64 + 0.5) < 5.0 { 20.0 } else { 0.0 })
                .collect(),
        );
        let r = torus_edge_radius(&step, Threshold::Absolute(10.0)).unwrap();
        assert!((r - 5.0).abs() <= 0.5);
        let torus = profile(vec![0.0, 0.0, 20.0, 20.0, 20.0, 0.0, 0.0, 0.0]);
        let r = torus_edge_radius(&torus, Threshold::Absolute(10.0)).unwrap();
        assert!((r - 5.0).abs() < 1e-12);
        assert_eq!(
            torus_edge_radius(&profile(vec![0.0; 5]), Threshold::Absolute(1.0)),
            Err(AnalysisError::NoCrossing)
        );
        let f = torus_edge_radius(&torus, Threshold::Fraction(0.6)).unwrap();
        assert!((f - (4.5 + 0.4)).abs() < 1e-12);
    }

    #[test]
    fn power_law_exact_laws() {
        let t: Vec<f64> = (0..12).map(|i| 0.3 * 1.7f64.powi(i)).collect();
        let s: Vec<f64> = t.iter().map(|v| v.sqrt()).collect();
        let f = fit_power_law(&t, &s, None).unwrap();
        assert!((f.n - 2.0).abs() < 1e-6);
        assert!((f.d - 1.0).abs() < 1e-9);
        let s: Vec<f64> = t.iter().map(|v| v.powf(1.0 / 4.6)).collect();
        assert!((fit_power_law(&t, &s, None).unwrap().n - 4.6).abs() < 0.01);
        let fixed = fit_power_law(&t, &t.iter().map(|v| 3.0 * v.sqrt()).collect::<Vec<_>>(), Some(2.0)).unwrap();
        assert!((fixed.d - 9.0).abs() < 1e-9);
        assert!(fit_power_law(&t[..2], &s[..2], None).is_err());
        assert!(fit_power_law(&[1.0, 2.0, 0.0], &[1.0, 1.0, 1.0], None).is_err());
    }

    #[test]
    fn linear_fit_through_origin() {
        let x = [0.1, 0.2, 0.5, 1.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        let f = fit_rate_vs_power(&x, &y).unwrap();
        assert!(f.intercept.abs() < 1e-12);
        assert_eq!(f.r_squared, 1.0);
        assert!(fit_rate_vs_power(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    }

    fn log_times(n: usize, a: f64, b: f64) -> Vec<f64> {
        (0..n).map(|i| a * (b / a).powf(i as f64 / (n - 1) as f64)).collect()
    }

    #[test]
    fn biexponential_recovers_synthetic_truth() {
        let t = log_times(60, 0.01, 100.0);
        let y: Vec<f64> = t.iter().map(|&x| (-x).exp() + 0.5 * (-0.05 * x).exp()).collect();
        let f = fit_biexponential(&t, &y).unwrap();
        assert!(!f.single_exponential);
        for (got, want) in [(f.a1, 1.0), (f.k1, 1.0), (f.a2, 0.5), (f.k2, 0.05)] {
            assert!((got / want - 1.0).abs() < 0.01, "{f:?}");
        }
    }

    #[test]
    fn biexponential_single_and_constant() {
        let t = log_times(40, 0.01, 20.0);
        let y: Vec<f64> = t.iter().map(|&x| 2.0 * (-0.7 * x).exp()).collect();
        let f = fit_biexponential(&t, &y).unwrap();
        assert!(f.single_exponential);
        assert!((f.k1 / 0.7 - 1.0).abs() < 1e-3, "{f:?}");
        let c = fit_biexponential(&t, &vec![4.0; t.len()]).unwrap();
        assert_eq!((c.a1, c.a2, c.offset), (0.0, 0.0, 4.0));
    }

    #[test]
    fn pearson_extremes_and_errors() {
        let a: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let neg: Vec<f64> = a.iter().map(|v| 5.0 - v).collect();
        let mask = vec![true; 20];
        assert!((anticorrelation(&a, &neg, &mask).unwrap() + 1.0).abs() < 1e-12);
        assert!((anticorrelation(&a, &a, &mask).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            anticorrelation(&a, &[1.0; 20], &mask),
            Err(AnalysisError::ZeroVariance(_))
        ));
        let mut few = vec![false; 20];
        few[..9].iter_mut().for_each(|m| *m = true);
        assert!(anticorrelation(&a, &neg, &few).is_err());
    }

    #[test]
    fn e_folding_of_exponential() {
        let t: Vec<f64> = (0..200).map(|i| i as f64 * 0.01).collect();
        let y: Vec<f64> = t.iter().map(|&x| 1.0 + 3.0 * (-2.0 * x).exp()).collect();
        let k = e_folding_rate(&t, &y, 1.0).unwrap();
        assert!((k - 2.0).abs() < 0.01);
    }
}
