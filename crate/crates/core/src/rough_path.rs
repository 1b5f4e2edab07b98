//! Sampled paths and their second-level enhancements.
//!
//! A [`SampledRoughPath`] stores a path on a grid together with one `d×d`
//! area matrix per grid step. The enhancement over an arbitrary grid pair
//! `(s, t)` is never stored; it is recomposed on demand through Chen's
//! relation
//!
//! ```text
//! YY[s,t] = YY[s,r] + YY[r,t] + Y[s,r] ⊗ Y[r,t]
//! ```
//!
//! so every lift built here satisfies the relation by construction.
//!
//! Norms: vectors use the Euclidean norm, `d×d` matrices the Frobenius norm.
//! Matrices are stored row-major, entry `(i, j)` holding `∫ Y^i dY^j`.

use std::ops::RangeInclusive;

use crate::error::{Error, Result};

/// Relative tolerance used for algebraic identities (Chen, symmetric part).
pub const DEFAULT_TOLERANCE: f64 = 1e-9;

/// A `d`-dimensional path sampled on a strictly increasing time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath {
    times: Vec<f64>,
    dim: usize,
    values: Vec<f64>,
}

impl SampledPath {
    /// `values` is row-major: `values[i * dim + k]` is coordinate `k` at `times[i]`.
    pub fn new(times: Vec<f64>, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::domain("path dimension must be at least 1"));
        }
        if times.is_empty() {
            return Err(Error::domain("path needs at least one sample"));
        }
        if values.len() != times.len() * dim {
            return Err(Error::domain(format!(
                "expected {} values for {} samples of dimension {dim}, got {}",
                times.len() * dim,
                times.len(),
                values.len()
            )));
        }
        if times.iter().any(|t| !t.is_finite()) || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("path contains non-finite entries"));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::domain("sample times must be strictly increasing"));
        }
        Ok(Self { times, dim, values })
    }

    /// Uniform grid `t0, t0 + dt, ...` with one sample per row of `values`.
    pub fn uniform(t0: f64, dt: f64, dim: usize, values: Vec<f64>) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::domain("grid step must be positive"));
        }
        if dim == 0 || values.len() % dim != 0 {
            return Err(Error::domain("value count is not a multiple of the dimension"));
        }
        let n = values.len() / dim;
        let times = (0..n).map(|i| t0 + i as f64 * dt).collect();
        Self::new(times, dim, values)
    }

    /// Scalar path from a slice of values.
    pub fn scalar(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        Self::new(times, 1, values)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1] - self.times[0]
    }

    /// `Y_t - Y_s` between grid indices.
    pub fn increment(&self, s: usize, t: usize) -> Vec<f64> {
        self.point(t)
            .iter()
            .zip(self.point(s))
            .map(|(b, a)| b - a)
            .collect()
    }

    pub fn sup_norm(&self) -> f64 {
        (0..self.len())
            .map(|i| norm(self.point(i)))
            .fold(0.0, f64::max)
    }

    /// Pointwise difference `self - other` on a shared grid.
    pub fn difference(&self, other: &SampledPath) -> Result<SampledPath> {
        self.check_same_grid(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        SampledPath::new(self.times.clone(), self.dim, values)
    }

    /// `t ↦ Y_{T - t}` on the mirrored grid.
    pub fn reversed(&self) -> SampledPath {
        let n = self.len();
        let (t0, t_end) = (self.times[0], self.times[n - 1]);
        let times = (0..n).map(|i| t0 + (t_end - self.times[n - 1 - i])).collect();
        let mut values = Vec::with_capacity(self.values.len());
        for i in (0..n).rev() {
            values.extend_from_slice(self.point(i));
        }
        SampledPath {
            times,
            dim: self.dim,
            values,
        }
    }

    pub(crate) fn check_same_grid(&self, other: &SampledPath) -> Result<()> {
        if self.dim != other.dim || self.times.len() != other.times.len() {
            return Err(Error::domain("paths live on different grids or dimensions"));
        }
        let scale = self.horizon().abs().max(1.0);
        if self
            .times
            .iter()
            .zip(&other.times)
            .any(|(a, b)| (a - b).abs() > 1e-12 * scale)
        {
            return Err(Error::domain("paths live on different time grids"));
        }
        Ok(())
    }

    /// Exact p-variation over the grid points in `interval`.
    pub fn p_variation(&self, p: f64, interval: RangeInclusive<usize>) -> Result<PVarResult> {
        let (start, end) = check_interval(self.len(), p, &interval)?;
        if self.dim == 1 {
            // For a scalar path, merging consecutive increments of equal sign
            // never lowers Σ|ΔY|^p when p ≥ 1, so only turning points matter.
            let nodes = turning_points(&self.values, start, end);
            return Ok(pvar_dp(&nodes, p, |s_idx, t_idx, row| {
                let yt = self.values[nodes[t_idx]];
                for (slot, &s) in row.iter_mut().zip(&nodes[s_idx..t_idx]) {
                    *slot = (yt - self.values[s]).abs();
                }
            }));
        }
        let nodes: Vec<usize> = (start..=end).collect();
        Ok(pvar_dp(&nodes, p, |s_idx, t_idx, row| {
            let yt = self.point(nodes[t_idx]);
            for (slot, &s) in row.iter_mut().zip(&nodes[s_idx..t_idx]) {
                let ys = self.point(s);
                *slot = yt
                    .iter()
                    .zip(ys)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
            }
        }))
    }
}

/// Value of a p-variation supremum together with a partition attaining it.
#[derive(Debug, Clone, PartialEq)]
pub struct PVarResult {
    pub value: f64,
    pub witness_partition: Vec<usize>,
}

/// A sampled path together with its per-step second-level enhancement.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledRoughPath {
    base: SampledPath,
    areas: Vec<f64>,
}

impl SampledRoughPath {
    /// `areas` holds one row-major `d×d` block per grid step.
    pub fn new(base: SampledPath, areas: Vec<f64>) -> Result<Self> {
        let d = base.dim();
        let steps = base.len().saturating_sub(1);
        if areas.len() != steps * d * d {
            return Err(Error::domain(format!(
                "expected {} area entries for {steps} steps in dimension {d}, got {}",
                steps * d * d,
                areas.len()
            )));
        }
        if areas.iter().any(|a| !a.is_finite()) {
            return Err(Error::domain("areas contain non-finite entries"));
        }
        Ok(Self { base, areas })
    }

    pub fn base(&self) -> &SampledPath {
        &self.base
    }

    pub fn dim(&self) -> usize {
        self.base.dim
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.base.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        self.base.times()
    }

    pub fn step_increment(&self, i: usize) -> Vec<f64> {
        self.base.increment(i, i + 1)
    }

    pub fn step_area(&self, i: usize) -> &[f64] {
        let dd = self.dim() * self.dim();
        &self.areas[i * dd..(i + 1) * dd]
    }

    pub fn areas(&self) -> &[f64] {
        &self.areas
    }

    pub fn increment(&self, s: usize, t: usize) -> Vec<f64> {
        self.base.increment(s, t)
    }

    /// `YY[s,t]` recomposed from the per-step areas.
    pub fn area(&self, s: usize, t: usize) -> Vec<f64> {
        let d = self.dim();
        let mut acc = vec![0.0; d * d];
        let ys = self.base.point(s);
        for i in s..t {
            let yi = self.base.point(i);
            let yn = self.base.point(i + 1);
            let step = self.step_area(i);
            for a in 0..d {
                let lead = yi[a] - ys[a];
                for b in 0..d {
                    acc[a * d + b] += step[a * d + b] + lead * (yn[b] - yi[b]);
                }
            }
        }
        acc
    }

    /// `YY[s,t] - YY[s,r] - YY[r,t] - Y[s,r] ⊗ Y[r,t]`.
    pub fn chen_defect(&self, s: usize, r: usize, t: usize) -> Result<Vec<f64>> {
        chen_defect(self, s, r, t)
    }

    /// Largest entry of `YY[s,t] + YY[s,t]^T - Y[s,t] ⊗ Y[s,t]`.
    pub fn symmetric_defect(&self, s: usize, t: usize) -> f64 {
        let d = self.dim();
        let area = self.area(s, t);
        let inc = self.increment(s, t);
        let mut worst: f64 = 0.0;
        for a in 0..d {
            for b in 0..d {
                let v = area[a * d + b] + area[b * d + a] - inc[a] * inc[b];
                worst = worst.max(v.abs());
            }
        }
        worst
    }

    /// Reversed path `t ↦ Y_{T-t}` with enhancement `-YY[T-t,T-s] + Y ⊗ Y`.
    pub fn time_reverse(&self) -> SampledRoughPath {
        let d = self.dim();
        let steps = self.steps();
        let mut areas = Vec::with_capacity(self.areas.len());
        for j in 0..steps {
            let i = steps - 1 - j;
            let v = self.step_increment(i);
            let step = self.step_area(i);
            for a in 0..d {
                for b in 0..d {
                    areas.push(-step[a * d + b] + v[a] * v[b]);
                }
            }
        }
        SampledRoughPath {
            base: self.base.reversed(),
            areas,
        }
    }

    /// Exact variation of the second level with the given exponent (pass
    /// `p / 2` for the rough-path seminorm).
    pub fn area_variation(&self, exponent: f64, interval: RangeInclusive<usize>) -> Result<PVarResult> {
        area_variation_impl(self, None, exponent, interval)
    }

    /// `‖Y‖_p + ‖YY‖_{p/2}` over the whole grid.
    pub fn rough_norm(&self, p: f64) -> Result<f64> {
        let last = self.len() - 1;
        Ok(self.base.p_variation(p, 0..=last)?.value + self.area_variation(p / 2.0, 0..=last)?.value)
    }

    pub fn sup_norm(&self) -> f64 {
        self.base.sup_norm()
    }
}

/// Anything that can report first- and second-level increments between grid
/// indices. Implemented by [`SampledRoughPath`]; test code wraps it to inject
/// faults.
pub trait TwoParameterPath {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    fn increment(&self, s: usize, t: usize) -> Vec<f64>;
    fn area(&self, s: usize, t: usize) -> Vec<f64>;
}

impl TwoParameterPath for SampledRoughPath {
    fn len(&self) -> usize {
        SampledRoughPath::len(self)
    }
    fn dim(&self) -> usize {
        SampledRoughPath::dim(self)
    }
    fn increment(&self, s: usize, t: usize) -> Vec<f64> {
        SampledRoughPath::increment(self, s, t)
    }
    fn area(&self, s: usize, t: usize) -> Vec<f64> {
        SampledRoughPath::area(self, s, t)
    }
}

/// Chen defect `YY[s,t] - YY[s,r] - YY[r,t] - Y[s,r] ⊗ Y[r,t]` of any
/// two-parameter path.
pub fn chen_defect<P: TwoParameterPath + ?Sized>(path: &P, s: usize, r: usize, t: usize) -> Result<Vec<f64>> {
    if !(s <= r && r <= t) || t >= path.len() {
        return Err(Error::domain(format!(
            "chen triple ({s}, {r}, {t}) is not ordered within the grid"
        )));
    }
    let d = path.dim();
    let st = path.area(s, t);
    let sr = path.area(s, r);
    let rt = path.area(r, t);
    let y_sr = path.increment(s, r);
    let y_rt = path.increment(r, t);
    let mut out = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            let k = a * d + b;
            out[k] = st[k] - sr[k] - rt[k] - y_sr[a] * y_rt[b];
        }
    }
    Ok(out)
}

/// Canonical lift of the piecewise-linear interpolant: each linear segment with
/// increment `v` carries area `½ v ⊗ v`.
pub fn canonical_lift(path: &SampledPath) -> Result<SampledRoughPath> {
    if path.len() < 2 {
        return Err(Error::domain("canonical lift needs at least two samples"));
    }
    let d = path.dim();
    let mut areas = Vec::with_capacity((path.len() - 1) * d * d);
    for i in 0..path.len() - 1 {
        let v = path.increment(i, i + 1);
        for a in 0..d {
            for b in 0..d {
                areas.push(0.5 * v[a] * v[b]);
            }
        }
    }
    SampledRoughPath::new(path.clone(), areas)
}

/// Stratonovich (midpoint-sum) lift of a finely sampled path onto the grid
/// that keeps every `coarse_factor`-th sample.
pub fn stratonovich_lift(fine_path: &SampledPath, coarse_factor: usize) -> Result<SampledRoughPath> {
    if coarse_factor == 0 {
        return Err(Error::domain("coarse factor must be at least 1"));
    }
    if fine_path.len() < 2 {
        return Err(Error::domain("stratonovich lift needs at least two samples"));
    }
    let fine_steps = fine_path.len() - 1;
    if fine_steps % coarse_factor != 0 {
        return Err(Error::domain(format!(
            "{fine_steps} fine steps are not divisible by coarse factor {coarse_factor}"
        )));
    }
    let d = fine_path.dim();
    let coarse_steps = fine_steps / coarse_factor;
    let mut times = Vec::with_capacity(coarse_steps + 1);
    let mut values = Vec::with_capacity((coarse_steps + 1) * d);
    let mut areas = vec![0.0; coarse_steps * d * d];
    for c in 0..=coarse_steps {
        let i = c * coarse_factor;
        times.push(fine_path.times[i]);
        values.extend_from_slice(fine_path.point(i));
    }
    for c in 0..coarse_steps {
        let base = fine_path.point(c * coarse_factor);
        let block = &mut areas[c * d * d..(c + 1) * d * d];
        for j in c * coarse_factor..(c + 1) * coarse_factor {
            let y0 = fine_path.point(j);
            let y1 = fine_path.point(j + 1);
            for a in 0..d {
                let mid = 0.5 * (y0[a] + y1[a]) - base[a];
                for b in 0..d {
                    block[a * d + b] += mid * (y1[b] - y0[b]);
                }
            }
        }
    }
    SampledRoughPath::new(SampledPath::new(times, d, values)?, areas)
}

/// Rough path distance `‖Y - Ỹ‖_p + ‖YY - ỸỸ‖_{p/2}` on a shared grid.
pub fn rough_distance(a: &SampledRoughPath, b: &SampledRoughPath, p: f64) -> Result<f64> {
    a.base.check_same_grid(&b.base)?;
    let last = a.len() - 1;
    let first = a.base.difference(&b.base)?.p_variation(p, 0..=last)?.value;
    let second = area_variation_impl(a, Some(b), p / 2.0, 0..=last)?.value;
    Ok(first + second)
}

/// Paths used to show that the rough-integral growth bound is sharp.
#[derive(Debug, Clone)]
pub struct SharpnessFixture {
    /// Canonical lift of `Y^n_t = (2n)^{-1/p} φ(n t)` on `[0, 4]`.
    pub drive: SampledRoughPath,
    /// `γ^n_t = 2^{-2/p} n^{-ε} φ(n t + 1)`.
    pub gamma: SampledPath,
    /// Closed form of `∫ γ^n dY^n`: `2^{-3/p} n^{1 - 1/p - ε}`.
    pub expected_integral: f64,
}

/// 4-periodic trapezoid wave: up on [0,1], flat at 1, down on [2,3], flat at 0.
pub fn trapezoid_wave(s: f64) -> f64 {
    let r = s.rem_euclid(4.0);
    if r <= 1.0 {
        r
    } else if r <= 2.0 {
        1.0
    } else if r <= 3.0 {
        3.0 - r
    } else {
        0.0
    }
}

/// Builds the sharpness family sampled at all breakpoints `t = j / n`.
pub fn sharpness_fixture(n: usize, p: f64, eps: f64) -> Result<SharpnessFixture> {
    if n == 0 {
        return Err(Error::domain("fixture index n must be at least 1"));
    }
    if !(2.0..3.0).contains(&p) {
        return Err(Error::domain(format!("p = {p} outside [2, 3)")));
    }
    if !(eps > 0.0 && eps < 2.0 / p) {
        return Err(Error::domain(format!("eps = {eps} outside (0, 2/p)")));
    }
    let nf = n as f64;
    let y_scale = (2.0 * nf).powf(-1.0 / p);
    let g_scale = 2f64.powf(-2.0 / p) * nf.powf(-eps);
    let points = 4 * n + 1;
    let times: Vec<f64> = (0..points).map(|j| j as f64 / nf).collect();
    let y: Vec<f64> = (0..points).map(|j| y_scale * trapezoid_wave(j as f64)).collect();
    let g: Vec<f64> = (0..points).map(|j| g_scale * trapezoid_wave(j as f64 + 1.0)).collect();
    let drive = canonical_lift(&SampledPath::scalar(times.clone(), y)?)?;
    let gamma = SampledPath::scalar(times, g)?;
    let expected_integral = 2f64.powf(-3.0 / p) * nf.powf(1.0 - 1.0 / p - eps);
    Ok(SharpnessFixture {
        drive,
        gamma,
        expected_integral,
    })
}

/// `∫ f dY` for two paths that are linear between the same samples; the
/// trapezoid rule is exact on every piece.
pub fn piecewise_linear_integral(integrand: &SampledPath, path: &SampledPath) -> Result<f64> {
    integrand.check_same_grid(path)?;
    if integrand.dim() != path.dim() {
        return Err(Error::domain("integrand and path dimensions differ"));
    }
    let mut total = 0.0;
    for i in 0..path.len() - 1 {
        let (f0, f1) = (integrand.point(i), integrand.point(i + 1));
        let (y0, y1) = (path.point(i), path.point(i + 1));
        for c in 0..path.dim() {
            total += 0.5 * (f0[c] + f1[c]) * (y1[c] - y0[c]);
        }
    }
    Ok(total)
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_interval(len: usize, p: f64, interval: &RangeInclusive<usize>) -> Result<(usize, usize)> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::domain(format!("variation exponent {p} must be finite and at least 1")));
    }
    let (start, end) = (*interval.start(), *interval.end());
    if start > end || end >= len {
        return Err(Error::domain(format!(
            "interval {start}..={end} is empty or exceeds {len} samples"
        )));
    }
    Ok((start, end))
}

fn turning_points(values: &[f64], start: usize, end: usize) -> Vec<usize> {
    let mut nodes = vec![start];
    for i in start + 1..end {
        let prev = values[i] - values[nodes[nodes.len() - 1]];
        let next = values[i + 1] - values[i];
        if prev * next < 0.0 || (prev != 0.0 && next == 0.0) {
            nodes.push(i);
        }
    }
    if end > start {
        nodes.push(end);
    }
    nodes
}

/// Dynamic program over candidate nodes: `best[t] = max_s best[s] + |X_{s,t}|^p`.
///
/// `fill(s_idx, t_idx, row)` writes `|X_{nodes[s], nodes[t]}|` for every
/// `s` in `s_idx..t_idx` (here always `0..t_idx`).
fn pvar_dp(nodes: &[usize], p: f64, mut fill: impl FnMut(usize, usize, &mut [f64])) -> PVarResult {
    let n = nodes.len();
    if n < 2 {
        return PVarResult {
            value: 0.0,
            witness_partition: nodes.to_vec(),
        };
    }
    let mut best = vec![0.0; n];
    let mut parent = vec![0usize; n];
    let mut row = vec![0.0; n];
    for t in 1..n {
        fill(0, t, &mut row[..t]);
        let mut top = f64::NEG_INFINITY;
        let mut arg = 0;
        for s in 0..t {
            let cand = best[s] + row[s].powf(p);
            if cand > top {
                top = cand;
                arg = s;
            }
        }
        best[t] = top;
        parent[t] = arg;
    }
    let mut witness = vec![nodes[n - 1]];
    let mut cur = n - 1;
    while cur > 0 {
        cur = parent[cur];
        witness.push(nodes[cur]);
    }
    witness.reverse();
    PVarResult {
        value: best[n - 1].powf(1.0 / p),
        witness_partition: witness,
    }
}

fn area_variation_impl(
    a: &SampledRoughPath,
    b: Option<&SampledRoughPath>,
    exponent: f64,
    interval: RangeInclusive<usize>,
) -> Result<PVarResult> {
    let (start, end) = check_interval(a.len(), exponent, &interval)?;
    let d = a.dim();
    let dd = d * d;
    let nodes: Vec<usize> = (start..=end).collect();
    // Backward Chen recurrence from t:
    // YY[s,t] = YY[s,s+1] + YY[s+1,t] + Y[s,s+1] ⊗ Y[s+1,t].
    let mut acc_a = vec![0.0; dd];
    let mut acc_b = vec![0.0; dd];
    let fill = |_: usize, t_idx: usize, row: &mut [f64]| {
        let t = nodes[t_idx];
        acc_a.iter_mut().for_each(|x| *x = 0.0);
        acc_b.iter_mut().for_each(|x| *x = 0.0);
        for s in (start..t).rev() {
            backward_chen(a, s, t, &mut acc_a);
            if let Some(b) = b {
                backward_chen(b, s, t, &mut acc_b);
            }
            let diff = acc_a
                .iter()
                .zip(&acc_b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            row[s - start] = diff;
        }
    };
    Ok(pvar_dp(&nodes, exponent, fill))
}

fn backward_chen(rp: &SampledRoughPath, s: usize, t: usize, acc: &mut [f64]) {
    let d = rp.dim();
    let ys = rp.base.point(s);
    let ys1 = rp.base.point(s + 1);
    let yt = rp.base.point(t);
    let step = rp.step_area(s);
    for i in 0..d {
        let lead = ys1[i] - ys[i];
        for j in 0..d {
            acc[i * d + j] += step[i * d + j] + lead * (yt[j] - ys1[j]);
        }
    }
}
