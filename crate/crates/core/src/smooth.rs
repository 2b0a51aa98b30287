//! Local-linear surface smoothing (LLS) for partially observed noisy curves.
//!
//! Cross- and marginal-covariance surfaces are estimated by a weighted plane
//! fit to raw product observations; the closed form assembles per-subject
//! aggregates T_ab of kernel-weighted products and pooled moments S_ab of the
//! kernel weights, then combines them through Cramer weights. Marginal
//! entries use off-diagonal (l != m) pairs only, which removes the additive
//! noise nugget without estimating it. A surrogate for the asymptotic
//! variance of each smoothed entry is obtained from per-subject residual
//! aggregates scaled by the design-dependent rate factor.
//!
//! All passes are point-major with subjects accumulated in ascending order at
//! each output point; the binned path mirrors that exact summation structure,
//! which is what makes binned and direct estimates comparable bit-for-bit
//! when observations sit on bin centers.

use crate::dense::{threshold_field, DenseSample, ThresholdOptions, ThresholdedEstimate};
use crate::error::{Error, Result};
use crate::grid::{CovField, Grid, Surface};
use crate::kernel::Kernel;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

// ---------------------------------------------------------------------------
// data layout

/// Shared-location observations of one subject: all p variables are observed
/// at the same sorted locations.
#[derive(Clone, Debug)]
pub struct SubjectBlock {
    locations: Vec<f64>,
    /// Variable-major values: values[j * L + l].
    values: Vec<f64>,
    p: usize,
}

impl SubjectBlock {
    pub fn new(locations: Vec<f64>, values: Vec<f64>, p: usize) -> Result<Self> {
        let l = locations.len();
        if l < 2 {
            return Err(Error::InsufficientData(
                "each subject needs at least 2 observation locations".into(),
            ));
        }
        if values.len() != p * l {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for p={p}, L={l}, got {}",
                p * l,
                values.len()
            )));
        }
        if locations.iter().any(|u| !u.is_finite() || *u < 0.0 || *u > 1.0) {
            return Err(Error::Config("observation locations must lie in [0, 1]".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("observation values must be finite".into()));
        }
        if locations.windows(2).all(|w| w[0] <= w[1]) {
            return Ok(SubjectBlock { locations, values, p });
        }
        // sort by location, permuting every channel consistently
        let mut order: Vec<usize> = (0..l).collect();
        order.sort_by(|&a, &b| locations[a].partial_cmp(&locations[b]).unwrap());
        let sorted_locs: Vec<f64> = order.iter().map(|&idx| locations[idx]).collect();
        let mut sorted_vals = vec![0.0; p * l];
        for j in 0..p {
            for (pos, &idx) in order.iter().enumerate() {
                sorted_vals[j * l + pos] = values[j * l + idx];
            }
        }
        Ok(SubjectBlock { locations: sorted_locs, values: sorted_vals, p })
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn locations(&self) -> &[f64] {
        &self.locations
    }

    pub fn channel(&self, j: usize) -> &[f64] {
        let l = self.locations.len();
        &self.values[j * l..(j + 1) * l]
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Observations of one (subject, variable) channel in the general layout.
#[derive(Clone, Debug)]
pub struct Channel {
    locations: Vec<f64>,
    values: Vec<f64>,
}

impl Channel {
    pub fn new(locations: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if locations.len() != values.len() {
            return Err(Error::ShapeMismatch("locations and values differ in length".into()));
        }
        if locations.is_empty() {
            return Err(Error::InsufficientData("channel has no observations".into()));
        }
        if locations.iter().any(|u| !u.is_finite() || *u < 0.0 || *u > 1.0) {
            return Err(Error::Config("observation locations must lie in [0, 1]".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("observation values must be finite".into()));
        }
        let mut pairs: Vec<(f64, f64)> = locations.into_iter().zip(values).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let (locations, values) = pairs.into_iter().unzip();
        Ok(Channel { locations, values })
    }

    pub fn locations(&self) -> &[f64] {
        &self.locations
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Clone, Debug)]
pub enum PartialLayout {
    /// Locations shared across variables within each subject.
    Simplified(Vec<SubjectBlock>),
    /// Per-(subject, variable) locations.
    General(Vec<Vec<Channel>>),
}

/// Partially observed noisy functional data.
#[derive(Clone, Debug)]
pub struct PartialSample {
    p: usize,
    layout: PartialLayout,
}

impl PartialSample {
    pub fn simplified(p: usize, blocks: Vec<SubjectBlock>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InsufficientData("no subjects".into()));
        }
        if blocks.iter().any(|b| b.p != p) {
            return Err(Error::ShapeMismatch("subject block has wrong variable count".into()));
        }
        Ok(PartialSample { p, layout: PartialLayout::Simplified(blocks) })
    }

    pub fn general(p: usize, subjects: Vec<Vec<Channel>>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::InsufficientData("no subjects".into()));
        }
        if subjects.iter().any(|chs| chs.len() != p) {
            return Err(Error::ShapeMismatch("subject has wrong channel count".into()));
        }
        Ok(PartialSample { p, layout: PartialLayout::General(subjects) })
    }

    pub fn n(&self) -> usize {
        match &self.layout {
            PartialLayout::Simplified(blocks) => blocks.len(),
            PartialLayout::General(subjects) => subjects.len(),
        }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn layout(&self) -> &PartialLayout {
        &self.layout
    }

    pub(crate) fn layout_mut(&mut self) -> &mut PartialLayout {
        &mut self.layout
    }

    pub fn is_simplified(&self) -> bool {
        matches!(self.layout, PartialLayout::Simplified(_))
    }

    /// Locations and values of the (i, j) channel.
    pub fn subject_channel(&self, i: usize, j: usize) -> Result<(&[f64], &[f64])> {
        if j >= self.p {
            return Err(Error::ShapeMismatch(format!("variable index {j} out of range")));
        }
        match &self.layout {
            PartialLayout::Simplified(blocks) => {
                let b = blocks
                    .get(i)
                    .ok_or_else(|| Error::ShapeMismatch(format!("subject index {i} out of range")))?;
                Ok((b.locations(), b.channel(j)))
            }
            PartialLayout::General(subjects) => {
                let ch = subjects
                    .get(i)
                    .ok_or_else(|| Error::ShapeMismatch(format!("subject index {i} out of range")))?;
                Ok((ch[j].locations(), ch[j].values()))
            }
        }
    }

    /// Observation counts L_ij for a variable across subjects.
    pub fn counts(&self, j: usize) -> Vec<usize> {
        (0..self.n())
            .map(|i| self.subject_channel(i, j).map(|(locs, _)| locs.len()).unwrap_or(0))
            .collect()
    }

    /// Restrict to a subset of subjects, in the given order.
    pub fn subset(&self, subjects: &[usize]) -> Result<PartialSample> {
        match &self.layout {
            PartialLayout::Simplified(blocks) => {
                let picked: Result<Vec<SubjectBlock>> = subjects
                    .iter()
                    .map(|&i| {
                        blocks.get(i).cloned().ok_or_else(|| {
                            Error::ShapeMismatch(format!("subject index {i} out of range"))
                        })
                    })
                    .collect();
                PartialSample::simplified(self.p, picked?)
            }
            PartialLayout::General(all) => {
                let picked: Result<Vec<Vec<Channel>>> = subjects
                    .iter()
                    .map(|&i| {
                        all.get(i).cloned().ok_or_else(|| {
                            Error::ShapeMismatch(format!("subject index {i} out of range"))
                        })
                    })
                    .collect();
                PartialSample::general(self.p, picked?)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// bandwidths

/// Measurement-design regime controlling the default bandwidth rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Design {
    Sparse,
    Dense,
    VeryDense,
}

impl std::str::FromStr for Design {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(Design::Sparse),
            "dense" => Ok(Design::Dense),
            "very-dense" | "very_dense" => Ok(Design::VeryDense),
            other => Err(Error::Parse(format!("unknown design '{other}'"))),
        }
    }
}

/// Rate-optimal default bandwidth: c n^{-1/6} (sparse), c (n L^2)^{-1/6}
/// (dense), c n^{-1/4} (very dense), with c in (0, 1].
pub fn default_bandwidth(n: usize, l: usize, design: Design, c: f64) -> f64 {
    let n = n.max(1) as f64;
    let l = l.max(1) as f64;
    let base = match design {
        Design::Sparse => n.powf(-1.0 / 6.0),
        Design::Dense => (n * l * l).powf(-1.0 / 6.0),
        Design::VeryDense => n.powf(-0.25),
    };
    c * base
}

/// Bandwidths for cross-covariance, marginal-covariance and pre-smoothing.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Bandwidths {
    pub h_cross: f64,
    pub h_marginal: f64,
    pub h_presmooth: f64,
}

impl Bandwidths {
    pub fn new(h_cross: f64, h_marginal: f64, h_presmooth: f64) -> Result<Self> {
        if !(h_cross > 0.0 && h_marginal > 0.0 && h_presmooth > 0.0) {
            return Err(Error::Config("bandwidths must be positive".into()));
        }
        Ok(Bandwidths { h_cross, h_marginal, h_presmooth })
    }

    /// Defaults driven by the typical per-subject count: sparse rate below
    /// 20 observations, dense rate otherwise, and the n^{-1/4} rate for
    /// pre-smoothing.
    pub fn defaults(n: usize, l: usize, c: f64) -> Self {
        let design = if l < 20 { Design::Sparse } else { Design::Dense };
        let h = default_bandwidth(n, l, design, c);
        Bandwidths {
            h_cross: h,
            h_marginal: h,
            h_presmooth: default_bandwidth(n, l, Design::VeryDense, c),
        }
    }
}

// ---------------------------------------------------------------------------
// diagnostics

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct OpCounters {
    /// Number of scalar kernel evaluations K_h(x).
    pub kernel_evals: u64,
    /// Number of inner-loop aggregate terms processed.
    pub term_ops: u64,
}

impl OpCounters {
    pub fn merge(&mut self, other: &OpCounters) {
        self.kernel_evals += other.kernel_evals;
        self.term_ops += other.term_ops;
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct PairDiagnostics {
    pub singular_fallbacks: u64,
    pub missing_points: u64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SmoothDiagnostics {
    pub counters: OpCounters,
    pub h_cross: f64,
    pub h_marginal: f64,
    /// Per-pair (j, k) fallback and missing-point tallies, upper triangle.
    pub pairs: Vec<(usize, usize, PairDiagnostics)>,
}

// ---------------------------------------------------------------------------
// kernel tables and the shared fit algebra

/// Kernel-and-offset-power tables of one location vector against the output
/// grid, row-major by output point: k0[r * L + l] = K_h(U_l - u_r),
/// k1 = k0 * du, k2 = k1 * du.
pub(crate) struct AxisTables {
    pub l: usize,
    pub k0: Vec<f64>,
    pub k1: Vec<f64>,
    pub k2: Vec<f64>,
}

pub(crate) fn build_axis_tables(
    locs: &[f64],
    out: &[f64],
    h: f64,
    kernel: Kernel,
) -> (AxisTables, u64) {
    let l = locs.len();
    let r = out.len();
    let mut k0 = vec![0.0; l * r];
    let mut k1 = vec![0.0; l * r];
    let mut k2 = vec![0.0; l * r];
    let mut evals = 0u64;
    for (ri, &u) in out.iter().enumerate() {
        let row = ri * l;
        for (li, &loc) in locs.iter().enumerate() {
            let du = loc - u;
            let v0 = kernel.eval_scaled(h, du);
            evals += 1;
            let v1 = v0 * du;
            k0[row + li] = v0;
            k1[row + li] = v1;
            k2[row + li] = v1 * du;
        }
    }
    (AxisTables { l, k0, k1, k2 }, evals)
}

/// Resolved local fit at one output point.
#[derive(Clone, Copy, Debug)]
pub(crate) enum PointFit {
    /// Plane fit via Cramer weights.
    Plane { w1: f64, w2: f64, w3: f64 },
    /// Local-constant fallback for near-singular designs.
    Constant { w1: f64 },
    /// No kernel mass at all; value is interpolated afterwards.
    Missing,
}

/// Cramer weights from the six pooled kernel moments
/// (s00, s10, s01, s20, s02, s11). The bool flags a singular fallback.
pub(crate) fn resolve_fit(s: &[f64; 6], h: f64) -> (PointFit, bool) {
    let [s00, s10, s01, s20, s02, s11] = *s;
    if s00 == 0.0 {
        return (PointFit::Missing, false);
    }
    let a1 = s20 * s02 - s11 * s11;
    let a2 = s10 * s02 - s01 * s11;
    let a3 = s10 * s11 - s01 * s20;
    let den = a1 * s00 - a2 * s10 + a3 * s01;
    let scale = s00 * s00 * s00 * h.powi(6);
    if den.abs() < 1e-12 * scale.abs() {
        return (PointFit::Constant { w1: 1.0 / s00 }, true);
    }
    (PointFit::Plane { w1: a1 / den, w2: -a2 / den, w3: a3 / den }, false)
}

#[inline]
pub(crate) fn combine_fit(fit: PointFit, t00: f64, t10: f64, t01: f64) -> f64 {
    match fit {
        PointFit::Plane { w1, w2, w3 } => w1 * t00 + w2 * t10 + w3 * t01,
        PointFit::Constant { w1 } => w1 * t00,
        PointFit::Missing => f64::NAN,
    }
}

/// Replace NaN points by iterative averaging of available 4-neighbours.
pub(crate) fn fill_missing(values: &mut [f64], nr: usize, nc: usize) -> u64 {
    let missing = values.iter().filter(|v| v.is_nan()).count() as u64;
    if missing == 0 {
        return 0;
    }
    while values.iter().any(|v| v.is_nan()) {
        let snapshot = values.to_vec();
        let mut progressed = false;
        for r in 0..nr {
            for c in 0..nc {
                if !snapshot[r * nc + c].is_nan() {
                    continue;
                }
                let mut acc = 0.0;
                let mut cnt = 0;
                let mut push = |rr: isize, cc: isize| {
                    if rr >= 0 && cc >= 0 && (rr as usize) < nr && (cc as usize) < nc {
                        let v = snapshot[rr as usize * nc + cc as usize];
                        if !v.is_nan() {
                            acc += v;
                            cnt += 1;
                        }
                    }
                };
                push(r as isize - 1, c as isize);
                push(r as isize + 1, c as isize);
                push(r as isize, c as isize - 1);
                push(r as isize, c as isize + 1);
                if cnt > 0 {
                    values[r * nc + c] = acc / cnt as f64;
                    progressed = true;
                }
            }
        }
        if !progressed {
            // no anchor anywhere: degenerate to zero
            for v in values.iter_mut() {
                if v.is_nan() {
                    *v = 0.0;
                }
            }
        }
    }
    missing
}

/// Rate factor making the variance surrogate converge to a finite surface;
/// counts are the per-subject observation numbers of the two variables.
pub fn rate_factor(counts_j: &[usize], counts_k: &[usize], h: f64) -> f64 {
    assert_eq!(counts_j.len(), counts_k.len());
    let mut num = 0.0;
    let mut den = 0.0;
    for (&lj, &lk) in counts_j.iter().zip(counts_k) {
        let lj = lj as f64;
        let lk = lk as f64;
        num += lj * lk;
        den += lj * lk / (h * h) + lj * lj * lk / h + lj * lk * lk / h + lj * lj * lk * lk;
    }
    num * num / den
}

// ---------------------------------------------------------------------------
// the direct smoother

/// Which raw product pairs enter the aggregates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairKind {
    /// All (l, m) pairs of two distinct variables.
    Cross,
    /// Same variable, l != m pairs only (nugget-free marginal path).
    MarginalOffDiagonal,
    /// Same variable including l == m; only exists to expose the noise
    /// nugget in diagnostics and tests.
    MarginalWithDiagonal,
}

impl PairKind {
    pub(crate) fn skip_same_index(self) -> bool {
        matches!(self, PairKind::MarginalOffDiagonal)
    }

    pub(crate) fn symmetric_output(self) -> bool {
        !matches!(self, PairKind::Cross)
    }
}

/// Configuration of the local-linear surface smoother.
#[derive(Clone, Copy, Debug)]
pub struct Smoother {
    pub kernel: Kernel,
    pub bandwidths: Bandwidths,
    /// Subtract a pooled local-linear mean estimate before smoothing.
    pub center: bool,
}

impl Smoother {
    pub fn new(bandwidths: Bandwidths) -> Self {
        Smoother { kernel: Kernel::Gaussian, bandwidths, center: false }
    }
}

/// Output of a whole-field smoothing run.
#[derive(Clone, Debug)]
pub struct SmoothedField {
    pub sigma: CovField,
    pub psi: Option<VarSurrogateField>,
    pub diagnostics: SmoothDiagnostics,
}

/// Nonnegative surrogate variance surfaces for the smoothed estimates.
#[derive(Clone, Debug)]
pub struct VarSurrogateField {
    field: CovField,
}

impl VarSurrogateField {
    pub(crate) fn from_field(field: CovField) -> Self {
        VarSurrogateField { field }
    }

    pub fn field(&self) -> &CovField {
        &self.field
    }

    pub fn p(&self) -> usize {
        self.field.p()
    }

    pub fn entry(&self, j: usize, k: usize) -> &Surface {
        self.field.entry(j, k)
    }
}

/// Per-subject channel views feeding one smoothing pair.
struct PairInput<'a> {
    tables_a: &'a [AxisTables],
    tables_b: &'a [AxisTables],
    z_a: Vec<&'a [f64]>,
    z_b: Vec<&'a [f64]>,
}

fn collect_points(r: usize, upper_only: bool) -> Vec<(usize, usize)> {
    if upper_only {
        (0..r).flat_map(|r1| (r1..r).map(move |r2| (r1, r2))).collect()
    } else {
        (0..r).flat_map(|r1| (0..r).map(move |r2| (r1, r2))).collect()
    }
}

/// Pooled kernel moments at the requested output points.
///
/// Point-major: subjects accumulate in ascending order at every point, which
/// pins the floating-point summation order shared with the binned path.
fn s_moments(
    tables_a: &[AxisTables],
    tables_b: &[AxisTables],
    r: usize,
    skip_same_index: bool,
    upper_only: bool,
) -> (Vec<[f64; 6]>, u64) {
    let points = collect_points(r, upper_only);
    let results: Vec<([f64; 6], u64)> = points
        .par_iter()
        .map(|&(r1, r2)| {
            let mut cell = [0.0; 6];
            let mut terms = 0u64;
            for (ta, tb) in tables_a.iter().zip(tables_b) {
                let la = ta.l;
                let lb = tb.l;
                let a0 = &ta.k0[r1 * la..(r1 + 1) * la];
                let a1 = &ta.k1[r1 * la..(r1 + 1) * la];
                let a2 = &ta.k2[r1 * la..(r1 + 1) * la];
                let b0 = &tb.k0[r2 * lb..(r2 + 1) * lb];
                let b1 = &tb.k1[r2 * lb..(r2 + 1) * lb];
                let b2 = &tb.k2[r2 * lb..(r2 + 1) * lb];
                for l in 0..la {
                    let ka0 = a0[l];
                    if ka0 == 0.0 {
                        continue;
                    }
                    let ka1 = a1[l];
                    let ka2 = a2[l];
                    for m in 0..lb {
                        if skip_same_index && l == m {
                            continue;
                        }
                        let kb0 = b0[m];
                        if kb0 == 0.0 {
                            continue;
                        }
                        cell[0] += ka0 * kb0;
                        cell[1] += ka1 * kb0;
                        cell[2] += ka0 * b1[m];
                        cell[3] += ka2 * kb0;
                        cell[4] += ka0 * b2[m];
                        cell[5] += ka1 * b1[m];
                        terms += 1;
                    }
                }
            }
            (cell, terms)
        })
        .collect();
    let mut grid_cells = vec![[0.0; 6]; r * r];
    let mut total_terms = 0;
    for (&(r1, r2), (cell, terms)) in points.iter().zip(&results) {
        grid_cells[r1 * r + r2] = *cell;
        total_terms += terms;
    }
    (grid_cells, total_terms)
}

/// Smoothed surface for one pair plus the cached per-point fits needed by
/// the variance pass.
struct PairFit {
    values: Vec<f64>,
    fits: Vec<PointFit>,
    diag: PairDiagnostics,
    terms: u64,
}

fn smooth_pair(
    input: &PairInput<'_>,
    s_cells: &[[f64; 6]],
    r: usize,
    h: f64,
    kind: PairKind,
) -> PairFit {
    let upper_only = kind.symmetric_output();
    let skip = kind.skip_same_index();
    let points = collect_points(r, upper_only);
    let fitted: Vec<(f64, PointFit, bool, u64)> = points
        .par_iter()
        .map(|&(r1, r2)| {
            let mut t00 = 0.0;
            let mut t10 = 0.0;
            let mut t01 = 0.0;
            let mut terms = 0u64;
            for (s, (ta, tb)) in input.tables_a.iter().zip(input.tables_b).enumerate() {
                let la = ta.l;
                let lb = tb.l;
                let a0 = &ta.k0[r1 * la..(r1 + 1) * la];
                let a1 = &ta.k1[r1 * la..(r1 + 1) * la];
                let b0 = &tb.k0[r2 * lb..(r2 + 1) * lb];
                let b1 = &tb.k1[r2 * lb..(r2 + 1) * lb];
                let za = input.z_a[s];
                let zb = input.z_b[s];
                for l in 0..la {
                    let ka0 = a0[l];
                    if ka0 == 0.0 {
                        continue;
                    }
                    let ka1 = a1[l];
                    let zl = za[l];
                    for m in 0..lb {
                        if skip && l == m {
                            continue;
                        }
                        let kb0 = b0[m];
                        if kb0 == 0.0 {
                            continue;
                        }
                        let zz = zl * zb[m];
                        t00 += (ka0 * kb0) * zz;
                        t10 += (ka1 * kb0) * zz;
                        t01 += (ka0 * b1[m]) * zz;
                        terms += 1;
                    }
                }
            }
            let (fit, fell_back) = resolve_fit(&s_cells[r1 * r + r2], h);
            (combine_fit(fit, t00, t10, t01), fit, fell_back, terms)
        })
        .collect();

    let mut values = vec![f64::NAN; r * r];
    let mut fits = vec![PointFit::Missing; r * r];
    let mut diag = PairDiagnostics::default();
    let mut terms = 0;
    for (&(r1, r2), (v, fit, fell_back, t)) in points.iter().zip(&fitted) {
        values[r1 * r + r2] = *v;
        fits[r1 * r + r2] = *fit;
        if *fell_back {
            diag.singular_fallbacks += 1;
        }
        terms += t;
        if upper_only && r2 > r1 {
            values[r2 * r + r1] = *v;
            fits[r2 * r + r1] = *fit;
        }
    }
    diag.missing_points = fill_missing(&mut values, r, r);
    PairFit { values, fits, diag, terms }
}

/// Variance surrogate for one pair given its smoothed surface and fits.
fn variance_pair(
    input: &PairInput<'_>,
    sigma_values: &[f64],
    fits: &[PointFit],
    r: usize,
    i_rate: f64,
    kind: PairKind,
) -> (Vec<f64>, u64, u64) {
    let upper_only = kind.symmetric_output();
    let skip = kind.skip_same_index();
    let points = collect_points(r, upper_only);
    let computed: Vec<(f64, u64)> = points
        .par_iter()
        .map(|&(r1, r2)| {
            let sigma = sigma_values[r1 * r + r2];
            let fit = fits[r1 * r + r2];
            let mut acc = 0.0;
            let mut terms = 0u64;
            for (s, (ta, tb)) in input.tables_a.iter().zip(input.tables_b).enumerate() {
                let la = ta.l;
                let lb = tb.l;
                let a0 = &ta.k0[r1 * la..(r1 + 1) * la];
                let a1 = &ta.k1[r1 * la..(r1 + 1) * la];
                let b0 = &tb.k0[r2 * lb..(r2 + 1) * lb];
                let b1 = &tb.k1[r2 * lb..(r2 + 1) * lb];
                let za = input.z_a[s];
                let zb = input.z_b[s];
                let mut v00 = 0.0;
                let mut v10 = 0.0;
                let mut v01 = 0.0;
                for l in 0..la {
                    let ka0 = a0[l];
                    if ka0 == 0.0 {
                        continue;
                    }
                    let ka1 = a1[l];
                    let zl = za[l];
                    for m in 0..lb {
                        if skip && l == m {
                            continue;
                        }
                        let kb0 = b0[m];
                        if kb0 == 0.0 {
                            continue;
                        }
                        let resid = zl * zb[m] - sigma;
                        v00 += (ka0 * kb0) * resid;
                        v10 += (ka1 * kb0) * resid;
                        v01 += (ka0 * b1[m]) * resid;
                        terms += 1;
                    }
                }
                let c = combine_fit(fit, v00, v10, v01);
                if c.is_finite() {
                    acc += c * c;
                }
            }
            (i_rate * acc, terms)
        })
        .collect();

    let mut values = vec![f64::NAN; r * r];
    let mut terms = 0;
    for (&(r1, r2), (v, t)) in points.iter().zip(&computed) {
        values[r1 * r + r2] = *v;
        terms += t;
        if upper_only && r2 > r1 {
            values[r2 * r + r1] = *v;
        }
    }
    let missing = fill_missing(&mut values, r, r);
    (values, terms, missing)
}

/// Tables for every subject channel of one variable at a bandwidth.
fn tables_for_variable(
    data: &PartialSample,
    j: usize,
    out: &[f64],
    h: f64,
    kernel: Kernel,
) -> (Vec<AxisTables>, u64) {
    let mut evals = 0;
    let tables = (0..data.n())
        .map(|i| {
            let (locs, _) = data.subject_channel(i, j).unwrap();
            let (t, e) = build_axis_tables(locs, out, h, kernel);
            evals += e;
            t
        })
        .collect();
    (tables, evals)
}

fn z_views(data: &PartialSample, j: usize) -> Vec<&[f64]> {
    (0..data.n()).map(|i| data.subject_channel(i, j).unwrap().1).collect()
}

impl Smoother {
    /// Cross-covariance surface of variables j != k.
    pub fn cross_cov(
        &self,
        data: &PartialSample,
        j: usize,
        k: usize,
        out_grid: &Arc<Grid>,
    ) -> Result<Surface> {
        if j == k {
            return Err(Error::Config("cross covariance needs two distinct variables".into()));
        }
        let data = self.maybe_centered(data)?;
        let (surface, _, _) = self.pair_surface(&data, j, k, out_grid, PairKind::Cross)?;
        Ok(surface)
    }

    /// Marginal covariance surface of variable j from l != m pairs.
    pub fn marginal_cov(
        &self,
        data: &PartialSample,
        j: usize,
        out_grid: &Arc<Grid>,
    ) -> Result<Surface> {
        let data = self.maybe_centered(data)?;
        let (surface, _, _) =
            self.pair_surface(&data, j, j, out_grid, PairKind::MarginalOffDiagonal)?;
        Ok(surface)
    }

    /// Marginal covariance including same-index pairs; retains the noise
    /// nugget on the diagonal.
    pub fn marginal_cov_with_diagonal(
        &self,
        data: &PartialSample,
        j: usize,
        out_grid: &Arc<Grid>,
    ) -> Result<Surface> {
        let data = self.maybe_centered(data)?;
        let (surface, _, _) =
            self.pair_surface(&data, j, j, out_grid, PairKind::MarginalWithDiagonal)?;
        Ok(surface)
    }

    /// Variance surrogate for the smoothed (j, k) entry.
    pub fn variance_surrogate(
        &self,
        data: &PartialSample,
        j: usize,
        k: usize,
        sigma_jk: &Surface,
        out_grid: &Arc<Grid>,
    ) -> Result<Surface> {
        let r = out_grid.len();
        if sigma_jk.rows() != r || sigma_jk.cols() != r {
            return Err(Error::ShapeMismatch("smoothed surface is not on the output grid".into()));
        }
        let data = self.maybe_centered(data)?;
        let kind = if j == k { PairKind::MarginalOffDiagonal } else { PairKind::Cross };
        let h = self.pair_bandwidth(kind);
        let out = out_grid.points();
        let (tables_a, _) = tables_for_variable(&data, j, out, h, self.kernel);
        let tables_b_store;
        let tables_b: &[AxisTables] = if j == k {
            &tables_a
        } else {
            let (t, _) = tables_for_variable(&data, k, out, h, self.kernel);
            tables_b_store = t;
            &tables_b_store
        };
        let input = PairInput {
            tables_a: &tables_a,
            tables_b,
            z_a: z_views(&data, j),
            z_b: z_views(&data, k),
        };
        // fits must correspond to the fit that produced sigma
        let (s_cells, _) =
            s_moments(&tables_a, tables_b, r, kind.skip_same_index(), kind.symmetric_output());
        let mut fits = vec![PointFit::Missing; r * r];
        for (r1, r2) in collect_points(r, kind.symmetric_output()) {
            let (fit, _) = resolve_fit(&s_cells[r1 * r + r2], h);
            fits[r1 * r + r2] = fit;
            if kind.symmetric_output() && r2 > r1 {
                fits[r2 * r + r1] = fit;
            }
        }
        let i_rate = rate_factor(&data.counts(j), &data.counts(k), h);
        let (values, _, _) = variance_pair(&input, sigma_jk.values(), &fits, r, i_rate, kind);
        Surface::new(values, out_grid.clone(), out_grid.clone())
    }

    fn pair_bandwidth(&self, kind: PairKind) -> f64 {
        match kind {
            PairKind::Cross => self.bandwidths.h_cross,
            _ => self.bandwidths.h_marginal,
        }
    }

    fn pair_surface(
        &self,
        data: &PartialSample,
        j: usize,
        k: usize,
        out_grid: &Arc<Grid>,
        kind: PairKind,
    ) -> Result<(Surface, Vec<PointFit>, PairDiagnostics)> {
        if j >= data.p() || k >= data.p() {
            return Err(Error::ShapeMismatch("variable index out of range".into()));
        }
        if kind.skip_same_index() {
            let has_pairs = data.counts(j).iter().any(|&l| l >= 2);
            if !has_pairs {
                return Err(Error::InsufficientPairs(
                    "marginal estimation needs a subject with at least 2 observations".into(),
                ));
            }
        }
        let h = self.pair_bandwidth(kind);
        let out = out_grid.points();
        let r = out.len();
        let (tables_a, _) = tables_for_variable(data, j, out, h, self.kernel);
        let tables_b_store;
        let tables_b: &[AxisTables] = if j == k {
            &tables_a
        } else {
            let (t, _) = tables_for_variable(data, k, out, h, self.kernel);
            tables_b_store = t;
            &tables_b_store
        };
        let (s_cells, _) =
            s_moments(&tables_a, tables_b, r, kind.skip_same_index(), kind.symmetric_output());
        let input = PairInput {
            tables_a: &tables_a,
            tables_b,
            z_a: z_views(data, j),
            z_b: z_views(data, k),
        };
        let fit = smooth_pair(&input, &s_cells, r, h, kind);
        let surface = Surface::new(fit.values, out_grid.clone(), out_grid.clone())?;
        Ok((surface, fit.fits, fit.diag))
    }

    /// Smooth the whole p x p field, optionally with variance surrogates.
    ///
    /// In the simplified layout the kernel tables and pooled moments are
    /// shared across pairs, which keeps the kernel-evaluation count at one
    /// table entry per observation and output point.
    pub fn cov_field(
        &self,
        data: &PartialSample,
        out_grid: &Arc<Grid>,
        compute_variance: bool,
    ) -> Result<SmoothedField> {
        let data = self.maybe_centered(data)?;
        let data = &data;
        let p = data.p();
        let out = out_grid.points();
        let r = out.len();
        let mut counters = OpCounters::default();

        let hc = self.bandwidths.h_cross;
        let hm = self.bandwidths.h_marginal;

        if data.is_simplified() {
            // one set of location tables serves every variable
            let (cross_tables, evals) = tables_for_variable(data, 0, out, hc, self.kernel);
            counters.kernel_evals += evals;
            let (marg_tables, marg_evals) = if hm == hc {
                (None, 0)
            } else {
                let (t, e) = tables_for_variable(data, 0, out, hm, self.kernel);
                (Some(t), e)
            };
            counters.kernel_evals += marg_evals;
            let marg_tables_ref = marg_tables.as_deref().unwrap_or(&cross_tables);

            let (s_cross, terms_sc) = s_moments(&cross_tables, &cross_tables, r, false, false);
            let (s_marg, terms_sm) = s_moments(marg_tables_ref, marg_tables_ref, r, true, true);
            counters.term_ops += terms_sc + terms_sm;

            let counts = data.counts(0);
            let pairs: Vec<(usize, usize)> = CovField::upper_indices(p).collect();
            let results: Vec<(Surface, Option<Surface>, PairDiagnostics, u64)> = pairs
                .iter()
                .map(|&(j, k)| {
                    let kind =
                        if j == k { PairKind::MarginalOffDiagonal } else { PairKind::Cross };
                    let (tables, s_cells, h): (&[AxisTables], &[[f64; 6]], f64) = if j == k {
                        (marg_tables_ref, &s_marg, hm)
                    } else {
                        (&cross_tables, &s_cross, hc)
                    };
                    let input = PairInput {
                        tables_a: tables,
                        tables_b: tables,
                        z_a: z_views(data, j),
                        z_b: z_views(data, k),
                    };
                    let fit = smooth_pair(&input, s_cells, r, h, kind);
                    let mut terms = fit.terms;
                    let psi = if compute_variance {
                        let i_rate = rate_factor(&counts, &counts, h);
                        let (values, t, _) =
                            variance_pair(&input, &fit.values, &fit.fits, r, i_rate, kind);
                        terms += t;
                        Some(Surface::new(values, out_grid.clone(), out_grid.clone()).unwrap())
                    } else {
                        None
                    };
                    let surface =
                        Surface::new(fit.values, out_grid.clone(), out_grid.clone()).unwrap();
                    (surface, psi, fit.diag, terms)
                })
                .collect();
            self.assemble_field(p, out_grid, pairs, results, counters, hc, hm)
        } else {
            // general layout: per-variable tables, per-pair moments
            let mut all_tables = Vec::with_capacity(p);
            for j in 0..p {
                let (t, e) = tables_for_variable(data, j, out, hc, self.kernel);
                counters.kernel_evals += e;
                all_tables.push(t);
            }
            let marg_tables: Option<Vec<Vec<AxisTables>>> = if hm == hc {
                None
            } else {
                let mut v = Vec::with_capacity(p);
                for j in 0..p {
                    let (t, e) = tables_for_variable(data, j, out, hm, self.kernel);
                    counters.kernel_evals += e;
                    v.push(t);
                }
                Some(v)
            };

            let pairs: Vec<(usize, usize)> = CovField::upper_indices(p).collect();
            let results: Vec<(Surface, Option<Surface>, PairDiagnostics, u64)> = pairs
                .iter()
                .map(|&(j, k)| {
                    let kind =
                        if j == k { PairKind::MarginalOffDiagonal } else { PairKind::Cross };
                    let h = self.pair_bandwidth(kind);
                    let ta: &[AxisTables] = if j == k {
                        marg_tables.as_ref().map(|m| &m[j][..]).unwrap_or(&all_tables[j])
                    } else {
                        &all_tables[j]
                    };
                    let tb: &[AxisTables] = if j == k { ta } else { &all_tables[k] };
                    let (s_cells, s_terms) =
                        s_moments(ta, tb, r, kind.skip_same_index(), kind.symmetric_output());
                    let input = PairInput {
                        tables_a: ta,
                        tables_b: tb,
                        z_a: z_views(data, j),
                        z_b: z_views(data, k),
                    };
                    let fit = smooth_pair(&input, &s_cells, r, h, kind);
                    let mut terms = fit.terms + s_terms;
                    let psi = if compute_variance {
                        let i_rate = rate_factor(&data.counts(j), &data.counts(k), h);
                        let (values, t, _) =
                            variance_pair(&input, &fit.values, &fit.fits, r, i_rate, kind);
                        terms += t;
                        Some(Surface::new(values, out_grid.clone(), out_grid.clone()).unwrap())
                    } else {
                        None
                    };
                    let surface =
                        Surface::new(fit.values, out_grid.clone(), out_grid.clone()).unwrap();
                    (surface, psi, fit.diag, terms)
                })
                .collect();
            self.assemble_field(p, out_grid, pairs, results, counters, hc, hm)
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble_field(
        &self,
        p: usize,
        out_grid: &Arc<Grid>,
        pairs: Vec<(usize, usize)>,
        results: Vec<(Surface, Option<Surface>, PairDiagnostics, u64)>,
        mut counters: OpCounters,
        hc: f64,
        hm: f64,
    ) -> Result<SmoothedField> {
        let mut sigma_upper = Vec::with_capacity(results.len());
        let mut psi_upper = Vec::with_capacity(results.len());
        let mut pair_diags = Vec::with_capacity(results.len());
        let mut any_psi = false;
        for (&(j, k), (sigma, psi, diag, terms)) in pairs.iter().zip(results) {
            counters.term_ops += terms;
            pair_diags.push((j, k, diag));
            sigma_upper.push(sigma);
            if let Some(ps) = psi {
                any_psi = true;
                psi_upper.push(ps);
            }
        }
        let sigma = CovField::from_upper(p, out_grid.clone(), sigma_upper)?;
        let psi = if any_psi {
            Some(VarSurrogateField::from_field(CovField::from_upper(
                p,
                out_grid.clone(),
                psi_upper,
            )?))
        } else {
            None
        };
        Ok(SmoothedField {
            sigma,
            psi,
            diagnostics: SmoothDiagnostics {
                counters,
                h_cross: hc,
                h_marginal: hm,
                pairs: pair_diags,
            },
        })
    }

    fn maybe_centered(&self, data: &PartialSample) -> Result<PartialSample> {
        if self.center {
            center_partial(data, self.bandwidths.h_marginal, self.kernel)
        } else {
            Ok(data.clone())
        }
    }

    /// Reconstruct individual curves by per-channel local-linear smoothing.
    pub fn presmooth(&self, data: &PartialSample, out_grid: &Arc<Grid>) -> Result<DenseSample> {
        presmooth_curves(data, self.bandwidths.h_presmooth, out_grid, self.kernel)
    }
}

// ---------------------------------------------------------------------------
// spec-shaped free functions

/// Cross-covariance surface via a Gaussian-kernel smoother at bandwidth h_c.
pub fn lls_cross_cov(
    data: &PartialSample,
    j: usize,
    k: usize,
    h_c: f64,
    out_grid: &Arc<Grid>,
) -> Result<Surface> {
    let bw = Bandwidths::new(h_c, h_c, h_c)?;
    Smoother::new(bw).cross_cov(data, j, k, out_grid)
}

/// Marginal covariance surface from l != m pairs at bandwidth h_m.
pub fn lls_marginal_cov(
    data: &PartialSample,
    j: usize,
    h_m: f64,
    out_grid: &Arc<Grid>,
) -> Result<Surface> {
    let bw = Bandwidths::new(h_m, h_m, h_m)?;
    Smoother::new(bw).marginal_cov(data, j, out_grid)
}

/// Variance surrogate for a smoothed entry at bandwidth h_c.
pub fn variance_surrogate(
    data: &PartialSample,
    j: usize,
    k: usize,
    sigma_jk: &Surface,
    h_c: f64,
    out_grid: &Arc<Grid>,
) -> Result<Surface> {
    let bw = Bandwidths::new(h_c, h_c, h_c)?;
    Smoother::new(bw).variance_surrogate(data, j, k, sigma_jk, out_grid)
}

/// Adaptive thresholding of a smoothed field standardized by its variance
/// surrogate.
pub fn smoothed_adaptive_estimate(
    sigma: &CovField,
    psi: &VarSurrogateField,
    lambda: f64,
    opts: ThresholdOptions,
) -> Result<ThresholdedEstimate> {
    threshold_field(sigma, Some(psi.field()), lambda, opts)
}

/// Universal thresholding of a smoothed field.
pub fn smoothed_universal_estimate(
    sigma: &CovField,
    lambda: f64,
    opts: ThresholdOptions,
) -> Result<ThresholdedEstimate> {
    threshold_field(sigma, None, lambda, opts)
}

// ---------------------------------------------------------------------------
// pre-smoothing

/// Reconstruct each curve by a 1-D local-linear fit and evaluate it on the
/// output grid. Near-singular windows fall back to a local-constant value;
/// windows with no kernel mass take the nearest reconstructed value.
pub fn presmooth_curves(
    data: &PartialSample,
    h_x: f64,
    out_grid: &Arc<Grid>,
    kernel: Kernel,
) -> Result<DenseSample> {
    if !(h_x > 0.0) {
        return Err(Error::Config("pre-smoothing bandwidth must be positive".into()));
    }
    let n = data.n();
    let p = data.p();
    let out = out_grid.points();
    let r = out.len();
    let mut values = vec![0.0; n * p * r];
    let slots: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..p).map(move |j| (i, j))).collect();
    let rows: Vec<Vec<f64>> = slots
        .par_iter()
        .map(|&(i, j)| {
            let (locs, z) = data.subject_channel(i, j).unwrap();
            presmooth_channel(locs, z, out, h_x, kernel)
        })
        .collect();
    for (&(i, j), row) in slots.iter().zip(rows) {
        values[(i * p + j) * r..(i * p + j + 1) * r].copy_from_slice(&row);
    }
    DenseSample::new(n, p, out_grid.clone(), values)
}

fn presmooth_channel(locs: &[f64], z: &[f64], out: &[f64], h: f64, kernel: Kernel) -> Vec<f64> {
    let mut row: Vec<f64> = out
        .iter()
        .map(|&u| {
            let mut s0 = 0.0;
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            let mut t0 = 0.0;
            let mut t1 = 0.0;
            for (&loc, &zv) in locs.iter().zip(z) {
                let k0 = kernel.eval_scaled(h, loc - u);
                if k0 == 0.0 {
                    continue;
                }
                let du = loc - u;
                let k1 = k0 * du;
                s0 += k0;
                s1 += k1;
                s2 += k1 * du;
                t0 += k0 * zv;
                t1 += k1 * zv;
            }
            if s0 == 0.0 {
                return f64::NAN;
            }
            let den = s2 * s0 - s1 * s1;
            if den.abs() < 1e-12 * (s0 * h) * (s0 * h) {
                t0 / s0
            } else {
                (s2 * t0 - s1 * t1) / den
            }
        })
        .collect();
    // fill empty windows from the nearest reconstructed neighbour
    if row.iter().any(|v| v.is_nan()) {
        let filled: Vec<f64> = (0..row.len())
            .map(|idx| {
                if !row[idx].is_nan() {
                    return row[idx];
                }
                let mut dist = 1;
                loop {
                    let lo = idx.checked_sub(dist).map(|q| row[q]).filter(|v| !v.is_nan());
                    let hi = row.get(idx + dist).copied().filter(|v| !v.is_nan());
                    match (lo, hi) {
                        (Some(a), Some(b)) => return 0.5 * (a + b),
                        (Some(a), None) => return a,
                        (None, Some(b)) => return b,
                        (None, None) => {
                            if dist > row.len() {
                                return 0.0;
                            }
                            dist += 1;
                        }
                    }
                }
            })
            .collect();
        row = filled;
    }
    row
}

// ---------------------------------------------------------------------------
// mean centering

/// Subtract a pooled 1-D local-linear mean estimate per variable, evaluated
/// at the observation locations.
pub fn center_partial(data: &PartialSample, h: f64, kernel: Kernel) -> Result<PartialSample> {
    let n = data.n();
    let p = data.p();
    let mut pooled: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); p];
    for j in 0..p {
        for i in 0..n {
            let (locs, z) = data.subject_channel(i, j)?;
            pooled[j].0.extend_from_slice(locs);
            pooled[j].1.extend_from_slice(z);
        }
    }
    let eval_mean = |j: usize, u: f64| -> f64 {
        let (locs, z) = &pooled[j];
        presmooth_channel(locs, z, &[u], h, kernel)[0]
    };
    match data.layout() {
        PartialLayout::Simplified(blocks) => {
            let new_blocks: Vec<SubjectBlock> = blocks
                .par_iter()
                .map(|b| {
                    let l = b.len();
                    let mut values = vec![0.0; p * l];
                    for j in 0..p {
                        let z = b.channel(j);
                        for (t, &u) in b.locations().iter().enumerate() {
                            values[j * l + t] = z[t] - eval_mean(j, u);
                        }
                    }
                    SubjectBlock::new(b.locations().to_vec(), values, p).unwrap()
                })
                .collect();
            PartialSample::simplified(p, new_blocks)
        }
        PartialLayout::General(subjects) => {
            let new_subjects: Vec<Vec<Channel>> = subjects
                .par_iter()
                .map(|chs| {
                    chs.iter()
                        .enumerate()
                        .map(|(j, ch)| {
                            let values: Vec<f64> = ch
                                .locations()
                                .iter()
                                .zip(ch.values())
                                .map(|(&u, &z)| z - eval_mean(j, u))
                                .collect();
                            Channel::new(ch.locations().to_vec(), values).unwrap()
                        })
                        .collect()
                })
                .collect();
            PartialSample::general(p, new_subjects)
        }
    }
}
