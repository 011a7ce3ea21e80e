//! Ensemble verification: latitude weights, RMSE, spread, SSR, CRPS, and
//! Wasserstein-1 estimators.
//!
//! Ensemble slices are `(N, K, C, H, W)` tensors (initialization, member,
//! field); truths are `(N, C, H, W)`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::diffkit::Tensor;
use crate::error::{invalid, shape_err, Error, Result};

/// Row weights `cos θ_i / mean cos θ`, broadcast across a row of `width` cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatWeights {
    rows: Vec<f64>,
    width: usize,
}

pub fn latitude_weights(latitudes: &[f64], width: usize) -> Result<LatWeights> {
    if latitudes.is_empty() || width == 0 {
        return invalid("latitude weights need at least one row and one column");
    }
    if let Some(bad) = latitudes.iter().find(|l| !(**l > -90.0 && **l <= 90.0)) {
        return invalid(format!("latitude {bad} outside (−90, 90]"));
    }
    let cos: Vec<f64> = latitudes.iter().map(|l| l.to_radians().cos().max(0.0)).collect();
    let mean = cos.iter().sum::<f64>() / cos.len() as f64;
    if !(mean > 1e-12) {
        return invalid("latitude weights: all cosines vanish");
    }
    Ok(LatWeights {
        rows: cos.iter().map(|c| c / mean).collect(),
        width,
    })
}

impl LatWeights {
    pub fn uniform(h: usize, w: usize) -> Self {
        LatWeights {
            rows: vec![1.0; h],
            width: w,
        }
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> usize {
        self.rows.len() * self.width
    }

    /// Weight of flat cell index `i` in an (H, W) plane.
    pub fn at(&self, i: usize) -> f64 {
        self.rows[i / self.width]
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = (0..self.cells()).map(|i| self.at(i)).collect();
        Tensor::new(vec![self.rows.len(), self.width], data).expect("weights shape")
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        let n = shape.len();
        if n < 2 || shape[n - 2] != self.rows.len() || shape[n - 1] != self.width {
            return shape_err("latitude weights", &[self.rows.len(), self.width], shape);
        }
        Ok(())
    }

    /// `(1/M) Σ w_i x_i` over the trailing (H, W) plane, averaged over every
    /// leading axis.
    pub fn weighted_mean(&self, x: &Tensor) -> Result<f64> {
        self.check(x.shape())?;
        let planes: Vec<f64> = x.data().chunks(self.cells()).map(|p| self.plane_mean(p)).collect();
        Ok(planes.iter().sum::<f64>() / planes.len() as f64)
    }

    fn plane_mean(&self, p: &[f64]) -> f64 {
        p.iter().enumerate().map(|(i, v)| self.at(i) * v).sum::<f64>() / p.len() as f64
    }
}

/// Dispersion coefficient of the CRPS estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrpsVariant {
    /// `1/(2K²)`
    Paper,
    /// `1/(2K(K−1))`
    Fair,
}

impl CrpsVariant {
    pub fn coefficient(self, k: usize) -> Result<f64> {
        let k = k as f64;
        match self {
            CrpsVariant::Paper => Ok(1.0 / (2.0 * k * k)),
            CrpsVariant::Fair if k < 2.0 => invalid("fair CRPS needs at least two members"),
            CrpsVariant::Fair => Ok(1.0 / (2.0 * k * (k - 1.0))),
        }
    }
}

impl std::str::FromStr for CrpsVariant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "paper" => Ok(CrpsVariant::Paper),
            "fair" => Ok(CrpsVariant::Fair),
            other => Err(format!("unknown CRPS variant `{other}` (paper | fair)")),
        }
    }
}

impl std::fmt::Display for CrpsVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CrpsVariant::Paper => "paper",
            CrpsVariant::Fair => "fair",
        })
    }
}

struct Layout {
    n: usize,
    k: usize,
    field: usize,
}

fn layout(ens: &Tensor, truth: Option<&Tensor>, w: &LatWeights) -> Result<Layout> {
    let s = ens.shape();
    if s.len() != 5 {
        return invalid(format!("ensemble slice must be (N, K, C, H, W), got {s:?}"));
    }
    w.check(s)?;
    if let Some(y) = truth {
        let want = [s[0], s[2], s[3], s[4]];
        if y.shape() != want {
            return shape_err("ensemble vs truth", &want, y.shape());
        }
    }
    if s[0] == 0 || s[1] == 0 {
        return invalid("ensemble slice has no initializations or no members");
    }
    Ok(Layout {
        n: s[0],
        k: s[1],
        field: s[2] * s[3] * s[4],
    })
}

/// Runs `per_cell(members, truth_value_or_nan, weight)` for every cell of
/// initialization `n` and returns the weighted cell mean.
fn per_init(
    ens: &Tensor,
    truth: Option<&Tensor>,
    w: &LatWeights,
    l: &Layout,
    n: usize,
    per_cell: &dyn Fn(&[f64], f64) -> f64,
) -> f64 {
    let d = ens.data();
    let mut members = vec![0.0; l.k];
    let mut acc = 0.0;
    for i in 0..l.field {
        for (k, m) in members.iter_mut().enumerate() {
            *m = d[(n * l.k + k) * l.field + i];
        }
        let y = truth.map_or(f64::NAN, |t| t.data()[n * l.field + i]);
        acc += w.at(i % w.cells()) * per_cell(&members, y);
    }
    acc / l.field as f64
}

/// Mean over initializations of the weighted RMSE of the ensemble mean.
pub fn rmse(ens: &Tensor, truth: &Tensor, w: &LatWeights) -> Result<f64> {
    let l = layout(ens, Some(truth), w)?;
    let f = |m: &[f64], y: f64| (m.iter().sum::<f64>() / m.len() as f64 - y).powi(2);
    Ok((0..l.n).map(|n| per_init(ens, Some(truth), w, &l, n, &f).sqrt()).sum::<f64>() / l.n as f64)
}

/// Mean over initializations of the root weighted-mean unbiased ensemble variance.
pub fn spread(ens: &Tensor, w: &LatWeights) -> Result<f64> {
    let l = layout(ens, None, w)?;
    if l.k < 2 {
        return invalid("spread needs at least two members");
    }
    let f = |m: &[f64], _| {
        let k = m.len() as f64;
        let mean = m.iter().sum::<f64>() / k;
        m.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)
    };
    Ok((0..l.n).map(|n| per_init(ens, None, w, &l, n, &f).sqrt()).sum::<f64>() / l.n as f64)
}

/// `sqrt((K+1)/K)·spread/rmse`; undefined when `rmse = 0`.
pub fn ssr(spread: f64, rmse: f64, k: usize) -> Result<f64> {
    if rmse == 0.0 {
        return Err(Error::InvalidArgument("SSR undefined: rmse is zero".into()));
    }
    if k == 0 || !(rmse > 0.0) {
        return invalid(format!("SSR needs K ≥ 1 and rmse > 0, got K = {k}, rmse = {rmse}"));
    }
    Ok(((k as f64 + 1.0) / k as f64).sqrt() * spread / rmse)
}

/// `Σ_k Σ_k' |x_k − x_k'|` via the sorted-rank identity.
pub fn pairwise_abs_sum(members: &[f64]) -> f64 {
    let mut s = members.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len() as f64;
    2.0 * s.iter().enumerate().map(|(i, x)| (2.0 * i as f64 - k + 1.0) * x).sum::<f64>()
}

/// Single-cell empirical CRPS.
pub fn crps_cell(members: &[f64], y: f64, variant: CrpsVariant) -> Result<f64> {
    if members.is_empty() {
        return invalid("CRPS needs at least one member");
    }
    let c = variant.coefficient(members.len())?;
    let skill = members.iter().map(|x| (x - y).abs()).sum::<f64>() / members.len() as f64;
    Ok(skill - c * pairwise_abs_sum(members))
}

/// Weighted grid-mean CRPS averaged over initializations.
pub fn crps_eval(ens: &Tensor, truth: &Tensor, w: &LatWeights, variant: CrpsVariant) -> Result<f64> {
    let l = layout(ens, Some(truth), w)?;
    let c = variant.coefficient(l.k)?;
    let f = |m: &[f64], y: f64| m.iter().map(|x| (x - y).abs()).sum::<f64>() / m.len() as f64 - c * pairwise_abs_sum(m);
    Ok((0..l.n).map(|n| per_init(ens, Some(truth), w, &l, n, &f)).sum::<f64>() / l.n as f64)
}

fn sorted(x: &[f64]) -> Vec<f64> {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Exact W1 between two empirical laws on the line.
///
/// Equal sizes reduce to the mean absolute difference of order statistics.
/// Otherwise both step quantile functions are integrated on the merged
/// breakpoint grid, which coincides with evaluating them on the lcm grid.
pub fn wasserstein1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return invalid("wasserstein1_1d needs nonempty samples");
    }
    let (sa, sb) = (sorted(a), sorted(b));
    if sa.len() == sb.len() {
        return Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / sa.len() as f64);
    }
    let (n, m) = (sa.len() as u128, sb.len() as u128);
    // breakpoints i/n and j/m compared as i·m vs j·n
    let (mut i, mut j) = (0u128, 0u128);
    let mut prev = 0u128;
    let total = n * m;
    let mut acc = 0.0;
    while i < n && j < m {
        let next = ((i + 1) * m).min((j + 1) * n);
        acc += (next - prev) as f64 * (sa[i as usize] - sb[j as usize]).abs();
        prev = next;
        if (i + 1) * m == next {
            i += 1;
        }
        if (j + 1) * n == next {
            j += 1;
        }
    }
    Ok(acc / total as f64)
}

/// Weighted mean over (channel, cell) of the per-cell 1D W1 between two sample
/// sets of fields `(N_a, C, H, W)` and `(N_b, C, H, W)`. Exact for
/// product-form laws, a marginal proxy otherwise.
pub fn wasserstein1_marginal_weighted(a: &Tensor, b: &Tensor, w: &LatWeights) -> Result<f64> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 4 || sb.len() != 4 || sa[1..] != sb[1..] {
        return shape_err("wasserstein1_marginal_weighted", sa, sb);
    }
    w.check(sa)?;
    let field = sa[1] * sa[2] * sa[3];
    let mut acc = 0.0;
    for i in 0..field {
        let col_a: Vec<f64> = (0..sa[0]).map(|n| a.data()[n * field + i]).collect();
        let col_b: Vec<f64> = (0..sb[0]).map(|n| b.data()[n * field + i]).collect();
        acc += w.at(i % w.cells()) * wasserstein1_1d(&col_a, &col_b)?;
    }
    Ok(acc / field as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadMetrics {
    pub lead: usize,
    pub rmse: f64,
    pub spread: f64,
    /// `None` when rmse is zero.
    pub ssr: Option<f64>,
    pub crps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ensemble_size: usize,
    pub initializations: usize,
    pub variant: CrpsVariant,
    pub leads: Vec<LeadMetrics>,
}

impl MetricReport {
    /// Metrics at one lead from an ensemble slice and its truth.
    pub fn lead_metrics(lead: usize, ens: &Tensor, truth: &Tensor, w: &LatWeights, variant: CrpsVariant) -> Result<LeadMetrics> {
        let r = rmse(ens, truth, w)?;
        let s = spread(ens, w)?;
        let k = ens.shape()[1];
        Ok(LeadMetrics {
            lead,
            rmse: r,
            spread: s,
            ssr: ssr(s, r, k).ok(),
            crps: crps_eval(ens, truth, w, variant)?,
        })
    }

    pub fn lead(&self, lead: usize) -> Option<&LeadMetrics> {
        self.leads.iter().find(|l| l.lead == lead)
    }

    /// One row per (lead_time, metric, value), 12 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lead_time,metric,value\n");
        for l in &self.leads {
            let ssr = l.ssr.map_or_else(|| "undefined".to_string(), sig12);
            for (name, v) in [
                ("rmse", sig12(l.rmse)),
                ("spread", sig12(l.spread)),
                ("ssr", ssr),
                ("crps", sig12(l.crps)),
            ] {
                writeln!(out, "{},{},{}", l.lead, name, v).expect("write to string");
            }
        }
        out
    }
}

pub fn sig12(v: f64) -> String {
    format!("{v:.11e}")
}
