use serde::{Deserialize, Serialize};

use crate::diffkit::{RngStream, Tensor};
use crate::error::{invalid, shape_err, Error, Result};
use crate::verifmetrics::LatWeights;

/// A Markov transition law with a closed-form description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum AnalyticKernel {
    /// `x' ~ N(a·c + bias, σ²)`; `gain` has one entry or one per channel.
    AffineGaussian { gain: Vec<f64>, bias: f64, sigma: f64 },
    /// `x' = a·x + b·sin(ω·x) + σξ`, cellwise.
    ChaoticMap { a: f64, b: f64, omega: f64, sigma: f64 },
    /// One explicit step of periodic advection-diffusion with smoothed
    /// Gaussian forcing. Grid spacing is 1.
    Advection2d {
        velocity: (f64, f64),
        kappa: f64,
        forcing_std: f64,
        time_step: f64,
    },
}

impl AnalyticKernel {
    pub fn affine(a: f64, bias: f64, sigma: f64) -> Self {
        AnalyticKernel::AffineGaussian {
            gain: vec![a],
            bias,
            sigma,
        }
    }

    pub fn chaotic(a: f64, b: f64, omega: f64, sigma: f64) -> Self {
        AnalyticKernel::ChaoticMap { a, b, omega, sigma }
    }

    /// Largest stable advection-diffusion step, `0.5·min(1/|v|₁, 1/(4κ))`.
    pub fn advection_step_bound(velocity: (f64, f64), kappa: f64) -> f64 {
        let speed = velocity.0.abs() + velocity.1.abs();
        let adv = if speed > 0.0 { 1.0 / speed } else { f64::INFINITY };
        let dif = if kappa > 0.0 { 1.0 / (4.0 * kappa) } else { f64::INFINITY };
        0.5 * adv.min(dif)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AnalyticKernel::AffineGaussian { gain, bias, sigma } => {
                if gain.is_empty() || !gain.iter().all(|g| g.is_finite()) || !bias.is_finite() {
                    return invalid("affine_gaussian: gain must be nonempty and finite");
                }
                check_sigma(*sigma)
            }
            AnalyticKernel::ChaoticMap { a, b, omega, sigma } => {
                if ![a, b, omega].iter().all(|v| v.is_finite()) {
                    return invalid("chaotic_map: coefficients must be finite");
                }
                check_sigma(*sigma)
            }
            AnalyticKernel::Advection2d {
                velocity,
                kappa,
                forcing_std,
                time_step,
            } => {
                check_sigma(*forcing_std)?;
                if *kappa < 0.0 || !(*time_step > 0.0) {
                    return invalid("advection2d: need κ ≥ 0 and time_step > 0");
                }
                let bound = Self::advection_step_bound(*velocity, *kappa);
                if *time_step > bound {
                    return invalid(format!(
                        "advection2d: time_step {time_step} violates the stability bound {bound}"
                    ));
                }
                Ok(())
            }
        }
    }

    /// Noise scale of the kernel.
    pub fn sigma(&self) -> f64 {
        match self {
            AnalyticKernel::AffineGaussian { sigma, .. } | AnalyticKernel::ChaoticMap { sigma, .. } => *sigma,
            AnalyticKernel::Advection2d { forcing_std, .. } => *forcing_std,
        }
    }

    fn gain_for(gain: &[f64], channel: usize) -> f64 {
        if gain.len() == 1 {
            gain[0]
        } else {
            gain[channel]
        }
    }

    fn check_channels(&self, shape: &[usize]) -> Result<()> {
        if shape.len() < 3 {
            return invalid(format!("kernel expects (…, C, H, W) fields, got {shape:?}"));
        }
        if let AnalyticKernel::AffineGaussian { gain, .. } = self {
            let c = shape[shape.len() - 3];
            if gain.len() != 1 && gain.len() != c {
                return shape_err("affine_gaussian gain", &[c], &[gain.len()]);
            }
        }
        Ok(())
    }

    /// Conditional mean `a·c + bias` (affine world only).
    pub fn affine_mean(&self, c: &Tensor) -> Result<Tensor> {
        let AnalyticKernel::AffineGaussian { gain, bias, .. } = self else {
            return Err(Error::Unsupported("conditional mean is closed-form only for affine_gaussian".into()));
        };
        self.check_channels(c.shape())?;
        let s = c.shape();
        let (ch, cell) = (s[s.len() - 3], s[s.len() - 2] * s[s.len() - 1]);
        let data = c
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| Self::gain_for(gain, (i / cell) % ch) * x + bias)
            .collect();
        Tensor::new(s.to_vec(), data)
    }

    /// Noise-free part of the transition.
    pub fn drift(&self, c: &Tensor) -> Result<Tensor> {
        self.check_channels(c.shape())?;
        match self {
            AnalyticKernel::AffineGaussian { .. } => self.affine_mean(c),
            AnalyticKernel::ChaoticMap { a, b, omega, .. } => Ok(c.map(|x| a * x + b * (omega * x).sin())),
            AnalyticKernel::Advection2d {
                velocity,
                kappa,
                time_step,
                ..
            } => Ok(advect(c, *velocity, *kappa, *time_step)),
        }
    }

    /// One exact draw from the kernel for every field in `c`.
    pub fn sample(&self, c: &Tensor, rng: &RngStream) -> Result<(Tensor, RngStream)> {
        self.validate()?;
        let mean = self.drift(c)?;
        let (noise, next) = rng.gaussian(c.shape());
        let noise = match self {
            AnalyticKernel::Advection2d { .. } => smooth(&noise),
            _ => noise,
        };
        Ok((mean.add(&noise.scale(self.sigma()))?, next))
    }

    /// Exact W1 between the affine kernels at `c` and `c'`: the
    /// latitude-weighted mean over cells and channels of `|a|·|c − c'|`.
    pub fn w1_gap(&self, c: &Tensor, c2: &Tensor, w: &LatWeights) -> Result<f64> {
        if c.shape() != c2.shape() {
            return shape_err("kernel_w1_gap", c.shape(), c2.shape());
        }
        let diff = self.affine_mean(c)?.sub(&self.affine_mean(c2)?)?.map(f64::abs);
        w.weighted_mean(&diff)
    }

    /// `sup |∂ drift / ∂x|` for cellwise kernels.
    pub fn lipschitz(&self) -> Result<f64> {
        match self {
            AnalyticKernel::AffineGaussian { gain, .. } => Ok(gain.iter().fold(0.0f64, |m, g| m.max(g.abs()))),
            AnalyticKernel::ChaoticMap { a, b, omega, .. } => Ok(a.abs() + (b * omega).abs()),
            AnalyticKernel::Advection2d { .. } => {
                Err(Error::Unsupported("no closed-form sensitivity for advection2d".into()))
            }
        }
    }
}

fn check_sigma(s: f64) -> Result<()> {
    if !(s >= 0.0) || !s.is_finite() {
        return invalid(format!("noise scale must be finite and ≥ 0, got {s}"));
    }
    Ok(())
}

/// Applies `f(plane, h, w) -> plane` to every trailing (H, W) plane.
fn per_plane(x: &Tensor, f: impl Fn(&[f64], usize, usize) -> Vec<f64>) -> Tensor {
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let data: Vec<f64> = x.data().chunks(h * w).flat_map(|p| f(p, h, w)).collect();
    Tensor::new(s.to_vec(), data).expect("plane map preserves size")
}

fn laplacian(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |i: usize, j: usize| p[i * w + j];
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (up, dn) = ((i + h - 1) % h, (i + 1) % h);
            let (lf, rt) = ((j + w - 1) % w, (j + 1) % w);
            out[i * w + j] = at(up, j) + at(dn, j) + at(i, lf) + at(i, rt) - 4.0 * at(i, j);
        }
    }
    out
}

/// First-order upwind advection plus 5-point diffusion, periodic, spacing 1.
/// `velocity.0` moves along the longitude axis, `velocity.1` along latitude.
fn advect(x: &Tensor, velocity: (f64, f64), kappa: f64, dt: f64) -> Tensor {
    let (vx, vy) = velocity;
    per_plane(x, |p, h, w| {
        let lap = laplacian(p, h, w);
        let at = |i: usize, j: usize| p[i * w + j];
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let u = at(i, j);
                let dx = if vx >= 0.0 { u - at(i, (j + w - 1) % w) } else { at(i, (j + 1) % w) - u };
                let dy = if vy >= 0.0 { u - at((i + h - 1) % h, j) } else { at((i + 1) % h, j) - u };
                out[i * w + j] = u - dt * (vx * dx + vy * dy) + dt * kappa * lap[i * w + j];
            }
        }
        out
    })
}

/// One diffusion pass with coefficient 1/8.
fn smooth(x: &Tensor) -> Tensor {
    per_plane(x, |p, h, w| {
        let lap = laplacian(p, h, w);
        p.iter().zip(&lap).map(|(v, l)| v + 0.125 * l).collect()
    })
}
