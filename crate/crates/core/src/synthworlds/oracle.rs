use crate::diffkit::{Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::transport::{per_batch, VelocityField};

use super::AnalyticKernel;

/// Exact average velocity of the marginal probability-flow path towards
/// `N(a·c + bias, σ²)`.
///
/// Along the path the marginal at time `s` is `N((1−s)m, S(s)²)` with
/// `S(s) = sqrt((1−s)²σ² + s²)`, and the flow map from `t` to `r` is affine:
/// `z_r = μ_r + (S(r)/S(t))(z − μ_t)`. At `r = t` the instantaneous velocity
/// is returned.
#[derive(Clone, Debug)]
pub struct AffineOracle {
    gain: Vec<f64>,
    bias: f64,
    sigma: f64,
}

impl AffineOracle {
    pub fn new(kernel: &AnalyticKernel) -> Result<Self> {
        kernel.validate()?;
        match kernel {
            AnalyticKernel::AffineGaussian { gain, bias, sigma } => Ok(AffineOracle {
                gain: gain.clone(),
                bias: *bias,
                sigma: *sigma,
            }),
            _ => Err(Error::Unsupported("the analytic oracle exists only for affine_gaussian".into())),
        }
    }

    fn mean(&self, c: &Var) -> Result<Var> {
        let s = c.shape();
        let ch = s[s.len() - 3];
        let g: Vec<f64> = (0..ch).map(|i| if self.gain.len() == 1 { self.gain[0] } else { self.gain[i] }).collect();
        let mut gshape = vec![1; s.len()];
        gshape[s.len() - 3] = ch;
        c.mul(&Var::constant(Tensor::new(gshape, g)?))?.add_scalar(self.bias)
    }

    /// `S(s) = sqrt((1−s)²σ² + s²)` on traced times.
    fn path_std(&self, s: &Var) -> Result<Var> {
        let one_minus = s.neg()?.add_scalar(1.0)?;
        one_minus.square()?.scale(self.sigma * self.sigma)?.add(&s.square()?)?.sqrt()
    }

    /// Batched evaluation: `z`, `c` are (B, C, H, W), `r`, `t` are (B).
    pub fn field(&self, z: &Var, r: &Var, t: &Var, c: &Var) -> Result<Var> {
        let b = z.shape()[0];
        let nd = z.shape().len();
        let mut bshape = vec![1; nd];
        bshape[0] = b;
        let r4 = r.reshape(&bshape)?;
        let t4 = t.reshape(&bshape)?;
        let m = self.mean(c)?;

        let rv = r.value().data();
        let tv = t.value().data();
        if rv.iter().zip(tv).any(|(r, t)| r > t) {
            return invalid("oracle: r exceeds t");
        }
        let eq: Vec<f64> = rv.iter().zip(tv).map(|(r, t)| if r == t { 1.0 } else { 0.0 }).collect();
        let eq4 = Var::constant(per_batch(&eq, nd));
        let ne4 = Var::constant(per_batch(&eq.iter().map(|e| 1.0 - e).collect::<Vec<_>>(), nd));

        let mu_t = m.mul(&t4.neg()?.add_scalar(1.0)?)?;
        let dev = z.sub(&mu_t)?;
        let st = self.path_std(&t4)?;

        // average velocity; the denominator is patched to 1 where r = t
        let mu_r = m.mul(&r4.neg()?.add_scalar(1.0)?)?;
        let z_r = mu_r.add(&self.path_std(&r4)?.div(&st)?.mul(&dev)?)?;
        let gap = t4.sub(&r4)?.add(&eq4)?;
        let avg = z.sub(&z_r)?.div(&gap)?;

        // instantaneous velocity: −m + (Ṡ/S)(z − μ_t), Ṡ = (t − (1−t)σ²)/S
        let sdot = t4.sub(&t4.neg()?.add_scalar(1.0)?.scale(self.sigma * self.sigma)?)?.div(&st)?;
        let inst = m.neg()?.add(&sdot.div(&st)?.mul(&dev)?)?;

        avg.mul(&ne4)?.add(&inst.mul(&eq4)?)
    }

    /// Average velocity at a single (r, t) with `r < t`; unbatched fields.
    pub fn avg_velocity(&self, z: &Tensor, r: f64, t: f64, c: &Tensor) -> Result<Tensor> {
        if r >= t {
            return invalid(format!("oracle_avg_velocity needs r < t, got r = {r}, t = {t}"));
        }
        self.eval_single(z, r, t, c)
    }

    /// Instantaneous marginal velocity at time `t`.
    pub fn instantaneous(&self, z: &Tensor, t: f64, c: &Tensor) -> Result<Tensor> {
        self.eval_single(z, t, t, c)
    }

    fn eval_single(&self, z: &Tensor, r: f64, t: f64, c: &Tensor) -> Result<Tensor> {
        let mut shape = vec![1];
        shape.extend_from_slice(z.shape());
        let zv = Var::constant(z.reshape(&shape)?);
        let cv = Var::constant(c.reshape(&shape)?);
        let out = self.field(&zv, &Var::constant(Tensor::vector(&[r])), &Var::constant(Tensor::vector(&[t])), &cv)?;
        out.value().reshape(z.shape())
    }
}

impl VelocityField for AffineOracle {
    fn eval(&self, z: &Var, r: &Var, t: &Var, c: &Var) -> Result<Var> {
        self.field(z, r, t, c)
    }
}
