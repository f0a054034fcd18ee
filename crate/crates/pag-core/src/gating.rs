//! Gumbel sampling, the tempered softmax relaxation, and the temperature
//! schedule backing every discrete gate in the system.
//!
//! The discrete gate itself lives on the tape (`Tape::straight_through_gate`)
//! because its forward/backward mismatch is a differentiation rule. This
//! module owns everything stochastic: callers pass an explicit rng, and
//! evaluation-time determinism comes from substituting zero noise.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Clamp keeping -log(-log u) finite at the ends of the uniform draw.
pub const GUMBEL_CLAMP: f64 = 1e-12;

/// Draw i.i.d. Gumbel noise: -log(-log u) with u uniform, clamped into
/// [GUMBEL_CLAMP, 1 - GUMBEL_CLAMP].
pub fn gumbel_sample<R: Rng>(dims: &[usize], rng: &mut R) -> Tensor {
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = rng.gen::<f64>();
            gumbel_from_uniform(u)
        })
        .collect();
    Tensor::new(dims.to_vec(), data).expect("gumbel values are finite by clamping")
}

/// The Gumbel transform of a single uniform draw.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP);
    -(-u.ln()).ln()
}

/// Tempered softmax of (logits + gumbels) / tau, per pixel across channels.
/// This is the relaxation whose Jacobian the straight-through gate records.
pub fn concrete_relax(logits: &Tensor, gumbels: &Tensor, tau: f64) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::InvalidArg(format!("tau must be positive, got {tau}")));
    }
    if logits.dims() != gumbels.dims() {
        return Err(Error::DimMismatch(format!(
            "logits {:?} vs gumbels {:?}",
            logits.dims(),
            gumbels.dims()
        )));
    }
    if logits.rank() != 3 || logits.dims()[0] < 2 {
        return Err(Error::DimMismatch(format!(
            "logits must be KxHxW with K >= 2, got {:?}",
            logits.dims()
        )));
    }
    let (k, h, w) = (logits.dims()[0], logits.dims()[1], logits.dims()[2]);
    let mut out = Tensor::zeros(logits.dims());
    let mut scaled = vec![0.0; k];
    for y in 0..h {
        for x in 0..w {
            let mut m = f64::NEG_INFINITY;
            for c in 0..k {
                scaled[c] = (logits.get3(c, y, x) + gumbels.get3(c, y, x)) / tau;
                m = m.max(scaled[c]);
            }
            let mut z = 0.0;
            for s in scaled.iter_mut() {
                *s = (*s - m).exp();
                z += *s;
            }
            for (c, s) in scaled.iter().enumerate() {
                out.set3(c, y, x, s / z);
            }
        }
    }
    Ok(out)
}

/// Geometric interpolation from tau_start down to tau_end.
#[derive(Clone, Copy, Debug)]
pub struct TemperatureSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub total_steps: usize,
}

impl TemperatureSchedule {
    pub fn new(tau_start: f64, tau_end: f64, total_steps: usize) -> Result<Self> {
        if !(tau_end > 0.0 && tau_start >= tau_end) {
            return Err(Error::InvalidArg(format!(
                "need tau_start >= tau_end > 0, got {tau_start} and {tau_end}"
            )));
        }
        if total_steps == 0 {
            return Err(Error::InvalidArg("schedule needs at least one step".into()));
        }
        Ok(TemperatureSchedule { tau_start, tau_end, total_steps })
    }

    /// Temperature at `step`, interpolated log-linearly so early training
    /// keeps gates soft longer.
    pub fn tau_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::InvalidArg(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps
            )));
        }
        let frac = step as f64 / self.total_steps as f64;
        Ok(self.tau_start * (self.tau_end / self.tau_start).powf(frac))
    }
}

/// Validated binary spatial mask, the host-side view of a gate's output.
#[derive(Clone, Debug, PartialEq)]
pub struct GateMask {
    values: Tensor,
}

impl GateMask {
    pub fn from_tensor(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::DimMismatch(format!(
                "gate mask must be HxW, got {:?}",
                values.dims()
            )));
        }
        if !values.is_binary() {
            return Err(Error::NonBinaryMask("gate mask entries must be 0 or 1".into()));
        }
        Ok(GateMask { values })
    }

    pub fn full(dims: &[usize; 2]) -> Self {
        GateMask { values: Tensor::full(dims, 1.0).expect("finite") }
    }

    pub fn empty(dims: &[usize; 2]) -> Self {
        GateMask { values: Tensor::zeros(dims) }
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn dims(&self) -> &[usize] {
        self.values.dims()
    }

    /// Fraction of active entries.
    pub fn density(&self) -> f64 {
        self.values.mean()
    }

    pub fn active_count(&self) -> usize {
        self.values.data().iter().filter(|&&v| v == 1.0).count()
    }
}
