//! Selective state-space layers.
//!
//! [`SelectiveSsm`] computes the input-dependent `B_t`, `C_t` and `Δ_t` from
//! each token and runs the scan; [`MambaBlock`] wraps it with the gated
//! in/out projections and a short causal convolution.

mod scan;
mod zoh;

pub use scan::{
    causal_conv, lti_kernel, scan_backward, scan_forward, ScanDims, ScanGrads, ScanInputs,
    ScanSchedule, ScanTape,
};
pub use zoh::{zoh_discretize, zoh_gains, ZOH_SERIES_THRESHOLD};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Linear, ParamBuilder, ParamId};
use crate::tensor::{Float, Tensor};

/// Hyper-parameters of one selective SSM.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsmConfig {
    /// Token width the scan runs over.
    pub width: usize,
    /// Diagonal state size per channel.
    pub state: usize,
    /// Range the initial step sizes are drawn from (log-uniform).
    pub dt_min: f64,
    pub dt_max: f64,
}

impl SsmConfig {
    pub fn new(width: usize, state: usize) -> Self {
        Self {
            width,
            state,
            dt_min: 1e-3,
            dt_max: 1e-1,
        }
    }
}

/// Parameters of a selective SSM over `E` channels with `N` states:
/// `A = −exp(a_log)`, `B_t = x_t·W_B`, `C_t = x_t·W_C`,
/// `Δ_t = softplus(x_t·w_Δ + b_Δ)` and skip `D`.
#[derive(Clone, Debug)]
pub struct SelectiveSsm {
    pub cfg: SsmConfig,
    pub a_log: ParamId,
    pub proj_b: Linear,
    pub proj_c: Linear,
    pub proj_dt: Linear,
    pub dt_bias: ParamId,
    pub d_skip: ParamId,
}

impl SelectiveSsm {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: SsmConfig) -> Result<Self> {
        use rand::Rng;
        let mut pb = pb.sub(name);
        let (e, n) = (cfg.width, cfg.state);
        // A_log[e, n] = ln(n + 1)
        let a_log: Vec<f32> = (0..e)
            .flat_map(|_| (1..=n).map(|k| (k as f32).ln()))
            .collect();
        let a_log = pb.tensor("a_log", Tensor::new(vec![e, n], a_log)?)?;
        let proj_b = Linear::new(&mut pb, "proj_b", e, n, false)?;
        let proj_c = Linear::new(&mut pb, "proj_c", e, n, false)?;
        let proj_dt = Linear::new(&mut pb, "proj_dt", e, 1, false)?;
        let (lo, hi) = (cfg.dt_min.ln(), cfg.dt_max.ln());
        let dt_bias: Vec<f32> = (0..e)
            .map(|_| {
                let dt = pb.rng().random_range(lo..=hi).exp();
                // inverse softplus
                (dt + (-(-dt).exp_m1()).ln()) as f32
            })
            .collect();
        let dt_bias = pb.tensor("dt_bias", Tensor::new(vec![e], dt_bias)?)?;
        let d_skip = pb.ones("d_skip", &[e])?;
        Ok(Self {
            cfg,
            a_log,
            proj_b,
            proj_c,
            proj_dt,
            dt_bias,
            d_skip,
        })
    }

    /// `x: [S, L, E]` (or `[L, E]`) → same shape.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        self.forward_with(g, x, ScanSchedule::Sequential)
    }

    pub fn forward_with<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        schedule: ScanSchedule,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let x3 = match shape[..] {
            [l, e] => g.reshape(x, &[1, l, e])?,
            [_, _, _] => x,
            _ => return Err(Error::shape("selective_ssm", format!("input {shape:?}"))),
        };
        if shape.last() != Some(&self.cfg.width) {
            return Err(Error::shape(
                "selective_ssm",
                format!("input {shape:?} for width {}", self.cfg.width),
            ));
        }
        let b = self.proj_b.forward(g, x3)?;
        let c = self.proj_c.forward(g, x3)?;
        let dt = self.proj_dt.forward(g, x3)?;
        let bias = g.param(self.dt_bias)?;
        let dt = g.add(dt, bias)?;
        let delta = g.softplus(dt)?;
        let a_log = g.param(self.a_log)?;
        let a = g.exp(a_log)?;
        let a = g.neg(a)?;
        let d = g.param(self.d_skip)?;
        let y = g.selective_scan(x3, delta, a, b, c, d, schedule)?;
        g.reshape(y, &shape)
    }
}

/// Hyper-parameters of a [`MambaBlock`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MambaConfig {
    pub width: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub state: usize,
}

impl MambaConfig {
    pub fn new(width: usize, state: usize) -> Self {
        Self {
            width,
            expand: 2,
            conv_width: 4,
            state,
        }
    }

    pub fn inner(&self) -> usize {
        self.width * self.expand
    }
}

/// Gated Mamba block: in-projection to content and gate paths, causal
/// depthwise conv + SiLU on the content, selective scan, SiLU-gated product,
/// out-projection.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub cfg: MambaConfig,
    pub in_proj: Linear,
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub ssm: SelectiveSsm,
    pub out_proj: Linear,
}

impl MambaBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: MambaConfig) -> Result<Self> {
        let mut pb = pb.sub(name);
        let e = cfg.inner();
        let in_proj = Linear::new(&mut pb, "in_proj", cfg.width, 2 * e, false)?;
        let bound = 1.0 / (cfg.conv_width as f64).sqrt();
        let conv_weight = pb.uniform("conv.weight", &[cfg.conv_width, e], bound)?;
        let conv_bias = pb.zeros("conv.bias", &[e])?;
        let ssm = SelectiveSsm::new(&mut pb, "ssm", SsmConfig::new(e, cfg.state))?;
        let out_proj = Linear::new(&mut pb, "out_proj", e, cfg.width, false)?;
        Ok(Self {
            cfg,
            in_proj,
            conv_weight,
            conv_bias,
            ssm,
            out_proj,
        })
    }

    /// `x: [L, D]` or `[S, L, D]`; sequences in `S` are independent.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let x3 = match shape[..] {
            [l, d] if d == self.cfg.width && l >= 1 => g.reshape(x, &[1, l, d])?,
            [_, l, d] if d == self.cfg.width && l >= 1 => x,
            _ => {
                return Err(Error::shape(
                    "mamba_block",
                    format!("input {shape:?} for width {}", self.cfg.width),
                ))
            }
        };
        let e = self.cfg.inner();
        let xz = self.in_proj.forward(g, x3)?;
        let parts = g.split(xz, 2, &[e, e])?;
        let (content, gate) = (parts[0], parts[1]);
        let w = g.param(self.conv_weight)?;
        let b = g.param(self.conv_bias)?;
        let content = g.causal_conv1d(content, w, b)?;
        let content = g.silu(content)?;
        let y = self.ssm.forward(g, content)?;
        let gate = g.silu(gate)?;
        let y = g.mul(y, gate)?;
        let out = self.out_proj.forward(g, y)?;
        g.reshape(out, &shape)
    }
}
