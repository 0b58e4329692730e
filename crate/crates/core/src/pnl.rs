//! Pyramid non-local module: channel groups are pooled to successively
//! coarser grids, share one non-local operation, are brought back to full
//! resolution, combined, and added to the input.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PnlError, Result};
use crate::fcomb::{record_combine, CombMode, FcombParams};
use crate::nonlocal::{self, param_count_nl, record_nl_operation, NlVars, NonLocalParams, PairwiseKind};
use crate::tensor::{
    avg_pool_spatial, max_pool_spatial, split_channels, DType, GradTape, Shape5, Var, VideoFeature,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    #[default]
    Average,
    Max,
}

impl PoolMode {
    pub fn name(self) -> &'static str {
        match self {
            PoolMode::Average => "average",
            PoolMode::Max => "max",
        }
    }
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolMode {
    type Err = PnlError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "average" | "avg" | "mean" => Ok(PoolMode::Average),
            "max" => Ok(PoolMode::Max),
            other => Err(PnlError::config(format!("unknown pool mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PnlConfig {
    n_scales: usize,
    pub pairwise: PairwiseKind,
    pub comb: CombMode,
    pub pool: PoolMode,
    pub dtype: DType,
}

impl PnlConfig {
    pub fn new(n_scales: usize, pairwise: PairwiseKind, comb: CombMode, pool: PoolMode, dtype: DType) -> Result<Self> {
        if !(2..=4).contains(&n_scales) {
            return Err(PnlError::config(format!("n_scales must be 2, 3 or 4, got {n_scales}")));
        }
        Ok(PnlConfig {
            n_scales,
            pairwise,
            comb,
            pool,
            dtype,
        })
    }

    /// Average pooling in binary64.
    pub fn basic(n_scales: usize, pairwise: PairwiseKind, comb: CombMode) -> Result<Self> {
        Self::new(n_scales, pairwise, comb, PoolMode::Average, DType::F64)
    }

    pub fn n_scales(&self) -> usize {
        self.n_scales
    }

    /// Channels per group.
    pub fn c_prime(&self, c: usize) -> usize {
        c / self.n_scales
    }

    pub fn check_channels(&self, c: usize) -> Result<()> {
        let n = self.n_scales;
        if !c.is_multiple_of(n) {
            return Err(PnlError::config(format!("C % n_scales == 0 violated: C={c}, n_scales={n}")));
        }
        if !(c / n).is_multiple_of(2) {
            return Err(PnlError::config(format!(
                "(C/n_scales) % 2 == 0 violated: C/n_scales = {}",
                c / n
            )));
        }
        Ok(())
    }

    /// All input constraints of the module.
    pub fn check_input(&self, shape: Shape5) -> Result<()> {
        self.check_channels(shape.c)?;
        let coarsest = 1usize << (self.n_scales - 1);
        for (axis, len) in [("H", shape.h), ("W", shape.w)] {
            if len % coarsest != 0 {
                return Err(PnlError::config(format!(
                    "{axis} % 2^(n_scales-1) == 0 violated: {axis}={len}, 2^(n_scales-1)={coarsest}"
                )));
            }
        }
        Ok(())
    }
}

/// One pyramid level: group `k`, pooled by `2^k`.
#[derive(Debug, Clone)]
pub struct ScaledFeature {
    pub k: usize,
    pub tensor: VideoFeature,
}

pub fn build_pyramid(x: &VideoFeature, cfg: &PnlConfig) -> Result<Vec<ScaledFeature>> {
    cfg.check_input(x.shape())?;
    split_channels(x, cfg.n_scales)?
        .into_iter()
        .enumerate()
        .map(|(k, g)| {
            let tensor = match (k, cfg.pool) {
                (0, _) => g,
                (_, PoolMode::Average) => avg_pool_spatial(&g, 1 << k)?,
                (_, PoolMode::Max) => max_pool_spatial(&g, 1 << k)?,
            };
            Ok(ScaledFeature { k, tensor })
        })
        .collect()
}

fn check_params(c: usize, shared: &NonLocalParams, comb: &FcombParams, cfg: &PnlConfig) -> Result<()> {
    let c_prime = cfg.c_prime(c);
    if shared.c_in() != c_prime {
        return Err(PnlError::shape(format!(
            "shared parameters take {} channels, groups have {c_prime}",
            shared.c_in()
        )));
    }
    if shared.kind() != cfg.pairwise {
        return Err(PnlError::config(format!(
            "config pairwise {} but parameters are {}",
            cfg.pairwise,
            shared.kind()
        )));
    }
    if comb.mode() != cfg.comb {
        return Err(PnlError::config(format!(
            "config comb {} but parameters are {}",
            cfg.comb,
            comb.mode()
        )));
    }
    if let Some(q) = comb.w_q() {
        if q.rows() != c_prime {
            return Err(PnlError::shape(format!("w_q is {}x{}, C' is {c_prime}", q.rows(), q.cols())));
        }
    }
    Ok(())
}

/// Records the full module on `tape` and returns the output handle.
pub fn record_pnl(
    tape: &mut GradTape,
    x: Var,
    shared: &NlVars,
    qk: Option<(Var, Var)>,
    cfg: &PnlConfig,
) -> Result<Var> {
    let shape = Shape5::from_dims(tape.shape(x))?;
    cfg.check_input(shape)?;
    let c_prime = cfg.c_prime(shape.c);
    let mut aligned = Vec::with_capacity(cfg.n_scales);
    for k in 0..cfg.n_scales {
        let group = tape.slice_channels(x, k * c_prime, c_prime)?;
        let factor = 1 << k;
        let pooled = match (k, cfg.pool) {
            (0, _) => group,
            (_, PoolMode::Average) => tape.avg_pool(group, factor)?,
            (_, PoolMode::Max) => tape.max_pool(group, factor)?,
        };
        let y = record_nl_operation(tape, pooled, shared, cfg.pairwise)?;
        let y = tape.channel_linear(y, shared.z)?;
        aligned.push(if k == 0 { y } else { tape.upsample(y, factor)? });
    }
    let combined = record_combine(tape, &aligned, qk, cfg.comb)?;
    tape.add(x, combined)
}

pub fn pnl_forward(x: &VideoFeature, shared: &NonLocalParams, comb: &FcombParams, cfg: &PnlConfig) -> Result<VideoFeature> {
    cfg.check_input(x.shape())?;
    check_params(x.shape().c, shared, comb, cfg)?;
    let mut tape = GradTape::with_dtype(cfg.dtype);
    let xv = tape.input(x, false);
    let vars = shared.register(&mut tape, false);
    let qk = comb.register(&mut tape, false);
    let z = record_pnl(&mut tape, xv, &vars, qk, cfg)?;
    tape.feature(z)
}

/// Learnable scalars: one shared non-local set plus the attention projections.
pub fn param_count_pnl(c: usize, cfg: &PnlConfig) -> Result<u64> {
    cfg.check_channels(c)?;
    let cp = cfg.c_prime(c) as u64;
    let comb = match cfg.comb {
        CombMode::ScaledDotAttention => 2 * cp * cp,
        CombMode::VanillaConcat => 0,
    };
    Ok(param_count_nl(cfg.c_prime(c), cfg.pairwise)? + comb)
}

/// A parameter bundle for one module instance.
#[derive(Debug, Clone, PartialEq)]
pub struct PnlModule {
    pub cfg: PnlConfig,
    pub shared: NonLocalParams,
    pub comb: FcombParams,
}

impl PnlModule {
    /// Identity-initialized module for `c` input channels.
    pub fn init(c: usize, cfg: PnlConfig, seed: u64) -> Result<Self> {
        cfg.check_channels(c)?;
        let cp = cfg.c_prime(c);
        Ok(PnlModule {
            cfg,
            shared: NonLocalParams::init(cp, cfg.pairwise, seed)?,
            comb: FcombParams::new(cfg.comb, cp),
        })
    }

    pub fn c(&self) -> usize {
        self.shared.c_in() * self.cfg.n_scales
    }

    pub fn forward(&self, x: &VideoFeature) -> Result<VideoFeature> {
        pnl_forward(x, &self.shared, &self.comb, &self.cfg)
    }

    pub fn param_count(&self) -> u64 {
        self.shared.param_count() + self.comb.param_count()
    }

    pub fn named(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let mut v = self.shared.named();
        v.extend(self.comb.named());
        v
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut v = self.shared.named_mut();
        v.extend(self.comb.named_mut());
        v
    }

    /// Registers parameters in [`Self::named`] order.
    pub fn register(&self, tape: &mut GradTape, requires_grad: bool) -> (NlVars, Option<(Var, Var)>) {
        (self.shared.register(tape, requires_grad), self.comb.register(tape, requires_grad))
    }

    pub fn record(&self, tape: &mut GradTape, x: Var, requires_grad: bool) -> Result<(Var, Vec<Var>)> {
        let (vars, qk) = self.register(tape, requires_grad);
        let out = record_pnl(tape, x, &vars, qk, &self.cfg)?;
        let mut leaves = vars.ordered();
        if let Some((q, k)) = qk {
            leaves.extend([q, k]);
        }
        Ok((out, leaves))
    }
}

/// One retrieved cell of a scale's affinity row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttendedRegion {
    pub scale: usize,
    pub k_rank: usize,
    /// Cell coordinates on the scale's own grid.
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// Full-resolution footprint `[h0, h1) × [w0, w1)`.
    pub region_h0: usize,
    pub region_w0: usize,
    pub region_h1: usize,
    pub region_w1: usize,
    pub weight: f64,
}

/// For every scale, the `top_k` cells most attended to from `reference`
/// (full-resolution `(t, h, w)`, batch item 0). Ties go to the lowest
/// flat index; `top_k` is clamped to the scale's cell count.
pub fn attention_map_extract(
    x: &VideoFeature,
    shared: &NonLocalParams,
    cfg: &PnlConfig,
    reference: (usize, usize, usize),
    top_k: usize,
) -> Result<Vec<Vec<AttendedRegion>>> {
    let shape = x.shape();
    let (rt, rh, rw) = reference;
    if rt >= shape.t || rh >= shape.h || rw >= shape.w {
        return Err(PnlError::Bounds(format!(
            "reference ({rt},{rh},{rw}) outside grid {}x{}x{}",
            shape.t, shape.h, shape.w
        )));
    }
    if top_k == 0 {
        return Err(PnlError::config("top_k must be at least 1"));
    }
    if shared.c_in() != cfg.c_prime(shape.c) {
        return Err(PnlError::shape(format!(
            "shared parameters take {} channels, groups have {}",
            shared.c_in(),
            cfg.c_prime(shape.c)
        )));
    }
    let pyramid = build_pyramid(x, cfg)?;
    pyramid
        .iter()
        .map(|level| {
            let s = level.tensor.shape();
            let a = &nonlocal::affinity(&level.tensor, shared)?[0];
            let (hk, wk) = (rh >> level.k, rw >> level.k);
            let row = a.row((rt * s.h + hk) * s.w + wk);
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
            let span = 1 << level.k;
            Ok(order
                .into_iter()
                .take(top_k)
                .enumerate()
                .map(|(rank, idx)| {
                    let (t, h, w) = (idx / (s.h * s.w), (idx / s.w) % s.h, idx % s.w);
                    AttendedRegion {
                        scale: level.k,
                        k_rank: rank,
                        t,
                        h,
                        w,
                        region_h0: h * span,
                        region_w0: w * span,
                        region_h1: (h + 1) * span,
                        region_w1: (w + 1) * span,
                        weight: row[idx],
                    }
                })
                .collect())
        })
        .collect()
}
