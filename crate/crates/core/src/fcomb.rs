//! Combination of aligned per-scale dependencies: plain channel
//! concatenation or scaled dot-product attention across the scale axis.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PnlError, Result};
use crate::tensor::{concat_channels, GradTape, Matrix, Var, VideoFeature};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombMode {
    VanillaConcat,
    ScaledDotAttention,
}

impl CombMode {
    pub const ALL: [CombMode; 2] = [CombMode::VanillaConcat, CombMode::ScaledDotAttention];

    pub fn name(self) -> &'static str {
        match self {
            CombMode::VanillaConcat => "vanilla_concat",
            CombMode::ScaledDotAttention => "scaled_dot_attention",
        }
    }
}

impl fmt::Display for CombMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CombMode {
    type Err = PnlError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "vanilla_concat" | "concat" => Ok(CombMode::VanillaConcat),
            "scaled_dot_attention" | "attention" | "attn" => Ok(CombMode::ScaledDotAttention),
            other => Err(PnlError::config(format!("unknown combination mode '{other}'"))),
        }
    }
}

/// Query/key projections (`C′×C′`, bias-free) for attention mode; none for concat.
#[derive(Debug, Clone, PartialEq)]
pub struct FcombParams {
    mode: CombMode,
    w_q: Option<Matrix>,
    w_k: Option<Matrix>,
}

impl FcombParams {
    /// Zero-initialized, which makes the scale attention uniform.
    pub fn new(mode: CombMode, c_prime: usize) -> Self {
        match mode {
            CombMode::VanillaConcat => FcombParams {
                mode,
                w_q: None,
                w_k: None,
            },
            CombMode::ScaledDotAttention => FcombParams {
                mode,
                w_q: Some(Matrix::zeros(c_prime, c_prime)),
                w_k: Some(Matrix::zeros(c_prime, c_prime)),
            },
        }
    }

    pub fn attention(w_q: Matrix, w_k: Matrix) -> Result<Self> {
        let c = w_q.rows();
        if w_q.dims() != (c, c) || w_k.dims() != (c, c) {
            return Err(PnlError::shape(format!(
                "w_q {}x{} and w_k {}x{} must both be square and equal",
                w_q.rows(),
                w_q.cols(),
                w_k.rows(),
                w_k.cols()
            )));
        }
        Ok(FcombParams {
            mode: CombMode::ScaledDotAttention,
            w_q: Some(w_q),
            w_k: Some(w_k),
        })
    }

    pub fn random_attention<R: Rng + ?Sized>(c_prime: usize, bound: f64, rng: &mut R) -> Self {
        let w_q = Matrix::random_uniform(c_prime, c_prime, -bound, bound, rng);
        let w_k = Matrix::random_uniform(c_prime, c_prime, -bound, bound, rng);
        Self::attention(w_q, w_k).expect("square by construction")
    }

    pub fn mode(&self) -> CombMode {
        self.mode
    }

    pub fn w_q(&self) -> Option<&Matrix> {
        self.w_q.as_ref()
    }

    pub fn w_k(&self) -> Option<&Matrix> {
        self.w_k.as_ref()
    }

    pub fn param_count(&self) -> u64 {
        self.named().iter().map(|(_, _, d)| d.len() as u64).sum()
    }

    pub fn named(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        [("w_q", &self.w_q), ("w_k", &self.w_k)]
            .into_iter()
            .filter_map(|(name, m)| m.as_ref().map(|m| (name, vec![m.rows(), m.cols()], m.data())))
            .collect()
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out: Vec<(&'static str, &mut [f64])> = Vec::new();
        if let Some(m) = &mut self.w_q {
            out.push(("w_q", m.data_mut()));
        }
        if let Some(m) = &mut self.w_k {
            out.push(("w_k", m.data_mut()));
        }
        out
    }

    pub fn register(&self, tape: &mut GradTape, requires_grad: bool) -> Option<(Var, Var)> {
        match (&self.w_q, &self.w_k) {
            (Some(q), Some(k)) => Some((tape.matrix(q, requires_grad), tape.matrix(k, requires_grad))),
            _ => None,
        }
    }
}

/// Aligned scale features plus their per-batch pooled summaries.
#[derive(Debug, Clone)]
pub struct ScaleStack {
    aligned: Vec<VideoFeature>,
    pooled: Vec<Matrix>,
}

impl ScaleStack {
    pub fn n(&self) -> usize {
        self.aligned.len()
    }

    pub fn aligned(&self) -> &[VideoFeature] {
        &self.aligned
    }

    /// `n × C′` spatiotemporal means for batch item `b`.
    pub fn pooled(&self, b: usize) -> &Matrix {
        &self.pooled[b]
    }
}

fn check_aligned(aligned: &[VideoFeature]) -> Result<()> {
    let first = aligned
        .first()
        .ok_or_else(|| PnlError::shape("no scales to combine"))?;
    for (i, a) in aligned.iter().enumerate() {
        if a.shape() != first.shape() || a.dtype() != first.dtype() {
            return Err(PnlError::shape(format!(
                "scale {i} has shape {}, scale 0 has {}",
                a.shape(),
                first.shape()
            )));
        }
    }
    Ok(())
}

pub fn make_stack(aligned: &[VideoFeature]) -> Result<ScaleStack> {
    check_aligned(aligned)?;
    let shape = aligned[0].shape();
    let n = shape.positions();
    let c = shape.c;
    let pooled = (0..shape.b)
        .map(|b| {
            Matrix::from_fn(aligned.len(), c, |s, k| {
                let data = &aligned[s].data()[b * n * c..(b + 1) * n * c];
                let mut sum = 0.0;
                for p in 0..n {
                    sum += data[p * c + k];
                }
                sum / n as f64
            })
        })
        .collect();
    Ok(ScaleStack {
        aligned: aligned.to_vec(),
        pooled,
    })
}

/// Records attention combination. Returns `(output, weights)` where weights
/// is `[B,n,n]` with rows normalized over the key scale.
pub fn record_attend(tape: &mut GradTape, aligned: &[Var], w_q: Var, w_k: Var) -> Result<(Var, Var)> {
    let n = aligned.len();
    if n < 2 {
        return Err(PnlError::config("scale attention needs at least 2 scales"));
    }
    let s = tape.shape(aligned[0]).to_vec();
    let (b, c) = (s[0], s[4]);
    let positions = s[1] * s[2] * s[3];
    let cat = tape.concat(aligned)?;
    let pooled = tape.mean_positions(cat)?;
    let pooled = tape.reshape(pooled, &[b, n, c])?;
    let q = tape.channel_linear(pooled, w_q)?;
    let k = tape.channel_linear(pooled, w_k)?;
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (c as f64).sqrt());
    let weights = tape.softmax(scores);

    let stacked = tape.reshape(cat, &[b, positions, n, c])?;
    let stacked = tape.permute(stacked, &[0, 2, 1, 3])?;
    let stacked = tape.reshape(stacked, &[b, n, positions * c])?;
    let mixed = tape.bmm(weights, stacked, false)?;
    let mixed = tape.reshape(mixed, &[b, n, positions, c])?;
    let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
    let out = tape.reshape(mixed, &[s[0], s[1], s[2], s[3], n * c])?;
    Ok((out, weights))
}

/// Records either combination mode.
pub fn record_combine(tape: &mut GradTape, aligned: &[Var], qk: Option<(Var, Var)>, mode: CombMode) -> Result<Var> {
    match (mode, qk) {
        (CombMode::VanillaConcat, _) => tape.concat(aligned),
        (CombMode::ScaledDotAttention, Some((q, k))) => Ok(record_attend(tape, aligned, q, k)?.0),
        (CombMode::ScaledDotAttention, None) => Err(PnlError::config("attention mode requires w_q and w_k")),
    }
}

fn attention_params(stack: &ScaleStack, p: &FcombParams) -> Result<()> {
    if p.mode() != CombMode::ScaledDotAttention {
        return Err(PnlError::config("attend requires scaled_dot_attention mode"));
    }
    let c = stack.aligned[0].shape().c;
    let w_q = p.w_q().expect("attention mode carries w_q");
    if w_q.dims() != (c, c) {
        return Err(PnlError::shape(format!(
            "w_q is {}x{}, scales have {c} channels",
            w_q.rows(),
            w_q.cols()
        )));
    }
    Ok(())
}

fn run_attend(stack: &ScaleStack, p: &FcombParams) -> Result<(VideoFeature, Vec<Matrix>)> {
    attention_params(stack, p)?;
    let mut tape = GradTape::with_dtype(stack.aligned[0].dtype());
    let vars: Vec<Var> = stack.aligned.iter().map(|a| tape.input(a, false)).collect();
    let (q, k) = p.register(&mut tape, false).expect("attention mode");
    let (out, weights) = record_attend(&mut tape, &vars, q, k)?;
    let n = stack.n();
    let mats = tape
        .value(weights)
        .chunks(n * n)
        .map(|m| Matrix::new(n, n, m.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((tape.feature(out)?, mats))
}

/// Scale-attended combination; channel block `s` of the output is
/// `Σ_t A[s,t]·aligned_t`.
pub fn attend(stack: &ScaleStack, p: &FcombParams) -> Result<VideoFeature> {
    Ok(run_attend(stack, p)?.0)
}

/// The `n×n` attention matrix of every batch item.
pub fn attention_weights(stack: &ScaleStack, p: &FcombParams) -> Result<Vec<Matrix>> {
    Ok(run_attend(stack, p)?.1)
}

pub fn combine_concat(aligned: &[VideoFeature]) -> Result<VideoFeature> {
    check_aligned(aligned)?;
    concat_channels(aligned)
}

/// Dispatches on the parameter mode.
pub fn combine(aligned: &[VideoFeature], p: &FcombParams) -> Result<VideoFeature> {
    match p.mode() {
        CombMode::VanillaConcat => combine_concat(aligned),
        CombMode::ScaledDotAttention => attend(&make_stack(aligned)?, p),
    }
}
