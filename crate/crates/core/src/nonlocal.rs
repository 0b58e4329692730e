//! The non-local operation `y_i = (1/C(x)) Σ_j f(θx_i, φx_j) g(x_j)`, its
//! residual block, and a direct double-loop reference.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PnlError, Result};
use crate::tensor::{GradTape, Matrix, Var, VideoFeature};

/// Largest position count the brute-force reference accepts.
pub const ORACLE_MAX_POSITIONS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairwiseKind {
    EmbeddedGaussian,
    Gaussian,
    DotProduct,
    Concatenation,
}

impl PairwiseKind {
    pub const ALL: [PairwiseKind; 4] = [
        PairwiseKind::EmbeddedGaussian,
        PairwiseKind::Gaussian,
        PairwiseKind::DotProduct,
        PairwiseKind::Concatenation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PairwiseKind::EmbeddedGaussian => "embedded_gaussian",
            PairwiseKind::Gaussian => "gaussian",
            PairwiseKind::DotProduct => "dot_product",
            PairwiseKind::Concatenation => "concatenation",
        }
    }

    /// True for the kinds normalized by a softmax over `j`.
    pub fn is_softmax(self) -> bool {
        matches!(self, PairwiseKind::EmbeddedGaussian | PairwiseKind::Gaussian)
    }

    pub fn uses_embeddings(self) -> bool {
        self != PairwiseKind::Gaussian
    }
}

impl fmt::Display for PairwiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PairwiseKind {
    type Err = PnlError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "embedded_gaussian" | "embedded" => Ok(PairwiseKind::EmbeddedGaussian),
            "gaussian" => Ok(PairwiseKind::Gaussian),
            "dot_product" | "dot" => Ok(PairwiseKind::DotProduct),
            "concatenation" | "concat" => Ok(PairwiseKind::Concatenation),
            other => Err(PnlError::config(format!("unknown pairwise kind '{other}'"))),
        }
    }
}

/// Learnable scalars of a non-local block with `C_in` input channels.
pub fn param_count_nl(c_in: usize, kind: PairwiseKind) -> Result<u64> {
    if c_in == 0 || !c_in.is_multiple_of(2) {
        return Err(PnlError::config(format!("C_in must be even and positive, got {c_in}")));
    }
    let c = c_in as u64;
    Ok(match kind {
        PairwiseKind::EmbeddedGaussian | PairwiseKind::DotProduct => 2 * c * c,
        PairwiseKind::Gaussian => c * c,
        PairwiseKind::Concatenation => 2 * c * c + c,
    })
}

/// Projection weights of one non-local block. All projections are bias-free.
///
/// `w_theta`/`w_phi` are absent for [`PairwiseKind::Gaussian`], and `w_f`
/// exists only for [`PairwiseKind::Concatenation`].
#[derive(Debug, Clone, PartialEq)]
pub struct NonLocalParams {
    kind: PairwiseKind,
    w_theta: Option<Matrix>,
    w_phi: Option<Matrix>,
    w_g: Matrix,
    w_z: Matrix,
    w_f: Option<Vec<f64>>,
}

fn entry<'a>(name: &'static str, m: &'a Matrix) -> (&'static str, Vec<usize>, &'a [f64]) {
    (name, vec![m.rows(), m.cols()], m.data())
}

/// Tape handles for a registered [`NonLocalParams`].
#[derive(Debug, Clone, Copy)]
pub struct NlVars {
    pub theta: Option<Var>,
    pub phi: Option<Var>,
    pub g: Var,
    pub z: Var,
    pub f: Option<Var>,
}

impl NonLocalParams {
    pub fn new(
        kind: PairwiseKind,
        w_theta: Option<Matrix>,
        w_phi: Option<Matrix>,
        w_g: Matrix,
        w_z: Matrix,
        w_f: Option<Vec<f64>>,
    ) -> Result<Self> {
        let (c_in, c_emb) = w_g.dims();
        if c_in % 2 != 0 || c_emb * 2 != c_in {
            return Err(PnlError::config(format!(
                "w_g must be C_in x C_in/2 with even C_in, got {c_in}x{c_emb}"
            )));
        }
        let expect = |name: &str, m: &Matrix, dims: (usize, usize)| -> Result<()> {
            if m.dims() != dims {
                return Err(PnlError::shape(format!(
                    "{name} is {}x{}, expected {}x{}",
                    m.rows(),
                    m.cols(),
                    dims.0,
                    dims.1
                )));
            }
            Ok(())
        };
        expect("w_z", &w_z, (c_emb, c_in))?;
        match (kind.uses_embeddings(), &w_theta, &w_phi) {
            (true, Some(t), Some(p)) => {
                expect("w_theta", t, (c_in, c_emb))?;
                expect("w_phi", p, (c_in, c_emb))?;
            }
            (false, None, None) => {}
            _ => {
                return Err(PnlError::config(format!(
                    "{kind} {} w_theta and w_phi",
                    if kind.uses_embeddings() { "requires" } else { "takes no" }
                )))
            }
        }
        match (kind == PairwiseKind::Concatenation, &w_f) {
            (true, Some(f)) if f.len() == 2 * c_emb => {}
            (false, None) => {}
            _ => {
                return Err(PnlError::config(format!(
                    "w_f must have length {} for concatenation and be absent otherwise",
                    2 * c_emb
                )))
            }
        }
        Ok(NonLocalParams {
            kind,
            w_theta,
            w_phi,
            w_g,
            w_z,
            w_f,
        })
    }

    /// Seeded initialization: projections uniform in `±1/√C_in`, `w_z = 0`
    /// so the block starts as an identity map.
    pub fn init(c_in: usize, kind: PairwiseKind, seed: u64) -> Result<Self> {
        Self::init_with_rng(c_in, kind, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn init_with_rng<R: Rng + ?Sized>(c_in: usize, kind: PairwiseKind, rng: &mut R) -> Result<Self> {
        param_count_nl(c_in, kind)?;
        let c_emb = c_in / 2;
        let bound = 1.0 / (c_in as f64).sqrt();
        let mut draw = |r, c| Matrix::random_uniform(r, c, -bound, bound, rng);
        let (w_theta, w_phi) = if kind.uses_embeddings() {
            (Some(draw(c_in, c_emb)), Some(draw(c_in, c_emb)))
        } else {
            (None, None)
        };
        let w_g = draw(c_in, c_emb);
        let w_f = (kind == PairwiseKind::Concatenation).then(|| draw(1, 2 * c_emb).into_data());
        Self::new(kind, w_theta, w_phi, w_g, Matrix::zeros(c_emb, c_in), w_f)
    }

    /// Replaces `w_z` with uniform draws in `±bound`, leaving identity init behind.
    pub fn randomize_w_z<R: Rng + ?Sized>(&mut self, bound: f64, rng: &mut R) {
        let (r, c) = self.w_z.dims();
        self.w_z = Matrix::random_uniform(r, c, -bound, bound, rng);
    }

    pub fn kind(&self) -> PairwiseKind {
        self.kind
    }

    pub fn c_in(&self) -> usize {
        self.w_g.rows()
    }

    pub fn c_emb(&self) -> usize {
        self.w_g.cols()
    }

    pub fn w_theta(&self) -> Option<&Matrix> {
        self.w_theta.as_ref()
    }

    pub fn w_phi(&self) -> Option<&Matrix> {
        self.w_phi.as_ref()
    }

    pub fn w_g(&self) -> &Matrix {
        &self.w_g
    }

    pub fn w_z(&self) -> &Matrix {
        &self.w_z
    }

    pub fn w_f(&self) -> Option<&[f64]> {
        self.w_f.as_deref()
    }

    pub fn set_w_z(&mut self, w_z: Matrix) -> Result<()> {
        if w_z.dims() != self.w_z.dims() {
            return Err(PnlError::shape(format!(
                "w_z must be {}x{}",
                self.w_z.rows(),
                self.w_z.cols()
            )));
        }
        self.w_z = w_z;
        Ok(())
    }

    pub fn is_identity_init(&self) -> bool {
        self.w_z.is_zero()
    }

    pub fn param_count(&self) -> u64 {
        self.named().iter().map(|(_, _, d)| d.len() as u64).sum()
    }

    /// Learnable tensors in a fixed order, as `(name, dims, data)`.
    pub fn named(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let mut out: Vec<(&'static str, Vec<usize>, &[f64])> = Vec::with_capacity(5);
        if let Some(m) = &self.w_theta {
            out.push(entry("w_theta", m));
        }
        if let Some(m) = &self.w_phi {
            out.push(entry("w_phi", m));
        }
        out.push(entry("w_g", &self.w_g));
        out.push(entry("w_z", &self.w_z));
        if let Some(f) = &self.w_f {
            out.push(("w_f", vec![f.len()], f.as_slice()));
        }
        out
    }

    /// Mutable views matching [`Self::named`] order.
    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out: Vec<(&'static str, &mut [f64])> = Vec::with_capacity(5);
        if let Some(m) = &mut self.w_theta {
            out.push(("w_theta", m.data_mut()));
        }
        if let Some(m) = &mut self.w_phi {
            out.push(("w_phi", m.data_mut()));
        }
        out.push(("w_g", self.w_g.data_mut()));
        out.push(("w_z", self.w_z.data_mut()));
        if let Some(f) = &mut self.w_f {
            out.push(("w_f", f.as_mut_slice()));
        }
        out
    }

    /// Records the parameters as tape leaves.
    pub fn register(&self, tape: &mut GradTape, requires_grad: bool) -> NlVars {
        NlVars {
            theta: self.w_theta.as_ref().map(|m| tape.matrix(m, requires_grad)),
            phi: self.w_phi.as_ref().map(|m| tape.matrix(m, requires_grad)),
            g: tape.matrix(&self.w_g, requires_grad),
            z: tape.matrix(&self.w_z, requires_grad),
            f: self.w_f.as_ref().map(|f| tape.vector(f, requires_grad)),
        }
    }

    pub(crate) fn check_input(&self, c: usize) -> Result<()> {
        if c != self.c_in() {
            return Err(PnlError::shape(format!(
                "input has {c} channels, parameters expect {}",
                self.c_in()
            )));
        }
        Ok(())
    }
}

impl NlVars {
    /// Tape handles in [`NonLocalParams::named`] order.
    pub fn ordered(&self) -> Vec<Var> {
        self.theta
            .into_iter()
            .chain(self.phi)
            .chain([self.g, self.z])
            .chain(self.f)
            .collect()
    }
}

/// Records the normalized `[B,N,N]` affinity for a `[B,T,H,W,C]` input.
pub fn record_affinity(tape: &mut GradTape, x: Var, vars: &NlVars, kind: PairwiseKind) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, c) = (s[0], s[4]);
    let n = s[1] * s[2] * s[3];
    let embed = |tape: &mut GradTape, w: Option<Var>| -> Result<Var> {
        let w = w.ok_or_else(|| PnlError::config(format!("{kind} requires w_theta and w_phi")))?;
        let e = tape.channel_linear(x, w)?;
        let ce = tape.shape(e)[4];
        tape.reshape(e, &[b, n, ce])
    };
    match kind {
        PairwiseKind::EmbeddedGaussian => {
            let theta = embed(tape, vars.theta)?;
            let phi = embed(tape, vars.phi)?;
            let scores = tape.bmm(theta, phi, true)?;
            Ok(tape.softmax(scores))
        }
        PairwiseKind::Gaussian => {
            let flat = tape.reshape(x, &[b, n, c])?;
            let scores = tape.bmm(flat, flat, true)?;
            Ok(tape.softmax(scores))
        }
        PairwiseKind::DotProduct => {
            let theta = embed(tape, vars.theta)?;
            let phi = embed(tape, vars.phi)?;
            let scores = tape.bmm(theta, phi, true)?;
            Ok(tape.scale(scores, 1.0 / n as f64))
        }
        PairwiseKind::Concatenation => {
            let theta = embed(tape, vars.theta)?;
            let phi = embed(tape, vars.phi)?;
            let wf = vars
                .f
                .ok_or_else(|| PnlError::config("concatenation requires w_f"))?;
            let scores = tape.pairwise_concat(theta, phi, wf)?;
            let act = tape.relu(scores);
            Ok(tape.scale(act, 1.0 / n as f64))
        }
    }
}

/// Records the non-local operation; output has `C_emb` channels.
pub fn record_nl_operation(tape: &mut GradTape, x: Var, vars: &NlVars, kind: PairwiseKind) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 5 {
        return Err(PnlError::shape(format!("non-local input must be rank 5, got {s:?}")));
    }
    let b = s[0];
    let n = s[1] * s[2] * s[3];
    let a = record_affinity(tape, x, vars, kind)?;
    let g = tape.channel_linear(x, vars.g)?;
    let ce = tape.shape(g)[4];
    let g = tape.reshape(g, &[b, n, ce])?;
    let y = tape.bmm(a, g, false)?;
    tape.reshape(y, &[s[0], s[1], s[2], s[3], ce])
}

/// Records `x + channel_linear(nl_operation(x), w_z)`.
pub fn record_nl_block(tape: &mut GradTape, x: Var, vars: &NlVars, kind: PairwiseKind) -> Result<Var> {
    let y = record_nl_operation(tape, x, vars, kind)?;
    let z = tape.channel_linear(y, vars.z)?;
    tape.add(x, z)
}

/// Normalized pairwise weights, one `N×N` matrix per batch item.
pub fn affinity(x: &VideoFeature, p: &NonLocalParams) -> Result<Vec<Matrix>> {
    p.check_input(x.shape().c)?;
    let mut tape = GradTape::with_dtype(x.dtype());
    let xv = tape.input(x, false);
    let vars = p.register(&mut tape, false);
    let a = record_affinity(&mut tape, xv, &vars, p.kind())?;
    let n = x.shape().positions();
    tape.value(a)
        .chunks(n * n)
        .map(|m| Matrix::new(n, n, m.to_vec()))
        .collect()
}

pub fn nl_operation(x: &VideoFeature, p: &NonLocalParams) -> Result<VideoFeature> {
    p.check_input(x.shape().c)?;
    let mut tape = GradTape::with_dtype(x.dtype());
    let xv = tape.input(x, false);
    let vars = p.register(&mut tape, false);
    let y = record_nl_operation(&mut tape, xv, &vars, p.kind())?;
    tape.feature(y)
}

pub fn nl_block(x: &VideoFeature, p: &NonLocalParams) -> Result<VideoFeature> {
    p.check_input(x.shape().c)?;
    let mut tape = GradTape::with_dtype(x.dtype());
    let xv = tape.input(x, false);
    let vars = p.register(&mut tape, false);
    let z = record_nl_block(&mut tape, xv, &vars, p.kind())?;
    tape.feature(z)
}

/// Direct transcription of the defining sum: explicit loops over every
/// `(i, j)` pair and every projection weight, no shared kernels.
pub fn brute_force_oracle(x: &VideoFeature, p: &NonLocalParams) -> Result<VideoFeature> {
    p.check_input(x.shape().c)?;
    let shape = x.shape();
    let n = shape.positions();
    if n > ORACLE_MAX_POSITIONS {
        return Err(PnlError::Size(format!(
            "brute-force reference supports N <= {ORACLE_MAX_POSITIONS}, got {n}"
        )));
    }
    let (c, ce) = (p.c_in(), p.c_emb());
    let project = |v: &[f64], w: &Matrix| -> Vec<f64> {
        (0..w.cols())
            .map(|o| {
                let mut s = 0.0;
                for i in 0..v.len() {
                    s += v[i] * w.get(i, o);
                }
                s
            })
            .collect()
    };
    let dot = |a: &[f64], b: &[f64]| -> f64 {
        let mut s = 0.0;
        for k in 0..a.len() {
            s += a[k] * b[k];
        }
        s
    };
    let mut out = Vec::with_capacity(shape.b * n * ce);
    for b in 0..shape.b {
        let row = |i: usize| &x.data()[(b * n + i) * c..(b * n + i + 1) * c];
        let g: Vec<Vec<f64>> = (0..n).map(|j| project(row(j), p.w_g())).collect();
        let theta: Vec<Vec<f64>> = match p.w_theta() {
            Some(w) => (0..n).map(|i| project(row(i), w)).collect(),
            None => Vec::new(),
        };
        let phi: Vec<Vec<f64>> = match p.w_phi() {
            Some(w) => (0..n).map(|j| project(row(j), w)).collect(),
            None => Vec::new(),
        };
        for i in 0..n {
            let raw: Vec<f64> = (0..n)
                .map(|j| match p.kind() {
                    PairwiseKind::EmbeddedGaussian | PairwiseKind::DotProduct => dot(&theta[i], &phi[j]),
                    PairwiseKind::Gaussian => dot(row(i), row(j)),
                    PairwiseKind::Concatenation => {
                        let wf = p.w_f().expect("validated at construction");
                        let mut s = 0.0;
                        for k in 0..ce {
                            s += wf[k] * theta[i][k];
                        }
                        for k in 0..ce {
                            s += wf[ce + k] * phi[j][k];
                        }
                        s.max(0.0)
                    }
                })
                .collect();
            let weights: Vec<f64> = if p.kind().is_softmax() {
                let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = raw.iter().map(|v| (v - m).exp()).collect();
                let total: f64 = e.iter().sum();
                e.iter().map(|v| v / total).collect()
            } else {
                raw.iter().map(|v| v / n as f64).collect()
            };
            for k in 0..ce {
                let mut s = 0.0;
                for j in 0..n {
                    s += weights[j] * g[j][k];
                }
                out.push(s);
            }
        }
    }
    VideoFeature::new(shape.with_channels(ce), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{channel_linear, Shape5};
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_x(shape: Shape5, seed: u64) -> VideoFeature {
        VideoFeature::random_uniform(shape, -1.0, 1.0, &mut rng(seed))
    }

    fn zero_embeddings(p: &mut NonLocalParams) {
        for (name, data) in p.named_mut() {
            if name == "w_theta" || name == "w_phi" {
                data.fill(0.0);
            }
        }
    }

    #[test]
    fn param_counts() {
        assert_eq!(param_count_nl(1024, PairwiseKind::EmbeddedGaussian).unwrap(), 2_097_152);
        assert_eq!(param_count_nl(2, PairwiseKind::EmbeddedGaussian).unwrap(), 8);
        assert_eq!(param_count_nl(2, PairwiseKind::Gaussian).unwrap(), 4);
        assert_eq!(param_count_nl(4, PairwiseKind::Concatenation).unwrap(), 36);
        assert!(matches!(param_count_nl(3, PairwiseKind::DotProduct), Err(PnlError::Config(_))));
        for kind in PairwiseKind::ALL {
            let p = NonLocalParams::init(6, kind, 0).unwrap();
            assert_eq!(p.param_count(), param_count_nl(6, kind).unwrap());
        }
    }

    #[test]
    fn zero_embeddings_give_uniform_or_zero_affinity() {
        let x = random_x(Shape5::new(1, 1, 2, 3, 4).unwrap(), 1);
        let mut eg = NonLocalParams::init(4, PairwiseKind::EmbeddedGaussian, 3).unwrap();
        zero_embeddings(&mut eg);
        for v in affinity(&x, &eg).unwrap()[0].data() {
            assert_eq!(*v, 1.0 / 6.0);
        }
        let mut dp = NonLocalParams::init(4, PairwiseKind::DotProduct, 3).unwrap();
        zero_embeddings(&mut dp);
        assert!(affinity(&x, &dp).unwrap()[0].is_zero());
    }

    #[test]
    fn gaussian_affinity_matches_direct_formula() {
        let x = random_x(Shape5::new(1, 1, 2, 2, 2).unwrap(), 7);
        let p = NonLocalParams::init(2, PairwiseKind::Gaussian, 0).unwrap();
        let a = &affinity(&x, &p).unwrap()[0];
        for i in 0..4 {
            let xi = x.at(0, 0, i / 2, i % 2);
            let e: Vec<f64> = (0..4)
                .map(|j| {
                    let xj = x.at(0, 0, j / 2, j % 2);
                    (xi[0] * xj[0] + xi[1] * xj[1]).exp()
                })
                .collect();
            let total: f64 = e.iter().sum();
            for j in 0..4 {
                assert!((a.get(i, j) - e[j] / total).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_w_g_gives_zero_output() {
        let x = random_x(Shape5::new(1, 2, 2, 2, 4).unwrap(), 2);
        for kind in PairwiseKind::ALL {
            let mut p = NonLocalParams::init(4, kind, 1).unwrap();
            for (name, d) in p.named_mut() {
                if name == "w_g" {
                    d.fill(0.0);
                }
            }
            assert!(nl_operation(&x, &p).unwrap().data().iter().all(|v| *v == 0.0));
            assert!(brute_force_oracle(&x, &p).unwrap().data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn uniform_affinity_gives_mean_of_g() {
        let x = random_x(Shape5::new(1, 2, 2, 2, 4).unwrap(), 3);
        let mut p = NonLocalParams::init(4, PairwiseKind::EmbeddedGaussian, 5).unwrap();
        zero_embeddings(&mut p);
        let y = nl_operation(&x, &p).unwrap();
        let g = channel_linear(&x, p.w_g(), None).unwrap();
        for k in 0..2 {
            let mean: f64 = g.data().iter().skip(k).step_by(2).sum::<f64>() / 8.0;
            for v in y.data().iter().skip(k).step_by(2) {
                assert!((v - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn matches_oracle_for_every_kind() {
        let x = random_x(Shape5::new(1, 2, 4, 4, 8).unwrap(), 11);
        for kind in PairwiseKind::ALL {
            let p = NonLocalParams::init(8, kind, 4).unwrap();
            let fast = nl_operation(&x, &p).unwrap();
            let slow = brute_force_oracle(&x, &p).unwrap();
            assert!(fast.max_abs_diff(&slow) <= 1e-10, "{kind}");
        }
    }

    #[test]
    fn single_position_returns_g() {
        let x = random_x(Shape5::new(1, 1, 1, 1, 4).unwrap(), 9);
        for kind in [PairwiseKind::EmbeddedGaussian, PairwiseKind::Gaussian] {
            let p = NonLocalParams::init(4, kind, 2).unwrap();
            let g = channel_linear(&x, p.w_g(), None).unwrap();
            assert!(brute_force_oracle(&x, &p).unwrap().max_abs_diff(&g) < 1e-15);
        }
    }

    #[test]
    fn oracle_guard() {
        let x = VideoFeature::zeros(Shape5::new(1, 1, 65, 64, 2).unwrap());
        let p = NonLocalParams::init(2, PairwiseKind::DotProduct, 0).unwrap();
        assert!(matches!(brute_force_oracle(&x, &p), Err(PnlError::Size(_))));
    }

    #[test]
    fn block_identity_and_zero_input() {
        let shape = Shape5::new(2, 2, 2, 2, 4).unwrap();
        let x = random_x(shape, 12);
        for kind in PairwiseKind::ALL {
            let mut p = NonLocalParams::init(4, kind, 6).unwrap();
            assert!(nl_block(&x, &p).unwrap().bitwise_eq(&x));
            p.randomize_w_z(0.5, &mut rng(1));
            let zero = VideoFeature::zeros(shape);
            assert!(nl_block(&zero, &p).unwrap().data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn block_equals_input_plus_projected_oracle() {
        let x = random_x(Shape5::new(1, 2, 2, 2, 4).unwrap(), 13);
        let mut p = NonLocalParams::init(4, PairwiseKind::Concatenation, 8).unwrap();
        p.randomize_w_z(0.5, &mut rng(2));
        let y = brute_force_oracle(&x, &p).unwrap();
        let c = 4;
        let mut expect = x.data().to_vec();
        for (pos, e) in expect.chunks_mut(c).enumerate() {
            for o in 0..c {
                for k in 0..2 {
                    e[o] += y.data()[pos * 2 + k] * p.w_z().get(k, o);
                }
            }
        }
        let z = nl_block(&x, &p).unwrap();
        for (a, b) in z.data().iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = VideoFeature::zeros(Shape5::new(1, 1, 2, 2, 6).unwrap());
        let p = NonLocalParams::init(4, PairwiseKind::Gaussian, 0).unwrap();
        assert!(matches!(nl_operation(&x, &p), Err(PnlError::Shape(_))));
    }

    #[test]
    fn kind_parsing() {
        for kind in PairwiseKind::ALL {
            assert_eq!(kind.name().parse::<PairwiseKind>().unwrap(), kind);
        }
        assert!("cosine".parse::<PairwiseKind>().is_err());
    }

    fn kind_strategy() -> impl Strategy<Value = PairwiseKind> {
        prop::sample::select(PairwiseKind::ALL.to_vec())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn softmax_affinity_rows_are_distributions(seed in 0u64..1000, gaussian in any::<bool>()) {
            let kind = if gaussian { PairwiseKind::Gaussian } else { PairwiseKind::EmbeddedGaussian };
            let x = random_x(Shape5::new(2, 2, 2, 3, 4).unwrap(), seed);
            let p = NonLocalParams::init(4, kind, seed).unwrap();
            for m in affinity(&x, &p).unwrap() {
                for i in 0..m.rows() {
                    let row = m.row(i);
                    prop_assert!(row.iter().all(|v| *v >= 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn permuting_positions_permutes_output(seed in 0u64..1000, kind in kind_strategy()) {
            let shape = Shape5::new(1, 2, 2, 3, 4).unwrap();
            let x = random_x(shape, seed);
            let p = NonLocalParams::init(4, kind, seed + 1).unwrap();
            let n = shape.positions();
            let mut perm: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng(seed));
            let permuted: Vec<f64> = perm.iter().flat_map(|&i| x.data()[i * 4..(i + 1) * 4].to_vec()).collect();
            let xp = VideoFeature::new(shape, permuted).unwrap();
            let y = nl_operation(&x, &p).unwrap();
            let yp = nl_operation(&xp, &p).unwrap();
            for (dst, &src) in perm.iter().enumerate() {
                for k in 0..2 {
                    prop_assert!((yp.data()[dst * 2 + k] - y.data()[src * 2 + k]).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn identity_block_is_bitwise(seed in 0u64..1000, kind in kind_strategy()) {
            let x = random_x(Shape5::new(1, 2, 2, 2, 6).unwrap(), seed);
            let p = NonLocalParams::init(6, kind, seed).unwrap();
            prop_assert!(nl_block(&x, &p).unwrap().bitwise_eq(&x));
        }
    }
}
