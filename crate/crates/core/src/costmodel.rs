//! Operation-count accounting for the non-local block and the pyramid module.
//!
//! Two ledgers are kept side by side. The literal one evaluates the
//! closed-form cost formulas exactly over rationals, including the `2C³N`
//! embedding term. The MAC-exact one counts the multiply-accumulates the
//! primitives in this crate actually perform; it is checked against a
//! counter attached to the gradient tape.

use std::fmt::Write as _;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{PnlError, Result};
use crate::fcomb::CombMode;
use crate::nonlocal::{param_count_nl, record_nl_block, NlVars, NonLocalParams, PairwiseKind};
use crate::pnl::{param_count_pnl, record_pnl, PnlConfig, PnlModule};
use crate::tensor::tape::MacCounter;
use crate::tensor::{GradTape, Shape5, VideoFeature};

fn int(v: u64) -> BigRational {
    BigRational::from_integer(BigInt::from(v))
}

fn pow4(k: u32) -> BigRational {
    BigRational::from_integer(BigInt::from(4u8).pow(k))
}

/// `2C³N`.
pub fn cost_nl_embs(c: u64, n: u64) -> BigRational {
    int(2) * int(c) * int(c) * int(c) * int(n)
}

/// `CN²/2`.
pub fn cost_nl_matmul(c: u64, n: u64) -> BigRational {
    int(c) * int(n) * int(n) / int(2)
}

/// `2C³N + CN²`.
pub fn cost_nl(c: u64, n: u64) -> BigRational {
    cost_nl_embs(c, n) + int(2) * cost_nl_matmul(c, n)
}

/// Positions at scale `k`: `N/4^k`.
pub fn n_k(n: u64, k: u32) -> BigRational {
    int(n) / pow4(k)
}

/// Embedding and matmul coefficients of scale `k` with `n_scales` groups:
/// `1/(n³·4^k)` on `2C³N` and `1/(n·16^k)` on `CN²`.
pub fn scale_coefficients(n_scales: u64, k: u32) -> (BigRational, BigRational) {
    let n = int(n_scales);
    let embs = BigRational::one() / (n.clone() * n.clone() * n.clone() * pow4(k));
    let matmul = BigRational::one() / (n * pow4(k) * pow4(k));
    (embs, matmul)
}

pub fn cost_nl_k(c: u64, n: u64, n_scales: u64, k: u32) -> BigRational {
    let (a, b) = scale_coefficients(n_scales, k);
    a * cost_nl_embs(c, n) + b * int(c) * int(n) * int(n)
}

/// Coefficients of `2C³N` and `CN²` in [`cost_pnl_dep`].
pub fn pnl_dep_coefficients(n_scales: u64) -> (BigRational, BigRational) {
    (0..n_scales as u32).fold((BigRational::zero(), BigRational::zero()), |(ea, eb), k| {
        let (a, b) = scale_coefficients(n_scales, k);
        (ea + a, eb + b)
    })
}

/// `Σ_{k<n} cost_nl_k`.
pub fn cost_pnl_dep(c: u64, n: u64, n_scales: u64) -> BigRational {
    (0..n_scales as u32).fold(BigRational::zero(), |acc, k| acc + cost_nl_k(c, n, n_scales, k))
}

/// Closed-form MACs of the non-local operation (no `w_z`) on `b` items of
/// `n` positions and `c` channels.
pub fn mac_exact_nl_operation(b: u128, n: u128, c: u128, kind: PairwiseKind) -> u128 {
    let ce = c / 2;
    let g = b * n * c * ce;
    let aggregate = b * n * n * ce;
    let affinity = match kind {
        PairwiseKind::EmbeddedGaussian | PairwiseKind::DotProduct => 2 * b * n * c * ce + b * n * n * ce,
        PairwiseKind::Gaussian => b * n * n * c,
        PairwiseKind::Concatenation => 2 * b * n * c * ce + 2 * b * n * ce,
    };
    g + affinity + aggregate
}

/// Closed-form MACs of the full non-local block, including `w_z`.
pub fn mac_exact_nl(shape: Shape5, kind: PairwiseKind) -> u128 {
    let (b, n, c) = (shape.b as u128, shape.positions() as u128, shape.c as u128);
    mac_exact_nl_operation(b, n, c, kind) + b * n * (c / 2) * c
}

/// Closed-form MACs of the pyramid module.
pub fn mac_exact_pnl(shape: Shape5, cfg: &PnlConfig) -> Result<u128> {
    cfg.check_input(shape)?;
    let b = shape.b as u128;
    let cp = cfg.c_prime(shape.c) as u128;
    let ns = cfg.n_scales() as u128;
    let n_full = shape.positions() as u128;
    let mut total = 0;
    for k in 0..cfg.n_scales() {
        let nk = (shape.t * (shape.h >> k) * (shape.w >> k)) as u128;
        total += mac_exact_nl_operation(b, nk, cp, cfg.pairwise) + b * nk * (cp / 2) * cp;
    }
    if cfg.comb == CombMode::ScaledDotAttention {
        total += 2 * b * ns * cp * cp + b * ns * ns * cp + b * ns * ns * n_full * cp;
    }
    Ok(total)
}

fn shape_leaf(tape: &mut GradTape, dims: &[usize]) -> crate::tensor::Var {
    tape.leaf(dims, Vec::new(), false).expect("counting tape accepts any shape")
}

fn shape_vars(tape: &mut GradTape, c_in: usize, kind: PairwiseKind) -> NlVars {
    let ce = c_in / 2;
    let emb = kind.uses_embeddings();
    NlVars {
        theta: emb.then(|| shape_leaf(tape, &[c_in, ce])),
        phi: emb.then(|| shape_leaf(tape, &[c_in, ce])),
        g: shape_leaf(tape, &[c_in, ce]),
        z: shape_leaf(tape, &[ce, c_in]),
        f: (kind == PairwiseKind::Concatenation).then(|| shape_leaf(tape, &[2 * ce])),
    }
}

/// MACs tallied by recording the block on a shape-only tape.
pub fn count_nl(shape: Shape5, kind: PairwiseKind) -> Result<MacCounter> {
    param_count_nl(shape.c, kind)?;
    let mut tape = GradTape::counting();
    let x = tape.shaped_input(shape);
    let vars = shape_vars(&mut tape, shape.c, kind);
    record_nl_block(&mut tape, x, &vars, kind)?;
    Ok(tape.macs().clone())
}

/// MACs tallied by recording the pyramid module on a shape-only tape.
pub fn count_pnl(shape: Shape5, cfg: &PnlConfig) -> Result<MacCounter> {
    cfg.check_input(shape)?;
    let cp = cfg.c_prime(shape.c);
    let mut tape = GradTape::counting();
    let x = tape.shaped_input(shape);
    let vars = shape_vars(&mut tape, cp, cfg.pairwise);
    let qk = (cfg.comb == CombMode::ScaledDotAttention)
        .then(|| (shape_leaf(&mut tape, &[cp, cp]), shape_leaf(&mut tape, &[cp, cp])));
    record_pnl(&mut tape, x, &vars, qk, cfg)?;
    Ok(tape.macs().clone())
}

/// Runs the block for real and returns its output with the MAC tally.
pub fn instrument_nl_block(x: &VideoFeature, p: &NonLocalParams) -> Result<(VideoFeature, MacCounter)> {
    let mut tape = GradTape::with_dtype(x.dtype());
    let xv = tape.input(x, false);
    let vars = p.register(&mut tape, false);
    let z = record_nl_block(&mut tape, xv, &vars, p.kind())?;
    Ok((tape.feature(z)?, tape.macs().clone()))
}

pub fn instrument_pnl(x: &VideoFeature, m: &PnlModule) -> Result<(VideoFeature, MacCounter)> {
    let mut tape = GradTape::with_dtype(m.cfg.dtype);
    let xv = tape.input(x, false);
    let (z, _) = m.record(&mut tape, xv, false)?;
    Ok((tape.feature(z)?, tape.macs().clone()))
}

/// Exact rational rendered as decimal strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationalRepr {
    pub num: String,
    pub den: String,
}

impl From<&BigRational> for RationalRepr {
    fn from(r: &BigRational) -> Self {
        RationalRepr {
            num: r.numer().to_string(),
            den: r.denom().to_string(),
        }
    }
}

impl RationalRepr {
    pub fn to_rational(&self) -> Result<BigRational> {
        let parse = |s: &str| {
            s.parse::<BigInt>()
                .map_err(|e| PnlError::config(format!("bad rational component '{s}': {e}")))
        };
        let den = parse(&self.den)?;
        if den.is_zero() {
            return Err(PnlError::config("rational with zero denominator"));
        }
        Ok(BigRational::new(parse(&self.num)?, den))
    }
}

fn fmt_rational(r: &BigRational) -> String {
    if r.is_integer() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

/// NL block versus pyramid module at one input size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostReport {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    #[serde(rename = "N")]
    pub positions: u64,
    pub n: usize,
    pub kind: PairwiseKind,
    pub comb: CombMode,
    pub flops_convention: String,
    pub paper_literal_nl: RationalRepr,
    pub paper_literal_nl_k: Vec<RationalRepr>,
    pub paper_literal_pnl_dep: RationalRepr,
    pub pnl_dep_coefficient_embs: RationalRepr,
    pub pnl_dep_coefficient_matmul: RationalRepr,
    pub mac_exact_nl: u128,
    pub mac_exact_pnl: u128,
    pub instrumented_nl: u128,
    pub instrumented_pnl: u128,
    pub params_nl: u64,
    pub params_pnl: u64,
}

pub const FLOPS_CONVENTION: &str = "counts are multiply-accumulates (MAC); FLOPs = 2 x MAC";

/// Builds the report for a batch of one `T×H×W×C` feature.
pub fn compare_report(t: usize, h: usize, w: usize, c: usize, n: usize, kind: PairwiseKind, comb: CombMode) -> Result<CostReport> {
    let shape = Shape5::new(1, t, h, w, c)?;
    let cfg = PnlConfig::basic(n, kind, comb)?;
    cfg.check_input(shape)?;
    let params_nl = param_count_nl(c, kind)?;
    let positions = shape.positions() as u64;
    let (ce, cm) = pnl_dep_coefficients(n as u64);
    let report = CostReport {
        t,
        h,
        w,
        c,
        positions,
        n,
        kind,
        comb,
        flops_convention: FLOPS_CONVENTION.to_string(),
        paper_literal_nl: (&cost_nl(c as u64, positions)).into(),
        paper_literal_nl_k: (0..n as u32)
            .map(|k| (&cost_nl_k(c as u64, positions, n as u64, k)).into())
            .collect(),
        paper_literal_pnl_dep: (&cost_pnl_dep(c as u64, positions, n as u64)).into(),
        pnl_dep_coefficient_embs: (&ce).into(),
        pnl_dep_coefficient_matmul: (&cm).into(),
        mac_exact_nl: mac_exact_nl(shape, kind),
        mac_exact_pnl: mac_exact_pnl(shape, &cfg)?,
        instrumented_nl: count_nl(shape, kind)?.total(),
        instrumented_pnl: count_pnl(shape, &cfg)?.total(),
        params_nl,
        params_pnl: param_count_pnl(c, &cfg)?,
    };
    Ok(report)
}

impl CostReport {
    fn rational(r: &RationalRepr) -> BigRational {
        r.to_rational().expect("report rationals are well formed")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let nl = Self::rational(&self.paper_literal_nl);
        let dep = Self::rational(&self.paper_literal_pnl_dep);
        let ce = fmt_rational(&Self::rational(&self.pnl_dep_coefficient_embs));
        let cm = fmt_rational(&Self::rational(&self.pnl_dep_coefficient_matmul));
        let _ = writeln!(
            s,
            "cost report: T={} H={} W={} C={} N={} n={} kind={} comb={}",
            self.t, self.h, self.w, self.c, self.positions, self.n, self.kind, self.comb
        );
        let _ = writeln!(s, "convention: {}", self.flops_convention);
        let _ = writeln!(s, "closed form (exact):");
        let _ = writeln!(s, "  cost_nl      = 2C^3N + CN^2 = {}", fmt_rational(&nl));
        for (k, v) in self.paper_literal_nl_k.iter().enumerate() {
            let _ = writeln!(s, "  cost_nl_{k}    = {}", fmt_rational(&Self::rational(v)));
        }
        let _ = writeln!(s, "  cost_pnl_dep = {ce}*2C^3N + {cm}*CN^2 = {}", fmt_rational(&dep));
        let _ = writeln!(s, "  coefficients: {ce} on 2C^3N, {cm} on CN^2");
        let _ = writeln!(s, "  ratio pnl_dep/nl = {}", fmt_rational(&(dep / nl)));
        let _ = writeln!(s, "mac-exact:");
        let _ = writeln!(
            s,
            "  nl  MAC = {} (FLOPs {}), instrumented = {}",
            self.mac_exact_nl,
            2 * self.mac_exact_nl,
            self.instrumented_nl
        );
        let _ = writeln!(
            s,
            "  pnl MAC = {} (FLOPs {}), instrumented = {}",
            self.mac_exact_pnl,
            2 * self.mac_exact_pnl,
            self.instrumented_pnl
        );
        let _ = writeln!(s, "params: nl = {}, pnl = {}", self.params_nl, self.params_pnl);
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let r = |v: &RationalRepr| format!("{}/{}", v.num, v.den);
        let row: Vec<(&str, String)> = vec![
            ("t", self.t.to_string()),
            ("h", self.h.to_string()),
            ("w", self.w.to_string()),
            ("c", self.c.to_string()),
            ("N", self.positions.to_string()),
            ("n", self.n.to_string()),
            ("kind", self.kind.to_string()),
            ("comb", self.comb.to_string()),
            ("paper_literal_nl", r(&self.paper_literal_nl)),
            ("paper_literal_pnl_dep", r(&self.paper_literal_pnl_dep)),
            ("pnl_dep_coefficient_embs", r(&self.pnl_dep_coefficient_embs)),
            ("pnl_dep_coefficient_matmul", r(&self.pnl_dep_coefficient_matmul)),
            ("mac_exact_nl", self.mac_exact_nl.to_string()),
            ("mac_exact_pnl", self.mac_exact_pnl.to_string()),
            ("flops_nl", (2 * self.mac_exact_nl).to_string()),
            ("flops_pnl", (2 * self.mac_exact_pnl).to_string()),
            ("instrumented_nl", self.instrumented_nl.to_string()),
            ("instrumented_pnl", self.instrumented_pnl.to_string()),
            ("params_nl", self.params_nl.to_string()),
            ("params_pnl", self.params_pnl.to_string()),
        ];
        let csv_err = |e: csv::Error| PnlError::config(format!("csv: {e}"));
        wtr.write_record(row.iter().map(|(k, _)| *k)).map_err(csv_err)?;
        wtr.write_record(row.iter().map(|(_, v)| v.as_str())).map_err(csv_err)?;
        let bytes = wtr.into_inner().map_err(|e| PnlError::config(format!("csv: {e}")))?;
        Ok(format!("# {}\n{}", self.flops_convention, String::from_utf8_lossy(&bytes)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
