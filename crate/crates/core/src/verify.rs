//! Run configuration and the self-check suite behind `pnl verify`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costmodel::{instrument_nl_block, instrument_pnl, mac_exact_nl, mac_exact_pnl};
use crate::error::{PnlError, Result};
use crate::fcomb::{combine, CombMode, FcombParams};
use crate::gradcheck::{check_nl_block, check_pnl, TOLERANCE};
use crate::nonlocal::{brute_force_oracle, nl_operation, NonLocalParams, PairwiseKind};
use crate::pnl::{build_pyramid, PnlConfig, PnlModule, PoolMode};
use crate::tensor::{channel_linear, upsample_nearest_spatial, DType, Shape5, VideoFeature};

/// Oracle agreement bound in binary64.
pub const ORACLE_TOLERANCE: f64 = 1e-10;
/// Oracle agreement bound, relative to `max(1, |oracle|)`, in simulated binary32.
pub const ORACLE_TOLERANCE_F32: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub b: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub shape: ShapeSpec,
    pub n_scales: usize,
    pub pairwise: PairwiseKind,
    pub comb: CombMode,
    pub pool: PoolMode,
    pub dtype: DType,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            shape: ShapeSpec {
                b: 1,
                t: 2,
                h: 4,
                w: 4,
                c: 8,
            },
            n_scales: 2,
            pairwise: PairwiseKind::EmbeddedGaussian,
            comb: CombMode::ScaledDotAttention,
            pool: PoolMode::Average,
            dtype: DType::F64,
            seed: 0,
        }
    }
}

/// Byte offset of a 1-based `(line, column)` position in `text`.
fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let before: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (before + column.saturating_sub(1)) as u64
}

impl RunConfig {
    /// Parses and validates a JSON document; `path` is used in error messages.
    pub fn from_json(text: &str, path: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| PnlError::Parse {
            path: path.to_string(),
            offset: byte_offset(text, e.line(), e.column()),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PnlError::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn shape5(&self) -> Result<Shape5> {
        let s = self.shape;
        Shape5::new(s.b, s.t, s.h, s.w, s.c)
    }

    pub fn pnl_config(&self) -> Result<PnlConfig> {
        PnlConfig::new(self.n_scales, self.pairwise, self.comb, self.pool, self.dtype)
    }

    pub fn validate(&self) -> Result<()> {
        self.pnl_config()?.check_input(self.shape5()?)
    }

    /// Input drawn uniformly from `[-1, 1]` with the config seed.
    pub fn random_input(&self) -> Result<VideoFeature> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok(VideoFeature::random_uniform(self.shape5()?, -1.0, 1.0, &mut rng))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst deviation observed, when the check is numeric.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    pub detail: String,
}

impl CheckResult {
    fn numeric(name: &str, metric: f64, bound: f64, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            passed: metric <= bound,
            metric: Some(metric),
            bound: Some(bound),
            detail,
        }
    }

    fn exact(name: &str, passed: bool, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            passed,
            metric: None,
            bound: None,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub config: RunConfig,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn failures(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            match (c.metric, c.bound) {
                (Some(m), Some(b)) => out.push_str(&format!("{status} {:<20} {m:.3e} <= {b:.0e}  {}\n", c.name, c.detail)),
                _ => out.push_str(&format!("{status} {:<20} {}\n", c.name, c.detail)),
            }
        }
        out.push_str(if self.passed { "all checks passed\n" } else { "some checks failed\n" });
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    /// Module under test; a fresh initialization from the config seed if absent.
    pub module: Option<PnlModule>,
    /// Require the module to be an identity mapping even when it was loaded.
    pub expect_identity: bool,
}

fn max_deviation(got: &VideoFeature, want: &VideoFeature, dtype: DType) -> f64 {
    got.data()
        .iter()
        .zip(want.data())
        .map(|(g, w)| match dtype {
            DType::F64 => (g - w).abs(),
            DType::F32 => (g - w).abs() / w.abs().max(1.0),
        })
        .fold(0.0, f64::max)
}

/// `x + f_comb(upsample(w_z · nl(pool(group_k))))` from primitives, with the
/// brute-force loops standing in for the non-local operation.
pub fn composed_oracle(x: &VideoFeature, m: &PnlModule) -> Result<VideoFeature> {
    let mut f64_cfg = m.cfg;
    f64_cfg.dtype = DType::F64;
    let aligned = build_pyramid(x, &f64_cfg)?
        .into_iter()
        .map(|level| {
            let y = brute_force_oracle(&level.tensor, &m.shared)?;
            let y = channel_linear(&y, m.shared.w_z(), None)?;
            if level.k == 0 {
                Ok(y)
            } else {
                upsample_nearest_spatial(&y, 1 << level.k)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let combined = combine(&aligned, &m.comb)?;
    let data = x.data().iter().zip(combined.data()).map(|(a, b)| a + b).collect();
    VideoFeature::new(x.shape(), data)
}

/// Module with every parameter randomized, so no check passes trivially.
fn randomized(m: &PnlModule, seed: u64, w_z_bound: f64, attn_bound: f64) -> PnlModule {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut out = m.clone();
    out.shared.randomize_w_z(w_z_bound, &mut rng);
    if out.cfg.comb == CombMode::ScaledDotAttention {
        out.comb = FcombParams::random_attention(out.cfg.c_prime(m.c()), attn_bound, &mut rng);
    }
    out
}

fn oracle_nl(cfg: &RunConfig, x: &VideoFeature) -> Result<CheckResult> {
    let p = NonLocalParams::init(cfg.shape.c, cfg.pairwise, cfg.seed)?;
    let got = nl_operation(x, &p)?;
    let want = brute_force_oracle(x, &p)?;
    let dev = max_deviation(&got, &want, DType::F64);
    Ok(CheckResult::numeric(
        "oracle_nl",
        dev,
        ORACLE_TOLERANCE,
        format!("nl_operation vs explicit loops, {} over C={}", cfg.pairwise, cfg.shape.c),
    ))
}

fn oracle_pnl(cfg: &RunConfig, x: &VideoFeature, m: &PnlModule) -> Result<CheckResult> {
    let m = randomized(m, cfg.seed, 1.0, 1.0);
    let got = m.forward(&x.cast(cfg.dtype))?;
    let want = composed_oracle(x, &m)?;
    let bound = match cfg.dtype {
        DType::F64 => ORACLE_TOLERANCE,
        DType::F32 => ORACLE_TOLERANCE_F32,
    };
    Ok(CheckResult::numeric(
        "oracle_pnl",
        max_deviation(&got, &want, cfg.dtype),
        bound,
        format!("pnl_forward vs primitive composition, n={}, {}", cfg.n_scales, cfg.comb),
    ))
}

/// Scale attention sees only spatiotemporal means, which are near zero for
/// centred inputs and small `w_z`; its `w_q`, `w_k` gradients would then sit
/// at the level of finite-difference roundoff. The pyramid check therefore
/// shifts the input to `[0, 2]`, draws `w_z` from `±10` and keeps the
/// projections within `±0.3` so the softmax does not saturate.
fn gradient(cfg: &RunConfig, x: &VideoFeature, m: &PnlModule) -> Result<Vec<CheckResult>> {
    let m = randomized(m, cfg.seed, 10.0, 0.3);
    let shifted = VideoFeature::new(x.shape(), x.data().iter().map(|v| v + 1.0).collect())?;
    let mut nl = NonLocalParams::init(cfg.shape.c, cfg.pairwise, cfg.seed)?;
    nl.randomize_w_z(0.5, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut out = Vec::new();
    for (name, reports) in [
        ("gradient_nl_block", check_nl_block(x, &nl, cfg.seed)?),
        ("gradient_pnl", check_pnl(&shifted, &m, cfg.seed)?),
    ] {
        let worst = reports.iter().map(|r| r.relative_error).fold(0.0, f64::max);
        let detail = reports
            .iter()
            .map(|r| format!("{}={:.1e}", r.name, r.relative_error))
            .collect::<Vec<_>>()
            .join(" ");
        let mut r = CheckResult::numeric(name, worst, TOLERANCE, detail);
        r.passed = reports.iter().all(|r| r.passed());
        out.push(r);
    }
    Ok(out)
}

fn identity(cfg: &RunConfig, x: &VideoFeature, m: &PnlModule) -> Result<CheckResult> {
    let x = x.cast(cfg.dtype);
    let zero_wz = m.shared.is_identity_init();
    let exact = m.forward(&x)?.bitwise_eq(&x);
    let detail = match (zero_wz, exact) {
        (true, true) => "w_z = 0 and output equals input bitwise".to_string(),
        (false, _) => "w_z is not zero".to_string(),
        (true, false) => "w_z = 0 but output differs from input".to_string(),
    };
    Ok(CheckResult::exact("identity_init", zero_wz && exact, detail))
}

fn cost(cfg: &RunConfig, x: &VideoFeature, m: &PnlModule) -> Result<CheckResult> {
    let shape = cfg.shape5()?;
    let nl = NonLocalParams::init(cfg.shape.c, cfg.pairwise, cfg.seed)?;
    let (_, nl_count) = instrument_nl_block(x, &nl)?;
    let (_, pnl_count) = instrument_pnl(x, m)?;
    let (nl_exact, pnl_exact) = (mac_exact_nl(shape, cfg.pairwise), mac_exact_pnl(shape, &m.cfg)?);
    let ok = nl_count.total() == nl_exact && pnl_count.total() == pnl_exact;
    Ok(CheckResult::exact(
        "cost_consistency",
        ok,
        format!(
            "nl instrumented {} / closed form {}; pnl instrumented {} / closed form {}",
            nl_count.total(),
            nl_exact,
            pnl_count.total(),
            pnl_exact
        ),
    ))
}

/// Runs oracle, gradient, identity and cost checks for `cfg`.
pub fn run_verify(cfg: &RunConfig, opts: &VerifyOptions) -> Result<VerifyReport> {
    cfg.validate()?;
    let pcfg = cfg.pnl_config()?;
    let loaded = opts.module.is_some();
    let module = match &opts.module {
        Some(m) => {
            if m.c() != cfg.shape.c || m.cfg.n_scales() != pcfg.n_scales() || m.cfg.pairwise != pcfg.pairwise || m.cfg.comb != pcfg.comb {
                return Err(PnlError::config("checkpoint does not match the run configuration"));
            }
            let mut m = m.clone();
            m.cfg = pcfg;
            m
        }
        None => PnlModule::init(cfg.shape.c, pcfg, cfg.seed)?,
    };
    let x = cfg.random_input()?;
    let mut checks = vec![oracle_nl(cfg, &x)?, oracle_pnl(cfg, &x, &module)?];
    checks.extend(gradient(cfg, &x, &module)?);
    if !loaded || opts.expect_identity {
        checks.push(identity(cfg, &x, &module)?);
    }
    checks.push(cost(cfg, &x, &module)?);
    Ok(VerifyReport {
        config: *cfg,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_passes() {
        let report = run_verify(&RunConfig::default(), &VerifyOptions::default()).unwrap();
        assert!(report.passed, "{}", report.to_text());
    }

    #[test]
    fn corrupted_w_z_names_identity_failure() {
        let cfg = RunConfig::default();
        let mut m = PnlModule::init(8, cfg.pnl_config().unwrap(), 0).unwrap();
        m.shared.randomize_w_z(0.1, &mut ChaCha8Rng::seed_from_u64(1));
        let opts = VerifyOptions {
            module: Some(m.clone()),
            expect_identity: true,
        };
        let report = run_verify(&cfg, &opts).unwrap();
        assert_eq!(report.failures(), ["identity_init"]);
        let report = run_verify(&cfg, &VerifyOptions { module: Some(m), expect_identity: false }).unwrap();
        assert!(report.passed);
    }

    #[test]
    fn config_parsing() {
        let text = RunConfig::default().to_json();
        assert_eq!(RunConfig::from_json(&text, "c.json").unwrap(), RunConfig::default());
        let extra = text.replacen('{', "{\"bogus\": 1,", 1);
        assert!(matches!(RunConfig::from_json(&extra, "c.json"), Err(PnlError::Parse { .. })));
        match RunConfig::from_json("{\n  \"shape\": ]", "c.json") {
            Err(PnlError::Parse { offset, .. }) => assert_eq!(offset, 13),
            other => panic!("{other:?}"),
        }
        let bad = text.replace("\"c\": 8", "\"c\": 6");
        assert!(matches!(RunConfig::from_json(&bad, "c.json"), Err(PnlError::Config(_))));
    }

    #[test]
    fn binary32_config_passes() {
        let cfg = RunConfig {
            dtype: DType::F32,
            comb: CombMode::VanillaConcat,
            pairwise: PairwiseKind::DotProduct,
            ..RunConfig::default()
        };
        let report = run_verify(&cfg, &VerifyOptions::default()).unwrap();
        assert!(report.passed, "{}", report.to_text());
    }
}
