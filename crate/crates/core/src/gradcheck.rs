//! Central finite differences and the relative-error metric used to compare
//! them against tape adjoints, plus ready-made checks for the blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fcomb::record_attend;
use crate::nonlocal::{record_nl_block, NlVars, NonLocalParams, PairwiseKind};
use crate::pnl::{record_pnl, PnlModule};
use crate::tensor::{GradTape, Var, VideoFeature};

/// Default perturbation for binary64 checks.
pub const STEP: f64 = 1e-5;
/// Acceptance bound on [`relative_error`].
pub const TOLERANCE: f64 = 1e-4;

/// Numerical gradient of `loss` with respect to `tensors[which]`:
/// `(L(x + h·e_i) − L(x − h·e_i)) / 2h` for every element `i`.
pub fn central_difference<F>(tensors: &[Vec<f64>], which: usize, step: f64, loss: F) -> Vec<f64>
where
    F: Fn(&[Vec<f64>]) -> f64,
{
    let mut work = tensors.to_vec();
    (0..tensors[which].len())
        .map(|i| {
            let orig = work[which][i];
            work[which][i] = orig + step;
            let up = loss(&work);
            work[which][i] = orig - step;
            let down = loss(&work);
            work[which][i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, and 0 when both are exactly zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Per-tensor outcome of a gradient check.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GradReport {
    pub name: String,
    pub relative_error: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.relative_error < TOLERANCE
    }
}

/// A differentiable input to [`check_graph`].
#[derive(Debug, Clone)]
pub struct Leaf {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Leaf {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        Leaf {
            name: name.into(),
            dims,
            data,
        }
    }
}

/// Compares tape adjoints with central differences for every leaf of the
/// graph produced by `build`. The scalar loss is `Σ r ⊙ output` with `r`
/// drawn uniformly from `[-1, 1]` using `seed`.
pub fn check_graph<F>(leaves: &[Leaf], seed: u64, build: F) -> Result<Vec<GradReport>>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let run = |vals: &[Vec<f64>]| -> Result<(GradTape, Vec<Var>, Var)> {
        let mut tape = GradTape::new();
        let vars = leaves
            .iter()
            .zip(vals)
            .map(|(l, v)| tape.leaf(&l.dims, v.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let base: Vec<Vec<f64>> = leaves.iter().map(|l| l.data.clone()).collect();
    let (tape, vars, out) = run(&base)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..tape.value(out).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let adj = tape.backward(out, &weights)?;
    let loss = |vals: &[Vec<f64>]| -> f64 {
        let (t, _, o) = run(vals).expect("graph rebuilt with perturbed leaves");
        t.value(o).iter().zip(&weights).map(|(a, b)| a * b).sum()
    };
    Ok(leaves
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let numeric = central_difference(&base, i, STEP, loss);
            let analytic = adj.get_or_zeros(vars[i], l.data.len());
            GradReport {
                name: l.name.clone(),
                relative_error: relative_error(&analytic, &numeric),
            }
        })
        .collect())
}

fn param_leaves(named: Vec<(&'static str, Vec<usize>, &[f64])>) -> Vec<Leaf> {
    named
        .into_iter()
        .map(|(n, d, v)| Leaf::new(n, d, v.to_vec()))
        .collect()
}

fn input_leaf(x: &VideoFeature) -> Leaf {
    Leaf::new("x", x.shape().dims().to_vec(), x.data().to_vec())
}

/// Rebuilds handles from leaves laid out in `NonLocalParams::named` order.
fn nl_vars(kind: PairwiseKind, v: &[Var]) -> NlVars {
    let mut it = v.iter().copied();
    let emb = kind.uses_embeddings();
    let theta = emb.then(|| it.next().unwrap());
    let phi = emb.then(|| it.next().unwrap());
    let g = it.next().unwrap();
    let z = it.next().unwrap();
    let f = (kind == PairwiseKind::Concatenation).then(|| it.next().unwrap());
    NlVars { theta, phi, g, z, f }
}

/// Gradient check of `x + w_z·nl(x)` over the input and every parameter.
pub fn check_nl_block(x: &VideoFeature, p: &NonLocalParams, seed: u64) -> Result<Vec<GradReport>> {
    let mut leaves = vec![input_leaf(x)];
    leaves.extend(param_leaves(p.named()));
    let kind = p.kind();
    check_graph(&leaves, seed, |tape, v| record_nl_block(tape, v[0], &nl_vars(kind, &v[1..]), kind))
}

/// Gradient check of the full pyramid module.
pub fn check_pnl(x: &VideoFeature, m: &PnlModule, seed: u64) -> Result<Vec<GradReport>> {
    let mut leaves = vec![input_leaf(x)];
    leaves.extend(param_leaves(m.named()));
    let kind = m.cfg.pairwise;
    let n_nl = m.shared.named().len();
    check_graph(&leaves, seed, |tape, v| {
        let vars = nl_vars(kind, &v[1..1 + n_nl]);
        let qk = (v.len() == 3 + n_nl).then(|| (v[1 + n_nl], v[2 + n_nl]));
        record_pnl(tape, v[0], &vars, qk, &m.cfg)
    })
}

/// Gradient check of scale attention over the aligned inputs, `w_q` and `w_k`.
pub fn check_attend(aligned: &[VideoFeature], w_q: &[f64], w_k: &[f64], seed: u64) -> Result<Vec<GradReport>> {
    let c = aligned[0].shape().c;
    let mut leaves: Vec<Leaf> = aligned
        .iter()
        .enumerate()
        .map(|(i, a)| Leaf::new(format!("aligned_{i}"), a.shape().dims().to_vec(), a.data().to_vec()))
        .collect();
    leaves.push(Leaf::new("w_q", vec![c, c], w_q.to_vec()));
    leaves.push(Leaf::new("w_k", vec![c, c], w_k.to_vec()));
    let n = aligned.len();
    check_graph(&leaves, seed, |tape, v| Ok(record_attend(tape, &v[..n], v[n], v[n + 1])?.0))
}
