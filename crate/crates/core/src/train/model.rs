//! A deliberately small classifier: a strided 3×3 spatial convolution,
//! spatial average pooling, an optional context block, global average
//! pooling and a linear head.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PnlError, Result};
use crate::nonlocal::{record_nl_block, NonLocalParams, PairwiseKind};
use crate::pnl::{PnlConfig, PnlModule};
use crate::tensor::{GradTape, Matrix, Var};

/// What sits between the convolution and the pooling head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlockChoice {
    None,
    Nl(PairwiseKind),
    Pnl(PnlConfig),
}

impl BlockChoice {
    pub fn name(&self) -> &'static str {
        match self {
            BlockChoice::None => "none",
            BlockChoice::Nl(_) => "nl",
            BlockChoice::Pnl(_) => "pnl",
        }
    }
}

impl fmt::Display for BlockChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockChoice::None => f.write_str("none"),
            BlockChoice::Nl(k) => write!(f, "nl({k})"),
            BlockChoice::Pnl(c) => write!(f, "pnl(n={}, {}, {})", c.n_scales(), c.pairwise, c.comb),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneShape {
    pub c_in: usize,
    pub hidden: usize,
    pub classes: usize,
    pub stride: usize,
    /// Spatial average-pooling factor applied before the block.
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    None,
    Nl(NonLocalParams),
    Pnl(PnlModule),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub shape: BackboneShape,
    pub conv_w: Matrix,
    pub conv_b: Vec<f64>,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
    pub block: Block,
}

/// Output of [`Model::record`].
pub struct Recorded {
    pub logits: Var,
    /// Pooled features before the head, `[B, hidden]`.
    pub pooled: Var,
    /// Parameter leaves in [`Model::params_mut`] order.
    pub params: Vec<Var>,
}

impl Model {
    /// Convolution weights depend only on `seed`, so every block choice
    /// shares the same backbone. The head starts at zero.
    pub fn init(shape: BackboneShape, block: BlockChoice, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = 9 * shape.c_in;
        let bound = (6.0 / fan_in as f64).sqrt();
        let conv_w = Matrix::from_fn(fan_in, shape.hidden, |_, _| rng.gen_range(-bound..bound));
        let conv_b = vec![0.0; shape.hidden];
        let block_seed = seed ^ 0x9e37_79b9_7f4a_7c15;
        let block = match block {
            BlockChoice::None => Block::None,
            BlockChoice::Nl(kind) => Block::Nl(NonLocalParams::init(shape.hidden, kind, block_seed)?),
            BlockChoice::Pnl(cfg) => Block::Pnl(PnlModule::init(shape.hidden, cfg, block_seed)?),
        };
        Ok(Model {
            shape,
            conv_w,
            conv_b,
            head_w: Matrix::zeros(shape.hidden, shape.classes),
            head_b: vec![0.0; shape.classes],
            block,
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.conv_w.data_mut(),
            self.conv_b.as_mut_slice(),
            self.head_w.data_mut(),
            self.head_b.as_mut_slice(),
        ];
        match &mut self.block {
            Block::None => {}
            Block::Nl(p) => out.extend(p.named_mut().into_iter().map(|(_, v)| v)),
            Block::Pnl(m) => out.extend(m.named_mut().into_iter().map(|(_, v)| v)),
        }
        out
    }

    pub fn param_count(&self) -> u64 {
        let backbone = self.conv_w.data().len() + self.conv_b.len() + self.head_w.data().len() + self.head_b.len();
        backbone as u64
            + match &self.block {
                Block::None => 0,
                Block::Nl(p) => p.param_count(),
                Block::Pnl(m) => m.param_count(),
            }
    }

    /// Records logits for a `[B,T,H,W,c_in]` clip batch.
    pub fn record(&self, tape: &mut GradTape, x: Var, requires_grad: bool) -> Result<Recorded> {
        if tape.shape(x).len() != 5 || tape.shape(x)[4] != self.shape.c_in {
            return Err(PnlError::shape(format!(
                "model expects [B,T,H,W,{}], got {:?}",
                self.shape.c_in,
                tape.shape(x)
            )));
        }
        let conv_w = tape.matrix(&self.conv_w, requires_grad);
        let conv_b = tape.vector(&self.conv_b, requires_grad);
        let head_w = tape.matrix(&self.head_w, requires_grad);
        let head_b = tape.vector(&self.head_b, requires_grad);
        let mut params = vec![conv_w, conv_b, head_w, head_b];

        let patches = tape.unfold3x3(x, self.shape.stride)?;
        let h = tape.channel_linear(patches, conv_w)?;
        let h = tape.add_bias(h, conv_b)?;
        let h = tape.relu(h);
        let h = if self.shape.pool > 1 { tape.avg_pool(h, self.shape.pool)? } else { h };
        let h = match &self.block {
            Block::None => h,
            Block::Nl(p) => {
                let vars = p.register(tape, requires_grad);
                params.extend(vars.ordered());
                record_nl_block(tape, h, &vars, p.kind())?
            }
            Block::Pnl(m) => {
                let (out, leaves) = m.record(tape, h, requires_grad)?;
                params.extend(leaves);
                out
            }
        };
        let pooled = tape.mean_positions(h)?;
        let logits = tape.channel_linear(pooled, head_w)?;
        let logits = tape.add_bias(logits, head_b)?;
        Ok(Recorded { logits, pooled, params })
    }
}

/// Index of the largest logit in each row; the lowest index wins ties.
pub fn argmax_rows(logits: &[f64], k: usize) -> Vec<usize> {
    logits
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
