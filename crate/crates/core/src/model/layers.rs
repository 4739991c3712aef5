//! Parameterized building blocks. Each block holds [`ParamId`]s into the
//! detector's store and is applied to tape variables bound from that store.

use rand::Rng as _;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::rng::Rng;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Parameter initialization helper.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
}

impl Init<'_> {
    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> ParamId {
        let t = Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound));
        self.store.insert(name, t)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> ParamId {
        self.store.insert(name, Tensor::full(shape, value))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(init: &mut Init<'_>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Linear {
            w: init.uniform(format!("{name}.w"), &[fan_in, fan_out], bound),
            b: init.constant(format!("{name}.b"), &[fan_out], 0.0),
        }
    }

    pub fn zeros(init: &mut Init<'_>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: init.constant(format!("{name}.w"), &[fan_in, fan_out], 0.0),
            b: init.constant(format!("{name}.b"), &[fan_out], 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w.0])?;
        tape.add(y, p[self.b.0])
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        Norm {
            gain: init.constant(format!("{name}.gain"), &[dim], 1.0),
            bias: init.constant(format!("{name}.bias"), &[dim], 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, LN_EPS)?;
        let g = tape.mul(n, p[self.gain.0])?;
        tape.add(g, p[self.bias.0])
    }
}

#[derive(Debug, Clone)]
pub(crate) struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, hidden: usize) -> Self {
        FeedForward {
            up: Linear::new(init, &format!("{name}.up"), dim, hidden),
            down: Linear::new(init, &format!("{name}.down"), hidden, dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let h = self.up.forward(tape, p, x)?;
        let h = tape.relu(h);
        self.down.forward(tape, p, h)
    }
}

/// Multi-head attention with an optional additive logit bias shared by all heads.
#[derive(Debug, Clone)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

pub(crate) struct AttentionOut {
    pub out: Var,
    /// Per-head attention probabilities, `[Nq, Nk]` each.
    pub probs: Vec<Var>,
}

impl Attention {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize) -> Self {
        Attention {
            q: Linear::new(init, &format!("{name}.q"), dim, dim),
            k: Linear::new(init, &format!("{name}.k"), dim, dim),
            v: Linear::new(init, &format!("{name}.v"), dim, dim),
            o: Linear::new(init, &format!("{name}.o"), dim, dim),
            heads,
        }
    }

    /// `softmax(Q_h K_hᵀ / sqrt(d_h) + bias) V_h` per head, concatenated and projected.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        query: Var,
        key: Var,
        value: Var,
        bias: Option<Var>,
    ) -> Result<AttentionOut> {
        let dim = tape.shape(query)[1];
        let dh = dim / self.heads;
        let q = self.q.forward(tape, p, query)?;
        let k = self.k.forward(tape, p, key)?;
        let v = self.v.forward(tape, p, value)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice(q, 1, h * dh, dh)?;
            let kh = tape.slice(k, 1, h * dh, dh)?;
            let vh = tape.slice(v, 1, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let logits = tape.matmul(qh, kt)?;
            let mut logits = tape.scale(logits, scale);
            if let Some(b) = bias {
                logits = tape.add(logits, b)?;
            }
            let a = tape.softmax(logits, 1)?;
            probs.push(a);
            heads.push(tape.matmul(a, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
        let out = self.o.forward(tape, p, cat)?;
        Ok(AttentionOut { out, probs })
    }
}

/// 3x3, stride-2, padding-1 convolution + ReLU over a `[C, H, W]` input.
/// Returns `[Ho*Wo, C_out]` tokens.
#[derive(Debug, Clone)]
pub(crate) struct ConvBlock {
    pub lin: Linear,
}

impl ConvBlock {
    pub fn new(init: &mut Init<'_>, name: &str, c_in: usize, c_out: usize) -> Self {
        ConvBlock {
            lin: Linear::new(init, name, c_in * 9, c_out),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let cols = tape.im2col(x, 3, 2, 1)?;
        let y = self.lin.forward(tape, p, cols)?;
        Ok(tape.relu(y))
    }
}

/// Fixed 2-D sinusoidal encoding, `[h*w, dim]`: first half encodes the row,
/// second half the column.
pub(crate) fn sine_position_encoding(h: usize, w: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let feats = |pos: f64, out: &mut [f64]| {
        for (i, o) in out.iter_mut().enumerate() {
            let freq = 10000f64.powf((2 * (i / 2)) as f64 / half as f64);
            let a = pos / freq;
            *o = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    };
    let mut data = vec![0.0; h * w * dim];
    let two_pi = std::f64::consts::TAU;
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * dim..(y * w + x + 1) * dim];
            let (ry, rx) = row.split_at_mut(half);
            feats((y as f64 + 0.5) / h as f64 * two_pi, ry);
            feats((x as f64 + 0.5) / w as f64 * two_pi, &mut rx[..half]);
        }
    }
    Tensor::new(&[h * w, dim], data).expect("sizes agree")
}
