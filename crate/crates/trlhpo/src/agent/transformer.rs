//! Decoder-style transformer used by both the actor and the critic:
//! input projection, sinusoidal positional encoding, causally masked
//! multi-head self-attention blocks with pre-norm and residuals, and a
//! squashed output head read at one sequence position.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::tensor::{Tape, Tensor, TensorError, ValueId};

pub const ACTION_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TransformerConfig {
    /// Width of every token embedding.
    pub embed_dim: usize,
    /// Attention heads; must divide `embed_dim`.
    pub heads: usize,
    /// Number of attention + feed-forward blocks.
    pub blocks: usize,
    /// Feed-forward hidden width as a multiple of `embed_dim`.
    pub ffn_mult: usize,
    /// Width of one input token before projection.
    pub input_dim: usize,
    /// Tokens in the input sequence (excluding the critic's action token).
    pub seq_len: usize,
}

impl TransformerConfig {
    pub fn base() -> Self {
        TransformerConfig {
            embed_dim: 64,
            heads: 4,
            blocks: 2,
            ffn_mult: 4,
            input_dim: crate::env::IMR_DIM,
            seq_len: crate::space::MAX_LAYERS,
        }
    }

    /// Shrunk dimensions for gradient checking.
    pub fn tiny() -> Self {
        TransformerConfig { embed_dim: 8, heads: 2, blocks: 2, ffn_mult: 2, input_dim: 8, seq_len: 6 }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.embed_dim * self.ffn_mult
    }
}

/// Sinusoidal position table: `PE[pos, 2i] = sin(pos / 10000^(2i/dim))`
/// and `PE[pos, 2i+1] = cos` of the same angle.
pub fn positional_encoding(seq_len: usize, dim: usize) -> Result<Tensor, TensorError> {
    if dim % 2 != 0 {
        return Err(TensorError::OddDim { op: "positional_encoding", dim });
    }
    let mut data = vec![0.0; seq_len * dim];
    for pos in 0..seq_len {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = angle.sin();
            data[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![seq_len, dim], data)
}

/// Attention weights from one forward pass: `heads x seq x seq`,
/// read straight off the tape nodes the pass produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub heads: usize,
    pub seq: usize,
    pub data: Vec<f64>,
}

impl Attention {
    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let base = (head * self.seq + query) * self.seq;
        &self.data[base..base + self.seq]
    }

    /// Head-averaged attention row for one query position.
    pub fn head_avg_row(&self, query: usize) -> Vec<f64> {
        let mut avg = vec![0.0; self.seq];
        for h in 0..self.heads {
            for (a, v) in avg.iter_mut().zip(self.row(h, query)) {
                *a += v / self.heads as f64;
            }
        }
        avg
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    fn init(rng: &mut ChaCha12Rng, inputs: usize, outputs: usize) -> Self {
        Self::init_scaled(rng, inputs, outputs, (6.0 / (inputs + outputs) as f64).sqrt())
    }

    /// Output heads start near zero so the squashed outputs begin at the
    /// center of their range instead of saturated.
    fn init_head(rng: &mut ChaCha12Rng, inputs: usize, outputs: usize) -> Self {
        Self::init_scaled(rng, inputs, outputs, 3e-3)
    }

    fn init_scaled(rng: &mut ChaCha12Rng, inputs: usize, outputs: usize, a: f64) -> Self {
        let data = (0..inputs * outputs).map(|_| rng.gen_range(-a..a)).collect();
        Linear {
            w: Tensor::new(vec![inputs, outputs], data).expect("linear shape").with_grad(),
            b: Tensor::zeros(vec![outputs]).with_grad(),
        }
    }
}

#[derive(Debug, Clone)]
struct LayerNormParams {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNormParams {
    fn init(dim: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::new(vec![dim], vec![1.0; dim]).expect("gamma").with_grad(),
            beta: Tensor::zeros(vec![dim]).with_grad(),
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNormParams,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNormParams,
    ffn1: Linear,
    ffn2: Linear,
}

/// Output squashing: the actor maps to `[0,1]^4`, the critic to `[-1,1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputSquash {
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone)]
pub struct TransformerNet {
    pub cfg: TransformerConfig,
    pub squash: OutputSquash,
    pub out_dim: usize,
    input_proj: Linear,
    action_proj: Option<Linear>,
    blocks: Vec<Block>,
    final_ln: LayerNormParams,
    head: Linear,
}

impl TransformerNet {
    /// Policy network: reads the next-empty-slot token, emits 4 values in
    /// `[0,1]`.
    pub fn actor(cfg: TransformerConfig, seed: u64) -> Self {
        Self::build(cfg, seed, OutputSquash::Sigmoid, ACTION_DIM, false)
    }

    /// Value network: the action joins as an extra token, whose final
    /// representation maps to one value in `[-1,1]`.
    pub fn critic(cfg: TransformerConfig, seed: u64) -> Self {
        Self::build(cfg, seed, OutputSquash::Tanh, 1, true)
    }

    fn build(
        cfg: TransformerConfig,
        seed: u64,
        squash: OutputSquash,
        out_dim: usize,
        with_action: bool,
    ) -> Self {
        assert_eq!(cfg.embed_dim % cfg.heads, 0, "heads must divide embed_dim");
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let e = cfg.embed_dim;
        let input_proj = Linear::init(&mut rng, cfg.input_dim, e);
        let action_proj = with_action.then(|| Linear::init(&mut rng, ACTION_DIM, e));
        let blocks = (0..cfg.blocks)
            .map(|_| Block {
                ln1: LayerNormParams::init(e),
                wq: Linear::init(&mut rng, e, e),
                wk: Linear::init(&mut rng, e, e),
                wv: Linear::init(&mut rng, e, e),
                wo: Linear::init(&mut rng, e, e),
                ln2: LayerNormParams::init(e),
                ffn1: Linear::init(&mut rng, e, cfg.ffn_dim()),
                ffn2: Linear::init(&mut rng, cfg.ffn_dim(), e),
            })
            .collect();
        let final_ln = LayerNormParams::init(e);
        let head = Linear::init_head(&mut rng, e, out_dim);
        TransformerNet { cfg, squash, out_dim, input_proj, action_proj, blocks, final_ln, head }
    }

    /// Visits `(name, tensor)` for every parameter in a fixed order.
    pub fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        let visit_linear = |name: &str, l: &Linear, f: &mut dyn FnMut(&str, &Tensor)| {
            f(&format!("{name}.w"), &l.w);
            f(&format!("{name}.b"), &l.b);
        };
        visit_linear("input_proj", &self.input_proj, f);
        if let Some(ap) = &self.action_proj {
            visit_linear("action_proj", ap, f);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("blocks.{i}.ln1.g"), &b.ln1.gamma);
            f(&format!("blocks.{i}.ln1.b"), &b.ln1.beta);
            visit_linear(&format!("blocks.{i}.wq"), &b.wq, f);
            visit_linear(&format!("blocks.{i}.wk"), &b.wk, f);
            visit_linear(&format!("blocks.{i}.wv"), &b.wv, f);
            visit_linear(&format!("blocks.{i}.wo"), &b.wo, f);
            f(&format!("blocks.{i}.ln2.g"), &b.ln2.gamma);
            f(&format!("blocks.{i}.ln2.b"), &b.ln2.beta);
            visit_linear(&format!("blocks.{i}.ffn1"), &b.ffn1, f);
            visit_linear(&format!("blocks.{i}.ffn2"), &b.ffn2, f);
        }
        f("final_ln.g", &self.final_ln.gamma);
        f("final_ln.b", &self.final_ln.beta);
        visit_linear("head", &self.head, f);
    }

    /// Mutable variant of [`Self::for_each_param`], same order.
    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let visit_linear = |name: &str, l: &mut Linear, f: &mut dyn FnMut(&str, &mut Tensor)| {
            f(&format!("{name}.w"), &mut l.w);
            f(&format!("{name}.b"), &mut l.b);
        };
        visit_linear("input_proj", &mut self.input_proj, f);
        if let Some(ap) = &mut self.action_proj {
            visit_linear("action_proj", ap, f);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("blocks.{i}.ln1.g"), &mut b.ln1.gamma);
            f(&format!("blocks.{i}.ln1.b"), &mut b.ln1.beta);
            visit_linear(&format!("blocks.{i}.wq"), &mut b.wq, f);
            visit_linear(&format!("blocks.{i}.wk"), &mut b.wk, f);
            visit_linear(&format!("blocks.{i}.wv"), &mut b.wv, f);
            visit_linear(&format!("blocks.{i}.wo"), &mut b.wo, f);
            f(&format!("blocks.{i}.ln2.g"), &mut b.ln2.gamma);
            f(&format!("blocks.{i}.ln2.b"), &mut b.ln2.beta);
            visit_linear(&format!("blocks.{i}.ffn1"), &mut b.ffn1, f);
            visit_linear(&format!("blocks.{i}.ffn2"), &mut b.ffn2, f);
        }
        f("final_ln.g", &mut self.final_ln.gamma);
        f("final_ln.b", &mut self.final_ln.beta);
        visit_linear("head", &mut self.head, f);
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_param(&mut |n, _| names.push(n.to_string()));
        names
    }

    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.for_each_param(&mut |_, t| count += t.numel());
        count
    }

    /// Records every parameter on the tape. `trainable` leaves track
    /// gradients; otherwise parameters enter as constants (gradients still
    /// flow *through* them, e.g. to an upstream action).
    pub fn bind<'n>(&'n self, tape: &mut Tape, trainable: bool) -> BoundNet {
        let mut ids = Vec::new();
        self.for_each_param(&mut |_, t| {
            ids.push(if trainable { tape.leaf(t) } else { tape.constant(t) });
        });
        BoundNet { ids }
    }
}

/// Tape bindings for one net, in `for_each_param` order.
pub struct BoundNet {
    ids: Vec<ValueId>,
}

impl BoundNet {
    pub fn ids(&self) -> &[ValueId] {
        &self.ids
    }
}

/// Cursor over bound parameter ids, consumed in binding order.
struct BoundCursor<'a> {
    ids: &'a [ValueId],
    next: usize,
}

impl<'a> BoundCursor<'a> {
    fn take(&mut self) -> ValueId {
        let id = self.ids[self.next];
        self.next += 1;
        id
    }

    fn take_linear(&mut self) -> (ValueId, ValueId) {
        (self.take(), self.take())
    }
}

const LN_EPS: f64 = 1e-5;

impl TransformerNet {
    /// Actor forward on a tape: `tokens` is the `(seq, input_dim)` slot
    /// matrix, `read_row` the next-empty-slot index. Returns the `(1,4)`
    /// sigmoid output and the final block's attention.
    pub fn actor_forward_t(
        &self,
        tape: &mut Tape,
        bound: &BoundNet,
        tokens: ValueId,
        read_row: usize,
    ) -> Result<(ValueId, Attention), TensorError> {
        assert!(self.action_proj.is_none(), "actor net has no action token");
        let mut cur = BoundCursor { ids: bound.ids(), next: 0 };
        let (wi, bi) = cur.take_linear();
        let mut x = tape.matmul(tokens, wi)?;
        x = tape.add(x, bi)?;
        let (y, attn) = self.backbone(tape, &mut cur, x)?;
        let out = self.read_head(tape, &mut cur, y, read_row)?;
        Ok((out, attn))
    }

    /// Critic forward on a tape: the `(1,4)` action enters as an extra
    /// token after the slots; the value is read at that token.
    pub fn critic_forward_t(
        &self,
        tape: &mut Tape,
        bound: &BoundNet,
        tokens: ValueId,
        action: ValueId,
    ) -> Result<(ValueId, Attention), TensorError> {
        assert!(self.action_proj.is_some(), "critic net needs an action projection");
        let mut cur = BoundCursor { ids: bound.ids(), next: 0 };
        let (wi, bi) = cur.take_linear();
        let mut xs = tape.matmul(tokens, wi)?;
        xs = tape.add(xs, bi)?;
        let (wa, ba) = cur.take_linear();
        let mut xa = tape.matmul(action, wa)?;
        xa = tape.add(xa, ba)?;
        let x = tape.concat_rows(&[xs, xa])?;
        let (y, attn) = self.backbone(tape, &mut cur, x)?;
        let q = self.read_head(tape, &mut cur, y, self.cfg.seq_len)?;
        Ok((q, attn))
    }

    /// Positional encoding, masked attention blocks, final norm.
    fn backbone(
        &self,
        tape: &mut Tape,
        cur: &mut BoundCursor,
        mut x: ValueId,
    ) -> Result<(ValueId, Attention), TensorError> {
        let seq = tape.shape(x)[0];
        let pe = positional_encoding(seq, self.cfg.embed_dim)?;
        let pe_id = tape.constant(&pe);
        x = tape.add(x, pe_id)?;
        let mask = causal_mask(seq);
        let mut final_attn = Vec::new();
        for _ in 0..self.cfg.blocks {
            let (next, attn) = self.block_forward(tape, cur, x, &mask)?;
            x = next;
            final_attn = attn;
        }
        let (g, b) = (cur.take(), cur.take());
        let y = tape.layer_norm(x, g, b, LN_EPS)?;
        let attn = collect_attention(tape, &final_attn, seq);
        Ok((y, attn))
    }

    fn block_forward(
        &self,
        tape: &mut Tape,
        cur: &mut BoundCursor,
        x: ValueId,
        mask: &[bool],
    ) -> Result<(ValueId, Vec<ValueId>), TensorError> {
        let (g1, b1) = (cur.take(), cur.take());
        let normed = tape.layer_norm(x, g1, b1, LN_EPS)?;
        let (attn_out, attn_ids) = self.mhsa_forward(tape, cur, normed, mask)?;
        let x = tape.add(x, attn_out)?;

        let (g2, b2) = (cur.take(), cur.take());
        let normed = tape.layer_norm(x, g2, b2, LN_EPS)?;
        let (w1, bias1) = cur.take_linear();
        let mut h = tape.matmul(normed, w1)?;
        h = tape.add(h, bias1)?;
        h = tape.relu(h);
        let (w2, bias2) = cur.take_linear();
        let mut ff = tape.matmul(h, w2)?;
        ff = tape.add(ff, bias2)?;
        let x = tape.add(x, ff)?;
        Ok((x, attn_ids))
    }

    /// Masked multi-head self-attention: per head,
    /// `softmax(Q K^T / sqrt(head_dim)) V` with masked positions receiving
    /// exactly zero weight. Returns the per-head attention node ids.
    fn mhsa_forward(
        &self,
        tape: &mut Tape,
        cur: &mut BoundCursor,
        x: ValueId,
        mask: &[bool],
    ) -> Result<(ValueId, Vec<ValueId>), TensorError> {
        let dh = self.cfg.head_dim();
        let (wq, bq) = cur.take_linear();
        let (wk, bk) = cur.take_linear();
        let (wv, bv) = cur.take_linear();
        let (wo, bo) = cur.take_linear();
        let q = tape.matmul(x, wq).and_then(|m| tape.add(m, bq))?;
        let k = tape.matmul(x, wk).and_then(|m| tape.add(m, bk))?;
        let v = tape.matmul(x, wv).and_then(|m| tape.add(m, bv))?;
        let mut head_outs = Vec::with_capacity(self.cfg.heads);
        let mut attn_ids = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let masked = tape.masked_fill(scaled, mask)?;
            let attn = tape.softmax(masked);
            attn_ids.push(attn);
            head_outs.push(tape.matmul(attn, vh)?);
        }
        let concat = tape.concat_cols(&head_outs)?;
        let out = tape.matmul(concat, wo).and_then(|m| tape.add(m, bo))?;
        Ok((out, attn_ids))
    }

    fn read_head(
        &self,
        tape: &mut Tape,
        cur: &mut BoundCursor,
        y: ValueId,
        read_row: usize,
    ) -> Result<ValueId, TensorError> {
        let row = tape.select_row(y, read_row)?;
        let row2d = tape.reshape(row, vec![1, self.cfg.embed_dim])?;
        let (wh, bh) = cur.take_linear();
        let mut out = tape.matmul(row2d, wh)?;
        out = tape.add(out, bh)?;
        Ok(match self.squash {
            OutputSquash::Sigmoid => tape.sigmoid(out),
            OutputSquash::Tanh => tape.tanh(out),
        })
    }
}

/// Upper-triangular mask: query `i` may not attend to keys `j > i`.
pub fn causal_mask(seq: usize) -> Vec<bool> {
    let mut mask = vec![false; seq * seq];
    for i in 0..seq {
        for j in (i + 1)..seq {
            mask[i * seq + j] = true;
        }
    }
    mask
}

fn collect_attention(tape: &Tape, head_ids: &[ValueId], seq: usize) -> Attention {
    let mut data = Vec::with_capacity(head_ids.len() * seq * seq);
    for &id in head_ids {
        data.extend_from_slice(tape.value(id));
    }
    Attention { heads: head_ids.len(), seq, data }
}
