//! Pre-norm transformer over token sequences with a hand-written backward pass.
//!
//! ```text
//! h₀ = [LN](X · W_embᵀ)
//! x′ = x + γ₁ ⊙ attn(LN₁(x))          attn = out_proj(softmax(QKᵀ/√d_h) V), QKV = in_proj(·)
//! x″ = x′ + γ₂ ⊙ fc2(gelu(fc1(LN₂(x′))))
//! y  = head(mean_tokens(LN(h_L)))
//! ```
//!
//! The block projections run through the configured low-bit linear mode; the embedding
//! and head stay in full precision. Without layer-scale the γ factors are absent.

use lowbit_core::error::Error;
use lowbit_core::linear::{linear_backward, linear_forward, LinearContext, LinearMode};
use lowbit_core::numerics::{gaussian_matrix_from, Matrix, Rng, Seed};
use lowbit_core::Result;

use crate::config::Config;
use crate::error::TrainerResult;
use crate::task::Targets;

pub const LN_EPS: f64 = 1e-5;
const INIT_STREAM: u64 = 0x1417;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelShape {
    pub input_dim: usize,
    pub outputs: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Initial γ when layer-scale is enabled.
    pub layer_scale: Option<f32>,
    pub embed_norm: bool,
    pub mode: LinearMode,
}

impl ModelShape {
    pub fn from_config(cfg: &Config) -> TrainerResult<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        Ok(Self {
            input_dim: cfg.train.data.input_dim,
            outputs: cfg.output_width(),
            depth: m.depth,
            dim: m.dim,
            heads: m.heads,
            hidden: cfg.hidden_width(),
            layer_scale: m.layer_scale.enabled.then_some(m.layer_scale.init),
            embed_norm: m.embed_norm,
            mode: m.linear_mode.resolve()?,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone, Copy)]
struct NormParams {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockParams {
    norm1: NormParams,
    in_proj: usize,
    out_proj: usize,
    ls1: Option<usize>,
    norm2: NormParams,
    fc1: usize,
    fc2: usize,
    ls2: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Model {
    shape: ModelShape,
    params: Vec<Matrix>,
    names: Vec<String>,
    embed: usize,
    embed_norm: Option<NormParams>,
    blocks: Vec<BlockParams>,
    norm: NormParams,
    head: usize,
}

struct Builder<'a> {
    params: Vec<Matrix>,
    names: Vec<String>,
    rng: &'a mut Rng,
}

impl Builder<'_> {
    fn push(&mut self, name: String, m: Matrix) -> usize {
        self.params.push(m);
        self.names.push(name);
        self.params.len() - 1
    }

    fn linear(&mut self, name: String, out: usize, inp: usize) -> usize {
        let m = gaussian_matrix_from(self.rng, out, inp, 0.0, 1.0 / (inp as f64).sqrt());
        self.push(name, m)
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> NormParams {
        NormParams {
            weight: self.push(format!("{prefix}.weight"), Matrix::filled(1, dim, 1.0)),
            bias: self.push(format!("{prefix}.bias"), Matrix::zeros(1, dim)),
        }
    }
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache {
    batch: usize,
    tokens: usize,
    embed_ctx: LinearContext,
    embed_norm: Option<LnCache>,
    blocks: Vec<BlockCache>,
    final_norm: LnCache,
    head_ctx: LinearContext,
}

struct BlockCache {
    ln1: LnCache,
    in_ctx: LinearContext,
    qkv: Matrix,
    probs: Vec<f32>,
    out_ctx: LinearContext,
    attn_out: Matrix,
    ln2: LnCache,
    fc1_ctx: LinearContext,
    pre_act: Matrix,
    fc2_ctx: LinearContext,
    mlp_out: Matrix,
}

pub struct ForwardOutput {
    /// `batch × outputs`.
    pub output: Matrix,
    /// Mean absolute value of the residual stream entering block 0.
    pub input_absmean: f64,
    /// Mean absolute value of each block's output, `E[|x_k|]`.
    pub feat_absmean: Vec<f64>,
    pub cache: ForwardCache,
}

impl Model {
    pub fn new(shape: ModelShape, seed: u64) -> Self {
        let mut rng = Rng::new(Seed(seed).derive(INIT_STREAM));
        let mut b = Builder {
            params: Vec::new(),
            names: Vec::new(),
            rng: &mut rng,
        };
        let (dim, hidden) = (shape.dim, shape.hidden);
        let embed = b.linear("embed.weight".into(), dim, shape.input_dim);
        let embed_norm = shape.embed_norm.then(|| b.norm("embed_norm", dim));
        let mut blocks = Vec::with_capacity(shape.depth);
        for i in 0..shape.depth {
            let p = format!("blocks.{i}");
            let norm1 = b.norm(&format!("{p}.norm1"), dim);
            let in_proj = b.linear(format!("{p}.attn.in_proj.weight"), 3 * dim, dim);
            let out_proj = b.linear(format!("{p}.attn.out_proj.weight"), dim, dim);
            let ls1 = shape.layer_scale.map(|g| b.push(format!("{p}.ls1"), Matrix::filled(1, dim, g)));
            let norm2 = b.norm(&format!("{p}.norm2"), dim);
            let fc1 = b.linear(format!("{p}.mlp.fc1.weight"), hidden, dim);
            let fc2 = b.linear(format!("{p}.mlp.fc2.weight"), dim, hidden);
            let ls2 = shape.layer_scale.map(|g| b.push(format!("{p}.ls2"), Matrix::filled(1, dim, g)));
            blocks.push(BlockParams {
                norm1,
                in_proj,
                out_proj,
                ls1,
                norm2,
                fc1,
                fc2,
                ls2,
            });
        }
        let norm = b.norm("norm", dim);
        let head = b.linear("head.weight".into(), shape.outputs, dim);
        Self {
            shape,
            params: b.params,
            names: b.names,
            embed,
            embed_norm,
            blocks,
            norm,
            head,
        }
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn embed_tensor_name(&self) -> &str {
        &self.names[self.embed]
    }

    /// A projection in the middle block, used as the negative control for spike analysis.
    pub fn mid_tensor_name(&self) -> &str {
        &self.names[self.blocks[self.shape.depth / 2].in_proj]
    }

    fn p(&self, i: usize) -> &Matrix {
        &self.params[i]
    }

    /// Applies block `index` to `x` (`(batch·tokens) × dim`).
    pub fn transformer_block(&self, index: usize, x: &Matrix, batch: usize, tokens: usize) -> Result<Matrix> {
        Ok(self.block_forward(&self.blocks[index], x, batch, tokens)?.0)
    }

    /// Residual stream entering block 0.
    pub fn embed(&self, inputs: &Matrix) -> Result<Matrix> {
        let (h, _) = linear_forward(LinearMode::STANDARD, inputs, self.p(self.embed))?;
        Ok(match self.embed_norm {
            Some(n) => layer_norm(&h, self.p(n.weight), self.p(n.bias)).0,
            None => h,
        })
    }

    pub fn forward(&self, inputs: &Matrix, batch: usize, tokens: usize) -> Result<ForwardOutput> {
        if inputs.rows() != batch * tokens {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: inputs.shape(),
                rhs: (batch * tokens, self.shape.input_dim),
            });
        }
        let (mut h, embed_ctx) = linear_forward(LinearMode::STANDARD, inputs, self.p(self.embed))?;
        let embed_norm = match self.embed_norm {
            Some(n) => {
                let (y, c) = layer_norm(&h, self.p(n.weight), self.p(n.bias));
                h = y;
                Some(c)
            }
            None => None,
        };
        let input_absmean = h.abs_mean();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut feat_absmean = Vec::with_capacity(self.blocks.len());
        for bp in &self.blocks {
            let (y, c) = self.block_forward(bp, &h, batch, tokens)?;
            feat_absmean.push(y.abs_mean());
            blocks.push(c);
            h = y;
        }
        let (hn, final_norm) = layer_norm(&h, self.p(self.norm.weight), self.p(self.norm.bias));
        let pooled = mean_pool(&hn, batch, tokens);
        let (output, head_ctx) = linear_forward(LinearMode::STANDARD, &pooled, self.p(self.head))?;
        Ok(ForwardOutput {
            output,
            input_absmean,
            feat_absmean,
            cache: ForwardCache {
                batch,
                tokens,
                embed_ctx,
                embed_norm,
                blocks,
                final_norm,
                head_ctx,
            },
        })
    }

    fn block_forward(&self, bp: &BlockParams, x: &Matrix, batch: usize, tokens: usize) -> Result<(Matrix, BlockCache)> {
        let mode = self.shape.mode;
        let (a, ln1) = layer_norm(x, self.p(bp.norm1.weight), self.p(bp.norm1.bias));
        let (qkv, in_ctx) = linear_forward(mode, &a, self.p(bp.in_proj))?;
        let (o, probs) = attention_forward(&qkv, batch, tokens, self.shape.heads);
        let (attn_out, out_ctx) = linear_forward(mode, &o, self.p(bp.out_proj))?;
        let mid = residual(x, &attn_out, bp.ls1.map(|i| self.p(i)));

        let (c, ln2) = layer_norm(&mid, self.p(bp.norm2.weight), self.p(bp.norm2.bias));
        let (pre_act, fc1_ctx) = linear_forward(mode, &c, self.p(bp.fc1))?;
        let act = pre_act.map(gelu);
        let (mlp_out, fc2_ctx) = linear_forward(mode, &act, self.p(bp.fc2))?;
        let out = residual(&mid, &mlp_out, bp.ls2.map(|i| self.p(i)));
        Ok((
            out,
            BlockCache {
                ln1,
                in_ctx,
                qkv,
                probs,
                out_ctx,
                attn_out,
                ln2,
                fc1_ctx,
                pre_act,
                fc2_ctx,
                mlp_out,
            },
        ))
    }

    /// Gradients of the loss with respect to every parameter, given `∂L/∂output`.
    pub fn backward(&self, cache: ForwardCache, d_output: &Matrix) -> Result<Vec<Matrix>> {
        let mut grads: Vec<Matrix> = self.params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        let ForwardCache {
            batch,
            tokens,
            embed_ctx,
            embed_norm,
            blocks,
            final_norm,
            head_ctx,
        } = cache;

        let (d_pooled, d_head) = linear_backward(head_ctx, d_output)?;
        grads[self.head] = d_head;
        let d_hn = mean_pool_backward(&d_pooled, tokens);
        let (mut d_h, dw, db) = layer_norm_backward(&d_hn, &final_norm, self.p(self.norm.weight));
        grads[self.norm.weight] = dw;
        grads[self.norm.bias] = db;

        for (bp, bc) in self.blocks.iter().zip(blocks).rev() {
            d_h = self.block_backward(bp, bc, &d_h, batch, tokens, &mut grads)?;
        }

        if let (Some(n), Some(c)) = (self.embed_norm, embed_norm.as_ref()) {
            let (dx, dw, db) = layer_norm_backward(&d_h, c, self.p(n.weight));
            grads[n.weight] = dw;
            grads[n.bias] = db;
            d_h = dx;
        }
        let (_, d_embed) = linear_backward(embed_ctx, &d_h)?;
        grads[self.embed] = d_embed;
        Ok(grads)
    }

    fn block_backward(
        &self,
        bp: &BlockParams,
        bc: BlockCache,
        d_out: &Matrix,
        batch: usize,
        tokens: usize,
        grads: &mut [Matrix],
    ) -> Result<Matrix> {
        // out = mid + γ₂ ⊙ mlp_out
        let d_mlp = scale_branch(d_out, &bc.mlp_out, bp.ls2, &self.params, grads);
        let mut d_mid = d_out.clone();
        let (d_act, d_fc2) = linear_backward(bc.fc2_ctx, &d_mlp)?;
        grads[bp.fc2] = d_fc2;
        let mut d_pre = d_act;
        for (d, &z) in d_pre.data_mut().iter_mut().zip(bc.pre_act.data()) {
            *d *= gelu_grad(z);
        }
        let (d_c, d_fc1) = linear_backward(bc.fc1_ctx, &d_pre)?;
        grads[bp.fc1] = d_fc1;
        let (dx, dw, db) = layer_norm_backward(&d_c, &bc.ln2, self.p(bp.norm2.weight));
        grads[bp.norm2.weight] = dw;
        grads[bp.norm2.bias] = db;
        d_mid.add_assign(&dx)?;

        // mid = x + γ₁ ⊙ attn_out
        let d_attn = scale_branch(&d_mid, &bc.attn_out, bp.ls1, &self.params, grads);
        let mut d_x = d_mid;
        let (d_o, d_out_proj) = linear_backward(bc.out_ctx, &d_attn)?;
        grads[bp.out_proj] = d_out_proj;
        let d_qkv = attention_backward(&d_o, &bc.qkv, &bc.probs, batch, tokens, self.shape.heads);
        let (d_a, d_in_proj) = linear_backward(bc.in_ctx, &d_qkv)?;
        grads[bp.in_proj] = d_in_proj;
        let (dx, dw, db) = layer_norm_backward(&d_a, &bc.ln1, self.p(bp.norm1.weight));
        grads[bp.norm1.weight] = dw;
        grads[bp.norm1.bias] = db;
        d_x.add_assign(&dx)?;
        Ok(d_x)
    }
}

/// `x + γ ⊙ y` with `γ` broadcast over rows, or `x + y` without layer-scale.
fn residual(x: &Matrix, y: &Matrix, gamma: Option<&Matrix>) -> Matrix {
    let mut out = x.clone();
    let cols = x.cols();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let g = gamma.map_or(1.0, |g| g.data()[i % cols]);
        *o += g * y.data()[i];
    }
    out
}

/// Gradient into a scaled residual branch; accumulates `∂L/∂γ` when layer-scale is on.
fn scale_branch(d_out: &Matrix, branch: &Matrix, gamma: Option<usize>, params: &[Matrix], grads: &mut [Matrix]) -> Matrix {
    let Some(gi) = gamma else {
        return d_out.clone();
    };
    let cols = d_out.cols();
    let g = params[gi].data();
    let mut dg = vec![0f64; cols];
    let mut d_branch = d_out.clone();
    for (i, d) in d_branch.data_mut().iter_mut().enumerate() {
        dg[i % cols] += *d as f64 * branch.data()[i] as f64;
        *d *= g[i % cols];
    }
    grads[gi] = Matrix::from_fn(1, cols, |_, j| dg[j] as f32);
    d_branch
}

pub struct LnCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

/// Row-wise layer norm with affine weight and bias (`1 × cols` each).
pub fn layer_norm(x: &Matrix, w: &Matrix, b: &Matrix) -> (Matrix, LnCache) {
    let (rows, cols) = x.shape();
    let mut xhat = Matrix::zeros(rows, cols);
    let mut y = Matrix::zeros(rows, cols);
    let mut rstd = Vec::with_capacity(rows);
    for i in 0..rows {
        let r = x.row(i);
        let mean = r.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
        let var = r.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / cols as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        for (j, &v) in r.iter().enumerate() {
            let h = (v as f64 - mean) * rs;
            xhat.set(i, j, h as f32);
            y.set(i, j, (h * w.data()[j] as f64 + b.data()[j] as f64) as f32);
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Returns `(dx, dw, db)`.
pub fn layer_norm_backward(dy: &Matrix, cache: &LnCache, w: &Matrix) -> (Matrix, Matrix, Matrix) {
    let (rows, cols) = dy.shape();
    let mut dx = Matrix::zeros(rows, cols);
    let mut dw = vec![0f64; cols];
    let mut db = vec![0f64; cols];
    let mut dxhat = vec![0f64; cols];
    for i in 0..rows {
        let d = dy.row(i);
        let h = cache.xhat.row(i);
        let (mut mean_d, mut mean_dh) = (0f64, 0f64);
        for j in 0..cols {
            let g = d[j] as f64;
            dw[j] += g * h[j] as f64;
            db[j] += g;
            dxhat[j] = g * w.data()[j] as f64;
            mean_d += dxhat[j];
            mean_dh += dxhat[j] * h[j] as f64;
        }
        mean_d /= cols as f64;
        mean_dh /= cols as f64;
        let out = dx.row_mut(i);
        for j in 0..cols {
            out[j] = (cache.rstd[i] * (dxhat[j] - mean_d - h[j] as f64 * mean_dh)) as f32;
        }
    }
    let to_row = |v: Vec<f64>| Matrix::from_fn(1, cols, |_, j| v[j] as f32);
    (dx, to_row(dw), to_row(db))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_A: f64 = 0.044_715;

// libm's tanh is several times slower than exp and dominated the step time.
#[inline]
fn tanh(u: f64) -> f64 {
    let e = (2.0 * u as f32).exp() as f64;
    1.0 - 2.0 / (e + 1.0)
}

/// Tanh approximation of GELU.
pub fn gelu(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + tanh(GELU_C * (x + GELU_A * x * x * x)))) as f32
}

pub fn gelu_grad(x: f32) -> f32 {
    let x = x as f64;
    let t = tanh(GELU_C * (x + GELU_A * x * x * x));
    (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)) as f32
}

/// Multi-head softmax attention over each sample's tokens. `qkv` holds `[Q | K | V]`
/// column blocks. Returns the head outputs (`rows × dim`) and the attention
/// probabilities laid out `[sample][head][query][key]`.
pub fn attention_forward(qkv: &Matrix, batch: usize, tokens: usize, heads: usize) -> (Matrix, Vec<f32>) {
    let dim = qkv.cols() / 3;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros(batch * tokens, dim);
    let mut probs = vec![0f32; batch * heads * tokens * tokens];
    let mut scores = vec![0f64; tokens];
    for s in 0..batch {
        let r0 = s * tokens;
        for h in 0..heads {
            let (qc, kc, vc) = (h * dh, dim + h * dh, 2 * dim + h * dh);
            let pbase = ((s * heads + h) * tokens) * tokens;
            for i in 0..tokens {
                let q = &qkv.row(r0 + i)[qc..qc + dh];
                let mut max = f64::NEG_INFINITY;
                for (j, sc) in scores.iter_mut().enumerate() {
                    let k = &qkv.row(r0 + j)[kc..kc + dh];
                    *sc = q.iter().zip(k).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() * scale;
                    max = max.max(*sc);
                }
                let mut z = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    z += *sc;
                }
                let prow = &mut probs[pbase + i * tokens..pbase + (i + 1) * tokens];
                for (p, &e) in prow.iter_mut().zip(&scores) {
                    *p = (e / z) as f32;
                }
                let orow = &mut out.row_mut(r0 + i)[qc..qc + dh];
                let mut acc = vec![0f64; dh];
                for (j, &p) in prow.iter().enumerate() {
                    let v = &qkv.row(r0 + j)[vc..vc + dh];
                    for (a, &vv) in acc.iter_mut().zip(v) {
                        *a += p as f64 * vv as f64;
                    }
                }
                for (o, a) in orow.iter_mut().zip(acc) {
                    *o = a as f32;
                }
            }
        }
    }
    (out, probs)
}

/// Gradient of [`attention_forward`] with respect to `qkv`.
pub fn attention_backward(d_out: &Matrix, qkv: &Matrix, probs: &[f32], batch: usize, tokens: usize, heads: usize) -> Matrix {
    let dim = qkv.cols() / 3;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut d_qkv = vec![0f64; qkv.len()];
    let width = qkv.cols();
    let mut dp = vec![0f64; tokens];
    for s in 0..batch {
        let r0 = s * tokens;
        for h in 0..heads {
            let (qc, kc, vc) = (h * dh, dim + h * dh, 2 * dim + h * dh);
            let pbase = ((s * heads + h) * tokens) * tokens;
            for i in 0..tokens {
                let dout = &d_out.row(r0 + i)[qc..qc + dh];
                let prow = &probs[pbase + i * tokens..pbase + (i + 1) * tokens];
                for j in 0..tokens {
                    let v = &qkv.row(r0 + j)[vc..vc + dh];
                    dp[j] = dout.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum();
                    // dV_j += p_ij · dO_i
                    let dv = &mut d_qkv[(r0 + j) * width + vc..(r0 + j) * width + vc + dh];
                    for (d, &g) in dv.iter_mut().zip(dout) {
                        *d += prow[j] as f64 * g as f64;
                    }
                }
                let dot: f64 = prow.iter().zip(&dp).map(|(&p, &d)| p as f64 * d).sum();
                let q = &qkv.row(r0 + i)[qc..qc + dh];
                for j in 0..tokens {
                    let ds = prow[j] as f64 * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let k = &qkv.row(r0 + j)[kc..kc + dh];
                    for d in 0..dh {
                        d_qkv[(r0 + i) * width + qc + d] += ds * k[d] as f64;
                        d_qkv[(r0 + j) * width + kc + d] += ds * q[d] as f64;
                    }
                }
            }
        }
    }
    Matrix::from_vec(qkv.rows(), width, d_qkv.into_iter().map(|v| v as f32).collect()).expect("shape")
}

pub fn mean_pool(x: &Matrix, batch: usize, tokens: usize) -> Matrix {
    let cols = x.cols();
    let mut out = Matrix::zeros(batch, cols);
    for s in 0..batch {
        let mut acc = vec![0f64; cols];
        for t in 0..tokens {
            for (a, &v) in acc.iter_mut().zip(x.row(s * tokens + t)) {
                *a += v as f64;
            }
        }
        for (o, a) in out.row_mut(s).iter_mut().zip(acc) {
            *o = (a / tokens as f64) as f32;
        }
    }
    out
}

fn mean_pool_backward(d: &Matrix, tokens: usize) -> Matrix {
    let (batch, cols) = d.shape();
    Matrix::from_fn(batch * tokens, cols, |r, j| (d.get(r / tokens, j) as f64 / tokens as f64) as f32)
}

/// Mean cross-entropy or mean squared error, and its gradient with respect to `output`.
pub fn loss_and_grad(output: &Matrix, targets: &Targets) -> Result<(f64, Matrix)> {
    let (b, c) = output.shape();
    match targets {
        Targets::Labels(labels) => {
            if labels.len() != b || labels.iter().any(|&l| l >= c) {
                return Err(Error::InvalidArgument("labels do not match the output shape".into()));
            }
            let mut grad = Matrix::zeros(b, c);
            let mut loss = 0.0;
            for (i, &label) in labels.iter().enumerate() {
                let row = output.row(i);
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
                let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
                let lse = max + z.ln();
                loss += lse - row[label] as f64;
                for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
                    let p = (row[j] as f64 - lse).exp();
                    *g = ((p - if j == label { 1.0 } else { 0.0 }) / b as f64) as f32;
                }
            }
            Ok((loss / b as f64, grad))
        }
        Targets::Values(t) => {
            if t.shape() != output.shape() {
                return Err(Error::ShapeMismatch {
                    op: "mse",
                    lhs: output.shape(),
                    rhs: t.shape(),
                });
            }
            let n = output.len() as f64;
            let mut loss = 0.0;
            let mut grad = Matrix::zeros(b, c);
            for ((g, &y), &t) in grad.data_mut().iter_mut().zip(output.data()).zip(t.data()) {
                let e = y as f64 - t as f64;
                loss += e * e;
                *g = (2.0 * e / n) as f32;
            }
            Ok((loss / n, grad))
        }
    }
}

/// Fraction of samples whose arg-max output equals the label.
pub fn accuracy(output: &Matrix, labels: &[usize]) -> f64 {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = output.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == l
        })
        .count();
    correct as f64 / labels.len().max(1) as f64
}
