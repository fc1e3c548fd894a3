use crate::error::{Error, Result};
use crate::model::layers::{add_into_cols, slice_cols, LayerNormLayer, LinearLayer, INIT_STD};
use crate::numerics::{matmul_prec, ops_internal, Parameter, Precision, SeededRng, Tensor};

/// Input channel count; patches are RGB-like 3-plane images.
pub const IN_CHANNELS: usize = 3;

/// Architecture of the splittable encoder. The split point separates the
/// pre-stage (patch embedding + blocks `1..=split_after_block`) from the
/// post-stage (remaining blocks + final norm + output head).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub output_dim: usize,
    pub split_after_block: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_size: 224,
            patch_size: 16,
            embed_dim: 384,
            depth: 12,
            heads: 6,
            mlp_ratio: 4,
            output_dim: 1024,
            split_after_block: 1,
        }
    }
}

impl EncoderConfig {
    /// Proportionally scaled-down configuration used by the correctness and
    /// training suites, where 224-pixel inputs would be needlessly slow.
    pub fn desk() -> Self {
        EncoderConfig {
            input_size: 32,
            patch_size: 8,
            embed_dim: 64,
            depth: 6,
            heads: 4,
            mlp_ratio: 4,
            output_dim: 128,
            split_after_block: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.patch_size == 0 || self.input_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of patch_size {}",
                self.input_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.depth < 2 || self.split_after_block == 0 || self.split_after_block >= self.depth {
            return Err(Error::Config(format!(
                "need 1 <= split_after_block ({}) < depth ({})",
                self.split_after_block, self.depth
            )));
        }
        if self.mlp_ratio == 0 || self.output_dim == 0 {
            return Err(Error::Config("mlp_ratio and output_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let g = self.input_size / self.patch_size;
        g * g
    }

    pub fn tokens(&self) -> usize {
        1 + self.num_patches()
    }

    pub fn patch_dim(&self) -> usize {
        IN_CHANNELS * self.patch_size * self.patch_size
    }

    pub fn image_len(&self) -> usize {
        IN_CHANNELS * self.input_size * self.input_size
    }

    /// Analytic count of trainable scalars: patch embed, CLS, positional
    /// table, all blocks, final norm, and the output head.
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let mlp = d * self.mlp_ratio;
        let block = 2 * (2 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (d * mlp + mlp) + (mlp * d + d);
        (self.patch_dim() * d + d) + self.tokens() * d + d + self.depth * block + 2 * d
            + (d * self.output_dim + self.output_dim)
    }
}

/// Token matrix after the pre-stage: CLS first, then one row per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ShallowFeatures {
    pub tokens: Tensor,
}

impl ShallowFeatures {
    pub fn token_count(&self) -> usize {
        self.tokens.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// Final per-patch representation produced by the output head.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Tensor,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Concatenation of the CLS token with the mean of the patch tokens;
/// this is the scoring network's input.
pub fn concat_shallow(shallow: &ShallowFeatures) -> Tensor {
    let d = shallow.embed_dim();
    let t = shallow.token_count();
    let mut out = vec![0.0; 2 * d];
    out[..d].copy_from_slice(shallow.tokens.row(0));
    let n_patches = (t - 1) as f64;
    for i in 1..t {
        for (acc, v) in out[d..].iter_mut().zip(shallow.tokens.row(i)) {
            *acc += v;
        }
    }
    for v in &mut out[d..] {
        *v /= n_patches;
    }
    Tensor::new(vec![2 * d], out).expect("finite concat")
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNormLayer,
    pub qkv: LinearLayer,
    pub proj: LinearLayer,
    pub ln2: LayerNormLayer,
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
    heads: usize,
}

/// Forward activations retained for the backward pass of one block.
#[derive(Debug, Clone)]
pub struct BlockCache {
    x: Tensor,
    x_ln: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    att: Vec<Tensor>,
    att_out: Tensor,
    y1: Tensor,
    y1_ln: Tensor,
    h_pre: Tensor,
    h_act: Tensor,
}

impl Block {
    fn init(dim: usize, heads: usize, mlp_ratio: usize, rng: &mut SeededRng) -> Self {
        Block {
            ln1: LayerNormLayer::init(dim),
            qkv: LinearLayer::init(dim, 3 * dim, rng),
            proj: LinearLayer::init(dim, dim, rng),
            ln2: LayerNormLayer::init(dim),
            fc1: LinearLayer::init(dim, dim * mlp_ratio, rng),
            fc2: LinearLayer::init(dim * mlp_ratio, dim, rng),
            heads,
        }
    }

    fn attention(&self, x_ln: &Tensor, precision: Precision) -> Result<(Tensor, Tensor, Tensor, Tensor, Vec<Tensor>)> {
        let d = x_ln.cols();
        let qkv = self.qkv.forward(x_ln, precision)?;
        let q = slice_cols(&qkv, 0, d);
        let k = slice_cols(&qkv, d, d);
        let v = slice_cols(&qkv, 2 * d, d);
        let dh = d / self.heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let n = x_ln.rows();
        let mut att_out = Tensor::zeros(vec![n, d]);
        let mut att_probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = slice_cols(&q, h * dh, dh);
            let kh = slice_cols(&k, h * dh, dh);
            let vh = slice_cols(&v, h * dh, dh);
            let mut scores = matmul_prec(&qh, &kh.transpose2(), precision)?;
            for val in scores.data_mut() {
                *val *= scale;
            }
            let mut probs = Tensor::zeros(vec![n, n]);
            for i in 0..n {
                let mut row = vec![0.0; n];
                ops_internal::softmax_slice(scores.row(i), 1.0, &mut row);
                probs.row_mut(i).copy_from_slice(&row);
            }
            let out_h = matmul_prec(&probs, &vh, precision)?;
            add_into_cols(&mut att_out, &out_h, h * dh);
            att_probs.push(probs);
        }
        Ok((q, k, v, att_out, att_probs))
    }

    pub fn forward(&self, x: &Tensor, precision: Precision) -> Result<Tensor> {
        Ok(self.forward_inner(x, precision)?.0)
    }

    pub fn forward_with_cache(&self, x: &Tensor) -> Result<(Tensor, BlockCache)> {
        let (y, cache) = self.forward_inner(x, Precision::F64)?;
        Ok((y, cache.expect("cache requested")))
    }

    fn forward_inner(
        &self,
        x: &Tensor,
        precision: Precision,
    ) -> Result<(Tensor, Option<BlockCache>)> {
        let want_cache = precision == Precision::F64;
        let x_ln = self.ln1.forward_rows(x)?;
        let (q, k, v, att_out, att_probs) = self.attention(&x_ln, precision)?;
        let proj_out = self.proj.forward(&att_out, precision)?;
        let y1 = x.add(&proj_out)?;
        let y1_ln = self.ln2.forward_rows(&y1)?;
        let h_pre = self.fc1.forward(&y1_ln, precision)?;
        let mut h_act = h_pre.clone();
        for val in h_act.data_mut() {
            *val = ops_internal::gelu_scalar(*val);
        }
        let out = y1.add(&self.fc2.forward(&h_act, precision)?)?;
        let cache = if want_cache {
            Some(BlockCache {
                x: x.clone(),
                x_ln,
                q,
                k,
                v,
                att: att_probs,
                att_out,
                y1,
                y1_ln,
                h_pre,
                h_act,
            })
        } else {
            None
        };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the
    /// block input.
    pub fn backward(&mut self, d_out: &Tensor, cache: &BlockCache) -> Result<Tensor> {
        let d = cache.x.cols();
        let n = cache.x.rows();
        let dh = d / self.heads;
        let scale = 1.0 / libm::sqrt(dh as f64);

        // MLP branch
        let mut d_y1 = d_out.clone();
        let d_h_act = self.fc2.backward(d_out, &cache.h_act)?;
        let mut d_h_pre = d_h_act.clone();
        for (g, &x) in d_h_pre.data_mut().iter_mut().zip(cache.h_pre.data()) {
            *g *= ops_internal::gelu_grad_scalar(x);
        }
        let d_y1_ln = self.fc1.backward(&d_h_pre, &cache.y1_ln)?;
        let d_y1_from_ln = self.ln2.backward_rows(&d_y1_ln, &cache.y1)?;
        d_y1 = d_y1.add(&d_y1_from_ln)?;

        // attention branch
        let mut d_x = d_y1.clone();
        let d_att_out = self.proj.backward(&d_y1, &cache.att_out)?;
        let mut d_qkv = Tensor::zeros(vec![n, 3 * d]);
        for h in 0..self.heads {
            let d_out_h = slice_cols(&d_att_out, h * dh, dh);
            let qh = slice_cols(&cache.q, h * dh, dh);
            let kh = slice_cols(&cache.k, h * dh, dh);
            let vh = slice_cols(&cache.v, h * dh, dh);
            let probs = &cache.att[h];
            // out_h = probs · vh
            let d_probs = matmul_prec(&d_out_h, &vh.transpose2(), Precision::F64)?;
            let d_vh = matmul_prec(&probs.transpose2(), &d_out_h, Precision::F64)?;
            // softmax rows backward
            let mut d_scores = Tensor::zeros(vec![n, n]);
            for i in 0..n {
                let p = probs.row(i);
                let dp = d_probs.row(i);
                let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
                let drow = d_scores.row_mut(i);
                for j in 0..n {
                    drow[j] = p[j] * (dp[j] - inner);
                }
            }
            for v in d_scores.data_mut() {
                *v *= scale;
            }
            // scores = qh · khᵀ
            let d_qh = matmul_prec(&d_scores, &kh, Precision::F64)?;
            let d_kh = matmul_prec(&d_scores.transpose2(), &qh, Precision::F64)?;
            add_into_cols(&mut d_qkv, &d_qh, h * dh);
            add_into_cols(&mut d_qkv, &d_kh, d + h * dh);
            add_into_cols(&mut d_qkv, &d_vh, 2 * d + h * dh);
        }
        let d_x_ln = self.qkv.backward(&d_qkv, &cache.x_ln)?;
        let d_x_from_ln = self.ln1.backward_rows(&d_x_ln, &cache.x)?;
        d_x = d_x.add(&d_x_from_ln)?;
        Ok(d_x)
    }

    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter)>) {
        out.push((format!("{prefix}.ln1.g"), &self.ln1.gain));
        out.push((format!("{prefix}.ln1.b"), &self.ln1.bias));
        out.push((format!("{prefix}.qkv.w"), &self.qkv.w));
        out.push((format!("{prefix}.qkv.b"), &self.qkv.b));
        out.push((format!("{prefix}.proj.w"), &self.proj.w));
        out.push((format!("{prefix}.proj.b"), &self.proj.b));
        out.push((format!("{prefix}.ln2.g"), &self.ln2.gain));
        out.push((format!("{prefix}.ln2.b"), &self.ln2.bias));
        out.push((format!("{prefix}.fc1.w"), &self.fc1.w));
        out.push((format!("{prefix}.fc1.b"), &self.fc1.b));
        out.push((format!("{prefix}.fc2.w"), &self.fc2.w));
        out.push((format!("{prefix}.fc2.b"), &self.fc2.b));
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Parameter)>) {
        out.push((format!("{prefix}.ln1.g"), &mut self.ln1.gain));
        out.push((format!("{prefix}.ln1.b"), &mut self.ln1.bias));
        out.push((format!("{prefix}.qkv.w"), &mut self.qkv.w));
        out.push((format!("{prefix}.qkv.b"), &mut self.qkv.b));
        out.push((format!("{prefix}.proj.w"), &mut self.proj.w));
        out.push((format!("{prefix}.proj.b"), &mut self.proj.b));
        out.push((format!("{prefix}.ln2.g"), &mut self.ln2.gain));
        out.push((format!("{prefix}.ln2.b"), &mut self.ln2.bias));
        out.push((format!("{prefix}.fc1.w"), &mut self.fc1.w));
        out.push((format!("{prefix}.fc1.b"), &mut self.fc1.b));
        out.push((format!("{prefix}.fc2.w"), &mut self.fc2.w));
        out.push((format!("{prefix}.fc2.b"), &mut self.fc2.b));
    }
}

/// The splittable encoder. Weights are immutable during inference; training
/// owns the struct exclusively and accumulates into each [`Parameter`].
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub patch_embed: LinearLayer,
    pub cls_token: Parameter,
    pub pos_embed: Parameter,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNormLayer,
    pub head: LinearLayer,
    /// Arithmetic tier for the matrix kernels; `F32` is a benchmark-only
    /// setting and never serialized.
    pub precision: Precision,
}

/// Activations retained for distillation backward.
#[derive(Debug)]
pub struct EncoderCache {
    patch_rows: Tensor,
    block_caches: Vec<BlockCache>,
    pre_norm: Tensor,
    normed: Tensor,
}

impl Encoder {
    /// Truncated-normal (σ=0.02) initialization for linear weights, the CLS
    /// token, and the positional table; zero biases; unit layernorm gains.
    pub fn init(cfg: EncoderConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let patch_embed = LinearLayer::init(cfg.patch_dim(), d, rng);
        let cls_data: Vec<f64> = (0..d).map(|_| rng.truncated_normal(INIT_STD)).collect();
        let pos_data: Vec<f64> = (0..cfg.tokens() * d)
            .map(|_| rng.truncated_normal(INIT_STD))
            .collect();
        let blocks = (0..cfg.depth)
            .map(|_| Block::init(d, cfg.heads, cfg.mlp_ratio, rng))
            .collect();
        let final_norm = LayerNormLayer::init(d);
        let head = LinearLayer::init(d, cfg.output_dim, rng);
        Ok(Encoder {
            patch_embed,
            cls_token: Parameter::new(Tensor::new(vec![d], cls_data)?),
            pos_embed: Parameter::new(Tensor::new(vec![cfg.tokens(), d], pos_data)?),
            blocks,
            final_norm,
            head,
            cfg,
            precision: Precision::F64,
        })
    }

    /// Splits a flat `[3·s·s]` channel-major image into per-patch rows of
    /// length `3·p²`, ordered raster-wise (row-major over the patch grid),
    /// each row ordered (channel, y, x) within the patch.
    pub fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        let s = self.cfg.input_size;
        let p = self.cfg.patch_size;
        if image.len() != self.cfg.image_len() {
            return Err(Error::shape(format!(
                "image has {} values, config wants {}",
                image.len(),
                self.cfg.image_len()
            )));
        }
        let grid = s / p;
        let mut rows = Tensor::zeros(vec![grid * grid, self.cfg.patch_dim()]);
        let img = image.data();
        for gy in 0..grid {
            for gx in 0..grid {
                let row = rows.row_mut(gy * grid + gx);
                let mut idx = 0;
                for c in 0..IN_CHANNELS {
                    for py in 0..p {
                        let y = gy * p + py;
                        let base = c * s * s + y * s + gx * p;
                        row[idx..idx + p].copy_from_slice(&img[base..base + p]);
                        idx += p;
                    }
                }
            }
        }
        Ok(rows)
    }

    fn embed_tokens(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let patch_rows = self.patchify(image)?;
        let embedded = self.patch_embed.forward(&patch_rows, self.precision)?;
        let d = self.cfg.embed_dim;
        let t = self.cfg.tokens();
        let mut tokens = Tensor::zeros(vec![t, d]);
        tokens.row_mut(0).copy_from_slice(self.cls_token.value.data());
        for i in 1..t {
            tokens.row_mut(i).copy_from_slice(embedded.row(i - 1));
        }
        for i in 0..t {
            let prow = self.pos_embed.value.row(i).to_vec();
            let trow = tokens.row_mut(i);
            for (v, pv) in trow.iter_mut().zip(&prow) {
                *v += pv;
            }
        }
        Ok((patch_rows, tokens))
    }

    /// Pre-stage: patch embedding, CLS prepend, positional add, and blocks
    /// `1..=split_after_block`.
    pub fn encode_pre(&self, image: &Tensor) -> Result<ShallowFeatures> {
        let (_, mut tokens) = self.embed_tokens(image)?;
        for block in &self.blocks[..self.cfg.split_after_block] {
            tokens = block.forward(&tokens, self.precision)?;
        }
        Ok(ShallowFeatures { tokens })
    }

    /// Post-stage: remaining blocks, final norm, and the CLS output head.
    pub fn encode_post(&self, shallow: &ShallowFeatures) -> Result<Embedding> {
        if shallow.token_count() != self.cfg.tokens() || shallow.embed_dim() != self.cfg.embed_dim {
            return Err(Error::shape(format!(
                "shallow features {}×{} do not match config tokens {}×{}",
                shallow.token_count(),
                shallow.embed_dim(),
                self.cfg.tokens(),
                self.cfg.embed_dim
            )));
        }
        let mut tokens = shallow.tokens.clone();
        for block in &self.blocks[self.cfg.split_after_block..] {
            tokens = block.forward(&tokens, self.precision)?;
        }
        let normed = self.final_norm.forward_rows(&tokens)?;
        let cls = Tensor::new(vec![1, self.cfg.embed_dim], normed.row(0).to_vec())?;
        let out = self.head.forward(&cls, self.precision)?;
        Ok(Embedding {
            vector: out.reshape(vec![self.cfg.output_dim])?,
        })
    }

    /// The conventional path: identical arithmetic to
    /// `encode_post(encode_pre(x))` by construction.
    pub fn full_encode(&self, image: &Tensor) -> Result<Embedding> {
        self.encode_post(&self.encode_pre(image)?)
    }

    /// Training-path forward that retains every intermediate needed by
    /// [`Encoder::backward`].
    pub fn full_encode_with_cache(&self, image: &Tensor) -> Result<(Embedding, EncoderCache)> {
        let (patch_rows, tokens0) = self.embed_tokens(image)?;
        let mut block_caches = Vec::with_capacity(self.cfg.depth);
        let mut tokens = tokens0;
        for block in &self.blocks {
            let (next, cache) = block.forward_with_cache(&tokens)?;
            block_caches.push(cache);
            tokens = next;
        }
        let normed = self.final_norm.forward_rows(&tokens)?;
        let cls = Tensor::new(vec![1, self.cfg.embed_dim], normed.row(0).to_vec())?;
        let out = self.head.forward(&cls, self.precision)?;
        Ok((
            Embedding {
                vector: out.reshape(vec![self.cfg.output_dim])?,
            },
            EncoderCache {
                patch_rows,
                block_caches,
                pre_norm: tokens,
                normed,
            },
        ))
    }

    /// Accumulates gradients for all encoder parameters given the gradient of
    /// a scalar loss w.r.t. the output embedding.
    pub fn backward(&mut self, d_embedding: &Tensor, cache: &EncoderCache) -> Result<()> {
        let d = self.cfg.embed_dim;
        let t = self.cfg.tokens();
        let d_out = Tensor::new(vec![1, self.cfg.output_dim], d_embedding.data().to_vec())?;
        let cls = Tensor::new(vec![1, d], cache.normed.row(0).to_vec())?;
        let d_cls = self.head.backward(&d_out, &cls)?;
        // Only the CLS row of the final norm feeds the head.
        let mut d_normed = Tensor::zeros(vec![t, d]);
        d_normed.row_mut(0).copy_from_slice(d_cls.data());
        let mut d_tokens = self.final_norm.backward_rows(&d_normed, &cache.pre_norm)?;
        for (block, bcache) in self.blocks.iter_mut().zip(&cache.block_caches).rev() {
            d_tokens = block.backward(&d_tokens, bcache)?;
        }
        // token gradient splits into pos table, CLS, and patch-embed paths
        self.pos_embed.accumulate(&d_tokens);
        self.cls_token
            .accumulate(&Tensor::new(vec![d], d_tokens.row(0).to_vec())?);
        let mut d_embedded = Tensor::zeros(vec![t - 1, d]);
        for i in 1..t {
            d_embedded.row_mut(i - 1).copy_from_slice(d_tokens.row(i));
        }
        self.patch_embed.backward(&d_embedded, &cache.patch_rows)?;
        Ok(())
    }

    pub fn named_params(&self) -> Vec<(String, &Parameter)> {
        let mut out = vec![
            ("patch_embed.w".to_string(), &self.patch_embed.w),
            ("patch_embed.b".to_string(), &self.patch_embed.b),
            ("cls".to_string(), &self.cls_token),
            ("pos".to_string(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&format!("block{i}"), &mut out);
        }
        out.push(("final_norm.g".to_string(), &self.final_norm.gain));
        out.push(("final_norm.b".to_string(), &self.final_norm.bias));
        out.push(("head.w".to_string(), &self.head.w));
        out.push(("head.b".to_string(), &self.head.b));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Parameter)> {
        let mut out: Vec<(String, &mut Parameter)> = Vec::new();
        out.push(("patch_embed.w".to_string(), &mut self.patch_embed.w));
        out.push(("patch_embed.b".to_string(), &mut self.patch_embed.b));
        out.push(("cls".to_string(), &mut self.cls_token));
        out.push(("pos".to_string(), &mut self.pos_embed));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&format!("block{i}"), &mut out);
        }
        out.push(("final_norm.g".to_string(), &mut self.final_norm.gain));
        out.push(("final_norm.b".to_string(), &mut self.final_norm.bias));
        out.push(("head.w".to_string(), &mut self.head.w));
        out.push(("head.b".to_string(), &mut self.head.b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.n_elements()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }
}
