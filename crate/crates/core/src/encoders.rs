//! Vision and text Transformers with their projection heads.
//!
//! Parameter names are dotted paths: `visual.*` is the image encoder (the
//! part the EMA teacher shadows), `text.*` the text encoder, and
//! `image_head.weight` / `text_head.weight` the projections into the shared
//! embedding space. Patch indices are 0-based; row `i + 1` of
//! `visual.pos_embed` belongs to patch `i` and row 0 to the cls token.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{vocab_size, ImageArray, TokenSequence, DESK_CONTEXT_LENGTH, DESK_IMAGE_SIZE, DESK_PATCH_SIZE};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

pub const LN_EPS: f64 = 1e-5;
const MASKED_SCORE: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisionConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub mlp_ratio: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 64,
            heads: 4,
            patch_size: DESK_PATCH_SIZE,
            image_size: DESK_IMAGE_SIZE,
            mlp_ratio: 4,
        }
    }
}

impl VisionConfig {
    /// ViT-B/16 at 224 px.
    pub fn paper() -> Self {
        Self {
            depth: 12,
            width: 768,
            heads: 12,
            patch_size: 16,
            image_size: 224,
            mlp_ratio: 4,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        check_widths("vision", self.depth, self.width, self.heads, self.mlp_ratio)?;
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(TensorError::Invalid(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    pub causal: bool,
    pub mlp_ratio: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            width: 64,
            heads: 4,
            vocab_size: vocab_size(),
            context_length: DESK_CONTEXT_LENGTH,
            causal: true,
            mlp_ratio: 4,
        }
    }
}

impl TextConfig {
    pub fn paper() -> Self {
        Self {
            depth: 12,
            width: 512,
            heads: 8,
            vocab_size: 49408,
            context_length: 77,
            causal: true,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_widths("text", self.depth, self.width, self.heads, self.mlp_ratio)?;
        if self.context_length < 2 || self.vocab_size < 4 {
            return Err(TensorError::Invalid(
                "text context must be at least 2 and vocabulary at least 4".into(),
            ));
        }
        Ok(())
    }
}

fn check_widths(which: &str, depth: usize, width: usize, heads: usize, mlp: usize) -> Result<()> {
    if depth == 0 || width == 0 || heads == 0 || mlp == 0 || width % heads != 0 {
        return Err(TensorError::Invalid(format!(
            "{which} encoder needs positive depth/width/heads/mlp_ratio with width divisible by heads \
             (depth {depth}, width {width}, heads {heads}, mlp_ratio {mlp})"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub text: TextConfig,
    pub embed_dim: usize,
    pub decoder_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vision: VisionConfig::default(),
            text: TextConfig::default(),
            embed_dim: 32,
            decoder_depth: 1,
        }
    }
}

impl ModelConfig {
    /// A few hundred parameters: 8×8 images, 2×2 patches of 4 px.
    pub fn tiny() -> Self {
        Self {
            vision: VisionConfig {
                depth: 1,
                width: 8,
                heads: 2,
                patch_size: 4,
                image_size: 8,
                mlp_ratio: 2,
            },
            text: TextConfig {
                depth: 1,
                width: 8,
                heads: 2,
                vocab_size: vocab_size(),
                context_length: 8,
                causal: true,
                mlp_ratio: 2,
            },
            embed_dim: 4,
            decoder_depth: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.text.validate()?;
        if self.embed_dim == 0 {
            return Err(TensorError::Invalid("embed_dim must be positive".into()));
        }
        if self.text.vocab_size < vocab_size() {
            return Err(TensorError::Invalid(format!(
                "text vocabulary {} is smaller than the tokenizer's {}",
                self.text.vocab_size,
                vocab_size()
            )));
        }
        Ok(())
    }
}

fn init_block(init: &mut Init<'_>, p: &str, width: usize, mlp_ratio: usize) {
    init.layer_norm(&format!("{p}.ln1"), width);
    init.linear(&format!("{p}.attn.qkv"), width, 3 * width, true);
    init.linear(&format!("{p}.attn.proj"), width, width, true);
    init.layer_norm(&format!("{p}.ln2"), width);
    init.linear(&format!("{p}.mlp.fc1"), width, mlp_ratio * width, true);
    init.linear(&format!("{p}.mlp.fc2"), mlp_ratio * width, width, true);
}

/// Adds a stack of `depth` blocks plus a final layer norm under `prefix`.
pub(crate) fn init_stack(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    depth: usize,
    width: usize,
    mlp_ratio: usize,
) {
    let mut init = Init { store, rng };
    for i in 0..depth {
        init_block(&mut init, &format!("{prefix}.blocks.{i}"), width, mlp_ratio);
    }
    init.layer_norm(&format!("{prefix}.ln_final"), width);
}

/// Both encoders, both heads and the log-temperature.
pub fn init_clip_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng, store: &mut ParamStore) {
    let v = &cfg.vision;
    let t = &cfg.text;
    {
        let mut init = Init {
            store: &mut *store,
            rng: &mut *rng,
        };
        init.linear("visual.patch_embed", v.patch_dim(), v.width, true);
        init.normal("visual.cls_token".into(), &[1, v.width]);
        init.normal("visual.pos_embed".into(), &[v.num_patches() + 1, v.width]);
        init.normal("text.token_embed".into(), &[t.vocab_size, t.width]);
        init.normal("text.pos_embed".into(), &[t.context_length, t.width]);
        init.linear("image_head", v.width, cfg.embed_dim, false);
        init.linear("text_head", t.width, cfg.embed_dim, false);
    }
    init_stack(store, rng, "visual", v.depth, v.width, v.mlp_ratio);
    init_stack(store, rng, "text", t.depth, t.width, t.mlp_ratio);
    store.insert(crate::objectives::LOG_SIGMA, Tensor::scalar(crate::objectives::SIGMA_INIT.ln()));
}

/// `x @ weight (+ bias)`.
pub fn linear(g: &mut Graph, b: &Bound, p: &str, x: Var) -> Result<Var> {
    let w = b.var(&format!("{p}.weight"))?;
    let y = g.matmul(x, w)?;
    let bias = format!("{p}.bias");
    if b.has(&bias) {
        let bv = b.var(&bias)?;
        g.add(y, bv)
    } else {
        Ok(y)
    }
}

pub fn layer_norm(g: &mut Graph, b: &Bound, p: &str, x: Var) -> Result<Var> {
    let gamma = b.var(&format!("{p}.gamma"))?;
    let beta = b.var(&format!("{p}.beta"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Multi-head self-attention over `x: [B, T, W]`. `mask` is added to the
/// `[T, T]` score matrix of every head.
fn attention(g: &mut Graph, b: &Bound, p: &str, x: Var, heads: usize, mask: Option<Var>) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (bsz, t, w) = (s[0], s[1], s[2]);
    let dh = w / heads;
    let qkv = linear(g, b, &format!("{p}.qkv"), x)?;
    let qkv = g.reshape(qkv, &[bsz, t, 3, heads, dh])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let part = |i: usize, g: &mut Graph| -> Result<Var> {
        let v = g.narrow(qkv, 0, i, 1)?;
        g.reshape(v, &[bsz, heads, t, dh])
    };
    let q = part(0, g)?;
    let k = part(1, g)?;
    let v = part(2, g)?;
    let kt = g.permute(k, &[0, 1, 3, 2])?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    if let Some(m) = mask {
        scores = g.add(scores, m)?;
    }
    let att = g.softmax(scores, 3)?;
    let out = g.matmul(att, v)?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[bsz, t, w])?;
    linear(g, b, &format!("{p}.proj"), out)
}

/// One pre-norm Transformer block.
pub fn block(g: &mut Graph, b: &Bound, p: &str, x: Var, heads: usize, mask: Option<Var>) -> Result<Var> {
    let h = layer_norm(g, b, &format!("{p}.ln1"), x)?;
    let h = attention(g, b, &format!("{p}.attn"), h, heads, mask)?;
    let x = g.add(x, h)?;
    let h = layer_norm(g, b, &format!("{p}.ln2"), x)?;
    let h = linear(g, b, &format!("{p}.mlp.fc1"), h)?;
    let h = g.gelu(h)?;
    let h = linear(g, b, &format!("{p}.mlp.fc2"), h)?;
    g.add(x, h)
}

/// Blocks `0..depth` under `prefix`, then the final layer norm.
pub fn stack(
    g: &mut Graph,
    b: &Bound,
    prefix: &str,
    mut x: Var,
    depth: usize,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    for i in 0..depth {
        x = block(g, b, &format!("{prefix}.blocks.{i}"), x, heads, mask)?;
    }
    layer_norm(g, b, &format!("{prefix}.ln_final"), x)
}

/// Stacks per-image patch vectors into `[B, N, 3P²]`.
pub fn patch_batch(images: &[&ImageArray], cfg: &VisionConfig) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * cfg.num_patches() * cfg.patch_dim());
    for img in images {
        if img.height() != cfg.image_size || img.width() != cfg.image_size {
            return Err(TensorError::ShapeMismatch {
                op: "encode_image",
                lhs: vec![img.height(), img.width()],
                rhs: vec![cfg.image_size, cfg.image_size],
            });
        }
        let patches = img
            .patchify(cfg.patch_size)
            .map_err(|e| TensorError::Invalid(e.to_string()))?;
        for p in patches {
            data.extend_from_slice(&p);
        }
    }
    Tensor::new(vec![images.len(), cfg.num_patches(), cfg.patch_dim()], data)
}

/// Encodes `patches: [B, n, 3P²]` whose row `j` of sample `i` sits at grid
/// position `positions[i][j]`. Returns `[B, n + 1, W]` with the cls token
/// first. The input length is recorded as the annotation `visual.input`.
pub fn encode_patches(
    g: &mut Graph,
    b: &Bound,
    cfg: &VisionConfig,
    patches: Tensor,
    positions: &[Vec<usize>],
) -> Result<Var> {
    let s = patches.shape().to_vec();
    if s.len() != 3 || s[0] != positions.len() || s[2] != cfg.patch_dim() {
        return Err(TensorError::ShapeMismatch {
            op: "encode_patches",
            lhs: s,
            rhs: vec![positions.len(), 0, cfg.patch_dim()],
        });
    }
    let (bsz, n, w) = (s[0], s[1], cfg.width);
    let pos_table = b.var("visual.pos_embed")?;
    let mut rows = Vec::with_capacity(bsz * n);
    for p in positions {
        if p.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "encode_patches",
                lhs: vec![p.len()],
                rhs: vec![n],
            });
        }
        for &i in p {
            if i >= cfg.num_patches() {
                return Err(TensorError::IndexOutOfRange {
                    op: "encode_patches",
                    index: i,
                    extent: cfg.num_patches(),
                });
            }
            rows.push(i + 1);
        }
    }
    let cls = b.var("visual.cls_token")?;
    let cls = g.gather_rows(cls, &vec![0; bsz])?;
    let cls_pos = g.gather_rows(pos_table, &[0])?;
    let cls = g.add(cls, cls_pos)?;
    let cls = g.reshape(cls, &[bsz, 1, w])?;
    let x = if n == 0 {
        cls
    } else {
        let x = g.constant(patches);
        let e = linear(g, b, "visual.patch_embed", x)?;
        let pe = g.gather_rows(pos_table, &rows)?;
        let pe = g.reshape(pe, &[bsz, n, w])?;
        let e = g.add(e, pe)?;
        g.concat(&[cls, e], 1)?
    };
    g.annotate("visual.input", &[bsz, n + 1]);
    stack(g, b, "visual", x, cfg.depth, cfg.heads, None)
}

/// Full-image encoding: `[B, N + 1, W]`.
pub fn encode_images(g: &mut Graph, b: &Bound, cfg: &VisionConfig, images: &[&ImageArray]) -> Result<Var> {
    let patches = patch_batch(images, cfg)?;
    let all: Vec<usize> = (0..cfg.num_patches()).collect();
    encode_patches(g, b, cfg, patches, &vec![all; images.len()])
}

/// Encodes token sequences. Returns all token features `[B, L, W]` and the
/// eos features `[B, W]`.
pub fn encode_text(
    g: &mut Graph,
    b: &Bound,
    cfg: &TextConfig,
    seqs: &[&TokenSequence],
) -> Result<(Var, Var)> {
    let (bsz, l, w) = (seqs.len(), cfg.context_length, cfg.width);
    let mut ids = Vec::with_capacity(bsz * l);
    let mut eos = Vec::with_capacity(bsz);
    for (i, s) in seqs.iter().enumerate() {
        if s.len() != l {
            return Err(TensorError::ShapeMismatch {
                op: "encode_text",
                lhs: vec![s.len()],
                rhs: vec![l],
            });
        }
        if s.ids().iter().any(|&t| t >= cfg.vocab_size) {
            return Err(TensorError::Invalid("token id outside the text vocabulary".into()));
        }
        ids.extend_from_slice(s.ids());
        eos.push(i * l + s.eos_position());
    }
    let table = b.var("text.token_embed")?;
    let x = g.embedding(table, &ids)?;
    let x = g.reshape(x, &[bsz, l, w])?;
    let pos = b.var("text.pos_embed")?;
    let x = g.add(x, pos)?;
    let mask = cfg.causal.then(|| g.constant(causal_mask(l)));
    let feats = stack(g, b, "text", x, cfg.depth, cfg.heads, mask)?;
    let flat = g.reshape(feats, &[bsz * l, w])?;
    let eos_feats = g.gather_rows(flat, &eos)?;
    Ok((feats, eos_feats))
}

/// Additive mask blocking attention to later positions.
pub fn causal_mask(l: usize) -> Tensor {
    let data = (0..l * l)
        .map(|k| if k % l > k / l { MASKED_SCORE } else { 0.0 })
        .collect();
    Tensor::new(vec![l, l], data).expect("square mask")
}

/// Mean of the patch tokens (cls excluded): `[B, W]`.
pub fn pool_patches(g: &mut Graph, tokens: Var) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    let patches = g.narrow(tokens, 1, 1, s[1] - 1)?;
    g.mean_axis(patches, 1)
}

/// Unit-norm global image embedding `[B, D]`.
pub fn image_embedding(g: &mut Graph, b: &Bound, tokens: Var) -> Result<Var> {
    let pooled = pool_patches(g, tokens)?;
    let e = linear(g, b, "image_head", pooled)?;
    g.l2_normalize(e)
}

/// Unit-norm per-patch embeddings `[B, N, D]` through the global image head.
pub fn patch_embeddings(g: &mut Graph, b: &Bound, tokens: Var) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    let patches = g.narrow(tokens, 1, 1, s[1] - 1)?;
    let e = linear(g, b, "image_head", patches)?;
    g.l2_normalize(e)
}

/// Unit-norm text embedding `[B, D]` from eos features.
pub fn text_embedding(g: &mut Graph, b: &Bound, eos: Var) -> Result<Var> {
    let e = linear(g, b, "text_head", eos)?;
    g.l2_normalize(e)
}

/// Gradient-free batched inference over a parameter store.
pub struct Inference<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ParamStore,
    pub chunk: usize,
}

impl<'a> Inference<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ParamStore) -> Self {
        Self { cfg, params, chunk: 64 }
    }

    fn vision_pass<F>(&self, images: &[&ImageArray], mut f: F) -> Result<Vec<Tensor>>
    where
        F: FnMut(&mut Graph, &Bound, Var) -> Result<Var>,
    {
        let mut out = Vec::new();
        for chunk in images.chunks(self.chunk.max(1)) {
            let mut g = Graph::new();
            let b = self.params.bind(&mut g, false);
            let tokens = encode_images(&mut g, &b, &self.cfg.vision, chunk)?;
            let v = f(&mut g, &b, tokens)?;
            out.push(g.value(v).clone());
        }
        Ok(out)
    }

    /// Full token features `[B, N + 1, W]`.
    pub fn image_tokens(&self, images: &[&ImageArray]) -> Result<Tensor> {
        concat_rows(self.vision_pass(images, |_, _, t| Ok(t))?)
    }

    /// `e^I` for each image: `[B, D]`.
    pub fn image_embeddings(&self, images: &[&ImageArray]) -> Result<Tensor> {
        concat_rows(self.vision_pass(images, image_embedding)?)
    }

    /// Projected, normalized patch tokens: `[B, N, D]`.
    pub fn patch_embeddings(&self, images: &[&ImageArray]) -> Result<Tensor> {
        concat_rows(self.vision_pass(images, patch_embeddings)?)
    }

    /// Mean-pooled patch tokens before projection: `[B, W]`.
    pub fn pooled_features(&self, images: &[&ImageArray]) -> Result<Tensor> {
        concat_rows(self.vision_pass(images, |g, _, t| pool_patches(g, t))?)
    }

    /// `e^T` for each sequence: `[B, D]`.
    pub fn text_embeddings(&self, seqs: &[&TokenSequence]) -> Result<Tensor> {
        let mut out = Vec::new();
        for chunk in seqs.chunks(self.chunk.max(1)) {
            let mut g = Graph::new();
            let b = self.params.bind(&mut g, false);
            let (_, eos) = encode_text(&mut g, &b, &self.cfg.text, chunk)?;
            let e = text_embedding(&mut g, &b, eos)?;
            out.push(g.value(e).clone());
        }
        concat_rows(out)
    }
}

/// Concatenates tensors along axis 0.
pub fn concat_rows(parts: Vec<Tensor>) -> Result<Tensor> {
    let mut iter = parts.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| TensorError::Invalid("no inputs to concatenate".into()))?;
    let mut shape = first.shape().to_vec();
    let mut data = first.into_data();
    for t in iter {
        if t.shape()[1..] != shape[1..] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                lhs: shape,
                rhs: t.shape().to_vec(),
            });
        }
        shape[0] += t.shape()[0];
        data.extend(t.into_data());
    }
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn causal_mask_layout() {
        let m = causal_mask(3);
        assert_eq!(m.data()[0..3], [0.0, MASKED_SCORE, MASKED_SCORE]);
        assert_eq!(m.data()[6..9], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn desk_shapes() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        init_clip_params(&cfg, &mut rng, &mut store);
        let img = ImageArray::new(32, 32, vec![0.3; 32 * 32 * 3]).unwrap();
        let inf = Inference::new(&cfg, &store);
        assert_eq!(inf.image_tokens(&[&img]).unwrap().shape(), &[1, 17, 64]);
        assert_eq!(inf.image_embeddings(&[&img, &img]).unwrap().shape(), &[2, 32]);
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = ModelConfig::default();
        cfg.vision.heads = 5;
        assert!(cfg.validate().is_err());
    }
}
