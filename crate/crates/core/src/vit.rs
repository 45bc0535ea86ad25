//! Small pre-norm vision transformer with a class token and a projection head that
//! scores an L2-normalized bottleneck against normalized prototype vectors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Real, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    /// Side of the square input raster.
    pub input_size: usize,
    /// Side of the square pixel block that becomes one token.
    pub token_patch: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Projection-head output width.
    pub proto_dim: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ViTConfig {
    /// Desk-scale model for 64×64 inputs.
    pub fn toy() -> Self {
        Self {
            input_size: 64,
            token_patch: 8,
            embed_dim: 64,
            depth: 3,
            heads: 4,
            mlp_ratio: 4,
            proto_dim: 256,
        }
    }

    /// Full-width model producing 768-dimensional embeddings of 256×256 patches.
    pub fn full() -> Self {
        Self {
            input_size: 256,
            token_patch: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            proto_dim: 65536,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.input_size,
            self.token_patch,
            self.embed_dim,
            self.depth,
            self.heads,
            self.mlp_ratio,
            self.proto_dim,
        ];
        if positive.contains(&0) {
            return Err(Error::Config(format!("zero-sized ViT dimension in {self:?}")));
        }
        if !self.input_size.is_multiple_of(self.token_patch) {
            return Err(Error::Config(format!(
                "input_size {} not divisible by token_patch {}",
                self.input_size, self.token_patch
            )));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.input_size / self.token_patch
    }

    /// Image tokens plus the class token.
    pub fn seq_len(&self) -> usize {
        self.grid_side() * self.grid_side() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Name and shape of every parameter tensor in checkpoint order.
    pub fn tensor_layout(&self) -> Vec<(String, (usize, usize))> {
        let d = self.embed_dim;
        let h = self.hidden_dim();
        let mut out = vec![
            ("patch_embed.weight".to_string(), (self.token_patch * self.token_patch, d)),
            ("patch_embed.bias".to_string(), (1, d)),
            ("cls_token".to_string(), (1, d)),
            ("pos_embed".to_string(), (self.seq_len(), d)),
        ];
        for b in 0..self.depth {
            let p = |name: &str| format!("blocks.{b}.{name}");
            out.extend([
                (p("norm1.weight"), (1, d)),
                (p("norm1.bias"), (1, d)),
                (p("attn.qkv.weight"), (d, 3 * d)),
                (p("attn.qkv.bias"), (1, 3 * d)),
                (p("attn.proj.weight"), (d, d)),
                (p("attn.proj.bias"), (1, d)),
                (p("norm2.weight"), (1, d)),
                (p("norm2.bias"), (1, d)),
                (p("mlp.fc1.weight"), (d, h)),
                (p("mlp.fc1.bias"), (1, h)),
                (p("mlp.fc2.weight"), (h, d)),
                (p("mlp.fc2.bias"), (1, d)),
            ]);
        }
        out.extend([
            ("norm.weight".to_string(), (1, d)),
            ("norm.bias".to_string(), (1, d)),
            ("head.fc1.weight".to_string(), (d, d)),
            ("head.fc1.bias".to_string(), (1, d)),
            ("head.fc2.weight".to_string(), (d, d)),
            ("head.fc2.bias".to_string(), (1, d)),
            ("head.prototypes".to_string(), (self.proto_dim, d)),
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensor_layout().iter().map(|(_, (r, c))| r * c).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub norm1_g: Matrix<T>,
    pub norm1_b: Matrix<T>,
    pub qkv_w: Matrix<T>,
    pub qkv_b: Matrix<T>,
    pub proj_w: Matrix<T>,
    pub proj_b: Matrix<T>,
    pub norm2_g: Matrix<T>,
    pub norm2_b: Matrix<T>,
    pub fc1_w: Matrix<T>,
    pub fc1_b: Matrix<T>,
    pub fc2_w: Matrix<T>,
    pub fc2_b: Matrix<T>,
}

/// All trainable tensors of one network. Also used to hold gradients and optimizer buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTParams<T> {
    pub patch_w: Matrix<T>,
    pub patch_b: Matrix<T>,
    pub cls_token: Matrix<T>,
    pub pos_embed: Matrix<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub norm_g: Matrix<T>,
    pub norm_b: Matrix<T>,
    pub head_w1: Matrix<T>,
    pub head_b1: Matrix<T>,
    pub head_w2: Matrix<T>,
    pub head_b2: Matrix<T>,
    /// K×D prototype directions; only their direction matters.
    pub head_proto: Matrix<T>,
}

impl<T: Real> ViTParams<T> {
    /// Builds a parameter set from tensors listed in [`ViTConfig::tensor_layout`] order.
    pub fn from_tensors(cfg: &ViTConfig, tensors: Vec<Matrix<T>>) -> Result<Self> {
        let layout = cfg.tensor_layout();
        if tensors.len() != layout.len() {
            return Err(Error::Dimension(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != *shape {
                return Err(Error::Dimension(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self::assemble(cfg.depth, tensors))
    }

    fn assemble(depth: usize, tensors: Vec<Matrix<T>>) -> Self {
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let patch_w = next();
        let patch_b = next();
        let cls_token = next();
        let pos_embed = next();
        let blocks = (0..depth)
            .map(|_| BlockParams {
                norm1_g: next(),
                norm1_b: next(),
                qkv_w: next(),
                qkv_b: next(),
                proj_w: next(),
                proj_b: next(),
                norm2_g: next(),
                norm2_b: next(),
                fc1_w: next(),
                fc1_b: next(),
                fc2_w: next(),
                fc2_b: next(),
            })
            .collect();
        Self {
            patch_w,
            patch_b,
            cls_token,
            pos_embed,
            blocks,
            norm_g: next(),
            norm_b: next(),
            head_w1: next(),
            head_b1: next(),
            head_w2: next(),
            head_b2: next(),
            head_proto: next(),
        }
    }

    pub fn zeros(cfg: &ViTConfig) -> Self {
        let tensors = cfg
            .tensor_layout()
            .into_iter()
            .map(|(_, (r, c))| Matrix::zeros(r, c))
            .collect();
        Self::from_tensors(cfg, tensors).expect("layout-consistent")
    }

    /// Uniform ±1/√fan_in weights, zero biases, unit norm scales, N(0, 0.02²) token embeddings.
    pub fn init(cfg: &ViTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid sigma");
        let tensors = cfg
            .tensor_layout()
            .into_iter()
            .map(|(name, (r, c))| {
                let data: Vec<T> = if name.ends_with(".bias") {
                    vec![T::zero(); r * c]
                } else if name.contains("norm") {
                    vec![T::one(); r * c]
                } else if name == "cls_token" || name == "pos_embed" {
                    (0..r * c).map(|_| T::lit(normal.sample(&mut rng))).collect()
                } else {
                    let bound = 1.0 / (r as f64).sqrt();
                    (0..r * c)
                        .map(|_| T::lit(rng.random_range(-bound..bound)))
                        .collect()
                };
                Matrix::from_vec(r, c, data)
            })
            .collect();
        Self::from_tensors(cfg, tensors)
    }

    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        let mut out = vec![&self.patch_w, &self.patch_b, &self.cls_token, &self.pos_embed];
        for b in &self.blocks {
            out.extend([
                &b.norm1_g, &b.norm1_b, &b.qkv_w, &b.qkv_b, &b.proj_w, &b.proj_b, &b.norm2_g,
                &b.norm2_b, &b.fc1_w, &b.fc1_b, &b.fc2_w, &b.fc2_b,
            ]);
        }
        out.extend([
            &self.norm_g,
            &self.norm_b,
            &self.head_w1,
            &self.head_b1,
            &self.head_w2,
            &self.head_b2,
            &self.head_proto,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.cls_token,
            &mut self.pos_embed,
        ];
        for b in &mut self.blocks {
            out.extend([
                &mut b.norm1_g,
                &mut b.norm1_b,
                &mut b.qkv_w,
                &mut b.qkv_b,
                &mut b.proj_w,
                &mut b.proj_b,
                &mut b.norm2_g,
                &mut b.norm2_b,
                &mut b.fc1_w,
                &mut b.fc1_b,
                &mut b.fc2_w,
                &mut b.fc2_b,
            ]);
        }
        out.extend([
            &mut self.norm_g,
            &mut self.norm_b,
            &mut self.head_w1,
            &mut self.head_b1,
            &mut self.head_w2,
            &mut self.head_b2,
            &mut self.head_proto,
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Flat copy of every parameter in checkpoint order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        let (a, b) = (self.tensors(), other.tensors());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.shape() == y.shape())
    }

    pub fn cast<U: Real>(&self) -> ViTParams<U> {
        let tensors = self.tensors().into_iter().map(|t| t.cast()).collect();
        ViTParams::assemble(self.blocks.len(), tensors)
    }
}

/// Parameters registered as leaves on a tape, in checkpoint order.
pub struct ParamVars(pub Vec<Var>);

impl ParamVars {
    pub fn register<T: Real>(tape: &mut Tape<T>, params: &ViTParams<T>) -> Self {
        ParamVars(params.tensors().into_iter().map(|t| tape.leaf(t)).collect())
    }

    /// Collects leaf gradients into a parameter-shaped container (zeros where unreached).
    pub fn gradients<T: Real>(&self, grads: &mut [Option<Vec<T>>], like: &ViTParams<T>) -> ViTParams<T> {
        let mut out = like.clone();
        for (slot, var) in out.tensors_mut().into_iter().zip(&self.0) {
            match grads[var.index()].take() {
                Some(g) => slot.data = g,
                None => slot.data.iter_mut().for_each(|v| *v = T::zero()),
            }
        }
        out
    }
}

/// Output nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// 1×D class-token embedding after the final layer norm.
    pub embedding: Var,
    /// 1×K cosine similarities to the prototypes, in [−1, 1].
    pub logits: Var,
}

/// Fixed standardization applied to [0, 1] pixels before the token embedding.
/// Without it the constant mid-gray level dominates every token and the class
/// token barely depends on texture at initialization.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

/// Splits an `input_size`² raster into a (tokens × token_patch²) matrix of standardized pixels.
fn tokenize<T: Real>(cfg: &ViTConfig, image: &[T]) -> Vec<T> {
    let (s, p, g) = (cfg.input_size, cfg.token_patch, cfg.grid_side());
    let (mean, std) = (T::lit(INPUT_MEAN), T::lit(INPUT_STD));
    let mut out = Vec::with_capacity(s * s);
    for ty in 0..g {
        for tx in 0..g {
            for y in ty * p..(ty + 1) * p {
                out.extend(image[y * s + tx * p..y * s + (tx + 1) * p].iter().map(|&v| (v - mean) / std));
            }
        }
    }
    out
}

/// Records one forward pass of `image` (row-major, `input_size`², values in [0, 1]).
pub fn forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    cfg: &ViTConfig,
    image: &[T],
) -> Result<ForwardVars> {
    let expected = cfg.input_size * cfg.input_size;
    if image.len() != expected {
        return Err(Error::Dimension(format!(
            "image has {} values, model expects {expected}",
            image.len()
        )));
    }
    let p = &vars.0;
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let tokens = cfg.seq_len() - 1;
    let patches = tape.leaf_vec(tokens, cfg.token_patch * cfg.token_patch, tokenize(cfg, image));
    let x = tape.matmul(patches, p[0]);
    let x = tape.add_row(x, p[1]);
    let x = tape.concat_rows(p[2], x);
    let mut x = tape.add(x, p[3]);
    let attn_scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    for b in 0..cfg.depth {
        let w = &p[4 + 12 * b..4 + 12 * (b + 1)];
        let h = tape.layer_norm(x, w[0], w[1]);
        let qkv = tape.matmul(h, w[2]);
        let qkv = tape.add_row(qkv, w[3]);
        let mut heads = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let q = tape.slice_cols(qkv, hd * dh, dh);
            let k = tape.slice_cols(qkv, d + hd * dh, dh);
            let v = tape.slice_cols(qkv, 2 * d + hd * dh, dh);
            let scores = tape.matmul_tb(q, k);
            let scores = tape.scale(scores, attn_scale);
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, v));
        }
        let o = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
        let o = tape.matmul(o, w[4]);
        let o = tape.add_row(o, w[5]);
        x = tape.add(x, o);
        let h = tape.layer_norm(x, w[6], w[7]);
        let h = tape.matmul(h, w[8]);
        let h = tape.add_row(h, w[9]);
        let h = tape.gelu(h);
        let h = tape.matmul(h, w[10]);
        let h = tape.add_row(h, w[11]);
        x = tape.add(x, h);
    }
    let t = 4 + 12 * cfg.depth;
    let cls = tape.row(x, 0);
    let embedding = tape.layer_norm(cls, p[t], p[t + 1]);
    let h = tape.matmul(embedding, p[t + 2]);
    let h = tape.add_row(h, p[t + 3]);
    let h = tape.gelu(h);
    let h = tape.matmul(h, p[t + 4]);
    let h = tape.add_row(h, p[t + 5]);
    // cosine similarity between the bottleneck and each prototype
    let z = tape.normalize_rows(h);
    let protos = tape.normalize_rows(p[t + 6]);
    let logits = tape.matmul_tb(z, protos);
    Ok(ForwardVars { embedding, logits })
}

/// Embedding (D values) and projection logits (K values) for one normalized image.
pub fn vit_forward<T: Real>(params: &ViTParams<T>, cfg: &ViTConfig, image: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    if params.blocks.len() != cfg.depth || params.head_proto.rows != cfg.proto_dim {
        return Err(Error::Dimension("parameters do not match configuration".into()));
    }
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let out = forward_on_tape(&mut tape, &vars, cfg, image)?;
    Ok((tape.value(out.embedding).to_vec(), tape.value(out.logits).to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ViTConfig {
        ViTConfig {
            input_size: 8,
            token_patch: 4,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            proto_dim: 6,
        }
    }

    #[test]
    fn toy_sequence_length() {
        let cfg = ViTConfig::toy();
        assert_eq!(cfg.seq_len(), 65);
        let params = ViTParams::<f32>::init(&cfg, 0).unwrap();
        assert_eq!(params.pos_embed.rows, 65);
        assert_eq!(params.param_count(), cfg.param_count());
    }

    #[test]
    fn full_config_is_768_wide() {
        let cfg = ViTConfig::full();
        cfg.validate().unwrap();
        assert_eq!(cfg.embed_dim, 768);
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let cfg = tiny();
        let mut params = ViTParams::<f64>::init(&cfg, 1).unwrap();
        params.head_w2.data.iter_mut().for_each(|v| *v = 0.0);
        let img: Vec<f64> = (0..64).map(|i| (i % 7) as f64 / 7.0).collect();
        let (emb, logits) = vit_forward(&params, &cfg, &img).unwrap();
        assert_eq!(emb.len(), 8);
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny();
        let a = ViTParams::<f32>::init(&cfg, 5).unwrap();
        let b = ViTParams::<f32>::init(&cfg, 5).unwrap();
        assert_eq!(a, b);
        let img: Vec<f32> = (0..64).map(|i| (i * 37 % 64) as f32 / 64.0).collect();
        let r1 = vit_forward(&a, &cfg, &img).unwrap();
        let r2 = vit_forward(&b, &cfg, &img).unwrap();
        assert_eq!(r1.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), r2.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(r1.1, r2.1);
    }

    #[test]
    fn wrong_image_size_is_dimension_error() {
        let cfg = tiny();
        let params = ViTParams::<f32>::init(&cfg, 0).unwrap();
        assert!(matches!(vit_forward(&params, &cfg, &[0.0; 10]), Err(Error::Dimension(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.token_patch = 3;
        assert!(cfg.validate().is_err());
    }
}
