//! Visual encoders mapping images to `embed_dim`-dimensional vectors: a
//! residual CNN and a small vision transformer, both ending in a linear
//! projection.

use rand::Rng;
use serde::{Deserialize, Serialize};
use shotlab_tensor::{AttentionMask, Bound, ParamId, ParamStore, Piece, Scalar, Tape, Tensor, Var};

use crate::datasets::Image;
use crate::error::{validation, Error, Result};
use crate::nn::{Dropout, Linear, Norm, TransformerBlock};
use crate::seed::derive_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    ResidualCnn,
    Vit,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualConfig {
    pub stem_width: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    /// Output width of each stage.
    pub widths: Vec<usize>,
    /// Stride of the first block of each stage.
    pub strides: Vec<usize>,
    pub blocks_per_stage: usize,
    pub norm_groups: usize,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        ResidualConfig {
            stem_width: 32,
            stem_kernel: 4,
            stem_stride: 4,
            widths: vec![32, 64, 128],
            strides: vec![1, 2, 2],
            blocks_per_stage: 2,
            norm_groups: 8,
        }
    }
}

impl ResidualConfig {
    /// A narrow single-block variant, roughly 25x cheaper than the default.
    pub fn compact() -> Self {
        ResidualConfig {
            stem_width: 16,
            stem_kernel: 4,
            stem_stride: 4,
            widths: vec![16, 32, 64],
            strides: vec![1, 2, 2],
            blocks_per_stage: 1,
            norm_groups: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitConfig {
    pub patch_size: usize,
    pub depth: usize,
    pub heads: usize,
    pub token_dim: usize,
    pub mlp_dim: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            patch_size: 8,
            depth: 6,
            heads: 4,
            token_dim: 128,
            mlp_dim: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub input_size: (usize, usize),
    pub embed_dim: usize,
    #[serde(default)]
    pub residual: ResidualConfig,
    #[serde(default)]
    pub vit: VitConfig,
    #[serde(default)]
    pub pretrained_source: Option<String>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::residual(64, 64, ResidualConfig::default())
    }
}

impl EncoderConfig {
    pub fn residual(input: usize, embed_dim: usize, residual: ResidualConfig) -> Self {
        EncoderConfig {
            kind: EncoderKind::ResidualCnn,
            input_size: (input, input),
            embed_dim,
            residual,
            vit: VitConfig::default(),
            pretrained_source: None,
        }
    }

    pub fn vit(input: usize, embed_dim: usize, vit: VitConfig) -> Self {
        EncoderConfig {
            kind: EncoderKind::Vit,
            input_size: (input, input),
            embed_dim,
            residual: ResidualConfig::default(),
            vit,
            pretrained_source: None,
        }
    }

    /// Token count inside the ViT, class token included.
    pub fn vit_sequence_len(&self) -> usize {
        let p = self.vit.patch_size;
        (self.input_size.0 / p) * (self.input_size.1 / p) + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (h, w) = self.input_size;
        if self.embed_dim == 0 || h == 0 || w == 0 {
            return bad("embed_dim and input size must be positive".into());
        }
        match self.kind {
            EncoderKind::Vit => {
                let v = &self.vit;
                if v.patch_size == 0 || h % v.patch_size != 0 || w % v.patch_size != 0 {
                    return bad(format!(
                        "input {h}x{w} is not divisible by patch size {}",
                        v.patch_size
                    ));
                }
                if v.heads == 0 || v.token_dim % v.heads != 0 {
                    return bad(format!(
                        "token_dim {} is not divisible by {} heads",
                        v.token_dim, v.heads
                    ));
                }
                if v.depth == 0 || v.mlp_dim == 0 {
                    return bad("vit depth and mlp_dim must be positive".into());
                }
            }
            EncoderKind::ResidualCnn => {
                let r = &self.residual;
                if r.widths.is_empty() || r.widths.len() != r.strides.len() {
                    return bad("residual widths and strides must be non-empty and equal length".into());
                }
                if r.blocks_per_stage == 0 || r.stem_kernel == 0 || r.stem_stride == 0 {
                    return bad("residual block counts, stem kernel and stride must be positive".into());
                }
                if r.strides.contains(&0) {
                    return bad("residual strides must be positive".into());
                }
                let g = r.norm_groups;
                if g == 0 || r.stem_width % g != 0 || r.widths.iter().any(|w| w % g != 0) {
                    return bad(format!("all widths must be divisible by norm_groups {g}"));
                }
                if h.min(w) < r.stem_kernel {
                    return bad("input smaller than the stem kernel".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        (k, cin, cout): (usize, usize, usize),
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let pad = if k > stride { (k - stride + 1) / 2 } else { 0 };
        Conv {
            w: store.add_uniform(format!("{name}.weight"), &[k, k, cin, cout], k * k * cin, rng),
            kernel: k,
            stride,
            pad,
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        debug_assert!(self.kernel >= 1);
        tape.conv2d(x, p.var(self.w), None, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv,
    gn1: Norm,
    conv2: Conv,
    gn2: Norm,
    shortcut: Option<(Conv, Norm)>,
}

#[derive(Clone, Debug)]
struct CnnLayout {
    stem: Conv,
    stem_gn: Norm,
    blocks: Vec<ResBlock>,
    groups: usize,
    proj: Linear,
}

#[derive(Clone, Debug)]
struct VitLayout {
    patch: Linear,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    ln: Norm,
    proj: Linear,
}

#[derive(Clone, Debug)]
enum Arch {
    Cnn(CnnLayout),
    Vit(VitLayout),
}

/// An encoder's configuration together with its parameters.
#[derive(Clone, Debug)]
pub struct Encoder<T: Scalar> {
    pub config: EncoderConfig,
    pub params: ParamStore<T>,
    pub trainable: bool,
    arch: Arch,
}

/// Builds an encoder with parameters drawn deterministically from `init_seed`.
pub fn build_encoder<T: Scalar>(config: &EncoderConfig, init_seed: u64) -> Result<Encoder<T>> {
    config.validate()?;
    let mut rng = derive_rng(init_seed, "encoder-init", &[]);
    let mut store = ParamStore::new();
    let d = config.embed_dim;
    let arch = match config.kind {
        EncoderKind::ResidualCnn => {
            let r = &config.residual;
            let stem = Conv::new(&mut store, "stem", (r.stem_kernel, 3, r.stem_width), r.stem_stride, &mut rng);
            let stem_gn = Norm::new(&mut store, "stem.gn", r.stem_width);
            let mut blocks = Vec::new();
            let mut cin = r.stem_width;
            for (s, (&width, &stride)) in r.widths.iter().zip(&r.strides).enumerate() {
                for b in 0..r.blocks_per_stage {
                    let name = format!("stage{s}.block{b}");
                    let stride = if b == 0 { stride } else { 1 };
                    let conv1 = Conv::new(&mut store, &format!("{name}.conv1"), (3, cin, width), stride, &mut rng);
                    let gn1 = Norm::new(&mut store, &format!("{name}.gn1"), width);
                    let conv2 = Conv::new(&mut store, &format!("{name}.conv2"), (3, width, width), 1, &mut rng);
                    let gn2 = Norm::new(&mut store, &format!("{name}.gn2"), width);
                    let shortcut = (stride != 1 || cin != width).then(|| {
                        (
                            Conv::new(&mut store, &format!("{name}.down"), (1, cin, width), stride, &mut rng),
                            Norm::new(&mut store, &format!("{name}.down.gn"), width),
                        )
                    });
                    blocks.push(ResBlock { conv1, gn1, conv2, gn2, shortcut });
                    cin = width;
                }
            }
            let proj = Linear::new(&mut store, "proj", cin, d, &mut rng);
            Arch::Cnn(CnnLayout {
                stem,
                stem_gn,
                blocks,
                groups: r.norm_groups,
                proj,
            })
        }
        EncoderKind::Vit => {
            let v = &config.vit;
            let td = v.token_dim;
            let patch_len = v.patch_size * v.patch_size * 3;
            let patch = Linear::new(&mut store, "patch", patch_len, td, &mut rng);
            let cls = store.add_normal("cls_token", &[1, td], td, &mut rng);
            let pos = store.add_normal("pos_embed", &[config.vit_sequence_len(), td], td, &mut rng);
            let blocks = (0..v.depth)
                .map(|i| TransformerBlock::new(&mut store, &format!("block{i}"), td, v.heads, v.mlp_dim, &mut rng))
                .collect();
            let ln = Norm::new(&mut store, "ln", td);
            let proj = Linear::new(&mut store, "proj", td, d, &mut rng);
            Arch::Vit(VitLayout {
                patch,
                cls,
                pos,
                blocks,
                ln,
                proj,
            })
        }
    };
    Ok(Encoder {
        config: config.clone(),
        params: store,
        trainable: true,
        arch,
    })
}

/// Stacks images into an NHWC tensor scaled to `[-1, 1]`.
pub fn images_to_tensor<'a, T: Scalar>(
    images: impl IntoIterator<Item = &'a Image>,
    size: (usize, usize),
) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut n = 0;
    for img in images {
        if img.size() != size || img.channels != 3 {
            return Err(validation(format!(
                "image is {:?}x{}, encoder expects {:?}x3",
                img.size(),
                img.channels,
                size
            )));
        }
        if img.data.iter().any(|v| !v.is_finite()) {
            return Err(validation("image contains non-finite pixels"));
        }
        data.extend(img.data.iter().map(|&v| T::from_f32((v - 0.5) / 0.5)));
        n += 1;
    }
    Ok(Tensor::new(vec![n, size.0, size.1, 3], data))
}

impl<T: Scalar> Encoder<T> {
    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.config.input_size
    }

    /// Records the forward pass for a `[batch, H, W, 3]` input and returns
    /// `[batch, embed_dim]`.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        let batch = tape.value(x).shape()[0];
        match &self.arch {
            Arch::Cnn(c) => {
                let g = c.groups;
                let h = c.stem.forward(tape, p, x);
                let h = c.stem_gn.group(tape, p, h, batch, g);
                let mut h = tape.relu(h);
                for b in &c.blocks {
                    let y = b.conv1.forward(tape, p, h);
                    let y = b.gn1.group(tape, p, y, batch, g);
                    let y = tape.relu(y);
                    let y = b.conv2.forward(tape, p, y);
                    let y = b.gn2.group(tape, p, y, batch, g);
                    let skip = match &b.shortcut {
                        Some((conv, gn)) => {
                            let s = conv.forward(tape, p, h);
                            gn.group(tape, p, s, batch, g)
                        }
                        None => h,
                    };
                    let y = tape.add(y, skip);
                    h = tape.relu(y);
                }
                let s = tape.value(h).shape().to_vec();
                let flat = tape.reshape(h, &[s[0] * s[1] * s[2], s[3]]);
                let pooled = tape.mean_groups(flat, batch);
                c.proj.forward(tape, p, pooled)
            }
            Arch::Vit(v) => {
                let cfg = &self.config.vit;
                let ps = cfg.patch_size;
                let td = cfg.token_dim;
                let patch_w = tape.reshape(p.var(v.patch.w), &[ps, ps, 3, td]);
                let t = tape.conv2d(x, patch_w, Some(p.var(v.patch.b)), ps, 0);
                let s = tape.value(t).shape().to_vec();
                let np = s[1] * s[2];
                let len = np + 1;
                let patches = tape.reshape(t, &[batch * np, td]);
                let cls = p.var(v.cls);
                let mut pieces = Vec::with_capacity(2 * batch);
                for b in 0..batch {
                    pieces.push(Piece { src: cls, src_row: 0, rows: 1, dst_row: b * len, dst_col: 0 });
                    pieces.push(Piece { src: patches, src_row: b * np, rows: np, dst_row: b * len + 1, dst_col: 0 });
                }
                let tokens = tape.stitch(batch * len, td, pieces);
                let mut h = tape.add_broadcast(tokens, p.var(v.pos));
                for block in &v.blocks {
                    h = block.forward(tape, p, h, batch, len, AttentionMask::Full, &mut Dropout::<crate::seed::Rng>::Off);
                }
                let idx: Vec<usize> = (0..batch).map(|b| b * len).collect();
                let cls_out = tape.gather_rows(h, &idx);
                let cls_out = v.ln.layer(tape, p, cls_out);
                v.proj.forward(tape, p, cls_out)
            }
        }
    }

    /// Embeds a batch of images without recording gradients.
    pub fn encode(&self, images: &[&Image]) -> Result<Tensor<T>> {
        let x = images_to_tensor::<T>(images.iter().copied(), self.input_size())?;
        let mut tape = Tape::no_grad();
        let p = tape.bind(&self.params, false);
        let xv = tape.constant(x);
        let out = self.forward(&mut tape, &p, xv);
        let out = tape.value(out).clone();
        if !out.all_finite() {
            return Err(Error::Numeric("encoder produced non-finite embeddings".into()));
        }
        Ok(out)
    }

    /// Encodes in chunks to bound memory.
    pub fn encode_chunked(&self, images: &[&Image], chunk: usize) -> Result<Tensor<T>> {
        let d = self.embed_dim();
        let mut data = Vec::with_capacity(images.len() * d);
        for part in images.chunks(chunk.max(1)) {
            data.extend(self.encode(part)?.into_data());
        }
        Ok(Tensor::new(vec![images.len(), d], data))
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            config: self.config.clone(),
            params: self.params.cast(),
            trainable: self.trainable,
            arch: self.arch.clone(),
        }
    }
}
