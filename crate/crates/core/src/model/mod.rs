//! Masked-patch ViT encoder with an image decoder and a two-stage text
//! decoder reading the same visual latent.

mod config;
pub mod layers;

pub use config::ModelConfig;

use crate::autograd::Var;
use crate::error::{MugError, Result};
use crate::params::{Graph, ParamId, ParamStore};
use crate::rng::{self, stream};
use crate::tensor::{Real, Tensor};
use crate::text::CausalMask;
use crate::vision::MaskSpec;
use layers::{grid_sinusoidal_table, sinusoidal_table, Block, Init, LayerNorm, Linear};

/// Which sub-network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    ImageDecoder,
    TextDecoder,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<Self> {
        match name.split('.').next()? {
            "encoder" => Some(Self::Encoder),
            "image_decoder" => Some(Self::ImageDecoder),
            "text_decoder" => Some(Self::TextDecoder),
            _ => None,
        }
    }
}

/// Only `*.weight` matrices are decayed; biases, norm parameters and the
/// class/mask tokens are not.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

#[derive(Clone, Debug)]
struct Layout {
    patch_embed: Linear,
    cls_token: ParamId,
    enc_blocks: Vec<Block>,
    enc_norm: LayerNorm,
    dec_embed: Linear,
    mask_token: ParamId,
    dec_blocks: Vec<Block>,
    dec_norm: LayerNorm,
    dec_pred: Linear,
    tok_embed: ParamId,
    uni_blocks: Vec<Block>,
    multi_blocks: Vec<Block>,
    txt_norm: LayerNorm,
    head: Linear,
}

/// Encoder output: class token followed by the visible patch tokens.
#[derive(Clone, Copy, Debug)]
pub struct Latent {
    pub var: Var,
    pub visible: usize,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    layout: Layout,
    enc_pos: Tensor<T>,
    dec_pos: Tensor<T>,
    txt_pos: Tensor<T>,
}

impl<T: Real> Model<T> {
    /// Truncated-normal weights (σ = 0.02), zero biases, unit norm gains;
    /// deterministic in `(config, seed)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng::rng_for(&[stream::INIT, seed]);
        let c = config;
        let layout = {
            let mut init = Init {
                store: &mut store,
                rng: &mut rng,
            };
            let patch_embed = Linear::new(&mut init, "encoder.patch_embed", c.patch_dim(), c.enc_dim)?;
            let cls_token = init.weight("encoder.cls_token".into(), &[1, c.enc_dim])?;
            let enc_blocks = (0..c.enc_layers)
                .map(|i| Block::new(&mut init, &format!("encoder.blocks.{i}"), c.enc_dim, c.enc_heads, c.mlp_ratio, None))
                .collect::<Result<Vec<_>>>()?;
            let enc_norm = LayerNorm::new(&mut init, "encoder.norm", c.enc_dim)?;

            let dec_embed = Linear::new(&mut init, "image_decoder.embed", c.enc_dim, c.img_dec_dim)?;
            let mask_token = init.weight("image_decoder.mask_token".into(), &[1, c.img_dec_dim])?;
            let dec_blocks = (0..c.img_dec_layers)
                .map(|i| {
                    Block::new(&mut init, &format!("image_decoder.blocks.{i}"), c.img_dec_dim, c.img_dec_heads, c.mlp_ratio, None)
                })
                .collect::<Result<Vec<_>>>()?;
            let dec_norm = LayerNorm::new(&mut init, "image_decoder.norm", c.img_dec_dim)?;
            let dec_pred = Linear::new(&mut init, "image_decoder.pred", c.img_dec_dim, c.patch_dim())?;

            let tok_embed = init.weight("text_decoder.token_embed.weight".into(), &[c.vocab_size, c.txt_dim])?;
            let uni_blocks = (0..c.txt_uni_layers)
                .map(|i| Block::new(&mut init, &format!("text_decoder.uni.{i}"), c.txt_dim, c.txt_heads, c.mlp_ratio, None))
                .collect::<Result<Vec<_>>>()?;
            let multi_blocks = (0..c.txt_multi_layers)
                .map(|i| {
                    Block::new(&mut init, &format!("text_decoder.multi.{i}"), c.txt_dim, c.txt_heads, c.mlp_ratio, Some(c.enc_dim))
                })
                .collect::<Result<Vec<_>>>()?;
            let txt_norm = LayerNorm::new(&mut init, "text_decoder.norm", c.txt_dim)?;
            let head = Linear::new(&mut init, "text_decoder.head", c.txt_dim, c.vocab_size)?;
            Layout {
                patch_embed,
                cls_token,
                enc_blocks,
                enc_norm,
                dec_embed,
                mask_token,
                dec_blocks,
                dec_norm,
                dec_pred,
                tok_embed,
                uni_blocks,
                multi_blocks,
                txt_norm,
                head,
            }
        };
        Ok(Self {
            config: config.clone(),
            params: store,
            layout,
            enc_pos: grid_sinusoidal_table(config.grid_rows(), config.grid_cols(), config.enc_dim),
            dec_pos: class_row_then(grid_sinusoidal_table(config.grid_rows(), config.grid_cols(), config.img_dec_dim)),
            txt_pos: sinusoidal_table(config.max_caption_len, config.txt_dim),
        })
    }

    /// Same architecture with parameters replaced by `params`, which must
    /// hold exactly the same names and shapes.
    pub fn with_params(&self, params: ParamStore<T>) -> Result<Self> {
        for (name, t) in params.iter() {
            match self.params.by_name(name) {
                None => return Err(MugError::Config(format!("unknown parameter {name}"))),
                Some(mine) if mine.shape() != t.shape() => {
                    return Err(MugError::Config(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        mine.shape()
                    )))
                }
                _ => {}
            }
        }
        for (name, _) in self.params.iter() {
            if params.by_name(name).is_none() {
                return Err(MugError::Config(format!("missing parameter {name}")));
            }
        }
        // reorder to match the layout's ids
        let mut ordered = ParamStore::new();
        for (name, _) in self.params.iter() {
            ordered.insert(name, params.by_name(name).unwrap().clone())?;
        }
        Ok(Self {
            params: ordered,
            ..self.clone()
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            enc_pos: self.enc_pos.cast(),
            dec_pos: self.dec_pos.cast(),
            txt_pos: self.txt_pos.cast(),
        }
    }

    pub fn graph(&self) -> Graph<'_, T> {
        Graph::new(&self.params)
    }

    fn eps(&self) -> T {
        T::lit(self.config.ln_eps)
    }

    /// Embeds visible patches at their original positions, prepends the
    /// class token and runs the encoder blocks.
    pub fn encode(&self, g: &mut Graph<'_, T>, visible: &Tensor<T>, indices: &[usize]) -> Result<Latent> {
        let n = self.config.num_patches();
        if visible.shape() != [indices.len(), self.config.patch_dim()] {
            return Err(MugError::Shape(format!(
                "visible patches {:?} do not match {} indices of dim {}",
                visible.shape(),
                indices.len(),
                self.config.patch_dim()
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MugError::Invalid("visible indices must be strictly ascending".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(MugError::Invalid(format!("patch index {bad} out of range for {n} patches")));
        }
        let l = &self.layout;
        let x = g.tape.constant(visible.clone());
        let h = l.patch_embed.forward(g, x)?;
        let pos = gather_table(&self.enc_pos, indices);
        let pos = g.tape.constant(pos);
        let h = g.tape.add(h, pos)?;
        let cls = g.param(l.cls_token);
        let mut x = g.tape.concat_rows(&[cls, h])?;
        for blk in &l.enc_blocks {
            x = blk.forward(g, x, self.eps(), None, None)?;
        }
        let var = l.enc_norm.forward(g, x, self.eps())?;
        Ok(Latent {
            var,
            visible: indices.len(),
        })
    }

    /// Encodes the patches `mask` keeps visible.
    pub fn encode_masked(&self, g: &mut Graph<'_, T>, patches: &Tensor<T>, mask: &MaskSpec) -> Result<Latent> {
        if patches.rows() != mask.len() {
            return Err(MugError::Shape(format!(
                "{} patches but mask covers {}",
                patches.rows(),
                mask.len()
            )));
        }
        let indices = mask.visible_indices();
        let visible = gather_table(patches, &indices);
        self.encode(g, &visible, &indices)
    }

    /// Per-patch pixel predictions `[N, P]` for every slot; masked slots are
    /// filled with the learned mask token before decoding.
    pub fn decode_image(&self, g: &mut Graph<'_, T>, latent: Latent, mask: &MaskSpec) -> Result<Var> {
        let n = self.config.num_patches();
        if mask.len() != n || mask.visible_count() != latent.visible {
            return Err(MugError::Shape(format!(
                "mask ({} patches, {} visible) inconsistent with latent ({} visible of {n})",
                mask.len(),
                mask.visible_count(),
                latent.visible
            )));
        }
        let l = &self.layout;
        let y = l.dec_embed.forward(g, latent.var)?;
        // row 0 of y is the class token; visible patch r sits at row r + 1
        let fill_row = latent.visible + 1;
        let src = if mask.omega > 0 {
            let mt = g.param(l.mask_token);
            g.tape.concat_rows(&[y, mt])?
        } else {
            y
        };
        // the class token leads the sequence without a position and is
        // dropped before the pixel head
        let mut rank = 0;
        let index: Vec<usize> = std::iter::once(0)
            .chain(mask.keep.iter().map(|&k| {
                if k {
                    rank += 1;
                    rank
                } else {
                    fill_row
                }
            }))
            .collect();
        let x = g.tape.gather_rows(src, index)?;
        let pos = g.tape.constant(self.dec_pos.clone());
        let mut x = g.tape.add(x, pos)?;
        for blk in &l.dec_blocks {
            x = blk.forward(g, x, self.eps(), None, None)?;
        }
        let x = g.tape.gather_rows(x, (1..=n).collect())?;
        let x = l.dec_norm.forward(g, x, self.eps())?;
        l.dec_pred.forward(g, x)
    }

    /// Next-token logits `[L, V]` for `tokens` conditioned on the latent.
    pub fn decode_text(&self, g: &mut Graph<'_, T>, latent: Latent, tokens: &[usize]) -> Result<Var> {
        let len = tokens.len();
        if len == 0 || len > self.config.max_caption_len {
            return Err(MugError::Invalid(format!(
                "text length {len} outside 1..={}",
                self.config.max_caption_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(MugError::Invalid(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let l = &self.layout;
        let table = g.param(l.tok_embed);
        let emb = g.tape.gather_rows(table, tokens.to_vec())?;
        let pos = g.tape.constant(gather_table(&self.txt_pos, &(0..len).collect::<Vec<_>>()));
        let mut x = g.tape.add(emb, pos)?;
        let causal = CausalMask::new(len)?.to_flags();
        for blk in &l.uni_blocks {
            x = blk.forward(g, x, self.eps(), Some(&causal), None)?;
        }
        for blk in &l.multi_blocks {
            x = blk.forward(g, x, self.eps(), Some(&causal), Some(latent.var))?;
        }
        let x = l.txt_norm.forward(g, x, self.eps())?;
        l.head.forward(g, x)
    }

    /// Ids of parameters belonging to `group`.
    pub fn group_ids(&self, group: ParamGroup) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| ParamGroup::of(self.params.name(id)) == Some(group))
            .collect()
    }
}

/// Prepends an all-zero row for the class token.
fn class_row_then<T: Real>(table: Tensor<T>) -> Tensor<T> {
    let (n, d) = table.dims2();
    let mut data = vec![T::zero(); d];
    data.extend_from_slice(table.data());
    Tensor::new(vec![n + 1, d], data).expect("consistent shape")
}

fn gather_table<T: Real>(table: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let d = table.cols();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(table.row(r));
    }
    Tensor::new(vec![rows.len(), d], data).expect("table rows")
}
