use crate::error::{MugError, Result};
use crate::kv;

/// Architecture of the encoder and both decoders.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub enc_dim: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub img_dec_dim: usize,
    pub img_dec_layers: usize,
    pub img_dec_heads: usize,
    pub txt_dim: usize,
    /// Causal self-attention layers before any cross-attention.
    pub txt_uni_layers: usize,
    /// Layers with causal self-attention followed by cross-attention.
    pub txt_multi_layers: usize,
    pub txt_heads: usize,
    pub vocab_size: usize,
    pub max_caption_len: usize,
    pub mask_ratio: f64,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            ..Self::tiny()
        }
    }
}

impl ModelConfig {
    /// 32-wide, 1-channel 32×32 configuration used for verification runs.
    pub fn tiny() -> Self {
        Self {
            patch_size: 4,
            channels: 1,
            height: 32,
            width: 32,
            enc_dim: 32,
            enc_layers: 2,
            enc_heads: 4,
            img_dec_dim: 32,
            img_dec_layers: 1,
            img_dec_heads: 4,
            txt_dim: 32,
            txt_uni_layers: 1,
            txt_multi_layers: 2,
            txt_heads: 4,
            vocab_size: 32,
            max_caption_len: crate::text::DEFAULT_MAX_LEN,
            mask_ratio: 0.75,
            mlp_ratio: 4,
            ln_eps: 1e-6,
        }
    }

    pub fn grid_rows(&self) -> usize {
        self.height / self.patch_size
    }

    pub fn grid_cols(&self) -> usize {
        self.width / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(MugError::Config(m));
        if self.patch_size == 0 || self.height % self.patch_size != 0 || self.width % self.patch_size != 0 {
            return err(format!(
                "image {}×{} not divisible by patch size {}",
                self.height, self.width, self.patch_size
            ));
        }
        if self.channels == 0 {
            return err("channels must be positive".into());
        }
        for (name, dim, heads) in [
            ("enc", self.enc_dim, self.enc_heads),
            ("img_dec", self.img_dec_dim, self.img_dec_heads),
            ("txt", self.txt_dim, self.txt_heads),
        ] {
            if dim == 0 || heads == 0 || dim % heads != 0 {
                return err(format!("{name}_dim {dim} must be a positive multiple of {name}_heads {heads}"));
            }
        }
        if self.enc_layers == 0 || self.img_dec_layers == 0 {
            return err("encoder and image decoder need at least one layer".into());
        }
        if self.txt_uni_layers == 0 || self.txt_multi_layers == 0 {
            return err("text decoder needs at least one uni-modal and one multi-modal layer".into());
        }
        if self.vocab_size <= crate::text::NUM_SPECIALS {
            return err(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if self.max_caption_len < 2 {
            return err("max_caption_len must be at least 2".into());
        }
        if self.mlp_ratio == 0 || self.ln_eps <= 0.0 {
            return err("mlp_ratio and ln_eps must be positive".into());
        }
        crate::vision::masked_count(self.num_patches(), self.mask_ratio)?;
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("patch_size", self.patch_size.to_string()),
            ("channels", self.channels.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("enc_dim", self.enc_dim.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("enc_heads", self.enc_heads.to_string()),
            ("img_dec_dim", self.img_dec_dim.to_string()),
            ("img_dec_layers", self.img_dec_layers.to_string()),
            ("img_dec_heads", self.img_dec_heads.to_string()),
            ("txt_dim", self.txt_dim.to_string()),
            ("txt_uni_layers", self.txt_uni_layers.to_string()),
            ("txt_multi_layers", self.txt_multi_layers.to_string()),
            ("txt_heads", self.txt_heads.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_caption_len", self.max_caption_len.to_string()),
            ("mask_ratio", format!("{:?}", self.mask_ratio)),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("ln_eps", format!("{:?}", self.ln_eps)),
        ]
    }

    /// Applies one `key=value`; returns `false` when the key is not a model
    /// field.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<bool> {
        match key {
            "patch_size" => self.patch_size = kv::value(key, raw)?,
            "channels" => self.channels = kv::value(key, raw)?,
            "height" => self.height = kv::value(key, raw)?,
            "width" => self.width = kv::value(key, raw)?,
            "enc_dim" => self.enc_dim = kv::value(key, raw)?,
            "enc_layers" => self.enc_layers = kv::value(key, raw)?,
            "enc_heads" => self.enc_heads = kv::value(key, raw)?,
            "img_dec_dim" => self.img_dec_dim = kv::value(key, raw)?,
            "img_dec_layers" => self.img_dec_layers = kv::value(key, raw)?,
            "img_dec_heads" => self.img_dec_heads = kv::value(key, raw)?,
            "txt_dim" => self.txt_dim = kv::value(key, raw)?,
            "txt_uni_layers" => self.txt_uni_layers = kv::value(key, raw)?,
            "txt_multi_layers" => self.txt_multi_layers = kv::value(key, raw)?,
            "txt_heads" => self.txt_heads = kv::value(key, raw)?,
            "vocab_size" => self.vocab_size = kv::value(key, raw)?,
            "max_caption_len" => self.max_caption_len = kv::value(key, raw)?,
            "mask_ratio" => self.mask_ratio = kv::value(key, raw)?,
            "mlp_ratio" => self.mlp_ratio = kv::value(key, raw)?,
            "ln_eps" => self.ln_eps = kv::value(key, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in kv::parse(text, "model config")? {
            if !cfg.set(&k, &v)? {
                return Err(MugError::Config(format!("unknown model config key {k}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_roundtrip() {
        let mut c = ModelConfig::tiny();
        c.mask_ratio = 0.6;
        c.txt_multi_layers = 8;
        assert_eq!(ModelConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_head_split() {
        let c = ModelConfig {
            enc_heads: 5,
            ..ModelConfig::tiny()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            txt_uni_layers: 0,
            ..ModelConfig::tiny()
        };
        assert!(c.validate().is_err());
    }
}
