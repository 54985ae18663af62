use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbones::LayerSelection;
use crate::deskworld::ACTION_DIM;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    #[default]
    Mlp,
    Vqbet,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    #[default]
    Geo,
    Pixel,
}

macro_rules! str_enum {
    ($ty:ident { $($var:ident => $s:literal),+ }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$var => $s),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($s => Ok($ty::$var),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"), other
                    ))),
                }
            }
        }
    };
}

str_enum!(HeadKind { Mlp => "mlp", Vqbet => "vqbet" });
str_enum!(BackboneKind { Geo => "geo", Pixel => "pixel" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqConfig {
    /// Codebook size K.
    pub codes: usize,
    /// Latent width d_z.
    pub latent: usize,
    /// Hidden width of the encoder and decoder MLPs.
    pub hidden: usize,
    pub commitment_beta: f64,
    /// Weight of the offset regression term in the head loss.
    pub offset_weight: f64,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            codes: 32,
            latent: 8,
            hidden: 32,
            commitment_beta: 0.25,
            offset_weight: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub d_repr: usize,
    pub d_conv: usize,
    pub d_hidden: usize,
    pub d_lang_emb: usize,
    /// Chunk length T_c; the head emits `7 · chunk` values.
    pub chunk: usize,
    pub select: LayerSelection,
    pub trunk_layers: usize,
    pub trunk_heads: usize,
    /// Hidden width of each trunk block's MLP, as a multiple of `d_hidden`.
    pub trunk_mlp_ratio: usize,
    pub head: HeadKind,
    pub backbone: BackboneKind,
    pub views: usize,
    pub vq: VqConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            d_repr: 64,
            d_conv: 32,
            d_hidden: 64,
            d_lang_emb: 32,
            chunk: 1,
            select: LayerSelection::default(),
            trunk_layers: 2,
            trunk_heads: 4,
            trunk_mlp_ratio: 4,
            head: HeadKind::Mlp,
            backbone: BackboneKind::Geo,
            views: 2,
            vq: VqConfig::default(),
        }
    }
}

impl PolicyConfig {
    pub fn d_act(&self) -> usize {
        ACTION_DIM * self.chunk
    }

    /// Tokens per sequence: one per view, language, proprio, action.
    pub fn seq_len(&self) -> usize {
        self.views + 3
    }

    pub fn validate(&self, geo_layers: usize) -> Result<()> {
        let positive = [
            ("d_repr", self.d_repr),
            ("d_conv", self.d_conv),
            ("d_hidden", self.d_hidden),
            ("d_lang_emb", self.d_lang_emb),
            ("chunk", self.chunk),
            ("trunk_layers", self.trunk_layers),
            ("trunk_heads", self.trunk_heads),
            ("trunk_mlp_ratio", self.trunk_mlp_ratio),
            ("views", self.views),
            ("vq.latent", self.vq.latent),
            ("vq.hidden", self.vq.hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_hidden % self.trunk_heads != 0 {
            return Err(Error::Config(format!(
                "d_hidden {} is not divisible by trunk_heads {}",
                self.d_hidden, self.trunk_heads
            )));
        }
        if self.vq.codes < 2 {
            return Err(Error::Config("vq.codes must be at least 2".into()));
        }
        if self.backbone == BackboneKind::Geo {
            self.select.indices(geo_layers)?;
        }
        Ok(())
    }
}
