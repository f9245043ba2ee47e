//! Architecture configuration, presets, and the flat key=value format shared
//! by run-config files and checkpoint config blocks.

use crate::error::{Error, Result};
use crate::pe::PeVariant;
use crate::vocab::Vocab;

/// Inner structure of the encoder feedforward sub-layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfVariant {
    /// Two 1x1 convolutions.
    Pointwise,
    /// Two 3x3 convolutions.
    Conv3,
    /// First convolution 3x3, second 1x1 (the cheaper reading of the naive
    /// convolutional feedforward; kept selectable for the cost sweeps).
    Conv3Single,
    /// 1x1 expansion, depthwise 3x3, 1x1 projection.
    Separable,
}

impl FfVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pointwise" => Ok(FfVariant::Pointwise),
            "conv3" => Ok(FfVariant::Conv3),
            "conv3_single" => Ok(FfVariant::Conv3Single),
            "separable" => Ok(FfVariant::Separable),
            _ => Err(Error::Config(format!(
                "unknown feedforward variant {s:?} (expected pointwise|conv3|conv3_single|separable)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FfVariant::Pointwise => "pointwise",
            FfVariant::Conv3 => "conv3",
            FfVariant::Conv3Single => "conv3_single",
            FfVariant::Separable => "separable",
        }
    }
}

/// Full architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub ff_mult: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub charset: String,
    pub max_len: usize,
    pub pe: PeVariant,
    pub pe_hidden: usize,
    pub ff: FfVariant,
    pub down_h: usize,
    pub down_w: usize,
    pub cin: usize,
    pub height: usize,
    pub width: usize,
    pub dropout: f64,
    pub seed: u64,
}

pub const PRESET_NAMES: [&str; 4] = ["big", "middle", "small", "tiny"];

impl ModelConfig {
    /// Named preset: `big` is the base construct (512 hidden units, 12
    /// encoder and 6 decoder layers, 94 output classes); `middle` halves the
    /// channel dim, `small` additionally trims the depth, and `tiny` is the
    /// desk-scale configuration used by the toy experiments.
    pub fn preset(name: &str) -> Result<ModelConfig> {
        let big = ModelConfig {
            dim: 512,
            ff_mult: 4,
            heads: 8,
            enc_layers: 12,
            dec_layers: 6,
            charset: Vocab::full93().charset(),
            max_len: 25,
            pe: PeVariant::A2dpe,
            pe_hidden: 256,
            ff: FfVariant::Separable,
            down_h: 4,
            down_w: 4,
            cin: 3,
            height: 32,
            width: 100,
            dropout: 0.1,
            seed: 0,
        };
        match name {
            "big" => Ok(big),
            "middle" => Ok(ModelConfig { dim: 256, pe_hidden: 128, ..big }),
            "small" => Ok(ModelConfig {
                dim: 256,
                pe_hidden: 128,
                enc_layers: 9,
                dec_layers: 3,
                ..big
            }),
            "tiny" => Ok(ModelConfig {
                dim: 64,
                heads: 4,
                enc_layers: 2,
                dec_layers: 1,
                charset: Vocab::digits().charset(),
                max_len: 12,
                pe_hidden: 32,
                cin: 1,
                height: 32,
                width: 64,
                // toy runs train on abundant fresh synthetic data; dropout
                // regularization only slows them down
                dropout: 0.0,
                ..big
            }),
            _ => Err(Error::Usage(format!(
                "unknown preset {name:?} (expected one of {PRESET_NAMES:?})"
            ))),
        }
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(&self.charset)
    }

    /// Output classes (characters + end token).
    pub fn n_classes(&self) -> Result<usize> {
        Ok(self.vocab()?.n_classes())
    }

    /// Feature-map extents after the CNN downsampling schedule.
    pub fn feature_hw(&self) -> (usize, usize) {
        (self.height / self.down_h, self.width / self.down_w)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.dim % 2 != 0 {
            return fail(format!("dim {} must be even for sinusoid tables", self.dim));
        }
        if self.pe == PeVariant::Concat2d && self.dim % 4 != 0 {
            return fail(format!("concat_2d needs dim divisible by 4, got {}", self.dim));
        }
        if self.ff_mult == 0 {
            return fail("ff_mult must be >= 1".into());
        }
        if self.pe == PeVariant::A2dpe && self.pe_hidden == 0 {
            return fail("pe_hidden must be >= 1 for a2dpe".into());
        }
        match (self.down_h, self.down_w) {
            (2, 2) | (4, 4) | (8, 4) | (16, 4) | (32, 4) => {}
            (h, w) => {
                return fail(format!(
                    "unsupported downsampling {h},{w} (expected 2,2 4,4 8,4 16,4 or 32,4)"
                ))
            }
        }
        if self.height % self.down_h != 0 || self.width % self.down_w != 0 {
            return fail(format!(
                "input {}x{} not divisible by downsampling {},{}",
                self.height, self.width, self.down_h, self.down_w
            ));
        }
        if self.max_len == 0 {
            return fail("max_len must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.cin == 0 {
            return fail("cin must be >= 1".into());
        }
        self.vocab()?;
        Ok(())
    }

    /// Stable full dump, one key=value per line.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("dim", self.dim.to_string()),
            ("ff_mult", self.ff_mult.to_string()),
            ("heads", self.heads.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("charset", self.charset.clone()),
            ("max_len", self.max_len.to_string()),
            ("pe", self.pe.as_str().to_string()),
            ("pe_hidden", self.pe_hidden.to_string()),
            ("ff", self.ff.as_str().to_string()),
            ("down_h", self.down_h.to_string()),
            ("down_w", self.down_w.to_string()),
            ("cin", self.cin.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("dropout", format!("{:e}", self.dropout)),
            ("seed", self.seed.to_string()),
        ] {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    /// Apply one key=value override.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value {value:?} for key {what}"));
        match key {
            "dim" => self.dim = value.parse().map_err(|_| bad(key))?,
            "ff_mult" => self.ff_mult = value.parse().map_err(|_| bad(key))?,
            "heads" => self.heads = value.parse().map_err(|_| bad(key))?,
            "enc_layers" => self.enc_layers = value.parse().map_err(|_| bad(key))?,
            "dec_layers" => self.dec_layers = value.parse().map_err(|_| bad(key))?,
            "charset" => self.charset = value.to_string(),
            "max_len" => self.max_len = value.parse().map_err(|_| bad(key))?,
            "pe" => self.pe = PeVariant::parse(value)?,
            "pe_hidden" => self.pe_hidden = value.parse().map_err(|_| bad(key))?,
            "ff" => self.ff = FfVariant::parse(value)?,
            "down_h" => self.down_h = value.parse().map_err(|_| bad(key))?,
            "down_w" => self.down_w = value.parse().map_err(|_| bad(key))?,
            "cin" => self.cin = value.parse().map_err(|_| bad(key))?,
            "height" => self.height = value.parse().map_err(|_| bad(key))?,
            "width" => self.width = value.parse().map_err(|_| bad(key))?,
            "dropout" => self.dropout = value.parse().map_err(|_| bad(key))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 17] = [
        "dim", "ff_mult", "heads", "enc_layers", "dec_layers", "charset", "max_len", "pe",
        "pe_hidden", "ff", "down_h", "down_w", "cin", "height", "width", "dropout", "seed",
    ];

    /// Parse a complete dump produced by [`ModelConfig::to_kv`].
    pub fn from_kv(text: &str) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::preset("tiny")?;
        for (key, value) in parse_kv_lines(text)? {
            cfg.apply_kv(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parse `key=value` lines; `#` starts a comment line, blank lines allowed.
/// Values keep everything after the first `=`, including further `=` signs.
pub fn parse_kv_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let Some(eq) = line.find('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key=value, got {line:?}",
                lineno + 1
            )));
        };
        out.push((line[..eq].trim().to_string(), line[eq + 1..].to_string()));
    }
    Ok(out)
}
