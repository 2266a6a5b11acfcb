use serde::{Deserialize, Serialize};

use crate::attention::ContextGrid;
use crate::error::{Error, Result};

/// What a decoding module uses to bring in context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    /// Plain fusion, no context operator.
    None,
    /// Global attention pooling.
    Gap,
    /// Local attention pooling.
    Lap,
    /// Attention convolution.
    Ac,
    /// Large-kernel convolution with the local grid's geometry.
    Lc,
    /// Bidirectional row/column LSTM scans.
    Renet,
    /// Unweighted average pooling (global in the top module, local elsewhere).
    AvgPool,
    /// Unweighted max pooling (global in the top module, local elsewhere).
    MaxPool,
}

impl ModuleKind {
    pub fn has_attention(self) -> bool {
        matches!(self, ModuleKind::Gap | ModuleKind::Lap | ModuleKind::Ac)
    }

    pub fn is_global(self) -> bool {
        matches!(self, ModuleKind::Gap | ModuleKind::Renet)
    }
}

/// Every ablation configuration that can be built by name.
pub const PRESETS: &[&str] = &[
    "U-Net",
    "+6GAP",
    "+6GAP_5AC",
    "+6GAP_54AC",
    "+6GAP_543AC",
    "+6GAP_5432AC",
    "+65432AC",
    "+65GAP_432AC",
    "+654GAP_32AC",
    "+6GAP_5432LAP",
    "+6GAP_5432AC_w/o_L_GA",
    "+6ReNet_5432LC",
    "+6G_5432L_AveP",
    "+6G_5432L_MaxP",
];

/// Module kinds (index 0 is the full-resolution module) and whether the
/// global attention loss is used, for a preset name like `+6GAP_5432AC`.
pub fn parse_preset(name: &str) -> Result<([ModuleKind; 6], bool)> {
    let bad = || Error::Config(format!("unknown model preset {name:?}"));
    let mut modules = [ModuleKind::None; 6];
    if name == "U-Net" {
        return Ok((modules, true));
    }
    let (body, attention_loss) = match name.strip_suffix("_w/o_L_GA") {
        Some(b) => (b, false),
        None if name == "w/o L_GA" => ("+6GAP_5432AC", false),
        None => (name, true),
    };
    let body = body.strip_prefix('+').ok_or_else(bad)?;
    let mut segments: Vec<&str> = body.split('_').collect();
    let pool = match segments.last() {
        Some(&"AveP") => Some(ModuleKind::AvgPool),
        Some(&"MaxP") => Some(ModuleKind::MaxPool),
        _ => None,
    };
    if pool.is_some() {
        segments.pop();
    }
    for seg in segments {
        let split = seg.find(|c: char| !c.is_ascii_digit()).ok_or_else(bad)?;
        let (digits, kind) = seg.split_at(split);
        let kind = match (kind, pool) {
            ("GAP", None) => ModuleKind::Gap,
            ("LAP", None) => ModuleKind::Lap,
            ("AC", None) => ModuleKind::Ac,
            ("LC", None) => ModuleKind::Lc,
            ("ReNet", None) => ModuleKind::Renet,
            ("G" | "L", Some(p)) => p,
            _ => return Err(bad()),
        };
        if digits.is_empty() {
            return Err(bad());
        }
        for d in digits.chars() {
            let i = d.to_digit(10).unwrap() as usize;
            if !(2..=6).contains(&i) || modules[i - 1] != ModuleKind::None {
                return Err(bad());
            }
            if kind == ModuleKind::Renet && i != 6 {
                return Err(bad());
            }
            modules[i - 1] = kind;
        }
    }
    Ok((modules, attention_loss))
}

/// Declarative network description. `modules[0]` is the full-resolution
/// decoding module, `modules[5]` the one fed by the top encoder feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    /// Output channels of the five conv blocks.
    pub channels: [usize; 5],
    /// Convolutions per block.
    pub convs: [usize; 5],
    /// Channels of the two fully-convolutional top layers.
    pub fc_channels: usize,
    /// Dilation of the 3×3 first top layer.
    pub fc_dilation: usize,
    pub encoder_bn: bool,
    /// Channels of the local attention head's spatial conv.
    pub head_channels: usize,
    pub renet_hidden: usize,
    pub local_grid: usize,
    pub local_dilation: usize,
    pub modules: [ModuleKind; 6],
    /// Side outputs that receive a loss.
    pub deep_supervision: [bool; 6],
    pub attention_loss: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            channels: [8, 16, 32, 32, 32],
            convs: [1, 1, 2, 2, 2],
            fc_channels: 64,
            fc_dilation: 3,
            encoder_bn: true,
            head_channels: 16,
            renet_hidden: 16,
            local_grid: 7,
            local_dilation: 2,
            modules: parse_preset("+6GAP_5432AC").expect("builtin").0,
            deep_supervision: [true; 6],
            attention_loss: true,
        }
    }
}

impl ModelConfig {
    /// `self` with the module layout of a named preset.
    pub fn with_preset(mut self, name: &str) -> Result<Self> {
        let (modules, attention_loss) = parse_preset(name)?;
        self.modules = modules;
        self.attention_loss = attention_loss;
        Ok(self)
    }

    /// Channel count `C^i` of encoder feature `i` (1-based, 1..=6).
    pub fn encoder_channels(&self, i: usize) -> usize {
        if i == 6 {
            self.fc_channels
        } else {
            self.channels[i - 1]
        }
    }

    /// Output channels of decoding module `i`: those of the encoder
    /// feature one level down, and `C^1` for the last module.
    pub fn decoder_channels(&self, i: usize) -> usize {
        self.encoder_channels(if i == 1 { 1 } else { i - 1 })
    }

    /// Side length of encoder feature `i`.
    pub fn feature_size(&self, i: usize) -> usize {
        match i {
            1 => self.input_size,
            2 => self.input_size / 2,
            _ => self.input_size / 4 / if i == 3 { 1 } else { 2 },
        }
    }

    pub fn local_context(&self) -> Result<ContextGrid> {
        ContextGrid::local(self.local_grid, self.local_dilation)
    }

    pub fn global_context(&self, i: usize) -> Result<ContextGrid> {
        ContextGrid::auto_global(self.feature_size(i))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.input_size == 0 || self.input_size % 8 != 0 {
            return err(format!(
                "input size {} must be a positive multiple of 8",
                self.input_size
            ));
        }
        if self.channels.contains(&0) || self.convs.contains(&0) || self.fc_channels == 0 {
            return err("channel and conv counts must be >= 1".into());
        }
        if self.fc_dilation == 0 || self.head_channels == 0 || self.renet_hidden == 0 {
            return err("fc_dilation, head_channels and renet_hidden must be >= 1".into());
        }
        self.local_context()?;
        if self.modules[0] != ModuleKind::None {
            return err("the full-resolution module takes no context operator".into());
        }
        for (idx, kind) in self.modules.iter().enumerate() {
            let i = idx + 1;
            if *kind == ModuleKind::Renet && i != 6 {
                return err(format!(
                    "ReNet context is only supported in module 6, found in {i}"
                ));
            }
            if *kind == ModuleKind::Gap {
                self.global_context(i)?;
            }
        }
        Ok(())
    }
}
