//! Named parameter layout derived from a [`ModelConfig`].

use rand::Rng;

use crate::model::config::{ModelConfig, ModuleKind};
use crate::nn::init;
use crate::nn::renet::forget_bias;
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-uniform with the given fan-in.
    FanIn(usize),
    /// Uniform in `±1/√fan_in`.
    Recurrent(usize),
    /// Orthonormal rows.
    Orthogonal,
    ForgetBias,
    Zero,
    One,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

/// Parameter group, for per-group learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Encoder,
    Decoder,
}

pub fn group_of(name: &str) -> Group {
    if name.starts_with("enc.") {
        Group::Encoder
    } else {
        Group::Decoder
    }
}

pub(crate) fn conv_name(prefix: &str) -> (String, String) {
    (format!("{prefix}.w"), format!("{prefix}.b"))
}

#[derive(Default)]
struct Layout {
    params: Vec<ParamSpec>,
    buffers: Vec<ParamSpec>,
}

impl Layout {
    fn push(&mut self, name: String, shape: Shape, init: Init) {
        self.params.push(ParamSpec { name, shape, init });
    }

    fn conv(&mut self, prefix: &str, k: usize, cin: usize, cout: usize) {
        let (w, b) = conv_name(prefix);
        self.push(w, Shape::new(k, k, cin, cout), Init::FanIn(k * k * cin));
        self.push(b, Shape::vector(cout), Init::Zero);
    }

    fn bn(&mut self, prefix: &str, c: usize) {
        self.push(format!("{prefix}.gamma"), Shape::vector(c), Init::One);
        self.push(format!("{prefix}.beta"), Shape::vector(c), Init::Zero);
        self.buffers.push(ParamSpec {
            name: format!("{prefix}.mean"),
            shape: Shape::vector(c),
            init: Init::Zero,
        });
        self.buffers.push(ParamSpec {
            name: format!("{prefix}.var"),
            shape: Shape::vector(c),
            init: Init::One,
        });
    }

    fn renet(&mut self, prefix: &str, input: usize, hidden: usize) {
        for (k, cin) in [input, input, 2 * hidden, 2 * hidden]
            .into_iter()
            .enumerate()
        {
            self.push(
                format!("{prefix}.{k}.w_ih"),
                Shape::new(1, 1, cin, 4 * hidden),
                Init::Recurrent(cin),
            );
            self.push(
                format!("{prefix}.{k}.w_hh"),
                Shape::new(1, 1, hidden, 4 * hidden),
                Init::Orthogonal,
            );
            self.push(
                format!("{prefix}.{k}.bias"),
                Shape::vector(4 * hidden),
                Init::ForgetBias,
            );
        }
    }
}

/// Parameters and BN running-statistic buffers, in forward order.
pub fn layout(cfg: &ModelConfig) -> (Vec<ParamSpec>, Vec<ParamSpec>) {
    let mut l = Layout::default();
    let mut cin = 3;
    for (b, (&c, &n)) in cfg.channels.iter().zip(&cfg.convs).enumerate() {
        for j in 0..n {
            let p = format!("enc.b{}.c{}", b + 1, j + 1);
            l.conv(&p, 3, cin, c);
            if cfg.encoder_bn {
                l.bn(&format!("{p}.bn"), c);
            }
            cin = c;
        }
    }
    l.conv("enc.fc6", 3, cin, cfg.fc_channels);
    if cfg.encoder_bn {
        l.bn("enc.fc6.bn", cfg.fc_channels);
    }
    l.conv("enc.fc7", 1, cfg.fc_channels, cfg.fc_channels);
    if cfg.encoder_bn {
        l.bn("enc.fc7.bn", cfg.fc_channels);
    }

    let k = cfg.local_grid;
    let d_local = k * k;
    for i in (1..=6).rev() {
        let p = format!("dec{i}");
        let c = cfg.encoder_channels(i);
        let cout = cfg.decoder_channels(i);
        l.bn(&format!("{p}.en_bn"), c);
        let prev = if i == 6 {
            0
        } else {
            cfg.decoder_channels(i + 1)
        };
        l.conv(&format!("{p}.fuse"), 1, c + prev, c);
        let kind = cfg.modules[i - 1];
        match kind {
            ModuleKind::Gap => {
                let d = cfg.global_context(i).map(|g| g.len()).unwrap_or(1);
                l.renet(&format!("{p}.head.renet"), c, cfg.renet_hidden);
                l.conv(&format!("{p}.head.logits"), 1, 2 * cfg.renet_hidden, d);
            }
            ModuleKind::Lap | ModuleKind::Ac => {
                l.conv(&format!("{p}.head.ctx"), k, c, cfg.head_channels);
                l.conv(&format!("{p}.head.logits"), 1, cfg.head_channels, d_local);
            }
            ModuleKind::Renet => l.renet(&format!("{p}.ctx.renet"), c, cfg.renet_hidden),
            _ => {}
        }
        match kind {
            ModuleKind::Ac | ModuleKind::Lc => l.conv(&format!("{p}.out"), k, c, cout),
            ModuleKind::None => l.conv(&format!("{p}.out"), 1, c, cout),
            ModuleKind::Renet => l.conv(&format!("{p}.out"), 1, c + 2 * cfg.renet_hidden, cout),
            ModuleKind::Gap | ModuleKind::Lap | ModuleKind::AvgPool | ModuleKind::MaxPool => {
                l.conv(&format!("{p}.out"), 1, 2 * c, cout)
            }
        }
        l.bn(&format!("{p}.out.bn"), cout);
        l.conv(&format!("{p}.side"), 1, cout, 1);
    }
    (l.params, l.buffers)
}

pub fn materialize<T: Scalar>(spec: &ParamSpec, rng: &mut impl Rng) -> Tensor<T> {
    match spec.init {
        Init::FanIn(f) => init::fan_in_uniform(rng, spec.shape, f),
        Init::Recurrent(f) => init::uniform(rng, spec.shape, 1.0 / (f.max(1) as f64).sqrt()),
        Init::Orthogonal => init::orthogonal_rows(rng, spec.shape.w, spec.shape.c),
        Init::ForgetBias => forget_bias(spec.shape.c / 4),
        Init::Zero => Tensor::zeros(spec.shape),
        Init::One => Tensor::ones(spec.shape),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(cfg: &ModelConfig) -> usize {
        layout(cfg).0.iter().map(|p| p.shape.len()).sum()
    }

    #[test]
    fn names_are_unique() {
        for preset in crate::model::config::PRESETS {
            let cfg = ModelConfig::default().with_preset(preset).unwrap();
            let (p, b) = layout(&cfg);
            let mut names: Vec<&str> = p.iter().chain(&b).map(|s| s.name.as_str()).collect();
            let n = names.len();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), n, "{preset}");
        }
    }

    #[test]
    fn attention_adds_parameters() {
        let base = ModelConfig::default();
        let unet = base.clone().with_preset("U-Net").unwrap();
        let full = base.with_preset("+6GAP_5432AC").unwrap();
        assert!(count(&full) > count(&unet));
    }

    #[test]
    fn groups() {
        assert_eq!(group_of("enc.b1.c1.w"), Group::Encoder);
        assert_eq!(group_of("dec6.head.logits.w"), Group::Decoder);
    }
}
