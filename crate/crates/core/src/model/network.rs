use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attend_conv, attend_pool, attention_head, grid_pool, AttentionField, AttentionKind,
    ContextGrid, HeadVars,
};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, ModuleKind};
use crate::model::params::{conv_name, layout, materialize};
use crate::nn::norm::update_running;
use crate::nn::{
    batch_norm, bilinear_upsample, concat_channels, conv2d, global_pool, max_pool2d, renet,
    BatchStats, BnMode, CellVars, ConvSpec, PoolKind, RunningStats,
};
use crate::tensor::{Scalar, Shape, Tensor};

/// Graph handle of every parameter, by name.
pub type ParamVars = BTreeMap<String, Var>;

#[derive(Clone, Copy, Debug)]
pub struct ModuleAttention {
    /// Decoding module index, 1..=6.
    pub module: usize,
    pub field: AttentionField,
}

/// Graph nodes produced by one forward pass. Arrays are indexed by module
/// (index 0 is module 1, the full-resolution one).
#[derive(Debug)]
pub struct ForwardOutput<T> {
    pub encoder: [Var; 6],
    pub decoder: [Var; 6],
    pub side: [Var; 6],
    pub attention: Vec<ModuleAttention>,
    /// Batch statistics per normalization layer (train mode only).
    pub bn_stats: Vec<(String, BatchStats<T>)>,
}

impl<T> ForwardOutput<T> {
    /// The global attention field of module 6, if it has one.
    pub fn top_global_attention(&self) -> Option<&AttentionField> {
        self.attention
            .iter()
            .find(|a| {
                a.module == 6
                    && a.field.kind == AttentionKind::Softmax
                    && a.field.grid.mode == crate::attention::GridMode::Global
            })
            .map(|a| &a.field)
    }
}

/// Attention weights of one module after an inference pass.
#[derive(Clone, Debug)]
pub struct AttentionValues<T> {
    pub module: usize,
    pub grid: ContextGrid,
    pub kind: AttentionKind,
    pub weights: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub side: Vec<Tensor<T>>,
    pub attention: Vec<AttentionValues<T>>,
}

/// Encoder-decoder saliency network with its parameters and BN buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyModel<T> {
    cfg: ModelConfig,
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> SaliencyModel<T> {
    /// Randomly initialized model; the same seed and config give the same
    /// weights.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ps, bs) = layout(&cfg);
        let params = ps
            .iter()
            .map(|s| (s.name.clone(), materialize(s, &mut rng)))
            .collect();
        let buffers = bs
            .iter()
            .map(|s| (s.name.clone(), materialize(s, &mut rng)))
            .collect();
        Ok(SaliencyModel {
            cfg,
            params,
            buffers,
        })
    }

    /// Every parameter zero; running statistics at their initial values.
    pub fn zeroed(cfg: ModelConfig) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        for t in m.params.values_mut() {
            *t = Tensor::zeros(t.shape());
        }
        Ok(m)
    }

    /// Reassembles a model, checking names and shapes against the layout.
    pub fn from_parts(
        cfg: ModelConfig,
        params: BTreeMap<String, Tensor<T>>,
        buffers: BTreeMap<String, Tensor<T>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let (ps, bs) = layout(&cfg);
        for (specs, have, what) in [(&ps, &params, "parameter"), (&bs, &buffers, "buffer")] {
            if specs.len() != have.len() {
                return Err(Error::Config(format!(
                    "expected {} {what}s, found {}",
                    specs.len(),
                    have.len()
                )));
            }
            for s in specs {
                match have.get(&s.name) {
                    Some(t) if t.shape() == s.shape => {}
                    Some(t) => {
                        return Err(Error::Config(format!(
                            "{what} {} has shape {}, expected {}",
                            s.name,
                            t.shape(),
                            s.shape
                        )))
                    }
                    None => return Err(Error::Config(format!("missing {what} {}", s.name))),
                }
            }
        }
        Ok(SaliencyModel {
            cfg,
            params,
            buffers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> SaliencyModel<U> {
        SaliencyModel {
            cfg: self.cfg.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Registers every parameter as a trainable graph leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> ParamVars {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), g.param(v.clone())))
            .collect()
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn apply_bn_stats(
        &mut self,
        stats: &[(String, BatchStats<T>)],
        momentum: f64,
    ) -> Result<()> {
        for (prefix, s) in stats {
            let (mk, vk) = (format!("{prefix}.mean"), format!("{prefix}.var"));
            let mut mean = self
                .buffers
                .remove(&mk)
                .ok_or_else(|| Error::Config(format!("no buffer {mk}")))?;
            let var = self
                .buffers
                .get_mut(&vk)
                .ok_or_else(|| Error::Config(format!("no buffer {vk}")))?;
            update_running(mean.data_mut(), var.data_mut(), s, momentum);
            self.buffers.insert(mk, mean);
        }
        Ok(())
    }

    /// Builds the forward graph for a batch of `(n, S, S, 3)` images.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        vars: &ParamVars,
        images: Var,
        mode: BnMode,
    ) -> Result<ForwardOutput<T>> {
        let s = g.shape(images);
        let size = self.cfg.input_size;
        if (s.h, s.w, s.c) != (size, size, 3) {
            return Err(Error::shape(
                "forward",
                format!("images {s}, model expects (n, {size}, {size}, 3)"),
            ));
        }
        let mut ctx = Ctx {
            model: self,
            g,
            vars,
            mode,
            stats: Vec::new(),
        };
        let encoder = ctx.encode(images)?;
        let mut decoder = Vec::with_capacity(6);
        let mut side = Vec::with_capacity(6);
        let mut attention = Vec::new();
        let mut prev = None;
        for i in (1..=6).rev() {
            let step = ctx.decode_step(i, encoder[i - 1], prev)?;
            prev = Some(step.dec);
            decoder.push(step.dec);
            side.push(step.side);
            if let Some(field) = step.attention {
                attention.push(ModuleAttention { module: i, field });
            }
        }
        decoder.reverse();
        side.reverse();
        Ok(ForwardOutput {
            encoder: encoder.try_into().expect("six"),
            decoder: decoder.try_into().expect("six"),
            side: side.try_into().expect("six"),
            attention,
            bn_stats: ctx.stats,
        })
    }

    /// Eval-mode pass returning side outputs (module 1 first) and every
    /// attention field.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Prediction<T>> {
        let mut g = Graph::new();
        let vars: ParamVars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), g.constant(v.clone())))
            .collect();
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, &vars, x, BnMode::Eval)?;
        Ok(Prediction {
            side: out.side.iter().map(|v| g.value(*v).clone()).collect(),
            attention: out
                .attention
                .iter()
                .map(|a| AttentionValues {
                    module: a.module,
                    grid: a.field.grid,
                    kind: a.field.kind,
                    weights: g.value(a.field.weights).clone(),
                })
                .collect(),
        })
    }
}

struct DecoderStep {
    dec: Var,
    side: Var,
    attention: Option<AttentionField>,
}

struct Ctx<'a, T: Scalar> {
    model: &'a SaliencyModel<T>,
    g: &'a mut Graph<T>,
    vars: &'a ParamVars,
    mode: BnMode,
    stats: Vec<(String, BatchStats<T>)>,
}

impl<T: Scalar> Ctx<'_, T> {
    fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("no parameter {name}")))
    }

    fn conv(&mut self, prefix: &str, x: Var, spec: ConvSpec) -> Result<Var> {
        let (w, b) = conv_name(prefix);
        let (w, b) = (self.var(&w)?, self.var(&b)?);
        conv2d(self.g, x, w, b, spec)
    }

    fn bn(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.var(&format!("{prefix}.gamma"))?;
        let beta = self.var(&format!("{prefix}.beta"))?;
        let buffers = &self.model.buffers;
        let lookup = |k: String| {
            buffers
                .get(&k)
                .ok_or_else(|| Error::Config(format!("no buffer {k}")))
        };
        let running = RunningStats {
            mean: lookup(format!("{prefix}.mean"))?.data(),
            var: lookup(format!("{prefix}.var"))?.data(),
        };
        let (y, stats) = batch_norm(self.g, x, gamma, beta, running, self.mode)?;
        if let Some(s) = stats {
            self.stats.push((prefix.to_string(), s));
        }
        Ok(y)
    }

    fn cells(&self, prefix: &str) -> Result<[CellVars; 4]> {
        let cell = |k: usize| -> Result<CellVars> {
            Ok(CellVars {
                w_ih: self.var(&format!("{prefix}.{k}.w_ih"))?,
                w_hh: self.var(&format!("{prefix}.{k}.w_hh"))?,
                bias: self.var(&format!("{prefix}.{k}.bias"))?,
            })
        };
        Ok([cell(0)?, cell(1)?, cell(2)?, cell(3)?])
    }

    /// Encoder features, each taken before its ReLU.
    fn encode(&mut self, images: Var) -> Result<Vec<Var>> {
        let model = self.model;
        let cfg = &model.cfg;
        let (convs, bn_on, fc_dilation) = (cfg.convs, cfg.encoder_bn, cfg.fc_dilation);
        let mut x = images;
        let mut feats = Vec::with_capacity(6);
        for (b, n) in convs.into_iter().enumerate() {
            let dilation = if b == 4 { 2 } else { 1 };
            for j in 1..=n {
                let p = format!("enc.b{}.c{j}", b + 1);
                let mut y = self.conv(&p, x, ConvSpec::same(3, dilation))?;
                if bn_on {
                    y = self.bn(&format!("{p}.bn"), y)?;
                }
                if j == n {
                    feats.push(y);
                }
                x = self.g.relu(y);
            }
            x = if b < 3 {
                max_pool2d(self.g, x, 2, 2, 0)?
            } else {
                max_pool2d(self.g, x, 3, 1, 1)?
            };
        }
        let mut y = self.conv("enc.fc6", x, ConvSpec::same(3, fc_dilation))?;
        if bn_on {
            y = self.bn("enc.fc6.bn", y)?;
        }
        let x = self.g.relu(y);
        let mut y = self.conv("enc.fc7", x, ConvSpec::default())?;
        if bn_on {
            y = self.bn("enc.fc7.bn", y)?;
        }
        feats.push(y);
        Ok(feats)
    }

    fn decode_step(&mut self, i: usize, en: Var, prev: Option<Var>) -> Result<DecoderStep> {
        let model = self.model;
        let cfg = &model.cfg;
        let kind = cfg.modules[i - 1];
        let local = cfg.local_context()?;
        let p = format!("dec{i}");
        let es = self.g.shape(en);
        let e = self.bn(&format!("{p}.en_bn"), en)?;
        let e = self.g.relu(e);
        let cat = match prev {
            Some(d) => {
                let up = bilinear_upsample(self.g, d, es.h, es.w)?;
                concat_channels(self.g, &[e, up])?
            }
            None => e,
        };
        let fused = self.conv(&format!("{p}.fuse"), cat, ConvSpec::default())?;
        let f = self.g.relu(fused);
        let out = format!("{p}.out");
        let mut attention = None;
        let pre = match kind {
            ModuleKind::None => self.conv(&out, f, ConvSpec::default())?,
            ModuleKind::Gap | ModuleKind::Lap => {
                let (head, grid) = if kind == ModuleKind::Gap {
                    let (w, b) = conv_name(&format!("{p}.head.logits"));
                    let head = HeadVars::Global {
                        renet: self.cells(&format!("{p}.head.renet"))?,
                        w: self.var(&w)?,
                        b: self.var(&b)?,
                    };
                    (head, cfg.global_context(i)?)
                } else {
                    (self.local_head(&p)?, local)
                };
                let att = attention_head(self.g, f, &head, grid, AttentionKind::Softmax)?;
                attention = Some(att);
                let pooled = attend_pool(self.g, f, &att)?;
                let both = concat_channels(self.g, &[f, pooled])?;
                self.conv(&out, both, ConvSpec::default())?
            }
            ModuleKind::Ac => {
                let head = self.local_head(&p)?;
                let gates = attention_head(self.g, f, &head, local, AttentionKind::Sigmoid)?;
                attention = Some(gates);
                let (w, b) = conv_name(&out);
                let (w, b) = (self.var(&w)?, self.var(&b)?);
                attend_conv(self.g, f, &gates, w, b)?
            }
            ModuleKind::Lc => self.conv(&out, f, ConvSpec::same(local.grid_h, local.dilation))?,
            ModuleKind::Renet => {
                let cells = self.cells(&format!("{p}.ctx.renet"))?;
                let r = renet(self.g, f, &cells)?;
                let both = concat_channels(self.g, &[f, r])?;
                self.conv(&out, both, ConvSpec::default())?
            }
            ModuleKind::AvgPool | ModuleKind::MaxPool => {
                let pk = if kind == ModuleKind::AvgPool {
                    PoolKind::Avg
                } else {
                    PoolKind::Max
                };
                let ctx = if i == 6 {
                    let gp = global_pool(self.g, f, pk)?;
                    bilinear_upsample(self.g, gp, es.h, es.w)?
                } else {
                    grid_pool(self.g, f, local, pk)?
                };
                let both = concat_channels(self.g, &[f, ctx])?;
                self.conv(&out, both, ConvSpec::default())?
            }
        };
        let d = self.bn(&format!("{out}.bn"), pre)?;
        let dec = self.g.relu(d);
        let logit = self.conv(&format!("{p}.side"), dec, ConvSpec::default())?;
        let side = self.g.sigmoid(logit);
        Ok(DecoderStep {
            dec,
            side,
            attention,
        })
    }

    fn local_head(&self, p: &str) -> Result<HeadVars> {
        let (wc, bc) = conv_name(&format!("{p}.head.ctx"));
        let (w, b) = conv_name(&format!("{p}.head.logits"));
        Ok(HeadVars::Local {
            w_ctx: self.var(&wc)?,
            b_ctx: self.var(&bc)?,
            w: self.var(&w)?,
            b: self.var(&b)?,
        })
    }
}

/// Shape of an image batch for `cfg`.
pub fn image_shape(cfg: &ModelConfig, n: usize) -> Shape {
    Shape::new(n, cfg.input_size, cfg.input_size, 3)
}
