//! SGD-momentum training with per-group learning rates and a multistep
//! schedule.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{group_of, Group, ModelConfig, SaliencyModel};
use crate::nn::BnMode;
use crate::pipeline::checkpoint::{self, CheckpointMeta, RngState};
use crate::pipeline::data::{augment, prepare, Sample};
use crate::pipeline::objective::objective;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: String,
    pub input_size: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub encoder_lr_mult: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    /// Fractions of `steps` at which the learning rate decays.
    pub milestones: Vec<f64>,
    pub decay: f64,
    pub loss: LossWeights,
    pub seed: u64,
    pub precision: Precision,
    /// Running-statistics momentum of batch normalization.
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            preset: "+6GAP_5432AC".into(),
            input_size: 64,
            batch_size: 4,
            lr: 0.01,
            encoder_lr_mult: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            steps: 2000,
            milestones: vec![0.5, 0.75],
            decay: 0.1,
            loss: LossWeights::default(),
            seed: 0,
            precision: Precision::F32,
            bn_momentum: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return err("batch_size must be >= 1".into());
        }
        for (k, v) in [
            ("lr", self.lr),
            ("encoder_lr_mult", self.encoder_lr_mult),
            ("weight_decay", self.weight_decay),
            ("decay", self.decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{k} must be finite and >= 0, got {v}"));
            }
        }
        for (k, v) in [
            ("momentum", self.momentum),
            ("bn_momentum", self.bn_momentum),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return err(format!("{k} must lie in [0, 1], got {v}"));
            }
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m))
            || self.milestones.windows(2).any(|w| w[0] > w[1])
        {
            return err(format!(
                "milestones must be ascending fractions in [0, 1], got {:?}",
                self.milestones
            ));
        }
        self.loss.validate()
    }

    /// Steps after which the learning rate drops.
    pub fn milestone_steps(&self) -> Vec<usize> {
        self.milestones
            .iter()
            .map(|m| (m * self.steps as f64).round() as usize)
            .collect()
    }

    /// Base learning rate in effect at 0-based step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let drops = self
            .milestone_steps()
            .iter()
            .filter(|&&m| step >= m)
            .count();
        self.lr * self.decay.powi(drops as i32)
    }

    /// `model` with this run's preset and input size applied.
    pub fn model_config(&self, model: &ModelConfig) -> Result<ModelConfig> {
        let mut cfg = model.clone().with_preset(&self.preset)?;
        cfg.input_size = self.input_size;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub saliency: [f64; 6],
    pub global_attention: f64,
}

pub const LOG_HEADER: &str = "step,lr,L_total,L_S1,L_S2,L_S3,L_S4,L_S5,L_S6,L_GA";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let s: Vec<String> = self.saliency.iter().map(|v| v.to_string()).collect();
        format!(
            "{},{},{},{},{}",
            self.step,
            self.lr,
            self.total,
            s.join(","),
            self.global_attention
        )
    }
}

pub struct TrainOutcome<T> {
    pub model: SaliencyModel<T>,
    pub log: Vec<LogRow>,
}

/// Where checkpoints and the CSV log go; nothing is written when absent.
pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn milestone_checkpoint(step: usize) -> String {
    format!("step_{step:06}.ckpt")
}

struct Sgd<T> {
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    /// `v ← μ·v + lr·(∇ + λ·w)`, `w ← w − v`. Decay applies to weight
    /// tensors only, not to biases or normalization parameters.
    fn step(
        &mut self,
        model: &mut SaliencyModel<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        cfg: &TrainConfig,
        lr: f64,
    ) {
        for (name, w) in model.params_mut().iter_mut() {
            let Some(grad) = grads.get(name) else {
                continue;
            };
            let group_lr = match group_of(name) {
                Group::Encoder => lr * cfg.encoder_lr_mult,
                Group::Decoder => lr,
            };
            let decays = name.ends_with(".w") || name.ends_with(".w_ih") || name.ends_with(".w_hh");
            let wd = T::of(if decays { cfg.weight_decay } else { 0.0 });
            let (mu, lr) = (T::of(cfg.momentum), T::of(group_lr));
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); w.len()]);
            for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                *vi = mu * *vi + lr * (gi + wd * *wi);
                *wi -= *vi;
            }
        }
    }
}

/// Trains from a seeded initialization. With `out_dir`, writes the CSV
/// log as it goes plus checkpoints at each milestone and at the end.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &[Sample<T>],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let mcfg = cfg.model_config(model_cfg)?;
    let mut model = SaliencyModel::<T>::new(mcfg, cfg.seed)?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let scaled = prepare(data, cfg.input_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut writer = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((w, path))
        }
        None => None,
    };
    let meta = |step: usize, rng: &ChaCha8Rng| CheckpointMeta {
        step,
        train: Some(cfg.clone()),
        rng: Some(RngState {
            seed: cfg.seed,
            word_pos: rng.get_word_pos(),
        }),
    };

    let milestones = cfg.milestone_steps();
    let mut sgd = Sgd {
        velocity: BTreeMap::new(),
    };
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut imgs = Vec::with_capacity(cfg.batch_size);
        let mut masks = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..scaled.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().expect("refilled");
            let (i, m) = augment(&mut rng, &scaled[idx], cfg.input_size)?;
            imgs.push(i);
            masks.push(m);
        }
        let images = Tensor::stack(&imgs)?;
        let masks = Tensor::stack(&masks)?;

        let lr = cfg.lr_at(step);
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let obj = objective(
            &model,
            &mut g,
            &vars,
            &images,
            &masks,
            &cfg.loss,
            BnMode::Train,
        )?;
        let (total, saliency, global_attention) = obj.values(&g);
        let row = LogRow {
            step: step + 1,
            lr,
            total,
            saliency,
            global_attention,
        };
        if let Some((w, path)) = writer.as_mut() {
            writeln!(w, "{}", row.to_csv()).map_err(|e| Error::io(&*path, e))?;
        }
        log.push(row);
        if !total.is_finite() {
            if let Some((w, path)) = writer.as_mut() {
                w.flush().map_err(|e| Error::io(&*path, e))?;
            }
            return Err(Error::NanLoss { step: step + 1 });
        }
        let grads = g.backward(obj.total)?;
        let named: BTreeMap<String, Tensor<T>> = vars
            .iter()
            .map(|(k, &v)| (k.clone(), grads.get(v)))
            .collect();
        drop(grads);
        model.apply_bn_stats(&obj.forward.bn_stats, cfg.bn_momentum)?;
        sgd.step(&mut model, &named, cfg, lr);

        let done = step + 1;
        if let Some(dir) = out_dir {
            if done < cfg.steps && milestones.contains(&done) {
                checkpoint::save(
                    &dir.join(milestone_checkpoint(done)),
                    &model,
                    &meta(done, &rng),
                )?;
            }
        }
        if done % 100 == 0 {
            log::info!("step {done}/{} lr {lr:e} loss {total:.5}", cfg.steps);
        }
    }
    if let Some((mut w, path)) = writer {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(dir) = out_dir {
        checkpoint::save(&dir.join(FINAL_CHECKPOINT), &model, &meta(cfg.steps, &rng))?;
    }
    Ok(TrainOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multistep_schedule() {
        let cfg = TrainConfig {
            steps: 100,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.milestone_steps(), vec![50, 75]);
        assert_eq!(cfg.lr_at(0), 0.01);
        assert_eq!(cfg.lr_at(49), 0.01);
        assert!((cfg.lr_at(50) - 0.001).abs() < 1e-15);
        assert!((cfg.lr_at(74) - 0.001).abs() < 1e-15);
        assert!((cfg.lr_at(75) - 0.0001).abs() < 1e-15);
        assert!((cfg.lr_at(99) - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs() {
        assert!(TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            milestones: vec![0.8, 0.2],
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            momentum: 1.5,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn log_row_format() {
        let r = LogRow {
            step: 3,
            lr: 0.01,
            total: 1.5,
            saliency: [0.5; 6],
            global_attention: 0.25,
        };
        assert_eq!(r.to_csv(), "3,0.01,1.5,0.5,0.5,0.5,0.5,0.5,0.5,0.25");
        assert_eq!(LOG_HEADER.split(',').count(), r.to_csv().split(',').count());
    }
}
