use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{
    binarize_resized, global_attention_loss, ground_truth_attention, saliency_ce_loss, total_loss,
    LossWeights,
};
use crate::model::{ForwardOutput, ParamVars, SaliencyModel};
use crate::nn::BnMode;
use crate::tensor::{Scalar, Tensor};

/// The weighted training loss and its parts.
#[derive(Debug)]
pub struct Objective<T> {
    pub total: Var,
    /// Cross-entropy per side output, module 1 first.
    pub saliency: [Var; 6],
    pub global_attention: Option<Var>,
    pub forward: ForwardOutput<T>,
}

impl<T: Scalar> Objective<T> {
    /// `(total, [L_S1..L_S6], L_GA)` as plain numbers.
    pub fn values(&self, g: &Graph<T>) -> (f64, [f64; 6], f64) {
        let s = self.saliency.map(|v| g.value(v).item().as_f64());
        let ga = self
            .global_attention
            .map_or(0.0, |v| g.value(v).item().as_f64());
        (g.value(self.total).item().as_f64(), s, ga)
    }
}

/// Forward pass plus deep-supervision and global-attention losses for
/// images `(n, S, S, 3)` and masks `(n, S, S, 1)` in `[0, 1]`.
pub fn objective<T: Scalar>(
    model: &SaliencyModel<T>,
    g: &mut Graph<T>,
    vars: &ParamVars,
    images: &Tensor<T>,
    masks: &Tensor<T>,
    weights: &LossWeights,
    mode: BnMode,
) -> Result<Objective<T>> {
    let (is, ms) = (images.shape(), masks.shape());
    if (ms.n, ms.h, ms.w, ms.c) != (is.n, is.h, is.w, 1) {
        return Err(Error::shape(
            "objective",
            format!("images {is}, masks {ms}"),
        ));
    }
    let x = g.constant(images.clone());
    let forward = model.forward(g, vars, x, mode)?;
    let cfg = model.config();
    let mut saliency = Vec::with_capacity(6);
    for s in forward.side {
        saliency.push(saliency_ce_loss(g, s, masks)?);
    }
    let saliency: [Var; 6] = saliency.try_into().expect("six");
    let mut w = *weights;
    for (k, on) in w.saliency.iter_mut().zip(cfg.deep_supervision) {
        if !on {
            *k = 0.0;
        }
    }
    let global_attention = match forward.top_global_attention() {
        Some(att) if cfg.attention_loss && w.global_attention > 0.0 => {
            let ws = g.shape(att.weights);
            let mask6 = binarize_resized(masks, ws.h, ws.w)?;
            let gt = ground_truth_attention(&mask6, att.grid)?;
            Some(global_attention_loss(g, &att.clone(), &gt)?)
        }
        _ => None,
    };
    let total = total_loss(g, &saliency, global_attention, &w)?;
    Ok(Objective {
        total,
        saliency,
        global_attention,
        forward,
    })
}
