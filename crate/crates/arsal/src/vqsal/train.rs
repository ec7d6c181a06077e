//! Deterministic training loops: full-batch SGD with momentum, optional
//! adversarial term in reconstruction mode, loss curves for trend checks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::losses::{self, VQLossWeights};
use super::net::{ARFusionNet, NetMode, ParamGrads, PatchDiscriminator, VQNet};
use super::tape::{Routing, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Adds the adversarial pair in reconstruction mode.
    pub adversarial: bool,
    pub gan_weight: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            steps: 200,
            lr: 0.05,
            momentum: 0.9,
            adversarial: false,
            gan_weight: 0.05,
        }
    }
}

/// Per-step total losses of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Least-squares slope of loss over step index.
    pub fn trend_slope(&self) -> f64 {
        let n = self.losses.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let mean_x = (n - 1.0) / 2.0;
        let mean_y = self.losses.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &y) in self.losses.iter().enumerate() {
            let dx = i as f64 - mean_x;
            num += dx * (y - mean_y);
            den += dx * dx;
        }
        num / den
    }

    /// 1 - final/initial loss.
    pub fn reduction(&self) -> f64 {
        match (self.losses.first(), self.losses.last()) {
            (Some(&a), Some(&b)) if a != 0.0 => 1.0 - b / a,
            _ => 0.0,
        }
    }
}

/// Name-indexed mutable parameter access shared by the trainable nets.
trait ParamStore {
    fn store_param_mut(&mut self, name: &str) -> Result<&mut Tensor>;
    fn store_is_trainable(&self, name: &str) -> bool;
}

impl ParamStore for VQNet {
    fn store_param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.param_mut(name)
    }
    fn store_is_trainable(&self, name: &str) -> bool {
        self.is_trainable(name)
    }
}

impl ParamStore for ARFusionNet {
    fn store_param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.param_mut(name)
    }
    fn store_is_trainable(&self, name: &str) -> bool {
        self.is_trainable(name)
    }
}

impl ParamStore for PatchDiscriminator {
    fn store_param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.param_mut(name)
    }
    fn store_is_trainable(&self, _name: &str) -> bool {
        true
    }
}

/// SGD with momentum over named parameters. `lr = 0` leaves every parameter
/// bit-identical.
struct Momentum {
    lr: f64,
    momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Momentum {
    fn new(schedule: &TrainSchedule) -> Momentum {
        Momentum {
            lr: schedule.lr,
            momentum: schedule.momentum,
            velocity: BTreeMap::new(),
        }
    }

    fn step<P: ParamStore>(&mut self, net: &mut P, grads: &ParamGrads) -> Result<()> {
        for (name, g) in grads {
            if !net.store_is_trainable(name) {
                continue;
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&g.shape));
            for (vi, gi) in v.data.iter_mut().zip(&g.data) {
                *vi = self.momentum * *vi + gi;
            }
            if self.lr != 0.0 {
                let p = net.store_param_mut(name)?;
                for (pi, vi) in p.data.iter_mut().zip(&v.data) {
                    *pi -= self.lr * *vi;
                }
            }
        }
        Ok(())
    }
}

/// Trains the reconstruction objective on a toy image set. Deterministic
/// given the network seed; full-batch steps.
pub fn train_reconstruction(
    net: &mut VQNet,
    images: &[Tensor],
    weights: &VQLossWeights,
    schedule: &TrainSchedule,
) -> Result<TrainReport> {
    if net.mode != NetMode::Reconstruction {
        return Err(Error::invalid("train_reconstruction requires reconstruction mode"));
    }
    if images.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    weights.validate()?;
    let mut opt = Momentum::new(schedule);
    let mut disc = schedule
        .adversarial
        .then(|| PatchDiscriminator::new(net.config.in_channels, net.seed ^ 0x5eed));
    let mut d_opt = Momentum::new(schedule);
    let mut losses_curve = Vec::with_capacity(schedule.steps);

    for _ in 0..schedule.steps {
        if let Some(d) = disc.as_mut() {
            train_discriminator_step(net, d, images, &mut d_opt)?;
        }
        let (loss_value, grads) = generator_step(net, disc.as_ref(), images, weights, schedule)?;
        losses_curve.push(loss_value);
        opt.step(
            &grads,
            |n| net.is_trainable(n),
            |n| net.param_mut(n).map(|t| t as *mut Tensor),
        )?;
    }
    Ok(TrainReport { losses: losses_curve })
}

/// One generator update: the VQ objective, plus the non-saturating
/// adversarial term when a discriminator is present.
fn generator_step(
    net: &VQNet,
    disc: Option<&PatchDiscriminator>,
    images: &[Tensor],
    weights: &VQLossWeights,
    schedule: &TrainSchedule,
) -> Result<(f64, ParamGrads)> {
    let mut tape = Tape::new();
    let mut routing = Routing::record();
    let graph = net.recon_loss_tape(&mut tape, &mut routing, images, weights)?;
    let loss = match disc {
        None => graph.loss,
        Some(d) => {
            let mut g_total = None;
            for &x_hat in &graph.recon_outputs {
                let (d_fake, _) = d.forward_tape(&mut tape, x_hat, false);
                let g = losses::gan_loss_g_tape(&mut tape, d_fake);
                g_total = Some(match g_total {
                    None => g,
                    Some(t) => tape.add(t, g),
                });
            }
            let g_mean = tape.scale(g_total.expect("nonempty"), 1.0 / graph.recon_outputs.len() as f64);
            let g_w = tape.scale(g_mean, schedule.gan_weight);
            tape.add(graph.loss, g_w)
        }
    };
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let mut out = ParamGrads::new();
    for (name, tensor) in net.params() {
        out.insert(name.clone(), grads.get_or_zeros(graph.vars[&name], &tensor.shape));
    }
    Ok((value, out))
}

fn train_discriminator_step(
    net: &VQNet,
    disc: &mut PatchDiscriminator,
    images: &[Tensor],
    opt: &mut Momentum,
) -> Result<()> {
    // reconstructions are inputs to the discriminator update, not
    // differentiated through
    let fakes: Vec<Tensor> = images
        .iter()
        .map(|x| net.reconstruct(x))
        .collect::<Result<_>>()?;
    let mut tape = Tape::new();
    let mut total = None;
    let mut vars = None;
    for (real, fake) in images.iter().zip(&fakes) {
        let rv = tape.constant(real.clone());
        let fv = tape.constant(fake.clone());
        let (d_real, v) = disc.forward_tape(&mut tape, rv, true);
        if vars.is_none() {
            vars = Some(v);
        }
        // reuse the leafs inserted on the first pass for subsequent images
        let (d_fake, _) = {
            let v = vars.as_ref().expect("vars");
            let mut h = fv;
            for i in 0..disc.convs.len() {
                let stride = if i + 1 < disc.convs.len() { 2 } else { 1 };
                h = tape.conv2d(h, v[&format!("disc.{i}.w")], v[&format!("disc.{i}.b")], stride, 1);
                if i + 1 < disc.convs.len() {
                    h = tape.softplus(h);
                }
            }
            (tape.sigmoid(h), ())
        };
        let l = losses::gan_loss_d_tape(&mut tape, d_real, d_fake);
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l),
        });
    }
    let loss = tape.scale(total.expect("nonempty"), 1.0 / images.len() as f64);
    let grads = tape.backward(loss)?;
    let vars = vars.expect("vars recorded");
    let mut out = ParamGrads::new();
    for (name, tensor) in disc.params() {
        out.insert(name.clone(), grads.get_or_zeros(vars[&name], &tensor.shape));
    }
    opt.step(
        &out,
        |_| true,
        |n| disc.param_mut(n).map(|t| t as *mut Tensor),
    )
}

/// Finetunes the decoder for saliency prediction against ground-truth maps
/// (the encoder and codebook stay frozen; their gradients are exactly zero).
pub fn train_saliency(
    net: &mut VQNet,
    images: &[Tensor],
    gt_maps: &[Tensor],
    weights: &VQLossWeights,
    schedule: &TrainSchedule,
) -> Result<TrainReport> {
    if net.mode != NetMode::Saliency {
        return Err(Error::invalid("train_saliency requires saliency mode"));
    }
    if images.len() != gt_maps.len() || images.is_empty() {
        return Err(Error::invalid("need equally many images and ground-truth maps"));
    }
    weights.validate()?;
    let mut opt = Momentum::new(schedule);
    let mut losses_curve = Vec::with_capacity(schedule.steps);
    for _ in 0..schedule.steps {
        let (loss_value, grads) = net.loss_backward(images, Some(gt_maps), weights)?;
        losses_curve.push(loss_value);
        opt.step(
            &grads,
            |n| net.is_trainable(n),
            |n| net.param_mut(n).map(|t| t as *mut Tensor),
        )?;
    }
    Ok(TrainReport { losses: losses_curve })
}

/// Trains the three branch decoders and the fusion head on
/// (AR, BG, superimposed) -> ground-truth map triples.
pub fn train_ar(
    net: &mut ARFusionNet,
    batch: &[([Tensor; 3], Tensor)],
    weights: &VQLossWeights,
    schedule: &TrainSchedule,
) -> Result<TrainReport> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    weights.validate()?;
    let mut opt = Momentum::new(schedule);
    let mut losses_curve = Vec::with_capacity(schedule.steps);
    for _ in 0..schedule.steps {
        let (loss_value, grads) = net.loss_backward(batch, weights)?;
        losses_curve.push(loss_value);
        opt.step(
            &grads,
            |n| net.is_trainable(n),
            |n| net.param_mut(n).map(|t| t as *mut Tensor),
        )?;
    }
    Ok(TrainReport { losses: losses_curve })
}
