//! Network definitions: the toy encoder/quantizer/decoder stack, the
//! frozen-encoder saliency variant, the three-decoder fusion network, and
//! the patch discriminator.
//!
//! All forward passes are built on the tape; plain inference routes through
//! a tape of constants so there is exactly one implementation of each layer.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{self, VQLossWeights};
use super::tape::{Routing, Tape, Var};
use super::tensor::Tensor;
use super::{quantize, Codebook, VisualTokens};
use crate::error::{Error, Result};
use crate::grid::{NormalizationState, SaliencyDensity};

/// Desk-scale architecture parameters. Encoder: three stride-2 convolutions;
/// decoder mirrored with nearest-neighbor upsampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VQNetConfig {
    pub in_channels: usize,
    pub enc_channels: (usize, usize),
    pub n_z: usize,
    pub codebook_size: usize,
}

impl Default for VQNetConfig {
    fn default() -> Self {
        VQNetConfig {
            in_channels: 3,
            enc_channels: (16, 32),
            n_z: 16,
            codebook_size: 64,
        }
    }
}

impl VQNetConfig {
    /// Small configuration for gradient checks and fast tests.
    pub fn tiny(in_channels: usize) -> VQNetConfig {
        VQNetConfig {
            in_channels,
            enc_channels: (4, 6),
            n_z: 4,
            codebook_size: 6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.enc_channels.0 == 0 || self.enc_channels.1 == 0 || self.n_z == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.codebook_size == 0 {
            return Err(Error::invalid("codebook needs at least one entry"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Conv {
    pub w: Tensor,
    pub b: Tensor,
}

impl Conv {
    fn init(out_ch: usize, in_ch: usize, k: usize, rng: &mut ChaCha8Rng) -> Conv {
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        Conv {
            w: Tensor::randn(&[out_ch, in_ch, k, k], std, rng),
            b: Tensor::zeros(&[out_ch]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Stack {
    pub convs: Vec<Conv>,
}

impl Stack {
    fn encoder(cfg: &VQNetConfig, rng: &mut ChaCha8Rng) -> Stack {
        Stack {
            convs: vec![
                Conv::init(cfg.enc_channels.0, cfg.in_channels, 3, rng),
                Conv::init(cfg.enc_channels.1, cfg.enc_channels.0, 3, rng),
                Conv::init(cfg.n_z, cfg.enc_channels.1, 3, rng),
            ],
        }
    }

    fn decoder(cfg: &VQNetConfig, out_channels: usize, rng: &mut ChaCha8Rng) -> Stack {
        let mid = (cfg.enc_channels.0 / 2).max(2);
        Stack {
            convs: vec![
                Conv::init(cfg.enc_channels.1, cfg.n_z, 3, rng),
                Conv::init(cfg.enc_channels.0, cfg.enc_channels.1, 3, rng),
                Conv::init(mid, cfg.enc_channels.0, 3, rng),
                Conv::init(out_channels, mid, 3, rng),
            ],
        }
    }
}

/// Per-parameter map in deterministic (name-sorted) order.
pub type ParamGrads = BTreeMap<String, Tensor>;

/// Which quantity the reconstruction term targets during saliency training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecTarget {
    /// `L_rec` compares the predicted and ground-truth saliency maps.
    #[default]
    SaliencyMap,
    /// `L_rec` reconstructs the input image through a parallel image head.
    ImageAuxHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetMode {
    Reconstruction,
    Saliency,
}

/// Loss components of one reconstruction-mode batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VQLossBreakdown {
    pub total: f64,
    pub rec: f64,
    pub codebook: f64,
    pub commitment: f64,
}

/// A built reconstruction-mode batch graph.
pub struct ReconGraph {
    pub loss: Var,
    pub vars: BTreeMap<String, Var>,
    pub breakdown: VQLossBreakdown,
    /// Per-image reconstruction output variables (generator side of the
    /// adversarial objective).
    pub recon_outputs: Vec<Var>,
}

/// The vector-quantized network. In saliency mode the encoder and codebook
/// are frozen: they enter forward graphs as constants, so their reported
/// gradients are exactly zero and training never touches them.
#[derive(Debug, Clone)]
pub struct VQNet {
    pub config: VQNetConfig,
    pub mode: NetMode,
    pub rec_target: RecTarget,
    pub seed: u64,
    pub(crate) encoder: Stack,
    pub(crate) decoder: Stack,
    pub(crate) aux_decoder: Option<Stack>,
    pub(crate) codebook: Tensor,
}

impl VQNet {
    /// Fresh reconstruction-mode network, deterministically initialized.
    pub fn new(config: VQNetConfig, seed: u64) -> Result<VQNet> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Stack::encoder(&config, &mut rng);
        let decoder = Stack::decoder(&config, config.in_channels, &mut rng);
        let codebook = Tensor::randn(&[config.codebook_size, config.n_z], 0.5, &mut rng);
        Ok(VQNet {
            config,
            mode: NetMode::Reconstruction,
            rec_target: RecTarget::SaliencyMap,
            seed,
            encoder,
            decoder,
            aux_decoder: None,
            codebook,
        })
    }

    /// Transfer step: freeze the feature extraction and quantization parts
    /// and re-head the decoder for single-channel saliency prediction. The
    /// shared decoder layers carry over; the final convolution is re-seeded
    /// as the mean over the previous output channels.
    pub fn to_saliency(&self, rec_target: RecTarget) -> VQNet {
        let mut net = self.clone();
        net.mode = NetMode::Saliency;
        net.rec_target = rec_target;
        let last = net.decoder.convs.last_mut().expect("decoder layers");
        let (out_ch, in_ch, kh, kw) = (last.w.shape[0], last.w.shape[1], last.w.shape[2], last.w.shape[3]);
        if out_ch != 1 {
            let mut w = Tensor::zeros(&[1, in_ch, kh, kw]);
            for i in 0..in_ch * kh * kw {
                let mut acc = 0.0;
                for o in 0..out_ch {
                    acc += last.w.data[o * in_ch * kh * kw + i];
                }
                w.data[i] = acc / out_ch as f64;
            }
            let b = Tensor::scalar(last.b.data.iter().sum::<f64>() / out_ch as f64);
            *last = Conv { w, b };
        }
        if rec_target == RecTarget::ImageAuxHead {
            net.aux_decoder = Some(self.decoder.clone());
        } else {
            net.aux_decoder = None;
        }
        net
    }

    pub fn codebook(&self) -> Codebook {
        Codebook::from_tensor(self.codebook.clone()).expect("valid internal codebook")
    }

    fn encoder_frozen(&self) -> bool {
        self.mode == NetMode::Saliency
    }

    // ---- parameter plumbing ----

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        push_stack_params(&mut out, "enc", &self.encoder);
        push_stack_params(&mut out, "dec", &self.decoder);
        if let Some(aux) = &self.aux_decoder {
            push_stack_params(&mut out, "aux", aux);
        }
        out.push(("codebook".to_string(), &self.codebook));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        if name == "codebook" {
            return Ok(&mut self.codebook);
        }
        let (prefix, rest) = name.split_once('.').ok_or_else(|| bad_param(name))?;
        let stack = match prefix {
            "enc" => &mut self.encoder,
            "dec" => &mut self.decoder,
            "aux" => self.aux_decoder.as_mut().ok_or_else(|| bad_param(name))?,
            _ => return Err(bad_param(name)),
        };
        let (idx, field) = rest.split_once('.').ok_or_else(|| bad_param(name))?;
        let idx: usize = idx.parse().map_err(|_| bad_param(name))?;
        let conv = stack.convs.get_mut(idx).ok_or_else(|| bad_param(name))?;
        match field {
            "w" => Ok(&mut conv.w),
            "b" => Ok(&mut conv.b),
            _ => Err(bad_param(name)),
        }
    }

    /// Whether a named parameter trains in the current mode.
    pub fn is_trainable(&self, name: &str) -> bool {
        match self.mode {
            NetMode::Reconstruction => true,
            NetMode::Saliency => !(name.starts_with("enc.") || name == "codebook"),
        }
    }

    // ---- forward builders ----

    fn stack_vars(&self, tape: &mut Tape, prefix: &str, stack: &Stack, frozen: bool, vars: &mut BTreeMap<String, Var>) {
        for (i, conv) in stack.convs.iter().enumerate() {
            let (wv, bv) = if frozen {
                (tape.constant(conv.w.clone()), tape.constant(conv.b.clone()))
            } else {
                (tape.leaf(conv.w.clone()), tape.leaf(conv.b.clone()))
            };
            vars.insert(format!("{prefix}.{i}.w"), wv);
            vars.insert(format!("{prefix}.{i}.b"), bv);
        }
    }

    fn encode_tape(&self, tape: &mut Tape, vars: &BTreeMap<String, Var>, x: Var) -> Var {
        let mut h = x;
        for i in 0..self.encoder.convs.len() {
            let w = vars[&format!("enc.{i}.w")];
            let b = vars[&format!("enc.{i}.b")];
            h = tape.conv2d(h, w, b, 2, 1);
            if i + 1 < self.encoder.convs.len() {
                h = tape.softplus(h);
            }
        }
        h
    }

    fn decode_tape(&self, tape: &mut Tape, vars: &BTreeMap<String, Var>, prefix: &str, stack: &Stack, z: Var) -> Var {
        let mut h = z;
        let n = stack.convs.len();
        for i in 0..n {
            let w = vars[&format!("{prefix}.{i}.w")];
            let b = vars[&format!("{prefix}.{i}.b")];
            h = tape.conv2d(h, w, b, 1, 1);
            if i + 1 < n {
                h = tape.softplus(h);
                h = tape.upsample2(h);
            }
        }
        h
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (c, h, w) = match x.shape.as_slice() {
            [c, h, w] => (*c, *h, *w),
            other => return Err(Error::invalid(format!("expected (C,H,W) input, got {other:?}"))),
        };
        if c != self.config.in_channels {
            return Err(Error::dims(format!("{} channels", self.config.in_channels), format!("{c}")));
        }
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "input {h}x{w} must be divisible by 8 (three stride-2 stages)"
            )));
        }
        Ok(())
    }

    /// Encoder features, quantizer routing, and the straight-through decoder
    /// input for one image. Returns (z_hat, z_q, decoder_input, indices).
    fn quantize_tape(
        &self,
        tape: &mut Tape,
        routing: &mut Routing,
        vars: &BTreeMap<String, Var>,
        cb_var: Var,
        x: Var,
    ) -> (Var, Var, Var, Vec<usize>) {
        let z_hat = self.encode_tape(tape, vars, x);
        let idx = routing.assign(tape.value(z_hat), tape.value(cb_var));
        let (_, h, w) = tape.value(z_hat).dims3();
        let z_q = tape.embed(cb_var, &idx, h, w);
        let dec_in = if self.encoder_frozen() {
            z_q
        } else {
            // straight-through: value z_q, gradient to the encoder
            let residual = tape.sub(z_q, z_hat);
            let detached = routing.detach(tape, residual);
            tape.add(z_hat, detached)
        };
        (z_hat, z_q, dec_in, idx)
    }

    /// Reconstruction-mode batch loss on the tape. Also returns the
    /// per-image reconstruction variables so adversarial training can attach
    /// a generator objective to them.
    pub fn recon_loss_tape(
        &self,
        tape: &mut Tape,
        routing: &mut Routing,
        batch: &[Tensor],
        weights: &VQLossWeights,
    ) -> Result<ReconGraph> {
        if self.mode != NetMode::Reconstruction {
            return Err(Error::invalid("recon loss requires reconstruction mode"));
        }
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for x in batch {
            self.check_input(x)?;
        }
        let mut vars = BTreeMap::new();
        self.stack_vars(tape, "enc", &self.encoder, false, &mut vars);
        self.stack_vars(tape, "dec", &self.decoder, false, &mut vars);
        let cb_var = tape.leaf(self.codebook.clone());
        vars.insert("codebook".to_string(), cb_var);

        let mut total: Option<Var> = None;
        let mut rec_sum = 0.0;
        let mut cb_sum = 0.0;
        let mut commit_sum = 0.0;
        let mut recon_outputs = Vec::with_capacity(batch.len());
        for x in batch {
            let xv = tape.constant(x.clone());
            let (z_hat, z_q, dec_in, _) = self.quantize_tape(tape, routing, &vars, cb_var, xv);
            let x_hat = self.decode_tape(tape, &vars, "dec", &self.decoder, dec_in);
            recon_outputs.push(x_hat);

            let mse = tape.mse(xv, x_hat);
            let perc = losses::perceptual_tape(tape, xv, x_hat);
            let l_rec = tape.add(mse, perc);

            let z_hat_d = routing.detach(tape, z_hat);
            let cb_diff = tape.sub(z_hat_d, z_q);
            let cb_sq = tape.square(cb_diff);
            let l_cb = tape.mean(cb_sq);

            let z_q_d = routing.detach(tape, z_q);
            let cm_diff = tape.sub(z_q_d, z_hat);
            let cm_sq = tape.square(cm_diff);
            let l_commit = tape.mean(cm_sq);

            rec_sum += tape.value(l_rec).item();
            cb_sum += tape.value(l_cb).item();
            commit_sum += tape.value(l_commit).item();

            let commit_w = tape.scale(l_commit, weights.beta);
            let s = tape.add(l_rec, l_cb);
            let s = tape.add(s, commit_w);
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s),
            });
        }
        let n = batch.len() as f64;
        let total = tape.scale(total.expect("nonempty batch"), 1.0 / n);
        let breakdown = VQLossBreakdown {
            total: tape.value(total).item(),
            rec: rec_sum / n,
            codebook: cb_sum / n,
            commitment: commit_sum / n,
        };
        Ok(ReconGraph {
            loss: total,
            vars,
            breakdown,
            recon_outputs,
        })
    }

    /// Saliency-mode batch loss on the tape: pairs of (image, sum-to-one
    /// ground-truth map).
    pub fn saliency_loss_tape(
        &self,
        tape: &mut Tape,
        routing: &mut Routing,
        batch: &[(Tensor, Tensor)],
        weights: &VQLossWeights,
    ) -> Result<(Var, BTreeMap<String, Var>, f64)> {
        if self.mode != NetMode::Saliency {
            return Err(Error::invalid("saliency loss requires saliency mode"));
        }
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for (x, gt) in batch {
            self.check_input(x)?;
            let (gc, gh, gw) = gt.dims3();
            let (_, h, w) = x.dims3();
            if gc != 1 || gh != h || gw != w {
                return Err(Error::dims(format!("1x{h}x{w} ground truth"), format!("{gc}x{gh}x{gw}")));
            }
        }
        let mut vars = BTreeMap::new();
        self.stack_vars(tape, "enc", &self.encoder, true, &mut vars);
        self.stack_vars(tape, "dec", &self.decoder, false, &mut vars);
        if let Some(aux) = &self.aux_decoder {
            self.stack_vars(tape, "aux", aux, false, &mut vars);
        }
        let cb_var = tape.constant(self.codebook.clone());
        vars.insert("codebook".to_string(), cb_var);

        let mut total: Option<Var> = None;
        for (x, gt) in batch {
            let xv = tape.constant(x.clone());
            let (_, _, dec_in, _) = self.quantize_tape(tape, routing, &vars, cb_var, xv);
            let pre = self.decode_tape(tape, &vars, "dec", &self.decoder, dec_in);
            let pos = tape.softplus(pre);
            let pred = losses::sum_to_one_tape(tape, pos);

            let gt_var = tape.constant(gt.clone());
            let l_rec = match self.rec_target {
                RecTarget::SaliencyMap => {
                    let mse = tape.mse(pred, gt_var);
                    let perc = losses::perceptual_tape(tape, pred, gt_var);
                    tape.add(mse, perc)
                }
                RecTarget::ImageAuxHead => {
                    let aux = self.aux_decoder.as_ref().expect("aux head present");
                    let x_hat = self.decode_tape(tape, &vars, "aux", aux, dec_in);
                    let mse = tape.mse(xv, x_hat);
                    let perc = losses::perceptual_tape(tape, xv, x_hat);
                    tape.add(mse, perc)
                }
            };
            let cc = losses::cc_tape(tape, pred, gt_var);
            let neg_cc = tape.scale(cc, -1.0);
            let l_cc = tape.add_const(neg_cc, 1.0);
            let l_kl = losses::kl_tape(tape, pred, gt);
            let l_sal = tape.add(l_cc, l_kl);
            let l_sal = tape.scale(l_sal, weights.lambda);
            let s = tape.add(l_rec, l_sal);
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s),
            });
        }
        let total = tape.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64);
        let value = tape.value(total).item();
        Ok((total, vars, value))
    }

    /// One full backward pass: straight-through and stop-gradient semantics
    /// are embedded in the graph. Frozen parameters come back as exact-zero
    /// gradients.
    pub fn loss_backward(
        &self,
        batch_images: &[Tensor],
        batch_gt: Option<&[Tensor]>,
        weights: &VQLossWeights,
    ) -> Result<(f64, ParamGrads)> {
        let mut tape = Tape::new();
        let mut routing = Routing::record();
        let (loss, vars) = match self.mode {
            NetMode::Reconstruction => {
                let graph = self.recon_loss_tape(&mut tape, &mut routing, batch_images, weights)?;
                (graph.loss, graph.vars)
            }
            NetMode::Saliency => {
                let gt = batch_gt.ok_or_else(|| Error::invalid("saliency mode needs ground truth"))?;
                if gt.len() != batch_images.len() {
                    return Err(Error::invalid("image/ground-truth count mismatch"));
                }
                let pairs: Vec<(Tensor, Tensor)> = batch_images
                    .iter()
                    .cloned()
                    .zip(gt.iter().cloned())
                    .collect();
                let (loss, vars, _) = self.saliency_loss_tape(&mut tape, &mut routing, &pairs, weights)?;
                (loss, vars)
            }
        };
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let mut out = ParamGrads::new();
        for (name, tensor) in self.params() {
            let var = vars[&name];
            out.insert(name, grads.get_or_zeros(var, &tensor.shape));
        }
        Ok((value, out))
    }

    /// Loss value only, optionally replaying recorded routing; the
    /// finite-difference oracle uses this with perturbed parameters.
    pub fn loss_value(
        &self,
        batch_images: &[Tensor],
        batch_gt: Option<&[Tensor]>,
        weights: &VQLossWeights,
        routing: &mut Routing,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        match self.mode {
            NetMode::Reconstruction => {
                let graph = self.recon_loss_tape(&mut tape, routing, batch_images, weights)?;
                Ok(tape.value(graph.loss).item())
            }
            NetMode::Saliency => {
                let gt = batch_gt.ok_or_else(|| Error::invalid("saliency mode needs ground truth"))?;
                let pairs: Vec<(Tensor, Tensor)> = batch_images
                    .iter()
                    .cloned()
                    .zip(gt.iter().cloned())
                    .collect();
                let (loss, _, _) = self.saliency_loss_tape(&mut tape, routing, &pairs, weights)?;
                Ok(tape.value(loss).item())
            }
        }
    }

    // ---- inference ----

    /// Visual tokens of one image under the current encoder and codebook.
    pub fn tokens(&self, x: &Tensor) -> Result<VisualTokens> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let mut vars = BTreeMap::new();
        self.stack_vars(&mut tape, "enc", &self.encoder, true, &mut vars);
        let xv = tape.constant(x.clone());
        let z_hat = self.encode_tape(&mut tape, &vars, xv);
        quantize(tape.value(z_hat), &self.codebook())
    }

    /// Image reconstruction (reconstruction mode).
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        if self.mode != NetMode::Reconstruction {
            return Err(Error::invalid("reconstruct requires reconstruction mode"));
        }
        let tokens = self.tokens(x)?;
        let mut tape = Tape::new();
        let mut vars = BTreeMap::new();
        self.stack_vars(&mut tape, "dec", &self.decoder, true, &mut vars);
        let z = tape.constant(tokens.embedded().clone());
        let out = self.decode_tape(&mut tape, &vars, "dec", &self.decoder, z);
        Ok(tape.value(out).clone())
    }

    /// Saliency prediction (saliency mode): softplus then unit mass.
    pub fn predict_saliency(&self, x: &Tensor) -> Result<SaliencyDensity> {
        if self.mode != NetMode::Saliency {
            return Err(Error::invalid("predict_saliency requires saliency mode"));
        }
        let tokens = self.tokens(x)?;
        let mut tape = Tape::new();
        let mut vars = BTreeMap::new();
        self.stack_vars(&mut tape, "dec", &self.decoder, true, &mut vars);
        let z = tape.constant(tokens.embedded().clone());
        let pre = self.decode_tape(&mut tape, &vars, "dec", &self.decoder, z);
        let pos = tape.softplus(pre);
        let pred = losses::sum_to_one_tape(&mut tape, pos);
        Ok(SaliencyDensity {
            grid: tape.value(pred).to_grid()?,
            state: NormalizationState::SumToOne,
        })
    }
}

fn push_stack_params<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, stack: &'a Stack) {
    for (i, conv) in stack.convs.iter().enumerate() {
        out.push((format!("{prefix}.{i}.w"), &conv.w));
        out.push((format!("{prefix}.{i}.b"), &conv.b));
    }
}

fn bad_param(name: &str) -> Error {
    Error::invalid(format!("unknown parameter `{name}`"))
}

/// Multi-decoder fusion network: one shared frozen encoder/codebook, three
/// independent saliency decoders, and a 1x1 convolution head over the
/// concatenated decoder outputs.
#[derive(Debug, Clone)]
pub struct ARFusionNet {
    pub config: VQNetConfig,
    pub seed: u64,
    pub(crate) encoder: Stack,
    pub(crate) codebook: Tensor,
    pub(crate) decoders: [Stack; 3],
    pub(crate) fuse_w: Tensor,
    pub(crate) fuse_b: Tensor,
}

pub const AR_BRANCHES: [&str; 3] = ["dec_ar", "dec_bg", "dec_s"];

impl ARFusionNet {
    /// Builds the fusion network from a saliency-mode base: the frozen parts
    /// transfer as-is, each branch decoder starts from the base decoder, and
    /// the head starts as an averaging 1x1 convolution.
    pub fn from_vqsal(base: &VQNet) -> Result<ARFusionNet> {
        if base.mode != NetMode::Saliency {
            return Err(Error::invalid("ARFusionNet transfers from a saliency-mode base"));
        }
        Ok(ARFusionNet {
            config: base.config,
            seed: base.seed,
            encoder: base.encoder.clone(),
            codebook: base.codebook.clone(),
            decoders: [base.decoder.clone(), base.decoder.clone(), base.decoder.clone()],
            fuse_w: Tensor::from_vec(&[1, 3, 1, 1], vec![1.0 / 3.0; 3]).expect("head shape"),
            fuse_b: Tensor::zeros(&[1]),
        })
    }

    /// Every tensor in the network, frozen parts included (the checkpoint
    /// surface); training filters through [`ARFusionNet::is_trainable`].
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        push_stack_params(&mut out, "enc", &self.encoder);
        for (stack, prefix) in self.decoders.iter().zip(AR_BRANCHES) {
            push_stack_params(&mut out, prefix, stack);
        }
        out.push(("codebook".to_string(), &self.codebook));
        out.push(("fuse.w".to_string(), &self.fuse_w));
        out.push(("fuse.b".to_string(), &self.fuse_b));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// The shared encoder and codebook never train; the three decoders share
    /// no parameters and train together with the head.
    pub fn is_trainable(&self, name: &str) -> bool {
        !(name.starts_with("enc.") || name == "codebook")
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match name {
            "fuse.w" => return Ok(&mut self.fuse_w),
            "fuse.b" => return Ok(&mut self.fuse_b),
            "codebook" => return Ok(&mut self.codebook),
            _ => {}
        }
        let (prefix, rest) = name.split_once('.').ok_or_else(|| bad_param(name))?;
        let stack = if prefix == "enc" {
            &mut self.encoder
        } else {
            match AR_BRANCHES.iter().position(|p| *p == prefix) {
                Some(i) => &mut self.decoders[i],
                None => return Err(bad_param(name)),
            }
        };
        let (idx, field) = rest.split_once('.').ok_or_else(|| bad_param(name))?;
        let idx: usize = idx.parse().map_err(|_| bad_param(name))?;
        let conv = stack.convs.get_mut(idx).ok_or_else(|| bad_param(name))?;
        match field {
            "w" => Ok(&mut conv.w),
            "b" => Ok(&mut conv.b),
            _ => Err(bad_param(name)),
        }
    }

    /// Swaps two branch decoders together with the matching head channels;
    /// the fused output is invariant under this permutation.
    pub fn permute_branches(&mut self, a: usize, b: usize) {
        self.decoders.swap(a, b);
        self.fuse_w.data.swap(a, b);
    }

    /// Overwrites the head with an exact branch selector.
    pub fn select_branch_head(&mut self, branch: usize) {
        for (i, v) in self.fuse_w.data.iter_mut().enumerate() {
            *v = if i == branch { 1.0 } else { 0.0 };
        }
        self.fuse_b.data[0] = 0.0;
    }

    fn helper_net(&self) -> VQNet {
        VQNet {
            config: self.config,
            mode: NetMode::Saliency,
            rec_target: RecTarget::SaliencyMap,
            seed: self.seed,
            encoder: self.encoder.clone(),
            decoder: self.decoders[0].clone(),
            aux_decoder: None,
            codebook: self.codebook.clone(),
        }
    }

    /// Inserts every parameter into the tape exactly once; branch decoders
    /// and the head are trainable when `train` is set.
    fn make_vars(&self, tape: &mut Tape, train: bool) -> BTreeMap<String, Var> {
        let helper = self.helper_net();
        let mut vars = BTreeMap::new();
        helper.stack_vars(tape, "enc", &self.encoder, true, &mut vars);
        for (stack, prefix) in self.decoders.iter().zip(AR_BRANCHES) {
            helper.stack_vars(tape, prefix, stack, !train, &mut vars);
        }
        let cb_var = tape.constant(self.codebook.clone());
        vars.insert("codebook".to_string(), cb_var);
        let (fw, fb) = if train {
            (tape.leaf(self.fuse_w.clone()), tape.leaf(self.fuse_b.clone()))
        } else {
            (tape.constant(self.fuse_w.clone()), tape.constant(self.fuse_b.clone()))
        };
        vars.insert("fuse.w".to_string(), fw);
        vars.insert("fuse.b".to_string(), fb);
        vars
    }

    /// Fused forward against already-inserted parameter variables; inputs
    /// must share dimensions (the AR image is padded upstream). Returns the
    /// sum-to-one prediction variable.
    fn forward_with_vars(
        &self,
        tape: &mut Tape,
        routing: &mut Routing,
        vars: &BTreeMap<String, Var>,
        inputs: &[Tensor; 3],
    ) -> Result<Var> {
        let helper = self.helper_net();
        helper.check_input(&inputs[0])?;
        if !(inputs[0].same_shape(&inputs[1]) && inputs[0].same_shape(&inputs[2])) {
            return Err(Error::invalid("the three branch inputs must share dimensions"));
        }
        let cb_var = vars["codebook"];
        let mut branch_maps = Vec::with_capacity(3);
        for (i, x) in inputs.iter().enumerate() {
            let xv = tape.constant(x.clone());
            let (_, _, dec_in, _) = helper.quantize_tape(tape, routing, vars, cb_var, xv);
            let pre = helper.decode_tape(tape, vars, AR_BRANCHES[i], &self.decoders[i], dec_in);
            branch_maps.push(pre);
        }
        let stacked = tape.concat_channels(&branch_maps);
        let fused = tape.conv2d(stacked, vars["fuse.w"], vars["fuse.b"], 1, 0);
        let pos = tape.softplus(fused);
        Ok(losses::sum_to_one_tape(tape, pos))
    }

    /// Fused prediction for (AR, BG, superimposed) images.
    pub fn forward(&self, x_ar: &Tensor, x_bg: &Tensor, x_s: &Tensor) -> Result<SaliencyDensity> {
        let mut tape = Tape::new();
        let mut routing = Routing::record();
        let vars = self.make_vars(&mut tape, false);
        let inputs = [x_ar.clone(), x_bg.clone(), x_s.clone()];
        let pred = self.forward_with_vars(&mut tape, &mut routing, &vars, &inputs)?;
        Ok(SaliencyDensity {
            grid: tape.value(pred).to_grid()?,
            state: NormalizationState::SumToOne,
        })
    }

    /// Batch training loss on the tape (the saliency objective applied to
    /// the fused prediction).
    pub fn loss_tape(
        &self,
        tape: &mut Tape,
        routing: &mut Routing,
        batch: &[([Tensor; 3], Tensor)],
        weights: &VQLossWeights,
    ) -> Result<(Var, BTreeMap<String, Var>)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let vars = self.make_vars(tape, true);
        let mut total: Option<Var> = None;
        for (inputs, gt) in batch {
            let pred = self.forward_with_vars(tape, routing, &vars, inputs)?;
            let gt_var = tape.constant(gt.clone());
            let mse = tape.mse(pred, gt_var);
            let perc = losses::perceptual_tape(tape, pred, gt_var);
            let l_rec = tape.add(mse, perc);
            let cc = losses::cc_tape(tape, pred, gt_var);
            let neg_cc = tape.scale(cc, -1.0);
            let l_cc = tape.add_const(neg_cc, 1.0);
            let l_kl = losses::kl_tape(tape, pred, gt);
            let l_sal = tape.add(l_cc, l_kl);
            let l_sal = tape.scale(l_sal, weights.lambda);
            let s = tape.add(l_rec, l_sal);
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s),
            });
        }
        let loss = tape.scale(total.expect("nonempty"), 1.0 / batch.len() as f64);
        Ok((loss, vars))
    }

    /// One full backward pass over a batch; only branch decoders and the
    /// fusion head receive gradients.
    pub fn loss_backward(
        &self,
        batch: &[([Tensor; 3], Tensor)],
        weights: &VQLossWeights,
    ) -> Result<(f64, ParamGrads)> {
        let mut tape = Tape::new();
        let mut routing = Routing::record();
        let (loss, vars) = self.loss_tape(&mut tape, &mut routing, batch, weights)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let mut out = ParamGrads::new();
        for (name, tensor) in self.params() {
            out.insert(name.clone(), grads.get_or_zeros(vars[&name], &tensor.shape));
        }
        Ok((value, out))
    }
}

/// Three-layer convolutional patch discriminator (strides 2, 2, 1) with a
/// sigmoid patch map output. Used only when adversarial training is enabled.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    pub(crate) convs: Vec<Conv>,
}

impl PatchDiscriminator {
    pub fn new(in_channels: usize, seed: u64) -> PatchDiscriminator {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PatchDiscriminator {
            convs: vec![
                Conv::init(8, in_channels, 3, &mut rng),
                Conv::init(16, 8, 3, &mut rng),
                Conv::init(1, 16, 3, &mut rng),
            ],
        }
    }

    /// A discriminator that outputs exactly 0.5 everywhere (zero weights).
    pub fn constant_half(in_channels: usize) -> PatchDiscriminator {
        let mut d = PatchDiscriminator::new(in_channels, 0);
        for conv in &mut d.convs {
            conv.w = Tensor::zeros(&conv.w.shape);
            conv.b = Tensor::zeros(&conv.b.shape);
        }
        d
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            out.push((format!("disc.{i}.w"), &conv.w));
            out.push((format!("disc.{i}.b"), &conv.b));
        }
        out
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let rest = name.strip_prefix("disc.").ok_or_else(|| bad_param(name))?;
        let (idx, field) = rest.split_once('.').ok_or_else(|| bad_param(name))?;
        let idx: usize = idx.parse().map_err(|_| bad_param(name))?;
        let conv = self.convs.get_mut(idx).ok_or_else(|| bad_param(name))?;
        match field {
            "w" => Ok(&mut conv.w),
            "b" => Ok(&mut conv.b),
            _ => Err(bad_param(name)),
        }
    }

    /// Sigmoid patch map on the tape.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var, train: bool) -> (Var, BTreeMap<String, Var>) {
        let mut vars = BTreeMap::new();
        for (i, conv) in self.convs.iter().enumerate() {
            let (wv, bv) = if train {
                (tape.leaf(conv.w.clone()), tape.leaf(conv.b.clone()))
            } else {
                (tape.constant(conv.w.clone()), tape.constant(conv.b.clone()))
            };
            vars.insert(format!("disc.{i}.w"), wv);
            vars.insert(format!("disc.{i}.b"), bv);
        }
        let mut h = x;
        for i in 0..self.convs.len() {
            let stride = if i + 1 < self.convs.len() { 2 } else { 1 };
            h = tape.conv2d(h, vars[&format!("disc.{i}.w")], vars[&format!("disc.{i}.b")], stride, 1);
            if i + 1 < self.convs.len() {
                h = tape.softplus(h);
            }
        }
        (tape.sigmoid(h), vars)
    }

    /// Patch map values for a plain input.
    pub fn score(&self, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (out, _) = self.forward_tape(&mut tape, xv, false);
        tape.value(out).clone()
    }
}
