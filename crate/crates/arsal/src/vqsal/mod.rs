//! Desk-scale vector-quantized saliency core: codebook learning machinery,
//! the reconstruction/commitment/adversarial loss stack, frozen-encoder
//! transfer to saliency prediction, and the three-decoder fusion topology.
//!
//! Differentiation is a hand-rolled reverse-mode tape over a fixed operator
//! set ([`tape`]), which keeps the stop-gradient and straight-through
//! semantics explicit and finite-difference checkable.

mod ckpt;
mod losses;
mod net;
mod tape;
mod tensor;
mod train;

pub use ckpt::{load_ar_checkpoint, load_checkpoint, save_ar_checkpoint, save_checkpoint};
pub use losses::{
    cc_value, gan_loss, kl_value, perceptual_value, saliency_loss, SaliencyLossBreakdown,
    VQLossWeights, LOG_EPS,
};
pub use net::{
    ARFusionNet, NetMode, ParamGrads, PatchDiscriminator, RecTarget, VQLossBreakdown, VQNet,
    VQNetConfig, AR_BRANCHES,
};
pub use tape::{nearest_assignments, Gradients, Routing, Tape, Var};
pub use tensor::Tensor;
pub use train::{train_ar, train_reconstruction, train_saliency, TrainReport, TrainSchedule};

use crate::error::{Error, Result};

/// Learned embedding table: K entries of dimensionality `n_z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Tensor,
}

impl Codebook {
    /// Validates and wraps a (K, n_z) table. K = 1 is permitted as the
    /// degenerate constant-quantizer case.
    pub fn from_tensor(entries: Tensor) -> Result<Codebook> {
        match entries.shape.as_slice() {
            [k, d] if *k >= 1 && *d >= 1 => {}
            other => return Err(Error::invalid(format!("codebook shape {other:?} must be (K, n_z)"))),
        }
        if !entries.all_finite() {
            return Err(Error::invalid("codebook contains non-finite entries"));
        }
        Ok(Codebook { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.shape[1]
    }

    pub fn entry(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.entries.data[k * d..(k + 1) * d]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.entries
    }
}

/// A quantized spatial index grid plus the embedded codebook rows.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTokens {
    indices: Vec<usize>,
    h: usize,
    w: usize,
    embedded: Tensor,
}

impl VisualTokens {
    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn index_at(&self, i: usize, j: usize) -> usize {
        self.indices[i * self.w + j]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Embedded rows as an (n_z, h, w) tensor.
    pub fn embedded(&self) -> &Tensor {
        &self.embedded
    }

    /// The embedded vector at one site.
    pub fn embedded_at(&self, i: usize, j: usize) -> Vec<f64> {
        let (d, h, w) = self.embedded.dims3();
        let _ = h;
        (0..d).map(|di| self.embedded.data[di * self.h * w + i * w + j]).collect()
    }
}

/// Maps each spatial code of a (n_z, h, w) feature map to its nearest
/// codebook entry (ties break toward the lowest index); the embedded output
/// contains exact copies of the codebook rows.
pub fn quantize(z_hat: &Tensor, cb: &Codebook) -> Result<VisualTokens> {
    let (d, h, w) = match z_hat.shape.as_slice() {
        [d, h, w] => (*d, *h, *w),
        other => return Err(Error::invalid(format!("expected (n_z, h, w) features, got {other:?}"))),
    };
    if d != cb.dim() {
        return Err(Error::dims(format!("n_z = {}", cb.dim()), format!("n_z = {d}")));
    }
    let indices = nearest_assignments(z_hat, cb.tensor());
    let mut embedded = Tensor::zeros(&[d, h, w]);
    for (site, &k) in indices.iter().enumerate() {
        let row = cb.entry(k);
        for (di, &v) in row.iter().enumerate() {
            embedded.data[di * h * w + site] = v;
        }
    }
    Ok(VisualTokens {
        indices,
        h,
        w,
        embedded,
    })
}

/// Value-level loss components of Eq-style VQ training for given tensors:
/// reconstruction (MSE + perceptual proxy), the codebook alignment term, and
/// the commitment term. Stop-gradient semantics live in the training graph;
/// this reports the values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VQLossComponents {
    pub total: f64,
    pub rec: f64,
    pub codebook: f64,
    pub commitment: f64,
}

pub fn vq_loss(
    x: &Tensor,
    x_hat: &Tensor,
    z_enc: &Tensor,
    tokens: &VisualTokens,
    w: &VQLossWeights,
) -> Result<VQLossComponents> {
    if !x.same_shape(x_hat) {
        return Err(Error::dims(format!("{:?}", x.shape), format!("{:?}", x_hat.shape)));
    }
    if !z_enc.same_shape(tokens.embedded()) {
        return Err(Error::dims(
            format!("{:?}", tokens.embedded().shape),
            format!("{:?}", z_enc.shape),
        ));
    }
    let rec = losses::mse_value(x, x_hat) + perceptual_value(x, x_hat);
    let quant_gap = losses::mse_value(z_enc, tokens.embedded());
    Ok(VQLossComponents {
        total: rec + quant_gap + w.beta * quant_gap,
        rec,
        codebook: quant_gap,
        commitment: quant_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cb2() -> Codebook {
        Codebook::from_tensor(Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap()).unwrap()
    }

    #[test]
    fn quantize_examples() {
        let cb = cb2();
        let z = Tensor::from_vec(&[2, 1, 1], vec![0.2, 0.1]).unwrap();
        let t = quantize(&z, &cb).unwrap();
        assert_eq!(t.index_at(0, 0), 0);

        // exact entry maps to itself with distance zero
        let z = Tensor::from_vec(&[2, 1, 1], vec![1.0, 1.0]).unwrap();
        let t = quantize(&z, &cb).unwrap();
        assert_eq!(t.index_at(0, 0), 1);
        assert_eq!(t.embedded_at(0, 0), vec![1.0, 1.0]);

        // equidistant point takes the lower index
        let z = Tensor::from_vec(&[2, 1, 1], vec![0.5, 0.5]).unwrap();
        assert_eq!(quantize(&z, &cb).unwrap().index_at(0, 0), 0);
    }

    #[test]
    fn embedded_rows_are_bit_copies() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        use rand::SeedableRng;
        let _ = &mut rng;
        let cb = Codebook::from_tensor(Tensor::from_vec(&[3, 2], vec![0.1, 0.7, -0.3, 0.2, 0.9, -0.5]).unwrap())
            .unwrap();
        let z = Tensor::from_vec(&[2, 2, 2], vec![0.1, -0.2, 0.8, 0.0, 0.6, 0.1, -0.4, 0.3]).unwrap();
        let t = quantize(&z, &cb).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let k = t.index_at(i, j);
                assert_eq!(t.embedded_at(i, j).as_slice(), cb.entry(k));
            }
        }
    }

    #[test]
    fn codebook_validation() {
        assert!(Codebook::from_tensor(Tensor::zeros(&[1, 4])).is_ok()); // degenerate K=1 allowed
        assert!(Codebook::from_tensor(Tensor::zeros(&[4])).is_err());
        let mut nan = Tensor::zeros(&[2, 2]);
        nan.data[0] = f64::NAN;
        assert!(Codebook::from_tensor(nan).is_err());
    }

    #[test]
    fn vq_loss_component_identities() {
        let w = VQLossWeights::default();
        let x = Tensor::from_vec(&[1, 2, 2], vec![0.1, 0.9, 0.4, 0.6]).unwrap();
        let cb = cb2();
        let z = Tensor::from_vec(&[2, 1, 1], vec![1.0, 1.0]).unwrap();
        let tokens = quantize(&z, &cb).unwrap();

        // z_enc equals the selected entry: both quantizer terms vanish
        let c = vq_loss(&x, &x, &z, &tokens, &w).unwrap();
        assert_eq!(c.codebook, 0.0);
        assert_eq!(c.commitment, 0.0);
        assert_eq!(c.rec, 0.0); // x == x_hat and perceptual(x, x) = 0
        assert_eq!(c.total, 0.0);

        // doubling beta doubles only the commitment contribution
        let z_off = Tensor::from_vec(&[2, 1, 1], vec![0.8, 0.9]).unwrap();
        let c1 = vq_loss(&x, &x, &z_off, &tokens, &w).unwrap();
        let w2 = VQLossWeights { beta: 2.0 * w.beta, ..w };
        let c2 = vq_loss(&x, &x, &z_off, &tokens, &w2).unwrap();
        assert_eq!(c1.commitment, c2.commitment);
        assert!((c2.total - c1.total - w.beta * c1.commitment).abs() < 1e-15);
    }
}
