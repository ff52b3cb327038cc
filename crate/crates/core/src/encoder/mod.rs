//! Two-branch encoder: convolutional backbone, global average pooling, and
//! a row-pooled local sequence summarised by an LSTM (or a baseline
//! sequence model), fused into one embedding plus classifier logits.

mod config;
mod model;
pub mod ops;

pub use config::{EncoderConfig, LocalBranch};
pub use model::{
    BoundEncoder, BoundLayer, BoundLocal, EncoderModel, Layer, LocalParams, LstmParams,
};

use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};

/// Result of encoding one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub embedding: Tensor,
    pub logits: Tensor,
    /// Final LSTM (or RNN/conv/fc) state; `None` without a local branch.
    pub self_feature: Option<Tensor>,
    pub global_feature: Tensor,
}

/// Images encoded per tape when embedding large sets.
const EMBED_CHUNK: usize = 64;

impl EncoderModel {
    /// Stacks images into a `[B, C, H, W]` batch after checking each shape.
    pub fn batch_images(&self, images: &[Tensor]) -> Result<Tensor> {
        let expected = self.config.input_shape;
        for img in images {
            if img.shape() != expected {
                return Err(Error::Dimension {
                    op: "encoder input",
                    lhs: expected.to_vec(),
                    rhs: img.shape().to_vec(),
                });
            }
        }
        Tensor::stack(images)
    }

    /// Backbone feature map `[C, H, W]` of one image.
    pub fn feature_map(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let enc = self.bind(&mut tape, false);
        let x = tape.constant(self.batch_images(std::slice::from_ref(image))?);
        let f = ops::backbone_forward(&mut tape, &enc, x)?;
        let (c, h, w) = self.config.backbone_output();
        tape.take_value(f).reshape(vec![c, h, w])
    }

    pub fn forward(&self, image: &Tensor) -> Result<EncoderOutput> {
        let mut out = self.forward_batch(std::slice::from_ref(image))?;
        Ok(out.remove(0))
    }

    pub fn forward_batch(&self, images: &[Tensor]) -> Result<Vec<EncoderOutput>> {
        let mut tape = Tape::new();
        let enc = self.bind(&mut tape, false);
        let x = tape.constant(self.batch_images(images)?);
        let vars = ops::encoder_forward(&mut tape, &enc, x, self.config.normalize_embeddings)?;
        let rows = |t: &Tensor, i: usize| Tensor::from_vec(t.row(i).to_vec());
        let (emb, logits, global) = (
            tape.value(vars.embedding),
            tape.value(vars.logits),
            tape.value(vars.global_feature),
        );
        let local = vars.self_feature.map(|v| tape.value(v));
        Ok((0..images.len())
            .map(|i| EncoderOutput {
                embedding: rows(emb, i),
                logits: rows(logits, i),
                self_feature: local.map(|l| rows(l, i)),
                global_feature: rows(global, i),
            })
            .collect())
    }

    /// Embeddings `[n, embed_dim]` of `images`, computed in fixed-size chunks.
    pub fn embed(&self, images: &[Tensor]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::contract("embed needs at least one image"));
        }
        let mut data = Vec::with_capacity(images.len() * self.config.embed_dim);
        for chunk in images.chunks(EMBED_CHUNK) {
            let mut tape = Tape::new();
            let enc = self.bind(&mut tape, false);
            let x = tape.constant(self.batch_images(chunk)?);
            let vars = ops::encoder_forward(&mut tape, &enc, x, self.config.normalize_embeddings)?;
            data.extend_from_slice(tape.value(vars.embedding).data());
        }
        Tensor::new(vec![images.len(), self.config.embed_dim], data)
    }
}
