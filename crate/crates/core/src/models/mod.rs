//! Dual encoders, projector, temperature and the conditioned decoder.

mod decoder;
mod encoder;
mod layers;
mod pretrain;

use alloc::format;
use alloc::vec::Vec;

pub use decoder::Decoder;
pub use encoder::{EncoderShape, SequenceEncoder};
pub use layers::{Attention, DecoderBlock, EncoderBlock, FeedForward, Linear, Norm};
pub use pretrain::{
    grammar_branching, pretrain_decoder, PretrainConfig, PretrainReport, PRETRAIN_MIN_CORPUS,
};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::world::{rng::seeded, TokenId, PAD, TEXT_VOCAB, VISUAL_OFFSET, VISUAL_VOCAB};

/// Initial log-scale, `ln(1 / 0.07)`.
pub const INIT_LOG_SCALE: f64 = 2.659_260_036_932_778_5;
/// Upper clamp of the log-scale, `ln 100`.
pub const MAX_LOG_SCALE: f64 = 4.605_170_185_988_092;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub text_vocab: usize,
    pub image_vocab: usize,
    pub max_len: usize,
    pub image_len: usize,
    pub text_width: usize,
    pub text_hidden: usize,
    pub text_blocks: usize,
    pub image_width: usize,
    pub image_hidden: usize,
    pub image_blocks: usize,
    pub embed: usize,
    pub dec_width: usize,
    pub dec_hidden: usize,
    pub dec_blocks: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            text_vocab: TEXT_VOCAB,
            image_vocab: VISUAL_VOCAB,
            max_len: 16,
            image_len: 6,
            text_width: 32,
            text_hidden: 64,
            text_blocks: 2,
            image_width: 32,
            image_hidden: 64,
            image_blocks: 1,
            embed: 32,
            dec_width: 48,
            dec_hidden: 96,
            dec_blocks: 2,
        }
    }
}

impl ModelDims {
    /// The fields in a fixed order, for serialization.
    pub fn to_array(&self) -> [usize; 14] {
        [
            self.text_vocab,
            self.image_vocab,
            self.max_len,
            self.image_len,
            self.text_width,
            self.text_hidden,
            self.text_blocks,
            self.image_width,
            self.image_hidden,
            self.image_blocks,
            self.embed,
            self.dec_width,
            self.dec_hidden,
            self.dec_blocks,
        ]
    }

    pub fn from_array(a: [usize; 14]) -> Self {
        Self {
            text_vocab: a[0],
            image_vocab: a[1],
            max_len: a[2],
            image_len: a[3],
            text_width: a[4],
            text_hidden: a[5],
            text_blocks: a[6],
            image_width: a[7],
            image_hidden: a[8],
            image_blocks: a[9],
            embed: a[10],
            dec_width: a[11],
            dec_hidden: a[12],
            dec_blocks: a[13],
        }
    }

    fn text_shape(&self) -> EncoderShape {
        EncoderShape {
            vocab: self.text_vocab,
            offset: 0,
            max_len: self.max_len,
            width: self.text_width,
            hidden: self.text_hidden,
            blocks: self.text_blocks,
            out: self.embed,
            pad: Some(PAD),
        }
    }

    fn image_shape(&self) -> EncoderShape {
        EncoderShape {
            vocab: self.image_vocab,
            offset: VISUAL_OFFSET,
            max_len: self.image_len,
            width: self.image_width,
            hidden: self.image_hidden,
            blocks: self.image_blocks,
            out: self.embed,
            pad: None,
        }
    }

    pub(crate) fn new_decoder(&self, store: &mut ParamStore, rng: &mut impl rand::Rng) -> Decoder {
        Decoder::new(
            store,
            "decoder",
            self.text_vocab,
            self.max_len,
            self.dec_width,
            self.dec_hidden,
            self.dec_blocks,
            rng,
        )
    }
}

/// `h = W^T v` applied to each row of `v` (`[n, d]` with `W` of `[d, d_dec]`).
pub fn project(g: &mut Graph, w: Var, v: Var) -> Result<Var> {
    g.matmul(v, w)
}

/// All parameters of the model, including the decoder.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub dims: ModelDims,
    pub store: ParamStore,
    pub text: SequenceEncoder,
    pub image: SequenceEncoder,
    pub projector: ParamId,
    pub decoder: Decoder,
    /// Log-scale `s` with `tau = exp(-s)`.
    pub log_scale: ParamId,
    /// Separate log-scale for the text-text alignment term, when not shared.
    pub align_log_scale: Option<ParamId>,
}

impl ModelBundle {
    /// Fresh parameters; the decoder is randomly initialized and trainable
    /// until [`ModelBundle::load_decoder`] or [`ModelBundle::freeze_decoder`].
    pub fn new(dims: ModelDims, seed: u64, shared_tau: bool) -> Self {
        let mut rng = seeded(seed, 0x30de1);
        let mut store = ParamStore::new();
        let text = SequenceEncoder::new(&mut store, "text", dims.text_shape(), &mut rng);
        let image = SequenceEncoder::new(&mut store, "image", dims.image_shape(), &mut rng);
        let projector = store.insert(
            "projector",
            layers::normal(&[dims.embed, dims.dec_width], 1.0 / libm::sqrt(dims.embed as f64), &mut rng),
        );
        let log_scale = store.insert("log_scale", Tensor::scalar(INIT_LOG_SCALE));
        let align_log_scale =
            (!shared_tau).then(|| store.insert("align_log_scale", Tensor::scalar(INIT_LOG_SCALE)));
        let decoder = dims.new_decoder(&mut store, &mut rng);
        Self {
            dims,
            store,
            text,
            image,
            projector,
            decoder,
            log_scale,
            align_log_scale,
        }
    }

    /// Copies decoder weights (names `decoder.*`) from `source` and freezes them.
    pub fn load_decoder(&mut self, source: &ParamStore) -> Result<()> {
        for id in self.decoder.ids() {
            let name = self.store.get(id).name.clone();
            let src = source
                .find(&name)
                .ok_or_else(|| Error::Invalid(format!("decoder checkpoint lacks {name}")))?;
            self.store.set_value(id, source.value(src).clone())?;
        }
        self.freeze_decoder();
        Ok(())
    }

    pub fn freeze_decoder(&mut self) {
        for id in self.decoder.ids() {
            self.store.set_requires_grad(id, false);
        }
    }

    pub fn decoder_frozen(&self) -> bool {
        self.decoder.ids().iter().all(|id| !self.store.get(*id).requires_grad)
    }

    pub fn decoder_digest(&self) -> [u8; 32] {
        self.store.digest_of(self.decoder.ids())
    }

    /// Ids of every parameter that currently requires grad.
    pub fn trainable(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| p.requires_grad)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn is_temperature(&self, id: ParamId) -> bool {
        id == self.log_scale || Some(id) == self.align_log_scale
    }

    pub fn tau(&self) -> f64 {
        libm::exp(-self.store.value(self.log_scale).item())
    }

    pub fn align_tau(&self) -> f64 {
        let id = self.align_log_scale.unwrap_or(self.log_scale);
        libm::exp(-self.store.value(id).item())
    }

    /// Keeps `exp(s)` within `[1, 100]`.
    pub fn clamp_temperature(&mut self) {
        for id in core::iter::once(self.log_scale).chain(self.align_log_scale) {
            let v = self.store.get_mut(id).value.data_mut();
            v[0] = v[0].clamp(0.0, MAX_LOG_SCALE);
        }
    }

    /// `1 / tau` as a graph node.
    pub fn inverse_tau(&self, g: &mut Graph) -> Result<Var> {
        let s = g.param(&self.store, self.log_scale);
        g.exp(s)
    }

    /// `1 / tau` of the alignment term (the shared one unless separated).
    pub fn align_inverse_tau(&self, g: &mut Graph) -> Result<Var> {
        let s = g.param(&self.store, self.align_log_scale.unwrap_or(self.log_scale));
        g.exp(s)
    }

    pub fn encode_texts<S: AsRef<[TokenId]>>(&self, g: &mut Graph, seqs: &[S]) -> Result<Var> {
        self.text.forward(g, &self.store, seqs)
    }

    pub fn encode_images<S: AsRef<[TokenId]>>(&self, g: &mut Graph, images: &[S]) -> Result<Var> {
        self.image.forward(g, &self.store, images)
    }

    pub fn project(&self, g: &mut Graph, v: Var) -> Result<Var> {
        let w = g.param(&self.store, self.projector);
        project(g, w, v)
    }

    /// Per-target `log p(y | h)`; `h` is `[n, d_dec]`.
    pub fn log_likelihood<S: AsRef<[TokenId]>>(&self, g: &mut Graph, h: Var, targets: &[S]) -> Result<Var> {
        self.decoder.log_likelihood(g, &self.store, h, targets)
    }

    /// Text embeddings as plain rows.
    pub fn embed_texts<S: AsRef<[TokenId]>>(&self, seqs: &[S]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let v = self.encode_texts(&mut g, seqs)?;
        Ok(rows(g.value(v)))
    }

    pub fn embed_images<S: AsRef<[TokenId]>>(&self, images: &[S]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let u = self.encode_images(&mut g, images)?;
        Ok(rows(g.value(u)))
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = *t.shape().last().unwrap_or(&1);
    t.data().chunks(d).map(|r| r.to_vec()).collect()
}
