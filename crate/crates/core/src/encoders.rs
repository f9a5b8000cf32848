//! Observation encoders producing visual latents.
//!
//! Both encoders share the same image stem: every view is cut into patches,
//! projected to width `D`, given a learned (view, token) embedding and run
//! through a stack of transformer blocks with weights shared across views.
//! The perspective encoder then pools each view with its own query; the BEV
//! encoder lets a grid of queries attend over the tokens of all views.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    batched_queries, init_queries, patchify, Attention, BlockStack, PatchEmbed, PositionalTable,
    TransformerBlock,
};
use crate::sim::render::{Observation, Raster, CHANNELS, NUM_VIEWS, RASTER_SIZE};
use crate::tensor::{ParameterStore, Tape, Tensor, Var};

/// Number of BEV latents (an 8×8 query grid).
pub const BEV_QUERIES: usize = 64;

/// Width, depth and tokenization of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub d: usize,
    pub heads: usize,
    /// Transformer blocks in the image stem and in the transformer world model.
    pub blocks: usize,
    pub patch: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d: 64,
            heads: 4,
            blocks: 2,
            patch: 8,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of {} heads",
                self.d, self.heads
            )));
        }
        if self.patch == 0 || !RASTER_SIZE.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "patch {} must divide the raster size {RASTER_SIZE}",
                self.patch
            )));
        }
        Ok(())
    }

    pub fn tokens_per_view(&self) -> usize {
        (RASTER_SIZE / self.patch).pow(2)
    }

    pub fn patch_width(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentKind {
    Perspective,
    Bev,
}

impl LatentKind {
    pub fn count(self) -> usize {
        match self {
            LatentKind::Perspective => NUM_VIEWS,
            LatentKind::Bev => BEV_QUERIES,
        }
    }
}

/// A batch of latent sets, `vectors` shaped `[B, L, D]`, with the frame
/// index each set was computed at.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualLatents {
    pub vectors: Var,
    pub kind: LatentKind,
    pub times: Vec<usize>,
}

/// Patches of every view of every observation: `[B, 4, tokens, P·P·C]`.
pub fn observation_patches(obs: &[&Observation], patch: usize) -> Result<Tensor> {
    let views: Vec<&[Raster]> = obs.iter().map(|o| o.views.as_slice()).collect();
    view_patches(&views, patch)
}

/// [`observation_patches`] from the view rasters alone.
pub fn view_patches(batch: &[&[Raster]], patch: usize) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::usage("empty observation batch"));
    }
    let mut data = Vec::new();
    let mut inner = Vec::new();
    for views in batch {
        if views.len() != NUM_VIEWS {
            return Err(Error::shape(
                "observation views",
                &[NUM_VIEWS],
                &[views.len()],
            ));
        }
        for v in views.iter() {
            let p = patchify(&v.data, v.height, v.width, v.channels, patch)?;
            if inner.is_empty() {
                inner = p.shape().to_vec();
            } else if inner != p.shape() {
                return Err(Error::shape("observation views", &inner, p.shape()));
            }
            data.extend_from_slice(p.data());
        }
    }
    let mut shape = vec![batch.len(), NUM_VIEWS];
    shape.extend(inner);
    Tensor::new(shape, data)
}

/// Patch embedding, positional table and shared blocks.
#[derive(Clone, Debug)]
pub struct ImageStem {
    pub dims: ModelDims,
    pub embed: PatchEmbed,
    pub pos: PositionalTable,
    pub blocks: BlockStack,
}

impl ImageStem {
    pub fn new(prefix: &str, dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        Ok(ImageStem {
            dims,
            embed: PatchEmbed::new(&format!("{prefix}.patch"), dims.patch, CHANNELS, dims.d),
            pos: PositionalTable::new(
                format!("{prefix}.pos"),
                NUM_VIEWS,
                dims.tokens_per_view(),
                dims.d,
            ),
            blocks: BlockStack::new(&format!("{prefix}.blocks"), dims.blocks, dims.d, dims.heads)?,
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        self.embed.init(store, rng)?;
        self.pos.init(store, rng)?;
        self.blocks.init(store, rng)
    }

    /// Per-view features `[B, 4, T, D]` before the shared blocks.
    fn tokens(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        patches: &Tensor,
    ) -> Result<(Var, usize)> {
        let t = self.dims.tokens_per_view();
        let expected = [
            patches.shape().first().copied().unwrap_or(0),
            NUM_VIEWS,
            t,
            self.dims.patch_width(),
        ];
        if patches.shape() != expected {
            return Err(Error::shape("image stem", &expected, patches.shape()));
        }
        let b = expected[0];
        let x = tape.constant(patches.clone());
        let x = self.embed.forward(tape, store, x)?;
        let pos = self.pos.all(tape, store)?;
        let pos = tape.repeat(pos, b)?;
        Ok((tape.add(x, pos)?, b))
    }

    /// Features `[B·4, T, D]`, each view processed on its own.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        patches: &Tensor,
    ) -> Result<(Var, usize)> {
        let (x, b) = self.tokens(tape, store, patches)?;
        let (t, d) = (self.dims.tokens_per_view(), self.dims.d);
        let x = tape.reshape(x, &[b * NUM_VIEWS, t, d])?;
        Ok((self.blocks.forward(tape, store, x)?, b))
    }
}

/// One latent per view via per-view query attention.
#[derive(Clone, Debug)]
pub struct PerspectiveEncoder {
    pub stem: ImageStem,
    pub queries: String,
    pub attn: Attention,
}

impl PerspectiveEncoder {
    pub fn new(dims: ModelDims) -> Result<Self> {
        Ok(PerspectiveEncoder {
            stem: ImageStem::new("encoder", dims)?,
            queries: "encoder.view_queries".into(),
            attn: Attention::new("encoder.view_attn", dims.d, dims.heads)?,
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        self.stem.init(store, rng)?;
        init_queries(store, rng, &self.queries, NUM_VIEWS, self.stem.dims.d)?;
        self.attn.init(store, rng)
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        patches: &Tensor,
        times: Vec<usize>,
    ) -> Result<VisualLatents> {
        let (f, b) = self.stem.forward(tape, store, patches)?;
        let d = self.stem.dims.d;
        let q = batched_queries(tape, store, &self.queries, b)?;
        let q = tape.reshape(q, &[b * NUM_VIEWS, 1, d])?;
        let v = self.attn.forward(tape, store, q, f, f)?;
        let vectors = tape.reshape(v, &[b, NUM_VIEWS, d])?;
        check_times(&times, b)?;
        Ok(VisualLatents {
            vectors,
            kind: LatentKind::Perspective,
            times,
        })
    }
}

/// A fixed grid of BEV latents lifted from all view tokens by
/// cross-attention, refined by one transformer block.
#[derive(Clone, Debug)]
pub struct BevEncoder {
    pub stem: ImageStem,
    pub queries: String,
    pub attn: Attention,
    pub block: TransformerBlock,
}

impl BevEncoder {
    pub fn new(dims: ModelDims) -> Result<Self> {
        Ok(BevEncoder {
            stem: ImageStem::new("encoder", dims)?,
            queries: "encoder.bev_queries".into(),
            attn: Attention::new("encoder.bev_attn", dims.d, dims.heads)?,
            block: TransformerBlock::new("encoder.bev_block", dims.d, dims.heads)?,
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        self.stem.init(store, rng)?;
        init_queries(store, rng, &self.queries, BEV_QUERIES, self.stem.dims.d)?;
        self.attn.init(store, rng)?;
        self.block.init(store, rng)
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        patches: &Tensor,
        times: Vec<usize>,
    ) -> Result<VisualLatents> {
        let (f, b) = self.stem.forward(tape, store, patches)?;
        let (t, d) = (self.stem.dims.tokens_per_view(), self.stem.dims.d);
        let kv = tape.reshape(f, &[b, NUM_VIEWS * t, d])?;
        let q = batched_queries(tape, store, &self.queries, b)?;
        let x = self.attn.forward(tape, store, q, kv, kv)?;
        let vectors = self.block.forward(tape, store, x)?;
        check_times(&times, b)?;
        Ok(VisualLatents {
            vectors,
            kind: LatentKind::Bev,
            times,
        })
    }
}

fn check_times(times: &[usize], batch: usize) -> Result<()> {
    if times.len() != batch {
        return Err(Error::shape(
            "latent frame indices",
            &[batch],
            &[times.len()],
        ));
    }
    Ok(())
}

/// Either encoder, selected by latent kind.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Encoder {
    Perspective(PerspectiveEncoder),
    Bev(BevEncoder),
}

impl Encoder {
    pub fn new(kind: LatentKind, dims: ModelDims) -> Result<Self> {
        Ok(match kind {
            LatentKind::Perspective => Encoder::Perspective(PerspectiveEncoder::new(dims)?),
            LatentKind::Bev => Encoder::Bev(BevEncoder::new(dims)?),
        })
    }

    pub fn kind(&self) -> LatentKind {
        match self {
            Encoder::Perspective(_) => LatentKind::Perspective,
            Encoder::Bev(_) => LatentKind::Bev,
        }
    }

    pub fn dims(&self) -> ModelDims {
        match self {
            Encoder::Perspective(e) => e.stem.dims,
            Encoder::Bev(e) => e.stem.dims,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        match self {
            Encoder::Perspective(e) => e.init(store, rng),
            Encoder::Bev(e) => e.init(store, rng),
        }
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        patches: &Tensor,
        times: Vec<usize>,
    ) -> Result<VisualLatents> {
        match self {
            Encoder::Perspective(e) => e.encode(tape, store, patches, times),
            Encoder::Bev(e) => e.encode(tape, store, patches, times),
        }
    }
}
