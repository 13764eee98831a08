//! The four-stream classifier: configuration, parameters, forward pass and
//! checkpoints.
//!
//! * The G stream is a stack of graph convolutions followed by neighbor max-pooling.
//! * The C stream is a ladder of convolutional blocks over the raster.
//! * The N stream is second-order pooling of convolutional features over a
//!   square patch around each pixel.
//! * The S stream is second-order pooling of graph features over each node's
//!   closed neighborhood.
//!
//! Their per-pixel outputs are concatenated and classified by a small
//! pointwise MLP.

mod checkpoint;
mod forward;

pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    cross_entropy_loss, forward, forward_full, fuse_and_classify, predict, run_c_stream, run_g_stream, run_n_stream,
    run_s_stream, ForwardOutput, Scene, StreamOutputs,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphConfig, Propagation};
use crate::layers::{ConvBlock, Dense, GraphConvLayer, GsopMode};
use crate::params::{init_batch_norm, ParamStore};

/// Kernel extent and output channels of one convolutional block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub kernel: usize,
    pub channels: usize,
}

/// Which streams take part in the fused representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamsEnabled {
    pub g: bool,
    pub c: bool,
    pub n: bool,
    pub s: bool,
}

impl Default for StreamsEnabled {
    fn default() -> Self {
        StreamsEnabled { g: true, c: true, n: true, s: true }
    }
}

impl StreamsEnabled {
    pub fn any(&self) -> bool {
        self.g || self.c || self.n || self.s
    }

    /// All streams except `name` (one of "g", "c", "n", "s").
    pub fn without(name: &str) -> Result<Self> {
        let mut s = StreamsEnabled::default();
        match name {
            "g" => s.g = false,
            "c" => s.c = false,
            "n" => s.n = false,
            "s" => s.s = false,
            other => return Err(Error::Config(format!("unknown stream `{other}`"))),
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output widths of the graph convolution layers.
    pub g_widths: Vec<usize>,
    pub c_blocks: Vec<ConvSpec>,
    pub n_extractor: ConvSpec,
    /// Half-width of the square patch pooled by the N stream.
    pub n_patch_radius: usize,
    /// Width the N stream's second-order vector is projected to.
    pub n_projection: usize,
    /// Channels the graph features are projected to before second-order pooling.
    pub s_projection: usize,
    pub gsop_mode: GsopMode,
    /// Hidden widths of the fusion head; the class count is appended.
    pub fusion_channels: Vec<usize>,
    pub streams: StreamsEnabled,
    /// Whether the G and S streams read the same graph convolution stack.
    pub shared_trunk: bool,
    pub propagation: Propagation,
    pub knn: GraphConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            g_widths: vec![64, 32],
            c_blocks: vec![
                ConvSpec { kernel: 3, channels: 32 },
                ConvSpec { kernel: 3, channels: 64 },
                ConvSpec { kernel: 1, channels: 128 },
            ],
            n_extractor: ConvSpec { kernel: 3, channels: 32 },
            n_patch_radius: 2,
            n_projection: 128,
            s_projection: 16,
            gsop_mode: GsopMode::PerNode,
            fusion_channels: vec![512, 128],
            streams: StreamsEnabled::default(),
            shared_trunk: true,
            propagation: Propagation::Laplacian,
            knn: GraphConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.streams.any() {
            return Err(Error::Config("at least one stream must be enabled".into()));
        }
        if self.g_widths.is_empty() || self.g_widths.contains(&0) {
            return Err(Error::Config("g_widths must be non-empty and positive".into()));
        }
        if self.c_blocks.is_empty() {
            return Err(Error::Config("c_blocks must not be empty".into()));
        }
        for spec in self.c_blocks.iter().chain([&self.n_extractor]) {
            if spec.kernel % 2 == 0 || spec.channels == 0 {
                return Err(Error::Config(format!(
                    "convolution {}×{} → {} needs an odd kernel and positive width",
                    spec.kernel, spec.kernel, spec.channels
                )));
            }
        }
        if self.n_projection == 0 || self.s_projection == 0 || self.fusion_channels.contains(&0) {
            return Err(Error::Config("projection and fusion widths must be positive".into()));
        }
        self.knn.validate()
    }

    /// Output width of each enabled stream, in fusion order (G, C, N, S).
    pub fn stream_widths(&self) -> Vec<(&'static str, usize)> {
        let mut out = Vec::new();
        if self.streams.g {
            out.push(("g", *self.g_widths.last().expect("validated")));
        }
        if self.streams.c {
            out.push(("c", self.c_blocks.last().expect("validated").channels));
        }
        if self.streams.n {
            out.push(("n", self.n_projection));
        }
        if self.streams.s {
            out.push(("s", self.s_projection * self.s_projection));
        }
        out
    }

    pub fn fusion_width(&self) -> usize {
        self.stream_widths().iter().map(|(_, w)| w).sum()
    }

    /// Name prefix of the graph convolution stack read by stream `g` or `s`.
    pub fn trunk_prefix(&self, stream: &str) -> String {
        if self.shared_trunk {
            "trunk".to_string()
        } else {
            format!("{stream}.trunk")
        }
    }

    pub fn trunk_layers(&self, prefix: &str, bands: usize) -> Vec<GraphConvLayer> {
        let mut c_in = bands;
        self.g_widths
            .iter()
            .enumerate()
            .map(|(l, &w)| {
                let layer = GraphConvLayer::new(format!("{prefix}.gc{l}"), c_in, w);
                c_in = w;
                layer
            })
            .collect()
    }

    /// Trunk prefixes that carry parameters under this configuration.
    pub fn trunks(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (stream, on) in [("g", self.streams.g), ("s", self.streams.s)] {
            let p = self.trunk_prefix(stream);
            if on && !out.contains(&p) {
                out.push(p);
            }
        }
        out
    }

    pub fn c_ladder(&self, bands: usize) -> Vec<ConvBlock> {
        let mut c_in = bands;
        self.c_blocks
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let b = ConvBlock::new(format!("c.block{i}"), spec.kernel, c_in, spec.channels);
                c_in = spec.channels;
                b
            })
            .collect()
    }

    pub fn n_extractor_block(&self, bands: usize) -> ConvBlock {
        ConvBlock::new("n.extract", self.n_extractor.kernel, bands, self.n_extractor.channels)
    }

    pub fn n_projection_layer(&self) -> Dense {
        let f = self.n_extractor.channels;
        Dense::new("n.proj", f * f, self.n_projection, true)
    }

    pub fn s_projection_layer(&self) -> Dense {
        Dense::new("s.proj", *self.g_widths.last().expect("validated"), self.s_projection, true)
    }

    /// Fusion layers: hidden layers without bias (normalization follows) and a
    /// biased output layer.
    pub fn fusion_layers(&self, classes: usize) -> Vec<Dense> {
        let mut c_in = self.fusion_width();
        let mut layers: Vec<Dense> = self
            .fusion_channels
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let d = Dense::new(format!("fuse.fc{i}"), c_in, w, false);
                c_in = w;
                d
            })
            .collect();
        layers.push(Dense::new("fuse.out", c_in, classes, true));
        layers
    }
}

/// Every trainable tensor and running statistic of a model, with the shape
/// information needed to interpret them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub bands: usize,
    pub classes: usize,
    pub seed: u64,
    pub params: ParamStore,
}

impl ModelState {
    /// Initializes all parameters from `seed`.
    pub fn new(config: ModelConfig, bands: usize, classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if bands == 0 {
            return Err(Error::Config("the cube must have at least one band".into()));
        }
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for prefix in config.trunks() {
            for layer in config.trunk_layers(&prefix, bands) {
                layer.init(&mut params, &mut rng);
            }
        }
        if config.streams.c {
            for block in config.c_ladder(bands) {
                block.init(&mut params, &mut rng);
            }
        }
        if config.streams.n {
            config.n_extractor_block(bands).init(&mut params, &mut rng);
            init_batch_norm(&mut params, "n.bn", config.n_extractor.channels);
            config.n_projection_layer().init(&mut params, &mut rng);
        }
        if config.streams.s {
            config.s_projection_layer().init(&mut params, &mut rng);
        }
        let fusion = config.fusion_layers(classes);
        for (i, layer) in fusion.iter().enumerate() {
            layer.init(&mut params, &mut rng);
            if i + 1 < fusion.len() {
                init_batch_norm(&mut params, &format!("fuse.bn{i}"), layer.c_out);
            }
        }
        params.round_to_storage();
        Ok(ModelState { config, bands, classes, seed, params })
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Trainable scalars whose name starts with `prefix`.
    pub fn parameter_count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, p)| n.starts_with(prefix) && p.kind.is_trainable())
            .map(|(_, p)| p.value.numel())
            .sum()
    }
}
