use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::graph::{build_knn_graph, graph_features, KnnGraph, Propagation};
use crate::layers::{batch_norm_stacked, patch_groups, GsopMode, LEAKY_SLOPE};
use crate::params::{Forward, Mode};
use crate::tensor::{CsrMatrix, Tape, Tensor, Var};

use super::ModelState;

/// A raster together with the pixel graph built over it.
#[derive(Clone, Debug)]
pub struct Scene {
    raster: Tensor,
    graph: KnnGraph,
    propagation: Arc<CsrMatrix>,
}

impl Scene {
    /// Pairs an M×N×B raster with a graph over its M·N pixels.
    pub fn new(raster: Tensor, graph: KnnGraph, propagation: Propagation) -> Result<Self> {
        let &[m, n, _] = raster.shape() else {
            return Err(dim_err!("a scene raster must be M×N×B, got {:?}", raster.shape()));
        };
        if graph.n() != m * n {
            return Err(dim_err!("graph has {} nodes but the raster has {} pixels", graph.n(), m * n));
        }
        let propagation = graph.propagation(propagation);
        Ok(Scene { raster, graph, propagation })
    }

    /// Builds the KNN graph the model configuration asks for.
    pub fn build(raster: Tensor, model: &super::ModelConfig) -> Result<Self> {
        let features = graph_features(&raster, &model.knn)?;
        let graph = build_knn_graph(&features, &model.knn)?;
        Scene::new(raster, graph, model.propagation)
    }

    pub fn raster(&self) -> &Tensor {
        &self.raster
    }

    pub fn graph(&self) -> &KnnGraph {
        &self.graph
    }

    pub fn height(&self) -> usize {
        self.raster.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.raster.shape()[1]
    }

    pub fn bands(&self) -> usize {
        self.raster.shape()[2]
    }

    pub fn pixels(&self) -> usize {
        self.height() * self.width()
    }
}

/// Per-pixel stream features, row-aligned with the query pixels. Disabled
/// streams are `None`.
#[derive(Clone, Copy, Debug, Default)]
pub struct StreamOutputs {
    pub h_g: Option<Var>,
    pub h_c: Option<Var>,
    pub h_n: Option<Var>,
    pub h_s: Option<Var>,
    /// The N stream's second-order vectors before projection.
    pub n_sop: Option<Var>,
}

impl StreamOutputs {
    /// Enabled outputs in fusion order.
    pub fn fused_inputs(&self) -> Vec<Var> {
        [self.h_g, self.h_c, self.h_n, self.h_s].into_iter().flatten().collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub streams: StreamOutputs,
    pub logits: Var,
}

/// Node-level features that do not depend on which pixels are queried.
#[derive(Clone, Copy, Debug, Default)]
struct Trunks {
    g_pre: Option<Var>,
    s_pre: Option<Var>,
    c: Option<Var>,
    n_feat: Option<Var>,
}

struct Layout {
    offsets: Vec<usize>,
    dims: Vec<(usize, usize)>,
    propagation: Arc<CsrMatrix>,
}

impl Layout {
    fn new(scenes: &[&Scene]) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::Contract("forward pass over no scenes".into()));
        }
        let mut offsets = Vec::with_capacity(scenes.len());
        let mut total = 0;
        for s in scenes {
            offsets.push(total);
            total += s.pixels();
        }
        let propagation = if scenes.len() == 1 {
            Arc::clone(&scenes[0].propagation)
        } else {
            let mut entries = Vec::new();
            for (s, &off) in scenes.iter().zip(&offsets) {
                let p = &s.propagation;
                for r in 0..p.rows() {
                    let (cols, vals) = p.row(r);
                    entries.extend(cols.iter().zip(vals).map(|(&c, &v)| (r + off, c + off, v)));
                }
            }
            Arc::new(CsrMatrix::from_triplets(total, total, &entries)?)
        };
        let dims = scenes.iter().map(|s| (s.height(), s.width())).collect();
        Ok(Layout { offsets, dims, propagation })
    }
}

struct Queries {
    /// Global node index of every query row.
    nodes: Vec<usize>,
    /// Scene of every query row.
    scene: Vec<usize>,
}

impl Queries {
    fn new(layout: &Layout, scenes: &[&Scene], queries: &[Vec<usize>]) -> Result<Self> {
        if queries.len() != scenes.len() {
            return Err(dim_err!("{} query lists for {} scenes", queries.len(), scenes.len()));
        }
        let mut nodes = Vec::new();
        let mut scene = Vec::new();
        for (s, q) in queries.iter().enumerate() {
            for &p in q {
                if p >= scenes[s].pixels() {
                    return Err(dim_err!("query pixel {p} outside scene {s}"));
                }
                nodes.push(layout.offsets[s] + p);
                scene.push(s);
            }
        }
        if nodes.is_empty() {
            return Err(Error::Contract("forward pass with no query pixels".into()));
        }
        Ok(Queries { nodes, scene })
    }

    fn hoods(&self, layout: &Layout, scenes: &[&Scene]) -> Vec<Vec<usize>> {
        self.nodes
            .iter()
            .zip(&self.scene)
            .map(|(&g, &s)| {
                let off = layout.offsets[s];
                scenes[s].graph.closed_neighborhood(g - off).into_iter().map(|j| j + off).collect()
            })
            .collect()
    }
}

fn input_vars(tape: &mut Tape, scenes: &[&Scene]) -> Vec<Var> {
    scenes.iter().map(|s| tape.constant(s.raster.clone())).collect()
}

/// Stacks per-scene H×W×C rasters into one (ΣHW)×C matrix.
fn flatten_rows(tape: &mut Tape, rasters: &[Var]) -> Result<Var> {
    let flat = rasters
        .iter()
        .map(|&r| {
            let s = tape.value(r).shape().to_vec();
            tape.reshape(r, &[s[0] * s[1], s[2]])
        })
        .collect::<Result<Vec<_>>>()?;
    if flat.len() == 1 {
        Ok(flat[0])
    } else {
        tape.concat(&flat, 0)
    }
}

fn graph_trunk(
    fwd: &mut Forward<'_, '_>,
    model: &ModelState,
    prefix: &str,
    nodes: Var,
    prop: &Arc<CsrMatrix>,
) -> Result<Var> {
    let layers = model.config.trunk_layers(prefix, model.bands);
    let mut h = nodes;
    for (l, layer) in layers.iter().enumerate() {
        h = layer.forward(fwd, h, prop)?;
        if l + 1 < layers.len() {
            h = fwd.tape.relu(h)?;
        }
    }
    Ok(h)
}

fn run_trunks(fwd: &mut Forward<'_, '_>, model: &ModelState, scenes: &[&Scene], layout: &Layout) -> Result<Trunks> {
    let cfg = &model.config;
    for s in scenes {
        if s.bands() != model.bands {
            return Err(dim_err!("model expects {} bands, scene has {}", model.bands, s.bands()));
        }
    }
    let rasters = input_vars(fwd.tape, scenes);
    let mut trunks = Trunks::default();

    if cfg.streams.g || cfg.streams.s {
        let nodes = flatten_rows(fwd.tape, &rasters)?;
        let g_prefix = cfg.trunk_prefix("g");
        let s_prefix = cfg.trunk_prefix("s");
        if cfg.streams.g {
            trunks.g_pre = Some(graph_trunk(fwd, model, &g_prefix, nodes, &layout.propagation)?);
        }
        if cfg.streams.s {
            let h = match trunks.g_pre {
                Some(h) if s_prefix == g_prefix => h,
                _ => graph_trunk(fwd, model, &s_prefix, nodes, &layout.propagation)?,
            };
            trunks.s_pre = Some(cfg.s_projection_layer().forward(fwd, h)?);
        }
    }
    if cfg.streams.c {
        let mut xs = rasters.clone();
        for block in cfg.c_ladder(model.bands) {
            xs = block.forward_many(fwd, &xs)?;
        }
        trunks.c = Some(flatten_rows(fwd.tape, &xs)?);
    }
    if cfg.streams.n {
        let xs = cfg.n_extractor_block(model.bands).forward_many(fwd, &rasters)?;
        let xs = batch_norm_stacked(fwd, "n.bn", &xs)?;
        trunks.n_feat = Some(flatten_rows(fwd.tape, &xs)?);
    }
    Ok(trunks)
}

fn run_heads(
    fwd: &mut Forward<'_, '_>,
    model: &ModelState,
    scenes: &[&Scene],
    layout: &Layout,
    queries: &Queries,
    trunks: &Trunks,
) -> Result<ForwardOutput> {
    let cfg = &model.config;
    let mut out = StreamOutputs::default();
    let hoods = if trunks.g_pre.is_some() || (trunks.s_pre.is_some() && cfg.gsop_mode == GsopMode::PerNode) {
        queries.hoods(layout, scenes)
    } else {
        Vec::new()
    };
    if let Some(h) = trunks.g_pre {
        out.h_g = Some(fwd.tape.group_max_rows(h, &hoods)?);
    }
    if let Some(c) = trunks.c {
        out.h_c = Some(fwd.tape.gather_rows(c, &queries.nodes)?);
    }
    if let Some(feat) = trunks.n_feat {
        let mut groups = Vec::with_capacity(queries.nodes.len());
        for (&g, &s) in queries.nodes.iter().zip(&queries.scene) {
            let off = layout.offsets[s];
            let (h, w) = layout.dims[s];
            let patch = patch_groups(h, w, cfg.n_patch_radius, &[g - off])?.remove(0);
            groups.push(patch.into_iter().map(|j| j + off).collect());
        }
        let sop = fwd.tape.local_second_order(feat, &Arc::new(groups))?;
        out.n_sop = Some(sop);
        out.h_n = Some(cfg.n_projection_layer().forward(fwd, sop)?);
    }
    if let Some(h) = trunks.s_pre {
        out.h_s = Some(match cfg.gsop_mode {
            GsopMode::PerNode => fwd.tape.local_second_order(h, &Arc::new(hoods))?,
            GsopMode::Global => {
                let groups: Vec<Vec<usize>> =
                    layout.offsets.iter().zip(scenes).map(|(&off, s)| (off..off + s.pixels()).collect()).collect();
                let per_scene = fwd.tape.local_second_order(h, &Arc::new(groups))?;
                fwd.tape.gather_rows(per_scene, &queries.scene)?
            }
        });
    }
    let logits = fuse_and_classify(fwd, model, &out)?;
    Ok(ForwardOutput { streams: out, logits })
}

/// Concatenates the enabled stream outputs and applies the fusion MLP.
pub fn fuse_and_classify(fwd: &mut Forward<'_, '_>, model: &ModelState, outs: &StreamOutputs) -> Result<Var> {
    let inputs = outs.fused_inputs();
    if inputs.is_empty() {
        return Err(Error::Contract("no stream outputs to fuse".into()));
    }
    let mut x = if inputs.len() == 1 { inputs[0] } else { fwd.tape.concat(&inputs, 1)? };
    let width = fwd.tape.value(x).shape()[1];
    if width != model.config.fusion_width() {
        return Err(dim_err!("fusion input is {width} wide, configuration expects {}", model.config.fusion_width()));
    }
    let layers = model.config.fusion_layers(model.classes);
    for (i, layer) in layers.iter().enumerate() {
        x = layer.forward(fwd, x)?;
        if i + 1 < layers.len() {
            x = fwd.batch_norm(&format!("fuse.bn{i}"), x, 1)?;
            x = fwd.tape.leaky_relu(x, LEAKY_SLOPE)?;
        }
    }
    Ok(x)
}

/// Runs every enabled stream over `scenes` and classifies the query pixels.
///
/// `queries[s]` lists pixel indices of scene `s`; logits rows follow the
/// queries scene by scene. Normalization statistics are pooled over all
/// scenes for the stream trunks and over the query rows for the fusion head.
pub fn forward(
    fwd: &mut Forward<'_, '_>,
    model: &ModelState,
    scenes: &[&Scene],
    queries: &[Vec<usize>],
) -> Result<ForwardOutput> {
    let layout = Layout::new(scenes)?;
    let q = Queries::new(&layout, scenes, queries)?;
    let trunks = run_trunks(fwd, model, scenes, &layout)?;
    run_heads(fwd, model, scenes, &layout, &q, &trunks)
}

/// Mean cross-entropy over rows that carry a label. Targets are 0-based classes.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    tape.cross_entropy(logits, targets)
}

/// Forward pass over one scene plus the classification loss of its labeled
/// query pixels.
pub fn forward_full(
    fwd: &mut Forward<'_, '_>,
    model: &ModelState,
    scene: &Scene,
    query: &[usize],
    targets: &[Option<usize>],
) -> Result<(ForwardOutput, Var)> {
    let out = forward(fwd, model, &[scene], &[query.to_vec()])?;
    let loss = cross_entropy_loss(fwd.tape, out.logits, targets)?;
    Ok((out, loss))
}

fn all_pixels(scene: &Scene) -> Vec<Vec<usize>> {
    vec![(0..scene.pixels()).collect()]
}

fn single_stream(
    fwd: &mut Forward<'_, '_>,
    model: &ModelState,
    scene: &Scene,
    pick: impl Fn(&StreamOutputs) -> Option<Var>,
    name: &str,
) -> Result<Var> {
    let out = forward(fwd, model, &[scene], &all_pixels(scene))?;
    pick(&out.streams).ok_or_else(|| Error::Config(format!("the {name} stream is disabled")))
}

/// G-stream features of every pixel of `scene`.
pub fn run_g_stream(fwd: &mut Forward<'_, '_>, model: &ModelState, scene: &Scene) -> Result<Var> {
    single_stream(fwd, model, scene, |o| o.h_g, "G")
}

/// C-stream features of every pixel of `scene`.
pub fn run_c_stream(fwd: &mut Forward<'_, '_>, model: &ModelState, scene: &Scene) -> Result<Var> {
    single_stream(fwd, model, scene, |o| o.h_c, "C")
}

/// N-stream features of every pixel of `scene`.
pub fn run_n_stream(fwd: &mut Forward<'_, '_>, model: &ModelState, scene: &Scene) -> Result<Var> {
    single_stream(fwd, model, scene, |o| o.h_n, "N")
}

/// S-stream features of every pixel of `scene`.
pub fn run_s_stream(fwd: &mut Forward<'_, '_>, model: &ModelState, scene: &Scene) -> Result<Var> {
    single_stream(fwd, model, scene, |o| o.h_s, "S")
}

/// Inference-mode logits for `pixels` of `scene`, evaluated `chunk` query rows at a time.
pub fn predict(model: &ModelState, scene: &Scene, pixels: &[usize], chunk: usize) -> Result<Tensor> {
    let scenes = [scene];
    let layout = Layout::new(&scenes)?;
    let mut tape = Tape::new();
    let trunk_values = {
        let mut fwd = Forward::new(&mut tape, &model.params, Mode::Eval);
        let t = run_trunks(&mut fwd, model, &scenes, &layout)?;
        let take = |v: Option<Var>| v.map(|v| fwd.tape.value(v).clone());
        [take(t.g_pre), take(t.s_pre), take(t.c), take(t.n_feat)]
    };
    drop(tape);

    let mut rows = Vec::with_capacity(pixels.len() * model.classes);
    for part in pixels.chunks(chunk.max(1)) {
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &model.params, Mode::Eval);
        let mut consts = trunk_values.iter().map(|t| t.as_ref().map(|t| fwd.tape.constant(t.clone())));
        let trunks = Trunks {
            g_pre: consts.next().flatten(),
            s_pre: consts.next().flatten(),
            c: consts.next().flatten(),
            n_feat: consts.next().flatten(),
        };
        let q = Queries::new(&layout, &scenes, &[part.to_vec()])?;
        let out = run_heads(&mut fwd, model, &scenes, &layout, &q, &trunks)?;
        rows.extend_from_slice(fwd.tape.value(out.logits).data());
    }
    Tensor::new([pixels.len(), model.classes], rows)
}
