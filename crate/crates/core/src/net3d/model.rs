//! The promptable 3D segmentation network.
//!
//! * Image encoder: non-overlapping 3D patch embedding, learned absolute
//!   position embedding, pre-norm transformer blocks, and a neck of a
//!   1×1×1 convolution, channel layer norm, 3×3×3 convolution and a second
//!   channel layer norm over the token grid.
//! * Prompt encoder: each click becomes a random-Fourier 3D positional
//!   encoding of its normalized coordinate plus a learned label embedding.
//!   A padding token is always appended.
//! * Mask decoder: a learned output token joins the prompt tokens and runs
//!   through two-way attention with the image tokens. The updated image
//!   tokens are upsampled by transposed 3D convolutions, and per-voxel
//!   logits are the dot product with a hypernetwork projection of the
//!   output token.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::config::NetConfig;
use super::graph::{sigmoid, Graph, LossWeights, ParamStore, Var, GATHER_NONE};
use super::scalar::Scalar;
use crate::error::{shape_err, Error, Result};
use crate::voxgrid::{ClickLabel, Dims, PointPrompt, Volume};

const LABEL_POSITIVE: u32 = 0;
const LABEL_NEGATIVE: u32 = 1;
const LABEL_PADDING: u32 = 2;

/// Encoder output: `grid³` tokens of width `dim`, row-major `[tokens, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding<T> {
    pub grid: usize,
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T> ImageEmbedding<T> {
    pub fn token_count(&self) -> usize {
        self.grid.pow(3)
    }
}

/// One vector per click in input order, followed by the padding token.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding<T> {
    pub dim: usize,
    pub points: usize,
    pub data: Vec<T>,
}

impl<T: Copy> PromptEmbedding<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Config-derived index maps, rebuilt on load rather than stored.
#[derive(Debug)]
struct Geometry {
    /// Token rows -> flattened voxel offsets inside the patch.
    patchify: Vec<u32>,
    /// 3×3×3 neighbourhood gather over the token grid.
    im2col: Arc<Vec<u32>>,
    /// Per upsampling stage: (children-major row) -> voxel-ordered row.
    shuffles: Vec<Arc<Vec<u32>>>,
}

impl Geometry {
    fn new(cfg: &NetConfig) -> Self {
        let p = cfg.patch_input_size;
        let t = cfg.token_patch_size;
        let g = cfg.grid();
        let pd = Dims::cube(p);
        let gd = Dims::cube(g);

        let mut patchify = Vec::with_capacity(p * p * p);
        for tok in 0..gd.len() {
            let [a, b, c] = gd.coord(tok);
            for cz in 0..t {
                for cy in 0..t {
                    for cx in 0..t {
                        patchify.push(pd.index([a * t + cx, b * t + cy, c * t + cz]) as u32);
                    }
                }
            }
        }

        let mut im2col = Vec::with_capacity(gd.len() * 27);
        for tok in 0..gd.len() {
            let c = gd.coord(tok).map(|v| v as i64);
            for dz in -1..=1i64 {
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        let q = [c[0] + dx, c[1] + dy, c[2] + dz];
                        im2col.push(if gd.contains_signed(q) {
                            gd.index(q.map(|v| v as usize)) as u32
                        } else {
                            GATHER_NONE
                        });
                    }
                }
            }
        }

        let s = cfg.stage_stride();
        let mut shuffles = Vec::new();
        let mut side = g;
        for _ in 0..cfg.mask_upsample_stages {
            let ind = Dims::cube(side);
            let outd = Dims::cube(side * s);
            let cd = Dims::cube(s);
            let map = (0..outd.len())
                .map(|o| {
                    let v = outd.coord(o);
                    let parent = ind.index([v[0] / s, v[1] / s, v[2] / s]);
                    let child = cd.index([v[0] % s, v[1] % s, v[2] % s]);
                    (parent * s * s * s + child) as u32
                })
                .collect();
            shuffles.push(Arc::new(map));
            side *= s;
        }
        Geometry {
            patchify,
            im2col: Arc::new(im2col),
            shuffles,
        }
    }
}

/// Parameters and configuration of the full network.
#[derive(Debug, Clone)]
pub struct ModelState<T: Scalar> {
    pub config: NetConfig,
    pub seed: u64,
    pub params: ParamStore<T>,
    /// Fixed Gaussian frequency matrix `[3, embed_dim / 2]` of the
    /// positional encoding.
    pub pe_frequencies: Vec<f64>,
    geometry: Arc<Geometry>,
}

#[derive(Debug, Clone, Copy)]
enum InitKind {
    Normal(f64),
    Constant(f64),
}

/// Name, shape and initializer of every parameter a config implies.
#[derive(Debug, Default)]
struct Layout {
    slots: Vec<(String, usize, usize, InitKind)>,
}

impl Layout {
    fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) {
        self.slots.push((name.to_string(), rows, cols, InitKind::Normal(std)));
    }

    fn constant(&mut self, name: &str, rows: usize, cols: usize, v: f64) {
        self.slots.push((name.to_string(), rows, cols, InitKind::Constant(v)));
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) {
        self.normal(&format!("{prefix}.w"), fan_in, fan_out, (1.0 / fan_in as f64).sqrt());
        if bias {
            self.constant(&format!("{prefix}.b"), 1, fan_out, 0.0);
        }
    }

    fn norm(&mut self, prefix: &str, dim: usize) {
        self.constant(&format!("{prefix}.g"), 1, dim, 1.0);
        self.constant(&format!("{prefix}.b"), 1, dim, 0.0);
    }

    fn attention(&mut self, prefix: &str, dim: usize, inner: usize) {
        for n in ["q", "k", "v"] {
            self.linear(&format!("{prefix}.{n}"), dim, inner, true);
        }
        self.linear(&format!("{prefix}.out"), inner, dim, true);
    }

    fn of(config: &NetConfig) -> Layout {
        let mut init = Layout::default();
        let d = config.embed_dim;
        let t3 = config.token_patch_size.pow(3);
        let hidden = d * config.mlp_ratio;

        init.linear("encoder.patch_embed", t3, d, true);
        init.normal("encoder.pos_embed", config.token_count(), d, 0.02);
        for i in 0..config.encoder_depth {
            let p = format!("encoder.blocks.{i}");
            init.norm(&format!("{p}.norm1"), d);
            init.linear(&format!("{p}.attn.qkv"), d, 3 * d, true);
            init.linear(&format!("{p}.attn.proj"), d, d, true);
            init.norm(&format!("{p}.norm2"), d);
            init.linear(&format!("{p}.mlp.fc1"), d, hidden, true);
            init.linear(&format!("{p}.mlp.fc2"), hidden, d, true);
        }
        init.linear("encoder.neck.conv1", d, d, false);
        init.norm("encoder.neck.ln1", d);
        init.linear("encoder.neck.conv2", 27 * d, d, false);
        init.norm("encoder.neck.ln2", d);

        init.normal("prompt.label_embed", 3, d, 1.0);

        let cross = d / config.cross_attention_downsample;
        init.normal("decoder.output_token", 1, d, 1.0);
        for i in 0..config.decoder_depth {
            let p = format!("decoder.layers.{i}");
            init.attention(&format!("{p}.self_attn"), d, d);
            init.norm(&format!("{p}.norm1"), d);
            init.attention(&format!("{p}.cross_t2i"), d, cross);
            init.norm(&format!("{p}.norm2"), d);
            init.linear(&format!("{p}.mlp.fc1"), d, hidden, true);
            init.linear(&format!("{p}.mlp.fc2"), hidden, d, true);
            init.norm(&format!("{p}.norm3"), d);
            init.attention(&format!("{p}.cross_i2t"), d, cross);
            init.norm(&format!("{p}.norm4"), d);
        }
        init.attention("decoder.final_attn", d, cross);
        init.norm("decoder.norm_final", d);
        let s3 = config.stage_stride().pow(3);
        let mut c_in = d;
        let stages = config.mask_upsample_stages;
        for (i, &c_out) in config.upsample_channels.iter().enumerate() {
            init.linear(&format!("decoder.upscale.{i}.convt"), c_in, s3 * c_out, false);
            init.constant(&format!("decoder.upscale.{i}.bias"), 1, c_out, 0.0);
            if i + 1 < stages {
                init.norm(&format!("decoder.upscale.{i}.ln"), c_out);
            }
            c_in = c_out;
        }
        init.linear("decoder.hyper.fc1", d, d, true);
        init.linear("decoder.hyper.fc2", d, d, true);
        init.linear("decoder.hyper.fc3", d, c_in, true);
        init
    }

    /// Checks `params` holds exactly the slots whose names start with
    /// `prefix`, with matching shapes.
    fn check<T: Scalar>(&self, params: &ParamStore<T>, prefix: &str) -> Result<()> {
        let mut expected = 0;
        for (name, rows, cols, _) in self.slots.iter().filter(|s| s.0.starts_with(prefix)) {
            expected += 1;
            let id = params
                .id(name)
                .ok_or_else(|| Error::Archive(format!("missing parameter {name}")))?;
            let e = params.get(id);
            if (e.rows, e.cols) != (*rows, *cols) {
                return Err(Error::Archive(format!(
                    "{name} is {}x{}, config expects {rows}x{cols}",
                    e.rows, e.cols
                )));
            }
        }
        if params.len() != expected {
            return Err(Error::Archive(format!(
                "archive holds {} tensors, config expects {expected}",
                params.len()
            )));
        }
        Ok(())
    }
}

/// Parameter lookups and the shared layer building blocks.
struct Layers<'a, T: Scalar> {
    params: &'a ParamStore<T>,
    cfg: &'a NetConfig,
}

impl<T: Scalar> Layers<'_, T> {
    fn p(&self, g: &mut Graph<T>, name: &str) -> Var {
        let id = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("parameter {name} missing"));
        g.param(id)
    }

    fn linear(&self, g: &mut Graph<T>, prefix: &str, x: Var) -> Var {
        let w = self.p(g, &format!("{prefix}.w"));
        let y = g.matmul(x, w);
        match self.params.id(&format!("{prefix}.b")) {
            Some(id) => {
                let b = g.param(id);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    fn norm(&self, g: &mut Graph<T>, prefix: &str, x: Var) -> Var {
        let gamma = self.p(g, &format!("{prefix}.g"));
        let beta = self.p(g, &format!("{prefix}.b"));
        g.layer_norm(x, gamma, beta)
    }

    fn mlp(&self, g: &mut Graph<T>, prefix: &str, x: Var) -> Var {
        let h = self.linear(g, &format!("{prefix}.fc1"), x);
        let h = g.gelu(h);
        self.linear(g, &format!("{prefix}.fc2"), h)
    }

    /// Scaled dot-product attention over column blocks of `q`, `k`, `v`.
    fn heads(&self, g: &mut Graph<T>, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let width = g.shape(q).1;
        let dh = width / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let s = g.matmul_t(qh, kh, false, true);
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s);
            outs.push(g.matmul(a, vh));
        }
        if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        }
    }

    fn attention(&self, g: &mut Graph<T>, prefix: &str, q: Var, k: Var, v: Var) -> Var {
        let q = self.linear(g, &format!("{prefix}.q"), q);
        let k = self.linear(g, &format!("{prefix}.k"), k);
        let v = self.linear(g, &format!("{prefix}.v"), v);
        let o = self.heads(g, q, k, v, self.cfg.decoder_heads);
        self.linear(g, &format!("{prefix}.out"), o)
    }
}

fn check_patch(cfg: &NetConfig, patch: &Volume) -> Result<()> {
    let p = cfg.patch_input_size;
    if patch.dims != Dims::cube(p) {
        return Err(shape_err(format!("network input must be {p}³, got {:?}", patch.dims.0)));
    }
    Ok(())
}

fn encoder_graph<T: Scalar>(l: &Layers<'_, T>, geometry: &Geometry, g: &mut Graph<T>, patch: &Volume) -> Result<Var> {
    check_patch(l.cfg, patch)?;
    let cfg = l.cfg;
    let d = cfg.embed_dim;
    let t3 = cfg.token_patch_size.pow(3);
    let tokens = cfg.token_count();
    let data: Vec<T> = geometry
        .patchify
        .iter()
        .map(|&i| T::of(patch.data[i as usize] as f64))
        .collect();
    let x = g.constant(tokens, t3, data);
    let x = l.linear(g, "encoder.patch_embed", x);
    let pos = l.p(g, "encoder.pos_embed");
    let mut x = g.add(x, pos);

    for i in 0..cfg.encoder_depth {
        let p = format!("encoder.blocks.{i}");
        let h = l.norm(g, &format!("{p}.norm1"), x);
        let qkv = l.linear(g, &format!("{p}.attn.qkv"), h);
        let q = g.slice_cols(qkv, 0, d);
        let k = g.slice_cols(qkv, d, d);
        let v = g.slice_cols(qkv, 2 * d, d);
        let a = l.heads(g, q, k, v, cfg.encoder_heads);
        let a = l.linear(g, &format!("{p}.attn.proj"), a);
        x = g.add(x, a);
        let h = l.norm(g, &format!("{p}.norm2"), x);
        let h = l.mlp(g, &format!("{p}.mlp"), h);
        x = g.add(x, h);
    }

    let x = l.linear(g, "encoder.neck.conv1", x);
    let x = l.norm(g, "encoder.neck.ln1", x);
    let cols = g.gather(x, geometry.im2col.clone(), 27);
    let x = l.linear(g, "encoder.neck.conv2", cols);
    Ok(l.norm(g, "encoder.neck.ln2", x))
}

/// Image encoder weights on their own, as exported for transfer use.
#[derive(Debug, Clone)]
pub struct EncoderState<T: Scalar> {
    pub config: NetConfig,
    pub seed: u64,
    pub params: ParamStore<T>,
    geometry: Arc<Geometry>,
}

impl<T: Scalar> EncoderState<T> {
    pub fn from_parts(config: NetConfig, seed: u64, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        Layout::of(&config).check(&params, "encoder.")?;
        let geometry = Arc::new(Geometry::new(&config));
        Ok(EncoderState {
            config,
            seed,
            params,
            geometry,
        })
    }

    pub fn encode_image(&self, patch: &Volume) -> Result<ImageEmbedding<T>> {
        let mut g = Graph::new(&self.params);
        let l = Layers {
            params: &self.params,
            cfg: &self.config,
        };
        let v = encoder_graph(&l, &self.geometry, &mut g, patch)?;
        Ok(ImageEmbedding {
            grid: self.config.grid(),
            dim: self.config.embed_dim,
            data: g.value(v).to_vec(),
        })
    }
}

impl<T: Scalar> ModelState<T> {
    /// Freshly initialized network; all randomness comes from `seed`.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pe_frequencies: Vec<f64> = (0..3 * d / 2).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut params = ParamStore::new();
        for (name, rows, cols, kind) in Layout::of(&config).slots {
            let data = match kind {
                InitKind::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..rows * cols).map(|_| T::of(dist.sample(&mut rng))).collect()
                }
                InitKind::Constant(v) => vec![T::of(v); rows * cols],
            };
            params.insert(&name, rows, cols, data);
        }
        Self::from_parts(config, seed, params, pe_frequencies)
    }

    /// Reassembles a model from stored parts, checking every expected
    /// parameter is present with the right shape.
    pub fn from_parts(config: NetConfig, seed: u64, params: ParamStore<T>, pe_frequencies: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if pe_frequencies.len() != 3 * config.embed_dim / 2 {
            return Err(Error::Archive(format!(
                "positional-encoding matrix has {} entries, expected {}",
                pe_frequencies.len(),
                3 * config.embed_dim / 2
            )));
        }
        let geometry = Arc::new(Geometry::new(&config));
        let m = ModelState {
            config,
            seed,
            params,
            pe_frequencies,
            geometry,
        };
        Layout::of(&m.config).check(&m.params, "")?;
        Ok(m)
    }

    fn layers(&self) -> Layers<'_, T> {
        Layers {
            params: &self.params,
            cfg: &self.config,
        }
    }

    /// Encoder graph for one patch; returns `[tokens, embed_dim]`.
    pub(crate) fn encoder_graph(&self, g: &mut Graph<T>, patch: &Volume) -> Result<Var> {
        encoder_graph(&self.layers(), &self.geometry, g, patch)
    }

    /// Encoder-only view sharing this model's weights.
    pub fn encoder(&self) -> EncoderState<T> {
        EncoderState {
            config: self.config.clone(),
            seed: self.seed,
            params: self.params.subset("encoder."),
            geometry: self.geometry.clone(),
        }
    }

    /// Random Fourier features of coordinates in `[0, 1]³`, `[n, embed_dim]`.
    pub fn positional_encoding(&self, coords: &[[f64; 3]]) -> Vec<T> {
        let half = self.config.embed_dim / 2;
        let f = &self.pe_frequencies;
        let mut out = Vec::with_capacity(coords.len() * 2 * half);
        for c in coords {
            let u = c.map(|v| 2.0 * v - 1.0);
            let proj: Vec<f64> = (0..half)
                .map(|j| 2.0 * PI * (u[0] * f[j] + u[1] * f[half + j] + u[2] * f[2 * half + j]))
                .collect();
            out.extend(proj.iter().map(|&v| T::of(v.sin())));
            out.extend(proj.iter().map(|&v| T::of(v.cos())));
        }
        out
    }

    /// Normalized position of a patch-local voxel centre.
    pub fn normalized_coord(&self, local: [usize; 3]) -> [f64; 3] {
        let p = self.config.patch_input_size as f64;
        local.map(|v| (v as f64 + 0.5) / p)
    }

    fn dense_pe(&self) -> Vec<T> {
        let gsz = self.config.grid();
        let gd = Dims::cube(gsz);
        let coords: Vec<[f64; 3]> = (0..gd.len())
            .map(|i| gd.coord(i).map(|v| (v as f64 + 0.5) / gsz as f64))
            .collect();
        self.positional_encoding(&coords)
    }

    /// Converts volume-frame clicks to patch-local ones.
    pub fn localize(&self, points: &[PointPrompt], origin: [i64; 3]) -> Result<Vec<PointPrompt>> {
        let pd = Dims::cube(self.config.patch_input_size);
        points
            .iter()
            .map(|p| {
                let local: [i64; 3] = std::array::from_fn(|a| p.coord[a] as i64 - origin[a]);
                if !pd.contains_signed(local) {
                    return Err(Error::OutOfPatch(local));
                }
                Ok(PointPrompt {
                    coord: local.map(|v| v as usize),
                    label: p.label,
                })
            })
            .collect()
    }

    /// Prompt tokens for patch-local clicks, `[clicks + 1, embed_dim]`.
    pub(crate) fn prompt_graph(&self, g: &mut Graph<T>, local: &[PointPrompt]) -> Result<Var> {
        let l = self.layers();
        let pd = Dims::cube(self.config.patch_input_size);
        if let Some(p) = local.iter().find(|p| !pd.contains(p.coord)) {
            return Err(Error::OutOfPatch(p.coord.map(|v| v as i64)));
        }
        let d = self.config.embed_dim;
        let coords: Vec<[f64; 3]> = local.iter().map(|p| self.normalized_coord(p.coord)).collect();
        let mut pe = self.positional_encoding(&coords);
        pe.extend(std::iter::repeat_n(T::zero(), d));
        let mut labels: Vec<u32> = local
            .iter()
            .map(|p| match p.label {
                ClickLabel::Positive => LABEL_POSITIVE,
                ClickLabel::Negative => LABEL_NEGATIVE,
            })
            .collect();
        labels.push(LABEL_PADDING);
        let n = labels.len();
        let table = l.p(g, "prompt.label_embed");
        let lab = g.gather(table, Arc::new(labels), 1);
        let pe = g.constant(n, d, pe);
        Ok(g.add(pe, lab))
    }

    /// Decoder graph: image tokens + prompt tokens -> `[voxels, 1]` logits.
    pub(crate) fn decoder_graph(&self, g: &mut Graph<T>, image: Var, prompts: Var) -> Result<Var> {
        let l = self.layers();
        let cfg = &self.config;
        let d = cfg.embed_dim;
        if g.shape(image) != (cfg.token_count(), d) {
            return Err(shape_err(format!(
                "image embedding is {:?}, config expects ({}, {d})",
                g.shape(image),
                cfg.token_count()
            )));
        }
        if g.shape(prompts).1 != d {
            return Err(shape_err("prompt embedding width does not match config"));
        }
        let out_tok = l.p(g, "decoder.output_token");
        let tokens = g.concat_rows(&[out_tok, prompts]);
        let key_pe = g.constant(cfg.token_count(), d, self.dense_pe());
        let query_pe = tokens;
        let mut queries = tokens;
        let mut keys = image;

        for i in 0..cfg.decoder_depth {
            let p = format!("decoder.layers.{i}");
            if i == 0 {
                queries = l.attention(g, &format!("{p}.self_attn"), queries, queries, queries);
            } else {
                let q = g.add(queries, query_pe);
                let a = l.attention(g, &format!("{p}.self_attn"), q, q, queries);
                queries = g.add(queries, a);
            }
            queries = l.norm(g, &format!("{p}.norm1"), queries);

            let q = g.add(queries, query_pe);
            let k = g.add(keys, key_pe);
            let a = l.attention(g, &format!("{p}.cross_t2i"), q, k, keys);
            queries = g.add(queries, a);
            queries = l.norm(g, &format!("{p}.norm2"), queries);

            let m = l.mlp(g, &format!("{p}.mlp"), queries);
            queries = g.add(queries, m);
            queries = l.norm(g, &format!("{p}.norm3"), queries);

            let q = g.add(queries, query_pe);
            let k = g.add(keys, key_pe);
            let a = l.attention(g, &format!("{p}.cross_i2t"), k, q, queries);
            keys = g.add(keys, a);
            keys = l.norm(g, &format!("{p}.norm4"), keys);
        }
        let q = g.add(queries, query_pe);
        let k = g.add(keys, key_pe);
        let a = l.attention(g, "decoder.final_attn", q, k, keys);
        queries = g.add(queries, a);
        queries = l.norm(g, "decoder.norm_final", queries);

        let s3 = cfg.stage_stride().pow(3);
        let mut x = keys;
        let stages = cfg.mask_upsample_stages;
        for (i, &c_out) in cfg.upsample_channels.iter().enumerate() {
            let w = l.p(g, &format!("decoder.upscale.{i}.convt.w"));
            let y = g.matmul(x, w);
            let rows = g.shape(y).0 * s3;
            let y = g.reshape(y, rows, c_out);
            let y = g.gather(y, self.geometry.shuffles[i].clone(), 1);
            let b = l.p(g, &format!("decoder.upscale.{i}.bias"));
            let mut y = g.add_row(y, b);
            if i + 1 < stages {
                y = l.norm(g, &format!("decoder.upscale.{i}.ln"), y);
            }
            x = g.gelu(y);
        }

        let out_row = g.gather(queries, Arc::new(vec![0]), 1);
        let h = l.linear(g, "decoder.hyper.fc1", out_row);
        let h = g.gelu(h);
        let h = l.linear(g, "decoder.hyper.fc2", h);
        let h = g.gelu(h);
        let h = l.linear(g, "decoder.hyper.fc3", h);
        Ok(g.matmul_t(x, h, false, true))
    }

    /// Runs the image encoder on a `patch_input_size³` patch.
    pub fn encode_image(&self, patch: &Volume) -> Result<ImageEmbedding<T>> {
        let mut g = Graph::new(&self.params);
        let v = self.encoder_graph(&mut g, patch)?;
        Ok(ImageEmbedding {
            grid: self.config.grid(),
            dim: self.config.embed_dim,
            data: g.value(v).to_vec(),
        })
    }

    /// Embeds volume-frame clicks for the patch whose voxel (0,0,0) sits at
    /// `origin`.
    pub fn encode_prompts(&self, points: &[PointPrompt], origin: [i64; 3]) -> Result<PromptEmbedding<T>> {
        let local = self.localize(points, origin)?;
        let mut g = Graph::new(&self.params);
        let v = self.prompt_graph(&mut g, &local)?;
        Ok(PromptEmbedding {
            dim: self.config.embed_dim,
            points: points.len(),
            data: g.value(v).to_vec(),
        })
    }

    /// Mask logits, `patch_input_size³` values in voxel order.
    pub fn decode_mask(&self, img: &ImageEmbedding<T>, pr: &PromptEmbedding<T>) -> Result<Vec<T>> {
        if img.grid != self.config.grid() || img.dim != self.config.embed_dim {
            return Err(shape_err("image embedding was produced with a different config"));
        }
        if pr.dim != self.config.embed_dim {
            return Err(shape_err("prompt embedding was produced with a different config"));
        }
        let mut g = Graph::new(&self.params);
        let image = g.constant(img.token_count(), img.dim, img.data.clone());
        let prompts = g.constant(pr.points + 1, pr.dim, pr.data.clone());
        let out = self.decoder_graph(&mut g, image, prompts)?;
        Ok(g.value(out).to_vec())
    }

    /// Logits for a patch and patch-local clicks.
    pub fn logits(&self, patch: &Volume, local: &[PointPrompt]) -> Result<Vec<T>> {
        let mut g = Graph::new(&self.params);
        let img = self.encoder_graph(&mut g, patch)?;
        let pr = self.prompt_graph(&mut g, local)?;
        let out = self.decoder_graph(&mut g, img, pr)?;
        Ok(g.value(out).to_vec())
    }

    /// Segmentation loss of one prediction and its gradient with respect to
    /// every parameter, indexed like `self.params`.
    pub fn loss_and_grad(
        &self,
        patch: &Volume,
        local: &[PointPrompt],
        target: &[bool],
        w: LossWeights,
    ) -> Result<(f64, Vec<Vec<T>>)> {
        self.loss_grad_and_logits(patch, local, target, w)
            .map(|(l, g, _)| (l, g))
    }

    /// Like [`Self::loss_and_grad`], also returning the logits it saw.
    pub fn loss_grad_and_logits(
        &self,
        patch: &Volume,
        local: &[PointPrompt],
        target: &[bool],
        w: LossWeights,
    ) -> Result<(f64, Vec<Vec<T>>, Vec<T>)> {
        if target.len() != self.config.patch_input_size.pow(3) {
            return Err(shape_err("loss target does not match the patch size"));
        }
        let mut g = Graph::new(&self.params);
        let img = self.encoder_graph(&mut g, patch)?;
        let pr = self.prompt_graph(&mut g, local)?;
        let out = self.decoder_graph(&mut g, img, pr)?;
        let loss = g.seg_loss(out, target, w);
        let logits = g.value(out).to_vec();
        Ok((g.value(loss)[0].f64(), g.backward(loss), logits))
    }

    /// Foreground probabilities for a patch and patch-local clicks.
    pub fn forward(&self, patch: &Volume, local: &[PointPrompt]) -> Result<Vec<T>> {
        Ok(self
            .logits(patch, local)?
            .into_iter()
            .map(|z| T::of(sigmoid(z.f64())))
            .collect())
    }
}
