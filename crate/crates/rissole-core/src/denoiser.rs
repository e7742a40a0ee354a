//! The noise-prediction network for a single block.
//!
//! Conditioning pathway: the input block and each retrieved neighbor go
//! through separate convolutional embeddings, the neighbor embeddings are
//! averaged, everything is added to the raw input (plus an optional learned
//! position vector), and the sum is layer-normalized. The trunk is a stack of
//! residual conv blocks with a per-channel time projection; a zero-initialized
//! output conv maps back to the block's channels.

use std::path::Path;

use crate::blocks::BlockLayout;
use crate::error::{Error, Result};
use crate::io::{self, Manifest};
use crate::rng::Rng;
use crate::tensor::{conv2d, conv2d_grads, layer_norm, layer_norm_grads, LayerNormStats, Tensor};

pub const KERNEL: usize = 3;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CondMode {
    Rag,
    RagPlusPrev,
    NoRag,
}

impl CondMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CondMode::Rag => "rag",
            CondMode::RagPlusPrev => "rag_plus_prev",
            CondMode::NoRag => "no_rag",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rag" => Ok(CondMode::Rag),
            "rag_plus_prev" => Ok(CondMode::RagPlusPrev),
            "no_rag" => Ok(CondMode::NoRag),
            other => Err(Error::Config(format!(
                "unknown cond mode `{other}` (expected rag, rag_plus_prev, no_rag)"
            ))),
        }
    }

    pub fn uses_retrieval(&self) -> bool {
        !matches!(self, CondMode::NoRag)
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub block_h: usize,
    pub block_w: usize,
    pub r_blocks: usize,
    pub d_t: usize,
    pub t_max: usize,
    pub b: usize,
    pub k: usize,
    pub cond_mode: CondMode,
    pub pos_enabled: bool,
}

impl DenoiserConfig {
    pub fn block_shape(&self) -> [usize; 3] {
        [self.channels, self.block_h, self.block_w]
    }

    pub fn for_layout(layout: &BlockLayout, r_blocks: usize, d_t: usize, t_max: usize, k: usize, cond_mode: CondMode, pos_enabled: bool) -> Self {
        DenoiserConfig {
            channels: layout.c,
            block_h: layout.block_h(),
            block_w: layout.block_w(),
            r_blocks,
            d_t,
            t_max,
            b: layout.b,
            k,
            cond_mode,
            pos_enabled,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResBlockParams {
    pub c1_w: Tensor,
    pub c1_b: Tensor,
    /// channels x d_t, projecting the time embedding to a per-channel shift.
    pub tproj: Tensor,
    pub c2_w: Tensor,
    pub c2_b: Tensor,
}

#[derive(Debug, Clone)]
pub struct Params {
    pub conv_in_w: Tensor,
    pub conv_in_b: Tensor,
    pub conv_nbr_w: Tensor,
    pub conv_nbr_b: Tensor,
    pub ln_gain: Tensor,
    pub ln_off: Tensor,
    pub res: Vec<ResBlockParams>,
    pub out_w: Tensor,
    pub out_b: Tensor,
    /// b x channels learned position vectors, present iff pos conditioning.
    pub pos: Option<Tensor>,
}

/// Per-parameter gradient buffers, shape-aligned with `Params`.
pub type GradientTape = Params;

impl Params {
    pub fn zeros_like(&self) -> Params {
        let mut p = self.clone();
        p.for_each_mut(|_, t| *t = Tensor::zeros(t.shape()));
        p
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(String, &mut Tensor)) {
        f("conv_in_w".into(), &mut self.conv_in_w);
        f("conv_in_b".into(), &mut self.conv_in_b);
        f("conv_nbr_w".into(), &mut self.conv_nbr_w);
        f("conv_nbr_b".into(), &mut self.conv_nbr_b);
        f("ln_gain".into(), &mut self.ln_gain);
        f("ln_off".into(), &mut self.ln_off);
        for (r, block) in self.res.iter_mut().enumerate() {
            f(format!("res{r}_c1_w"), &mut block.c1_w);
            f(format!("res{r}_c1_b"), &mut block.c1_b);
            f(format!("res{r}_tproj"), &mut block.tproj);
            f(format!("res{r}_c2_w"), &mut block.c2_w);
            f(format!("res{r}_c2_b"), &mut block.c2_b);
        }
        f("out_w".into(), &mut self.out_w);
        f("out_b".into(), &mut self.out_b);
        if let Some(pos) = &mut self.pos {
            f("pos".into(), pos);
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("conv_in_w".into(), &self.conv_in_w),
            ("conv_in_b".into(), &self.conv_in_b),
            ("conv_nbr_w".into(), &self.conv_nbr_w),
            ("conv_nbr_b".into(), &self.conv_nbr_b),
            ("ln_gain".into(), &self.ln_gain),
            ("ln_off".into(), &self.ln_off),
        ];
        for (r, block) in self.res.iter().enumerate() {
            out.push((format!("res{r}_c1_w"), &block.c1_w));
            out.push((format!("res{r}_c1_b"), &block.c1_b));
            out.push((format!("res{r}_tproj"), &block.tproj));
            out.push((format!("res{r}_c2_w"), &block.c2_w));
            out.push((format!("res{r}_c2_b"), &block.c2_b));
        }
        out.push(("out_w".into(), &self.out_w));
        out.push(("out_b".into(), &self.out_b));
        if let Some(pos) = &self.pos {
            out.push(("pos".into(), pos));
        }
        out
    }

    pub fn add_assign(&mut self, other: &Params) {
        let mut rhs: Vec<&Tensor> = other.named().into_iter().map(|(_, t)| t).collect();
        rhs.reverse();
        self.for_each_mut(|_, t| t.add_assign(rhs.pop().unwrap()));
    }

    /// self += a * other
    pub fn axpy(&mut self, a: f64, other: &Params) {
        let mut rhs: Vec<&Tensor> = other.named().into_iter().map(|(_, t)| t).collect();
        rhs.reverse();
        self.for_each_mut(|_, t| t.axpy(a, rhs.pop().unwrap()));
    }

    pub fn scale_in_place(&mut self, a: f64) {
        self.for_each_mut(|_, t| *t = t.scale(a));
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub cfg: DenoiserConfig,
    pub params: Params,
}

/// Sinusoidal time embedding: component 2m is sin(t / 10000^(2m/d_t)),
/// component 2m+1 is the matching cos.
pub fn time_embedding(t: usize, t_max: usize, d_t: usize) -> Result<Vec<f64>> {
    if d_t == 0 || d_t % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "time embedding dimension {d_t} must be even and positive"
        )));
    }
    if t < 1 || t > t_max {
        return Err(Error::TimestepOutOfRange { t, t_max });
    }
    let mut emb = vec![0.0; d_t];
    for m in 0..d_t / 2 {
        let freq = 10000f64.powf(-(2.0 * m as f64) / d_t as f64);
        emb[2 * m] = (t as f64 * freq).sin();
        emb[2 * m + 1] = (t as f64 * freq).cos();
    }
    Ok(emb)
}

#[derive(Debug, Clone)]
struct ResCache {
    x_in: Tensor,
    act: Tensor,
}

/// Intermediate activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    z_block: Tensor,
    nbr_tensors: Vec<Tensor>,
    block_index: usize,
    h: Tensor,
    ln_stats: LayerNormStats,
    res: Vec<ResCache>,
    trunk_out: Tensor,
    temb: Vec<f64>,
}

impl DenoiserModel {
    pub fn new(cfg: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        let c = cfg.channels;
        let shape = cfg.block_shape();
        let conv_fan = (c * KERNEL * KERNEL) as f64;
        let conv_scale = 1.0 / conv_fan.sqrt();
        let conv = |rng: &mut Rng| -> Result<Tensor> {
            Ok(Tensor::randn(rng, &[c, c, KERNEL, KERNEL])?.scale(conv_scale))
        };
        let mut res = Vec::with_capacity(cfg.r_blocks);
        let mut rng_res = rng.split(1);
        for _ in 0..cfg.r_blocks {
            res.push(ResBlockParams {
                c1_w: conv(&mut rng_res)?,
                c1_b: Tensor::zeros(&[c]),
                tproj: Tensor::randn(&mut rng_res, &[c, cfg.d_t])?
                    .scale(1.0 / (cfg.d_t as f64).sqrt()),
                c2_w: conv(&mut rng_res)?,
                c2_b: Tensor::zeros(&[c]),
            });
        }
        let mut rng_emb = rng.split(0);
        let params = Params {
            conv_in_w: conv(&mut rng_emb)?,
            conv_in_b: Tensor::zeros(&[c]),
            conv_nbr_w: conv(&mut rng_emb)?,
            conv_nbr_b: Tensor::zeros(&[c]),
            ln_gain: Tensor::full(&shape, 1.0),
            ln_off: Tensor::zeros(&shape),
            res,
            // Zero output conv so the initial noise estimate is zero.
            out_w: Tensor::zeros(&[c, c, KERNEL, KERNEL]),
            out_b: Tensor::zeros(&[c]),
            pos: if cfg.pos_enabled {
                Some(Tensor::randn(&mut rng.split(2), &[cfg.b, c])?.scale(0.01))
            } else {
                None
            },
        };
        Ok(DenoiserModel { cfg, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    fn check_inputs(
        &self,
        z_block: &Tensor,
        neighbors: &[Vec<f64>],
        i: usize,
        prev: Option<&Tensor>,
    ) -> Result<()> {
        if z_block.shape() != self.cfg.block_shape() {
            return Err(Error::ShapeMismatch(format!(
                "block {:?} vs model {:?}",
                z_block.shape(),
                self.cfg.block_shape()
            )));
        }
        if i >= self.cfg.b {
            return Err(Error::InvalidArgument(format!(
                "block index {i} out of range for b={}",
                self.cfg.b
            )));
        }
        let block_dim = z_block.numel();
        for row in neighbors {
            if row.len() != block_dim {
                return Err(Error::ShapeMismatch(format!(
                    "neighbor row length {} vs block dim {block_dim}",
                    row.len()
                )));
            }
        }
        match self.cfg.cond_mode {
            CondMode::NoRag => {
                if !neighbors.is_empty() {
                    return Err(Error::InvalidArgument(
                        "NoRag model given retrieved neighbors".into(),
                    ));
                }
                if prev.is_some() {
                    return Err(Error::InvalidArgument(
                        "NoRag model given a previous block".into(),
                    ));
                }
            }
            CondMode::Rag => {
                if neighbors.is_empty() {
                    return Err(Error::InvalidArgument(
                        "Rag model requires at least one neighbor".into(),
                    ));
                }
                if prev.is_some() {
                    return Err(Error::InvalidArgument(
                        "previous-block conditioning requires RagPlusPrev mode".into(),
                    ));
                }
            }
            CondMode::RagPlusPrev => {
                if neighbors.is_empty() {
                    return Err(Error::InvalidArgument(
                        "RagPlusPrev model requires at least one neighbor".into(),
                    ));
                }
                let prev = prev.ok_or_else(|| {
                    Error::InvalidArgument(
                        "RagPlusPrev model requires a previous block (zeros for block 0)".into(),
                    )
                })?;
                if prev.shape() != self.cfg.block_shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "previous block {:?} vs model {:?}",
                        prev.shape(),
                        self.cfg.block_shape()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Conditioned, layer-normalized embedding of a block (the trunk input).
    pub fn embed_condition(
        &self,
        z_block: &Tensor,
        neighbors: &[Vec<f64>],
        i: usize,
        prev: Option<&Tensor>,
    ) -> Result<Tensor> {
        self.check_inputs(z_block, neighbors, i, prev)?;
        let (e, _, _) = self.embed_condition_inner(z_block, neighbors, i, prev)?;
        Ok(e)
    }

    fn embed_condition_inner(
        &self,
        z_block: &Tensor,
        neighbors: &[Vec<f64>],
        i: usize,
        prev: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor, Vec<Tensor>)> {
        let p = &self.params;
        let mut h = z_block.add(&conv2d(z_block, &p.conv_in_w, &p.conv_in_b)?)?;
        let mut nbr_tensors: Vec<Tensor> = neighbors
            .iter()
            .map(|row| Tensor::from_vec(&self.cfg.block_shape(), row.clone()))
            .collect::<Result<_>>()?;
        if let Some(prev) = prev {
            nbr_tensors.push(prev.clone());
        }
        if !nbr_tensors.is_empty() {
            let mut mean = Tensor::zeros(&self.cfg.block_shape());
            for nbr in &nbr_tensors {
                mean.add_assign(&conv2d(nbr, &p.conv_nbr_w, &p.conv_nbr_b)?);
            }
            h.axpy(1.0, &mean.scale(1.0 / nbr_tensors.len() as f64));
        }
        if let Some(pos) = &p.pos {
            let (bh, bw) = (self.cfg.block_h, self.cfg.block_w);
            for c in 0..self.cfg.channels {
                let v = pos.get(&[i, c]);
                for y in 0..bh {
                    for x in 0..bw {
                        let cur = h.get(&[c, y, x]);
                        h.set(&[c, y, x], cur + v);
                    }
                }
            }
        }
        let (e, _stats) = layer_norm(&h, &p.ln_gain, &p.ln_off, LN_EPS)?;
        Ok((e, h, nbr_tensors))
    }

    pub fn predict_noise(
        &self,
        z_block: &Tensor,
        t: usize,
        neighbors: &[Vec<f64>],
        i: usize,
        prev: Option<&Tensor>,
    ) -> Result<Tensor> {
        Ok(self.forward_cached(z_block, t, neighbors, i, prev)?.0)
    }

    /// Forward pass recording everything the backward pass needs.
    pub fn forward_cached(
        &self,
        z_block: &Tensor,
        t: usize,
        neighbors: &[Vec<f64>],
        i: usize,
        prev: Option<&Tensor>,
    ) -> Result<(Tensor, ForwardCache)> {
        self.check_inputs(z_block, neighbors, i, prev)?;
        let temb = time_embedding(t, self.cfg.t_max, self.cfg.d_t)?;
        let p = &self.params;
        let (e, h, nbr_tensors) = self.embed_condition_inner(z_block, neighbors, i, prev)?;
        let (_, ln_stats) = layer_norm(&h, &p.ln_gain, &p.ln_off, LN_EPS)?;
        let mut x = e;
        let mut res_cache = Vec::with_capacity(p.res.len());
        let (bh, bw) = (self.cfg.block_h, self.cfg.block_w);
        for block in &p.res {
            let mut u = conv2d(&x, &block.c1_w, &block.c1_b)?;
            for c in 0..self.cfg.channels {
                let shift: f64 = (0..self.cfg.d_t)
                    .map(|m| block.tproj.get(&[c, m]) * temb[m])
                    .sum();
                for y in 0..bh {
                    for xx in 0..bw {
                        let cur = u.get(&[c, y, xx]);
                        u.set(&[c, y, xx], cur + shift);
                    }
                }
            }
            let act = u.map(f64::tanh);
            let v = conv2d(&act, &block.c2_w, &block.c2_b)?;
            let x_next = x.add(&v)?;
            res_cache.push(ResCache { x_in: x, act });
            x = x_next;
        }
        let out = conv2d(&x, &p.out_w, &p.out_b)?;
        let cache = ForwardCache {
            z_block: z_block.clone(),
            nbr_tensors,
            block_index: i,
            h,
            ln_stats,
            res: res_cache,
            trunk_out: x,
            temb,
        };
        Ok((out, cache))
    }

    /// Accumulate exact reverse-mode gradients into `tape` given the upstream
    /// gradient of the scalar loss w.r.t. the network output.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Tensor, tape: &mut GradientTape) {
        let p = &self.params;
        let (g_trunk, g_ow, g_ob) = conv2d_grads(&cache.trunk_out, &p.out_w, grad_out);
        tape.out_w.add_assign(&g_ow);
        tape.out_b.add_assign(&g_ob);
        let mut g_x = g_trunk;
        for (r, (block, rc)) in p.res.iter().zip(&cache.res).enumerate().rev() {
            // x_next = x_in + conv2(tanh(conv1(x_in) + shift))
            let (g_act, g_c2w, g_c2b) = conv2d_grads(&rc.act, &block.c2_w, &g_x);
            tape.res[r].c2_w.add_assign(&g_c2w);
            tape.res[r].c2_b.add_assign(&g_c2b);
            let g_u = g_act.zip(&rc.act, |g, a| g * (1.0 - a * a)).unwrap();
            let (bh, bw) = (self.cfg.block_h, self.cfg.block_w);
            for c in 0..self.cfg.channels {
                let mut spatial_sum = 0.0;
                for y in 0..bh {
                    for x in 0..bw {
                        spatial_sum += g_u.get(&[c, y, x]);
                    }
                }
                for m in 0..self.cfg.d_t {
                    let cur = tape.res[r].tproj.get(&[c, m]);
                    tape.res[r]
                        .tproj
                        .set(&[c, m], cur + spatial_sum * cache.temb[m]);
                }
            }
            let (g_xin_conv, g_c1w, g_c1b) = conv2d_grads(&rc.x_in, &block.c1_w, &g_u);
            tape.res[r].c1_w.add_assign(&g_c1w);
            tape.res[r].c1_b.add_assign(&g_c1b);
            g_x.add_assign(&g_xin_conv);
        }
        // g_x is now the gradient on the layer-norm output.
        let (g_h, g_gain, g_off) = layer_norm_grads(&cache.h, &p.ln_gain, cache.ln_stats, &g_x);
        tape.ln_gain.add_assign(&g_gain);
        tape.ln_off.add_assign(&g_off);
        if let Some(pos_tape) = &mut tape.pos {
            let (bh, bw) = (self.cfg.block_h, self.cfg.block_w);
            for c in 0..self.cfg.channels {
                let mut acc = 0.0;
                for y in 0..bh {
                    for x in 0..bw {
                        acc += g_h.get(&[c, y, x]);
                    }
                }
                let cur = pos_tape.get(&[cache.block_index, c]);
                pos_tape.set(&[cache.block_index, c], cur + acc);
            }
        }
        let (_, g_iw, g_ib) = conv2d_grads(&cache.z_block, &p.conv_in_w, &g_h);
        tape.conv_in_w.add_assign(&g_iw);
        tape.conv_in_b.add_assign(&g_ib);
        if !cache.nbr_tensors.is_empty() {
            let g_nbr = g_h.scale(1.0 / cache.nbr_tensors.len() as f64);
            for nbr in &cache.nbr_tensors {
                let (_, g_nw, g_nb) = conv2d_grads(nbr, &p.conv_nbr_w, &g_nbr);
                tape.conv_nbr_w.add_assign(&g_nw);
                tape.conv_nbr_b.add_assign(&g_nb);
            }
        }
    }

    pub fn zero_tape(&self) -> GradientTape {
        self.params.zeros_like()
    }

    pub fn sgd_step(&mut self, tape: &GradientTape, step_size: f64) {
        self.params.axpy(-step_size, tape);
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        for (name, tensor) in self.params.named() {
            io::write_tensor(&dir.join(format!("{name}.rsslt")), tensor)?;
        }
        let mut m = Manifest::new();
        m.insert("channels".into(), self.cfg.channels.to_string());
        m.insert("block_h".into(), self.cfg.block_h.to_string());
        m.insert("block_w".into(), self.cfg.block_w.to_string());
        m.insert("r_blocks".into(), self.cfg.r_blocks.to_string());
        m.insert("d_t".into(), self.cfg.d_t.to_string());
        m.insert("t_max".into(), self.cfg.t_max.to_string());
        m.insert("b".into(), self.cfg.b.to_string());
        m.insert("k".into(), self.cfg.k.to_string());
        m.insert("cond_mode".into(), self.cfg.cond_mode.as_str().into());
        m.insert("pos_enabled".into(), self.cfg.pos_enabled.to_string());
        io::write_manifest(&dir.join("manifest.txt"), &m)
    }

    pub fn load(dir: &Path) -> Result<DenoiserModel> {
        let manifest_path = dir.join("manifest.txt");
        let m = io::read_manifest(&manifest_path)?;
        let cfg = DenoiserConfig {
            channels: io::manifest_parse(&m, "channels", &manifest_path)?,
            block_h: io::manifest_parse(&m, "block_h", &manifest_path)?,
            block_w: io::manifest_parse(&m, "block_w", &manifest_path)?,
            r_blocks: io::manifest_parse(&m, "r_blocks", &manifest_path)?,
            d_t: io::manifest_parse(&m, "d_t", &manifest_path)?,
            t_max: io::manifest_parse(&m, "t_max", &manifest_path)?,
            b: io::manifest_parse(&m, "b", &manifest_path)?,
            k: io::manifest_parse(&m, "k", &manifest_path)?,
            cond_mode: CondMode::parse(io::manifest_get(&m, "cond_mode", &manifest_path)?)?,
            pos_enabled: io::manifest_parse(&m, "pos_enabled", &manifest_path)?,
        };
        let mut model = DenoiserModel::new(cfg, &mut Rng::new(0))?;
        let mut missing = Vec::new();
        model.params.for_each_mut(|name, tensor| {
            match io::read_tensor(&dir.join(format!("{name}.rsslt"))) {
                Ok(t) => *tensor = t,
                Err(_) => missing.push(name),
            }
        });
        if !missing.is_empty() {
            return Err(Error::BadFormat {
                path: dir.display().to_string(),
                reason: format!("missing parameter files: {missing:?}"),
            });
        }
        Ok(model)
    }
}
