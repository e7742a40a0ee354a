//! Toy dataset generation, the Fréchet-distance proxy metric, and the
//! ablation harness that compares model variants by that metric.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::blocks::BlockLayout;
use crate::codec::{train_codec, CodecModel, CodecTrainConfig};
use crate::config::RunConfig;
use crate::denoiser::{DenoiserConfig, DenoiserModel};
use crate::error::{Error, Result};
use crate::retrieval::build_database;
use crate::rng::Rng;
use crate::sampler::{sample, SampleConfig};
use crate::schedule::build_schedule;
use crate::tensor::Tensor;
use crate::trainer::{train, TrainConfig};

const BACKGROUND: f64 = 0.1;
const FOREGROUND: f64 = 0.9;
/// Ridge added to both covariances before the matrix square root.
pub const FRECHET_RIDGE: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Toy datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Discs,
    Gradients,
    Stripes,
}

impl Pattern {
    pub fn as_str(&self) -> &'static str {
        match self {
            Pattern::Discs => "discs",
            Pattern::Gradients => "gradients",
            Pattern::Stripes => "stripes",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "discs" => Ok(Pattern::Discs),
            "gradients" => Ok(Pattern::Gradients),
            "stripes" => Ok(Pattern::Stripes),
            other => Err(Error::InvalidArgument(format!(
                "unknown pattern `{other}` (expected discs, gradients, or stripes)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToySpec {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub pattern: Pattern,
    pub seed: u64,
    /// Disc radius range in pixels (Discs family only).
    pub radius_min: f64,
    pub radius_max: f64,
}

impl ToySpec {
    /// Default radius range scales with the image so discs always span
    /// several blocks of a 2x2 or 3x3 grid.
    pub fn new(pattern: Pattern, n: usize, c: usize, h: usize, w: usize, seed: u64) -> Self {
        let side = h.min(w) as f64;
        ToySpec {
            n,
            c,
            h,
            w,
            pattern,
            seed,
            radius_min: 0.20 * side,
            radius_max: 0.32 * side,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::InvalidArgument("toy spec dimensions must be positive".into()));
        }
        let side = self.h.min(self.w) as f64;
        if !(0.0..=self.radius_max).contains(&self.radius_min) || self.radius_max > side / 2.0 {
            return Err(Error::InvalidArgument(format!(
                "disc radius range [{}, {}] must satisfy 0 <= min <= max <= {}",
                self.radius_min,
                self.radius_max,
                side / 2.0
            )));
        }
        Ok(())
    }
}

/// Disc parameters (center y, center x, radius) drawn for image `idx`.
/// Exposed so the pixel-count oracle can check against the exact draw.
pub fn disc_params(spec: &ToySpec, idx: usize) -> (f64, f64, f64) {
    let mut rng = Rng::new(spec.seed).split(idx as u64);
    let r = spec.radius_min + rng.next_f64() * (spec.radius_max - spec.radius_min);
    let cy = r + rng.next_f64() * (spec.h as f64 - 2.0 * r);
    let cx = r + rng.next_f64() * (spec.w as f64 - 2.0 * r);
    (cy, cx, r)
}

fn disc_image(spec: &ToySpec, idx: usize) -> Tensor {
    let (cy, cx, r) = disc_params(spec, idx);
    let mut img = Tensor::full(&[spec.c, spec.h, spec.w], BACKGROUND);
    for y in 0..spec.h {
        for x in 0..spec.w {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            if dy * dy + dx * dx <= r * r {
                for ch in 0..spec.c {
                    img.set(&[ch, y, x], FOREGROUND);
                }
            }
        }
    }
    img
}

fn gradient_image(spec: &ToySpec, idx: usize) -> Tensor {
    let mut rng = Rng::new(spec.seed).split(idx as u64);
    let mut img = Tensor::zeros(&[spec.c, spec.h, spec.w]);
    for ch in 0..spec.c {
        let base = rng.next_f64();
        let gy = 2.0 * rng.next_f64() - 1.0;
        let gx = 2.0 * rng.next_f64() - 1.0;
        let hs = (spec.h.max(2) - 1) as f64;
        let ws = (spec.w.max(2) - 1) as f64;
        for y in 0..spec.h {
            for x in 0..spec.w {
                let v = base + gy * (y as f64 / hs - 0.5) + gx * (x as f64 / ws - 0.5);
                img.set(&[ch, y, x], v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

fn stripe_image(spec: &ToySpec, idx: usize) -> Tensor {
    let mut rng = Rng::new(spec.seed).split(idx as u64);
    let freq = (2 + rng.next_below(4)) as f64;
    let phase = rng.next_f64();
    let orient = rng.next_below(3);
    let mut img = Tensor::zeros(&[spec.c, spec.h, spec.w]);
    let side = spec.h.max(spec.w) as f64;
    for y in 0..spec.h {
        for x in 0..spec.w {
            let proj = match orient {
                0 => x as f64,
                1 => y as f64,
                _ => (x + y) as f64 / 2.0,
            };
            let v = 0.5 + 0.4 * (std::f64::consts::TAU * (freq * proj / side + phase)).sin();
            for ch in 0..spec.c {
                img.set(&[ch, y, x], v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Deterministic under `spec.seed`; every pixel lies in [0, 1].
pub fn gen_toy_dataset(spec: &ToySpec) -> Result<Vec<Tensor>> {
    spec.validate()?;
    Ok((0..spec.n)
        .map(|idx| match spec.pattern {
            Pattern::Discs => disc_image(spec, idx),
            Pattern::Gradients => gradient_image(spec, idx),
            Pattern::Stripes => stripe_image(spec, idx),
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Fréchet proxy
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FrechetStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FrechetStats {
    /// Fit mean and (population) covariance. Requires at least dim+1
    /// vectors so the covariance is not trivially rank-deficient.
    pub fn fit(features: &[Vec<f64>]) -> Result<FrechetStats> {
        let n = features.len();
        if n == 0 {
            return Err(Error::EmptyInput("feature set".into()));
        }
        let dim = features[0].len();
        if features.iter().any(|f| f.len() != dim) {
            return Err(Error::ShapeMismatch("feature vectors must share a length".into()));
        }
        if n < dim + 1 {
            return Err(Error::InvalidArgument(format!(
                "need at least dim+1 = {} feature vectors, got {n}",
                dim + 1
            )));
        }
        let mut mean = DVector::<f64>::zeros(dim);
        for f in features {
            for (i, v) in f.iter().enumerate() {
                mean[i] += v;
            }
        }
        mean /= n as f64;
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        for f in features {
            let d = DVector::from_iterator(dim, f.iter().copied()) - &mean;
            cov += &d * d.transpose();
        }
        cov /= n as f64;
        // Enforce exact symmetry against accumulated rounding.
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(FrechetStats { mean, cov })
    }
}

/// Symmetric PSD square root via eigendecomposition, with negative
/// eigenvalues (numerical noise) clamped to zero.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let sqrt_vals = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * sqrt_vals * eig.eigenvectors.transpose()
}

/// d^2 = |mu1-mu2|^2 + Tr(S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2}),
/// after adding `FRECHET_RIDGE` to both diagonals. The two argument slots
/// are put in a canonical order first, so swapping them is bit-identical.
pub fn frechet_from_stats(a: &FrechetStats, b: &FrechetStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::ShapeMismatch("feature dimensions differ".into()));
    }
    let (a, b) = if canonical_le(a, b) { (a, b) } else { (b, a) };
    let dim = a.mean.len();
    let ridge = DMatrix::<f64>::identity(dim, dim) * FRECHET_RIDGE;
    let s1 = &a.cov + &ridge;
    let s2 = &b.cov + &ridge;
    let root1 = sym_sqrt(&s1);
    let inner = sym_sqrt(&(&root1 * &s2 * &root1));
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let trace_term = s1.trace() + s2.trace() - 2.0 * inner.trace();
    Ok((mean_term + trace_term).max(0.0))
}

fn canonical_le(a: &FrechetStats, b: &FrechetStats) -> bool {
    let seq = |s: &FrechetStats| -> Vec<f64> {
        s.mean.iter().chain(s.cov.iter()).copied().collect()
    };
    let (sa, sb) = (seq(a), seq(b));
    for (x, y) in sa.iter().zip(&sb) {
        if x != y {
            return x < y;
        }
    }
    true
}

/// Feature vectors are the flattened codec latents of each image.
pub fn features_of(codec: &CodecModel, images: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    images
        .iter()
        .map(|x| Ok(codec.encode(x)?.into_data()))
        .collect()
}

pub fn frechet_proxy(real: &[Tensor], fake: &[Tensor], codec: &CodecModel) -> Result<f64> {
    let stats_r = FrechetStats::fit(&features_of(codec, real)?)?;
    let stats_f = FrechetStats::fit(&features_of(codec, fake)?)?;
    frechet_from_stats(&stats_r, &stats_f)
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    RagVsNoRag,
    PosVsNoPos,
    PrevVsNoPrev,
    QueryZvsZ0,
    BSweep,
}

impl Suite {
    pub fn as_str(&self) -> &'static str {
        match self {
            Suite::RagVsNoRag => "rag_vs_no_rag",
            Suite::PosVsNoPos => "pos_vs_no_pos",
            Suite::PrevVsNoPrev => "prev_vs_no_prev",
            Suite::QueryZvsZ0 => "query_z_vs_z0",
            Suite::BSweep => "b_sweep",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rag_vs_no_rag" => Ok(Suite::RagVsNoRag),
            "pos_vs_no_pos" => Ok(Suite::PosVsNoPos),
            "prev_vs_no_prev" => Ok(Suite::PrevVsNoPrev),
            "query_z_vs_z0" => Ok(Suite::QueryZvsZ0),
            "b_sweep" => Ok(Suite::BSweep),
            other => Err(Error::InvalidArgument(format!(
                "unknown suite `{other}` (expected rag_vs_no_rag, pos_vs_no_pos, \
                 prev_vs_no_prev, query_z_vs_z0, or b_sweep)"
            ))),
        }
    }

    /// (variant name, config overrides) pairs, in report order.
    pub fn variants(&self) -> Vec<(&'static str, Vec<&'static str>)> {
        match self {
            Suite::RagVsNoRag => vec![
                ("rag", vec!["model.cond_mode=rag"]),
                ("no_rag", vec!["model.cond_mode=no_rag"]),
            ],
            Suite::PosVsNoPos => vec![
                ("pos", vec!["model.cond_mode=rag", "model.pos_enabled=true"]),
                ("no_pos", vec!["model.cond_mode=rag", "model.pos_enabled=false"]),
            ],
            Suite::PrevVsNoPrev => vec![
                ("rag_plus_prev", vec!["model.cond_mode=rag_plus_prev"]),
                ("rag", vec!["model.cond_mode=rag"]),
            ],
            Suite::QueryZvsZ0 => vec![
                ("query_z0", vec!["retrieval.query_mode=first_block"]),
                ("query_z", vec!["retrieval.query_mode=full_latent"]),
            ],
            Suite::BSweep => vec![
                ("b4", vec!["blocks.b=4"]),
                ("b9", vec!["blocks.b=9"]),
                ("b16", vec!["blocks.b=16"]),
            ],
        }
    }
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub name: String,
    pub score: f64,
    pub wall_secs: f64,
    pub param_count: usize,
}

/// Build the toy dataset and train the shared codec named by `cfg`.
pub fn prepare_data_and_codec(cfg: &RunConfig) -> Result<(Vec<Tensor>, CodecModel)> {
    let spec = ToySpec::new(
        Pattern::parse(cfg.get("data.pattern"))?,
        cfg.usize_at("data.n")?,
        cfg.usize_at("data.c")?,
        cfg.usize_at("data.h")?,
        cfg.usize_at("data.w")?,
        cfg.u64_at("data.seed")?,
    );
    let data = gen_toy_dataset(&spec)?;
    let codec_cfg = CodecTrainConfig {
        epochs: cfg.usize_at("codec.epochs")?,
        step_size: cfg.f64_at("codec.step")?,
    };
    let (codec, _) = train_codec(
        &data,
        cfg.usize_at("codec.f")?,
        cfg.usize_at("codec.c_latent")?,
        &codec_cfg,
        &mut Rng::new(cfg.u64_at("codec.seed")?),
    )?;
    Ok((data, codec))
}

/// Train one variant end to end (encode, build db, train, sample) and
/// score its samples against the real data with the Fréchet proxy.
pub fn run_variant(
    name: &str,
    cfg: &RunConfig,
    data: &[Tensor],
    codec: &CodecModel,
) -> Result<VariantResult> {
    cfg.validate()?;
    let start = Instant::now();
    let latents: Vec<Tensor> = data
        .iter()
        .map(|x| codec.encode(x))
        .collect::<Result<_>>()?;
    let [lc, lh, lw] = codec.latent_shape();
    let layout = BlockLayout::new(cfg.usize_at("blocks.b")?, lc, lh, lw)?;
    let mode = cfg.cond_mode()?;
    let db = if mode.uses_retrieval() {
        Some(build_database(&latents, layout, cfg.query_mode()?)?)
    } else {
        None
    };
    let schedule = build_schedule(
        cfg.usize_at("schedule.t")?,
        cfg.f64_at("schedule.beta_start")?,
        cfg.f64_at("schedule.beta_end")?,
    )?;
    let dcfg = DenoiserConfig::for_layout(
        &layout,
        cfg.usize_at("model.r")?,
        cfg.usize_at("model.d_t")?,
        schedule.t_max,
        cfg.usize_at("retrieval.k")?,
        mode,
        cfg.bool_at("model.pos_enabled")?,
    );
    let mut model = DenoiserModel::new(dcfg, &mut Rng::new(cfg.u64_at("model.seed")?))?;
    let train_cfg = TrainConfig {
        epochs: cfg.usize_at("train.epochs")?,
        batch: cfg.usize_at("train.batch")?,
        step_size: cfg.f64_at("train.step")?,
        k: cfg.usize_at("retrieval.k")?,
        exclude_self: cfg.bool_at("retrieval.exclude_self")?,
        seed: cfg.u64_at("train.seed")?,
        parallel_blocks: cfg.bool_at("train.parallel")?,
    };
    train(&mut model, &schedule, db.as_ref(), &latents, &train_cfg)?;
    let sample_cfg = SampleConfig {
        n_samples: cfg.usize_at("eval.m")?,
        k: cfg.usize_at("retrieval.k")?,
        seed: cfg.u64_at("sampler.seed")?,
        noise_at_t1: cfg.bool_at("sampler.noise_at_t1")?,
        parallel_blocks: cfg.bool_at("sampler.parallel")?,
    };
    let images = sample(&model, &schedule, db.as_ref(), codec, &layout, &sample_cfg)?;
    let score = frechet_proxy(data, &images, codec)?;
    Ok(VariantResult {
        name: name.to_string(),
        score,
        wall_secs: start.elapsed().as_secs_f64(),
        param_count: model.param_count(),
    })
}

/// Run every variant of a suite from identical seeds on a shared dataset
/// and codec.
pub fn run_ablation(suite: Suite, base: &RunConfig) -> Result<Vec<VariantResult>> {
    base.validate()?;
    let (data, codec) = prepare_data_and_codec(base)?;
    let mut results = Vec::new();
    for (name, overrides) in suite.variants() {
        let mut cfg = base.clone();
        for o in &overrides {
            cfg.apply_override(o)?;
        }
        results.push(run_variant(name, &cfg, &data, &codec)?);
    }
    Ok(results)
}

/// Tab-separated report: variant, score (6 decimals), seconds, param count.
/// Wall time is excluded from determinism comparisons by design; callers
/// wanting byte-stable text should use `report_text_deterministic`.
pub fn report_text(results: &[VariantResult]) -> String {
    let mut out = String::new();
    for r in results {
        out.push_str(&format!(
            "{}\t{:.6}\t{:.3}\t{}\n",
            r.name, r.score, r.wall_secs, r.param_count
        ));
    }
    out
}

/// Same rows as `report_text` with the wall-time column zeroed, so two runs
/// with identical seeds produce byte-identical files.
pub fn report_text_deterministic(results: &[VariantResult]) -> String {
    let mut out = String::new();
    for r in results {
        out.push_str(&format!("{}\t{:.6}\t0.000\t{}\n", r.name, r.score, r.param_count));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_dataset_deterministic_under_seed() {
        for pattern in [Pattern::Discs, Pattern::Gradients, Pattern::Stripes] {
            let spec = ToySpec::new(pattern, 8, 1, 12, 12, 42);
            let a = gen_toy_dataset(&spec).unwrap();
            let b = gen_toy_dataset(&spec).unwrap();
            assert_eq!(a.len(), 8);
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.data(), y.data());
            }
        }
    }

    #[test]
    fn toy_values_in_unit_interval() {
        for pattern in [Pattern::Discs, Pattern::Gradients, Pattern::Stripes] {
            let spec = ToySpec::new(pattern, 16, 2, 12, 10, 3);
            for img in gen_toy_dataset(&spec).unwrap() {
                assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn zero_radius_discs_are_background_only() {
        let mut spec = ToySpec::new(Pattern::Discs, 6, 1, 12, 12, 9);
        spec.radius_min = 0.0;
        spec.radius_max = 0.0;
        for img in gen_toy_dataset(&spec).unwrap() {
            assert!(img.data().iter().all(|&v| v == BACKGROUND));
        }
    }

    #[test]
    fn disc_pixel_count_matches_analytic_area() {
        // Larger canvas so the lattice-point count tracks the area closely.
        let spec = ToySpec::new(Pattern::Discs, 50, 1, 24, 24, 17);
        let data = gen_toy_dataset(&spec).unwrap();
        for (idx, img) in data.iter().enumerate() {
            let (_, _, r) = disc_params(&spec, idx);
            let count = img.data().iter().filter(|&&v| v == FOREGROUND).count() as f64;
            let lo = std::f64::consts::PI * (r - 1.0) * (r - 1.0);
            let hi = std::f64::consts::PI * (r + 1.0) * (r + 1.0);
            assert!(
                count >= lo && count <= hi,
                "image {idx}: count {count} outside [{lo:.2}, {hi:.2}] for r={r:.3}"
            );
        }
    }

    #[test]
    fn discs_span_multiple_blocks() {
        // Coherence-sensitive by construction: foreground must cross the
        // 2x2 quadrant boundary in most images.
        let spec = ToySpec::new(Pattern::Discs, 20, 1, 12, 12, 5);
        let data = gen_toy_dataset(&spec).unwrap();
        let mut multi = 0;
        for img in &data {
            let mut quadrants = std::collections::BTreeSet::new();
            for y in 0..12 {
                for x in 0..12 {
                    if img.get(&[0, y, x]) == FOREGROUND {
                        quadrants.insert((y / 6, x / 6));
                    }
                }
            }
            if quadrants.len() > 1 {
                multi += 1;
            }
        }
        assert!(multi >= 10, "only {multi}/20 discs cross a block boundary");
    }

    #[test]
    fn sym_sqrt_squares_back() {
        let mut rng = Rng::new(21);
        for _ in 0..10 {
            let dim = 6;
            let a = DMatrix::from_fn(dim, dim, |_, _| rng.next_normal());
            let m = &a * a.transpose() + DMatrix::identity(dim, dim) * 0.1;
            let root = sym_sqrt(&m);
            let err = (&root * &root - &m).norm() / m.norm();
            assert!(err < 1e-8, "relative Frobenius error {err}");
        }
    }

    #[test]
    fn frechet_identical_sets_is_zero() {
        let mut rng = Rng::new(31);
        let images: Vec<Tensor> = (0..24)
            .map(|_| Tensor::randn(&mut rng, &[1, 3, 3]).unwrap())
            .collect();
        let codec = CodecModel::identity(1, 3, 3);
        let d = frechet_proxy(&images, &images, &codec).unwrap();
        assert!(d < 1e-8, "distance {d}");
    }

    #[test]
    fn frechet_swapped_arguments_bit_identical() {
        let mut rng = Rng::new(37);
        let a: Vec<Tensor> = (0..20)
            .map(|_| Tensor::randn(&mut rng, &[1, 3, 3]).unwrap())
            .collect();
        let b: Vec<Tensor> = (0..20)
            .map(|_| Tensor::randn(&mut rng, &[1, 3, 3]).unwrap().scale(1.5))
            .collect();
        let codec = CodecModel::identity(1, 3, 3);
        let ab = frechet_proxy(&a, &b, &codec).unwrap();
        let ba = frechet_proxy(&b, &a, &codec).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab.to_bits(), ba.to_bits());
    }

    #[test]
    fn frechet_one_dimensional_closed_form() {
        // N(0,1) vs N(3,1): d^2 = (3-0)^2 + (1-1)^2 = 9.
        let mut rng = Rng::new(41);
        let n = 100_000;
        let a: Vec<Tensor> = (0..n)
            .map(|_| Tensor::from_vec(&[1, 1, 1], vec![rng.next_normal()]).unwrap())
            .collect();
        let b: Vec<Tensor> = (0..n)
            .map(|_| Tensor::from_vec(&[1, 1, 1], vec![3.0 + rng.next_normal()]).unwrap())
            .collect();
        let codec = CodecModel::identity(1, 1, 1);
        let d = frechet_proxy(&a, &b, &codec).unwrap();
        assert!((d - 9.0).abs() / 9.0 < 0.05, "distance {d}, expected ~9");
    }

    #[test]
    fn frechet_rejects_small_sets() {
        let mut rng = Rng::new(43);
        // dim = 9 but only 5 images: covariance is too rank-deficient.
        let few: Vec<Tensor> = (0..5)
            .map(|_| Tensor::randn(&mut rng, &[1, 3, 3]).unwrap())
            .collect();
        let codec = CodecModel::identity(1, 3, 3);
        let err = frechet_proxy(&few, &few, &codec).unwrap_err();
        assert!(err.to_string().contains("dim+1"), "{err}");
    }

    #[test]
    fn suite_roundtrip_and_coverage() {
        let suites = [
            Suite::RagVsNoRag,
            Suite::PosVsNoPos,
            Suite::PrevVsNoPrev,
            Suite::QueryZvsZ0,
            Suite::BSweep,
        ];
        for s in suites {
            assert_eq!(Suite::parse(s.as_str()).unwrap(), s);
            assert!(s.variants().len() >= 2);
        }
        assert_eq!(Suite::BSweep.variants().len(), 3);
    }

    fn tiny_ablation_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        for o in [
            "data.n=24",
            "data.h=4",
            "data.w=4",
            "codec.c_latent=2",
            "codec.epochs=40",
            "schedule.t=5",
            "model.r=1",
            "model.d_t=8",
            "train.epochs=1",
            "retrieval.k=2",
            "eval.m=12",
            "sampler.n_samples=12",
        ] {
            cfg.apply_override(o).unwrap();
        }
        cfg
    }

    #[test]
    fn ablation_report_deterministic_and_well_formed() {
        let cfg = tiny_ablation_cfg();
        let r1 = run_ablation(Suite::RagVsNoRag, &cfg).unwrap();
        let r2 = run_ablation(Suite::RagVsNoRag, &cfg).unwrap();
        assert_eq!(
            report_text_deterministic(&r1),
            report_text_deterministic(&r2)
        );
        assert_eq!(r1.len(), 2);
        assert_eq!(r1[0].name, "rag");
        assert_eq!(r1[1].name, "no_rag");
        for r in &r1 {
            assert!(r.score.is_finite() && r.score >= 0.0);
            assert!(r.param_count > 0);
        }
        let text = report_text(&r1);
        for line in text.lines() {
            assert_eq!(line.split('\t').count(), 4, "bad report line: {line}");
        }
    }
}
