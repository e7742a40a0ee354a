//! File-based pipeline stages behind the CLI commands. Every stage reads
//! and writes only inside its run directory; stages communicate through
//! RSSL-T tensors and plain-text manifests.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::blocks::BlockLayout;
use crate::codec::{train_codec, CodecModel, CodecTrainConfig};
use crate::config::RunConfig;
use crate::denoiser::{DenoiserConfig, DenoiserModel};
use crate::error::{Error, Result};
use crate::eval::{
    frechet_proxy, gen_toy_dataset, report_text, run_ablation, Pattern, Suite, ToySpec,
    FRECHET_RIDGE,
};
use crate::io;
use crate::retrieval::{build_database, RetrievalDB};
use crate::rng::Rng;
use crate::sampler::{sample, SampleConfig};
use crate::schedule::build_schedule;
use crate::tensor::Tensor;
use crate::trainer::{train, TrainConfig};

fn require(path: &Path, artifact: &str, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            artifact: format!("{artifact} ({})", path.display()),
            producer: producer.to_string(),
        })
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn data_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("data")
}

fn codec_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("codec")
}

fn db_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("db")
}

fn model_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("model")
}

fn samples_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("samples")
}

/// `gen-data`: write the toy dataset as data/img_NNNN.rsslt + manifest.
pub fn cmd_gen_data(run_dir: &Path, cfg: &RunConfig) -> Result<()> {
    let dir = data_dir(run_dir);
    ensure_dir(&dir)?;
    let spec = ToySpec::new(
        Pattern::parse(cfg.get("data.pattern"))?,
        cfg.usize_at("data.n")?,
        cfg.usize_at("data.c")?,
        cfg.usize_at("data.h")?,
        cfg.usize_at("data.w")?,
        cfg.u64_at("data.seed")?,
    );
    let data = gen_toy_dataset(&spec)?;
    for (i, img) in data.iter().enumerate() {
        io::write_tensor(&dir.join(format!("img_{i:04}.rsslt")), img)?;
    }
    let mut m = io::Manifest::new();
    m.insert("n".into(), spec.n.to_string());
    m.insert("pattern".into(), spec.pattern.as_str().into());
    m.insert("seed".into(), spec.seed.to_string());
    io::write_manifest(&dir.join("manifest.txt"), &m)
}

/// Load the dataset written by `gen-data`.
pub fn load_data(run_dir: &Path) -> Result<Vec<Tensor>> {
    let dir = data_dir(run_dir);
    let manifest_path = dir.join("manifest.txt");
    require(&manifest_path, "dataset manifest", "gen-data")?;
    let m = io::read_manifest(&manifest_path)?;
    let n: usize = io::manifest_parse(&m, "n", &manifest_path)?;
    (0..n)
        .map(|i| io::read_tensor(&dir.join(format!("img_{i:04}.rsslt"))))
        .collect()
}

/// `train-codec`: fit the patch autoencoder on the dataset and save it.
pub fn cmd_train_codec(run_dir: &Path, cfg: &RunConfig) -> Result<()> {
    let data = load_data(run_dir)?;
    let codec_cfg = CodecTrainConfig {
        epochs: cfg.usize_at("codec.epochs")?,
        step_size: cfg.f64_at("codec.step")?,
    };
    let (codec, losses) = train_codec(
        &data,
        cfg.usize_at("codec.f")?,
        cfg.usize_at("codec.c_latent")?,
        &codec_cfg,
        &mut Rng::new(cfg.u64_at("codec.seed")?),
    )?;
    codec.save(&codec_dir(run_dir))?;
    let trace: String = losses
        .iter()
        .enumerate()
        .map(|(e, l)| format!("{e}\t{l:.12e}\n"))
        .collect();
    write_text(&codec_dir(run_dir).join("loss_trace.txt"), &trace)
}

pub fn load_codec(run_dir: &Path) -> Result<CodecModel> {
    let dir = codec_dir(run_dir);
    require(&dir.join("manifest.txt"), "codec checkpoint", "train-codec")?;
    CodecModel::load(&dir)
}

fn encode_all(codec: &CodecModel, data: &[Tensor]) -> Result<Vec<Tensor>> {
    data.iter().map(|x| codec.encode(x)).collect()
}

fn layout_for(cfg: &RunConfig, codec: &CodecModel) -> Result<BlockLayout> {
    let [lc, lh, lw] = codec.latent_shape();
    BlockLayout::new(cfg.usize_at("blocks.b")?, lc, lh, lw)
}

/// `build-db`: encode the dataset and persist the block-sharded database.
pub fn cmd_build_db(run_dir: &Path, cfg: &RunConfig) -> Result<()> {
    let data = load_data(run_dir)?;
    let codec = load_codec(run_dir)?;
    let latents = encode_all(&codec, &data)?;
    let db = build_database(&latents, layout_for(cfg, &codec)?, cfg.query_mode()?)?;
    db.save(&db_dir(run_dir))
}

pub fn load_db(run_dir: &Path) -> Result<RetrievalDB> {
    let dir = db_dir(run_dir);
    require(&dir.join("manifest.txt"), "retrieval database", "build-db")?;
    RetrievalDB::load(&dir)
}

fn train_config_of(cfg: &RunConfig) -> Result<TrainConfig> {
    Ok(TrainConfig {
        epochs: cfg.usize_at("train.epochs")?,
        batch: cfg.usize_at("train.batch")?,
        step_size: cfg.f64_at("train.step")?,
        k: cfg.usize_at("retrieval.k")?,
        exclude_self: cfg.bool_at("retrieval.exclude_self")?,
        seed: cfg.u64_at("train.seed")?,
        parallel_blocks: cfg.bool_at("train.parallel")?,
    })
}

fn schedule_of(cfg: &RunConfig) -> Result<crate::schedule::NoiseSchedule> {
    build_schedule(
        cfg.usize_at("schedule.t")?,
        cfg.f64_at("schedule.beta_start")?,
        cfg.f64_at("schedule.beta_end")?,
    )
}

/// `train`: fit the denoiser on encoded latents and save the checkpoint
/// plus a per-epoch loss log.
pub fn cmd_train(run_dir: &Path, cfg: &RunConfig) -> Result<()> {
    let data = load_data(run_dir)?;
    let codec = load_codec(run_dir)?;
    let latents = encode_all(&codec, &data)?;
    let mode = cfg.cond_mode()?;
    let db = if mode.uses_retrieval() {
        Some(load_db(run_dir)?)
    } else {
        None
    };
    let layout = layout_for(cfg, &codec)?;
    let schedule = schedule_of(cfg)?;
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
    let report = train(&mut model, &schedule, db.as_ref(), &latents, &train_config_of(cfg)?)?;
    model.save(&model_dir(run_dir))?;
    let log: String = report
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(e, l)| format!("{e}\t{l:.12e}\n"))
        .collect();
    write_text(&model_dir(run_dir).join("train_log.txt"), &log)
}

pub fn load_model(run_dir: &Path) -> Result<DenoiserModel> {
    let dir = model_dir(run_dir);
    require(&dir.join("manifest.txt"), "denoiser checkpoint", "train")?;
    DenoiserModel::load(&dir)
}

/// 8-bit max-min normalized preview: PGM (P5) for one channel, PPM (P6)
/// for three; other channel counts preview channel 0 only.
pub fn write_preview(path: &Path, img: &Tensor) -> Result<()> {
    let [c, h, w] = crate::tensor::dims3(img, "preview image")?;
    let (lo, hi) = img
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let quant = |v: f64| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8;
    let mut bytes: Vec<u8> = Vec::new();
    if c == 3 {
        bytes.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    bytes.push(quant(img.get(&[ch, y, x])));
                }
            }
        }
    } else {
        bytes.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
        for y in 0..h {
            for x in 0..w {
                bytes.push(quant(img.get(&[0, y, x])));
            }
        }
    }
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// `sample`: generate images and write each as RSSL-T plus a preview.
pub fn cmd_sample(run_dir: &Path, cfg: &RunConfig) -> Result<()> {
    let codec = load_codec(run_dir)?;
    let model = load_model(run_dir)?;
    let db = if model.cfg.cond_mode.uses_retrieval() {
        Some(load_db(run_dir)?)
    } else {
        None
    };
    let layout = layout_for(cfg, &codec)?;
    let schedule = schedule_of(cfg)?;
    let sample_cfg = SampleConfig {
        n_samples: cfg.usize_at("sampler.n_samples")?,
        k: cfg.usize_at("retrieval.k")?,
        seed: cfg.u64_at("sampler.seed")?,
        noise_at_t1: cfg.bool_at("sampler.noise_at_t1")?,
        parallel_blocks: cfg.bool_at("sampler.parallel")?,
    };
    let images = sample(&model, &schedule, db.as_ref(), &codec, &layout, &sample_cfg)?;
    let dir = samples_dir(run_dir);
    ensure_dir(&dir)?;
    let ext = if images.first().map(|x| x.shape()[0]) == Some(3) {
        "ppm"
    } else {
        "pgm"
    };
    for (i, img) in images.iter().enumerate() {
        io::write_tensor(&dir.join(format!("img_{i:04}.rsslt")), img)?;
        write_preview(&dir.join(format!("img_{i:04}.{ext}")), img)?;
    }
    let mut m = io::Manifest::new();
    m.insert("n".into(), images.len().to_string());
    io::write_manifest(&dir.join("manifest.txt"), &m)
}

pub fn load_samples(run_dir: &Path) -> Result<Vec<Tensor>> {
    let dir = samples_dir(run_dir);
    let manifest_path = dir.join("manifest.txt");
    require(&manifest_path, "generated samples", "sample")?;
    let m = io::read_manifest(&manifest_path)?;
    let n: usize = io::manifest_parse(&m, "n", &manifest_path)?;
    (0..n)
        .map(|i| io::read_tensor(&dir.join(format!("img_{i:04}.rsslt"))))
        .collect()
}

/// `eval`: score generated samples against the dataset; write eval.txt.
pub fn cmd_eval(run_dir: &Path, _cfg: &RunConfig) -> Result<f64> {
    let data = load_data(run_dir)?;
    let codec = load_codec(run_dir)?;
    let samples = load_samples(run_dir)?;
    let score = frechet_proxy(&data, &samples, &codec)?;
    write_text(
        &run_dir.join("eval.txt"),
        &format!("frechet_proxy={score:.6}\nridge={FRECHET_RIDGE:e}\n"),
    )?;
    Ok(score)
}

/// `ablate`: run a suite in memory and write the tab-separated report.
pub fn cmd_ablate(run_dir: &Path, cfg: &RunConfig, suite: Suite) -> Result<()> {
    ensure_dir(run_dir)?;
    let results = run_ablation(suite, cfg)?;
    write_text(
        &run_dir.join(format!("report_{}.txt", suite.as_str())),
        &report_text(&results),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
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
    fn full_pipeline_on_tiny_config() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path();
        let cfg = tiny_cfg();
        cfg.validate().unwrap();
        cmd_gen_data(run, &cfg).unwrap();
        cmd_train_codec(run, &cfg).unwrap();
        cmd_build_db(run, &cfg).unwrap();
        cmd_train(run, &cfg).unwrap();
        cmd_sample(run, &cfg).unwrap();
        let score = cmd_eval(run, &cfg).unwrap();
        assert!(score.is_finite() && score >= 0.0);
        assert!(run.join("eval.txt").exists());
        assert!(run.join("samples/img_0000.pgm").exists());
    }

    #[test]
    fn missing_checkpoint_names_producer() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path();
        let cfg = tiny_cfg();
        cmd_gen_data(run, &cfg).unwrap();
        let err = cmd_build_db(run, &cfg).unwrap_err().to_string();
        assert!(err.contains("codec") && err.contains("train-codec"), "{err}");
        let err = cmd_sample(run, &cfg).unwrap_err().to_string();
        assert!(err.contains("train-codec"), "{err}");
    }

    #[test]
    fn preview_is_valid_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_vec(&[1, 2, 2], vec![0.0, 0.5, 0.75, 1.0]).unwrap();
        let path = dir.path().join("p.pgm");
        write_preview(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(bytes.len(), b"P5\n2 2\n255\n".len() + 4);
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 128, 191, 255]);
    }

    #[test]
    fn rerun_is_byte_identical() {
        let cfg = tiny_cfg();
        let mut payloads: Vec<Vec<u8>> = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().unwrap();
            let run = dir.path();
            cmd_gen_data(run, &cfg).unwrap();
            cmd_train_codec(run, &cfg).unwrap();
            cmd_build_db(run, &cfg).unwrap();
            cmd_train(run, &cfg).unwrap();
            cmd_sample(run, &cfg).unwrap();
            cmd_eval(run, &cfg).unwrap();
            let mut all = Vec::new();
            for rel in [
                "codec/enc_w.rsslt",
                "model/conv_in_w.rsslt",
                "model/train_log.txt",
                "samples/img_0000.rsslt",
                "eval.txt",
            ] {
                all.extend(std::fs::read(run.join(rel)).unwrap());
            }
            payloads.push(all);
        }
        assert_eq!(payloads[0], payloads[1]);
    }
}
