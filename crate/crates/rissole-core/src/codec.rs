//! Trainable encoder/decoder between image space and latent space.
//!
//! The codec is a linear map per non-overlapping f x f patch: each patch
//! vector (length c*f*f, channel-major) is projected to c' latent channels
//! and back. The latent keeps a 2D spatial layout of h/f x w/f positions so
//! it can be partitioned into blocks downstream. The closed-form optimum is
//! patchwise PCA, which the tests use as an oracle.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{self, Manifest};
use crate::rng::Rng;
use crate::tensor::{dims3, Tensor};

#[derive(Debug, Clone)]
pub struct CodecModel {
    pub f: usize,
    pub c: usize,
    pub c_latent: usize,
    pub h: usize,
    pub w: usize,
    /// c_latent x (c*f*f)
    pub enc_w: Tensor,
    /// c_latent
    pub enc_b: Tensor,
    /// (c*f*f) x c_latent
    pub dec_w: Tensor,
    /// c*f*f
    pub dec_b: Tensor,
    /// Mean squared reconstruction error at the end of training, per element.
    pub final_loss: f64,
}

#[derive(Debug, Clone)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub step_size: f64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            epochs: 400,
            step_size: 0.5,
        }
    }
}

impl CodecModel {
    pub fn patch_dim(&self) -> usize {
        self.c * self.f * self.f
    }

    pub fn latent_h(&self) -> usize {
        self.h / self.f
    }

    pub fn latent_w(&self) -> usize {
        self.w / self.f
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.c_latent, self.latent_h(), self.latent_w()]
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.c, self.h, self.w]
    }

    pub fn new(f: usize, c: usize, c_latent: usize, h: usize, w: usize, rng: &mut Rng) -> Result<Self> {
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::InvalidArgument(format!(
                "image {h}x{w} not divisible by factor f={f}"
            )));
        }
        let d = c * f * f;
        let scale = 1.0 / (d as f64).sqrt();
        Ok(CodecModel {
            f,
            c,
            c_latent,
            h,
            w,
            enc_w: Tensor::randn(rng, &[c_latent, d])?.scale(scale),
            enc_b: Tensor::zeros(&[c_latent]),
            dec_w: Tensor::randn(rng, &[d, c_latent])?.scale(1.0 / (c_latent as f64).sqrt()),
            dec_b: Tensor::zeros(&[d]),
            final_loss: f64::NAN,
        })
    }

    /// An exact identity codec; requires f == 1 and c_latent == c.
    pub fn identity(c: usize, h: usize, w: usize) -> Self {
        let mut enc_w = Tensor::zeros(&[c, c]);
        let mut dec_w = Tensor::zeros(&[c, c]);
        for i in 0..c {
            enc_w.set(&[i, i], 1.0);
            dec_w.set(&[i, i], 1.0);
        }
        CodecModel {
            f: 1,
            c,
            c_latent: c,
            h,
            w,
            enc_w,
            enc_b: Tensor::zeros(&[c]),
            dec_w,
            dec_b: Tensor::zeros(&[c]),
            final_loss: 0.0,
        }
    }

    /// Extract the patch vector at latent position (py, px), channel-major.
    fn patch_at(&self, x: &Tensor, py: usize, px: usize, out: &mut [f64]) {
        let mut i = 0;
        for c in 0..self.c {
            for dy in 0..self.f {
                for dx in 0..self.f {
                    out[i] = x.get(&[c, py * self.f + dy, px * self.f + dx]);
                    i += 1;
                }
            }
        }
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let [c, h, w] = dims3(x, "codec input")?;
        if (c, h, w) != (self.c, self.h, self.w) {
            return Err(Error::ShapeMismatch(format!(
                "image {:?} vs codec {}x{}x{}",
                x.shape(),
                self.c,
                self.h,
                self.w
            )));
        }
        let d = self.patch_dim();
        let (lh, lw) = (self.latent_h(), self.latent_w());
        let mut z = Tensor::zeros(&[self.c_latent, lh, lw]);
        let mut patch = vec![0.0; d];
        for py in 0..lh {
            for px in 0..lw {
                self.patch_at(x, py, px, &mut patch);
                for cl in 0..self.c_latent {
                    let row = &self.enc_w.data()[cl * d..(cl + 1) * d];
                    let v: f64 = self.enc_b.data()[cl]
                        + row.iter().zip(&patch).map(|(w, p)| w * p).sum::<f64>();
                    z.set(&[cl, py, px], v);
                }
            }
        }
        Ok(z)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let [cl, lh, lw] = dims3(z, "latent")?;
        if (cl, lh, lw) != (self.c_latent, self.latent_h(), self.latent_w()) {
            return Err(Error::ShapeMismatch(format!(
                "latent {:?} vs codec {:?}",
                z.shape(),
                self.latent_shape()
            )));
        }
        let mut x = Tensor::zeros(&[self.c, self.h, self.w]);
        for py in 0..lh {
            for px in 0..lw {
                let mut i = 0;
                for c in 0..self.c {
                    for dy in 0..self.f {
                        for dx in 0..self.f {
                            let mut v = self.dec_b.data()[i];
                            for l in 0..self.c_latent {
                                v += self.dec_w.data()[i * self.c_latent + l] * z.get(&[l, py, px]);
                            }
                            x.set(&[c, py * self.f + dy, px * self.f + dx], v);
                            i += 1;
                        }
                    }
                }
            }
        }
        Ok(x)
    }

    /// Mean squared reconstruction error per element over a dataset.
    pub fn reconstruction_mse(&self, data: &[Tensor]) -> Result<f64> {
        let mut acc = 0.0;
        let mut count = 0usize;
        for x in data {
            let recon = self.decode(&self.encode(x)?)?;
            acc += recon.sub(x)?.sq_norm();
            count += x.numel();
        }
        Ok(acc / count as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        io::write_tensor(&dir.join("enc_w.rsslt"), &self.enc_w)?;
        io::write_tensor(&dir.join("enc_b.rsslt"), &self.enc_b)?;
        io::write_tensor(&dir.join("dec_w.rsslt"), &self.dec_w)?;
        io::write_tensor(&dir.join("dec_b.rsslt"), &self.dec_b)?;
        let mut m = Manifest::new();
        m.insert("f".into(), self.f.to_string());
        m.insert("c".into(), self.c.to_string());
        m.insert("c_latent".into(), self.c_latent.to_string());
        m.insert("h".into(), self.h.to_string());
        m.insert("w".into(), self.w.to_string());
        m.insert("final_loss".into(), format!("{:e}", self.final_loss));
        io::write_manifest(&dir.join("manifest.txt"), &m)
    }

    pub fn load(dir: &Path) -> Result<CodecModel> {
        let manifest_path = dir.join("manifest.txt");
        let m = io::read_manifest(&manifest_path)?;
        let model = CodecModel {
            f: io::manifest_parse(&m, "f", &manifest_path)?,
            c: io::manifest_parse(&m, "c", &manifest_path)?,
            c_latent: io::manifest_parse(&m, "c_latent", &manifest_path)?,
            h: io::manifest_parse(&m, "h", &manifest_path)?,
            w: io::manifest_parse(&m, "w", &manifest_path)?,
            enc_w: io::read_tensor(&dir.join("enc_w.rsslt"))?,
            enc_b: io::read_tensor(&dir.join("enc_b.rsslt"))?,
            dec_w: io::read_tensor(&dir.join("dec_w.rsslt"))?,
            dec_b: io::read_tensor(&dir.join("dec_b.rsslt"))?,
            final_loss: io::manifest_parse(&m, "final_loss", &manifest_path)?,
        };
        Ok(model)
    }
}

/// Train by full-batch gradient descent on the per-element mean squared
/// reconstruction error. Returns the model and the per-epoch loss trace.
pub fn train_codec(
    data: &[Tensor],
    f: usize,
    c_latent: usize,
    config: &CodecTrainConfig,
    rng: &mut Rng,
) -> Result<(CodecModel, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::EmptyInput("codec training data".into()));
    }
    let [c, h, w] = dims3(&data[0], "codec training image")?;
    for x in data {
        if x.shape() != [c, h, w] {
            return Err(Error::ShapeMismatch(
                "codec training images must share a shape".into(),
            ));
        }
    }
    let mut model = CodecModel::new(f, c, c_latent, h, w, rng)?;
    let d = model.patch_dim();
    let (lh, lw) = (model.latent_h(), model.latent_w());
    let n_patches = data.len() * lh * lw;
    let norm = 1.0 / (n_patches * d) as f64;

    // Patches are fixed; gather them once.
    let mut patches: Vec<Vec<f64>> = Vec::with_capacity(n_patches);
    for x in data {
        for py in 0..lh {
            for px in 0..lw {
                let mut p = vec![0.0; d];
                model.patch_at(x, py, px, &mut p);
                patches.push(p);
            }
        }
    }

    let mut losses = Vec::with_capacity(config.epochs);
    let mut z = vec![0.0; c_latent];
    let mut recon = vec![0.0; d];
    let mut dz = vec![0.0; c_latent];
    for _ in 0..config.epochs {
        let mut g_enc_w = Tensor::zeros(model.enc_w.shape());
        let mut g_enc_b = Tensor::zeros(model.enc_b.shape());
        let mut g_dec_w = Tensor::zeros(model.dec_w.shape());
        let mut g_dec_b = Tensor::zeros(model.dec_b.shape());
        let mut loss = 0.0;
        for p in &patches {
            for (l, zv) in z.iter_mut().enumerate() {
                let row = &model.enc_w.data()[l * d..(l + 1) * d];
                *zv = model.enc_b.data()[l]
                    + row.iter().zip(p).map(|(w, x)| w * x).sum::<f64>();
            }
            for (i, rv) in recon.iter_mut().enumerate() {
                let row = &model.dec_w.data()[i * c_latent..(i + 1) * c_latent];
                *rv = model.dec_b.data()[i]
                    + row.iter().zip(&z).map(|(w, x)| w * x).sum::<f64>();
            }
            dz.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..d {
                let err = recon[i] - p[i];
                loss += err * err;
                let g = 2.0 * err * norm;
                g_dec_b.data_mut()[i] += g;
                for l in 0..c_latent {
                    g_dec_w.data_mut()[i * c_latent + l] += g * z[l];
                    dz[l] += g * model.dec_w.data()[i * c_latent + l];
                }
            }
            for l in 0..c_latent {
                g_enc_b.data_mut()[l] += dz[l];
                for i in 0..d {
                    g_enc_w.data_mut()[l * d + i] += dz[l] * p[i];
                }
            }
        }
        model.enc_w.axpy(-config.step_size, &g_enc_w);
        model.enc_b.axpy(-config.step_size, &g_enc_b);
        model.dec_w.axpy(-config.step_size, &g_dec_w);
        model.dec_b.axpy(-config.step_size, &g_dec_b);
        let epoch_loss = loss * norm;
        if !epoch_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "codec loss became non-finite (step size {})",
                config.step_size
            )));
        }
        losses.push(epoch_loss);
    }
    model.final_loss = model.reconstruction_mse(data)?;
    Ok((model, losses))
}
