//! Trainable parameters: denoiser and encoder weights plus the base token
//! embedding table, with flat-vector manifest order and checkpoint IO.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::conditioning::Vocabulary;
use crate::error::{Error, Result};
use crate::schedule::ScheduleConfig;
use crate::util;

pub const CHECKPOINT_FORMAT: &str = "diffusion-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Network dimensions. The denoiser is a fully connected net taking
/// `concat(z, time features, conditioning)`; the encoder mean-pools token
/// embedding rows and maps them to the conditioning width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Square canvas side; data dimension is `canvas * canvas`.
    pub canvas: usize,
    /// Token embedding width d.
    pub embed_dim: usize,
    /// Conditioning vector width.
    pub cond_width: usize,
    /// Sinusoidal time feature width (even).
    pub time_feat_width: usize,
    /// Width of the two denoiser hidden layers.
    pub hidden_width: usize,
    /// Width of the encoder hidden layer.
    pub enc_hidden_width: usize,
    /// Maximum token sequence length L.
    pub seq_len: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            canvas: 16,
            embed_dim: 16,
            cond_width: 32,
            time_feat_width: 16,
            hidden_width: 256,
            enc_hidden_width: 64,
            seq_len: 16,
        }
    }
}

impl ArchConfig {
    pub fn data_dim(&self) -> usize {
        self.canvas * self.canvas
    }

    pub fn denoiser_input_dim(&self) -> usize {
        self.data_dim() + self.time_feat_width + self.cond_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas == 0
            || self.embed_dim == 0
            || self.cond_width == 0
            || self.hidden_width == 0
            || self.enc_hidden_width == 0
            || self.seq_len == 0
        {
            return Err(Error::Config("architecture dimensions must be positive".into()));
        }
        if self.time_feat_width % 2 != 0 || self.time_feat_width == 0 {
            return Err(Error::Config("time feature width must be a positive even number".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserWeights {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// All trainable state of the model plus the metadata needed to use it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub sched_cfg: ScheduleConfig,
    pub vocab: Vocabulary,
    pub denoiser: DenoiserWeights,
    pub encoder: EncoderWeights,
    /// Base token embedding table, `V x d`.
    pub table: Array2<f64>,
    /// Seeds that produced this artifact, oldest first.
    pub seed_lineage: Vec<u64>,
}

fn randn_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("std is finite");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

impl ModelParams {
    /// Fresh parameters with scaled-normal init, deterministic in `seed`.
    pub fn init(arch: ArchConfig, sched_cfg: ScheduleConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let din = arch.denoiser_input_dim();
        let h = arch.hidden_width;
        let d_out = arch.data_dim();
        let denoiser = DenoiserWeights {
            w1: randn_matrix(&mut rng, h, din, (1.0 / din as f64).sqrt()),
            b1: Array1::zeros(h),
            w2: randn_matrix(&mut rng, h, h, (1.0 / h as f64).sqrt()),
            b2: Array1::zeros(h),
            w3: randn_matrix(&mut rng, d_out, h, (1.0 / h as f64).sqrt()),
            b3: Array1::zeros(d_out),
        };
        let eh = arch.enc_hidden_width;
        let encoder = EncoderWeights {
            w1: randn_matrix(&mut rng, eh, arch.embed_dim, (1.0 / arch.embed_dim as f64).sqrt()),
            b1: Array1::zeros(eh),
            w2: randn_matrix(&mut rng, arch.cond_width, eh, (1.0 / eh as f64).sqrt()),
            b2: Array1::zeros(arch.cond_width),
        };
        let table = randn_matrix(&mut rng, vocab.len(), arch.embed_dim, 0.3);
        Ok(ModelParams {
            arch,
            sched_cfg,
            vocab,
            denoiser,
            encoder,
            table,
            seed_lineage: vec![seed],
        })
    }

    /// Named shapes in flat-vector order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            ("denoiser.w1".into(), self.denoiser.w1.shape().to_vec()),
            ("denoiser.b1".into(), self.denoiser.b1.shape().to_vec()),
            ("denoiser.w2".into(), self.denoiser.w2.shape().to_vec()),
            ("denoiser.b2".into(), self.denoiser.b2.shape().to_vec()),
            ("denoiser.w3".into(), self.denoiser.w3.shape().to_vec()),
            ("denoiser.b3".into(), self.denoiser.b3.shape().to_vec()),
            ("encoder.w1".into(), self.encoder.w1.shape().to_vec()),
            ("encoder.b1".into(), self.encoder.b1.shape().to_vec()),
            ("encoder.w2".into(), self.encoder.w2.shape().to_vec()),
            ("encoder.b2".into(), self.encoder.b2.shape().to_vec()),
            ("token_table".into(), self.table.shape().to_vec()),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.manifest().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// All weights as one vector in manifest order (row-major per array).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend(self.denoiser.w1.iter());
        out.extend(self.denoiser.b1.iter());
        out.extend(self.denoiser.w2.iter());
        out.extend(self.denoiser.b2.iter());
        out.extend(self.denoiser.w3.iter());
        out.extend(self.denoiser.b3.iter());
        out.extend(self.encoder.w1.iter());
        out.extend(self.encoder.b1.iter());
        out.extend(self.encoder.w2.iter());
        out.extend(self.encoder.b2.iter());
        out.extend(self.table.iter());
        out
    }

    /// Overwrites all weights from a flat vector in manifest order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Config(format!(
                "flat vector holds {} values, expected {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        let mut take = |arr: &mut [f64]| {
            arr.copy_from_slice(&flat[offset..offset + arr.len()]);
            offset += arr.len();
        };
        take(self.denoiser.w1.as_slice_mut().unwrap());
        take(self.denoiser.b1.as_slice_mut().unwrap());
        take(self.denoiser.w2.as_slice_mut().unwrap());
        take(self.denoiser.b2.as_slice_mut().unwrap());
        take(self.denoiser.w3.as_slice_mut().unwrap());
        take(self.denoiser.b3.as_slice_mut().unwrap());
        take(self.encoder.w1.as_slice_mut().unwrap());
        take(self.encoder.b1.as_slice_mut().unwrap());
        take(self.encoder.w2.as_slice_mut().unwrap());
        take(self.encoder.b2.as_slice_mut().unwrap());
        take(self.table.as_slice_mut().unwrap());
        Ok(())
    }

    /// FNV checksum over the little-endian bytes of all weights.
    pub fn checksum(&self) -> u64 {
        util::checksum_f64(&self.flatten())
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let din = self.arch.denoiser_input_dim();
        let h = self.arch.hidden_width;
        let d_out = self.arch.data_dim();
        let shapes_ok = self.denoiser.w1.shape() == [h, din]
            && self.denoiser.b1.len() == h
            && self.denoiser.w2.shape() == [h, h]
            && self.denoiser.b2.len() == h
            && self.denoiser.w3.shape() == [d_out, h]
            && self.denoiser.b3.len() == d_out
            && self.encoder.w1.shape() == [self.arch.enc_hidden_width, self.arch.embed_dim]
            && self.encoder.b1.len() == self.arch.enc_hidden_width
            && self.encoder.w2.shape() == [self.arch.cond_width, self.arch.enc_hidden_width]
            && self.encoder.b2.len() == self.arch.cond_width
            && self.table.shape() == [self.vocab.len(), self.arch.embed_dim];
        if !shapes_ok {
            return Err(Error::Config("weight shapes inconsistent with architecture".into()));
        }
        if self.flatten().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                location: "ModelParams::validate".into(),
                detail: "non-finite weight".into(),
            });
        }
        Ok(())
    }

    /// Writes the checkpoint: JSON header line, then all weights as a
    /// little-endian f64 blob in manifest order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = json!({
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "arch": self.arch,
            "data_dim": self.arch.data_dim(),
            "schedule": self.sched_cfg,
            "vocab": self.vocab,
            "seed_lineage": self.seed_lineage,
            "manifest": self.manifest(),
        });
        util::write_header_and_blob(path, &header, &self.flatten())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, values) = util::read_header_and_blob(path)?;
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if header["format"] != CHECKPOINT_FORMAT {
            return Err(bad(format!("unexpected format {}", header["format"])));
        }
        if header["version"] != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {}", header["version"])));
        }
        let arch: ArchConfig =
            serde_json::from_value(header["arch"].clone()).map_err(|e| bad(e.to_string()))?;
        let sched_cfg: ScheduleConfig =
            serde_json::from_value(header["schedule"].clone()).map_err(|e| bad(e.to_string()))?;
        let vocab: Vocabulary =
            serde_json::from_value(header["vocab"].clone()).map_err(|e| bad(e.to_string()))?;
        let seed_lineage: Vec<u64> =
            serde_json::from_value(header["seed_lineage"].clone()).map_err(|e| bad(e.to_string()))?;
        let mut params = ModelParams::init(arch, sched_cfg, vocab, 0)?;
        params.seed_lineage = seed_lineage;
        if values.len() != params.num_params() {
            return Err(bad(format!(
                "blob holds {} values, expected {}",
                values.len(),
                params.num_params()
            )));
        }
        params.assign_flat(&values)?;
        params.validate()?;
        Ok(params)
    }

    /// The null token's embedding row.
    pub fn null_row(&self) -> Array1<f64> {
        self.table.row(self.vocab.null_id()).to_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            canvas: 3,
            embed_dim: 4,
            cond_width: 5,
            time_feat_width: 4,
            hidden_width: 8,
            enc_hidden_width: 6,
            seq_len: 3,
        }
    }

    fn small_params(seed: u64) -> ModelParams {
        let vocab = Vocabulary::new(["a", "b", "c"].map(String::from)).unwrap();
        ModelParams::init(small_arch(), ScheduleConfig::default(), vocab, seed).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(small_params(5), small_params(5));
        assert_ne!(small_params(5).checksum(), small_params(6).checksum());
    }

    #[test]
    fn flatten_round_trip() {
        let p = small_params(1);
        let flat = p.flatten();
        assert_eq!(flat.len(), p.num_params());
        let mut q = small_params(2);
        q.assign_flat(&flat).unwrap();
        assert_eq!(q.denoiser, p.denoiser);
        assert_eq!(q.encoder, p.encoder);
        assert_eq!(q.table, p.table);
        assert_eq!(q.checksum(), p.checksum());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = small_params(9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        p.save(&path).unwrap();
        let loaded = ModelParams::load(&path).unwrap();
        assert_eq!(loaded, p);
        assert_eq!(loaded.checksum(), p.checksum());
    }

    #[test]
    fn load_rejects_truncated_blob() {
        let p = small_params(9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        p.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(ModelParams::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn manifest_matches_flat_length() {
        let p = small_params(3);
        let total: usize = p
            .manifest()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        assert_eq!(total, p.flatten().len());
    }
}
