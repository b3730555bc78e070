//! The full detector: autoencoder feeding the score network.

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::encoder::{reconstruct, three_factors, AeForward, AutoencoderParams};
use crate::error::{Error, Result};
use crate::numerics::{Activation, Dense, Matrix, Parameters};
use crate::scorer::{ErrorFeed, ScoreForward, ScoreLayer, ScoreNetParams, ScorerLayout};

const MODEL_MAGIC: &[u8; 8] = b"WSADMODL";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub autoencoder: AutoencoderParams,
    pub scorer: ScoreNetParams,
}

/// Forward caches for one batch through both networks.
#[derive(Debug, Clone)]
pub struct ModelForward {
    pub encoding: AeForward,
    pub scoring: ScoreForward,
}

impl Model {
    pub fn new(autoencoder: AutoencoderParams, scorer: ScoreNetParams) -> Result<Self> {
        let width = scorer
            .layout
            .input_width(autoencoder.input_dim(), autoencoder.latent_dim());
        if width != scorer.input_dim() {
            return Err(Error::InvalidConfig(format!(
                "scorer expects {} inputs but the encoding provides {width}",
                scorer.input_dim()
            )));
        }
        Ok(Self {
            autoencoder,
            scorer,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.autoencoder.input_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            autoencoder: self.autoencoder.zeros_like(),
            scorer: self.scorer.zeros_like(),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<ModelForward> {
        let encoding = self.autoencoder.forward(x)?;
        let z0 = self.scorer.layout.assemble(&encoding)?;
        let scoring = self.scorer.forward(&z0, &encoding.errors)?;
        Ok(ModelForward { encoding, scoring })
    }

    /// Scores a single row by composing the per-sample encoder and scorer.
    pub fn score_row(&self, x: &[f64]) -> Result<f64> {
        let enc = three_factors(x, &self.autoencoder)?;
        let mut z = Vec::new();
        let layout = self.scorer.layout;
        if layout.use_r {
            z.extend_from_slice(&enc.r);
        }
        if layout.use_h {
            z.extend_from_slice(&enc.h);
        }
        if layout.use_reconstruction {
            z.extend(reconstruct(&enc.h, &self.autoencoder)?);
        }
        if layout.error_feed == ErrorFeed::FirstLayer {
            z.push(enc.e);
        }
        let z = Matrix::from_vec(1, z.len(), z)?;
        Ok(self.scorer.forward(&z, &[enc.e])?.scores[0])
    }

    /// Anomaly scores, higher meaning more anomalous. Each row is scored
    /// independently of the others.
    pub fn predict_scores(&self, features: &Matrix) -> Result<Vec<f64>> {
        if features.cols() != self.input_dim() {
            return Err(Error::shape(
                "predict_scores",
                features.shape(),
                (features.rows(), self.input_dim()),
            ));
        }
        if features.rows() == 0 {
            return Ok(Vec::new());
        }
        Ok(self.forward(features)?.scoring.scores)
    }

    /// Versioned flat binary: magic, format version, each autoencoder stack
    /// and the scorer as `(in, out, activation)` headers followed by weights.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MODEL_MAGIC);
        w.u32(MODEL_VERSION);
        for stack in [&self.autoencoder.encoder, &self.autoencoder.decoder] {
            w.u32(stack.len() as u32);
            for layer in stack {
                write_dense(&mut w, layer);
            }
        }
        let layout = self.scorer.layout;
        w.u8(u8::from(layout.use_r));
        w.u8(u8::from(layout.use_h));
        w.u8(u8::from(layout.use_reconstruction));
        w.u8(match layout.error_feed {
            ErrorFeed::Off => 0,
            ErrorFeed::EveryLayer => 1,
            ErrorFeed::FirstLayer => 2,
        });
        w.u32(self.scorer.layers.len() as u32);
        for layer in &self.scorer.layers {
            write_dense(&mut w, &layer.dense);
            if let Some(inject) = &layer.inject {
                w.values(inject);
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != MODEL_MAGIC {
            return Err(Error::data("not a model file (bad magic)"));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::data(format!(
                "unsupported model format version {version}"
            )));
        }
        let mut stacks = Vec::with_capacity(2);
        for _ in 0..2 {
            let n = r.u32()? as usize;
            stacks.push(
                (0..n)
                    .map(|_| read_dense(&mut r))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let decoder = stacks.pop().expect("two stacks");
        let encoder = stacks.pop().expect("two stacks");
        let autoencoder = AutoencoderParams::from_layers(encoder, decoder)?;

        let use_r = r.flag()?;
        let use_h = r.flag()?;
        let use_reconstruction = r.flag()?;
        let error_feed = match r.u8()? {
            0 => ErrorFeed::Off,
            1 => ErrorFeed::EveryLayer,
            2 => ErrorFeed::FirstLayer,
            other => return Err(Error::data(format!("unknown error-feed tag {other}"))),
        };
        let layout = ScorerLayout {
            use_r,
            use_h,
            use_reconstruction,
            error_feed,
        };
        let n = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let dense = read_dense(&mut r)?;
            let inject = if error_feed == ErrorFeed::EveryLayer {
                Some(r.values(1, dense.out_dim())?)
            } else {
                None
            };
            layers.push(ScoreLayer { dense, inject });
        }
        r.finish()?;
        let scorer = ScoreNetParams::from_layers(
            layout,
            autoencoder.input_dim(),
            autoencoder.latent_dim(),
            layers,
        )?;
        Model::new(autoencoder, scorer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

fn write_dense(w: &mut Writer, layer: &Dense) {
    w.u32(layer.in_dim() as u32);
    w.u32(layer.out_dim() as u32);
    w.u8(layer.activation.tag());
    w.values(&layer.weight);
    w.values(&layer.bias);
}

fn read_dense(r: &mut Reader) -> Result<Dense> {
    let in_dim = r.u32()? as usize;
    let out_dim = r.u32()? as usize;
    let tag = r.u8()?;
    let activation = Activation::from_tag(tag)
        .ok_or_else(|| Error::data(format!("unknown activation tag {tag}")))?;
    let weight = r.values(out_dim, in_dim)?;
    let bias = r.values(1, out_dim)?;
    Dense::from_parts(weight, bias, activation)
}

impl Parameters for Model {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut t = self.autoencoder.tensors();
        t.extend(self.scorer.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut t = self.autoencoder.tensors_mut();
        t.extend(self.scorer.tensors_mut());
        t
    }
}
