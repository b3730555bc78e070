//! Anomaly score generator.
//!
//! An MLP over the concatenated factors `[r, h]` where the scalar
//! reconstruction error is fed into every layer as an extra weighted input:
//!
//! ```text
//! z_k = f(W_k z_{k-1} + b_k + w_k · e)
//! ```
//!
//! `w_k` is a vector with one weight per output unit, so `w_k · e` acts like a
//! second, error-scaled bias. The last layer is linear with one output and
//! also receives the injection. [`ScorerLayout`] covers the ablation variants:
//! dropping factors, feeding `e` only as an extra first-layer column, or
//! scoring the raw reconstruction `x̂` with a plain MLP.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{AeForward, Encoding, EncodingGrads};
use crate::error::{Error, Result};
use crate::numerics::{init_glorot, Activation, Dense, Matrix, Parameters, Rng};

/// Which of the three factors reach the scorer. Serialized as `"h,r,e"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FactorMask {
    pub h: bool,
    pub r: bool,
    pub e: bool,
}

impl FactorMask {
    pub const ALL: FactorMask = FactorMask {
        h: true,
        r: true,
        e: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.h || self.r || self.e)
    }
}

impl Default for FactorMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl fmt::Display for FactorMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.h, "h"), (self.r, "r"), (self.e, "e")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        f.write_str(&names.join(","))
    }
}

impl From<FactorMask> for String {
    fn from(mask: FactorMask) -> String {
        mask.to_string()
    }
}

impl TryFrom<String> for FactorMask {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for FactorMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut mask = FactorMask {
            h: false,
            r: false,
            e: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "h" => mask.h = true,
                "r" => mask.r = true,
                "e" => mask.e = true,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown factor '{other}' (expected h, r or e)"
                    )))
                }
            }
        }
        if mask.is_empty() {
            return Err(Error::InvalidConfig("factor mask must not be empty".into()));
        }
        Ok(mask)
    }
}

/// How the reconstruction error enters the scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorFeed {
    /// Injected into every layer.
    EveryLayer,
    /// Appended once as an input column.
    FirstLayer,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerLayout {
    pub use_r: bool,
    pub use_h: bool,
    /// Score `x̂` itself instead of the factors.
    pub use_reconstruction: bool,
    pub error_feed: ErrorFeed,
}

impl ScorerLayout {
    pub fn from_mask(mask: FactorMask, first_layer_only: bool) -> Self {
        let error_feed = match (mask.e, first_layer_only) {
            (false, _) => ErrorFeed::Off,
            (true, false) => ErrorFeed::EveryLayer,
            (true, true) => ErrorFeed::FirstLayer,
        };
        Self {
            use_r: mask.r,
            use_h: mask.h,
            use_reconstruction: false,
            error_feed,
        }
    }

    pub fn reconstruction_only() -> Self {
        Self {
            use_r: false,
            use_h: false,
            use_reconstruction: true,
            error_feed: ErrorFeed::Off,
        }
    }

    pub fn input_width(&self, m: usize, d: usize) -> usize {
        let mut w = 0;
        if self.use_r {
            w += m;
        }
        if self.use_h {
            w += d;
        }
        if self.use_reconstruction {
            w += m;
        }
        if self.error_feed == ErrorFeed::FirstLayer {
            w += 1;
        }
        w
    }

    /// Builds `z₀` for a batch: `[r, h, x̂, e]` restricted to the layout.
    pub fn assemble(&self, fwd: &AeForward) -> Result<Matrix> {
        let e_col = Matrix::from_vec(fwd.len(), 1, fwd.errors.clone())?;
        let mut blocks: Vec<&Matrix> = Vec::new();
        if self.use_r {
            blocks.push(&fwd.directions);
        }
        if self.use_h {
            blocks.push(&fwd.h);
        }
        if self.use_reconstruction {
            blocks.push(&fwd.reconstruction);
        }
        if self.error_feed == ErrorFeed::FirstLayer {
            blocks.push(&e_col);
        }
        if blocks.is_empty() {
            return Ok(Matrix::zeros(fwd.len(), 0));
        }
        Matrix::hstack(&blocks)
    }

    fn assemble_single(&self, enc: &Encoding) -> Result<Vec<f64>> {
        if self.use_reconstruction {
            return Err(Error::invalid(
                "reconstruction-input scorer needs x̂; score through a model forward pass",
            ));
        }
        let mut z = Vec::new();
        if self.use_r {
            z.extend_from_slice(&enc.r);
        }
        if self.use_h {
            z.extend_from_slice(&enc.h);
        }
        if self.error_feed == ErrorFeed::FirstLayer {
            z.push(enc.e);
        }
        Ok(z)
    }

    /// Splits gradients on `z₀` and on the injected `e` back onto the factors.
    pub fn split_grads(
        &self,
        dz0: &Matrix,
        de_injected: Option<Vec<f64>>,
        m: usize,
        d: usize,
    ) -> EncodingGrads {
        let mut at = 0;
        let mut take = |w: usize| {
            let block = dz0.column_block(at, w);
            at += w;
            block
        };
        let r = self.use_r.then(|| take(m));
        let h = self.use_h.then(|| take(d));
        let reconstruction = self.use_reconstruction.then(|| take(m));
        let e = match self.error_feed {
            ErrorFeed::FirstLayer => Some(take(1).into_vec()),
            ErrorFeed::EveryLayer => de_injected,
            ErrorFeed::Off => None,
        };
        EncodingGrads {
            h,
            r,
            e,
            reconstruction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLayer {
    pub dense: Dense,
    /// Per-unit weights on `e`, shape `1 × out`; present iff every-layer feed.
    pub inject: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreNetParams {
    pub layout: ScorerLayout,
    pub layers: Vec<ScoreLayer>,
}

#[derive(Debug, Clone)]
pub struct ScoreForward {
    pub scores: Vec<f64>,
    inputs: Vec<Matrix>,
    pres: Vec<Matrix>,
    errors: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ScoreBackward {
    pub params: ScoreNetParams,
    pub input: Matrix,
    /// Accumulated over every injection site; `None` unless every-layer feed.
    pub errors: Option<Vec<f64>>,
}

impl ScoreNetParams {
    /// Glorot initialization; with every-layer feed the injection weights are
    /// drawn as the extra column of a `(out, in + 1)` Glorot matrix.
    pub fn new(
        layout: ScorerLayout,
        m: usize,
        d: usize,
        hidden: &[usize],
        rng: &mut Rng,
    ) -> Result<Self> {
        let input = layout.input_width(m, d);
        if input == 0 && layout.error_feed != ErrorFeed::EveryLayer {
            return Err(Error::InvalidConfig("scorer has no inputs".into()));
        }
        let mut widths = vec![input];
        widths.extend(hidden);
        widths.push(1);
        let n = widths.len() - 1;
        let inject = layout.error_feed == ErrorFeed::EveryLayer;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let (fan_in, out) = (widths[i], widths[i + 1]);
            let act = if i + 1 == n {
                Activation::Identity
            } else {
                Activation::Relu
            };
            let full = init_glorot(out, fan_in + usize::from(inject), rng)?;
            let weight = full.column_block(0, fan_in);
            let inject = inject.then(|| full.column_block(fan_in, 1).transpose());
            layers.push(ScoreLayer {
                dense: Dense::from_parts(weight, Matrix::zeros(1, out), act)?,
                inject,
            });
        }
        Ok(Self { layout, layers })
    }

    pub fn from_layers(
        layout: ScorerLayout,
        m: usize,
        d: usize,
        layers: Vec<ScoreLayer>,
    ) -> Result<Self> {
        let mut width = layout.input_width(m, d);
        let inject = layout.error_feed == ErrorFeed::EveryLayer;
        for (i, l) in layers.iter().enumerate() {
            if l.dense.in_dim() != width {
                return Err(Error::InvalidConfig(format!(
                    "scorer layer {i} expects width {}, got {width}",
                    l.dense.in_dim()
                )));
            }
            match (&l.inject, inject) {
                (Some(w), true) if w.shape() == (1, l.dense.out_dim()) => {}
                (None, false) => {}
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "scorer layer {i}: injection weights do not match the layout"
                    )))
                }
            }
            width = l.dense.out_dim();
        }
        match layers.last() {
            Some(l) if width == 1 && l.dense.activation == Activation::Identity => {}
            _ => {
                return Err(Error::InvalidConfig(
                    "scorer must end in one linear unit".into(),
                ))
            }
        }
        Ok(Self { layout, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].dense.in_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layout: self.layout,
            layers: self
                .layers
                .iter()
                .map(|l| ScoreLayer {
                    dense: Dense::zeros(l.dense.in_dim(), l.dense.out_dim(), l.dense.activation),
                    inject: l.inject.as_ref().map(|w| Matrix::zeros(w.rows(), w.cols())),
                })
                .collect(),
        }
    }

    /// Batch forward. `errors` feeds the injection terms and is ignored for
    /// other layouts.
    pub fn forward(&self, z0: &Matrix, errors: &[f64]) -> Result<ScoreForward> {
        if z0.cols() != self.input_dim() {
            return Err(Error::shape(
                "scorer input",
                z0.shape(),
                (z0.rows(), self.input_dim()),
            ));
        }
        if errors.len() != z0.rows() {
            return Err(Error::shape(
                "scorer errors",
                (errors.len(), 1),
                (z0.rows(), 1),
            ));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut cur = z0.clone();
        for layer in &self.layers {
            let mut pre = layer.dense.affine(&cur)?;
            if let Some(w) = &layer.inject {
                for (i, &e) in errors.iter().enumerate() {
                    for (p, wj) in pre.row_mut(i).iter_mut().zip(w.as_slice()) {
                        *p += wj * e;
                    }
                }
            }
            let out = layer.dense.activation.apply(&pre);
            inputs.push(cur);
            pres.push(pre);
            cur = out;
        }
        Ok(ScoreForward {
            scores: cur.into_vec(),
            inputs,
            pres,
            errors: errors.to_vec(),
        })
    }

    pub fn backward(&self, fwd: &ScoreForward, dscores: &[f64]) -> Result<ScoreBackward> {
        let n = fwd.scores.len();
        if dscores.len() != n {
            return Err(Error::shape("scorer upstream", (dscores.len(), 1), (n, 1)));
        }
        let mut grads = self.zeros_like();
        let injecting = self.layout.error_feed == ErrorFeed::EveryLayer;
        let mut de = vec![0.0; n];
        let mut d = Matrix::from_vec(n, 1, dscores.to_vec())?;
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let dpre = layer.dense.activation.backward(&fwd.pres[k], &d)?;
            if let Some(w) = &layer.inject {
                let mut gw = Matrix::zeros(1, w.cols());
                for (i, &e) in fwd.errors.iter().enumerate() {
                    let row = dpre.row(i);
                    for (g, &dp) in gw.as_mut_slice().iter_mut().zip(row) {
                        *g += dp * e;
                    }
                    de[i] += row
                        .iter()
                        .zip(w.as_slice())
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                }
                grads.layers[k].inject = Some(gw);
            }
            let ag = layer.dense.affine_backward(&fwd.inputs[k], &dpre)?;
            grads.layers[k].dense.weight = ag.weight;
            grads.layers[k].dense.bias = ag.bias;
            d = ag.input;
        }
        Ok(ScoreBackward {
            params: grads,
            input: d,
            errors: injecting.then_some(de),
        })
    }
}

impl Parameters for ScoreNetParams {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.dense.weight);
            out.push(&l.dense.bias);
            if let Some(w) = &l.inject {
                out.push(w);
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.dense.weight);
            out.push(&mut l.dense.bias);
            if let Some(w) = &mut l.inject {
                out.push(w);
            }
        }
        out
    }
}

fn score_one(enc: &Encoding, params: &ScoreNetParams) -> Result<f64> {
    let z = params.layout.assemble_single(enc)?;
    let z = Matrix::from_vec(1, z.len(), z)?;
    Ok(params.forward(&z, &[enc.e])?.scores[0])
}

/// Anomaly score `s₀` for one encoded sample.
pub fn score(enc: &Encoding, params: &ScoreNetParams) -> Result<f64> {
    if params.layout.error_feed == ErrorFeed::FirstLayer {
        return Err(Error::invalid(
            "first-layer error feed; use score_first_layer_only_variant",
        ));
    }
    score_one(enc, params)
}

/// Score with `e` concatenated once at the input, `z₀ = [r, h, e]`, and no
/// injection in later layers.
pub fn score_first_layer_only_variant(enc: &Encoding, params: &ScoreNetParams) -> Result<f64> {
    if params.layout.error_feed != ErrorFeed::FirstLayer {
        return Err(Error::invalid(
            "scorer is not the first-layer error-feed variant",
        ));
    }
    score_one(enc, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error};

    fn random_encoding(m: usize, d: usize, rng: &mut Rng) -> Encoding {
        let r: Vec<f64> = (0..m).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        Encoding {
            h: (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            r: r.iter().map(|v| v / norm).collect(),
            e: rng.uniform(0.0, 2.0),
        }
    }

    fn randomize_biases(p: &mut ScoreNetParams, rng: &mut Rng) {
        for l in &mut p.layers {
            for b in l.dense.bias.as_mut_slice() {
                *b = rng.uniform(-0.3, 0.3);
            }
        }
    }

    #[test]
    fn zero_params_score_zero() {
        let layout = ScorerLayout::from_mask(FactorMask::ALL, false);
        let p = ScoreNetParams::new(layout, 4, 2, &[5, 3], &mut Rng::new(0))
            .unwrap()
            .zeros_like();
        let enc = random_encoding(4, 2, &mut Rng::new(1));
        assert_eq!(score(&enc, &p).unwrap(), 0.0);

        let variant = ScorerLayout::from_mask(FactorMask::ALL, true);
        let p = ScoreNetParams::new(variant, 4, 2, &[5], &mut Rng::new(0))
            .unwrap()
            .zeros_like();
        assert_eq!(score_first_layer_only_variant(&enc, &p).unwrap(), 0.0);
    }

    #[test]
    fn pure_injection_path() {
        let layout = ScorerLayout::from_mask(FactorMask::ALL, false);
        let layer = ScoreLayer {
            dense: Dense::zeros(3, 1, Activation::Identity),
            inject: Some(Matrix::row_vector(&[1.0])),
        };
        let p = ScoreNetParams::from_layers(layout, 2, 1, vec![layer]).unwrap();
        let enc = Encoding {
            h: vec![0.4],
            r: vec![0.6, 0.8],
            e: 2.5,
        };
        assert_eq!(score(&enc, &p).unwrap(), 2.5);

        let fwd = p
            .forward(&Matrix::row_vector(&[0.6, 0.8, 0.4]), &[2.5])
            .unwrap();
        let b = p.backward(&fwd, &[1.0]).unwrap();
        assert_eq!(b.errors.unwrap(), vec![1.0]);
    }

    #[test]
    fn variant_reads_e_column() {
        let layout = ScorerLayout::from_mask(FactorMask::ALL, true);
        let w = Matrix::from_rows(&[[0.0, 0.0, 0.0, 1.0]]).unwrap();
        let layer = ScoreLayer {
            dense: Dense::from_parts(w, Matrix::zeros(1, 1), Activation::Identity).unwrap(),
            inject: None,
        };
        let p = ScoreNetParams::from_layers(layout, 2, 1, vec![layer]).unwrap();
        let enc = Encoding {
            h: vec![0.3],
            r: vec![1.0, 0.0],
            e: 0.7,
        };
        assert_eq!(score_first_layer_only_variant(&enc, &p).unwrap(), 0.7);
        assert!(score(&enc, &p).is_err());
    }

    #[test]
    fn two_layer_matches_unrolled() {
        let mut rng = Rng::new(12);
        let layout = ScorerLayout::from_mask(FactorMask::ALL, false);
        let mut p = ScoreNetParams::new(layout, 3, 2, &[4], &mut rng).unwrap();
        randomize_biases(&mut p, &mut rng);
        let enc = random_encoding(3, 2, &mut rng);
        let z0: Vec<f64> = enc.r.iter().chain(&enc.h).copied().collect();

        let l0 = &p.layers[0];
        let w0 = l0.inject.as_ref().unwrap();
        let z1: Vec<f64> = (0..4)
            .map(|o| {
                let s: f64 = (0..5).map(|i| l0.dense.weight.get(o, i) * z0[i]).sum();
                (s + l0.dense.bias.as_slice()[o] + w0.as_slice()[o] * enc.e).max(0.0)
            })
            .collect();
        let l1 = &p.layers[1];
        let s: f64 = (0..4)
            .map(|i| l1.dense.weight.get(0, i) * z1[i])
            .sum::<f64>()
            + l1.dense.bias.as_slice()[0]
            + l1.inject.as_ref().unwrap().as_slice()[0] * enc.e;
        assert!((score(&enc, &p).unwrap() - s).abs() < 1e-12);
    }

    #[test]
    fn variant_matches_plain_mlp() {
        let mut rng = Rng::new(5);
        let layout = ScorerLayout::from_mask(FactorMask::ALL, true);
        let mut p = ScoreNetParams::new(layout, 3, 2, &[4], &mut rng).unwrap();
        randomize_biases(&mut p, &mut rng);
        assert!(p.layers.iter().all(|l| l.inject.is_none()));
        let enc = random_encoding(3, 2, &mut rng);
        let z0: Vec<f64> = enc
            .r
            .iter()
            .chain(&enc.h)
            .chain([enc.e].iter())
            .copied()
            .collect();
        let mut z = z0;
        for l in &p.layers {
            z = (0..l.dense.out_dim())
                .map(|o| {
                    let s = l.dense.bias.as_slice()[o]
                        + (0..l.dense.in_dim())
                            .map(|i| l.dense.weight.get(o, i) * z[i])
                            .sum::<f64>();
                    if l.dense.activation == Activation::Relu {
                        s.max(0.0)
                    } else {
                        s
                    }
                })
                .collect();
        }
        assert!((score_first_layer_only_variant(&enc, &p).unwrap() - z[0]).abs() < 1e-12);
    }

    #[test]
    fn zero_injection_weights_make_score_blind_to_e() {
        let mut rng = Rng::new(8);
        let layout = ScorerLayout::from_mask(FactorMask::ALL, false);
        let mut p = ScoreNetParams::new(layout, 4, 2, &[6, 3], &mut rng).unwrap();
        for l in &mut p.layers {
            l.inject.as_mut().unwrap().fill(0.0);
        }
        let mut enc = random_encoding(4, 2, &mut rng);
        let base = score(&enc, &p).unwrap();
        for e in [0.0, 0.3, 7.0, 1e3] {
            enc.e = e;
            assert_eq!(score(&enc, &p).unwrap(), base);
        }
    }

    #[test]
    fn variant_equals_main_with_first_layer_absorbing_e() {
        let mut rng = Rng::new(21);
        let (m, d) = (3, 2);
        let main = ScorerLayout::from_mask(FactorMask::ALL, false);
        let mut p = ScoreNetParams::new(main, m, d, &[4, 3], &mut rng).unwrap();
        randomize_biases(&mut p, &mut rng);
        for l in p.layers.iter_mut().skip(1) {
            l.inject.as_mut().unwrap().fill(0.0);
        }
        let variant_layers: Vec<ScoreLayer> = p
            .layers
            .iter()
            .enumerate()
            .map(|(k, l)| {
                let dense = if k == 0 {
                    let w =
                        Matrix::hstack(&[&l.dense.weight, &l.inject.as_ref().unwrap().transpose()])
                            .unwrap();
                    Dense::from_parts(w, l.dense.bias.clone(), l.dense.activation).unwrap()
                } else {
                    l.dense.clone()
                };
                ScoreLayer {
                    dense,
                    inject: None,
                }
            })
            .collect();
        let v = ScoreNetParams::from_layers(
            ScorerLayout::from_mask(FactorMask::ALL, true),
            m,
            d,
            variant_layers,
        )
        .unwrap();
        for _ in 0..10 {
            let enc = random_encoding(m, d, &mut rng);
            let a = score(&enc, &p).unwrap();
            let b = score_first_layer_only_variant(&enc, &v).unwrap();
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let layout = ScorerLayout::from_mask(FactorMask::ALL, false);
        let p = ScoreNetParams::new(layout, 4, 2, &[3], &mut Rng::new(0)).unwrap();
        let enc = Encoding {
            h: vec![0.0; 3],
            r: vec![0.0; 4],
            e: 0.0,
        };
        assert!(score(&enc, &p).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = Rng::new(2);
        let layout = ScorerLayout::from_mask(FactorMask::ALL, false);
        let p = ScoreNetParams::new(layout, 4, 2, &[5, 3], &mut rng).unwrap();
        let z = Matrix::from_vec(3, 6, (0..18).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let fwd = p.forward(&z, &[0.1, 0.2, 0.3]).unwrap();
        let b = p.backward(&fwd, &[0.0; 3]).unwrap();
        assert!(b.params.tensors().iter().all(|t| t.max_abs() == 0.0));
        assert_eq!(b.input.max_abs(), 0.0);
        assert!(b.errors.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_parse_and_display() {
        let m: FactorMask = "h,e".parse().unwrap();
        assert_eq!(
            m,
            FactorMask {
                h: true,
                r: false,
                e: true
            }
        );
        assert_eq!(m.to_string(), "h,e");
        assert!("".parse::<FactorMask>().is_err());
        assert!("h,x".parse::<FactorMask>().is_err());
    }

    // Joint (Θ_g, z₀, e) gradients against central differences for every
    // layout, including a deep net for the accumulated ∂s/∂e.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(99);
        let layouts = [
            ScorerLayout::from_mask(FactorMask::ALL, false),
            ScorerLayout::from_mask(FactorMask::ALL, true),
            ScorerLayout::from_mask("e".parse().unwrap(), false),
            ScorerLayout::from_mask("h,r".parse().unwrap(), false),
            ScorerLayout::reconstruction_only(),
        ];
        for trial in 0..25 {
            let layout = layouts[trial % layouts.len()];
            let m = 2 + rng.below(5);
            let d = 1 + rng.below(m - 1);
            let hidden: Vec<usize> = (0..1 + rng.below(3)).map(|_| 2 + rng.below(6)).collect();
            let mut p = ScoreNetParams::new(layout, m, d, &hidden, &mut rng).unwrap();
            randomize_biases(&mut p, &mut rng);
            let n = 1 + rng.below(5);
            let w = p.input_dim();
            let z = Matrix::from_vec(n, w, (0..n * w).map(|_| rng.uniform(-1.0, 1.0)).collect())
                .unwrap();
            let errors: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 2.0)).collect();
            let up: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let objective = |s: &[f64]| s.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();

            let fwd = p.forward(&z, &errors).unwrap();
            let b = p.backward(&fwd, &up).unwrap();

            let numeric = finite_diff_grad(&p, 1e-5, |q| {
                objective(&q.forward(&z, &errors).unwrap().scores)
            })
            .unwrap();
            let err = max_relative_error(&numeric, &b.params.tensors());
            assert!(err < 1e-4, "trial {trial}: params rel err {err}");

            let zs = vec![z.clone()];
            let numeric = finite_diff_grad(&zs, 1e-5, |v| {
                objective(&p.forward(&v[0], &errors).unwrap().scores)
            })
            .unwrap();
            let err = max_relative_error(&numeric, &[&b.input]);
            assert!(err < 1e-4, "trial {trial}: input rel err {err}");

            if let Some(de) = &b.errors {
                let es = vec![Matrix::row_vector(&errors)];
                let numeric = finite_diff_grad(&es, 1e-5, |v| {
                    objective(&p.forward(&z, v[0].as_slice()).unwrap().scores)
                })
                .unwrap();
                let err = max_relative_error(&numeric, &[&Matrix::row_vector(de)]);
                assert!(err < 1e-4, "trial {trial}: e rel err {err}");
            }
        }
    }
}
