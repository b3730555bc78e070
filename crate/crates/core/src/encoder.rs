//! Autoencoder feature encoder.
//!
//! A sample `x ∈ ℝ^m` is mapped to three factors: the latent code `h`
//! (intrinsic coordinates on the learned manifold), the reconstruction error
//! `e = ‖x̂ − x‖₂` (distance to the manifold) and the unit residual direction
//! `r = (x̂ − x) / e`. When `e` falls below [`RESIDUAL_EPS`] the direction is
//! undefined; `r` is then the zero vector and neither `r` nor `e` passes any
//! gradient back.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Activation, Dense, Matrix, Parameters, Rng};

/// Reconstruction errors at or below this are treated as exact reconstructions.
pub const RESIDUAL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoencoderArch {
    pub input_dim: usize,
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
}

impl AutoencoderArch {
    /// `m → ⌈m/2⌉ → d` with `d = max(2, min(20, ⌈m/4⌉))`, decoder mirrored.
    pub fn default_for(input_dim: usize) -> Self {
        let latent_dim = input_dim.div_ceil(4).clamp(2, 20);
        Self {
            input_dim,
            hidden: vec![input_dim.div_ceil(2)],
            latent_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "autoencoder widths must be non-zero: {self:?}"
            )));
        }
        if self.latent_dim >= self.input_dim {
            return Err(Error::InvalidConfig(format!(
                "latent width {} must be smaller than input width {}",
                self.latent_dim, self.input_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderParams {
    pub encoder: Vec<Dense>,
    pub decoder: Vec<Dense>,
}

/// The three factors for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub h: Vec<f64>,
    pub r: Vec<f64>,
    pub e: f64,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Matrix,
    pre: Matrix,
}

/// Batch forward pass with everything backprop needs.
#[derive(Debug, Clone)]
pub struct AeForward {
    pub input: Matrix,
    pub h: Matrix,
    pub reconstruction: Matrix,
    /// `x̂ − x`, row per sample.
    pub residual: Matrix,
    pub errors: Vec<f64>,
    pub directions: Matrix,
    encoder_cache: Vec<LayerCache>,
    decoder_cache: Vec<LayerCache>,
}

impl AeForward {
    pub fn encoding(&self, i: usize) -> Encoding {
        Encoding {
            h: self.h.row(i).to_vec(),
            r: self.directions.row(i).to_vec(),
            e: self.errors[i],
        }
    }

    pub fn len(&self) -> usize {
        self.input.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.input.rows() == 0
    }
}

/// Upstream gradients on the encoder outputs. `None` means zero.
#[derive(Debug, Clone, Default)]
pub struct EncodingGrads {
    pub h: Option<Matrix>,
    pub r: Option<Matrix>,
    pub e: Option<Vec<f64>>,
    /// Gradient on `x̂` as a direct output (not through the residual).
    pub reconstruction: Option<Matrix>,
}

#[derive(Debug, Clone)]
pub struct AeBackward {
    pub params: AutoencoderParams,
    pub input: Matrix,
}

fn run_stack(layers: &[Dense], x: &Matrix) -> Result<(Matrix, Vec<LayerCache>)> {
    let mut cur = x.clone();
    let mut cache = Vec::with_capacity(layers.len());
    for layer in layers {
        let pre = layer.affine(&cur)?;
        let out = layer.activation.apply(&pre);
        cache.push(LayerCache { input: cur, pre });
        cur = out;
    }
    Ok((cur, cache))
}

fn backprop_stack(
    layers: &[Dense],
    cache: &[LayerCache],
    dout: Matrix,
    grads: &mut [Dense],
) -> Result<Matrix> {
    let mut d = dout;
    for ((layer, c), g) in layers.iter().zip(cache).zip(grads.iter_mut()).rev() {
        let dpre = layer.activation.backward(&c.pre, &d)?;
        let ag = layer.affine_backward(&c.input, &dpre)?;
        g.weight = ag.weight;
        g.bias = ag.bias;
        d = ag.input;
    }
    Ok(d)
}

fn check_chain(layers: &[Dense], from: usize, what: &str) -> Result<usize> {
    let mut width = from;
    for (i, l) in layers.iter().enumerate() {
        if l.in_dim() != width {
            return Err(Error::InvalidConfig(format!(
                "{what} layer {i} expects width {}, previous layer gives {width}",
                l.in_dim()
            )));
        }
        width = l.out_dim();
    }
    Ok(width)
}

impl AutoencoderParams {
    /// Random Glorot initialization. Hidden layers use ReLU; the latent code
    /// and the reconstruction are linear.
    pub fn new(arch: &AutoencoderArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut widths = vec![arch.input_dim];
        widths.extend(&arch.hidden);
        widths.push(arch.latent_dim);
        let stack = |widths: &[usize], rng: &mut Rng| -> Result<Vec<Dense>> {
            let n = widths.len() - 1;
            (0..n)
                .map(|i| {
                    let act = if i + 1 == n {
                        Activation::Identity
                    } else {
                        Activation::Relu
                    };
                    Dense::new(widths[i], widths[i + 1], act, rng)
                })
                .collect()
        };
        let encoder = stack(&widths, rng)?;
        widths.reverse();
        let decoder = stack(&widths, rng)?;
        Ok(Self { encoder, decoder })
    }

    /// Validates the stack shapes and the latent bottleneck.
    pub fn from_layers(encoder: Vec<Dense>, decoder: Vec<Dense>) -> Result<Self> {
        if encoder.is_empty() || decoder.is_empty() {
            return Err(Error::InvalidConfig(
                "encoder and decoder need at least one layer".into(),
            ));
        }
        let m = encoder[0].in_dim();
        let d = check_chain(&encoder, m, "encoder")?;
        if d >= m {
            return Err(Error::InvalidConfig(format!(
                "latent width {d} must be smaller than input width {m}"
            )));
        }
        let out = check_chain(&decoder, d, "decoder")?;
        if out != m {
            return Err(Error::InvalidConfig(format!(
                "decoder produces width {out}, input width is {m}"
            )));
        }
        Ok(Self { encoder, decoder })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder[self.encoder.len() - 1].out_dim()
    }

    pub fn zeros_like(&self) -> Self {
        let z = |ls: &[Dense]| {
            ls.iter()
                .map(|l| Dense::zeros(l.in_dim(), l.out_dim(), l.activation))
                .collect()
        };
        Self {
            encoder: z(&self.encoder),
            decoder: z(&self.decoder),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<AeForward> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "autoencoder input",
                x.shape(),
                (x.rows(), self.input_dim()),
            ));
        }
        let (h, encoder_cache) = run_stack(&self.encoder, x)?;
        let (reconstruction, decoder_cache) = run_stack(&self.decoder, &h)?;
        let residual = reconstruction.sub(x)?;
        let mut errors = Vec::with_capacity(x.rows());
        let mut directions = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let res = residual.row(i);
            let e = res.iter().map(|v| v * v).sum::<f64>().sqrt();
            if e > RESIDUAL_EPS {
                for (d, v) in directions.row_mut(i).iter_mut().zip(res) {
                    *d = v / e;
                }
            }
            debug_assert!(
                !e.is_finite()
                    || e <= RESIDUAL_EPS
                    || (directions.row(i).iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs()
                        < 1e-9
            );
            errors.push(e);
        }
        Ok(AeForward {
            input: x.clone(),
            h,
            reconstruction,
            residual,
            errors,
            directions,
            encoder_cache,
            decoder_cache,
        })
    }

    /// Backprop upstream gradients on `(h, r, e, x̂)` into parameter gradients
    /// and a gradient on the input batch.
    pub fn backward(&self, fwd: &AeForward, up: &EncodingGrads) -> Result<AeBackward> {
        let (n, m) = fwd.input.shape();
        let d = self.latent_dim();
        let check = |g: &Option<Matrix>, cols: usize, what: &'static str| -> Result<()> {
            match g {
                Some(g) if g.shape() != (n, cols) => Err(Error::shape(what, g.shape(), (n, cols))),
                _ => Ok(()),
            }
        };
        check(&up.h, d, "grad h")?;
        check(&up.r, m, "grad r")?;
        check(&up.reconstruction, m, "grad reconstruction")?;
        if let Some(de) = &up.e {
            if de.len() != n {
                return Err(Error::shape("grad e", (de.len(), 1), (n, 1)));
            }
        }

        // dL/d(x̂ − x) row by row: de·r + (dr − r(r·dr))/e
        let mut dres = Matrix::zeros(n, m);
        for i in 0..n {
            let e = fwd.errors[i];
            if e <= RESIDUAL_EPS {
                continue;
            }
            let r = fwd.directions.row(i);
            let row = dres.row_mut(i);
            if let Some(de) = &up.e {
                for (g, rv) in row.iter_mut().zip(r) {
                    *g += de[i] * rv;
                }
            }
            if let Some(dr) = &up.r {
                let dr = dr.row(i);
                let proj: f64 = r.iter().zip(dr).map(|(a, b)| a * b).sum();
                for ((g, rv), drv) in row.iter_mut().zip(r).zip(dr) {
                    *g += (drv - rv * proj) / e;
                }
            }
        }

        let mut dxhat = dres.clone();
        if let Some(direct) = &up.reconstruction {
            dxhat.add_scaled(direct, 1.0)?;
        }
        let mut grads = self.zeros_like();
        let mut dh = backprop_stack(&self.decoder, &fwd.decoder_cache, dxhat, &mut grads.decoder)?;
        if let Some(up_h) = &up.h {
            dh.add_scaled(up_h, 1.0)?;
        }
        let mut dx = backprop_stack(&self.encoder, &fwd.encoder_cache, dh, &mut grads.encoder)?;
        dx.add_scaled(&dres, -1.0)?;
        Ok(AeBackward {
            params: grads,
            input: dx,
        })
    }
}

impl Parameters for AutoencoderParams {
    fn tensors(&self) -> Vec<&Matrix> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

fn single_row(x: &[f64], width: usize, what: &'static str) -> Result<Matrix> {
    if x.len() != width {
        return Err(Error::shape(what, (1, x.len()), (1, width)));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what}: non-finite value")));
    }
    Ok(Matrix::row_vector(x))
}

/// Latent code `h` for one sample.
pub fn encode(x: &[f64], params: &AutoencoderParams) -> Result<Vec<f64>> {
    let x = single_row(x, params.input_dim(), "encode")?;
    Ok(run_stack(&params.encoder, &x)?.0.into_vec())
}

/// Decoder output `x̂` for one latent code.
pub fn reconstruct(h: &[f64], params: &AutoencoderParams) -> Result<Vec<f64>> {
    let h = single_row(h, params.latent_dim(), "reconstruct")?;
    Ok(run_stack(&params.decoder, &h)?.0.into_vec())
}

/// `e` and `r` from a sample and its reconstruction.
pub fn residual_factors(x: &[f64], reconstruction: &[f64]) -> (Vec<f64>, f64) {
    let res: Vec<f64> = reconstruction.iter().zip(x).map(|(a, b)| a - b).collect();
    let e = res.iter().map(|v| v * v).sum::<f64>().sqrt();
    let r = if e > RESIDUAL_EPS {
        res.iter().map(|v| v / e).collect()
    } else {
        vec![0.0; res.len()]
    };
    (r, e)
}

pub fn three_factors(x: &[f64], params: &AutoencoderParams) -> Result<Encoding> {
    let fwd = params.forward(&single_row(x, params.input_dim(), "three_factors")?)?;
    Ok(fwd.encoding(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error};

    fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    fn randomize_biases(p: &mut AutoencoderParams, rng: &mut Rng) {
        for l in p.encoder.iter_mut().chain(p.decoder.iter_mut()) {
            for b in l.bias.as_mut_slice() {
                *b = rng.uniform(-0.3, 0.3);
            }
        }
    }

    fn linear(weight: Matrix) -> Dense {
        let out = weight.rows();
        Dense::from_parts(weight, Matrix::zeros(1, out), Activation::Identity).unwrap()
    }

    #[test]
    fn default_arch_widths() {
        let a = AutoencoderArch::default_for(20);
        assert_eq!((a.hidden.clone(), a.latent_dim), (vec![10], 5));
        assert_eq!(AutoencoderArch::default_for(6).latent_dim, 2);
        assert_eq!(AutoencoderArch::default_for(279).latent_dim, 20);
        assert!(AutoencoderArch::default_for(2).validate().is_err());
    }

    #[test]
    fn bottleneck_enforced() {
        let bad = AutoencoderArch {
            input_dim: 4,
            hidden: vec![3],
            latent_dim: 4,
        };
        assert!(AutoencoderParams::new(&bad, &mut Rng::new(0)).is_err());
        let enc = vec![linear(Matrix::identity(3))];
        let dec = vec![linear(Matrix::identity(3))];
        assert!(AutoencoderParams::from_layers(enc, dec).is_err());
    }

    #[test]
    fn zero_params_give_zero_code_and_reconstruction() {
        let p = AutoencoderParams::new(&AutoencoderArch::default_for(8), &mut Rng::new(1))
            .unwrap()
            .zeros_like();
        let h = encode(&[0.3; 8], &p).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
        assert!(reconstruct(&h, &p).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn truncated_identity_encoder_slices() {
        let mut w = Matrix::zeros(2, 4);
        w.set(0, 0, 1.0);
        w.set(1, 1, 1.0);
        let p =
            AutoencoderParams::from_layers(vec![linear(w.clone())], vec![linear(w.transpose())])
                .unwrap();
        assert_eq!(encode(&[0.1, 0.2, 0.3, 0.4], &p).unwrap(), vec![0.1, 0.2]);
    }

    #[test]
    fn pseudo_inverse_decoder_reconstructs_span() {
        // encoder W (2x4) with orthonormal rows; decoder Wᵀ is its pseudo-inverse
        let s = 0.5f64.sqrt();
        let w = Matrix::from_rows(&[[s, s, 0.0, 0.0], [0.0, 0.0, s, -s]]).unwrap();
        let p =
            AutoencoderParams::from_layers(vec![linear(w.clone())], vec![linear(w.transpose())])
                .unwrap();
        // x in the row span of W
        let x = [0.7, 0.7, -0.2, 0.2];
        let xhat = reconstruct(&encode(&x, &p).unwrap(), &p).unwrap();
        for (a, b) in xhat.iter().zip(&x) {
            assert!((a - b).abs() < 1e-9);
        }
        let enc = three_factors(&x, &p).unwrap();
        assert!(enc.e < 1e-9);
    }

    #[test]
    fn random_forward_matches_layer_recompute() {
        let mut rng = Rng::new(6);
        let arch = AutoencoderArch {
            input_dim: 6,
            hidden: vec![4],
            latent_dim: 3,
        };
        let mut p = AutoencoderParams::new(&arch, &mut rng).unwrap();
        randomize_biases(&mut p, &mut rng);
        let x: Vec<f64> = (0..6).map(|_| rng.uniform(0.0, 1.0)).collect();

        let layer = |l: &Dense, v: &[f64]| -> Vec<f64> {
            (0..l.out_dim())
                .map(|o| {
                    let z = l.bias.as_slice()[o]
                        + (0..l.in_dim())
                            .map(|i| l.weight.get(o, i) * v[i])
                            .sum::<f64>();
                    match l.activation {
                        Activation::Relu => z.max(0.0),
                        Activation::Identity => z,
                    }
                })
                .collect()
        };
        let h_ref = layer(&p.encoder[1], &layer(&p.encoder[0], &x));
        let h = encode(&x, &p).unwrap();
        for (a, b) in h.iter().zip(&h_ref) {
            assert!((a - b).abs() < 1e-12);
        }
        let xhat_ref = layer(&p.decoder[1], &layer(&p.decoder[0], &h_ref));
        let xhat = reconstruct(&h, &p).unwrap();
        for (a, b) in xhat.iter().zip(&xhat_ref) {
            assert!((a - b).abs() < 1e-12);
        }
        let (r_ref, e_ref) = residual_factors(&x, &xhat_ref);
        let enc = three_factors(&x, &p).unwrap();
        assert!((enc.e - e_ref).abs() < 1e-12);
        for (a, b) in enc.r.iter().zip(&r_ref) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn three_four_five() {
        let (r, e) = residual_factors(&[0.0, 0.0], &[3.0, 4.0]);
        assert_eq!(e, 5.0);
        assert_eq!(r, vec![0.6, 0.8]);
        let (r, e) = residual_factors(&[1.0, 2.0], &[1.0, 2.0]);
        assert_eq!((r, e), (vec![0.0, 0.0], 0.0));
    }

    #[test]
    fn length_mismatch_is_error() {
        let p = AutoencoderParams::new(&AutoencoderArch::default_for(8), &mut Rng::new(1)).unwrap();
        assert!(encode(&[0.0; 7], &p).is_err());
        assert!(reconstruct(&[0.0; 5], &p).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = Rng::new(3);
        let p = AutoencoderParams::new(&AutoencoderArch::default_for(8), &mut rng).unwrap();
        let x = random_matrix(4, 8, &mut rng);
        let fwd = p.forward(&x).unwrap();
        let b = p.backward(&fwd, &EncodingGrads::default()).unwrap();
        assert!(b.params.tensors().iter().all(|t| t.max_abs() == 0.0));
        assert_eq!(b.input.max_abs(), 0.0);
    }

    #[test]
    fn e_path_on_linear_net_matches_norm_derivative() {
        // linear 3→1→3: dL/dx̂ = (x̂ − x)/e for L = e, so dL/dW_dec = (r)·hᵀ
        let enc = linear(Matrix::from_rows(&[[0.5, -0.2, 0.1]]).unwrap());
        let dec = linear(Matrix::from_rows(&[[0.3], [0.9], [-0.4]]).unwrap());
        let p = AutoencoderParams::from_layers(vec![enc], vec![dec]).unwrap();
        let x = Matrix::row_vector(&[0.2, 0.6, 0.9]);
        let fwd = p.forward(&x).unwrap();
        let up = EncodingGrads {
            e: Some(vec![1.0]),
            ..Default::default()
        };
        let g = p.backward(&fwd, &up).unwrap();
        let h = fwd.h.get(0, 0);
        for k in 0..3 {
            let expected = fwd.directions.get(0, k) * h;
            assert!((g.params.decoder[0].weight.get(k, 0) - expected).abs() < 1e-12);
        }
        let numeric = finite_diff_grad(&p, 1e-6, |q| q.forward(&x).unwrap().errors[0]).unwrap();
        assert!(max_relative_error(&numeric, &g.params.tensors()) < 1e-6);
    }

    // Composite scalar loss over all three factors and x̂; checked against
    // central differences for parameters and inputs.
    #[test]
    fn full_factor_gradient_matches_finite_differences() {
        let mut rng = Rng::new(77);
        for trial in 0..20 {
            let m = 3 + rng.below(6);
            let d = 1 + rng.below(m - 1);
            let hidden: Vec<usize> = (0..rng.below(3)).map(|_| 2 + rng.below(5)).collect();
            let arch = AutoencoderArch {
                input_dim: m,
                hidden,
                latent_dim: d,
            };
            let mut p = AutoencoderParams::new(&arch, &mut rng).unwrap();
            randomize_biases(&mut p, &mut rng);
            let n = 1 + rng.below(5);
            let x = random_matrix(n, m, &mut rng);
            let wh = random_matrix(n, d, &mut rng);
            let wr = random_matrix(n, m, &mut rng);
            let wx = random_matrix(n, m, &mut rng);
            let we: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();

            let dot = |a: &Matrix, b: &Matrix| {
                a.as_slice()
                    .iter()
                    .zip(b.as_slice())
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
            };
            let loss = |f: &AeForward| {
                dot(&f.h, &wh)
                    + dot(&f.directions, &wr)
                    + dot(&f.reconstruction, &wx)
                    + f.errors.iter().zip(&we).map(|(e, w)| e * w).sum::<f64>()
            };
            let fwd = p.forward(&x).unwrap();
            let up = EncodingGrads {
                h: Some(wh.clone()),
                r: Some(wr.clone()),
                e: Some(we.clone()),
                reconstruction: Some(wx.clone()),
            };
            let g = p.backward(&fwd, &up).unwrap();
            let numeric = finite_diff_grad(&p, 1e-5, |q| loss(&q.forward(&x).unwrap())).unwrap();
            let err = max_relative_error(&numeric, &g.params.tensors());
            assert!(err < 1e-4, "trial {trial}: params rel err {err}");

            let xs = vec![x.clone()];
            let numeric_x =
                finite_diff_grad(&xs, 1e-5, |v| loss(&p.forward(&v[0]).unwrap())).unwrap();
            let err = max_relative_error(&numeric_x, &[&g.input]);
            assert!(err < 1e-4, "trial {trial}: input rel err {err}");
        }
    }
}
