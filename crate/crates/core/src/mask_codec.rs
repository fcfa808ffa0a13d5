//! PCA coding of 28x28 instance masks into short coefficient vectors, used
//! as the detector's mask-prediction target space.

use candle_core::{Device, Tensor};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, MASK_DIM, MASK_SIZE};

pub const DEFAULT_N_PCA: usize = 60;

/// Frozen PCA basis: mean mask plus orthonormal principal components.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean: Vec<f32>,             // MASK_DIM
    pub components: Vec<Vec<f32>>,  // n_pca rows of MASK_DIM
    pub explained_variance: Vec<f32>,
}

/// Coefficients of one mask in a fitted basis.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskCode {
    pub coeffs: Vec<f32>,
}

impl PcaBasis {
    pub fn n_pca(&self) -> usize {
        self.components.len()
    }

    /// coeffs = components . (flatten(m) - mean)
    pub fn encode(&self, mask: &BinaryMask) -> Result<MaskCode> {
        self.encode_raw(&mask.to_f32())
    }

    pub fn encode_raw(&self, flat: &[f32]) -> Result<MaskCode> {
        if flat.len() != MASK_DIM {
            return Err(Error::Geometry(format!(
                "encode expects {MASK_DIM} values, got {}",
                flat.len()
            )));
        }
        let centered: Vec<f32> = flat.iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        let coeffs = self
            .components
            .iter()
            .map(|row| row.iter().zip(&centered).map(|(r, c)| r * c).sum())
            .collect();
        Ok(MaskCode { coeffs })
    }

    /// mean + components^T . coeffs, unclamped.
    pub fn decode(&self, code: &MaskCode) -> Result<Vec<f32>> {
        if code.coeffs.len() != self.n_pca() {
            return Err(Error::Geometry(format!(
                "decode expects {} coefficients, got {}",
                self.n_pca(),
                code.coeffs.len()
            )));
        }
        let mut out = self.mean.clone();
        for (row, &c) in self.components.iter().zip(&code.coeffs) {
            for (o, r) in out.iter_mut().zip(row) {
                *o += c * r;
            }
        }
        Ok(out)
    }

    /// Decode and binarize at the threshold.
    pub fn decode_binary(&self, code: &MaskCode, threshold: f32) -> Result<BinaryMask> {
        let soft = self.decode(code)?;
        Ok(BinaryMask {
            data: soft.iter().map(|&v| u8::from(v >= threshold)).collect(),
        })
    }

    /// Components as an (n_pca, MASK_DIM) tensor for the differentiable path.
    pub fn components_tensor(&self, dev: &Device) -> Result<Tensor> {
        let flat: Vec<f32> = self.components.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, (self.n_pca(), MASK_DIM), dev)?)
    }

    pub fn mean_tensor(&self, dev: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.mean.clone(), MASK_DIM, dev)?)
    }

    /// Differentiable decode of a batch of codes (m, n_pca) to soft masks
    /// (m, 28, 28), clamped to [0,1] for dice.
    pub fn decode_tensor(&self, codes: &Tensor, clamp: bool) -> Result<Tensor> {
        let comps = self.components_tensor(codes.device())?;
        let mean = self.mean_tensor(codes.device())?;
        let m = codes.dim(0)?;
        let decoded = codes.matmul(&comps)?.broadcast_add(&mean)?;
        let decoded = if clamp {
            decoded.clamp(0f32, 1f32)?
        } else {
            decoded
        };
        Ok(decoded.reshape((m, MASK_SIZE, MASK_SIZE))?)
    }
}

/// Fit the top-`n_pca` principal components of the flattened masks. Uses the
/// Gram-matrix route when there are fewer samples than pixels.
pub fn fit_basis(masks: &[BinaryMask], n_pca: usize) -> Result<PcaBasis> {
    let m = masks.len();
    if m < n_pca {
        return Err(Error::Config(format!(
            "PCA needs at least n_pca={n_pca} masks, got {m}; reduce n_pca"
        )));
    }
    let mut mean = vec![0f64; MASK_DIM];
    for mask in masks {
        for (acc, &v) in mean.iter_mut().zip(&mask.data) {
            *acc += v as f64;
        }
    }
    for v in &mut mean {
        *v /= m as f64;
    }
    // centered data, rows = samples
    let x = DMatrix::<f64>::from_fn(m, MASK_DIM, |i, j| masks[i].data[j] as f64 - mean[j]);

    let (eigvals, comps): (Vec<f64>, Vec<DVector<f64>>) = if m < MASK_DIM {
        // gram trick: eigvecs of X X^T lift to X^T u / sqrt(lambda)
        let gram = &x * x.transpose();
        let eig = gram.symmetric_eigen();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let mut vals = Vec::new();
        let mut vecs = Vec::new();
        for &i in order.iter().take(n_pca) {
            let lambda = eig.eigenvalues[i].max(0.0);
            let u = eig.eigenvectors.column(i);
            let mut v = x.transpose() * u;
            let norm = v.norm();
            if norm > 1e-10 {
                v /= norm;
            }
            vals.push(lambda / m as f64);
            vecs.push(v);
        }
        (vals, vecs)
    } else {
        let cov = x.transpose() * &x / m as f64;
        let eig = cov.symmetric_eigen();
        let mut order: Vec<usize> = (0..MASK_DIM).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let mut vals = Vec::new();
        let mut vecs = Vec::new();
        for &i in order.iter().take(n_pca) {
            vals.push(eig.eigenvalues[i].max(0.0));
            vecs.push(eig.eigenvectors.column(i).into_owned());
        }
        (vals, vecs)
    };

    // zero-variance directions come out as zero vectors; replace with unit
    // axis vectors orthogonal in the degenerate case so invariants hold
    let mut components = Vec::with_capacity(n_pca);
    for (k, v) in comps.iter().enumerate() {
        if v.norm() < 0.5 {
            let mut axis = vec![0f32; MASK_DIM];
            axis[k % MASK_DIM] = 1.0;
            components.push(axis);
        } else {
            components.push(v.iter().map(|&x| x as f32).collect());
        }
    }
    Ok(PcaBasis {
        mean: mean.iter().map(|&v| v as f32).collect(),
        components,
        explained_variance: eigvals.iter().map(|&v| v as f32).collect(),
    })
}
