//! Factorized Q-network: one two-hidden-layer MLP, shared by every station,
//! maps a station's feature row to Q-values for the seven price changes.

use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::demand::fill_from;
use crate::env::NUM_ACTIONS;
use crate::error::{Error, Result};
use crate::matrix::{accumulate_mat_vec, accumulate_outer, accumulate_vec_mat, Matrix};
use crate::optim::Parameters;
use crate::params_io::{self, FlatParams};

pub const Q_MAGIC: &str = "evb-q";
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct QParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub w3: Matrix,
    pub b3: Vec<f64>,
}

impl QParams {
    pub fn zeros(features: usize, h1: usize, h2: usize) -> Self {
        Self {
            w1: Matrix::zeros(features, h1),
            b1: vec![0.0; h1],
            w2: Matrix::zeros(h1, h2),
            b2: vec![0.0; h2],
            w3: Matrix::zeros(h2, NUM_ACTIONS),
            b3: vec![0.0; NUM_ACTIONS],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(features: usize, h1: usize, h2: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(features, h1, h2);
        for w in [&mut p.w1, &mut p.w2, &mut p.w3] {
            let limit = (6.0 / (w.rows() + w.cols()) as f64).sqrt();
            for v in w.as_mut_slice() {
                *v = rng.gen_range(-limit..=limit);
            }
        }
        p
    }

    pub fn features(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> (usize, usize) {
        (self.w1.cols(), self.w2.cols())
    }

    /// First eight bytes of SHA-256 over the parameter bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h = Sha256::new();
        for s in self.slices() {
            for v in s {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        params_io::save_flat(path, Q_MAGIC, &self.dims(), &self.flatten())
    }

    pub fn write_to<W: std::io::Write>(&self, out: W) -> std::io::Result<()> {
        params_io::write_flat(out, Q_MAGIC, &self.dims(), &self.flatten())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_flat(&params_io::load_flat(path, Q_MAGIC)?)
    }

    pub fn from_flat(flat: &FlatParams) -> Result<Self> {
        if flat.dim("A")? != NUM_ACTIONS {
            return Err(Error::Validation(format!("Q head must have {NUM_ACTIONS} outputs")));
        }
        let mut p = Self::zeros(flat.dim("F")?, flat.dim("H1")?, flat.dim("H2")?);
        fill_from(&mut p, &flat.values)?;
        Ok(p)
    }

    fn dims(&self) -> [(&'static str, usize); 4] {
        let (h1, h2) = self.hidden();
        [("F", self.features()), ("H1", h1), ("H2", h2), ("A", NUM_ACTIONS)]
    }
}

impl Parameters for QParams {
    fn slices(&self) -> Vec<&[f64]> {
        vec![
            self.w1.as_slice(),
            &self.b1,
            self.w2.as_slice(),
            &self.b2,
            self.w3.as_slice(),
            &self.b3,
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
            self.w3.as_mut_slice(),
            &mut self.b3,
        ]
    }
}

struct RowTrace {
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    q: Vec<f64>,
}

fn forward_row(params: &QParams, x: &[f64]) -> RowTrace {
    let mut z1 = params.b1.clone();
    accumulate_vec_mat(x, &params.w1, &mut z1);
    let a1: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
    let mut z2 = params.b2.clone();
    accumulate_vec_mat(&a1, &params.w2, &mut z2);
    let a2: Vec<f64> = z2.iter().map(|v| v.max(0.0)).collect();
    let mut q = params.b3.clone();
    accumulate_vec_mat(&a2, &params.w3, &mut q);
    RowTrace { z1, a1, z2, a2, q }
}

fn backward_row(params: &QParams, x: &[f64], trace: &RowTrace, dq: &[f64], grads: &mut QParams) {
    accumulate_outer(&trace.a2, dq, &mut grads.w3);
    for (g, d) in grads.b3.iter_mut().zip(dq) {
        *g += d;
    }
    let mut dz2 = vec![0.0; trace.z2.len()];
    accumulate_mat_vec(&params.w3, dq, &mut dz2);
    for (d, z) in dz2.iter_mut().zip(&trace.z2) {
        if *z <= 0.0 {
            *d = 0.0;
        }
    }
    accumulate_outer(&trace.a1, &dz2, &mut grads.w2);
    for (g, d) in grads.b2.iter_mut().zip(&dz2) {
        *g += d;
    }
    let mut dz1 = vec![0.0; trace.z1.len()];
    accumulate_mat_vec(&params.w2, &dz2, &mut dz1);
    for (d, z) in dz1.iter_mut().zip(&trace.z1) {
        if *z <= 0.0 {
            *d = 0.0;
        }
    }
    accumulate_outer(x, &dz1, &mut grads.w1);
    for (g, d) in grads.b1.iter_mut().zip(&dz1) {
        *g += d;
    }
}

fn check_features(params: &QParams, features: &Matrix) -> Result<()> {
    if features.cols() != params.features() {
        return Err(Error::Argument(format!(
            "feature width {} does not match the network input {}",
            features.cols(),
            params.features()
        )));
    }
    Ok(())
}

/// `N x 7` Q-values, one row per station.
pub fn q_forward(params: &QParams, features: &Matrix) -> Result<Matrix> {
    check_features(params, features)?;
    let mut out = Matrix::zeros(features.rows(), NUM_ACTIONS);
    for i in 0..features.rows() {
        out.row_mut(i).copy_from_slice(&forward_row(params, features.row(i)).q);
    }
    Ok(out)
}

/// Accumulates the gradient of `sum_{i,a} upstream[i][a] * Q[i][a]` into
/// `grads`.
pub fn q_backward(params: &QParams, features: &Matrix, upstream: &Matrix, grads: &mut QParams) -> Result<()> {
    check_features(params, features)?;
    if upstream.rows() != features.rows() || upstream.cols() != NUM_ACTIONS {
        return Err(Error::Argument("upstream gradient has the wrong shape".into()));
    }
    for i in 0..features.rows() {
        let x = features.row(i);
        let trace = forward_row(params, x);
        backward_row(params, x, &trace, upstream.row(i), grads);
    }
    Ok(())
}
