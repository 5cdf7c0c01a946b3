//! Fixture builders shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use phlora::checkpoint::{save_checkpoint, Checkpoint, Dtype};
use phlora::linalg::orthonormal_basis;
use phlora::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `U diag(sigma) Vᵀ` with random orthonormal `U` (rows×q) and `V` (cols×q).
pub fn with_spectrum(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sigma: &[f64]) -> Matrix {
    let q = sigma.len();
    let u = orthonormal_basis(&gaussian(rng, rows, q));
    let v = orthonormal_basis(&gaussian(rng, cols, q));
    Matrix::from_fn(rows, cols, |i, j| (0..q).map(|t| u[(i, t)] * sigma[t] * v[(j, t)]).sum())
}

/// Product of two Gaussian factors: rank exactly `q` with probability one.
pub fn random_rank(rng: &mut ChaCha8Rng, rows: usize, cols: usize, q: usize) -> Matrix {
    gaussian(rng, rows, q).matmul(&gaussian(rng, q, cols)).unwrap()
}

/// One layer of a synthetic pair; `delta == None` leaves the tensor unchanged.
pub struct Layer {
    pub name: String,
    pub base: Matrix,
    pub delta: Option<Matrix>,
    pub dtype: Dtype,
}

impl Layer {
    pub fn new(name: &str, base: Matrix, delta: Option<Matrix>, dtype: Dtype) -> Self {
        Self {
            name: name.to_string(),
            base,
            delta,
            dtype,
        }
    }

    pub fn finetuned(&self) -> Matrix {
        match &self.delta {
            Some(d) => self.base.add(d).unwrap(),
            None => self.base.clone(),
        }
    }
}

/// Base and fine-tuned checkpoints plus a shared 1-D F16 tensor that never changes.
pub fn build_pair(layers: &[Layer]) -> (Checkpoint, Checkpoint) {
    let mut base = Checkpoint::new();
    let mut ft = Checkpoint::new();
    for l in layers {
        base.insert_matrix(&l.name, &l.base, l.dtype).unwrap();
        ft.insert_matrix(&l.name, &l.finetuned(), l.dtype).unwrap();
    }
    let bias: Vec<u8> = [0x3c00u16, 0xbc00, 0x3555, 0x0001]
        .iter()
        .flat_map(|h| h.to_le_bytes())
        .collect();
    for c in [&mut base, &mut ft] {
        c.insert("norm.bias", Dtype::F16, vec![4], &bias).unwrap();
        c.metadata_mut().insert("format".into(), "pt".into());
    }
    (base, ft)
}

pub fn write_pair(dir: &Path, layers: &[Layer]) -> (PathBuf, PathBuf) {
    let (base, ft) = build_pair(layers);
    let bp = dir.join("base.safetensors");
    let fp = dir.join("finetuned.safetensors");
    save_checkpoint(&base, &bp).unwrap();
    save_checkpoint(&ft, &fp).unwrap();
    (bp, fp)
}

/// Three F64 linear layers, each with an injected rank-`q` delta.
pub fn rank_q_layers(seed: u64, q: usize) -> Vec<Layer> {
    let mut r = rng(seed);
    [("model.layers.0.q_proj.weight", 24, 16), ("model.layers.0.v_proj.weight", 16, 16), ("model.layers.1.o_proj.weight", 12, 20)]
        .iter()
        .map(|&(name, d, k)| {
            let base = gaussian(&mut r, d, k);
            let delta = random_rank(&mut r, d, k, q).scale(0.05);
            Layer::new(name, base, Some(delta), Dtype::F64)
        })
        .collect()
}

pub fn phlora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phlora"))
        .args(args)
        .env_remove("PHLORA_SEED")
        .output()
        .expect("binary runs")
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// `Σ σᵢ²` for `i > r`, from the eigenvalues of the Gram matrix computed by
/// cyclic two-sided Jacobi. Independent of the library's one-sided kernel.
pub fn gram_tail(m: &Matrix, r: usize) -> f64 {
    let mut eig = gram_eigenvalues(m);
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    eig.iter().skip(r).map(|e| e.max(0.0)).sum()
}

#[allow(clippy::needless_range_loop)]
pub fn gram_eigenvalues(m: &Matrix) -> Vec<f64> {
    let small = if m.rows() < m.cols() { m.clone() } else { m.transpose() };
    // small is n×c with n ≤ c; its Gram is n×n.
    let n = small.rows();
    let mut g: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| small.row(i).iter().zip(small.row(j)).map(|(a, b)| a * b).sum()).collect())
        .collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| g[i][j] * g[i][j]).sum();
        let diag: f64 = (0..n).map(|i| g[i][i] * g[i][i]).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if g[p][q] == 0.0 {
                    continue;
                }
                let theta = (g[q][q] - g[p][p]) / (2.0 * g[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (gkp, gkq) = (g[k][p], g[k][q]);
                    g[k][p] = c * gkp - s * gkq;
                    g[k][q] = s * gkp + c * gkq;
                }
                for k in 0..n {
                    let (gpk, gqk) = (g[p][k], g[q][k]);
                    g[p][k] = c * gpk - s * gqk;
                    g[q][k] = s * gpk + c * gqk;
                }
            }
        }
    }
    (0..n).map(|i| g[i][i]).collect()
}
