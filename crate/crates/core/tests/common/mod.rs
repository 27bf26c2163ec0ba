#![allow(dead_code)]

use std::time::Duration;

use deepfusion::autotune::Stage1Kernel;
use deepfusion::fused::{KernelConfig, TileConfig};
use deepfusion::swiglu::MlpWeights;
use deepfusion::tensor::Matrix;
use deepfusion::Result;

/// Textbook SwiGLU stage 1 on raw slices, sharing no code with the crate.
pub fn naive_stage1(x: &Matrix, w: &MlpWeights) -> Vec<f64> {
    let (b, d, f) = (x.rows(), w.d_model(), w.d_ff());
    let (xv, up, gate) = (x.values(), w.w_up.values(), w.w_gate.values());
    let mut out = vec![0.0; b * f];
    for i in 0..b {
        for j in 0..f {
            let mut u = 0.0;
            let mut g = 0.0;
            for p in 0..d {
                u += xv[i * d + p] * up[p * f + j];
                g += xv[i * d + p] * gate[p * f + j];
            }
            out[i * f + j] = u * (g / (1.0 + (-g).exp()));
        }
    }
    out
}

pub fn naive_block(x: &Matrix, w: &MlpWeights) -> Vec<f64> {
    let a2 = naive_stage1(x, w);
    let (b, d, f) = (x.rows(), w.d_model(), w.d_ff());
    let down = w.w_down.values();
    let mut y = vec![0.0; b * d];
    for i in 0..b {
        for j in 0..d {
            y[i * d + j] = (0..f).map(|p| a2[i * f + p] * down[p * d + j]).sum();
        }
    }
    y
}

pub fn max_dev(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A correct fused kernel that sleeps before every run.
pub struct Sleepy {
    pub config: KernelConfig,
    pub delay: Duration,
}

impl Sleepy {
    pub fn new(tile: TileConfig, delay: Duration) -> Self {
        let mut config = KernelConfig::fused(tile);
        config.label = "rigged_sleep".into();
        Self { config, delay }
    }
}

impl Stage1Kernel for Sleepy {
    fn config(&self) -> &KernelConfig {
        &self.config
    }

    fn run(&self, x: &Matrix, w: &MlpWeights) -> Result<Matrix> {
        std::thread::sleep(self.delay);
        deepfusion::executor::run_stage1(&KernelConfig::fused(self.config.tile.unwrap()), x, w)
    }
}

/// A fast kernel whose output is off by a small amount in one element.
pub struct Corrupt {
    pub config: KernelConfig,
}

impl Corrupt {
    pub fn new(tile: TileConfig) -> Self {
        let mut config = KernelConfig::fused(tile);
        config.label = "rigged_corrupt".into();
        Self { config }
    }
}

impl Stage1Kernel for Corrupt {
    fn config(&self) -> &KernelConfig {
        &self.config
    }

    fn run(&self, x: &Matrix, w: &MlpWeights) -> Result<Matrix> {
        let out = deepfusion::executor::run_stage1(&KernelConfig::fused(self.config.tile.unwrap()), x, w)?;
        let (r, c) = out.dims();
        let mut v = out.into_values();
        v[0] += 1e-6;
        Matrix::from_vec(r, c, v)
    }
}
