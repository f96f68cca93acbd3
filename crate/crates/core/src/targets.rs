//! Built-in toy targets for synthesizing training corpora.
//!
//! The two-dimensional targets live on a `c x c` grid: variable 1 is the
//! column index along `x`, variable 2 the index along `y`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::Dims;
use crate::meta_simplex::JointDistribution;

/// Named targets understood by `synth`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// Two strongly coupled binaries, `p = (45, 5, 5, 45) / 100`.
    CoupledBinaries,
    /// Eight Gaussian bumps on a ring; every other bump has twice the weight.
    Mixture,
    /// Five-armed pinwheel.
    Pinwheel,
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coupled-binaries" => Ok(Target::CoupledBinaries),
            "mog" | "mixture" => Ok(Target::Mixture),
            "pinwheel" => Ok(Target::Pinwheel),
            other => Err(Error::Domain(format!("unknown target '{other}'"))),
        }
    }
}

impl Target {
    /// Dense joint of the target. `c` is ignored for the coupled binaries.
    pub fn joint(&self, c: usize) -> Result<JointDistribution> {
        match self {
            Target::CoupledBinaries => coupled_binaries(),
            Target::Mixture => ring_mixture(c),
            Target::Pinwheel => pinwheel(c),
        }
    }
}

pub fn coupled_binaries() -> Result<JointDistribution> {
    JointDistribution::new(Dims::new(2, 2)?, vec![0.45, 0.05, 0.05, 0.45])
}

/// Grid cell centers of the ring mixture, heavy components first.
pub fn ring_mixture_centers(c: usize) -> Vec<(usize, usize)> {
    let mid = (c as f64 - 1.0) / 2.0;
    let radius = 0.35 * c as f64;
    let mut heavy = Vec::new();
    let mut light = Vec::new();
    for k in 0..8 {
        let angle = k as f64 * PI / 4.0;
        let x = (mid + radius * angle.cos()).round().clamp(0.0, c as f64 - 1.0) as usize;
        let y = (mid + radius * angle.sin()).round().clamp(0.0, c as f64 - 1.0) as usize;
        if k % 2 == 0 {
            heavy.push((x, y));
        } else {
            light.push((x, y));
        }
    }
    heavy.extend(light);
    heavy
}

/// Eight isotropic bumps of width `c / 16` cells centered on grid cells around
/// a ring of radius `0.35 c`; even-indexed bumps carry weight 2, odd ones 1.
pub fn ring_mixture(c: usize) -> Result<JointDistribution> {
    if c < 8 {
        return Err(Error::Dims(format!("ring mixture needs c >= 8, got {c}")));
    }
    let dims = Dims::new(2, c)?;
    let sigma = c as f64 / 16.0;
    let centers = ring_mixture_centers(c);
    let mut weights = vec![0.0; c * c];
    for (k, &(cx, cy)) in centers.iter().enumerate() {
        let w = if k < 4 { 2.0 } else { 1.0 };
        for x in 0..c {
            for y in 0..c {
                let d2 = (x as f64 - cx as f64).powi(2) + (y as f64 - cy as f64).powi(2);
                weights[x * c + y] += w * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    JointDistribution::from_weights(dims, weights)
}

/// Pinwheel with five arms: latent radius `r ~ N(1, 0.3^2)` and tangential
/// offset `t ~ N(0, 0.1^2)`, rotated by `2 pi k / 5 + 0.25 e^r`. Cell masses are
/// computed by quadrature over the latent Gaussian on `[-2.2, 2.2]^2`.
pub fn pinwheel(c: usize) -> Result<JointDistribution> {
    let dims = Dims::new(2, c)?;
    const ARMS: usize = 5;
    const RADIAL_STD: f64 = 0.3;
    const TANGENTIAL_STD: f64 = 0.1;
    const RATE: f64 = 0.25;
    const EXTENT: f64 = 2.2;
    const NODES: usize = 600;
    let mut weights = vec![0.0; c * c];
    // Midpoint rule over +-5 standard deviations of each latent coordinate.
    let dr = 10.0 * RADIAL_STD / NODES as f64;
    let dt = 10.0 * TANGENTIAL_STD / NODES as f64;
    for a in 0..NODES {
        let zr = -5.0 + (a as f64 + 0.5) * 10.0 / NODES as f64;
        let r = 1.0 + RADIAL_STD * zr;
        let wr = (-0.5 * zr * zr).exp() * dr;
        for b in 0..NODES {
            let zt = -5.0 + (b as f64 + 0.5) * 10.0 / NODES as f64;
            let t = TANGENTIAL_STD * zt;
            let w = wr * (-0.5 * zt * zt).exp() * dt;
            for arm in 0..ARMS {
                let angle = 2.0 * PI * arm as f64 / ARMS as f64 + RATE * r.exp();
                let (s, co) = angle.sin_cos();
                let x = co * r - s * t;
                let y = s * r + co * t;
                let to_cell = |v: f64| ((v + EXTENT) / (2.0 * EXTENT) * c as f64).floor();
                let (cx, cy) = (to_cell(x), to_cell(y));
                if cx >= 0.0 && cy >= 0.0 && cx < c as f64 && cy < c as f64 {
                    weights[cx as usize * c + cy as usize] += w;
                }
            }
        }
    }
    JointDistribution::from_weights(dims, weights)
}
