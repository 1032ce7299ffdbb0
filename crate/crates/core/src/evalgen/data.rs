use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Something that yields i.i.d. batches of data points.
pub trait DataSource {
    fn dim(&self) -> usize;
    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Tensor;
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetKind {
    /// Isotropic Gaussian components with equal weights.
    GaussMixture { centers: Vec<[f64; 2]>, scales: Vec<f64> },
    /// Uniform angle, radius `radius + scale·ξ` with `ξ` a standard normal
    /// truncated to `[-4, 4]`.
    Ring { radius: f64, scale: f64 },
    /// Uniform on the dark squares of a `cells × cells` board on `[-1, 1]²`.
    Checkerboard { cells: usize },
}

impl DatasetKind {
    /// `k` components evenly spaced on a circle.
    pub fn gauss_mixture_circle(k: usize, radius: f64, scale: f64) -> Self {
        let centers = (0..k)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / k as f64;
                [radius * a.cos(), radius * a.sin()]
            })
            .collect();
        DatasetKind::GaussMixture {
            centers,
            scales: vec![scale; k],
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            DatasetKind::GaussMixture { centers, scales } => {
                if centers.is_empty() || centers.len() != scales.len() {
                    return Err(Error::config(
                        "mixture needs one scale per center and at least one center",
                    ));
                }
                if scales.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
                    return Err(Error::config("mixture scales must be finite and >= 0"));
                }
            }
            DatasetKind::Ring { radius, scale } => {
                if !(*radius >= 0.0 && *scale >= 0.0 && radius.is_finite() && scale.is_finite()) {
                    return Err(Error::config("ring radius and scale must be finite and >= 0"));
                }
            }
            DatasetKind::Checkerboard { cells } => {
                if *cells < 2 {
                    return Err(Error::config("checkerboard needs at least 2 cells per side"));
                }
            }
        }
        Ok(())
    }

    fn draw(&self, rng: &mut dyn RngCore) -> [f64; 2] {
        match self {
            DatasetKind::GaussMixture { centers, scales } => {
                let j = rng.random_range(0..centers.len());
                let (a, b): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                [centers[j][0] + scales[j] * a, centers[j][1] + scales[j] * b]
            }
            DatasetKind::Ring { radius, scale } => {
                let angle = rng.random_range(0.0..2.0 * PI);
                let xi = loop {
                    let v: f64 = rng.sample(StandardNormal);
                    if v.abs() <= 4.0 {
                        break v;
                    }
                };
                let r = radius + scale * xi;
                [r * angle.cos(), r * angle.sin()]
            }
            DatasetKind::Checkerboard { cells } => {
                let n = *cells;
                let (row, col) = loop {
                    let (r, c) = (rng.random_range(0..n), rng.random_range(0..n));
                    if (r + c) % 2 == 0 {
                        break (r, c);
                    }
                };
                let w = 2.0 / n as f64;
                [
                    -1.0 + w * (col as f64 + rng.random::<f64>()),
                    -1.0 + w * (row as f64 + rng.random::<f64>()),
                ]
            }
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetKind::GaussMixture { centers, .. } => write!(f, "gauss_mixture(k={})", centers.len()),
            DatasetKind::Ring { radius, scale } => write!(f, "ring(radius={radius}, scale={scale})"),
            DatasetKind::Checkerboard { cells } => write!(f, "checkerboard(cells={cells})"),
        }
    }
}

/// Dataset name as it appears in configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetName {
    GaussMixture,
    Ring,
    Checkerboard,
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss_mixture" => Ok(DatasetName::GaussMixture),
            "ring" => Ok(DatasetName::Ring),
            "checkerboard" => Ok(DatasetName::Checkerboard),
            other => Err(Error::config(format!(
                "unknown dataset '{other}' (expected gauss_mixture, ring or checkerboard)"
            ))),
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetName::GaussMixture => "gauss_mixture",
            DatasetName::Ring => "ring",
            DatasetName::Checkerboard => "checkerboard",
        })
    }
}

/// Draws used to estimate the normalization.
const CALIBRATION_DRAWS: usize = 1 << 16;
const CALIBRATION_SEED: u64 = 0x00ad_c0da_7a5e_ed00;

/// A 2-D toy distribution rescaled so that the pooled per-coordinate
/// standard deviation equals `sigma_data` and the mean is zero.
///
/// The shift and scale are estimated once from a fixed calibration stream,
/// so they depend only on the dataset parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub kind: DatasetKind,
    pub sigma_data: f64,
    pub shift: [f64; 2],
    pub scale: f64,
}

impl ToyDataset {
    pub fn new(kind: DatasetKind, sigma_data: f64) -> Result<Self> {
        kind.validate()?;
        if !(sigma_data > 0.0 && sigma_data.is_finite()) {
            return Err(Error::config(format!("sigma_data must be positive, got {sigma_data}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(CALIBRATION_SEED);
        let draws: Vec<[f64; 2]> = (0..CALIBRATION_DRAWS).map(|_| kind.draw(&mut rng)).collect();
        let n = draws.len() as f64;
        let mean = [
            draws.iter().map(|p| p[0]).sum::<f64>() / n,
            draws.iter().map(|p| p[1]).sum::<f64>() / n,
        ];
        let var = draws
            .iter()
            .map(|p| (p[0] - mean[0]).powi(2) + (p[1] - mean[1]).powi(2))
            .sum::<f64>()
            / (2.0 * n);
        if var <= 0.0 {
            return Err(Error::config(format!(
                "dataset {kind} has zero spread and cannot be normalized"
            )));
        }
        Ok(ToyDataset {
            kind,
            sigma_data,
            shift: mean,
            scale: sigma_data / var.sqrt(),
        })
    }

    /// Draws in the dataset's native coordinates, before normalization.
    pub fn sample_raw(&self, n: usize, rng: &mut dyn RngCore) -> Tensor {
        let data = (0..n).flat_map(|_| self.kind.draw(rng)).collect();
        Tensor::from_parts(vec![n, 2], data)
    }

    pub fn normalize(&self, raw: &Tensor) -> Tensor {
        let mut out = raw.clone();
        for row in out.data_mut().chunks_mut(2) {
            row[0] = (row[0] - self.shift[0]) * self.scale;
            row[1] = (row[1] - self.shift[1]) * self.scale;
        }
        out
    }
}

impl DataSource for ToyDataset {
    fn dim(&self) -> usize {
        2
    }

    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Tensor {
        self.normalize(&self.sample_raw(n, rng))
    }
}

/// A source that always returns copies of one point.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMass(pub Vec<f64>);

impl DataSource for PointMass {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn sample(&self, n: usize, _rng: &mut dyn RngCore) -> Tensor {
        let data = (0..n).flat_map(|_| self.0.iter().copied()).collect();
        Tensor::from_parts(vec![n, self.0.len()], data)
    }
}
