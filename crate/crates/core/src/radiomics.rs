//! Named radiomics features over one labelled region of a volume: first-order
//! statistics, GLCM cluster prominence and GLDM gray-level variance.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{RegionMask, Volume3D};

const LOG_EPS: f64 = 2.2e-16;

/// The 13 unique direction vectors at distance 1 in 3D.
pub const DEFAULT_OFFSETS: [[i32; 3]; 13] = [
    [1, 0, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 1, 0],
    [1, -1, 0],
    [1, 0, 1],
    [1, 0, -1],
    [0, 1, 1],
    [0, 1, -1],
    [1, 1, 1],
    [1, 1, -1],
    [1, -1, 1],
    [1, -1, -1],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadiomicsConfig {
    pub bin_count: usize,
    /// Co-occurrence offsets; `None` means [`DEFAULT_OFFSETS`].
    pub offsets: Option<Vec<[i32; 3]>>,
    pub symmetric: bool,
    pub gldm_alpha: u16,
}

impl Default for RadiomicsConfig {
    fn default() -> Self {
        Self { bin_count: 32, offsets: None, symmetric: true, gldm_alpha: 0 }
    }
}

impl RadiomicsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bin_count == 0 || self.bin_count > u16::MAX as usize {
            return Err(Error::Config(format!("bin_count must lie in 1..=65535, got {}", self.bin_count)));
        }
        if let Some(offsets) = &self.offsets {
            if offsets.is_empty() || offsets.contains(&[0, 0, 0]) {
                return Err(Error::Config("offsets must be non-empty and non-zero".into()));
            }
        }
        Ok(())
    }

    pub fn offsets(&self) -> &[[i32; 3]] {
        self.offsets.as_deref().unwrap_or(&DEFAULT_OFFSETS)
    }
}

/// Discretized region: level `1..=bins` inside the region, 0 outside.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayGrid {
    pub dims: [usize; 3],
    pub bins: usize,
    pub levels: Vec<u16>,
}

impl GrayGrid {
    pub fn new(dims: [usize; 3], bins: usize, levels: Vec<u16>) -> Result<Self> {
        if levels.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!("{} levels for dims {dims:?}", levels.len())));
        }
        if bins == 0 || levels.iter().any(|&l| l as usize > bins) {
            return Err(Error::Config(format!("levels must lie in 0..={bins}")));
        }
        Ok(Self { dims, bins, levels })
    }

    fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    fn at(&self, x: i64, y: i64, z: i64) -> u16 {
        let [nx, ny, nz] = self.dims.map(|d| d as i64);
        if x < 0 || y < 0 || z < 0 || x >= nx || y >= ny || z >= nz {
            return 0;
        }
        self.levels[self.index(x as usize, y as usize, z as usize)]
    }

    pub fn voxel_count(&self) -> usize {
        self.levels.iter().filter(|&&l| l > 0).count()
    }

    /// Number of voxels per level, index 0 holding level 1.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.bins];
        for &l in self.levels.iter().filter(|&&l| l > 0) {
            h[l as usize - 1] += 1;
        }
        h
    }
}

fn region_values(volume: &Volume3D, mask: &RegionMask, region: u16) -> Result<Vec<f64>> {
    mask.ensure_matches(volume)?;
    let values: Vec<f64> = volume
        .intensities()
        .iter()
        .zip(mask.labels())
        .filter(|(_, &l)| l == region)
        .map(|(&v, _)| v as f64)
        .collect();
    if values.is_empty() {
        return Err(Error::RegionEmpty(region));
    }
    Ok(values)
}

/// Fixed-bin-count discretization of the voxels labelled `region`.
pub fn discretize(volume: &Volume3D, mask: &RegionMask, region: u16, bins: usize) -> Result<GrayGrid> {
    if bins == 0 || bins > u16::MAX as usize {
        return Err(Error::Config(format!("bin count must lie in 1..=65535, got {bins}")));
    }
    let values = region_values(volume, mask, region)?;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let g = bins as f64;
    let levels = volume
        .intensities()
        .iter()
        .zip(mask.labels())
        .map(|(&v, &l)| {
            if l != region {
                0
            } else if hi > lo {
                (((v as f64 - lo) / (hi - lo) * g).floor() as usize + 1).min(bins) as u16
            } else {
                1
            }
        })
        .collect();
    GrayGrid::new(volume.dims(), bins, levels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstOrder {
    pub energy: f64,
    pub entropy: f64,
    pub mean_absolute_deviation: f64,
    pub mean: f64,
    pub variance: f64,
}

/// Energy, mean, MAD and variance use raw intensities; entropy uses the binned histogram.
pub fn first_order(volume: &Volume3D, mask: &RegionMask, region: u16, bins: usize) -> Result<FirstOrder> {
    let values = region_values(volume, mask, region)?;
    let grid = discretize(volume, mask, region, bins)?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Ok(FirstOrder {
        energy: values.iter().map(|v| v * v).sum(),
        entropy: histogram_entropy(&grid.histogram()),
        mean_absolute_deviation: values.iter().map(|v| (v - mean).abs()).sum::<f64>() / n,
        mean,
        variance: values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n,
    })
}

/// Shannon entropy in bits of a count histogram.
pub fn histogram_entropy(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let e: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * (p + LOG_EPS).log2()
        })
        .sum();
    e.max(0.0)
}

/// Co-occurrence counts `G×G` (row-major, level 1 at index 0) for one offset.
pub fn glcm_counts(grid: &GrayGrid, offset: [i32; 3], symmetric: bool) -> Vec<f64> {
    let g = grid.bins;
    let mut m = vec![0.0; g * g];
    let [nx, ny, nz] = grid.dims;
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let a = grid.levels[grid.index(x, y, z)];
                if a == 0 {
                    continue;
                }
                let b = grid.at(x as i64 + offset[0] as i64, y as i64 + offset[1] as i64, z as i64 + offset[2] as i64);
                if b == 0 {
                    continue;
                }
                let (i, j) = (a as usize - 1, b as usize - 1);
                m[i * g + j] += 1.0;
                if symmetric {
                    m[j * g + i] += 1.0;
                }
            }
        }
    }
    m
}

/// Normalized co-occurrence matrix for one offset.
#[derive(Clone, Debug, PartialEq)]
pub struct Glcm {
    pub levels: usize,
    pub offset: [i32; 3],
    pub matrix: Vec<f64>,
}

impl Glcm {
    /// `None` when no in-region pair exists along `offset`.
    pub fn new(grid: &GrayGrid, offset: [i32; 3], symmetric: bool) -> Option<Self> {
        let mut matrix = glcm_counts(grid, offset, symmetric);
        let total: f64 = matrix.iter().sum();
        if total == 0.0 {
            return None;
        }
        matrix.iter_mut().for_each(|v| *v /= total);
        Some(Self { levels: grid.bins, offset, matrix })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[(i - 1) * self.levels + (j - 1)]
    }

    pub fn cluster_prominence(&self) -> f64 {
        let g = self.levels;
        let (mut mu_i, mut mu_j) = (0.0, 0.0);
        for i in 0..g {
            for j in 0..g {
                let p = self.matrix[i * g + j];
                mu_i += (i + 1) as f64 * p;
                mu_j += (j + 1) as f64 * p;
            }
        }
        let mut s = 0.0;
        for i in 0..g {
            for j in 0..g {
                let p = self.matrix[i * g + j];
                if p > 0.0 {
                    s += ((i + 1) as f64 + (j + 1) as f64 - mu_i - mu_j).powi(4) * p;
                }
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlcmFeatures {
    pub cluster_prominence: f64,
}

/// Features computed per offset and averaged over offsets that have at least one pair.
pub fn glcm_features(grid: &GrayGrid, offsets: &[[i32; 3]], symmetric: bool) -> Result<GlcmFeatures> {
    if grid.voxel_count() < 2 {
        return Err(Error::FeatureUndefined("GLCM needs at least two region voxels".into()));
    }
    let values: Vec<f64> =
        offsets.iter().filter_map(|&o| Glcm::new(grid, o, symmetric)).map(|m| m.cluster_prominence()).collect();
    if values.is_empty() {
        return Err(Error::FeatureUndefined("no voxel pair along any GLCM offset".into()));
    }
    Ok(GlcmFeatures { cluster_prominence: values.iter().sum::<f64>() / values.len() as f64 })
}

/// Dependence counts `D[g][k]`: voxels at level `g` with `k` dependent 26-neighbours.
pub fn gldm_matrix(grid: &GrayGrid, alpha: u16) -> Vec<[usize; 27]> {
    let mut d = vec![[0usize; 27]; grid.bins];
    let [nx, ny, nz] = grid.dims;
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let a = grid.levels[grid.index(x, y, z)];
                if a == 0 {
                    continue;
                }
                let mut k = 0;
                for dx in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dz in -1i64..=1 {
                            if (dx, dy, dz) == (0, 0, 0) {
                                continue;
                            }
                            let b = grid.at(x as i64 + dx, y as i64 + dy, z as i64 + dz);
                            if b > 0 && a.abs_diff(b) <= alpha {
                                k += 1;
                            }
                        }
                    }
                }
                d[a as usize - 1][k] += 1;
            }
        }
    }
    d
}

pub fn gldm_gray_level_variance(grid: &GrayGrid, alpha: u16) -> Result<f64> {
    let d = gldm_matrix(grid, alpha);
    let total: usize = d.iter().flatten().sum();
    if total == 0 {
        return Err(Error::FeatureUndefined("GLDM of an empty region".into()));
    }
    let pg: Vec<f64> = d.iter().map(|row| row.iter().sum::<usize>() as f64 / total as f64).collect();
    let mu: f64 = pg.iter().enumerate().map(|(g, p)| (g + 1) as f64 * p).sum();
    Ok(pg.iter().enumerate().map(|(g, p)| p * ((g + 1) as f64 - mu).powi(2)).sum())
}

/// All named features of one region, in output order.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeatures {
    pub region: u16,
    pub features: Vec<(&'static str, f64)>,
}

pub const FEATURE_NAMES: [&str; 7] = [
    "firstorder_energy",
    "firstorder_entropy",
    "firstorder_mean_absolute_deviation",
    "firstorder_mean",
    "firstorder_variance",
    "glcm_cluster_prominence",
    "gldm_gray_level_variance",
];

/// Extracts every named feature for `region`. An undefined GLCM feature is reported as NaN.
pub fn extract_region(volume: &Volume3D, mask: &RegionMask, region: u16, config: &RadiomicsConfig) -> Result<RegionFeatures> {
    config.validate()?;
    let fo = first_order(volume, mask, region, config.bin_count)?;
    let grid = discretize(volume, mask, region, config.bin_count)?;
    let prominence = match glcm_features(&grid, config.offsets(), config.symmetric) {
        Ok(f) => f.cluster_prominence,
        Err(Error::FeatureUndefined(why)) => {
            log::warn!("region {region}: {why}");
            f64::NAN
        }
        Err(e) => return Err(e),
    };
    let gldm = gldm_gray_level_variance(&grid, config.gldm_alpha)?;
    let values = [fo.energy, fo.entropy, fo.mean_absolute_deviation, fo.mean, fo.variance, prominence, gldm];
    Ok(RegionFeatures { region, features: FEATURE_NAMES.iter().copied().zip(values).collect() })
}

/// Extracts several regions in parallel; results follow `regions` order.
pub fn extract_regions(
    volume: &Volume3D,
    mask: &RegionMask,
    regions: &[u16],
    config: &RadiomicsConfig,
) -> Result<Vec<RegionFeatures>> {
    regions.par_iter().map(|&r| extract_region(volume, mask, r, config)).collect()
}

/// Writes `region,feature,value` rows.
pub fn write_csv<W: Write>(rows: &[RegionFeatures], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["region", "feature", "value"])?;
    for r in rows {
        for (name, v) in &r.features {
            out.write_record([r.region.to_string(), name.to_string(), format!("{v:?}")])?;
        }
    }
    out.flush()?;
    Ok(())
}
