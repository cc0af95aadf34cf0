//! Procedural sprite datasets: one hard-edged shape (square / ellipse /
//! triangle) per image on a black background, positioned and scaled by the
//! factor values. Rendering is pure — identical config and factors give
//! bit-identical pixels — so images double as ground-truth lookup keys.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::scalar::Scalar;

use super::{FactorSpec, GroundTruthDataset, Storage};

/// Configuration for [`make_toy_grid`]. Each `Some(k)` adds a factor with
/// `k` classes; absent factors are frozen at their mid-range value.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    /// Image side length in pixels (square canvas, one channel).
    pub side: usize,
    /// Number of shape classes (1..=3: square, ellipse, triangle).
    pub shapes: Option<usize>,
    /// Number of scale classes.
    pub scales: Option<usize>,
    /// Number of horizontal position classes.
    pub pos_x: Option<usize>,
    /// Number of vertical position classes.
    pub pos_y: Option<usize>,
    /// Recorded dataset seed (rendering itself is deterministic).
    pub seed: u64,
    /// Anti-aliased coverage rendering instead of binary pixels.
    pub smooth: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            side: 32,
            shapes: None,
            scales: None,
            pos_x: None,
            pos_y: None,
            seed: 0,
            smooth: false,
        }
    }
}

impl ToyConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("toy dataset config: {e}")))
    }
}

const SHAPE_NAMES: [&str; 3] = ["square", "ellipse", "triangle"];

/// Shape geometry shared by the binary test and the coverage estimate.
#[derive(Debug, Clone, Copy)]
struct Sprite {
    shape: usize,
    cx: f64,
    cy: f64,
    r: f64,
}

impl Sprite {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        match self.shape {
            // Square: Chebyshev ball of radius r.
            0 => dx.abs() <= self.r && dy.abs() <= self.r,
            // Ellipse: horizontal semi-axis r, vertical 0.75 r.
            1 => {
                let a = dx / self.r;
                let b = dy / (0.75 * self.r);
                a * a + b * b <= 1.0
            }
            // Upward isoceles triangle with apex at cy - r.
            _ => dy >= -self.r && dy <= self.r && dx.abs() <= (dy + self.r) / 2.0,
        }
    }
}

/// Renders sprites for a fixed canvas geometry.
#[derive(Debug, Clone)]
pub(crate) struct ToyRenderer {
    side: usize,
    smooth: bool,
    /// Largest sprite radius; also the margin that keeps sprites inside the
    /// canvas at every position.
    r_max: f64,
    r_min: f64,
    /// Factor slot (into the dataset's factor vector) for each geometry
    /// parameter, `None` when the factor is frozen.
    shape_slot: Option<usize>,
    scale_slot: Option<usize>,
    pos_x_slot: Option<usize>,
    pos_y_slot: Option<usize>,
}

impl ToyRenderer {
    fn sprite(&self, specs: &[FactorSpec], factors: &[usize]) -> Sprite {
        let value = |slot: Option<usize>| -> f64 {
            match slot {
                Some(i) => specs[i].values[factors[i]],
                None => 0.5,
            }
        };
        let shape = match self.shape_slot {
            Some(i) => factors[i],
            None => 0,
        };
        let r = self.r_min + value(self.scale_slot) * (self.r_max - self.r_min);
        let margin = self.r_max;
        let span = (self.side - 1) as f64 - 2.0 * margin;
        let cx = margin + value(self.pos_x_slot) * span;
        let cy = margin + value(self.pos_y_slot) * span;
        Sprite { shape, cx, cy, r }
    }

    /// Render one image, shape `(side, side, 1)`. Row index is y, column x.
    pub(crate) fn render<S: Scalar>(&self, specs: &[FactorSpec], factors: &[usize]) -> Array3<S> {
        let sprite = self.sprite(specs, factors);
        let mut img = Array3::<S>::zeros((self.side, self.side, 1));
        for y in 0..self.side {
            for x in 0..self.side {
                let v = if self.smooth {
                    // 4x4 subpixel coverage, 17 gray levels.
                    let mut hits = 0;
                    for sy in 0..4 {
                        for sx in 0..4 {
                            let px = x as f64 - 0.375 + 0.25 * sx as f64;
                            let py = y as f64 - 0.375 + 0.25 * sy as f64;
                            if sprite.contains(px, py) {
                                hits += 1;
                            }
                        }
                    }
                    hits as f64 / 16.0
                } else if sprite.contains(x as f64, y as f64) {
                    1.0
                } else {
                    0.0
                };
                img[[y, x, 0]] = S::from_f64(v);
            }
        }
        img
    }
}

/// Build the full Cartesian-product toy dataset described by `config`.
///
/// Factor order is shape, scale, pos_x, pos_y, restricted to the factors
/// present in the config.
pub fn make_toy_grid(config: &ToyConfig) -> Result<GroundTruthDataset> {
    let side = config.side;
    if let Some(k) = config.shapes {
        if k == 0 || k > 3 {
            return Err(Error::config(format!(
                "shapes cardinality {k} outside 1..=3 ({})",
                SHAPE_NAMES.join(", ")
            )));
        }
    }
    // Geometry: sprites reach radius side/4 and keep a margin of the same
    // size, so every scale/position combination stays on canvas.
    let r_max = side as f64 / 4.0;
    let r_min = side as f64 / 8.0;
    let span = (side as f64 - 1.0) - 2.0 * r_max;
    if r_min < 1.0 || span < 0.0 {
        return Err(Error::config(format!(
            "side {side} too small: sprite extent {r_max:.1}px exceeds canvas margins \
             at max scale/position (need side >= 8)"
        )));
    }

    let mut specs = Vec::new();
    let mut shape_slot = None;
    let mut scale_slot = None;
    let mut pos_x_slot = None;
    let mut pos_y_slot = None;
    if let Some(k) = config.shapes {
        shape_slot = Some(specs.len());
        specs.push(FactorSpec::new("shape", k)?);
    }
    if let Some(k) = config.scales {
        scale_slot = Some(specs.len());
        specs.push(FactorSpec::new("scale", k)?);
    }
    if let Some(k) = config.pos_x {
        pos_x_slot = Some(specs.len());
        specs.push(FactorSpec::new("pos_x", k)?);
    }
    if let Some(k) = config.pos_y {
        pos_y_slot = Some(specs.len());
        specs.push(FactorSpec::new("pos_y", k)?);
    }

    let renderer = ToyRenderer {
        side,
        smooth: config.smooth,
        r_max,
        r_min,
        shape_slot,
        scale_slot,
        pos_x_slot,
        pos_y_slot,
    };
    let renderer_id = if config.smooth {
        format!("toy-smooth-v1-side{side}")
    } else {
        format!("toy-binary-v1-side{side}")
    };
    Ok(GroundTruthDataset::from_parts(
        specs,
        (side, side, 1),
        renderer_id,
        config.seed,
        Storage::Toy(renderer),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, StreamId};

    fn full_config() -> ToyConfig {
        ToyConfig {
            side: 32,
            shapes: Some(3),
            scales: Some(4),
            pos_x: Some(5),
            pos_y: Some(5),
            seed: 7,
            smooth: false,
        }
    }

    #[test]
    fn grid_has_product_cardinality() {
        let ds = make_toy_grid(&full_config()).unwrap();
        assert_eq!(ds.len(), 3 * 4 * 5 * 5);
        assert_eq!(ds.radices(), vec![3, 4, 5, 5]);
        assert_eq!(ds.image_shape(), (32, 32, 1));
    }

    #[test]
    fn binary_pixels_only() {
        let ds = make_toy_grid(&full_config()).unwrap();
        let mut rng = stream_rng(3, StreamId::Batch);
        let (_, batch) = ds.sample_batch::<f64, _>(16, &mut rng).unwrap();
        for &v in batch.pixels().iter() {
            assert!(v == 0.0 || v == 1.0, "binary renderer produced {v}");
        }
    }

    #[test]
    fn centered_square_is_flip_symmetric() {
        // Single-value position factors center the sprite; a square there
        // must be symmetric under horizontal flip.
        let cfg = ToyConfig {
            side: 32,
            shapes: Some(1),
            scales: Some(1),
            pos_x: Some(1),
            pos_y: Some(1),
            seed: 0,
            smooth: false,
        };
        let ds = make_toy_grid(&cfg).unwrap();
        let img = ds.image::<f64>(0).unwrap();
        let side = 32;
        for y in 0..side {
            for x in 0..side {
                assert_eq!(img[[y, x, 0]], img[[y, side - 1 - x, 0]]);
            }
        }
        // And it is actually a filled square: bounding box of lit pixels is
        // square and fully lit.
        let lit: Vec<(usize, usize)> = (0..side)
            .flat_map(|y| (0..side).map(move |x| (y, x)))
            .filter(|&(y, x)| img[[y, x, 0]] == 1.0)
            .collect();
        assert!(!lit.is_empty());
        let (y0, y1) = (
            lit.iter().map(|p| p.0).min().unwrap(),
            lit.iter().map(|p| p.0).max().unwrap(),
        );
        let (x0, x1) = (
            lit.iter().map(|p| p.1).min().unwrap(),
            lit.iter().map(|p| p.1).max().unwrap(),
        );
        assert_eq!(y1 - y0, x1 - x0);
        assert_eq!(lit.len(), (y1 - y0 + 1) * (x1 - x0 + 1));
    }

    #[test]
    fn rendering_is_deterministic() {
        let ds1 = make_toy_grid(&full_config()).unwrap();
        let ds2 = make_toy_grid(&full_config()).unwrap();
        for idx in [0usize, 17, 99, 299] {
            assert_eq!(ds1.image::<f32>(idx).unwrap(), ds2.image::<f32>(idx).unwrap());
        }
    }

    #[test]
    fn distinct_factors_give_distinct_images() {
        let ds = make_toy_grid(&full_config()).unwrap();
        let mut seen = std::collections::HashSet::new();
        for idx in 0..ds.len() {
            let img = ds.image::<f32>(idx).unwrap();
            let bytes: Vec<u8> = img.iter().map(|&v| v as u8).collect();
            assert!(seen.insert(bytes), "duplicate image at index {idx}");
        }
    }

    #[test]
    fn too_small_canvas_rejected() {
        let cfg = ToyConfig {
            side: 4,
            ..full_config()
        };
        let err = make_toy_grid(&cfg).unwrap_err().to_string();
        assert!(err.contains("sprite extent"), "got: {err}");
    }

    #[test]
    fn smallest_valid_canvas_renders() {
        let cfg = ToyConfig {
            side: 8,
            ..full_config()
        };
        let ds = make_toy_grid(&cfg).unwrap();
        for idx in 0..ds.len() {
            let img = ds.image::<f32>(idx).unwrap();
            assert!(img.iter().any(|&v| v > 0.0), "empty sprite at {idx}");
        }
    }

    #[test]
    fn position_factor_moves_sprite() {
        let cfg = ToyConfig {
            side: 32,
            shapes: None,
            scales: None,
            pos_x: Some(3),
            pos_y: None,
            seed: 0,
            smooth: false,
        };
        let ds = make_toy_grid(&cfg).unwrap();
        let centroid = |img: &Array3<f64>| -> f64 {
            let mut sx = 0.0;
            let mut n = 0.0;
            for y in 0..32 {
                for x in 0..32 {
                    if img[[y, x, 0]] > 0.5 {
                        sx += x as f64;
                        n += 1.0;
                    }
                }
            }
            sx / n
        };
        let c0 = centroid(&ds.image::<f64>(0).unwrap());
        let c1 = centroid(&ds.image::<f64>(1).unwrap());
        let c2 = centroid(&ds.image::<f64>(2).unwrap());
        assert!(c0 < c1 && c1 < c2, "centroids not increasing: {c0} {c1} {c2}");
    }

    #[test]
    fn smooth_mode_has_intermediate_values() {
        let cfg = ToyConfig {
            smooth: true,
            shapes: Some(3),
            ..full_config()
        };
        let ds = make_toy_grid(&cfg).unwrap();
        // Ellipse boundaries produce fractional coverage somewhere.
        let mut found_fractional = false;
        for idx in 0..ds.len() {
            let img = ds.image::<f64>(idx).unwrap();
            if img.iter().any(|&v| v > 0.0 && v < 1.0) {
                found_fractional = true;
            }
            for &v in img.iter() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        assert!(found_fractional);
    }

    #[test]
    fn toml_roundtrip_and_unknown_key_rejected() {
        let cfg: ToyConfig =
            ToyConfig::from_toml("side = 16\nshapes = 2\npos_x = 4\nseed = 9\n").unwrap();
        assert_eq!(cfg.side, 16);
        assert_eq!(cfg.shapes, Some(2));
        assert_eq!(cfg.pos_x, Some(4));
        assert_eq!(cfg.scales, None);
        assert_eq!(cfg.seed, 9);
        assert!(ToyConfig::from_toml("side = 16\nbogus = 1\n").is_err());
    }

    #[test]
    fn fixed_factor_sampling_is_uniform_elsewhere() {
        // Chi-square uniformity check on the free factors when one factor
        // is pinned. 95th percentile of chi2(k-1) for k=5 is 9.49; use a
        // generous 99.9% bound to keep the test deterministic-stable.
        let ds = make_toy_grid(&full_config()).unwrap();
        let mut rng = stream_rng(5, StreamId::Batch);
        let n = 4000;
        let indices = ds.sample_fixed_factor_indices(1, 2, n, &mut rng).unwrap();
        let mut counts = vec![vec![0usize; 5]; 4];
        for &idx in &indices {
            let f = ds.index_to_factors(idx).unwrap();
            assert_eq!(f[1], 2, "pinned factor drifted");
            counts[0][f[0]] += 1;
            counts[2][f[2]] += 1;
            counts[3][f[3]] += 1;
        }
        for (fid, k) in [(0usize, 3usize), (2, 5), (3, 5)] {
            let expected = n as f64 / k as f64;
            let chi2: f64 = counts[fid][..k]
                .iter()
                .map(|&c| {
                    let d = c as f64 - expected;
                    d * d / expected
                })
                .sum();
            // 99.9% quantiles: chi2(2)=13.8, chi2(4)=18.5.
            assert!(chi2 < 18.5, "factor {fid} chi2 {chi2} too large");
        }
    }
}
