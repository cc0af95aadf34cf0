//! Ground-truth-factor datasets.
//!
//! A dataset enumerates the full Cartesian product of its factors of
//! variation; every factor combination maps to exactly one image. Two
//! backends exist: the procedural toy renderer ([`toy`]) and the archive
//! adapter ([`archive`]). Both expose the same sampling surface, which is
//! all the metrics and the trainer ever touch.

pub mod archive;
pub mod toy;

use ndarray::{Array2, Array3, Array4};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::scalar::Scalar;

pub use toy::{make_toy_grid, ToyConfig};

/// One factor of variation: a name, its cardinality and the normalized
/// scalar value each class index maps to.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSpec {
    pub name: String,
    pub cardinality: usize,
    pub values: Vec<f64>,
}

impl FactorSpec {
    /// Normalized values `i / (cardinality - 1)`; a lone value maps to 0.5
    /// so degenerate factors sit mid-range.
    pub fn new(name: impl Into<String>, cardinality: usize) -> Result<Self> {
        if cardinality == 0 {
            return Err(Error::config(format!(
                "factor {:?} has zero cardinality",
                name.into()
            )));
        }
        let values = if cardinality == 1 {
            vec![0.5]
        } else {
            (0..cardinality)
                .map(|i| i as f64 / (cardinality - 1) as f64)
                .collect()
        };
        Ok(FactorSpec {
            name: name.into(),
            cardinality,
            values,
        })
    }

    pub fn with_values(name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if values.is_empty() {
            return Err(Error::config(format!("factor {name:?} has zero cardinality")));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "factor {name:?} values must be strictly increasing"
            )));
        }
        Ok(FactorSpec {
            name,
            cardinality: values.len(),
            values,
        })
    }
}

/// A batch of images, shape `(batch, height, width, channels)`, pixels in
/// `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImageBatch<S: Scalar> {
    pixels: Array4<S>,
}

impl<S: Scalar> ImageBatch<S> {
    pub fn new(pixels: Array4<S>) -> Result<Self> {
        for &v in pixels.iter() {
            if !v.is_finite() || v < S::zero() || v > S::one() {
                return Err(Error::data(format!(
                    "pixel value {v} outside [0, 1]"
                )));
            }
        }
        Ok(ImageBatch { pixels })
    }

    pub fn pixels(&self) -> &Array4<S> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array4<S> {
        self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (height, width, channels) of each image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.pixels.shape();
        (s[1], s[2], s[3])
    }
}

/// Mixed-radix encode: `factors[i] ∈ [0, radices[i])`, last factor varies
/// fastest.
pub fn factors_to_index(factors: &[usize], radices: &[usize]) -> Result<usize> {
    if factors.len() != radices.len() {
        return Err(Error::shape(format!(
            "factor vector length {} != number of factors {}",
            factors.len(),
            radices.len()
        )));
    }
    let mut index = 0usize;
    for (&f, &r) in factors.iter().zip(radices) {
        if f >= r {
            return Err(Error::data(format!(
                "factor value {f} out of range for cardinality {r}"
            )));
        }
        index = index * r + f;
    }
    Ok(index)
}

/// Inverse of [`factors_to_index`].
pub fn index_to_factors(index: usize, radices: &[usize]) -> Result<Vec<usize>> {
    let total: usize = radices.iter().product();
    if index >= total {
        return Err(Error::data(format!(
            "index {index} out of range for {total} examples"
        )));
    }
    let mut rem = index;
    let mut factors = vec![0usize; radices.len()];
    for (slot, &r) in factors.iter_mut().zip(radices).rev() {
        *slot = rem % r;
        rem /= r;
    }
    Ok(factors)
}

#[derive(Debug, Clone)]
pub(crate) enum Storage {
    Toy(toy::ToyRenderer),
    Archive(archive::ArchiveData),
}

/// Factor-indexed image collection.
#[derive(Debug, Clone)]
pub struct GroundTruthDataset {
    factor_specs: Vec<FactorSpec>,
    image_shape: (usize, usize, usize),
    renderer_id: String,
    seed: u64,
    storage: Storage,
}

impl GroundTruthDataset {
    pub(crate) fn from_parts(
        factor_specs: Vec<FactorSpec>,
        image_shape: (usize, usize, usize),
        renderer_id: String,
        seed: u64,
        storage: Storage,
    ) -> Self {
        GroundTruthDataset {
            factor_specs,
            image_shape,
            renderer_id,
            seed,
            storage,
        }
    }

    pub fn factor_specs(&self) -> &[FactorSpec] {
        &self.factor_specs
    }

    pub fn num_factors(&self) -> usize {
        self.factor_specs.len()
    }

    pub fn radices(&self) -> Vec<usize> {
        self.factor_specs.iter().map(|f| f.cardinality).collect()
    }

    /// (height, width, channels).
    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.image_shape
    }

    pub fn renderer_id(&self) -> &str {
        &self.renderer_id
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Total example count = product of cardinalities.
    pub fn len(&self) -> usize {
        self.radices().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn factors_to_index(&self, factors: &[usize]) -> Result<usize> {
        factors_to_index(factors, &self.radices())
    }

    pub fn index_to_factors(&self, index: usize) -> Result<Vec<usize>> {
        index_to_factors(index, &self.radices())
    }

    /// Render or fetch a single image, shape `(H, W, C)`.
    pub fn image<S: Scalar>(&self, index: usize) -> Result<Array3<S>> {
        if index >= self.len() {
            return Err(Error::data(format!(
                "index {index} out of range for {} examples",
                self.len()
            )));
        }
        let factors = self.index_to_factors(index)?;
        match &self.storage {
            Storage::Toy(r) => Ok(r.render(&self.factor_specs, &factors)),
            Storage::Archive(a) => a.image(index),
        }
    }

    /// Batch fetch, shape `(len(indices), H, W, C)`.
    pub fn images<S: Scalar>(&self, indices: &[usize]) -> Result<ImageBatch<S>> {
        let (h, w, c) = self.image_shape;
        let mut pixels = Array4::<S>::zeros((indices.len(), h, w, c));
        for (slot, &idx) in indices.iter().enumerate() {
            let img = self.image::<S>(idx)?;
            pixels.index_axis_mut(ndarray::Axis(0), slot).assign(&img);
        }
        Ok(ImageBatch { pixels })
    }

    /// Draw `n` factor vectors, each factor i.i.d. uniform over its classes.
    pub fn sample_factors<R: Rng>(&self, n: usize, rng: &mut R) -> Array2<usize> {
        let radices = self.radices();
        let mut out = Array2::<usize>::zeros((n, radices.len()));
        for i in 0..n {
            for (j, &r) in radices.iter().enumerate() {
                out[[i, j]] = rng.random_range(0..r);
            }
        }
        out
    }

    /// Uniform batch of images with their dataset indices.
    pub fn sample_batch<S: Scalar, R: Rng>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<(Vec<usize>, ImageBatch<S>)> {
        let factors = self.sample_factors(n, rng);
        let mut indices = Vec::with_capacity(n);
        for row in factors.rows() {
            indices.push(self.factors_to_index(row.as_slice().unwrap())?);
        }
        let batch = self.images(&indices)?;
        Ok((indices, batch))
    }

    /// Indices of `n` examples whose `factor_id`-th factor equals `value`,
    /// remaining factors i.i.d. uniform.
    pub fn sample_fixed_factor_indices<R: Rng>(
        &self,
        factor_id: usize,
        value: usize,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        if factor_id >= self.num_factors() {
            return Err(Error::data(format!(
                "factor_id {factor_id} out of range for {} factors",
                self.num_factors()
            )));
        }
        let radices = self.radices();
        if value >= radices[factor_id] {
            return Err(Error::data(format!(
                "value {value} out of range for cardinality {}",
                radices[factor_id]
            )));
        }
        if n == 0 {
            return Err(Error::data("sample_fixed_factor needs n > 0"));
        }
        let mut indices = Vec::with_capacity(n);
        let mut factors = vec![0usize; radices.len()];
        for _ in 0..n {
            for (j, &r) in radices.iter().enumerate() {
                factors[j] = rng.random_range(0..r);
            }
            factors[factor_id] = value;
            indices.push(factors_to_index(&factors, &radices)?);
        }
        Ok(indices)
    }

    /// See [`Self::sample_fixed_factor_indices`]; returns the images.
    pub fn sample_fixed_factor<S: Scalar, R: Rng>(
        &self,
        factor_id: usize,
        value: usize,
        n: usize,
        rng: &mut R,
    ) -> Result<ImageBatch<S>> {
        let indices = self.sample_fixed_factor_indices(factor_id, value, n, rng)?;
        self.images(&indices)
    }
}
