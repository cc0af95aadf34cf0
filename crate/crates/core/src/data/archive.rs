//! `.npz` archive adapter: loads factor-annotated image collections and
//! writes them back in canonical mixed-radix order.
//!
//! An archive holds an image array named `images` (alias `imgs`) shaped
//! `(N, H, W)` or `(N, H, W, C)` and a class matrix named `factor_classes`
//! (alias `latents_classes`) shaped `(N, num_factors)`. 8-bit images are
//! divided by 255; float images must already lie in `[0, 1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayD, Axis};
use ndarray_npy::{NpzReader, NpzWriter};

use crate::error::{Error, Result};
use crate::nn::scalar::Scalar;

use super::{factors_to_index, FactorSpec, GroundTruthDataset, Storage};

#[derive(Debug, Clone)]
enum ArchivePixels {
    U8(Array4<u8>),
    F32(Array4<f32>),
    F64(Array4<f64>),
}

#[derive(Debug, Clone)]
pub(crate) struct ArchiveData {
    pixels: ArchivePixels,
    /// `order[canonical_index]` = row in the pixel array.
    order: Vec<u32>,
}

impl ArchiveData {
    pub(crate) fn image<S: Scalar>(&self, index: usize) -> Result<Array3<S>> {
        let row = self.order[index] as usize;
        let img = match &self.pixels {
            ArchivePixels::U8(a) => a
                .index_axis(Axis(0), row)
                .mapv(|v| S::from_f64(v as f64 / 255.0)),
            ArchivePixels::F32(a) => a.index_axis(Axis(0), row).mapv(|v| S::from_f64(v as f64)),
            ArchivePixels::F64(a) => a.index_axis(Axis(0), row).mapv(S::from_f64),
        };
        Ok(img)
    }
}

const IMAGE_NAMES: [&str; 2] = ["images", "imgs"];
const CLASS_NAMES: [&str; 2] = ["factor_classes", "latents_classes"];

fn strip_npy(name: &str) -> &str {
    name.strip_suffix(".npy").unwrap_or(name)
}

/// Read an array trying several element types, converting with `f`.
macro_rules! try_types {
    ($npz:expr, $name:expr, $( $ty:ty ),+ ) => {{
        let mut out = None;
        $(
            if out.is_none() {
                if let Ok(a) = $npz.by_name::<ndarray::OwnedRepr<$ty>, ndarray::IxDyn>($name) {
                    out = Some(a.mapv(|v| v as f64));
                }
            }
        )+
        out
    }};
}

fn find_name<'a>(available: &'a [String], wanted: &[&str]) -> Option<&'a str> {
    for w in wanted {
        for name in available {
            if strip_npy(name) == *w {
                return Some(name);
            }
        }
    }
    None
}

/// Load a `.npz` archive as a ground-truth dataset.
///
/// The class matrix must cover the full Cartesian product of the inferred
/// cardinalities exactly once; cardinalities are `column max + 1`.
pub fn load_archive(path: &Path) -> Result<GroundTruthDataset> {
    let file = File::open(path)
        .map_err(|e| Error::data(format!("cannot open archive {}: {e}", path.display())))?;
    let mut npz = NpzReader::new(BufReader::new(file))
        .map_err(|e| Error::data(format!("cannot read archive {}: {e}", path.display())))?;
    let names = npz
        .names()
        .map_err(|e| Error::data(format!("cannot list archive arrays: {e}")))?;

    let image_name = find_name(&names, &IMAGE_NAMES).ok_or_else(|| {
        Error::data(format!(
            "archive has no image array (looked for {:?}); available arrays: {:?}",
            IMAGE_NAMES, names
        ))
    })?;
    let class_name = find_name(&names, &CLASS_NAMES).ok_or_else(|| {
        Error::data(format!(
            "archive has no factor class array (looked for {:?}); available arrays: {:?}",
            CLASS_NAMES, names
        ))
    })?;

    // Images: u8 stays u8 (converted per batch), floats are validated here.
    let pixels = if let Ok(a) = npz.by_name::<ndarray::OwnedRepr<u8>, ndarray::IxDyn>(image_name) {
        ArchivePixels::U8(to_nhwc_u8(a)?)
    } else if let Ok(a) = npz.by_name::<ndarray::OwnedRepr<f32>, ndarray::IxDyn>(image_name) {
        let a = to_nhwc(a.mapv(|v| v as f64))?;
        validate_unit_range(&a)?;
        ArchivePixels::F32(a.mapv(|v| v as f32))
    } else if let Ok(a) = npz.by_name::<ndarray::OwnedRepr<f64>, ndarray::IxDyn>(image_name) {
        let a = to_nhwc(a)?;
        validate_unit_range(&a)?;
        ArchivePixels::F64(a)
    } else {
        return Err(Error::data(format!(
            "image array {image_name:?} has unsupported element type (expected u8, f32 or f64)"
        )));
    };

    let classes = try_types!(npz, class_name, i64, u8, i32, u32, i16, u16, f64)
        .ok_or_else(|| {
            Error::data(format!(
                "class array {class_name:?} has unsupported element type"
            ))
        })?;
    let classes: Array2<f64> = classes
        .into_dimensionality()
        .map_err(|_| Error::shape("factor class array must be 2-d (N, num_factors)"))?;
    let n = classes.shape()[0];
    let num_factors = classes.shape()[1];
    let n_images = match &pixels {
        ArchivePixels::U8(a) => a.shape()[0],
        ArchivePixels::F32(a) => a.shape()[0],
        ArchivePixels::F64(a) => a.shape()[0],
    };
    if n != n_images {
        return Err(Error::shape(format!(
            "archive has {n_images} images but {n} factor class rows"
        )));
    }
    if n == 0 {
        return Err(Error::data("archive is empty"));
    }

    let mut class_rows = Vec::with_capacity(n);
    for row in classes.rows() {
        let mut v = Vec::with_capacity(num_factors);
        for &c in row {
            if c < 0.0 || c.fract() != 0.0 {
                return Err(Error::data(format!(
                    "factor class {c} is not a non-negative integer"
                )));
            }
            v.push(c as usize);
        }
        class_rows.push(v);
    }

    // Cardinality = column max + 1; warn on degenerate columns.
    let mut radices = vec![0usize; num_factors];
    for row in &class_rows {
        for (j, &c) in row.iter().enumerate() {
            radices[j] = radices[j].max(c + 1);
        }
    }
    for (j, &r) in radices.iter().enumerate() {
        if r == 1 {
            eprintln!("warning: archive factor column {j} is constant (cardinality 1)");
        }
    }
    let total: usize = radices.iter().product();
    if total != n {
        return Err(Error::data(format!(
            "archive rows ({n}) do not match the factor grid size ({total}); \
             every factor combination must appear exactly once"
        )));
    }

    // Map canonical factor indices to archive rows; detect duplicates.
    let mut order = vec![u32::MAX; total];
    for (row_idx, row) in class_rows.iter().enumerate() {
        let canon = factors_to_index(row, &radices)?;
        if order[canon] != u32::MAX {
            return Err(Error::data(format!(
                "archive repeats factor combination {row:?}"
            )));
        }
        order[canon] = row_idx as u32;
    }

    let specs = radices
        .iter()
        .enumerate()
        .map(|(j, &r)| FactorSpec::new(format!("factor{j}"), r))
        .collect::<Result<Vec<_>>>()?;
    let shape = match &pixels {
        ArchivePixels::U8(a) => (a.shape()[1], a.shape()[2], a.shape()[3]),
        ArchivePixels::F32(a) => (a.shape()[1], a.shape()[2], a.shape()[3]),
        ArchivePixels::F64(a) => (a.shape()[1], a.shape()[2], a.shape()[3]),
    };
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "archive".into());
    Ok(GroundTruthDataset::from_parts(
        specs,
        shape,
        format!("archive:{stem}"),
        0,
        Storage::Archive(ArchiveData { pixels, order }),
    ))
}

fn to_nhwc(a: ArrayD<f64>) -> Result<Array4<f64>> {
    match a.ndim() {
        3 => {
            let (n, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            Ok(a.into_shape_with_order((n, h, w, 1))
                .map_err(|e| Error::shape(e.to_string()))?)
        }
        4 => Ok(a
            .into_dimensionality()
            .map_err(|e| Error::shape(e.to_string()))?),
        d => Err(Error::shape(format!(
            "image array must be (N,H,W) or (N,H,W,C), got {d} dimensions"
        ))),
    }
}

fn to_nhwc_u8(a: ArrayD<u8>) -> Result<Array4<u8>> {
    match a.ndim() {
        3 => {
            let (n, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            Ok(a.into_shape_with_order((n, h, w, 1))
                .map_err(|e| Error::shape(e.to_string()))?)
        }
        4 => Ok(a
            .into_dimensionality()
            .map_err(|e| Error::shape(e.to_string()))?),
        d => Err(Error::shape(format!(
            "image array must be (N,H,W) or (N,H,W,C), got {d} dimensions"
        ))),
    }
}

fn validate_unit_range(a: &Array4<f64>) -> Result<()> {
    for &v in a.iter() {
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            return Err(Error::data(format!(
                "float archive pixel {v} outside [0, 1]"
            )));
        }
    }
    Ok(())
}

/// Write a dataset to `.npz` in canonical mixed-radix order.
///
/// Binary pixel sets are stored as 8-bit (0 / 255) so a round trip through
/// the divide-by-255 load path reproduces them exactly; anything else is
/// stored as f32.
pub fn write_archive(path: &Path, dataset: &GroundTruthDataset) -> Result<()> {
    let n = dataset.len();
    let (h, w, c) = dataset.image_shape();
    let mut images = Array4::<f32>::zeros((n, h, w, c));
    for idx in 0..n {
        let img = dataset.image::<f32>(idx)?;
        images.index_axis_mut(Axis(0), idx).assign(&img);
    }
    let radices = dataset.radices();
    let mut classes = Array2::<i64>::zeros((n, radices.len()));
    for idx in 0..n {
        for (j, &f) in dataset.index_to_factors(idx)?.iter().enumerate() {
            classes[[idx, j]] = f as i64;
        }
    }

    let file = File::create(path)
        .map_err(|e| Error::data(format!("cannot create archive {}: {e}", path.display())))?;
    let mut npz = NpzWriter::new(BufWriter::new(file));
    let binary = images.iter().all(|&v| v == 0.0 || v == 1.0);
    if binary {
        let u8_images = images.mapv(|v| if v == 1.0 { 255u8 } else { 0u8 });
        npz.add_array("images", &u8_images)
            .map_err(|e| Error::data(format!("cannot write images: {e}")))?;
    } else {
        npz.add_array("images", &images)
            .map_err(|e| Error::data(format!("cannot write images: {e}")))?;
    }
    npz.add_array("factor_classes", &classes)
        .map_err(|e| Error::data(format!("cannot write factor classes: {e}")))?;
    npz.finish()
        .map_err(|e| Error::data(format!("cannot finish archive: {e}")))?;
    Ok(())
}
