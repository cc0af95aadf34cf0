//! Figure artifacts: latent-traversal image grids and pair-embedding
//! exports.
//!
//! Traversals decode one latent dimension at a time across a linear value
//! sweep while pinning the rest at the encoded posterior mean; rows are
//! ordered by descending per-dimension KL and annotated with it, so the
//! informative dimensions appear first and carry their nat counts. Pair
//! exports push single-factor-change image pairs (real or synthesized by
//! latent interventions) through the trained metric network and write the
//! embeddings as CSV for downstream plotting. Everything is deterministic
//! given checkpoint + spec, making the files diffable golden artifacts.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::GroundTruthDataset;
use crate::episodes::concat_pairs;
use crate::error::{Error, Result};
use crate::nn::scalar::{Dtype, Scalar};
use crate::nn::sigmoid;
use crate::protonet::{classify, ProtoNet};
use crate::rng::{stream_rng, StreamId};
use crate::trainer::checkpoint::peek_dtype;
use crate::trainer::TrainState;
use crate::vae::kl_per_dim;

// ---------------------------------------------------------------------------
// Traversal grids
// ---------------------------------------------------------------------------

/// What to render: which checkpoint, which sample images, and how the
/// latent sweep is laid out.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TraversalSpec {
    pub checkpoint: PathBuf,
    /// Dataset indices shown in the first two rows; the first one seeds
    /// the traversal rows.
    pub seed_images: Vec<usize>,
    /// Swept value range; the sweep is linear over `[lo, hi]`.
    pub lo: f64,
    pub hi: f64,
    /// Columns per traversal row.
    pub steps: usize,
    /// Dimensions to traverse; `None` means all. Rows are always ordered
    /// by descending per-dimension KL so informative dims come first.
    pub dims: Option<Vec<usize>>,
}

impl TraversalSpec {
    /// Standard sweep: `[-2, 2]` in 7 steps over every dimension.
    pub fn new(checkpoint: impl Into<PathBuf>, seed_images: Vec<usize>) -> Self {
        TraversalSpec {
            checkpoint: checkpoint.into(),
            seed_images,
            lo: -2.0,
            hi: 2.0,
            steps: 7,
            dims: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) {
            return Err(Error::config(format!(
                "traversal range [{}, {}] is empty",
                self.lo, self.hi
            )));
        }
        if self.steps < 2 {
            return Err(Error::config("traversal needs at least 2 steps"));
        }
        if self.seed_images.is_empty() {
            return Err(Error::config("traversal needs at least one seed image"));
        }
        Ok(())
    }
}

/// One rendered traversal row: the swept dimension, its batch-mean KL in
/// nats, and the `(T, H, W, C)` frames.
#[derive(Debug, Clone)]
pub struct TraversalRow {
    pub dim: usize,
    pub kl: f64,
    pub frames: Array4<f64>,
}

/// Everything that goes into a grid, before rasterization. Kept in f64 so
/// tests can assert on pixels directly.
#[derive(Debug, Clone)]
pub struct TraversalFrames {
    pub originals: Array4<f64>,
    pub recons: Array4<f64>,
    pub rows: Vec<TraversalRow>,
    /// Batch-mean KL per latent dimension (all dims, dataset order).
    pub kl_all: Vec<f64>,
}

/// Compute the frames for a traversal without touching the filesystem
/// (except to load the checkpoint).
pub fn traverse_frames(
    spec: &TraversalSpec,
    dataset: &GroundTruthDataset,
) -> Result<TraversalFrames> {
    spec.validate()?;
    match peek_dtype(&spec.checkpoint)? {
        Dtype::F32 => traverse_frames_typed::<f32>(spec, dataset),
        Dtype::F64 => traverse_frames_typed::<f64>(spec, dataset),
    }
}

fn traverse_frames_typed<S: Scalar>(
    spec: &TraversalSpec,
    dataset: &GroundTruthDataset,
) -> Result<TraversalFrames> {
    let state = TrainState::<S>::load(&spec.checkpoint)?;
    let (h, w, c) = dataset.image_shape();
    if (h, w, c) != (state.dims.height, state.dims.width, state.dims.channels) {
        return Err(Error::data(format!(
            "checkpoint expects {}x{}x{} images, dataset provides {h}x{w}x{c}",
            state.dims.height, state.dims.width, state.dims.channels
        )));
    }
    for &idx in &spec.seed_images {
        if idx >= dataset.len() {
            return Err(Error::data(format!(
                "seed image {idx} out of range for dataset of {}",
                dataset.len()
            )));
        }
    }
    let d = state.dims.latent_dim;
    let sweep_dims: Vec<usize> = match &spec.dims {
        Some(list) => {
            for &dim in list {
                if dim >= d {
                    return Err(Error::config(format!(
                        "traversal dim {dim} out of range for latent width {d}"
                    )));
                }
            }
            list.clone()
        }
        None => (0..d).collect(),
    };

    let x = dataset.images::<S>(&spec.seed_images)?.into_pixels();
    let (post, _) = state.vae.encoder.forward(&x);
    let kl_all: Vec<f64> = kl_per_dim(&post)
        .mapv(|v| v.as_f64())
        .mean_axis(Axis(0))
        .expect("non-empty batch")
        .to_vec();

    // Informative dimensions first; ties break toward lower index.
    let mut ordered = sweep_dims;
    ordered.sort_by(|&a, &b| kl_all[b].total_cmp(&kl_all[a]).then(a.cmp(&b)));

    let recon_logits = state.vae.decoder.forward(&post.mu).0;
    let recons = sigmoid(&recon_logits).mapv(|v| v.as_f64());

    let base = post.mu.row(0).to_owned();
    let t = spec.steps;
    let mut rows = Vec::with_capacity(ordered.len());
    for &dim in &ordered {
        let mut z = Array2::<S>::zeros((t, d));
        for step in 0..t {
            let value = spec.lo + (spec.hi - spec.lo) * step as f64 / (t - 1) as f64;
            z.row_mut(step).assign(&base);
            z[[step, dim]] = S::from_f64(value);
        }
        let logits = state.vae.decoder.forward(&z).0;
        rows.push(TraversalRow {
            dim,
            kl: kl_all[dim],
            frames: sigmoid(&logits).mapv(|v| v.as_f64()),
        });
    }

    Ok(TraversalFrames {
        originals: x.mapv(|v| v.as_f64()),
        recons,
        rows,
        kl_all,
    })
}

/// Pixel layout of a rendered grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GridGeometry {
    pub rows: usize,
    pub cols: usize,
    pub cell_h: usize,
    pub cell_w: usize,
    pub margin: usize,
    pub pad: usize,
    pub height: usize,
    pub width: usize,
}

/// Machine-readable record written next to every grid.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TraversalMeta {
    pub checkpoint: PathBuf,
    pub seed_images: Vec<usize>,
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
    /// Traversed dimensions in displayed (descending-KL) order.
    pub dims: Vec<usize>,
    /// Batch-mean KL per displayed dimension, aligned with `dims`.
    pub kl: Vec<f64>,
    pub grid: GridGeometry,
    pub image: PathBuf,
}

const GLYPH_SCALE: usize = 2;
const GLYPH_ADVANCE: usize = 4 * GLYPH_SCALE;
const MARGIN_CHARS: usize = 6;
const MARGIN: usize = MARGIN_CHARS * GLYPH_ADVANCE + 2;
const PAD: usize = 2;

/// 3×5 bitmap rows for the KL annotations; each entry is a row of 3 bits.
fn glyph(ch: char) -> Option<[u8; 5]> {
    Some(match ch {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        _ => return None,
    })
}

struct Canvas {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Canvas {
    fn new(height: usize, width: usize, channels: usize) -> Self {
        Canvas {
            height,
            width,
            channels,
            data: vec![0; height * width * channels],
        }
    }

    fn put(&mut self, y: usize, x: usize, value: u8) {
        if y < self.height && x < self.width {
            let base = (y * self.width + x) * self.channels;
            for ch in 0..self.channels {
                self.data[base + ch] = value;
            }
        }
    }

    /// Copy an `(H, W, C)` unit-interval frame with its top-left corner at
    /// `(y0, x0)`.
    fn blit(&mut self, y0: usize, x0: usize, frame: &ndarray::ArrayView3<'_, f64>) {
        let (fh, fw, fc) = frame.dim();
        debug_assert_eq!(fc, self.channels);
        for y in 0..fh {
            for x in 0..fw {
                let base = ((y0 + y) * self.width + (x0 + x)) * self.channels;
                for ch in 0..fc {
                    let v = (frame[[y, x, ch]].clamp(0.0, 1.0) * 255.0).round() as u8;
                    self.data[base + ch] = v;
                }
            }
        }
    }

    fn draw_text(&mut self, y0: usize, x0: usize, text: &str) {
        let mut x = x0;
        for ch in text.chars().take(MARGIN_CHARS) {
            if let Some(rows) = glyph(ch) {
                for (ry, bits) in rows.iter().enumerate() {
                    for rx in 0..3 {
                        if bits >> (2 - rx) & 1 == 1 {
                            for sy in 0..GLYPH_SCALE {
                                for sx in 0..GLYPH_SCALE {
                                    self.put(
                                        y0 + ry * GLYPH_SCALE + sy,
                                        x + rx * GLYPH_SCALE + sx,
                                        255,
                                    );
                                }
                            }
                        }
                    }
                }
            }
            x += GLYPH_ADVANCE;
        }
    }
}

/// Rasterize frames into one grid image: originals, reconstructions, then
/// a KL-annotated row per traversed dimension.
fn render_grid(frames: &TraversalFrames, steps: usize) -> (Canvas, GridGeometry) {
    let (_, h, w, c) = frames.originals.dim();
    let rows = 2 + frames.rows.len();
    let geometry = GridGeometry {
        rows,
        cols: steps,
        cell_h: h,
        cell_w: w,
        margin: MARGIN,
        pad: PAD,
        height: PAD + rows * (h + PAD),
        width: MARGIN + PAD + steps * (w + PAD),
    };
    let mut canvas = Canvas::new(geometry.height, geometry.width, c);
    let cell_origin =
        |row: usize, col: usize| (PAD + row * (h + PAD), MARGIN + PAD + col * (w + PAD));

    for (col, frame) in frames.originals.outer_iter().enumerate().take(steps) {
        let (y, x) = cell_origin(0, col);
        canvas.blit(y, x, &frame);
    }
    for (col, frame) in frames.recons.outer_iter().enumerate().take(steps) {
        let (y, x) = cell_origin(1, col);
        canvas.blit(y, x, &frame);
    }
    for (i, row) in frames.rows.iter().enumerate() {
        let (y, _) = cell_origin(2 + i, 0);
        canvas.draw_text(y + (h.saturating_sub(5 * GLYPH_SCALE)) / 2, 1, &format!("{:.3}", row.kl));
        for (col, frame) in row.frames.outer_iter().enumerate().take(steps) {
            let (y, x) = cell_origin(2 + i, col);
            canvas.blit(y, x, &frame);
        }
    }
    (canvas, geometry)
}

/// Render a traversal grid to `out_png` (with a JSON sidecar of the same
/// stem) and return the metadata.
pub fn traverse(
    spec: &TraversalSpec,
    dataset: &GroundTruthDataset,
    out_png: &Path,
) -> Result<TraversalMeta> {
    let frames = traverse_frames(spec, dataset)?;
    let (canvas, grid) = render_grid(&frames, spec.steps);
    if let Some(parent) = out_png.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    save_png(out_png, &canvas)?;
    let meta = TraversalMeta {
        checkpoint: spec.checkpoint.clone(),
        seed_images: spec.seed_images.clone(),
        lo: spec.lo,
        hi: spec.hi,
        steps: spec.steps,
        dims: frames.rows.iter().map(|r| r.dim).collect(),
        kl: frames.rows.iter().map(|r| r.kl).collect(),
        grid,
        image: out_png.to_path_buf(),
    };
    let mut text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    text.push('\n');
    fs::write(out_png.with_extension("json"), text)?;
    Ok(meta)
}

fn save_png(path: &Path, canvas: &Canvas) -> Result<()> {
    let (w, h) = (canvas.width as u32, canvas.height as u32);
    let ok = match canvas.channels {
        1 => image::GrayImage::from_raw(w, h, canvas.data.clone())
            .map(|img| img.save_with_format(path, image::ImageFormat::Png)),
        3 => image::RgbImage::from_raw(w, h, canvas.data.clone())
            .map(|img| img.save_with_format(path, image::ImageFormat::Png)),
        c => {
            return Err(Error::data(format!(
                "cannot rasterize {c}-channel images; expected 1 or 3"
            )))
        }
    };
    match ok {
        Some(Ok(())) => Ok(()),
        Some(Err(e)) => Err(Error::data(format!("png encode failed: {e}"))),
        None => Err(Error::shape("canvas buffer does not match its geometry".to_string())),
    }
}

// ---------------------------------------------------------------------------
// Pair-embedding export
// ---------------------------------------------------------------------------

/// How pairs are built: real image pairs differing in exactly one
/// ground-truth factor, or decoder outputs before/after a single-dimension
/// latent intervention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairMode {
    GroundTruthPairs,
    SyntheticInterventions,
}

impl std::str::FromStr for PairMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground-truth-pairs" => Ok(PairMode::GroundTruthPairs),
            "synthetic-interventions" => Ok(PairMode::SyntheticInterventions),
            other => Err(Error::config(format!(
                "unknown pair mode {other:?}; expected ground-truth-pairs or synthetic-interventions"
            ))),
        }
    }
}

impl std::fmt::Display for PairMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PairMode::GroundTruthPairs => "ground-truth-pairs",
            PairMode::SyntheticInterventions => "synthetic-interventions",
        })
    }
}

/// One exported pair: its metric-space embedding and its label. Real
/// pairs carry the changed factor; synthetic pairs carry the intervened
/// dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRow {
    pub embedding: Vec<f64>,
    pub factor: Option<usize>,
    pub intervened_dim: Option<usize>,
    /// Dataset indices behind the pair (base first). Synthetic rows store
    /// (base, donor). Not written to the CSV.
    pub indices: (usize, usize),
}

/// Sidecar metadata for a pair export.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PairExportMeta {
    pub checkpoint: PathBuf,
    pub mode: PairMode,
    pub n: usize,
    /// Embedding width m.
    pub metric_dim: usize,
    /// Prototype-loss weight the checkpoint was trained with.
    pub lambda: f64,
    pub seed: u64,
    pub csv: PathBuf,
}

/// Outcome of an export: the rows that were written plus the metadata.
#[derive(Debug, Clone)]
pub struct PairExport {
    pub meta: PairExportMeta,
    pub rows: Vec<PairRow>,
}

/// Embed `n` single-factor-change pairs with a checkpoint's metric network
/// and write them to `out_csv` (JSON sidecar alongside). Deterministic
/// given (checkpoint, mode, n, seed).
pub fn export_pair_embeddings(
    checkpoint: &Path,
    dataset: &GroundTruthDataset,
    mode: PairMode,
    n: usize,
    seed: u64,
    out_csv: &Path,
) -> Result<PairExport> {
    if n == 0 {
        return Err(Error::config("pair export needs n ≥ 1"));
    }
    let rows = match peek_dtype(checkpoint)? {
        Dtype::F32 => pair_rows_typed::<f32>(checkpoint, dataset, mode, n, seed)?,
        Dtype::F64 => pair_rows_typed::<f64>(checkpoint, dataset, mode, n, seed)?,
    };
    let (rows, lambda, metric_dim) = rows;
    if let Some(parent) = out_csv.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut text = String::new();
    for j in 0..metric_dim {
        write!(text, "emb_{j},").unwrap();
    }
    text.push_str("factor,intervened_dim\n");
    for row in &rows {
        for v in &row.embedding {
            write!(text, "{v},").unwrap();
        }
        if let Some(f) = row.factor {
            write!(text, "{f}").unwrap();
        }
        text.push(',');
        if let Some(k) = row.intervened_dim {
            write!(text, "{k}").unwrap();
        }
        text.push('\n');
    }
    fs::write(out_csv, text)?;
    let meta = PairExportMeta {
        checkpoint: checkpoint.to_path_buf(),
        mode,
        n,
        metric_dim,
        lambda,
        seed,
        csv: out_csv.to_path_buf(),
    };
    let mut meta_text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    meta_text.push('\n');
    fs::write(out_csv.with_extension("json"), meta_text)?;
    Ok(PairExport { meta, rows })
}

fn pair_rows_typed<S: Scalar>(
    checkpoint: &Path,
    dataset: &GroundTruthDataset,
    mode: PairMode,
    n: usize,
    seed: u64,
) -> Result<(Vec<PairRow>, f64, usize)> {
    let state = TrainState::<S>::load(checkpoint)?;
    let (h, w, c) = dataset.image_shape();
    if (h, w, c) != (state.dims.height, state.dims.width, state.dims.channels) {
        return Err(Error::data(format!(
            "checkpoint expects {}x{}x{} images, dataset provides {h}x{w}x{c}",
            state.dims.height, state.dims.width, state.dims.channels
        )));
    }
    let mut rng = stream_rng(seed, StreamId::Artifacts);
    let rows = match mode {
        PairMode::GroundTruthPairs => ground_truth_rows(&state.proto, dataset, n, &mut rng)?,
        PairMode::SyntheticInterventions => synthetic_rows(&state, dataset, n, &mut rng)?,
    };
    Ok((rows, state.config.lambda, state.proto.metric_dim()))
}

/// Distinct (base image, factor, replacement value) choices.
fn available_ground_truth_pairs(dataset: &GroundTruthDataset) -> usize {
    let extra: usize = dataset.radices().iter().map(|&r| r - 1).sum();
    dataset.len() * extra
}

fn ground_truth_rows<S: Scalar, R: Rng>(
    proto: &ProtoNet<S>,
    dataset: &GroundTruthDataset,
    n: usize,
    rng: &mut R,
) -> Result<Vec<PairRow>> {
    let radices = dataset.radices();
    let live: Vec<usize> = (0..radices.len()).filter(|&f| radices[f] >= 2).collect();
    if live.is_empty() {
        return Err(Error::data("no factor has two values; cannot build pairs"));
    }
    let available = available_ground_truth_pairs(dataset);
    if n > available {
        return Err(Error::config(format!(
            "requested {n} pairs but only {available} distinct single-factor changes exist"
        )));
    }

    // (base, factor, replacement) triples; distinct by construction.
    let mut picks: Vec<(usize, usize, usize)> = Vec::with_capacity(n);
    if n * 2 > available {
        // Dense request: enumerate everything and shuffle.
        let mut all = Vec::with_capacity(available);
        for base in 0..dataset.len() {
            for &f in &live {
                let current = dataset.index_to_factors(base)?[f];
                for v in 0..radices[f] {
                    if v != current {
                        all.push((base, f, v));
                    }
                }
            }
        }
        all.shuffle(rng);
        picks.extend(all.into_iter().take(n));
    } else {
        let mut seen = HashSet::with_capacity(n);
        while picks.len() < n {
            let base = rng.random_range(0..dataset.len());
            let f = live[rng.random_range(0..live.len())];
            let current = dataset.index_to_factors(base)?[f];
            let mut v = rng.random_range(0..radices[f] - 1);
            if v >= current {
                v += 1;
            }
            if seen.insert((base, f, v)) {
                picks.push((base, f, v));
            }
        }
    }

    let mut rows = Vec::with_capacity(n);
    for chunk in picks.chunks(128) {
        let mut base_idx = Vec::with_capacity(chunk.len());
        let mut alt_idx = Vec::with_capacity(chunk.len());
        for &(base, f, v) in chunk {
            let mut coords = dataset.index_to_factors(base)?;
            coords[f] = v;
            base_idx.push(base);
            alt_idx.push(dataset.factors_to_index(&coords)?);
        }
        let x = dataset.images::<S>(&base_idx)?.into_pixels();
        let x_alt = dataset.images::<S>(&alt_idx)?.into_pixels();
        let pairs = concat_pairs(&x, &x_alt)?;
        let (emb, _, _) = proto.forward(&pairs)?;
        for (i, &(base, f, _)) in chunk.iter().enumerate() {
            rows.push(PairRow {
                embedding: emb.row(i).iter().map(|v| v.as_f64()).collect(),
                factor: Some(f),
                intervened_dim: None,
                indices: (base, alt_idx[i]),
            });
        }
    }
    Ok(rows)
}

fn synthetic_rows<S: Scalar, R: Rng>(
    state: &TrainState<S>,
    dataset: &GroundTruthDataset,
    n: usize,
    rng: &mut R,
) -> Result<Vec<PairRow>> {
    if dataset.len() < 2 {
        return Err(Error::data("synthetic pairs need at least two images"));
    }
    let d = state.dims.latent_dim;
    let mut rows = Vec::with_capacity(n);
    let mut remaining = n;
    while remaining > 0 {
        let take = remaining.min(128);
        let mut base_idx = Vec::with_capacity(take);
        let mut donor_idx = Vec::with_capacity(take);
        let mut swept = Vec::with_capacity(take);
        for _ in 0..take {
            let base = rng.random_range(0..dataset.len());
            let mut donor = rng.random_range(0..dataset.len());
            while donor == base {
                donor = rng.random_range(0..dataset.len());
            }
            base_idx.push(base);
            donor_idx.push(donor);
            swept.push(rng.random_range(0..d));
        }
        let x = dataset.images::<S>(&base_idx)?.into_pixels();
        let x_donor = dataset.images::<S>(&donor_idx)?.into_pixels();
        // Posterior means stand in for sampled codes so the export is a
        // pure function of the checkpoint.
        let mu = state.vae.encoder.forward(&x).0.mu;
        let mu_donor = state.vae.encoder.forward(&x_donor).0.mu;
        let mut z_alt = mu.clone();
        for (i, &k) in swept.iter().enumerate() {
            z_alt[[i, k]] = mu_donor[[i, k]];
        }
        let x_hat = sigmoid(&state.vae.decoder.forward(&mu).0);
        let x_hat_k = sigmoid(&state.vae.decoder.forward(&z_alt).0);
        let pairs = concat_pairs(&x_hat, &x_hat_k)?;
        let (emb, _, _) = state.proto.forward(&pairs)?;
        for i in 0..take {
            rows.push(PairRow {
                embedding: emb.row(i).iter().map(|v| v.as_f64()).collect(),
                factor: None,
                intervened_dim: Some(swept[i]),
                indices: (base_idx[i], donor_idx[i]),
            });
        }
        remaining -= take;
    }
    Ok(rows)
}

/// Parse a pair-embedding CSV back into rows. Indices are not stored in
/// the file, so they come back as `(0, 0)`.
pub fn load_pair_rows(csv: &Path) -> Result<Vec<PairRow>> {
    let text = fs::read_to_string(csv)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::data("empty pair CSV"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3
        || cols[cols.len() - 2] != "factor"
        || cols[cols.len() - 1] != "intervened_dim"
    {
        return Err(Error::data(format!("unrecognized pair CSV header: {header}")));
    }
    let m = cols.len() - 2;
    for (j, col) in cols[..m].iter().enumerate() {
        if *col != format!("emb_{j}") {
            return Err(Error::data(format!("unrecognized pair CSV header: {header}")));
        }
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != m + 2 {
            return Err(Error::data(format!("pair CSV row has {} fields, expected {}", fields.len(), m + 2)));
        }
        let mut embedding = Vec::with_capacity(m);
        for field in &fields[..m] {
            embedding.push(
                field
                    .parse::<f64>()
                    .map_err(|_| Error::data(format!("bad embedding value {field:?}")))?,
            );
        }
        let parse_opt = |s: &str| -> Result<Option<usize>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| Error::data(format!("bad label {s:?}")))
            }
        };
        rows.push(PairRow {
            embedding,
            factor: parse_opt(fields[m])?,
            intervened_dim: parse_opt(fields[m + 1])?,
            indices: (0, 0),
        });
    }
    Ok(rows)
}

/// Nearest-prototype accuracy over factor-labelled pair embeddings: a few
/// rows per class become prototypes (mean embedding), the rest are
/// classified by closest prototype.
pub fn nearest_prototype_accuracy<R: Rng>(
    rows: &[PairRow],
    support_per_class: usize,
    rng: &mut R,
) -> Result<f64> {
    if support_per_class == 0 {
        return Err(Error::config("need at least one support row per class"));
    }
    let mut classes: Vec<usize> = rows
        .iter()
        .map(|r| r.factor.ok_or_else(|| Error::data("row lacks a factor label")))
        .collect::<Result<Vec<_>>>()?;
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::data("need at least two labelled classes"));
    }
    let m = rows[0].embedding.len();

    let mut bank = Array2::<f64>::zeros((classes.len(), m));
    let mut queries: Vec<(usize, &PairRow)> = Vec::new();
    for (slot, &class) in classes.iter().enumerate() {
        let mut members: Vec<&PairRow> = rows
            .iter()
            .filter(|r| r.factor == Some(class))
            .collect();
        if members.len() <= support_per_class {
            return Err(Error::data(format!(
                "class {class} has {} rows; need more than {support_per_class}",
                members.len()
            )));
        }
        members.shuffle(rng);
        let (support, query) = members.split_at(support_per_class);
        for row in support {
            for j in 0..m {
                bank[[slot, j]] += row.embedding[j] / support_per_class as f64;
            }
        }
        queries.extend(query.iter().map(|r| (slot, *r)));
    }

    let mut q = Array2::<f64>::zeros((queries.len(), m));
    for (i, (_, row)) in queries.iter().enumerate() {
        for j in 0..m {
            q[[i, j]] = row.embedding[j];
        }
    }
    let predicted = classify(&q, &bank, true);
    let correct = predicted
        .iter()
        .zip(&queries)
        .filter(|(p, (slot, _))| *p == slot)
        .count();
    Ok(correct as f64 / queries.len() as f64)
}
