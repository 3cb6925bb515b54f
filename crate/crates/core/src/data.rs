//! Datasets: seeded synthetic blobs, IDX image/label files and CSV, plus
//! seeded epoch batching.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::network::Batch;
use crate::structure::mix_seed;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;

#[derive(Debug, Clone)]
pub struct DatasetHandle {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
    train: Vec<usize>,
    eval: Vec<usize>,
    provenance: String,
}

impl DatasetHandle {
    /// All rows go to the training split.
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, provenance: impl Into<String>) -> Result<Self> {
        let n = features.shape()[0];
        if n == 0 {
            return Err(Error::Input("dataset is empty".into()));
        }
        if labels.len() != n {
            return Err(Error::Input(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(DatasetHandle {
            features,
            labels,
            classes,
            train: (0..n).collect(),
            eval: Vec::new(),
            provenance: provenance.into(),
        })
    }

    /// Reassigns a seeded random `eval_fraction` of rows to the eval split.
    pub fn with_split(mut self, eval_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&eval_fraction) {
            return Err(Error::param("eval_fraction", format!("{eval_fraction} not in [0, 1)")));
        }
        let n = self.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xE7A1)));
        let n_eval = (eval_fraction * n as f64).round() as usize;
        let (eval, train) = idx.split_at(n_eval);
        if train.is_empty() {
            return Err(Error::param("eval_fraction", "leaves no training rows"));
        }
        self.eval = eval.to_vec();
        self.train = train.to_vec();
        self.eval.sort_unstable();
        self.train.sort_unstable();
        Ok(self)
    }

    /// Keeps the first `n` rows.
    pub fn truncate(mut self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let rows: Vec<usize> = (0..n).collect();
        self.features = self.features.select_rows(&rows);
        self.labels.truncate(n);
        self.train = rows;
        self.eval.clear();
        self.provenance = format!("{} [first {n}]", self.provenance);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Shape of one example.
    pub fn example_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn eval_indices(&self) -> &[usize] {
        &self.eval
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn batch(&self, rows: &[usize]) -> Batch {
        Batch {
            x: self.features.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    /// Training batches for one epoch, in a permutation seeded by
    /// `mix_seed(seed, epoch)`. The last batch may be short.
    pub fn epoch_batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Batches<'_> {
        let mut order = self.train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch)));
        Batches {
            data: self,
            order,
            batch_size: batch_size.max(1),
            pos: 0,
        }
    }
}

/// Iterator over one epoch's minibatches.
pub struct Batches<'a> {
    data: &'a DatasetHandle,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Batches<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.data.batch(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

/// Gaussian blobs with unit covariance. Class means sit on the corners of a
/// regular simplex (pairwise distance `separation`) when `classes ≤ dims`,
/// otherwise on a line with spacing `separation`. Rows are class-interleaved.
pub fn synth_blobs(classes: usize, dims: usize, n_per_class: usize, separation: f64, seed: u64) -> Result<DatasetHandle> {
    if !(separation > 0.0) {
        return Err(Error::param("separation", format!("{separation} must be positive")));
    }
    if classes < 2 || dims == 0 || n_per_class == 0 {
        return Err(Error::param("synth_blobs", "need classes ≥ 2, dims ≥ 1, n_per_class ≥ 1"));
    }
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|k| {
            let mut m = vec![0.0; dims];
            if classes <= dims {
                m[k] = separation / std::f64::consts::SQRT_2;
            } else {
                m[0] = (k as f64 - (classes - 1) as f64 / 2.0) * separation;
            }
            m
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = classes * n_per_class;
    let mut data = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n_per_class {
        for (k, mean) in means.iter().enumerate() {
            for &mu in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(mu + z);
            }
            labels.push(k);
        }
    }
    DatasetHandle::new(
        Tensor::new(vec![n, dims], data)?,
        labels,
        classes,
        format!("synth_blobs(classes={classes}, dims={dims}, n_per_class={n_per_class}, separation={separation}, seed={seed})"),
    )
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::load(path, format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::load(path, format!("truncated header at byte offset {offset}")))
}

/// Parses an IDX file with the given magic; returns its dimensions and
/// payload.
fn parse_idx<'a>(bytes: &'a [u8], magic: u32, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(Error::load(
            path,
            format!("bad magic {found} at byte offset 0, expected {magic}"),
        ));
    }
    let ndims = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        dims.push(be_u32(bytes, 4 + 4 * d, path)? as usize);
    }
    let header = 4 + 4 * ndims;
    let need: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() < need {
        return Err(Error::load(
            path,
            format!(
                "truncated payload: expected {need} bytes from offset {header}, file ends at byte offset {}",
                bytes.len()
            ),
        ));
    }
    Ok((dims, &payload[..need]))
}

/// Loads an IDX image file (magic 2051) and label file (magic 2049), either
/// raw or gzip-compressed. Pixels are scaled by 1/255 into `[0, 1]`; images
/// come out as `[N, 1, H, W]`.
pub fn load_idx_images(image_path: impl AsRef<Path>, label_path: impl AsRef<Path>) -> Result<DatasetHandle> {
    let (ip, lp) = (image_path.as_ref(), label_path.as_ref());
    let img_bytes = read_maybe_gz(ip)?;
    let lbl_bytes = read_maybe_gz(lp)?;
    let (idims, pixels) = parse_idx(&img_bytes, IDX_IMAGES_MAGIC, ip)?;
    let (ldims, labels) = parse_idx(&lbl_bytes, IDX_LABELS_MAGIC, lp)?;
    let (n, h, w) = (idims[0], idims[1], idims[2]);
    if ldims[0] != n {
        return Err(Error::load(
            lp,
            format!("count mismatch at byte offset 4: {} labels for {n} images", ldims[0]),
        ));
    }
    if n == 0 {
        return Err(Error::load(ip, "no images (count at byte offset 4 is zero)"));
    }
    let labels: Vec<usize> = labels.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    let features = Tensor::new(vec![n, 1, h, w], pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    DatasetHandle::new(features, labels, classes, format!("idx:{}", ip.display()))
}

/// Writes images (`u8`, `[N, H, W]`) and labels in IDX format.
pub fn write_idx(image_path: impl AsRef<Path>, label_path: impl AsRef<Path>, images: &[u8], n: usize, h: usize, w: usize, labels: &[u8]) -> Result<()> {
    let mut img = Vec::with_capacity(16 + images.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(images);
    let mut lbl = Vec::with_capacity(8 + labels.len());
    for v in [IDX_LABELS_MAGIC, labels.len() as u32] {
        lbl.extend_from_slice(&v.to_be_bytes());
    }
    lbl.extend_from_slice(labels);
    fs::write(image_path, img)?;
    fs::write(label_path, lbl)?;
    Ok(())
}

/// Reads `label,p0,p1,…` rows (no header) of square grayscale images with
/// `u8` pixel values; scaled like [`load_idx_images`].
pub fn load_csv_images(path: impl AsRef<Path>) -> Result<DatasetHandle> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    let mut width = None;
    for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut fields = line.split(',').map(str::trim);
        let label: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::load(path, format!("line {}: bad label", line_no + 1)))?;
        let row: Vec<f64> = fields
            .map(|f| f.parse::<u8>().map(|p| p as f64 / 255.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::load(path, format!("line {}: {e}", line_no + 1)))?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::load(path, format!("line {}: {} pixels, expected {w}", line_no + 1, row.len())));
            }
            _ => {}
        }
        labels.push(label);
        pixels.extend(row);
    }
    let n = labels.len();
    let w = width.ok_or_else(|| Error::load(path, "no rows"))?;
    let side = (w as f64).sqrt().round() as usize;
    if side * side != w || w == 0 {
        return Err(Error::load(path, format!("{w} pixels per row is not a square image")));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    DatasetHandle::new(
        Tensor::new(vec![n, 1, side, side], pixels)?,
        labels,
        classes,
        format!("csv:{}", path.display()),
    )
}
