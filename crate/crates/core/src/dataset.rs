//! Feature datasets: encoded (real images through the frozen teacher) or
//! synthesized (samples drawn from it), streamed online with bounded
//! prefetch or cached offline in a pinned binary format. Also hosts the
//! synthetic labeled shapes dataset used by the desk-scale experiments.

use crate::error::{Error, Result};
use crate::pyramid::FeaturePyramid;
use crate::seeding::{keyed_rng, standard_normal};
use crate::teacher::{DiffusionTeacher, EncodeMode, EncodeVariant, GenerativeSampler};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::mpsc;
use std::sync::Arc;

const FLIP_SALT: u64 = 0xf11b;

/// One training example: the (possibly flipped) image the teacher saw, its
/// tapped features with a singleton batch axis, and optional extras.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub sample_id: u64,
    pub image: ArrayD<f32>,
    pub teacher_features: FeaturePyramid<ArrayD<f32>>,
    pub soft_logits: Option<ArrayD<f32>>,
    pub label: Option<ArrayD<u8>>,
}

impl FeatureRecord {
    pub fn new(
        sample_id: u64,
        image: ArrayD<f32>,
        teacher_features: FeaturePyramid<ArrayD<f32>>,
        soft_logits: Option<ArrayD<f32>>,
        label: Option<ArrayD<u8>>,
    ) -> Result<Self> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape(format!("record image must be [3,H,W], got {shape:?}")));
        }
        if teacher_features.input_resolution() != (shape[1], shape[2]) {
            return Err(Error::shape("feature pyramid resolution differs from image"));
        }
        if let Some(l) = &label {
            if l.shape() != [shape[1], shape[2]] {
                return Err(Error::shape("label mask must match image resolution"));
            }
        }
        Ok(FeatureRecord { sample_id, image, teacher_features, soft_logits, label })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    Synthesized,
    Encoded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CachePolicy {
    Online,
    Offline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    None,
    HorizontalFlip,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub mode: DataMode,
    pub cache: CachePolicy,
    pub encode: EncodeMode,
    pub augmentation: Augmentation,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            mode: DataMode::Encoded,
            cache: CachePolicy::Online,
            encode: EncodeMode {
                variant: EncodeVariant::Stochastic,
                t_encode: crate::teacher::T_ENCODE_GENERIC,
                seed: 0,
            },
            augmentation: Augmentation::HorizontalFlip,
        }
    }
}

/// Worker count for online streams: DT_NUM_WORKERS, default 1.
pub fn num_workers() -> usize {
    std::env::var("DT_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Mirrors an image (or any [..,W] array) along its last axis.
pub fn flip_horizontal<T: Clone>(x: &ArrayD<T>) -> ArrayD<T> {
    let mut out = x.clone();
    out.invert_axis(Axis(x.ndim() - 1));
    out.as_standard_layout().to_owned()
}

/// Coin for flip augmentation, keyed by sample and epoch.
pub fn flip_coin(sample_id: u64, epoch: usize) -> bool {
    keyed_rng(&[FLIP_SALT, sample_id, epoch as u64]).gen_bool(0.5)
}

pub type RecordStream = Box<dyn Iterator<Item = Result<FeatureRecord>> + Send>;

/// Splits one batch of a pyramid into per-record singleton pyramids.
fn split_batch(
    pyr: &FeaturePyramid<ArrayD<f32>>,
    rows: usize,
) -> Result<Vec<FeaturePyramid<ArrayD<f32>>>> {
    (0..rows)
        .map(|r| crate::interpreter::select_sample(pyr, r))
        .collect()
}

fn encode_batch(
    teacher: &DiffusionTeacher<f32>,
    images: &ArrayD<f32>,
    spec: &DatasetSpec,
    epoch: usize,
    ids: &[usize],
) -> Result<Vec<FeatureRecord>> {
    let mut shape = images.shape().to_vec();
    shape[0] = ids.len();
    let mut batch = ArrayD::<f32>::zeros(IxDyn(&shape));
    let mut flipped_imgs = Vec::with_capacity(ids.len());
    for (row, &idx) in ids.iter().enumerate() {
        let img = images.index_axis(Axis(0), idx).to_owned().into_dyn();
        let img = if spec.augmentation == Augmentation::HorizontalFlip
            && flip_coin(idx as u64, epoch)
        {
            flip_horizontal(&img)
        } else {
            img
        };
        batch.index_axis_mut(Axis(0), row).assign(&img);
        flipped_imgs.push(img);
    }
    let sample_ids: Vec<u64> = ids.iter().map(|&i| i as u64).collect();
    let pyr = teacher.encode_features(&batch, &spec.encode, &sample_ids, epoch)?;
    let pyrs = split_batch(&pyr, ids.len())?;
    flipped_imgs
        .into_iter()
        .zip(pyrs)
        .zip(sample_ids)
        .map(|((img, p), sid)| FeatureRecord::new(sid, img, p, None, None))
        .collect()
}

/// Lazily evaluated batches, fanned out over `num_workers()` threads when
/// more than one is allowed. At most workers x 2 batches are in flight, so
/// memory stays bounded no matter how long the stream is.
fn batched_stream<F>(n_batches: usize, make_batch: F) -> RecordStream
where
    F: Fn(usize) -> Result<Vec<FeatureRecord>> + Send + Sync + 'static,
{
    let workers = num_workers();
    if workers <= 1 {
        let mut pending: Vec<FeatureRecord> = Vec::new();
        let mut next = 0usize;
        return Box::new(std::iter::from_fn(move || loop {
            if !pending.is_empty() {
                return Some(Ok(pending.remove(0)));
            }
            if next >= n_batches {
                return None;
            }
            match make_batch(next) {
                Ok(batch) => {
                    next += 1;
                    pending = batch;
                }
                Err(e) => {
                    next = n_batches;
                    return Some(Err(e));
                }
            }
        }));
    }
    let make = Arc::new(make_batch);
    let mut receivers = Vec::with_capacity(workers);
    for w in 0..workers {
        let (tx, rx) = mpsc::sync_channel::<Result<Vec<FeatureRecord>>>(1);
        let make = Arc::clone(&make);
        std::thread::spawn(move || {
            let mut b = w;
            while b < n_batches {
                let out = make(b);
                let failed = out.is_err();
                if tx.send(out).is_err() || failed {
                    return;
                }
                b += workers;
            }
        });
        receivers.push(rx);
    }
    let mut pending: Vec<FeatureRecord> = Vec::new();
    let mut next = 0usize;
    Box::new(std::iter::from_fn(move || loop {
        if !pending.is_empty() {
            return Some(Ok(pending.remove(0)));
        }
        if next >= n_batches {
            return None;
        }
        match receivers[next % receivers.len()].recv() {
            Ok(Ok(batch)) => {
                next += 1;
                pending = batch;
            }
            Ok(Err(e)) => {
                next = n_batches;
                return Some(Err(e));
            }
            Err(_) => {
                next = n_batches;
                return Some(Err(Error::numeric("data worker terminated early")));
            }
        }
    }))
}

/// Encoded dataset: one record per image, teacher features from a single
/// denoising pass at `spec.encode.t_encode`. Stochastic encoding redraws
/// noise per epoch; deterministic encoding is epoch-stable.
pub fn iterate_encoded(
    teacher: Arc<DiffusionTeacher<f32>>,
    images: Arc<ArrayD<f32>>,
    spec: DatasetSpec,
    epoch: usize,
    batch: usize,
) -> Result<RecordStream> {
    if spec.mode != DataMode::Encoded {
        return Err(Error::config("iterate_encoded requires spec.mode = encoded"));
    }
    if batch == 0 {
        return Err(Error::config("batch must be positive"));
    }
    let n = images.shape()[0];
    let n_batches = n.div_ceil(batch);
    Ok(batched_stream(n_batches, move |b| {
        let lo = b * batch;
        let hi = ((b + 1) * batch).min(n);
        let ids: Vec<usize> = (lo..hi).collect();
        encode_batch(&teacher, &images, &spec, epoch, &ids)
    }))
}

/// Synthesized dataset: `n` fresh teacher samples with their features.
/// Latents are keyed by (seed, batch), so a fixed seed reproduces the
/// stream exactly.
pub fn iterate_synthesized(
    teacher: Arc<DiffusionTeacher<f32>>,
    n: usize,
    spec: DatasetSpec,
    seed: u64,
    batch: usize,
) -> Result<RecordStream> {
    if spec.mode != DataMode::Synthesized {
        return Err(Error::config("iterate_synthesized requires spec.mode = synthesized"));
    }
    if n == 0 {
        return Err(Error::config("synthesized stream needs n > 0"));
    }
    if batch == 0 {
        return Err(Error::config("batch must be positive"));
    }
    let shape = teacher.prior_shape();
    let n_batches = n.div_ceil(batch);
    Ok(batched_stream(n_batches, move |b| {
        let lo = b * batch;
        let hi = ((b + 1) * batch).min(n);
        let rows = hi - lo;
        let mut rng = keyed_rng(&[seed, 0x5a3b1e, b as u64]);
        let z: ArrayD<f32> =
            standard_normal(&mut rng, &[rows, shape[0], shape[1], shape[2]]);
        let (imgs, pyr) = teacher.sample_with_features(&z)?;
        let pyrs = split_batch(&pyr, rows)?;
        (0..rows)
            .map(|r| {
                let img = imgs.index_axis(Axis(0), r).to_owned().into_dyn();
                FeatureRecord::new((lo + r) as u64, img, pyrs[r].clone(), None, None)
            })
            .collect()
    }))
}

pub const CACHE_MAGIC: &[u8; 4] = b"DTFC";
pub const CACHE_VERSION: u32 = 1;

/// Exact byte size one record occupies in the cache file.
pub fn record_encoded_size(r: &FeatureRecord) -> usize {
    let img = r.image.len() * 4;
    let mut size = 8 + 12 + img + 4;
    for (_, t) in r.teacher_features.iter() {
        size += 4 + 12 + t.len() * 4;
    }
    size += 1;
    if let Some(s) = &r.soft_logits {
        size += 12 + s.len() * 4;
    }
    if let Some(l) = &r.label {
        size += 8 + l.len();
    }
    size
}

/// Header-predicted total file size for a set of records.
pub fn predicted_cache_size<'a>(records: impl Iterator<Item = &'a FeatureRecord>) -> usize {
    12 + records.map(record_encoded_size).sum::<usize>()
}

fn write_f32s<W: Write>(w: &mut W, arr: &ArrayD<f32>) -> Result<()> {
    for v in arr.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Streams records into the pinned "DTFC" cache layout, patching the
/// record count into the header once the stream ends. Returns the count.
pub fn export_cache(
    stream: impl Iterator<Item = Result<FeatureRecord>>,
    path: &Path,
) -> Result<usize> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(CACHE_MAGIC)?;
    w.write_u32::<LittleEndian>(CACHE_VERSION)?;
    w.write_u32::<LittleEndian>(0)?;
    let mut count = 0u32;
    for record in stream {
        let r = record?;
        w.write_u64::<LittleEndian>(r.sample_id)?;
        let ishape = r.image.shape();
        for &d in ishape {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        write_f32s(&mut w, &r.image)?;
        w.write_u32::<LittleEndian>(r.teacher_features.len() as u32)?;
        for (l, t) in r.teacher_features.iter() {
            w.write_u32::<LittleEndian>(l as u32)?;
            let s = t.shape();
            w.write_u32::<LittleEndian>(s[1] as u32)?;
            w.write_u32::<LittleEndian>(s[2] as u32)?;
            w.write_u32::<LittleEndian>(s[3] as u32)?;
            write_f32s(&mut w, t)?;
        }
        let mut flags = 0u8;
        if r.soft_logits.is_some() {
            flags |= 1;
        }
        if r.label.is_some() {
            flags |= 2;
        }
        w.write_u8(flags)?;
        if let Some(soft) = &r.soft_logits {
            let s = soft.shape();
            for &d in s {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            write_f32s(&mut w, soft)?;
        }
        if let Some(label) = &r.label {
            let s = label.shape();
            w.write_u32::<LittleEndian>(s[0] as u32)?;
            w.write_u32::<LittleEndian>(s[1] as u32)?;
            for v in label.iter() {
                w.write_u8(*v)?;
            }
        }
        count += 1;
    }
    let mut file = w.into_inner().map_err(|e| Error::format(e.to_string()))?;
    file.seek(SeekFrom::Start(8))?;
    file.write_all(&count.to_le_bytes())?;
    file.sync_all()?;
    Ok(count as usize)
}

struct CacheReader {
    r: BufReader<std::fs::File>,
    remaining: u32,
    offset: u64,
}

impl CacheReader {
    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let v = self
            .r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::format_at(self.offset, format!("truncated {what}")))?;
        self.offset += 4;
        Ok(v)
    }

    fn read_f32s(&mut self, len: usize, what: &str) -> Result<Vec<f32>> {
        let mut out = vec![0f32; len];
        let mut bytes = vec![0u8; len * 4];
        self.r
            .read_exact(&mut bytes)
            .map_err(|_| Error::format_at(self.offset, format!("truncated {what}")))?;
        for (i, chunk) in bytes.chunks_exact(4).enumerate() {
            out[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        self.offset += (len * 4) as u64;
        Ok(out)
    }

    fn read_record(&mut self) -> Result<FeatureRecord> {
        let start = self.offset;
        let sample_id = self
            .r
            .read_u64::<LittleEndian>()
            .map_err(|_| Error::format_at(start, "truncated sample id"))?;
        self.offset += 8;
        let c = self.read_u32("image dims")? as usize;
        let h = self.read_u32("image dims")? as usize;
        let w = self.read_u32("image dims")? as usize;
        if c != 3 {
            return Err(Error::format_at(start, format!("image channel count {c}, want 3")));
        }
        let image = ArrayD::from_shape_vec(
            IxDyn(&[c, h, w]),
            self.read_f32s(c * h * w, "image payload")?,
        )
        .map_err(|e| Error::format_at(start, e.to_string()))?;
        let n_levels = self.read_u32("level count")? as usize;
        let mut levels = Vec::with_capacity(n_levels);
        for _ in 0..n_levels {
            let l = self.read_u32("level index")? as u8;
            let lc = self.read_u32("level dims")? as usize;
            let lh = self.read_u32("level dims")? as usize;
            let lw = self.read_u32("level dims")? as usize;
            let data = self.read_f32s(lc * lh * lw, "level payload")?;
            let t = ArrayD::from_shape_vec(IxDyn(&[1, lc, lh, lw]), data)
                .map_err(|e| Error::format_at(start, e.to_string()))?;
            levels.push((l, t));
        }
        let pyr = FeaturePyramid::new(levels, (h, w))
            .map_err(|e| Error::format_at(start, e.to_string()))?;
        let flags = self
            .r
            .read_u8()
            .map_err(|_| Error::format_at(self.offset, "truncated flags byte"))?;
        self.offset += 1;
        let soft_logits = if flags & 1 != 0 {
            let k = self.read_u32("soft dims")? as usize;
            let sh = self.read_u32("soft dims")? as usize;
            let sw = self.read_u32("soft dims")? as usize;
            let data = self.read_f32s(k * sh * sw, "soft payload")?;
            Some(
                ArrayD::from_shape_vec(IxDyn(&[k, sh, sw]), data)
                    .map_err(|e| Error::format_at(start, e.to_string()))?,
            )
        } else {
            None
        };
        let label = if flags & 2 != 0 {
            let lh = self.read_u32("label dims")? as usize;
            let lw = self.read_u32("label dims")? as usize;
            let mut bytes = vec![0u8; lh * lw];
            self.r
                .read_exact(&mut bytes)
                .map_err(|_| Error::format_at(self.offset, "truncated label payload"))?;
            self.offset += (lh * lw) as u64;
            Some(
                ArrayD::from_shape_vec(IxDyn(&[lh, lw]), bytes)
                    .map_err(|e| Error::format_at(start, e.to_string()))?,
            )
        } else {
            None
        };
        FeatureRecord::new(sample_id, image, pyr, soft_logits, label)
    }
}

impl Iterator for CacheReader {
    type Item = Result<FeatureRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        Some(self.read_record())
    }
}

/// Streaming reader over an exported cache file.
pub fn load_cache(path: &Path) -> Result<RecordStream> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format_at(0, "truncated before magic"))?;
    if &magic != CACHE_MAGIC {
        return Err(Error::format_at(0, "bad cache magic bytes"));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::format_at(4, "truncated version"))?;
    if version != CACHE_VERSION {
        return Err(Error::format_at(4, format!("unsupported cache version {version}")));
    }
    let count = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::format_at(8, "truncated record count"))?;
    Ok(Box::new(CacheReader { r, remaining: count, offset: 12 }))
}

const PALETTE: [[f32; 3]; 7] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.90, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.90, 0.20],
    [0.80, 0.20, 0.90],
    [0.20, 0.90, 0.90],
    [0.95, 0.55, 0.15],
];

/// Random colored shapes (classes 1..K-1) on a textured background
/// (class 0), with exact masks. Images are [N,3,R,R] in [-1,1], masks
/// [N,R,R] with values below K.
pub fn generate_shapes_dataset(
    n: usize,
    classes: usize,
    resolution: usize,
    seed: u64,
) -> Result<(ArrayD<f32>, ArrayD<u8>)> {
    if classes < 2 {
        return Err(Error::config("need background plus at least one shape class"));
    }
    if classes > 200 {
        return Err(Error::config("at most 200 classes supported"));
    }
    if resolution % 32 != 0 {
        return Err(Error::config(format!("resolution {resolution} not divisible by 32")));
    }
    let r = resolution;
    let mut images = ArrayD::<f32>::zeros(IxDyn(&[n, 3, r, r]));
    let mut masks = ArrayD::<u8>::zeros(IxDyn(&[n, r, r]));
    let mut rng = keyed_rng(&[seed, 0x5da9e5]);
    for i in 0..n {
        // Textured background: base color plus a smooth low-res field.
        let base: [f32; 3] = [
            rng.gen_range(0.25..0.75),
            rng.gen_range(0.25..0.75),
            rng.gen_range(0.25..0.75),
        ];
        let grid: Vec<f32> = (0..16).map(|_| rng.gen_range(-0.12..0.12)).collect();
        for h in 0..r {
            for w in 0..r {
                let t = smooth_field(&grid, h as f32 / r as f32, w as f32 / r as f32);
                for c in 0..3 {
                    let v = (base[c] + t).clamp(0.0, 1.0);
                    images[[i, c, h, w]] = 2.0 * v - 1.0;
                }
            }
        }
        let n_shapes = rng.gen_range(1..=3);
        for _ in 0..n_shapes {
            let class = rng.gen_range(1..classes);
            let kind = (class - 1) % 4;
            let rad = rng.gen_range(r / 10..=r / 5) as i64;
            let cy = rng.gen_range(rad..r as i64 - rad);
            let cx = rng.gen_range(rad..r as i64 - rad);
            let pal = PALETTE[(class - 1) % PALETTE.len()];
            let jitter: [f32; 3] = [
                rng.gen_range(-0.06..0.06),
                rng.gen_range(-0.06..0.06),
                rng.gen_range(-0.06..0.06),
            ];
            for h in 0..r as i64 {
                for w in 0..r as i64 {
                    let dy = h - cy;
                    let dx = w - cx;
                    let inside = match kind {
                        0 => dy * dy + dx * dx <= rad * rad,
                        1 => dy.abs() <= rad && dx.abs() <= rad,
                        2 => dy.abs() + dx.abs() <= rad,
                        _ => dy >= -rad && dy <= rad && 2 * dx.abs() <= rad + dy,
                    };
                    if inside {
                        masks[[i, h as usize, w as usize]] = class as u8;
                        for c in 0..3 {
                            let v = (pal[c] + jitter[c]).clamp(0.0, 1.0);
                            images[[i, c, h as usize, w as usize]] = 2.0 * v - 1.0;
                        }
                    }
                }
            }
        }
    }
    Ok((images, masks))
}

/// Bilinear interpolation over a 4x4 coefficient grid on the unit square.
fn smooth_field(grid: &[f32], y: f32, x: f32) -> f32 {
    let gy = (y * 3.0).min(2.999);
    let gx = (x * 3.0).min(2.999);
    let (y0, x0) = (gy as usize, gx as usize);
    let (fy, fx) = (gy - y0 as f32, gx - x0 as f32);
    let g = |yy: usize, xx: usize| grid[yy * 4 + xx];
    g(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + g(y0, x0 + 1) * (1.0 - fy) * fx
        + g(y0 + 1, x0) * fy * (1.0 - fx)
        + g(y0 + 1, x0 + 1) * fy * fx
}
