//! Datasets: in-memory representation, synthetic desk-scale generator and
//! on-disk formats (raw `LLDS` binary and PNG class trees).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use learnlock_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bytes::{Reader, Writer};
use crate::error::{Error, Result};

pub const RAW_MAGIC: [u8; 4] = *b"LLDS";
pub const RAW_VERSION: u16 = 1;
pub const RAW_FILE: &str = "data.llds";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    PngTree,
    Raw,
}

/// SHA-256 over image shape, class count, sample count and per-class counts.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let raw = hex::decode(s).map_err(|e| Error::Dataset(format!("bad fingerprint {s:?}: {e}")))?;
        let arr: [u8; 32] = raw
            .try_into()
            .map_err(|_| Error::Dataset(format!("fingerprint {s:?} is not 32 bytes")))?;
        Ok(Self(arr))
    }
}

impl std::fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fingerprint({})", &self.to_hex()[..16])
    }
}

impl std::fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Labeled images `N x C x H x W` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_names: Vec<String>, split: Split) -> Result<Self> {
        let ds = Self {
            images,
            labels,
            class_names,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.images.shape();
        if s.len() != 4 {
            return Err(Error::Dataset(format!("images must be N x C x H x W, got {s:?}")));
        }
        if s[0] != self.labels.len() {
            return Err(Error::Dataset(format!("{} images but {} labels", s[0], self.labels.len())));
        }
        let k = self.class_names.len();
        if k < 2 {
            return Err(Error::Dataset(format!("need at least 2 classes, got {k}")));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= k) {
            return Err(Error::Dataset(format!("label {y} outside 0..{k}")));
        }
        if let Some(v) = self.images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Dataset(format!("pixel value {v} outside [0, 1]")));
        }
        if self.split == Split::Train {
            let counts = self.class_counts();
            if let Some(c) = counts.iter().position(|&n| n == 0) {
                return Err(Error::Dataset(format!("class {c} has no training samples")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image_len(&self) -> usize {
        self.images.row_len()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        self.images.row(i)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    pub fn fingerprint(&self) -> Fingerprint {
        let mut h = Sha256::new();
        h.update(b"learnlock-dataset-v1");
        for d in self.image_shape() {
            h.update((d as u64).to_le_bytes());
        }
        h.update((self.num_classes() as u64).to_le_bytes());
        h.update((self.len() as u64).to_le_bytes());
        for c in self.class_counts() {
            h.update((c as u64).to_le_bytes());
        }
        Fingerprint(h.finalize().into())
    }

    /// Same samples with new pixel values.
    pub fn with_images(&self, images: Tensor) -> Result<Self> {
        Self::new(images, self.labels.clone(), self.class_names.clone(), self.split)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            split: self.split,
        }
    }

    /// Indices of samples, grouped by class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    pub fn manifest(&self, format: DataFormat) -> Manifest {
        Manifest {
            format,
            num_classes: self.num_classes(),
            num_samples: self.len(),
            image_shape: self.image_shape(),
            class_names: self.class_names.clone(),
            class_counts: self.class_counts(),
            split: self.split,
            fingerprint: self.fingerprint().to_hex(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: DataFormat,
    pub num_classes: usize,
    pub num_samples: usize,
    pub image_shape: [usize; 3],
    pub class_names: Vec<String>,
    pub class_counts: Vec<usize>,
    pub split: Split,
    pub fingerprint: String,
}

// ---- raw binary --------------------------------------------------------

pub fn encode_raw(ds: &Dataset) -> Result<Vec<u8>> {
    let [c, h, w] = ds.image_shape();
    let fits16 = |v: usize| u16::try_from(v).map_err(|_| Error::Dataset(format!("{v} does not fit in u16")));
    let mut out = Writer::default();
    out.bytes(&RAW_MAGIC);
    out.u16(RAW_VERSION);
    out.u32(u32::try_from(ds.len()).map_err(|_| Error::Dataset("too many samples".into()))?);
    out.u16(fits16(c)?);
    out.u16(fits16(h)?);
    out.u16(fits16(w)?);
    out.u16(fits16(ds.num_classes())?);
    for &y in &ds.labels {
        out.u16(y as u16);
    }
    out.f32s(ds.images.data());
    Ok(out.buf)
}

/// Decodes an `LLDS` stream; class names default to `class<k>`.
pub fn decode_raw(bytes: &[u8], split: Split) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.magic(RAW_MAGIC)?;
    let version = r.u16()?;
    if version != RAW_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n = r.u32()? as usize;
    let (c, h, w) = (r.u16()? as usize, r.u16()? as usize, r.u16()? as usize);
    let k = r.u16()? as usize;
    let labels = (0..n).map(|_| r.u16().map(usize::from)).collect::<Result<Vec<_>>>()?;
    let data = r.f32s(n * c * h * w)?;
    let names = (0..k).map(|i| format!("class{i}")).collect();
    Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, names, split)
}

// ---- load / save ----------------------------------------------------------

fn read_manifest(dir: &Path) -> Result<Option<Manifest>> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

/// Loads either a raw `LLDS` file, a directory containing one, or a
/// `class_name/*.png` tree (classes and files in lexicographic order).
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    if path.is_file() {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let manifest = path.parent().map(read_manifest).transpose()?.flatten();
        return finish_raw(decode_raw(&bytes, Split::Train)?, manifest);
    }
    if !path.is_dir() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory")));
    }
    let manifest = read_manifest(path)?;
    let raw = path.join(RAW_FILE);
    if raw.is_file() {
        let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
        return finish_raw(decode_raw(&bytes, Split::Train)?, manifest);
    }
    load_png_tree(path, manifest)
}

fn finish_raw(mut ds: Dataset, manifest: Option<Manifest>) -> Result<Dataset> {
    if let Some(m) = manifest {
        if m.class_names.len() == ds.num_classes() {
            ds.class_names = m.class_names;
        }
        ds.split = m.split;
    }
    Ok(ds)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    v.sort();
    Ok(v)
}

fn load_png_tree(dir: &Path, manifest: Option<Manifest>) -> Result<Dataset> {
    let class_dirs: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::NoClasses(dir.to_path_buf()));
    }
    let dir_names: Vec<String> = class_dirs
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let (class_names, split) = match &manifest {
        Some(m) => {
            if let Some((name, p)) = dir_names.iter().zip(&class_dirs).find(|(n, _)| !m.class_names.contains(n)) {
                return Err(Error::UnknownClass {
                    class: name.clone(),
                    path: p.clone(),
                });
            }
            (m.class_names.clone(), m.split)
        }
        None => (dir_names.clone(), Split::Train),
    };
    let mut shape: Option<[usize; 3]> = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (name, cdir) in dir_names.iter().zip(&class_dirs) {
        let label = class_names.iter().position(|n| n == name).expect("checked above");
        for file in sorted_entries(cdir)? {
            if file.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let (img_shape, pixels) = read_png(&file)?;
            match shape {
                None => shape = Some(img_shape),
                Some(s) if s != img_shape => {
                    return Err(Error::ImageSize {
                        path: file,
                        expected: s,
                        found: img_shape,
                    })
                }
                _ => {}
            }
            data.extend(pixels);
            labels.push(label);
        }
    }
    let [c, h, w] = shape.ok_or_else(|| Error::NoClasses(dir.to_path_buf()))?;
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, class_names, split)
}

/// Decodes an 8-bit grayscale or RGB(A) PNG into CHW floats `v / 255`.
fn read_png(path: &Path) -> Result<([usize; 3], Vec<f32>)> {
    let decode_err = |msg: String| Error::Decode {
        path: path.to_path_buf(),
        msg,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| decode_err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(decode_err(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let (stride, c) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(decode_err(format!("unsupported color type {other:?}"))),
    };
    let mut out = vec![0.0f32; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            out[ch * h * w + p] = buf[p * stride + ch] as f32 / 255.0;
        }
    }
    Ok(([c, h, w], out))
}

/// Rounds half up to the nearest 8-bit level.
pub fn quantize_u8(v: f32) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn write_png(path: &Path, [c, h, w]: [usize; 3], pixels: &[f32]) -> Result<()> {
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(Error::Dataset(format!("PNG export supports 1 or 3 channels, got {c}"))),
    };
    let mut bytes = vec![0u8; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            bytes[p * c + ch] = quantize_u8(pixels[ch * h * w + p]);
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let io_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e.to_string()));
    let mut writer = enc.write_header().map_err(io_err)?;
    writer.write_image_data(&bytes).map_err(io_err)?;
    Ok(())
}

/// Writes the dataset under `dir` plus a `manifest.json`.
pub fn save_dataset(ds: &Dataset, dir: &Path, format: DataFormat) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    match format {
        DataFormat::Raw => {
            let path = dir.join(RAW_FILE);
            fs::write(&path, encode_raw(ds)?).map_err(|e| Error::io(&path, e))?;
        }
        DataFormat::PngTree => {
            let mut next: BTreeMap<usize, usize> = BTreeMap::new();
            for name in &ds.class_names {
                let p = dir.join(name);
                fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
            for i in 0..ds.len() {
                let y = ds.labels[i];
                let idx = next.entry(y).or_default();
                let path = dir.join(&ds.class_names[y]).join(format!("{:06}.png", *idx));
                *idx += 1;
                write_png(&path, ds.image_shape(), ds.image(i))?;
            }
        }
    }
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&ds.manifest(format))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

// ---- synthetic benchmark --------------------------------------------------

/// Generator for the desk-scale stand-in benchmark.
///
/// Class `k` is an oriented grating at angle `k * pi / K` with its own
/// spatial frequency. Every sample draws phase, amplitude, a small angle
/// jitter and per-channel gain, then adds a weaker grating at a random
/// angle and pixel noise. Pixels are kept inside `[PIXEL_LO, PIXEL_HI]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_shape: [usize; 3],
    /// Required RMS distance between any two class templates.
    pub margin: f32,
    pub seed: u64,
}

pub const PIXEL_LO: f32 = 0.07;
pub const PIXEL_HI: f32 = 0.93;
const SIGNAL_AMP: (f32, f32) = (0.04, 0.08);
const DISTRACTOR_AMP: (f32, f32) = (0.03, 0.06);
const NOISE_SIGMA: f32 = 0.08;


impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 3,
            train_per_class: 1000,
            test_per_class: 200,
            image_shape: [3, 32, 32],
            margin: 0.1,
            seed: 0,
        }
    }
}

struct ClassTemplate {
    angle: f32,
    freq: f32,
}

impl SyntheticSpec {
    fn templates(&self) -> Vec<ClassTemplate> {
        let k = self.num_classes;
        (0..k)
            .map(|c| ClassTemplate {
                angle: std::f32::consts::PI * c as f32 / k as f32,
                freq: [0.16f32, 0.2][c % 2],
            })
            .collect()
    }

    fn render(&self, t: &ClassTemplate, phase: f32, amp: f32, out: &mut [f32]) {
        let [c, h, w] = self.image_shape;
        let (s, co) = t.angle.sin_cos();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let u = x as f32 * co + y as f32 * s;
                    out[(ch * h + y) * w + x] += amp * (std::f32::consts::TAU * t.freq * u + phase).sin();
                }
            }
        }
    }

    /// Smallest RMS distance between two canonical class templates.
    pub fn template_separation(&self) -> f32 {
        let d: usize = self.image_shape.iter().product();
        let imgs: Vec<Vec<f32>> = self
            .templates()
            .iter()
            .map(|t| {
                let mut v = vec![0.0; d];
                self.render(t, 0.0, 0.25, &mut v);
                v
            })
            .collect();
        let mut best = f32::INFINITY;
        for i in 0..imgs.len() {
            for j in i + 1..imgs.len() {
                let ss: f32 = imgs[i].iter().zip(&imgs[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                best = best.min((ss / d as f32).sqrt());
            }
        }
        best
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.margin.is_nan() || self.margin <= 0.0 {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if self.train_per_class == 0 {
            return Err(Error::Config("train_per_class must be positive".into()));
        }
        if self.image_shape.contains(&0) {
            return Err(Error::Config(format!("bad image shape {:?}", self.image_shape)));
        }
        let sep = self.template_separation();
        if sep < self.margin {
            return Err(Error::Config(format!(
                "class templates separate by {sep:.4}, below margin {} for {} classes",
                self.margin, self.num_classes
            )));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng, templates: &[ClassTemplate], label: usize, out: &mut [f32]) {
        let [c, h, w] = self.image_shape;
        let plane = h * w;
        let noise = Normal::new(0.0f32, NOISE_SIGMA).expect("valid sigma");
        let jitter = std::f32::consts::PI / (6.0 * self.num_classes as f32);
        let base = &templates[label];
        let t = ClassTemplate {
            angle: base.angle + rng.gen_range(-jitter..jitter),
            freq: base.freq * rng.gen_range(0.9..1.1),
        };
        out.fill(0.0);
        let phase = rng.gen_range(0.0..std::f32::consts::TAU);
        self.render(&t, phase, rng.gen_range(SIGNAL_AMP.0..SIGNAL_AMP.1), out);
        let distractor = ClassTemplate {
            angle: rng.gen_range(0.0..std::f32::consts::PI),
            freq: rng.gen_range(0.08..0.3),
        };
        let amp = rng.gen_range(DISTRACTOR_AMP.0..DISTRACTOR_AMP.1);
        self.render(&distractor, rng.gen_range(0.0..std::f32::consts::TAU), amp, out);
        for ch in 0..c {
            let gain = rng.gen_range(0.6..1.4);
            for v in &mut out[ch * plane..(ch + 1) * plane] {
                *v = 0.5 + gain * *v;
            }
        }
        for v in out.iter_mut() {
            *v = (*v + noise.sample(rng)).clamp(PIXEL_LO, PIXEL_HI);
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng, per_class: usize, split: Split) -> Result<Dataset> {
        let templates = self.templates();
        let d: usize = self.image_shape.iter().product();
        let n = per_class * self.num_classes;
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.num_classes).collect();
        for i in (1..n).rev() {
            labels.swap(i, rng.gen_range(0..=i));
        }
        let mut data = vec![0.0; n * d];
        for (i, &y) in labels.iter().enumerate() {
            self.sample(rng, &templates, y, &mut data[i * d..(i + 1) * d]);
        }
        let [c, h, w] = self.image_shape;
        let names = (0..self.num_classes).map(|k| format!("class{k}")).collect();
        Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, names, split)
    }
}

/// Seed-deterministic `(train, test)` pair; train and test use disjoint
/// random streams.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut train_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut test_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    test_rng.set_stream(1);
    let train = spec.draw(&mut train_rng, spec.train_per_class, Split::Train)?;
    let test = spec.draw(&mut test_rng, spec.test_per_class, Split::Test)?;
    Ok((train, test))
}
