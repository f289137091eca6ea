//! Synthetic datasets, image buffers and file formats.

pub mod checkpoint;
pub mod ppm;
pub mod synth;

use std::io::Write;
use std::path::{Path, PathBuf};

pub use checkpoint::{load_checkpoint, round_tensor_to_f32, save_checkpoint, CHECKPOINT_VERSION};
pub use ppm::{grid, read_ppm, write_ppm, GRID_SEPARATOR};
pub use synth::{foreground_mask, render, ShapeKind, SyntheticSpec, MAX_STRIPE_FREQ};

use crate::rng::{stream, Purpose};
use crate::{Error, Result, Tensor};

/// 8-bit RGB image, row-major interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape("image dimensions must be positive"));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "pixel buffer length {} != {width}x{height}x3",
                pixels.len()
            )));
        }
        Ok(ImageBuffer { width, height, pixels })
    }

    /// Convert to the model's `[-1, 1]` range as a `[3, H, W]` tensor
    /// (`v / 127.5 - 1` per channel value).
    pub fn to_tensor(&self) -> Result<Tensor> {
        let (w, h) = (self.width, self.height);
        let mut data = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data[c * h * w + y * w + x] =
                        self.pixels[(y * w + x) * 3 + c] as f64 / 127.5 - 1.0;
                }
            }
        }
        Tensor::new(vec![3, h, w], data)
    }

    /// Quantize a `[3, H, W]` or `[1, 3, H, W]` tensor in `[-1, 1]` back to
    /// 8-bit RGB, clamping out-of-range values.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let shape = t.shape();
        let (h, w) = match shape {
            [3, h, w] => (*h, *w),
            [1, 3, h, w] => (*h, *w),
            _ => {
                return Err(Error::shape(format!(
                    "image tensor wants [3,H,W] or [1,3,H,W], got {shape:?}"
                )))
            }
        };
        let data = t.data();
        let mut pixels = vec![0u8; w * h * 3];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = data[c * h * w + y * w + x].clamp(-1.0, 1.0);
                    pixels[(y * w + x) * 3 + c] = ((v + 1.0) * 127.5).round() as u8;
                }
            }
        }
        ImageBuffer::new(w, h, pixels)
    }
}

/// One dataset entry: the ground-truth factors and the loaded image.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub spec: SyntheticSpec,
    pub image: Tensor,
}

/// A loaded synthetic dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub image_size: usize,
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Stack the given item indices into an `[N, 3, S, S]` batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::shape("empty batch"));
        }
        let s = self.image_size;
        let mut data = Vec::with_capacity(indices.len() * 3 * s * s);
        for &i in indices {
            let item = self
                .items
                .get(i)
                .ok_or_else(|| Error::shape(format!("index {i} out of range")))?;
            data.extend_from_slice(item.image.data());
        }
        Tensor::new(vec![indices.len(), 3, s, s], data)
    }
}

const MANIFEST_HEADER: &str = "file\tshape\tcenter_x\tcenter_y\tsize\trotation\tfg_r\tfg_g\tfg_b\tbg_r\tbg_g\tbg_b\tstripe_freq\tstripe_theta";

fn manifest_line(file: &str, s: &SyntheticSpec) -> String {
    format!(
        "{file}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        s.shape.name(),
        s.center_x,
        s.center_y,
        s.size,
        s.rotation,
        s.fg[0],
        s.fg[1],
        s.fg[2],
        s.bg[0],
        s.bg[1],
        s.bg[2],
        s.stripe_freq,
        s.stripe_theta
    )
}

fn parse_manifest_line(line: &str, lineno: usize) -> Result<(String, SyntheticSpec)> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 14 {
        return Err(Error::format(format!(
            "manifest line {lineno}: want 14 fields, got {}",
            fields.len()
        )));
    }
    let f = |i: usize| -> Result<f64> {
        fields[i]
            .parse()
            .map_err(|_| Error::format(format!("manifest line {lineno}: bad number {:?}", fields[i])))
    };
    let b = |i: usize| -> Result<u8> {
        fields[i]
            .parse()
            .map_err(|_| Error::format(format!("manifest line {lineno}: bad byte {:?}", fields[i])))
    };
    let spec = SyntheticSpec {
        shape: ShapeKind::from_name(fields[1])?,
        center_x: f(2)?,
        center_y: f(3)?,
        size: f(4)?,
        rotation: f(5)?,
        fg: [b(6)?, b(7)?, b(8)?],
        bg: [b(9)?, b(10)?, b(11)?],
        stripe_freq: b(12)?,
        stripe_theta: f(13)?,
    };
    spec.validate()?;
    Ok((fields[0].to_owned(), spec))
}

/// Generate `n` images plus `manifest.tsv` under `out_dir`; returns the
/// manifest path. Each image's factors come from an independent stream
/// derived from `(seed, index)`, so regeneration is bitwise reproducible
/// and order-independent.
pub fn dataset_gen(n: usize, image_size: usize, seed: u64, out_dir: &Path) -> Result<PathBuf> {
    if n == 0 {
        return Err(Error::config("dataset size must be at least 1"));
    }
    std::fs::create_dir_all(out_dir)?;
    let manifest_path = out_dir.join("manifest.tsv");
    let mut manifest = String::with_capacity(64 * (n + 1));
    manifest.push_str(MANIFEST_HEADER);
    manifest.push('\n');
    for i in 0..n {
        let mut rng = stream(seed, Purpose::DatasetSpec, i as u64);
        let spec = SyntheticSpec::sample(&mut rng);
        let file = format!("img-{i:05}.ppm");
        write_ppm(&out_dir.join(&file), &render(&spec, image_size)?)?;
        manifest.push_str(&manifest_line(&file, &spec));
        manifest.push('\n');
    }
    let mut f = std::fs::File::create(&manifest_path)?;
    f.write_all(manifest.as_bytes())?;
    Ok(manifest_path)
}

/// Load a dataset from its manifest; images are read relative to the
/// manifest's directory and converted to `[-1, 1]` tensors.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == MANIFEST_HEADER => {}
        _ => return Err(Error::format("manifest missing or wrong header line")),
    }
    let mut items = Vec::new();
    let mut image_size = None;
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let (file, spec) = parse_manifest_line(line, idx + 2)?;
        let img = read_ppm(&dir.join(&file))?;
        if img.width != img.height {
            return Err(Error::format(format!("{file}: dataset images must be square")));
        }
        match image_size {
            None => image_size = Some(img.width),
            Some(s) if s == img.width => {}
            Some(s) => {
                return Err(Error::format(format!(
                    "{file}: size {} differs from dataset size {s}",
                    img.width
                )))
            }
        }
        items.push(DatasetItem { spec, image: img.to_tensor()? });
    }
    let image_size =
        image_size.ok_or_else(|| Error::format("manifest lists no images"))?;
    Ok(Dataset { image_size, items })
}
