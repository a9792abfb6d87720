//! Episodic task sampling, synthetic dataset generation and ATDS file I/O.

use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numkernel::Tensor4;

/// Image classification dataset: `per_class` images for each class, pixels
/// in [0, 1], stored class-major then image-major in (channels, height,
/// width) order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub class_names: Vec<String>,
    pixels: Vec<f64>,
}

impl Dataset {
    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, class: usize, idx: usize) -> &[f64] {
        let il = self.image_len();
        let start = (class * self.per_class + idx) * il;
        &self.pixels[start..start + il]
    }

    /// Dataset restricted to the given classes (copies pixel data).
    pub fn subset_classes(&self, class_indices: &[usize]) -> Dataset {
        let il = self.image_len();
        let mut pixels = Vec::with_capacity(class_indices.len() * self.per_class * il);
        let mut class_names = Vec::with_capacity(class_indices.len());
        for &c in class_indices {
            class_names.push(self.class_names[c].clone());
            for i in 0..self.per_class {
                pixels.extend_from_slice(self.image(c, i));
            }
        }
        Dataset {
            classes: class_indices.len(),
            per_class: self.per_class,
            height: self.height,
            width: self.width,
            channels: self.channels,
            class_names,
            pixels,
        }
    }
}

/// One n-way episode: support and query sets with labels remapped to
/// 0..n-1. `support_ids`/`query_ids` carry (original class, image index)
/// provenance.
#[derive(Debug, Clone)]
pub struct Episode {
    pub n_way: usize,
    pub support_x: Tensor4,
    pub support_y: Vec<usize>,
    pub query_x: Tensor4,
    pub query_y: Vec<usize>,
    pub support_ids: Vec<(usize, usize)>,
    pub query_ids: Vec<(usize, usize)>,
}

/// Draw an n-way k-shot episode with q query images per class. Classes and
/// images are drawn without replacement, so support and query are disjoint.
pub fn sample_episode<R: Rng + ?Sized>(
    ds: &Dataset,
    n: usize,
    k: usize,
    q: usize,
    rng: &mut R,
) -> Result<Episode> {
    if n == 0 || k == 0 || q == 0 {
        return Err(Error::InvalidArgument(
            "episode sizes must be positive".into(),
        ));
    }
    if ds.classes < n {
        return Err(Error::InsufficientData(format!(
            "{} classes available, episode wants {n}",
            ds.classes
        )));
    }
    if ds.per_class < k + q {
        return Err(Error::InsufficientData(format!(
            "{} images per class, episode wants {}",
            ds.per_class,
            k + q
        )));
    }
    let classes: Vec<usize> = sample(rng, ds.classes, n).into_iter().collect();
    let il = ds.image_len();
    let mut support_x = Tensor4::zeros([n * k, ds.channels, ds.height, ds.width]);
    let mut query_x = Tensor4::zeros([n * q, ds.channels, ds.height, ds.width]);
    let mut support_y = Vec::with_capacity(n * k);
    let mut query_y = Vec::with_capacity(n * q);
    let mut support_ids = Vec::with_capacity(n * k);
    let mut query_ids = Vec::with_capacity(n * q);
    for (label, &class) in classes.iter().enumerate() {
        let picks: Vec<usize> = sample(rng, ds.per_class, k + q).into_iter().collect();
        for (j, &img) in picks.iter().enumerate() {
            if j < k {
                let row = label * k + j;
                support_x.data_mut()[row * il..(row + 1) * il]
                    .copy_from_slice(ds.image(class, img));
                support_y.push(label);
                support_ids.push((class, img));
            } else {
                let row = label * q + (j - k);
                query_x.data_mut()[row * il..(row + 1) * il]
                    .copy_from_slice(ds.image(class, img));
                query_y.push(label);
                query_ids.push((class, img));
            }
        }
    }
    Ok(Episode {
        n_way: n,
        support_x,
        support_y,
        query_x,
        query_y,
        support_ids,
        query_ids,
    })
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller; one draw per call keeps seeding simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Synthetic dataset: each class is a smooth low-frequency prototype image
/// plus per-image Gaussian pixel noise, clamped to [0, 1].
pub fn gen_synth<R: Rng + ?Sized>(
    classes: usize,
    per_class: usize,
    height: usize,
    width: usize,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if classes == 0 || per_class == 0 || height == 0 || width == 0 {
        return Err(Error::InvalidArgument(
            "dataset dimensions must be positive".into(),
        ));
    }
    const GRID: usize = 4;
    let channels = 1;
    let il = height * width;
    let mut pixels = Vec::with_capacity(classes * per_class * il);
    for _ in 0..classes {
        // Coarse random field, bilinearly upsampled.
        let mut grid = [0.0f64; GRID * GRID];
        for g in grid.iter_mut() {
            *g = normal(rng);
        }
        let mut proto = vec![0.0f64; il];
        for y in 0..height {
            for x in 0..width {
                let gy = if height > 1 {
                    y as f64 * (GRID - 1) as f64 / (height - 1) as f64
                } else {
                    0.0
                };
                let gx = if width > 1 {
                    x as f64 * (GRID - 1) as f64 / (width - 1) as f64
                } else {
                    0.0
                };
                let y0 = gy.floor() as usize;
                let x0 = gx.floor() as usize;
                let y1 = (y0 + 1).min(GRID - 1);
                let x1 = (x0 + 1).min(GRID - 1);
                let fy = gy - y0 as f64;
                let fx = gx - x0 as f64;
                let v = grid[y0 * GRID + x0] * (1.0 - fy) * (1.0 - fx)
                    + grid[y0 * GRID + x1] * (1.0 - fy) * fx
                    + grid[y1 * GRID + x0] * fy * (1.0 - fx)
                    + grid[y1 * GRID + x1] * fy * fx;
                proto[y * width + x] = v;
            }
        }
        let lo = proto.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = proto.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        for v in &mut proto {
            *v = 0.15 + 0.7 * (*v - lo) / span;
        }
        for _ in 0..per_class {
            for &p in &proto {
                let v = p + noise_sigma * normal(rng);
                pixels.push(v.clamp(0.0, 1.0));
            }
        }
    }
    let class_names = (0..classes).map(|c| format!("class_{c:03}")).collect();
    Ok(Dataset {
        classes,
        per_class,
        height,
        width,
        channels,
        class_names,
        pixels,
    })
}

pub const ATDS_MAGIC: &[u8; 4] = b"ATDS";
pub const ATDS_VERSION: u32 = 1;

/// Write the dataset: magic, version, (classes, per_class, height, width,
/// channels) as u32 LE, then pixels as u8 = round(p * 255).
pub fn write_atds<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    w.write_all(ATDS_MAGIC)?;
    w.write_all(&ATDS_VERSION.to_le_bytes())?;
    for v in [
        ds.classes as u32,
        ds.per_class as u32,
        ds.height as u32,
        ds.width as u32,
        ds.channels as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(ds.pixels.len());
    for &p in &ds.pixels {
        buf.push((p * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_atds<R: Read>(mut r: R, path: &str) -> Result<Dataset> {
    let fmt = |detail: String| Error::Format {
        path: path.to_string(),
        detail,
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != ATDS_MAGIC {
        return Err(fmt(format!("bad magic {magic:?}")));
    }
    let mut read_u32 = |r: &mut R| -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    };
    let version = read_u32(&mut r)?;
    if version != ATDS_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let classes = read_u32(&mut r)? as usize;
    let per_class = read_u32(&mut r)? as usize;
    let height = read_u32(&mut r)? as usize;
    let width = read_u32(&mut r)? as usize;
    let channels = read_u32(&mut r)? as usize;
    let total = classes * per_class * height * width * channels;
    let mut buf = vec![0u8; total];
    r.read_exact(&mut buf)?;
    let pixels = buf.iter().map(|&b| b as f64 / 255.0).collect();
    let class_names = (0..classes).map(|c| format!("class_{c:03}")).collect();
    Ok(Dataset {
        classes,
        per_class,
        height,
        width,
        channels,
        class_names,
        pixels,
    })
}
