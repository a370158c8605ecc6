//! Dataset plumbing: PGM/PPM image I/O, scene loading with center cropping,
//! synthetic crowd-scene generation and batch assembly.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{
    downsample_preserving_count, render_density, AnnotationFile, DensityMap, HeadAnnotations,
    KernelSpec,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A raw image as channel planes in [0, 1].
#[derive(Debug, Clone)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// channel-major planes, row-major within each plane
    pub data: Vec<f32>,
}

/// Parse binary PGM (P5) or PPM (P6), 8-bit maxval only.
pub fn read_netpbm(path: &Path) -> Result<Image> {
    let p = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| Error::io(p.clone(), e))?;
    let mut pos = 0;

    let mut next_token = |bytes: &[u8]| -> Result<String> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::malformed(p.clone(), "unexpected end of header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = next_token(&bytes)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(Error::malformed(
                p,
                format!("unsupported magic '{}' (only binary P5/P6)", other),
            ))
        }
    };
    let width: usize = next_token(&bytes)?
        .parse()
        .map_err(|_| Error::malformed(p.clone(), "bad width"))?;
    let height: usize = next_token(&bytes)?
        .parse()
        .map_err(|_| Error::malformed(p.clone(), "bad height"))?;
    let maxval: usize = next_token(&bytes)?
        .parse()
        .map_err(|_| Error::malformed(p.clone(), "bad maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::malformed(
            p,
            format!("maxval {} unsupported (8-bit only)", maxval),
        ));
    }
    pos += 1; // single whitespace after maxval
    let expected = width * height * channels;
    if bytes.len() < pos + expected {
        return Err(Error::malformed(
            p,
            format!(
                "pixel payload truncated: need {} bytes, have {}",
                expected,
                bytes.len().saturating_sub(pos)
            ),
        ));
    }
    let raw = &bytes[pos..pos + expected];
    let scale = 1.0 / maxval as f32;
    // interleaved (P6) -> planar
    let mut data = vec![0.0f32; expected];
    for i in 0..width * height {
        for c in 0..channels {
            data[c * width * height + i] = raw[i * channels + c] as f32 * scale;
        }
    }
    Ok(Image {
        channels,
        height,
        width,
        data,
    })
}

/// Write a binary 8-bit PGM (single plane, values clamped to [0, 1]).
pub fn write_pgm(image: &Image, path: &Path) -> Result<()> {
    if image.channels != 1 {
        return Err(Error::invalid_argument("write_pgm expects 1 channel"));
    }
    let mut buf = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    buf.extend(
        image
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// One image with its head annotations.
#[derive(Debug, Clone)]
pub struct Scene {
    pub id: String,
    pub image: Tensor,
    pub annotations: HeadAnnotations,
}

impl Scene {
    pub fn head_count(&self) -> usize {
        self.annotations.count()
    }
}

/// Center-crop a scene to exactly `(crop_h, crop_w)`. Heads outside the crop
/// are dropped, the rest are shifted into crop coordinates.
pub fn center_crop(scene: &Scene, crop_h: usize, crop_w: usize) -> Result<Scene> {
    let (_, c, h, w) = scene.image.shape();
    if crop_h > h || crop_w > w {
        return Err(Error::invalid_argument(format!(
            "crop {}x{} larger than image {}x{}",
            crop_h, crop_w, h, w
        )));
    }
    let oy = (h - crop_h) / 2;
    let ox = (w - crop_w) / 2;
    let mut data = vec![0.0f32; c * crop_h * crop_w];
    for ci in 0..c {
        let src = scene.image.plane(0, ci);
        for y in 0..crop_h {
            let s = (y + oy) * w + ox;
            data[(ci * crop_h + y) * crop_w..(ci * crop_h + y) * crop_w + crop_w]
                .copy_from_slice(&src[s..s + crop_w]);
        }
    }
    let points: Vec<(f32, f32)> = scene
        .annotations
        .points
        .iter()
        .filter_map(|&(x, y)| {
            let nx = x - ox as f32;
            let ny = y - oy as f32;
            (nx >= 0.0 && ny >= 0.0 && nx < crop_w as f32 && ny < crop_h as f32)
                .then_some((nx, ny))
        })
        .collect();
    Ok(Scene {
        id: scene.id.clone(),
        image: Tensor::new((1, c, crop_h, crop_w), data)?,
        annotations: HeadAnnotations::new((crop_h, crop_w), points)?,
    })
}

/// Center-crop to the largest dimensions divisible by `multiple`.
pub fn crop_to_multiple(scene: &Scene, multiple: usize) -> Result<Scene> {
    let (_, _, h, w) = scene.image.shape();
    let (ch, cw) = (h - h % multiple, w - w % multiple);
    if ch == 0 || cw == 0 {
        return Err(Error::invalid_argument(format!(
            "image {}x{} too small to crop to a multiple of {}",
            h, w, multiple
        )));
    }
    if (ch, cw) == (h, w) {
        return Ok(scene.clone());
    }
    center_crop(scene, ch, cw)
}

/// Load a scene from its annotation file. The image path is resolved
/// relative to the annotation's directory; the image is converted to
/// grayscale when `input_channels` is 1 (luma 0.299/0.587/0.114) and
/// center-cropped to a multiple of 8.
pub fn load_scene(annotation_path: &Path, input_channels: usize) -> Result<Scene> {
    let ann_file = AnnotationFile::load(annotation_path)?;
    let image_path = annotation_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&ann_file.image);
    let img = read_netpbm(&image_path)?;
    if (img.height, img.width) != (ann_file.height, ann_file.width) {
        return Err(Error::malformed(
            annotation_path.display().to_string(),
            format!(
                "annotation declares {}x{} but image is {}x{}",
                ann_file.width, ann_file.height, img.width, img.height
            ),
        ));
    }
    let annotations = ann_file.to_annotations().map_err(|e| {
        Error::malformed(annotation_path.display().to_string(), e.to_string())
    })?;

    let tensor = image_tensor(&img, input_channels)?;
    let id = annotation_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".into());
    let scene = Scene {
        id,
        image: tensor,
        annotations,
    };
    crop_to_multiple(&scene, 8)
}

/// Convert an image to a batch-1 tensor with the requested channel count;
/// 3-channel images collapse to luma (0.299, 0.587, 0.114) when 1 channel is
/// wanted.
pub fn image_tensor(img: &Image, input_channels: usize) -> Result<Tensor> {
    let plane = img.height * img.width;
    let (c, data) = match (input_channels, img.channels) {
        (1, 1) => (1, img.data.clone()),
        (1, 3) => {
            let mut gray = vec![0.0f32; plane];
            for i in 0..plane {
                gray[i] = 0.299 * img.data[i]
                    + 0.587 * img.data[plane + i]
                    + 0.114 * img.data[2 * plane + i];
            }
            (1, gray)
        }
        (3, 3) => (3, img.data.clone()),
        (want, have) => {
            return Err(Error::invalid_argument(format!(
                "model wants {} input channels but image has {}",
                want, have
            )))
        }
    };
    Tensor::new((1, c, img.height, img.width), data)
}

/// Parameters of the synthetic crowd-scene generator. Ranges are inclusive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub image_size: (usize, usize),
    pub head_count: (usize, usize),
    pub cluster_count: (usize, usize),
    pub cluster_spread: f32,
    pub disk_radius: (f32, f32),
    pub intensity: (f32, f32),
    pub noise_level: f32,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            image_size: (192, 192),
            head_count: (5, 40),
            cluster_count: (1, 4),
            cluster_spread: 24.0,
            disk_radius: (2.0, 4.0),
            intensity: (0.6, 1.0),
            noise_level: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return Err(Error::invalid_argument("empty image size"));
        }
        if self.head_count.0 > self.head_count.1
            || self.cluster_count.0 > self.cluster_count.1
            || self.cluster_count.1 == 0
            || self.disk_radius.0 > self.disk_radius.1
            || self.intensity.0 > self.intensity.1
        {
            return Err(Error::invalid_argument("empty range in synthetic spec"));
        }
        Ok(())
    }
}

fn sample_range_usize(rng: &mut ChaCha8Rng, range: (usize, usize)) -> usize {
    rng.gen_range(range.0..=range.1)
}

fn sample_range_f32(rng: &mut ChaCha8Rng, range: (f32, f32)) -> f32 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

/// Generate one synthetic scene: heads sampled as Gaussian clusters, each
/// drawn as a filled disk over a noisy background. Deterministic per seed.
pub fn generate_synthetic(spec: &SyntheticSceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pixels: Vec<f32> = (0..h * w)
        .map(|_| rng.gen_range(0.0..=spec.noise_level.max(f32::MIN_POSITIVE)))
        .collect();

    let n_clusters = sample_range_usize(&mut rng, spec.cluster_count);
    let clusters: Vec<(f32, f32)> = (0..n_clusters)
        .map(|_| {
            (
                rng.gen_range(0.0..w as f32),
                rng.gen_range(0.0..h as f32),
            )
        })
        .collect();

    let n_heads = sample_range_usize(&mut rng, spec.head_count);
    let max_x = (w as f32) - 1e-3;
    let max_y = (h as f32) - 1e-3;
    let mut points = Vec::with_capacity(n_heads);
    for _ in 0..n_heads {
        let (cx, cy) = clusters[rng.gen_range(0..clusters.len())];
        // Box-Muller from two uniforms keeps the dependency surface small
        let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
        let u2: f32 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt() * spec.cluster_spread;
        let theta = 2.0 * std::f32::consts::PI * u2;
        let x = (cx + r * theta.cos()).clamp(0.0, max_x);
        let y = (cy + r * theta.sin()).clamp(0.0, max_y);
        points.push((x, y));

        let radius = sample_range_f32(&mut rng, spec.disk_radius);
        let intensity = sample_range_f32(&mut rng, spec.intensity);
        let x0 = ((x - radius).floor().max(0.0)) as usize;
        let x1 = ((x + radius).ceil() as usize).min(w - 1);
        let y0 = ((y - radius).floor().max(0.0)) as usize;
        let y1 = ((y + radius).ceil() as usize).min(h - 1);
        for py in y0..=y1 {
            for px in x0..=x1 {
                let dx = px as f32 + 0.5 - x;
                let dy = py as f32 + 0.5 - y;
                if dx * dx + dy * dy <= radius * radius {
                    let v = &mut pixels[py * w + px];
                    *v = v.max(intensity);
                }
            }
        }
    }

    Ok(Scene {
        id: format!("synth-{:08x}", spec.seed),
        image: Tensor::new((1, 1, h, w), pixels)?,
        annotations: HeadAnnotations::new((h, w), points)?,
    })
}

/// Dataset manifest entry: one annotation file plus its split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub annotation: String,
    pub split: String,
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn save_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(entries).expect("manifest serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load all scenes of one split, resolving annotation paths relative to the
/// manifest's directory.
pub fn load_split(manifest_path: &Path, split: &str, input_channels: usize) -> Result<Vec<Scene>> {
    let base = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let entries = load_manifest(manifest_path)?;
    entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| load_scene(&resolve(&base, &e.annotation), input_channels))
        .collect()
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// A stacked training batch: images plus ground-truth density at the model's
/// output scale, as a `(n, 1, h/f, w/f)` tensor.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub gt_density: Tensor,
    pub scene_ids: Vec<String>,
}

/// Render ground truth for one scene at the model's output scale.
pub fn scene_ground_truth(scene: &Scene, spec: &KernelSpec, factor: usize) -> Result<DensityMap> {
    let full = render_density(&scene.annotations, spec)?;
    downsample_preserving_count(&full, factor)
}

/// Group scenes into batches of at most `batch_size`, ground truth rendered
/// at scale 1 and sum-pooled by `factor`. Shuffle is deterministic per seed;
/// the final partial batch is emitted.
pub fn make_batches(
    scenes: &[Scene],
    batch_size: usize,
    factor: usize,
    spec: &KernelSpec,
    shuffle_seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::invalid_argument("batch_size must be >= 1"));
    }
    if scenes.is_empty() {
        return Ok(Vec::new());
    }
    let (_, c0, h0, w0) = scenes[0].image.shape();
    for s in scenes {
        if s.image.shape() != (1, c0, h0, w0) {
            return Err(Error::invalid_argument(format!(
                "mixed scene dimensions: {:?} vs {:?} (scene {})",
                s.image.shape(),
                (1, c0, h0, w0),
                s.id
            )));
        }
    }
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    order.shuffle(&mut rng);

    let (gh, gw) = (h0 / factor, w0 / factor);
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let n = chunk.len();
        let mut images = vec![0.0f32; n * c0 * h0 * w0];
        let mut gt = vec![0.0f32; n * gh * gw];
        let mut ids = Vec::with_capacity(n);
        for (bi, &si) in chunk.iter().enumerate() {
            let s = &scenes[si];
            images[bi * c0 * h0 * w0..(bi + 1) * c0 * h0 * w0].copy_from_slice(s.image.data());
            let dm = scene_ground_truth(s, spec, factor)?;
            gt[bi * gh * gw..(bi + 1) * gh * gw].copy_from_slice(&dm.raster);
            ids.push(s.id.clone());
        }
        batches.push(Batch {
            images: Tensor::new((n, c0, h0, w0), images)?,
            gt_density: Tensor::new((n, 1, gh, gw), gt)?,
            scene_ids: ids,
        });
    }
    Ok(batches)
}
