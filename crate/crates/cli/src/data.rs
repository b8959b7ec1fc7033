//! Synthetic two-domain dataset with known semantics.
//!
//! Both domains share three classes (background, disk, stripe). Source
//! images paint each class in a flat color. Target images shift the colors
//! and add a class-specific texture, and use different class frequencies,
//! so matching the target distribution alone pushes a translator to repaint
//! regions of the wrong class.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semcons::metrics::{seg_metrics, LabelMap, MetricError, SegMetrics};
use semcons::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CLASSES: [&str; 3] = ["background", "disk", "stripe"];
pub const SOURCE_COLORS: [[u8; 3]; 3] = [[90, 90, 160], [200, 60, 60], [60, 180, 80]];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{path}: {source}")]
    Manifest { path: PathBuf, source: serde_json::Error },
    #[error("{path}: expected a {expected} image, found {found}")]
    Format { path: PathBuf, expected: String, found: String },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub size: usize,
    pub train_count: usize,
    pub eval_count: usize,
    /// Disk and stripe fractions; background takes the rest.
    pub source_freq: [f64; 2],
    pub target_freq: [f64; 2],
    pub target_shift: [i32; 3],
    pub texture_amplitude: u8,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            size: 64,
            train_count: 32,
            eval_count: 8,
            source_freq: [0.20, 0.15],
            target_freq: [0.05, 0.30],
            target_shift: [25, 15, -20],
            texture_amplitude: 20,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || self.train_count == 0 || self.eval_count == 0 {
            return Err(DataError::Spec(format!(
                "size >= 16 and positive counts required, got size {} train {} eval {}",
                self.size, self.train_count, self.eval_count
            )));
        }
        for (name, f) in [("source", self.source_freq), ("target", self.target_freq)] {
            if f.iter().any(|v| !(0.0..=1.0).contains(v)) || f[0] + f[1] > 0.8 {
                return Err(DataError::Spec(format!(
                    "{name} frequencies {f:?} must be in [0, 1] with disk + stripe <= 0.8"
                )));
            }
        }
        for k in 0..3 {
            for c in SOURCE_COLORS {
                let v = c[k] as i32 + self.target_shift[k];
                let a = self.texture_amplitude as i32;
                if v - a < 0 || v + a > 255 {
                    return Err(DataError::Spec(format!(
                        "target shift {:?} with texture amplitude {a} leaves the 8-bit range",
                        self.target_shift
                    )));
                }
            }
        }
        Ok(())
    }

    /// Nominal target color of each class; textures average to zero around it.
    pub fn target_prototypes(&self) -> [[f64; 3]; 3] {
        let mut p = [[0.0; 3]; 3];
        for (c, color) in SOURCE_COLORS.iter().enumerate() {
            for k in 0..3 {
                p[c][k] = (color[k] as i32 + self.target_shift[k]) as f64;
            }
        }
        p
    }

    fn requested(f: [f64; 2]) -> [f64; 3] {
        [1.0 - f[0] - f[1], f[0], f[1]]
    }
}

/// Per-domain random streams, so every image is reproducible on its own.
#[derive(Debug, Clone, Copy)]
enum Domain {
    Source = 0,
    Target = 1,
    Eval = 2,
}

fn image_rng(seed: u64, domain: Domain, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 32) | index as u64);
    rng
}

/// Paints disks, then stripes, onto background pixels only, until each
/// class has exactly its quota of pixels. The last shape of a class is
/// clipped pixel by pixel.
pub fn layout<R: Rng>(size: usize, freq: [f64; 2], rng: &mut R) -> LabelMap {
    let n = size * size;
    let mut ids = vec![0usize; n];
    for (class, &f) in [1usize, 2].iter().zip(&freq) {
        let quota = (f * n as f64).round() as usize;
        let mut painted = 0;
        let mut shapes = 0;
        while painted < quota {
            shapes += 1;
            let pixels: Vec<usize> = if shapes > 10_000 {
                // degenerate leftovers: fill the remaining quota in raster order
                (0..n).collect()
            } else if *class == 1 {
                disk_pixels(size, rng)
            } else {
                stripe_pixels(size, rng)
            };
            for p in pixels {
                if painted == quota {
                    break;
                }
                if ids[p] == 0 {
                    ids[p] = *class;
                    painted += 1;
                }
            }
        }
    }
    LabelMap::new(size, size, CLASSES.len(), ids).expect("labels are in range by construction")
}

fn disk_pixels<R: Rng>(size: usize, rng: &mut R) -> Vec<usize> {
    let r = rng.gen_range(size as f64 / 12.0..size as f64 / 5.0);
    let (cy, cx) = (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64));
    (0..size * size)
        .filter(|&p| {
            let (y, x) = ((p / size) as f64 + 0.5, (p % size) as f64 + 0.5);
            (y - cy).powi(2) + (x - cx).powi(2) <= r * r
        })
        .collect()
}

fn stripe_pixels<R: Rng>(size: usize, rng: &mut R) -> Vec<usize> {
    let width = rng.gen_range(size / 16..=size / 8).max(2);
    let start = rng.gen_range(0..=size - width);
    let vertical = rng.gen_bool(0.5);
    (0..size * size)
        .filter(|&p| {
            let coord = if vertical { p % size } else { p / size };
            (start..start + width).contains(&coord)
        })
        .collect()
}

pub fn render_source(labels: &LabelMap) -> RgbImage {
    let w = labels.width();
    RgbImage::from_fn(w as u32, labels.height() as u32, |x, y| {
        Rgb(SOURCE_COLORS[labels.ids()[y as usize * w + x as usize]])
    })
}

/// Background: per-pixel noise. Disk: 2x2 checker. Stripe: diagonal lines.
pub fn render_target<R: Rng>(labels: &LabelMap, spec: &DatasetSpec, rng: &mut R) -> RgbImage {
    let w = labels.width();
    let protos = spec.target_prototypes();
    let a = spec.texture_amplitude as f64;
    RgbImage::from_fn(w as u32, labels.height() as u32, |x, y| {
        let class = labels.ids()[y as usize * w + x as usize];
        let offset = match class {
            0 => rng.gen_range(-a / 2.0..=a / 2.0).round(),
            1 => if (x / 2 + y / 2) % 2 == 0 { a } else { -a },
            _ => if ((x + y) / 2) % 2 == 0 { a } else { -a },
        };
        let px = protos[class].map(|v| (v + offset).clamp(0.0, 255.0) as u8);
        Rgb(px)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub size: usize,
    pub seed: u64,
    pub classes: Vec<String>,
    pub source_colors: Vec<[u8; 3]>,
    pub target_prototypes: Vec<[f64; 3]>,
    pub source_requested: [f64; 3],
    pub target_requested: [f64; 3],
    /// Pixel fractions over all images of the domain.
    pub source_realized: [f64; 3],
    pub target_realized: [f64; 3],
    pub source: Vec<String>,
    pub source_labels: Vec<String>,
    pub target: Vec<String>,
    pub target_labels: Vec<String>,
    pub eval_images: Vec<String>,
    pub eval_labels: Vec<String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|source| DataError::Manifest { path, source })
    }
}

fn realized(maps: &[LabelMap]) -> [f64; 3] {
    let mut counts = [0usize; 3];
    let mut total = 0;
    for m in maps {
        for &id in m.ids() {
            counts[id] += 1;
        }
        total += m.ids().len();
    }
    counts.map(|c| c as f64 / total.max(1) as f64)
}

fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| DataError::Image { path: path.to_path_buf(), source })
}

pub fn save_labels(labels: &LabelMap, path: &Path) -> Result<()> {
    let w = labels.width();
    let img = GrayImage::from_fn(w as u32, labels.height() as u32, |x, y| {
        Luma([labels.ids()[y as usize * w + x as usize] as u8])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| DataError::Image { path: path.to_path_buf(), source })
}

fn make_dirs(dir: &Path, subdirs: &[&str]) -> Result<()> {
    for s in subdirs {
        let p = dir.join(s);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    Ok(())
}

/// Writes the dataset under `dir` and returns its manifest.
pub fn generate(spec: &DatasetSpec, dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    make_dirs(dir, &["source", "source_labels", "target", "target_labels", "eval/images", "eval/labels"])?;
    let name = |i: usize| format!("{i:04}.png");

    let files = |domain: Domain, count: usize, freq: [f64; 2], images: &str, labels: &str| -> Result<(Vec<String>, Vec<String>, Vec<LabelMap>)> {
        let (mut imgs, mut labs, mut maps) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..count {
            let mut rng = image_rng(spec.seed, domain, i);
            let map = layout(spec.size, freq, &mut rng);
            let img = match domain {
                Domain::Target => render_target(&map, spec, &mut rng),
                _ => render_source(&map),
            };
            let (ip, lp) = (format!("{images}/{}", name(i)), format!("{labels}/{}", name(i)));
            save_rgb(&img, &dir.join(&ip))?;
            save_labels(&map, &dir.join(&lp))?;
            imgs.push(ip);
            labs.push(lp);
            maps.push(map);
        }
        Ok((imgs, labs, maps))
    };
    let (source, source_labels, source_maps) =
        files(Domain::Source, spec.train_count, spec.source_freq, "source", "source_labels")?;
    let (target, target_labels, target_maps) =
        files(Domain::Target, spec.train_count, spec.target_freq, "target", "target_labels")?;
    let (eval_images, eval_labels, _) =
        files(Domain::Eval, spec.eval_count, spec.source_freq, "eval/images", "eval/labels")?;

    let manifest = Manifest {
        size: spec.size,
        seed: spec.seed,
        classes: CLASSES.iter().map(|s| s.to_string()).collect(),
        source_colors: SOURCE_COLORS.to_vec(),
        target_prototypes: spec.target_prototypes().to_vec(),
        source_requested: DatasetSpec::requested(spec.source_freq),
        target_requested: DatasetSpec::requested(spec.target_freq),
        source_realized: realized(&source_maps),
        target_realized: realized(&target_maps),
        source,
        source_labels,
        target,
        target_labels,
        eval_images,
        eval_labels,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|source| DataError::Manifest {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

/// Reads an 8-bit RGB PNG as a `[1, 3, H, W]` tensor in `[-1, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| DataError::Image { path: path.to_path_buf(), source })?;
    let img = match img {
        image::DynamicImage::ImageRgb8(i) => i,
        other => {
            return Err(DataError::Format {
                path: path.to_path_buf(),
                expected: "8-bit RGB".into(),
                found: format!("{:?}", other.color()),
            })
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let data = (0..3)
        .flat_map(|c| (0..h * w).map(move |p| (c, p)))
        .map(|(c, p)| raw[p * 3 + c] as f64 / 127.5 - 1.0)
        .collect();
    Ok(Tensor::new(vec![1, 3, h, w], data).expect("sizes agree"))
}

/// Writes a `[1, 3, H, W]` or `[3, H, W]` tensor in `[-1, 1]` as an 8-bit PNG.
pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    let s = t.shape();
    let (h, w) = match s {
        [1, 3, h, w] | [3, h, w] => (*h, *w),
        _ => {
            return Err(DataError::Format {
                path: path.to_path_buf(),
                expected: "[1, 3, H, W] tensor".into(),
                found: format!("{s:?}"),
            })
        }
    };
    let d = t.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|c| ((d[c * h * w + p] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8))
    });
    save_rgb(&img, path)
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(|source| DataError::Image { path: path.to_path_buf(), source })?;
    let img = match img {
        image::DynamicImage::ImageLuma8(i) => i,
        other => {
            return Err(DataError::Format {
                path: path.to_path_buf(),
                expected: "8-bit grayscale".into(),
                found: format!("{:?}", other.color()),
            })
        }
    };
    let ids = img.as_raw().iter().map(|&v| v as usize).collect();
    Ok(LabelMap::new(img.height() as usize, img.width() as usize, CLASSES.len(), ids)?)
}

/// Training tensors of both domains.
pub struct Dataset {
    pub manifest: Manifest,
    pub source: Vec<Tensor>,
    pub target: Vec<Tensor>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        let read = |names: &[String]| names.iter().map(|n| load_image(&dir.join(n))).collect::<Result<Vec<_>>>();
        Ok(Self {
            source: read(&manifest.source)?,
            target: read(&manifest.target)?,
            manifest,
        })
    }
}

/// Assigns each pixel of an RGB tensor in `[-1, 1]` to the class whose
/// prototype is nearest after a 3x3 box blur, which averages out the
/// target textures.
pub fn classify(image: &Tensor, prototypes: &[[f64; 3]]) -> Result<LabelMap> {
    let (h, w) = match image.shape() {
        [1, 3, h, w] | [3, h, w] => (*h, *w),
        s => return Err(MetricError::Shape(s.to_vec(), vec![3, 0, 0]).into()),
    };
    let d = image.data();
    let px = |c: usize, y: usize, x: usize| (d[(c * h + y) * w + x] + 1.0) * 127.5;
    let mut ids = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut mean = [0.0; 3];
            let mut n = 0.0;
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    for (c, m) in mean.iter_mut().enumerate() {
                        *m += px(c, yy, xx);
                    }
                    n += 1.0;
                }
            }
            let best = prototypes
                .iter()
                .map(|p| (0..3).map(|c| (mean[c] / n - p[c]).powi(2)).sum::<f64>())
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map_or(0, |(i, _)| i);
            ids.push(best);
        }
    }
    Ok(LabelMap::new(h, w, prototypes.len(), ids)?)
}

/// Segmentation metrics of the classified translation against the
/// ground truth of its source image.
pub fn semantic_score(translated: &Tensor, truth: &LabelMap, prototypes: &[[f64; 3]]) -> Result<SegMetrics> {
    Ok(seg_metrics(&classify(translated, prototypes)?, truth)?)
}
