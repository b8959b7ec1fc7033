//! Global/local crops, overlap-averaged stitching, and scale-map fusion.

use rand::Rng;
use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::nn::{self, Bound, Conv2d, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum MultiscaleError {
    #[error("crop {crop_h}x{crop_w} does not fit a {image_h}x{image_w} image")]
    CropTooLarge {
        crop_h: usize,
        crop_w: usize,
        image_h: usize,
        image_w: usize,
    },
    #[error("invalid crop: {0}")]
    InvalidCrop(String),
    #[error("{count} pixels uncovered within rows {top}..{bottom}, cols {left}..{right}")]
    Uncovered {
        count: usize,
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    },
    #[error("prediction shape {found:?} does not match {expected:?}")]
    PredictionShape { expected: Vec<usize>, found: Vec<usize> },
    #[error("scale map value {value} at {index} outside [0, 1]")]
    MaskRange { index: usize, value: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] nn::NnError),
}

pub type Result<T> = std::result::Result<T, MultiscaleError>;

/// Source rectangle `[top, bottom) x [left, right)` and the extents it is
/// resized to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSpec {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
    pub target_h: usize,
    pub target_w: usize,
}

impl CropSpec {
    pub fn new(top: usize, bottom: usize, left: usize, right: usize, target_h: usize, target_w: usize) -> Result<Self> {
        if bottom <= top || right <= left || target_h == 0 || target_w == 0 {
            return Err(MultiscaleError::InvalidCrop(format!(
                "rows {top}..{bottom}, cols {left}..{right} -> {target_h}x{target_w}"
            )));
        }
        Ok(Self {
            top,
            bottom,
            left,
            right,
            target_h,
            target_w,
        })
    }

    /// Unresized crop of `h x w` at `(top, left)`.
    pub fn identity(top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        Self::new(top, top + h, left, left + w, h, w)
    }

    pub fn height(&self) -> usize {
        self.bottom - self.top
    }

    pub fn width(&self) -> usize {
        self.right - self.left
    }

    pub fn fits(&self, image_h: usize, image_w: usize) -> bool {
        self.bottom <= image_h && self.right <= image_w
    }

    pub fn contains(&self, other: &CropSpec) -> bool {
        self.top <= other.top && other.bottom <= self.bottom && self.left <= other.left && other.right <= self.right
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CropMode {
    /// One random rect spanning at least `min_fraction` of each dimension,
    /// resized to the crop extents.
    Global { min_fraction: f64 },
    /// One random rect of exactly the crop extents.
    Local,
    /// Regular grid with the given stride; the last row and column of tiles
    /// are clamped to the image border.
    Tiling { stride: usize },
}

pub fn plan_crops<R: Rng + ?Sized>(
    image_h: usize,
    image_w: usize,
    crop_h: usize,
    crop_w: usize,
    mode: CropMode,
    rng: &mut R,
) -> Result<Vec<CropSpec>> {
    if crop_h == 0 || crop_w == 0 {
        return Err(MultiscaleError::InvalidCrop("crop extents must be positive".into()));
    }
    let too_large = || MultiscaleError::CropTooLarge {
        crop_h,
        crop_w,
        image_h,
        image_w,
    };
    match mode {
        CropMode::Global { min_fraction } => {
            if !(min_fraction > 0.0 && min_fraction <= 1.0) {
                return Err(MultiscaleError::InvalidCrop(format!(
                    "global coverage fraction {min_fraction} outside (0, 1]"
                )));
            }
            if image_h == 0 || image_w == 0 {
                return Err(too_large());
            }
            let min_h = ((min_fraction * image_h as f64).ceil() as usize).clamp(1, image_h);
            let min_w = ((min_fraction * image_w as f64).ceil() as usize).clamp(1, image_w);
            let h = rng.gen_range(min_h..=image_h);
            let w = rng.gen_range(min_w..=image_w);
            let top = rng.gen_range(0..=image_h - h);
            let left = rng.gen_range(0..=image_w - w);
            Ok(vec![CropSpec::new(top, top + h, left, left + w, crop_h, crop_w)?])
        }
        CropMode::Local => {
            if crop_h > image_h || crop_w > image_w {
                return Err(too_large());
            }
            let top = rng.gen_range(0..=image_h - crop_h);
            let left = rng.gen_range(0..=image_w - crop_w);
            Ok(vec![CropSpec::identity(top, left, crop_h, crop_w)?])
        }
        CropMode::Tiling { stride } => {
            if crop_h > image_h || crop_w > image_w {
                return Err(too_large());
            }
            if stride == 0 {
                return Err(MultiscaleError::InvalidCrop("tiling stride must be positive".into()));
            }
            let mut plan = Vec::new();
            for top in grid_positions(image_h, crop_h, stride) {
                for left in grid_positions(image_w, crop_w, stride) {
                    plan.push(CropSpec::identity(top, left, crop_h, crop_w)?);
                }
            }
            check_coverage(&plan, image_h, image_w)?;
            Ok(plan)
        }
    }
}

fn grid_positions(size: usize, crop: usize, stride: usize) -> Vec<usize> {
    let last = size - crop;
    let mut pos: Vec<usize> = (0..=last).step_by(stride).collect();
    if *pos.last().unwrap() != last {
        pos.push(last);
    }
    pos
}

/// Number of crops covering each pixel, row-major `h x w`.
pub fn coverage(plan: &[CropSpec], image_h: usize, image_w: usize) -> Vec<u32> {
    let mut count = vec![0u32; image_h * image_w];
    for c in plan {
        for y in c.top..c.bottom.min(image_h) {
            for x in c.left..c.right.min(image_w) {
                count[y * image_w + x] += 1;
            }
        }
    }
    count
}

pub fn check_coverage(plan: &[CropSpec], image_h: usize, image_w: usize) -> Result<()> {
    uncovered_error(&coverage(plan, image_h, image_w), image_w)
}

fn uncovered_error(count: &[u32], image_w: usize) -> Result<()> {
    let mut hole: Option<(usize, usize, usize, usize, usize)> = None;
    for (i, _) in count.iter().enumerate().filter(|(_, &c)| c == 0) {
        let (y, x) = (i / image_w, i % image_w);
        let h = hole.get_or_insert((0, y, y + 1, x, x + 1));
        h.0 += 1;
        h.1 = h.1.min(y);
        h.2 = h.2.max(y + 1);
        h.3 = h.3.min(x);
        h.4 = h.4.max(x + 1);
    }
    match hole {
        None => Ok(()),
        Some((count, top, bottom, left, right)) => Err(MultiscaleError::Uncovered {
            count,
            top,
            bottom,
            left,
            right,
        }),
    }
}

/// Running sums for overlap-averaged stitching of `C x H x W` outputs.
#[derive(Debug, Clone)]
pub struct StitchAccumulator<S: Scalar = f64> {
    channels: usize,
    height: usize,
    width: usize,
    value_sum: Vec<S>,
    weight_sum: Vec<u32>,
}

impl<S: Scalar> StitchAccumulator<S> {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            value_sum: vec![S::zero(); channels * height * width],
            weight_sum: vec![0; height * width],
        }
    }

    /// Adds a prediction at the spec's target resolution, shaped
    /// `[C, th, tw]` or `[1, C, th, tw]`; it is resized back to the source
    /// rect before accumulation.
    pub fn add(&mut self, spec: &CropSpec, prediction: &Tensor<S>) -> Result<()> {
        let expected = [self.channels, spec.target_h, spec.target_w];
        let s = prediction.shape();
        let ok = s == expected || (s.len() == 4 && s[0] == 1 && s[1..] == expected);
        if !ok || !spec.fits(self.height, self.width) {
            return Err(MultiscaleError::PredictionShape {
                expected: expected.to_vec(),
                found: s.to_vec(),
            });
        }
        let (h, w) = (spec.height(), spec.width());
        let back = prediction.resize_bilinear(h, w)?;
        let src = back.data();
        for c in 0..self.channels {
            for y in 0..h {
                let dst = (c * self.height + spec.top + y) * self.width + spec.left;
                let row = &src[(c * h + y) * w..(c * h + y + 1) * w];
                for (d, &v) in self.value_sum[dst..dst + w].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        for y in spec.top..spec.bottom {
            for x in spec.left..spec.right {
                self.weight_sum[y * self.width + x] += 1;
            }
        }
        Ok(())
    }

    pub fn weight_sum(&self) -> &[u32] {
        &self.weight_sum
    }

    /// `[C, H, W]` average; every pixel must have been covered.
    pub fn finish(self) -> Result<Tensor<S>> {
        uncovered_error(&self.weight_sum, self.width)?;
        let plane = self.height * self.width;
        let data = self
            .value_sum
            .iter()
            .enumerate()
            .map(|(i, &v)| v / S::lit(self.weight_sum[i % plane] as f64))
            .collect();
        Ok(Tensor::new(vec![self.channels, self.height, self.width], data)?)
    }
}

pub fn stitch<S: Scalar>(predictions: &[(CropSpec, Tensor<S>)], image_h: usize, image_w: usize) -> Result<Tensor<S>> {
    let channels = match predictions.first() {
        Some((_, t)) if t.rank() >= 3 => t.shape()[t.rank() - 3],
        Some((_, t)) => {
            return Err(MultiscaleError::PredictionShape {
                expected: vec![0, 0, 0],
                found: t.shape().to_vec(),
            })
        }
        None => {
            return Err(MultiscaleError::Uncovered {
                count: image_h * image_w,
                top: 0,
                bottom: image_h,
                left: 0,
                right: image_w,
            })
        }
    };
    let mut acc = StitchAccumulator::new(channels, image_h, image_w);
    for (spec, p) in predictions {
        acc.add(spec, p)?;
    }
    acc.finish()
}

/// Per-pixel weight of the local branch, `[1, 1, H, W]` in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleMap {
    pub mask: Var,
}

impl ScaleMap {
    pub fn new<S: Scalar>(graph: &Graph<S>, mask: Var) -> Result<Self> {
        let s = graph.shape(mask);
        if s.len() != 4 || s[0] != 1 || s[1] != 1 {
            return Err(MultiscaleError::PredictionShape {
                expected: vec![1, 1, 0, 0],
                found: s.to_vec(),
            });
        }
        if let Some((index, v)) = graph
            .value(mask)
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.as_f64() >= 0.0 && v.as_f64() <= 1.0))
        {
            return Err(MultiscaleError::MaskRange {
                index,
                value: v.as_f64(),
            });
        }
        Ok(Self { mask })
    }
}

/// `M * local + (1 - M) * global`, the mask broadcast over channels.
pub fn fuse<S: Scalar>(graph: &mut Graph<S>, local: Var, global: Var, scale: ScaleMap) -> Result<Var> {
    let (ls, gs, ms) = (graph.shape(local), graph.shape(global), graph.shape(scale.mask));
    if ls != gs || ls.len() != 4 || ms[2..] != ls[2..] {
        return Err(MultiscaleError::PredictionShape {
            expected: ls.to_vec(),
            found: if ls != gs { gs.to_vec() } else { ms.to_vec() },
        });
    }
    let keep_local = graph.mul(scale.mask, local)?;
    let neg = graph.neg(scale.mask);
    let rest = graph.add_scalar(neg, S::one());
    let keep_global = graph.mul(rest, global)?;
    Ok(graph.add(keep_local, keep_global)?)
}

/// Two convolutions and a sigmoid over global-branch features, upsampled
/// to the output resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleAttention {
    pub hidden: Conv2d,
    pub out: Conv2d,
}

impl ScaleAttention {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_ch: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Conv2d::new(store, &format!("{name}.hidden"), in_ch, hidden, 3, 1, 1, rng)?,
            out: Conv2d::new(store, &format!("{name}.out"), hidden, 1, 1, 1, 0, rng)?,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        graph: &mut Graph<S>,
        params: &Bound,
        features: Var,
        target_h: usize,
        target_w: usize,
    ) -> Result<ScaleMap> {
        let h = self.hidden.forward(graph, params, features)?;
        let h = graph.relu(h);
        let logits = self.out.forward(graph, params, h)?;
        let small = graph.sigmoid(logits);
        let mask = graph.resize_bilinear(small, target_h, target_w)?;
        ScaleMap::new(graph, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_positions_clamp_the_last_tile() {
        assert_eq!(grid_positions(10, 4, 4), vec![0, 4, 6]);
        assert_eq!(grid_positions(8, 4, 4), vec![0, 4]);
        assert_eq!(grid_positions(4, 4, 3), vec![0]);
        assert_eq!(grid_positions(10, 3, 5), vec![0, 5, 7]);
    }

    #[test]
    fn uncovered_region_is_reported() {
        let plan = [CropSpec::identity(0, 0, 2, 4).unwrap()];
        match check_coverage(&plan, 4, 4) {
            Err(MultiscaleError::Uncovered {
                count,
                top,
                bottom,
                left,
                right,
            }) => assert_eq!((count, top, bottom, left, right), (8, 2, 4, 0, 4)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn global_crop_respects_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let c = plan_crops(40, 30, 16, 16, CropMode::Global { min_fraction: 0.5 }, &mut rng).unwrap()[0];
            assert!(c.height() >= 20 && c.width() >= 15 && c.fits(40, 30));
            assert_eq!((c.target_h, c.target_w), (16, 16));
        }
    }
}
