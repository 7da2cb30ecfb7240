use crate::{Error, Result};

/// Dense 3D grid of 32-bit floats in D-major (slowest) to W (fastest) order.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "volume {dims:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: [usize; 3], value: f32) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    data.push(f(d, h, w));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(d, h, w)]
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// `(min, max)`; `None` for an empty grid.
    pub fn min_max(&self) -> Option<(f32, f32)> {
        let first = *self.data.first()?;
        Some(
            self.data
                .iter()
                .fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v))),
        )
    }
}

/// Min-max rescale into `[0, 1]`. Constant volumes map to all zeros.
pub fn normalize_volume(v: &Volume) -> Result<Volume> {
    if let Some(i) = v.first_non_finite() {
        return Err(Error::NonFiniteVoxel(i));
    }
    let Some((lo, hi)) = v.min_max() else {
        return Ok(v.clone());
    };
    if hi == lo {
        return Ok(Volume::filled(v.dims, 0.0));
    }
    let (lo, span) = (lo as f64, hi as f64 - lo as f64);
    let data = v
        .data
        .iter()
        .map(|&x| (((x as f64) - lo) / span).clamp(0.0, 1.0) as f32)
        .collect();
    Volume::new(v.dims, data)
}

fn axis_samples(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == 1 {
                return (0, 0, 0.0);
            }
            let u = (i * (src - 1)) as f64 / (dst - 1) as f64;
            let i0 = (u.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, u - i0 as f64)
        })
        .collect()
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Trilinear resample with corner-aligned sampling (the first and last
/// voxel centres of source and target coincide).
pub fn resize_volume(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    if let Some(&t) = target.iter().find(|&&t| t < 2) {
        return Err(Error::ResizeTarget(t));
    }
    if target == v.dims {
        return Ok(v.clone());
    }
    let Some((lo, hi)) = v.min_max() else {
        return Err(Error::Empty("volume"));
    };
    let [sd, sh, sw] = v.dims;
    let ad = axis_samples(sd, target[0]);
    let ah = axis_samples(sh, target[1]);
    let aw = axis_samples(sw, target[2]);
    let at = |d: usize, h: usize, w: usize| v.data[(d * sh + h) * sw + w] as f64;
    let mut out = Vec::with_capacity(target.iter().product());
    for &(d0, d1, td) in &ad {
        for &(h0, h1, th) in &ah {
            for &(w0, w1, tw) in &aw {
                let c00 = lerp(at(d0, h0, w0), at(d0, h0, w1), tw);
                let c01 = lerp(at(d0, h1, w0), at(d0, h1, w1), tw);
                let c10 = lerp(at(d1, h0, w0), at(d1, h0, w1), tw);
                let c11 = lerp(at(d1, h1, w0), at(d1, h1, w1), tw);
                let c0 = lerp(c00, c01, th);
                let c1 = lerp(c10, c11, th);
                out.push((lerp(c0, c1, td) as f32).clamp(lo, hi));
            }
        }
    }
    Volume::new(target, out)
}

/// Edge-replicating pad so every dimension becomes a multiple of `multiple`.
pub fn pad_to_multiple(v: &Volume, multiple: usize) -> Volume {
    let target = v.dims.map(|n| n.div_ceil(multiple).max(1) * multiple);
    if target == v.dims {
        return v.clone();
    }
    let [sd, sh, sw] = v.dims;
    Volume::from_fn(target, |d, h, w| v.get(d.min(sd - 1), h.min(sh - 1), w.min(sw - 1)))
}
