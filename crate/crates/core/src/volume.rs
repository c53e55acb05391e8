//! Volume and mask grids, preprocessing to the isotropic `[0, 1]` form, and
//! 2D slice extraction.
//!
//! Arrays are stored in C order over `(x, y, z)`, so `z` is the fastest
//! varying index and the third axis is the axial one.

use rand::Rng;

use crate::error::{Error, Result};

/// Voxel counts and physical spacing (mm per voxel) of a 3D grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
}

impl Geometry {
    pub fn new(shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let g = Geometry { shape, spacing };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&n| n == 0) {
            return Err(Error::invalid(format!(
                "shape components must be >= 1, got {:?}",
                self.shape
            )));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::invalid(format!(
                "spacing components must be finite and > 0, got {:?}",
                self.spacing
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.shape[1] + y) * self.shape[2] + z
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let z = idx % self.shape[2];
        let rest = idx / self.shape[2];
        [rest / self.shape[1], rest % self.shape[1], z]
    }

    /// Physical position (mm) of a voxel center; voxel `(0, 0, 0)` sits at the origin.
    pub fn position(&self, v: [usize; 3]) -> [f64; 3] {
        [
            v[0] as f64 * self.spacing[0],
            v[1] as f64 * self.spacing[1],
            v[2] as f64 * self.spacing[2],
        ]
    }

    /// Shape after resampling to `target` spacing.
    pub fn resampled_shape(&self, target: [f64; 3]) -> [usize; 3] {
        let mut out = [0usize; 3];
        for i in 0..3 {
            let n = (self.shape[i] as f64 * self.spacing[i] / target[i]).round();
            out[i] = (n as usize).max(1);
        }
        out
    }
}

/// Scalar intensity grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    geometry: Geometry,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {:?}",
                data.len(),
                geometry.shape
            )));
        }
        Ok(Volume { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: f32) -> Result<Self> {
        geometry.validate()?;
        Ok(Volume {
            data: vec![value; geometry.len()],
            geometry,
        })
    }

    pub fn from_fn(geometry: Geometry, f: impl Fn(usize, usize, usize) -> f32) -> Result<Self> {
        geometry.validate()?;
        let [nx, ny, nz] = geometry.shape;
        let mut data = Vec::with_capacity(geometry.len());
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    data.push(f(x, y, z));
                }
            }
        }
        Ok(Volume { geometry, data })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn shape(&self) -> [usize; 3] {
        self.geometry.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
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

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geometry.index(x, y, z)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite intensity at voxel {:?}",
                self.geometry.coords(i)
            )));
        }
        Ok(())
    }

    /// Trilinear resampling onto a grid with `target_spacing`.
    ///
    /// Output voxel `j` along an axis sits at `j * target` mm and reads the
    /// input at continuous index `j * target / spacing`, clamped to the last
    /// voxel (edge replication).
    pub fn resample_to_isotropic(&self, target_spacing: [f64; 3]) -> Result<Volume> {
        check_target(target_spacing)?;
        let src = &self.geometry;
        let shape = src.resampled_shape(target_spacing);
        let geometry = Geometry {
            shape,
            spacing: target_spacing,
        };
        let taps: Vec<Vec<(usize, usize, f64)>> = (0..3)
            .map(|a| linear_taps(shape[a], src.shape[a], target_spacing[a] / src.spacing[a]))
            .collect();
        let mut data = Vec::with_capacity(geometry.len());
        for &(x0, x1, fx) in &taps[0] {
            for &(y0, y1, fy) in &taps[1] {
                for &(z0, z1, fz) in &taps[2] {
                    let c = |x, y, z| self.get(x, y, z) as f64;
                    let c00 = c(x0, y0, z0) * (1.0 - fz) + c(x0, y0, z1) * fz;
                    let c01 = c(x0, y1, z0) * (1.0 - fz) + c(x0, y1, z1) * fz;
                    let c10 = c(x1, y0, z0) * (1.0 - fz) + c(x1, y0, z1) * fz;
                    let c11 = c(x1, y1, z0) * (1.0 - fz) + c(x1, y1, z1) * fz;
                    let c0 = c00 * (1.0 - fy) + c01 * fy;
                    let c1 = c10 * (1.0 - fy) + c11 * fy;
                    data.push((c0 * (1.0 - fx) + c1 * fx) as f32);
                }
            }
        }
        Ok(Volume { geometry, data })
    }

    /// Min-max scaling to `[0, 1]`. A constant volume maps to all zeros.
    pub fn rescale_intensity(&self) -> Result<Volume> {
        self.check_finite()?;
        let (lo, hi) = self.min_max();
        let (lo, hi) = (lo as f64, hi as f64);
        let data = if hi > lo {
            let range = hi - lo;
            self.data
                .iter()
                .map(|&v| (((v as f64) - lo) / range).clamp(0.0, 1.0) as f32)
                .collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Ok(Volume {
            geometry: self.geometry,
            data,
        })
    }

    /// The 2D section at axial index `index`.
    pub fn extract_axial_slice(&self, index: usize) -> Result<Slice2D> {
        let [nx, ny, nz] = self.geometry.shape;
        if index >= nz {
            return Err(Error::OutOfBounds { index, len: nz });
        }
        let mut data = Vec::with_capacity(nx * ny);
        for x in 0..nx {
            for y in 0..ny {
                data.push(self.get(x, y, index));
            }
        }
        Ok(Slice2D {
            rows: nx,
            cols: ny,
            data,
            pixel_spacing: [self.geometry.spacing[0], self.geometry.spacing[1]],
            source_index: index,
        })
    }
}

fn check_target(target: [f64; 3]) -> Result<()> {
    if target.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::invalid(format!(
            "target spacing must be finite and > 0, got {target:?}"
        )));
    }
    Ok(())
}

/// For each output index: lower tap, upper tap, and the weight of the upper tap.
fn linear_taps(n_out: usize, n_in: usize, step: f64) -> Vec<(usize, usize, f64)> {
    let last = (n_in - 1) as f64;
    (0..n_out)
        .map(|j| {
            let pos = (j as f64 * step).min(last);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Binary label grid aligned to a [`Volume`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: [usize; 3],
    spacing_bits: [u64; 3],
    data: Vec<u8>,
}

impl Mask {
    pub fn new(geometry: Geometry, data: Vec<u8>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {:?}",
                data.len(),
                geometry.shape
            )));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::invalid(format!(
                "mask value {} at voxel {:?} is not binary",
                data[i],
                geometry.coords(i)
            )));
        }
        Ok(Mask {
            shape: geometry.shape,
            spacing_bits: geometry.spacing.map(f64::to_bits),
            data,
        })
    }

    pub fn empty(geometry: Geometry) -> Result<Self> {
        Mask::new(geometry, vec![0; geometry.len()])
    }

    pub fn from_fn(geometry: Geometry, f: impl Fn(usize, usize, usize) -> bool) -> Result<Self> {
        let [nx, ny, nz] = geometry.shape;
        let mut data = Vec::with_capacity(geometry.len());
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    data.push(f(x, y, z) as u8);
                }
            }
        }
        Mask::new(geometry, data)
    }

    /// Thresholds a volume-shaped score map: `score > threshold` is foreground.
    pub fn from_scores(geometry: Geometry, scores: &[f32], threshold: f32) -> Result<Self> {
        Mask::new(
            geometry,
            scores.iter().map(|&s| (s > threshold) as u8).collect(),
        )
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            shape: self.shape,
            spacing: self.spacing_bits.map(f64::from_bits),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing_bits.map(f64::from_bits)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[(x * self.shape[1] + y) * self.shape[2] + z] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Nearest-neighbour resampling, which keeps the mask binary.
    pub fn resample_to_isotropic(&self, target_spacing: [f64; 3]) -> Result<Mask> {
        check_target(target_spacing)?;
        let src = self.geometry();
        let shape = src.resampled_shape(target_spacing);
        let nearest: Vec<Vec<usize>> = (0..3)
            .map(|a| {
                let step = target_spacing[a] / src.spacing[a];
                (0..shape[a])
                    .map(|j| ((j as f64 * step).round() as usize).min(src.shape[a] - 1))
                    .collect()
            })
            .collect();
        let geometry = Geometry {
            shape,
            spacing: target_spacing,
        };
        let mut data = Vec::with_capacity(geometry.len());
        for &x in &nearest[0] {
            for &y in &nearest[1] {
                for &z in &nearest[2] {
                    data.push(self.get(x, y, z) as u8);
                }
            }
        }
        Mask::new(geometry, data)
    }

    /// The 2D section at axial index `index`, as 0.0 / 1.0 values.
    pub fn extract_axial_slice(&self, index: usize) -> Result<Slice2D> {
        let [nx, ny, nz] = self.shape;
        if index >= nz {
            return Err(Error::OutOfBounds { index, len: nz });
        }
        let mut data = Vec::with_capacity(nx * ny);
        for x in 0..nx {
            for y in 0..ny {
                data.push(if self.get(x, y, index) { 1.0 } else { 0.0 });
            }
        }
        let spacing = self.spacing();
        Ok(Slice2D {
            rows: nx,
            cols: ny,
            data,
            pixel_spacing: [spacing[0], spacing[1]],
            source_index: index,
        })
    }

    pub fn same_grid(&self, other: &Mask) -> bool {
        self.shape == other.shape && self.spacing_bits == other.spacing_bits
    }
}

/// Row-major 2D section of a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
    pub pixel_spacing: [f64; 2],
    pub source_index: usize,
}

/// Placement of a crop window relative to an (optionally padded) slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub size: (usize, usize),
    /// Zero padding added before rows / columns.
    pub pad_before: (usize, usize),
    /// Offset of the window inside the padded slice.
    pub offset: (usize, usize),
}

impl Slice2D {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("slice dimensions must be >= 1"));
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {rows}x{cols} slice",
                data.len()
            )));
        }
        Ok(Slice2D {
            rows,
            cols,
            data,
            pixel_spacing: [1.0, 1.0],
            source_index: 0,
        })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Draws a crop window of `size` uniformly over all valid positions.
    /// Dimensions smaller than the window are zero-padded symmetrically first.
    pub fn random_window<R: Rng + ?Sized>(
        &self,
        size: (usize, usize),
        rng: &mut R,
    ) -> Result<CropWindow> {
        if size.0 == 0 || size.1 == 0 {
            return Err(Error::invalid("crop size components must be >= 1"));
        }
        let pad = |n: usize, want: usize| want.saturating_sub(n) / 2;
        let pad_before = (pad(self.rows, size.0), pad(self.cols, size.1));
        let max_r = self.rows.max(size.0) - size.0;
        let max_c = self.cols.max(size.1) - size.1;
        let offset = (rng.random_range(0..=max_r), rng.random_range(0..=max_c));
        Ok(CropWindow {
            size,
            pad_before,
            offset,
        })
    }

    /// Extracts `window`, reading zeros wherever it falls in padding.
    pub fn crop(&self, window: &CropWindow) -> Slice2D {
        let (h, w) = window.size;
        let mut data = vec![0.0f32; h * w];
        for r in 0..h {
            let sr = (r + window.offset.0) as isize - window.pad_before.0 as isize;
            if sr < 0 || sr as usize >= self.rows {
                continue;
            }
            for c in 0..w {
                let sc = (c + window.offset.1) as isize - window.pad_before.1 as isize;
                if sc < 0 || sc as usize >= self.cols {
                    continue;
                }
                data[r * w + c] = self.get(sr as usize, sc as usize);
            }
        }
        Slice2D {
            rows: h,
            cols: w,
            data,
            pixel_spacing: self.pixel_spacing,
            source_index: self.source_index,
        }
    }

    pub fn random_crop<R: Rng + ?Sized>(&self, size: (usize, usize), rng: &mut R) -> Result<Slice2D> {
        let window = self.random_window(size, rng)?;
        Ok(self.crop(&window))
    }
}
