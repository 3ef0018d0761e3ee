//! CT intensity windowing, lung bounding-box cropping and per-slice resizing
//! to the network's input window.
//!
//! Resizing is corner-aligned: target index `i` samples source coordinate
//! `i * (src - 1) / (dst - 1)`, so corners map onto corners and a resize to
//! the same size is the identity.

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{BinaryMask, Geometry, ProbMap, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub hu_min: f64,
    pub hu_max: f64,
    pub target_rows: usize,
    pub target_cols: usize,
    /// Voxels added around the lung bounding box on every side.
    pub crop_margin: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            hu_min: -1000.0,
            hu_max: 200.0,
            target_rows: 296,
            target_cols: 216,
            crop_margin: 0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hu_min.partial_cmp(&self.hu_max) != Some(std::cmp::Ordering::Less) {
            return Err(Error::InvalidArgument(format!(
                "hu_min ({}) must be below hu_max ({})",
                self.hu_min, self.hu_max
            )));
        }
        if self.target_rows < 2 || self.target_cols < 2 {
            return Err(Error::InvalidArgument(format!(
                "target window must be at least 2x2, got {}x{}",
                self.target_rows, self.target_cols
            )));
        }
        Ok(())
    }

    /// Maps one HU value into `[0, 1]`.
    #[inline]
    pub fn normalize(&self, hu: f64) -> f32 {
        (((hu - self.hu_min) / (self.hu_max - self.hu_min)).clamp(0.0, 1.0)) as f32
    }
}

/// Clamped linear map of the HU window onto `[0, 1]`.
pub fn normalize_hu(v: &Volume, cfg: &PreprocessConfig) -> Result<ProbMap> {
    cfg.validate()?;
    v.map(|hu| cfg.normalize(f64::from(hu)))
}

/// Row-major 2D grid: `rows` along y, `cols` along x.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2d {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Slice2d {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} slice",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Result<Self> {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }
}

/// Inclusive voxel ranges along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub x: (usize, usize),
    pub y: (usize, usize),
    pub z: (usize, usize),
}

impl CropBox {
    pub fn full(geometry: &Geometry) -> Self {
        Self {
            x: (0, geometry.nx() - 1),
            y: (0, geometry.ny() - 1),
            z: (0, geometry.nz() - 1),
        }
    }

    pub fn width(&self) -> usize {
        self.x.1 - self.x.0 + 1
    }

    pub fn height(&self) -> usize {
        self.y.1 - self.y.0 + 1
    }

    pub fn depth(&self) -> usize {
        self.z.1 - self.z.0 + 1
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        (self.x.0..=self.x.1).contains(&x)
            && (self.y.0..=self.y.1).contains(&y)
            && (self.z.0..=self.z.1).contains(&z)
    }
}

/// Tightest box around the true voxels, grown by `margin` and clipped to the grid.
pub fn bounding_box(mask: &BinaryMask, margin: usize) -> Result<CropBox> {
    let g = mask.geometry();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, &v) in mask.voxels().iter().enumerate() {
        if v {
            any = true;
            let c = g.coords(i);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
    }
    if !any {
        return Err(Error::EmptyMask("bounding box of an empty mask".into()));
    }
    let dims = g.dims();
    let grow = |a: usize| (lo[a].saturating_sub(margin), (hi[a] + margin).min(dims[a] - 1));
    Ok(CropBox {
        x: grow(0),
        y: grow(1),
        z: grow(2),
    })
}

fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    if dst == 1 {
        0.0
    } else {
        (i * (src - 1)) as f64 / (dst - 1) as f64
    }
}

/// Bilinear resize with corner-aligned sampling.
pub fn resize_bilinear(src: &Slice2d, rows: usize, cols: usize) -> Result<Slice2d> {
    if src.rows < 2 || src.cols < 2 {
        return Err(Error::InvalidArgument(format!(
            "bilinear resize needs a source of at least 2x2, got {}x{}",
            src.rows, src.cols
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument("resize target must be nonempty".into()));
    }
    let taps = |n_dst: usize, n_src: usize| -> Vec<(usize, usize, f64)> {
        (0..n_dst)
            .map(|i| {
                let s = source_coord(i, n_src, n_dst);
                let i0 = (s.floor() as usize).min(n_src - 1);
                let i1 = (i0 + 1).min(n_src - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ty = taps(rows, src.rows);
    let tx = taps(cols, src.cols);
    let mut out = Vec::with_capacity(rows * cols);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let v = if fy == 0.0 && fx == 0.0 {
                src.get(y0, x0)
            } else {
                let top = f64::from(src.get(y0, x0)) * (1.0 - fx) + f64::from(src.get(y0, x1)) * fx;
                let bot = f64::from(src.get(y1, x0)) * (1.0 - fx) + f64::from(src.get(y1, x1)) * fx;
                (top * (1.0 - fy) + bot * fy) as f32
            };
            out.push(v);
        }
    }
    Slice2d::new(rows, cols, out)
}

/// Nearest-neighbor resize on the same corner-aligned grid; keeps binary
/// inputs binary.
pub fn resize_nearest(src: &Slice2d, rows: usize, cols: usize) -> Result<Slice2d> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument("resize target must be nonempty".into()));
    }
    let pick = |i: usize, n_src: usize, n_dst: usize| {
        (source_coord(i, n_src, n_dst).round() as usize).min(n_src - 1)
    };
    let ys: Vec<usize> = (0..rows).map(|r| pick(r, src.rows, rows)).collect();
    let xs: Vec<usize> = (0..cols).map(|c| pick(c, src.cols, cols)).collect();
    let mut out = Vec::with_capacity(rows * cols);
    for &y in &ys {
        for &x in &xs {
            out.push(src.get(y, x));
        }
    }
    Slice2d::new(rows, cols, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Nearest,
}

/// Where a resized slice came from; enough to put it back.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub case_id: String,
    pub z: usize,
    pub crop: CropBox,
    /// Uncropped slice size (`ny`, `nx`).
    pub source_rows: usize,
    pub source_cols: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSlice {
    pub image: Slice2d,
    pub provenance: Provenance,
}

/// A network input slice paired with its resized reference mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSlice {
    pub image: NormalizedSlice,
    /// 0/1 values, same size as `image`.
    pub mask: Slice2d,
}

fn crop_plane<T: Copy>(plane: &[T], nx: usize, b: &CropBox, f: impl Fn(T) -> f32) -> Slice2d {
    let mut data = Vec::with_capacity(b.width() * b.height());
    for y in b.y.0..=b.y.1 {
        data.extend(plane[y * nx + b.x.0..=y * nx + b.x.1].iter().map(|&v| f(v)));
    }
    Slice2d {
        rows: b.height(),
        cols: b.width(),
        data,
    }
}

/// Normalizes, crops and resizes the axial slice `z` of `ct` inside `crop`.
pub fn prepare_slice(
    ct: &Volume,
    crop: &CropBox,
    z: usize,
    cfg: &PreprocessConfig,
    case_id: &str,
) -> Result<NormalizedSlice> {
    let g = ct.geometry();
    let cropped = crop_plane(ct.slice(z), g.nx(), crop, |hu| cfg.normalize(f64::from(hu)));
    Ok(NormalizedSlice {
        image: resize_bilinear(&cropped, cfg.target_rows, cfg.target_cols)?,
        provenance: Provenance {
            case_id: case_id.to_string(),
            z,
            crop: *crop,
            source_rows: g.ny(),
            source_cols: g.nx(),
        },
    })
}

/// Crops both grids to the lung bounding box and emits one resized
/// (image, mask) pair per axial slice of the box.
pub fn extract_training_slices(
    ct: &Volume,
    lung: &BinaryMask,
    cfg: &PreprocessConfig,
    case_id: &str,
) -> Result<Vec<TrainingSlice>> {
    cfg.validate()?;
    ct.geometry().ensure_same(lung.geometry(), "CT vs lung mask")?;
    let crop = bounding_box(lung, cfg.crop_margin)?;
    let nx = ct.geometry().nx();
    par::try_map_indexed(crop.depth(), |i| {
        let z = crop.z.0 + i;
        let image = prepare_slice(ct, &crop, z, cfg, case_id)?;
        let mask = crop_plane(lung.slice(z), nx, &crop, |v| if v { 1.0 } else { 0.0 });
        let mask = resize_nearest(&mask, cfg.target_rows, cfg.target_cols)?;
        Ok(TrainingSlice { image, mask })
    })
}

/// Resizes a network-window grid back to its crop box and places it in the
/// uncropped slice, zero outside the box.
pub fn unresize_to_original(grid: &Slice2d, provenance: &Provenance, interp: Interp) -> Result<Slice2d> {
    let crop = &provenance.crop;
    if crop.x.1 >= provenance.source_cols || crop.y.1 >= provenance.source_rows {
        return Err(Error::InvalidArgument(format!(
            "crop box {crop:?} exceeds source slice {}x{}",
            provenance.source_rows, provenance.source_cols
        )));
    }
    let (h, w) = (crop.height(), crop.width());
    let inner = if grid.rows == h && grid.cols == w {
        grid.clone()
    } else {
        match interp {
            Interp::Bilinear => resize_bilinear(grid, h, w)?,
            Interp::Nearest => resize_nearest(grid, h, w)?,
        }
    };
    let mut out = vec![0.0f32; provenance.source_rows * provenance.source_cols];
    for (r, row) in inner.data.chunks_exact(w).enumerate() {
        let start = (crop.y.0 + r) * provenance.source_cols + crop.x.0;
        out[start..start + w].copy_from_slice(row);
    }
    Slice2d::new(provenance.source_rows, provenance.source_cols, out)
}
