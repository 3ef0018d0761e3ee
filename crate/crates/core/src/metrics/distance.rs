//! Surface extraction and surface/Hausdorff-type distances on top of an exact
//! separable Euclidean distance transform.

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Geometry};

/// Mask voxels with at least one false 6-neighbour or lying on the volume
/// boundary.
pub fn surface(mask: &BinaryMask) -> BinaryMask {
    let g = *mask.geometry();
    let [nx, ny, nz] = g.dims();
    let v = mask.voxels();
    let out = (0..g.len())
        .map(|i| {
            if !v[i] {
                return false;
            }
            let [x, y, z] = g.coords(i);
            if x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz {
                return true;
            }
            let (sx, sy) = (1, nx);
            let sz = nx * ny;
            !(v[i - sx] && v[i + sx] && v[i - sy] && v[i + sy] && v[i - sz] && v[i + sz])
        })
        .collect();
    BinaryMask::new(g, out).expect("same geometry")
}

/// Lower-envelope squared distance transform of one line sampled at
/// `step * i`. Infinite entries are outside the seed set.
fn transform_line(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let pos = |i: usize| step * i as f64;
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
            z.push(f64::INFINITY);
            continue;
        }
        let mut s;
        loop {
            let p = *v.last().expect("non-empty envelope");
            s = ((fq + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= z[v.len() - 1] && v.len() > 1 {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        let k = v.len();
        z[k] = s;
        v.push(q);
        z.push(f64::INFINITY);
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(i) {
            k += 1;
        }
        let d = pos(i) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every voxel to the nearest true voxel of
/// `seeds`, with per-axis step lengths. Infinite everywhere when `seeds` is
/// empty.
pub fn squared_distance_transform(seeds: &BinaryMask, step: [f64; 3]) -> Vec<f64> {
    let g = seeds.geometry();
    let dims = g.dims();
    let mut d: Vec<f64> = seeds
        .voxels()
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        for start in 0..g.len() {
            if !(start / stride).is_multiple_of(n) {
                continue;
            }
            for (i, l) in line.iter_mut().enumerate() {
                *l = d[start + i * stride];
            }
            transform_line(&line, step[axis], &mut out, &mut v, &mut z);
            for (i, &o) in out.iter().enumerate() {
                d[start + i * stride] = o;
            }
        }
    }
    d
}

fn steps(g: &Geometry, use_spacing: bool) -> [f64; 3] {
    if use_spacing {
        g.spacing()
    } else {
        [1.0; 3]
    }
}

/// Mean distance from the voxels of `from` to the nearest voxel of `to`.
pub fn directed_mean_distance(from: &BinaryMask, to: &BinaryMask, use_spacing: bool) -> Result<f64> {
    from.geometry().ensure_same(to.geometry(), "distance masks")?;
    if from.count() == 0 || to.count() == 0 {
        return Err(Error::EmptyMask("surface distance needs two non-empty masks".into()));
    }
    let dt = squared_distance_transform(to, steps(from.geometry(), use_spacing));
    let mut sum = 0.0;
    let mut n = 0usize;
    for (&m, &d) in from.voxels().iter().zip(&dt) {
        if m {
            sum += d.sqrt();
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceDistances {
    /// Symmetrized mean distance between the two surfaces.
    pub mean_surface_dist: f64,
    /// Symmetrized mean distance between all voxels of the two masks.
    pub avg_hausdorff: f64,
}

/// Voxel units by default, millimetres with `use_spacing`.
pub fn surface_distances(reference: &BinaryMask, pred: &BinaryMask, use_spacing: bool) -> Result<SurfaceDistances> {
    reference.geometry().ensure_same(pred.geometry(), "reference vs prediction")?;
    if reference.count() == 0 || pred.count() == 0 {
        return Err(Error::EmptyMask("surface distance needs two non-empty masks".into()));
    }
    let (sr, sp) = (surface(reference), surface(pred));
    let msd = 0.5
        * (directed_mean_distance(&sp, &sr, use_spacing)? + directed_mean_distance(&sr, &sp, use_spacing)?);
    let ahd = 0.5
        * (directed_mean_distance(pred, reference, use_spacing)?
            + directed_mean_distance(reference, pred, use_spacing)?);
    Ok(SurfaceDistances {
        mean_surface_dist: msd,
        avg_hausdorff: ahd,
    })
}
