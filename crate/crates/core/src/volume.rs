//! Geometry-aware voxel grids and their on-disk header + raw format.
//!
//! A grid is stored as a small text header (`.vhdr`) next to a raw payload:
//!
//! ```text
//! dims: 128 96 12
//! spacing: 2.5 2.5 5
//! dtype: int16
//! data: case_ct.raw
//! ```
//!
//! The payload is little-endian with x varying fastest, then y, then z.
//! `int16` decodes to a [`Volume`], `uint8` to a [`BinaryMask`] (any nonzero
//! byte is true) and `float32` to a [`ProbMap`].

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Voxel counts and physical voxel size (mm) of a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    dims: [usize; 3],
    spacing: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "grid dims must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "voxel spacing must be positive, got {spacing:?}"
            )));
        }
        Ok(Self { dims, spacing })
    }

    /// Unit spacing.
    pub fn with_dims(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn nx(&self) -> usize {
        self.dims[0]
    }

    pub fn ny(&self) -> usize {
        self.dims[1]
    }

    pub fn nz(&self) -> usize {
        self.dims[2]
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Voxels in one axial slice.
    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && z < self.dims[2]);
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    pub fn ensure_same(&self, other: &Geometry, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "{what}: {:?}/{:?} vs {:?}/{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }
}

/// Element types that can live in a [`Grid`] and be stored on disk.
pub trait Voxel: Copy + Default + PartialEq + fmt::Debug + Send + Sync + 'static {
    const DTYPE: &'static str;
    const BYTES: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    /// Value-domain check applied on construction and on read.
    fn is_valid(self) -> bool {
        true
    }
}

impl Voxel for i16 {
    const DTYPE: &'static str = "int16";
    const BYTES: usize = 2;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        i16::from_le_bytes([bytes[0], bytes[1]])
    }
}

impl Voxel for bool {
    const DTYPE: &'static str = "uint8";
    const BYTES: usize = 1;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(u8::from(self));
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0] != 0
    }
}

impl Voxel for f32 {
    const DTYPE: &'static str = "float32";
    const BYTES: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
    fn is_valid(self) -> bool {
        (0.0..=1.0).contains(&self)
    }
}

/// Dense 3D grid, x fastest. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T: Voxel> {
    geometry: Geometry,
    voxels: Vec<T>,
}

/// CT intensities in Hounsfield Units.
pub type Volume = Grid<i16>;
/// Lung or lesion membership.
pub type BinaryMask = Grid<bool>;
/// Per-voxel probabilities in `[0, 1]`.
pub type ProbMap = Grid<f32>;

impl<T: Voxel> Grid<T> {
    pub fn new(geometry: Geometry, voxels: Vec<T>) -> Result<Self> {
        if voxels.len() != geometry.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} voxels for dims {:?}",
                voxels.len(),
                geometry.dims()
            )));
        }
        if let Some(bad) = voxels.iter().find(|v| !v.is_valid()) {
            return Err(Error::InvalidArgument(format!(
                "{} voxel value {bad:?} outside its domain",
                T::DTYPE
            )));
        }
        Ok(Self { geometry, voxels })
    }

    pub fn filled(geometry: Geometry, value: T) -> Result<Self> {
        Self::new(geometry, vec![value; geometry.len()])
    }

    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        let mut voxels = Vec::with_capacity(geometry.len());
        for z in 0..geometry.nz() {
            for y in 0..geometry.ny() {
                for x in 0..geometry.nx() {
                    voxels.push(f(x, y, z));
                }
            }
        }
        Self::new(geometry, voxels)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn voxels(&self) -> &[T] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<T> {
        self.voxels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.voxels[self.geometry.index(x, y, z)]
    }

    /// The `z`-th axial slice, row-major with `ny` rows and `nx` columns.
    pub fn slice(&self, z: usize) -> &[T] {
        let n = self.geometry.slice_len();
        &self.voxels[z * n..(z + 1) * n]
    }

    pub fn map<U: Voxel>(&self, f: impl Fn(T) -> U) -> Result<Grid<U>> {
        Grid::new(self.geometry, self.voxels.iter().map(|&v| f(v)).collect())
    }

    /// Voxelwise combination of two grids with identical geometry.
    pub fn zip_map<U: Voxel, V: Voxel>(
        &self,
        other: &Grid<U>,
        f: impl Fn(T, U) -> V,
    ) -> Result<Grid<V>> {
        self.geometry.ensure_same(other.geometry(), "zip_map")?;
        Grid::new(
            self.geometry,
            self.voxels
                .iter()
                .zip(other.voxels())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }
}

impl BinaryMask {
    /// Number of true voxels.
    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> Result<bool> {
        self.geometry.ensure_same(other.geometry(), "subset")?;
        Ok(self.voxels.iter().zip(other.voxels()).all(|(&a, &b)| !a || b))
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_map(other, |a, b| a && b)
    }
}

/// Number of true voxels in a mask.
pub fn mask_volume_count(mask: &BinaryMask) -> usize {
    mask.count()
}

/// A grid read from disk, typed by its header's dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyGrid {
    Volume(Volume),
    Mask(BinaryMask),
    Prob(ProbMap),
}

impl AnyGrid {
    pub fn geometry(&self) -> &Geometry {
        match self {
            AnyGrid::Volume(g) => g.geometry(),
            AnyGrid::Mask(g) => g.geometry(),
            AnyGrid::Prob(g) => g.geometry(),
        }
    }

    fn dtype(&self) -> &'static str {
        match self {
            AnyGrid::Volume(_) => i16::DTYPE,
            AnyGrid::Mask(_) => bool::DTYPE,
            AnyGrid::Prob(_) => f32::DTYPE,
        }
    }
}

/// Grid kinds that can be extracted from an [`AnyGrid`].
pub trait FromAnyGrid: Sized {
    fn from_any(grid: AnyGrid) -> Option<Self>;
}

impl FromAnyGrid for Volume {
    fn from_any(grid: AnyGrid) -> Option<Self> {
        match grid {
            AnyGrid::Volume(v) => Some(v),
            _ => None,
        }
    }
}

impl FromAnyGrid for BinaryMask {
    fn from_any(grid: AnyGrid) -> Option<Self> {
        match grid {
            AnyGrid::Mask(v) => Some(v),
            _ => None,
        }
    }
}

impl FromAnyGrid for ProbMap {
    fn from_any(grid: AnyGrid) -> Option<Self> {
        match grid {
            AnyGrid::Prob(v) => Some(v),
            _ => None,
        }
    }
}

struct Header {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    data: String,
}

fn parse_header(path: &Path, text: &str) -> Result<Header> {
    let mut dims = None;
    let mut spacing = None;
    let mut dtype = None;
    let mut data = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| Error::format(path, format!("malformed header line `{line}`")))?;
        let value = value.trim();
        match key.trim() {
            "dims" => dims = Some(parse_triple::<usize>(path, value)?),
            "spacing" => spacing = Some(parse_triple::<f64>(path, value)?),
            "dtype" => dtype = Some(value.to_string()),
            "data" => data = Some(value.to_string()),
            other => return Err(Error::format(path, format!("unknown header key `{other}`"))),
        }
    }
    Ok(Header {
        dims: dims.ok_or_else(|| Error::format(path, "missing `dims`"))?,
        spacing: spacing.unwrap_or([1.0; 3]),
        dtype: dtype.ok_or_else(|| Error::format(path, "missing `dtype`"))?,
        data: data.ok_or_else(|| Error::format(path, "missing `data`"))?,
    })
}

fn parse_triple<T: std::str::FromStr>(path: &Path, value: &str) -> Result<[T; 3]> {
    let parts: Vec<T> = value
        .split_whitespace()
        .map(|t| t.parse::<T>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::format(path, format!("cannot parse `{value}`")))?;
    <[T; 3]>::try_from(parts).map_err(|_| Error::format(path, format!("expected 3 values in `{value}`")))
}

fn decode<T: Voxel>(path: &Path, geometry: Geometry, bytes: &[u8]) -> Result<Grid<T>> {
    let expected = geometry.len() * T::BYTES;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("raw payload has {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    let voxels = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
    Grid::new(geometry, voxels).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a header + raw pair. `path` names the header file.
pub fn read_volume(path: impl AsRef<Path>) -> Result<AnyGrid> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(path, &text)?;
    let geometry =
        Geometry::new(header.dims, header.spacing).map_err(|e| Error::format(path, e.to_string()))?;
    let raw_path = raw_path_for(path, &header.data);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    match header.dtype.as_str() {
        "int16" => Ok(AnyGrid::Volume(decode(path, geometry, &bytes)?)),
        "uint8" => Ok(AnyGrid::Mask(decode(path, geometry, &bytes)?)),
        "float32" => Ok(AnyGrid::Prob(decode(path, geometry, &bytes)?)),
        other => Err(Error::format(path, format!("unknown dtype `{other}`"))),
    }
}

/// Reads a grid and insists on a particular kind.
pub fn read_typed<G: FromAnyGrid>(path: impl AsRef<Path>) -> Result<G> {
    let path = path.as_ref();
    let any = read_volume(path)?;
    let dtype = any.dtype();
    G::from_any(any).ok_or_else(|| {
        Error::format(path, format!("unexpected dtype `{dtype}` for this input"))
    })
}

fn raw_path_for(header: &Path, data: &str) -> PathBuf {
    header
        .parent()
        .map(|p| p.join(data))
        .unwrap_or_else(|| PathBuf::from(data))
}

/// Writes `grid` as `<path>` (header) plus `<stem>.raw` in the same directory.
pub fn write_volume<T: Voxel>(grid: &Grid<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let g = grid.geometry();
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad output path {}", path.display())))?;
    let raw_name = format!("{stem}.raw");
    let [nx, ny, nz] = g.dims();
    let [sx, sy, sz] = g.spacing();
    let header = format!(
        "dims: {nx} {ny} {nz}\nspacing: {sx} {sy} {sz}\ndtype: {}\ndata: {raw_name}\n",
        T::DTYPE
    );
    let mut bytes = Vec::with_capacity(g.len() * T::BYTES);
    for &v in grid.voxels() {
        v.write_le(&mut bytes);
    }
    let raw_path = raw_path_for(path, &raw_name);
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    fs::write(path, header).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_pair(dir: &Path, header: &str, raw: &[u8]) -> PathBuf {
        let h = dir.join("g.vhdr");
        fs::write(&h, header).unwrap();
        fs::write(dir.join("g.raw"), raw).unwrap();
        h
    }

    #[test]
    fn decodes_uint8_mask() {
        let dir = tempfile::tempdir().unwrap();
        let h = write_pair(dir.path(), "dims: 2 2 1\ndtype: uint8\ndata: g.raw\n", &[0, 1, 1, 0]);
        let m: BinaryMask = read_typed(&h).unwrap();
        assert_eq!(m.count(), 2);
        assert_eq!(m.geometry().spacing(), [1.0; 3]);
    }

    #[test]
    fn decodes_int16_volume() {
        let dir = tempfile::tempdir().unwrap();
        let h = write_pair(
            dir.path(),
            "dims: 1 1 1\ndtype: int16\ndata: g.raw\n",
            &(-1000i16).to_le_bytes(),
        );
        let v: Volume = read_typed(&h).unwrap();
        assert_eq!(v.voxels(), &[-1000]);
    }

    #[test]
    fn nonzero_bytes_read_as_true() {
        let dir = tempfile::tempdir().unwrap();
        let h = write_pair(dir.path(), "dims: 3 1 1\ndtype: uint8\ndata: g.raw\n", &[0, 7, 255]);
        let m: BinaryMask = read_typed(&h).unwrap();
        assert_eq!(m.voxels(), &[false, true, true]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_volume(dir.path().join("nope.vhdr")), Err(Error::Io { .. })));

        let h = write_pair(dir.path(), "dims: 2 2 1\ndtype: uint8\ndata: g.raw\n", &[0, 1, 1]);
        assert!(matches!(read_volume(&h), Err(Error::Format { .. })));

        let h = write_pair(dir.path(), "dims: 1 1 1\ndtype: float64\ndata: g.raw\n", &[0; 8]);
        assert!(matches!(read_volume(&h), Err(Error::Format { .. })));

        let h = write_pair(
            dir.path(),
            "dims: 1 1 1\ndtype: float32\ndata: g.raw\n",
            &1.5f32.to_le_bytes(),
        );
        assert!(matches!(read_volume(&h), Err(Error::Format { .. })));
    }

    #[test]
    fn empty_dims_rejected() {
        assert!(Geometry::with_dims([0, 2, 2]).is_err());
        assert!(Geometry::new([1, 1, 1], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn half_probmap_payload() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::with_dims([3, 2, 2]).unwrap();
        let p = ProbMap::filled(g, 0.5).unwrap();
        let h = dir.path().join("p.vhdr");
        write_volume(&p, &h).unwrap();
        let raw = fs::read(dir.path().join("p.raw")).unwrap();
        assert_eq!(raw.len(), 12 * 4);
        assert!(raw.chunks(4).all(|c| c == 0.5f32.to_le_bytes()));
    }

    #[test]
    fn probmap_rejects_out_of_range() {
        let g = Geometry::with_dims([2, 1, 1]).unwrap();
        assert!(ProbMap::new(g, vec![0.2, 1.01]).is_err());
        assert!(ProbMap::new(g, vec![0.2, f32::NAN]).is_err());
    }

    #[test]
    fn mask_counts() {
        let g = Geometry::with_dims([2, 2, 2]).unwrap();
        assert_eq!(mask_volume_count(&BinaryMask::filled(g, false).unwrap()), 0);
        assert_eq!(mask_volume_count(&BinaryMask::filled(g, true).unwrap()), 8);
    }

    fn geometry_strategy() -> impl Strategy<Value = Geometry> {
        (1usize..6, 1usize..6, 1usize..4, 0.1f64..5.0, 0.1f64..5.0, 0.1f64..5.0)
            .prop_map(|(x, y, z, a, b, c)| Geometry::new([x, y, z], [a, b, c]).unwrap())
    }

    proptest! {
        #[test]
        fn volume_round_trip(g in geometry_strategy(), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let dir = tempfile::tempdir().unwrap();

            let v = Volume::from_fn(g, |_, _, _| rng.random()).unwrap();
            write_volume(&v, dir.path().join("v.vhdr")).unwrap();
            prop_assert_eq!(read_typed::<Volume>(dir.path().join("v.vhdr")).unwrap(), v);

            let m = BinaryMask::from_fn(g, |_, _, _| rng.random()).unwrap();
            write_volume(&m, dir.path().join("m.vhdr")).unwrap();
            prop_assert_eq!(read_typed::<BinaryMask>(dir.path().join("m.vhdr")).unwrap(), m);

            let p = ProbMap::from_fn(g, |_, _, _| rng.random::<f32>()).unwrap();
            write_volume(&p, dir.path().join("p.vhdr")).unwrap();
            let back: ProbMap = read_typed(dir.path().join("p.vhdr")).unwrap();
            prop_assert!(back.voxels().iter().zip(p.voxels()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(back.geometry(), p.geometry());
        }

        #[test]
        fn count_matches_loop(bits in proptest::collection::vec(any::<bool>(), 1..200)) {
            let g = Geometry::with_dims([bits.len(), 1, 1]).unwrap();
            let m = BinaryMask::new(g, bits.clone()).unwrap();
            let mut n = 0;
            for b in &bits {
                if *b { n += 1; }
            }
            prop_assert_eq!(mask_volume_count(&m), n);
        }
    }
}
