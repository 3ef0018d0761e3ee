//! Deterministic synthetic chest phantoms: a soft-tissue body ellipse on air,
//! two lung ellipsoids and, for diseased cases, smooth lesion blobs inside
//! the lungs.
//!
//! All randomness comes from one `ChaCha8Rng` seeded with the case seed and
//! is drawn in this order, so datasets can be reproduced elsewhere:
//!
//! 1. body: centre offset x, centre offset y, semi-axis x, semi-axis y,
//!    tissue level;
//! 2. lung level;
//! 3. per lung (right then left): lateral offset, centre offset y, centre
//!    offset z, semi-axes x, y, z;
//! 4. diseased cases only: lesion count, then per lesion: lung side, seed
//!    voxel index within that lung, radius, HU, and for each of the three
//!    spheres a radius scale plus (except the first) three centre jitters;
//! 5. Gaussian noise for every voxel in storage order (x fastest), two
//!    uniforms per Box-Muller pair, cosine branch first.
//!
//! All draws are `f64` uniforms in `[0, 1)` (`rng.random::<f64>()`) mapped
//! affinely, except integer choices which use `random_range`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par;
use crate::training::Role;
use crate::volume::{read_typed, write_volume, BinaryMask, Geometry, Volume};

pub const INDEX_FILE: &str = "index.txt";

const AIR_HU: f64 = -1000.0;
const MAX_ATTEMPTS: u64 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Inclusive lesion count range for diseased cases.
    pub lesions: (usize, usize),
    /// Lesion radius as a fraction of the host lung's width.
    pub lesion_radius: (f64, f64),
    pub body_hu: f64,
    pub body_hu_spread: f64,
    pub lung_hu: f64,
    pub lung_hu_spread: f64,
    pub lesion_hu: (f64, f64),
    pub noise_std: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [128, 96, 12],
            spacing: [2.5, 2.5, 5.0],
            lesions: (1, 4),
            lesion_radius: (0.05, 0.25),
            body_hu: 40.0,
            body_hu_spread: 30.0,
            lung_hu: -850.0,
            lung_hu_spread: 40.0,
            lesion_hu: (-600.0, -100.0),
            noise_std: 20.0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.dims[0] < 16 || self.dims[1] < 16 || self.dims[2] == 0 {
            return bad(format!("phantom dims {:?} too small (need at least 16x16x1)", self.dims));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return bad(format!("phantom spacing {:?} must be positive", self.spacing));
        }
        if self.lesions.0 == 0 || self.lesions.0 > self.lesions.1 {
            return bad(format!("lesion count range {:?} must satisfy 1 <= min <= max", self.lesions));
        }
        let (r0, r1) = self.lesion_radius;
        if !(r0 > 0.0 && r0 <= r1 && r1 < 1.0) {
            return bad(format!("lesion radius range {:?} must lie in (0, 1)", self.lesion_radius));
        }
        let (h0, h1) = self.lesion_hu;
        if !(h0 <= h1 && h0 > self.lung_hu + self.lung_hu_spread && h1 < self.body_hu - self.body_hu_spread) {
            return bad(format!(
                "lesion HU range {:?} must lie strictly between the lung and body levels",
                self.lesion_hu
            ));
        }
        if !(self.noise_std >= 0.0 && self.body_hu_spread >= 0.0 && self.lung_hu_spread >= 0.0) {
            return bad("spreads and noise must be non-negative".into());
        }
        Ok(())
    }

    fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.dims, self.spacing)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub ct: Volume,
    pub lung_mask: BinaryMask,
    /// Empty for normal cases.
    pub lesion_mask: BinaryMask,
    pub label: Role,
    pub seed: u64,
}

struct Ellipsoid {
    c: [f64; 3],
    r: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|i| ((p[i] - self.c[i]) / self.r[i]).powi(2)).sum::<f64>() <= 1.0
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn centre(p: [usize; 3]) -> [f64; 3] {
    [p[0] as f64, p[1] as f64, p[2] as f64]
}

/// Generates one case. Deterministic in `(cfg, label, seed)`.
pub fn generate_case(cfg: &PhantomConfig, label: Role, seed: u64) -> Result<PhantomCase> {
    cfg.validate()?;
    for attempt in 0..MAX_ATTEMPTS {
        if let Some(case) = try_generate(cfg, label, seed, attempt)? {
            return Ok(case);
        }
        log::debug!("phantom seed {seed}: lesion placement failed on attempt {attempt}");
    }
    Err(Error::InvalidArgument(format!(
        "could not place lesions for seed {seed} after {MAX_ATTEMPTS} attempts"
    )))
}

fn try_generate(cfg: &PhantomConfig, label: Role, seed: u64, attempt: u64) -> Result<Option<PhantomCase>> {
    let g = cfg.geometry()?;
    let [nx, ny, nz] = g.dims();
    let (fx, fy, fz) = (nx as f64, ny as f64, nz as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt.wrapping_mul(0x9e37_79b9_7f4a_7c15)));

    let body_c = [
        (fx - 1.0) / 2.0 + uniform(&mut rng, -0.03, 0.03) * fx,
        (fy - 1.0) / 2.0 + uniform(&mut rng, -0.03, 0.03) * fy,
    ];
    let body_r = [uniform(&mut rng, 0.42, 0.47) * fx, uniform(&mut rng, 0.38, 0.44) * fy];
    let body_hu = cfg.body_hu + uniform(&mut rng, -cfg.body_hu_spread, cfg.body_hu_spread);
    let lung_hu = cfg.lung_hu + uniform(&mut rng, -cfg.lung_hu_spread, cfg.lung_hu_spread);
    let in_body = |x: usize, y: usize| {
        ((x as f64 - body_c[0]) / body_r[0]).powi(2) + ((y as f64 - body_c[1]) / body_r[1]).powi(2) <= 1.0
    };

    let lungs: Vec<Ellipsoid> = [-1.0, 1.0]
        .iter()
        .map(|&side| {
            let dx = uniform(&mut rng, 0.40, 0.48) * body_r[0];
            let dy = uniform(&mut rng, -0.06, 0.06) * body_r[1];
            let dz = uniform(&mut rng, -0.05, 0.05) * fz;
            let r = [
                uniform(&mut rng, 0.28, 0.34) * body_r[0],
                uniform(&mut rng, 0.58, 0.70) * body_r[1],
                uniform(&mut rng, 0.55, 0.70) * fz,
            ];
            Ellipsoid {
                c: [body_c[0] + side * dx, body_c[1] + dy, (fz - 1.0) / 2.0 + dz],
                r,
            }
        })
        .collect();
    // 0 = outside, 1 = right lung, 2 = left lung.
    let lung_id: Vec<u8> = (0..g.len())
        .map(|i| {
            let [x, y, z] = g.coords(i);
            if !in_body(x, y) {
                return 0;
            }
            let p = centre([x, y, z]);
            lungs.iter().position(|e| e.contains(p)).map_or(0, |k| k as u8 + 1)
        })
        .collect();
    if (1..=2).any(|k| !lung_id.contains(&k)) {
        return Ok(None);
    }

    let mut hu: Vec<f64> = (0..g.len())
        .map(|i| {
            let [x, y, _] = g.coords(i);
            match (lung_id[i], in_body(x, y)) {
                (1 | 2, _) => lung_hu,
                (_, true) => body_hu,
                _ => AIR_HU,
            }
        })
        .collect();
    let mut lesion = vec![false; g.len()];

    if label == Role::Covid {
        let sp = cfg.spacing;
        let n = rng.random_range(cfg.lesions.0..=cfg.lesions.1);
        for _ in 0..n {
            let side = rng.random_range(0..2u8) + 1;
            let members: Vec<usize> = (0..g.len()).filter(|&i| lung_id[i] == side).collect();
            let seed_voxel = centre(g.coords(members[rng.random_range(0..members.len())]));
            let host = &lungs[usize::from(side - 1)];
            let radius_mm = uniform(&mut rng, cfg.lesion_radius.0, cfg.lesion_radius.1) * 2.0 * host.r[0] * sp[0];
            let level = uniform(&mut rng, cfg.lesion_hu.0, cfg.lesion_hu.1);
            let spheres: Vec<([f64; 3], f64)> = (0..3)
                .map(|k| {
                    let r = radius_mm * uniform(&mut rng, 0.8, 1.2);
                    let mut c = seed_voxel;
                    if k > 0 {
                        for (a, ca) in c.iter_mut().enumerate() {
                            *ca += uniform(&mut rng, -0.5, 0.5) * radius_mm / sp[a];
                        }
                    }
                    (c, r)
                })
                .collect();
            let mut placed = 0usize;
            for i in 0..g.len() {
                if lung_id[i] == 0 {
                    continue;
                }
                let p = centre(g.coords(i));
                let inside = spheres.iter().any(|(c, r)| {
                    (0..3).map(|a| ((p[a] - c[a]) * sp[a]).powi(2)).sum::<f64>() <= r * r
                });
                if inside {
                    hu[i] = level;
                    lesion[i] = true;
                    placed += 1;
                }
            }
            if placed == 0 {
                return Ok(None);
            }
        }
    }

    if cfg.noise_std > 0.0 {
        let mut i = 0;
        while i < hu.len() {
            let u1 = 1.0 - rng.random::<f64>();
            let u2 = rng.random::<f64>();
            let m = (-2.0 * u1.ln()).sqrt() * cfg.noise_std;
            let a = std::f64::consts::TAU * u2;
            hu[i] += m * a.cos();
            if i + 1 < hu.len() {
                hu[i + 1] += m * a.sin();
            }
            i += 2;
        }
    }

    let ct = Volume::new(
        g,
        hu.iter()
            .map(|&v| v.round().clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16)
            .collect(),
    )?;
    let lung_mask = BinaryMask::new(g, lung_id.iter().map(|&k| k != 0).collect())?;
    let lesion_mask = BinaryMask::new(g, lesion)?;
    Ok(Some(PhantomCase {
        ct,
        lung_mask,
        lesion_mask,
        label,
        seed,
    }))
}

/// One line of a dataset index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub id: String,
    pub label: Role,
    pub ct: PathBuf,
    pub lung: PathBuf,
    pub lesion: PathBuf,
}

/// A loaded dataset case.
#[derive(Debug, Clone)]
pub struct LoadedCase {
    pub id: String,
    pub label: Role,
    pub ct: Volume,
    pub lung: BinaryMask,
    pub lesion: BinaryMask,
}

/// Per-case seed: a SplitMix64 mix of the dataset seed, label and index.
pub fn case_seed(seed: u64, label: Role, index: usize) -> u64 {
    let tag = match label {
        Role::Normal => 0x4e4f_524d,
        Role::Covid => 0x434f_5649,
    };
    let mut z = seed ^ (tag << 32) ^ (index as u64).wrapping_mul(0xd6e8_feb8_6659_fd93);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn case_id(label: Role, index: usize) -> String {
    format!("{label}_{index:03}")
}

/// Writes `n_normal + n_covid` cases as `<id>_ct.vhdr`, `<id>_lung.vhdr`,
/// `<id>_lesion.vhdr` plus an index file into `out`.
pub fn generate_dataset(
    cfg: &PhantomConfig,
    n_normal: usize,
    n_covid: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<IndexEntry>> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let jobs: Vec<(Role, usize)> = (0..n_normal)
        .map(|i| (Role::Normal, i))
        .chain((0..n_covid).map(|i| (Role::Covid, i)))
        .collect();
    let entries = par::try_map_indexed(jobs.len(), |j| {
        let (label, i) = jobs[j];
        let case = generate_case(cfg, label, case_seed(seed, label, i))?;
        let id = case_id(label, i);
        let entry = IndexEntry {
            ct: PathBuf::from(format!("{id}_ct.vhdr")),
            lung: PathBuf::from(format!("{id}_lung.vhdr")),
            lesion: PathBuf::from(format!("{id}_lesion.vhdr")),
            id,
            label,
        };
        write_volume(&case.ct, out.join(&entry.ct))?;
        write_volume(&case.lung_mask, out.join(&entry.lung))?;
        write_volume(&case.lesion_mask, out.join(&entry.lesion))?;
        Ok::<_, Error>(entry)
    })?;
    write_index(out, &entries)?;
    Ok(entries)
}

pub fn write_index(dir: &Path, entries: &[IndexEntry]) -> Result<()> {
    let mut s = String::new();
    for e in entries {
        let _ = writeln!(
            s,
            "{} {} {} {} {}",
            e.id,
            e.label,
            e.ct.display(),
            e.lung.display(),
            e.lesion.display()
        );
    }
    let path = dir.join(INDEX_FILE);
    fs::write(&path, s).map_err(|e| Error::io(path, e))
}

/// Reads `index.txt` from a dataset directory. Paths are returned as written
/// (relative to `dir`). Blank lines and `#` comments are skipped.
pub fn read_index(dir: &Path) -> Result<Vec<IndexEntry>> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out: Vec<IndexEntry> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let [id, label, ct, lung, lesion] = f[..] else {
            return Err(Error::format(&path, format!("line {}: expected 5 fields, got {}", n + 1, f.len())));
        };
        if out.iter().any(|e| e.id == id) {
            return Err(Error::format(&path, format!("line {}: duplicate case id `{id}`", n + 1)));
        }
        out.push(IndexEntry {
            id: id.to_string(),
            label: label
                .parse()
                .map_err(|_| Error::format(&path, format!("line {}: unknown label `{label}`", n + 1)))?,
            ct: ct.into(),
            lung: lung.into(),
            lesion: lesion.into(),
        });
    }
    Ok(out)
}

pub fn load_case(dir: &Path, entry: &IndexEntry) -> Result<LoadedCase> {
    let ct: Volume = read_typed(dir.join(&entry.ct))?;
    let lung: BinaryMask = read_typed(dir.join(&entry.lung))?;
    let lesion: BinaryMask = read_typed(dir.join(&entry.lesion))?;
    ct.geometry().ensure_same(lung.geometry(), &format!("{}: CT vs lung mask", entry.id))?;
    ct.geometry().ensure_same(lesion.geometry(), &format!("{}: CT vs lesion mask", entry.id))?;
    Ok(LoadedCase {
        id: entry.id.clone(),
        label: entry.label,
        ct,
        lung,
        lesion,
    })
}
