//! Synthetic landmark benchmark: composite ellipse-plus-triangle figures on a
//! noisy background, with known landmark positions, on-the-fly augmentation,
//! and a portable on-disk layout (16-bit PGM images, CSV landmarks, JSON meta).

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::LandmarkSet;
use crate::numkernel::Tensor;
use crate::rundir::{field, read_csv, write_csv};

/// Minimum distance, in pixels, between every landmark and every border.
pub const BORDER_MARGIN: f64 = 2.0;

const MAX_GEN_ATTEMPTS: usize = 100;
const MAX_AUGMENT_ATTEMPTS: usize = 10;
const NOISE_SD: f64 = 0.05;
const PGM_MAX: f64 = 65535.0;
/// Generated landmark coordinates sit on a 1/256 pixel grid.
const COORD_GRID: f64 = 256.0;

/// Landmark catalogue in the order they are assigned; `N` takes a prefix.
pub const LANDMARK_NAMES: [&str; 9] = [
    "ellipse_top",
    "ellipse_center",
    "triangle_apex",
    "figure_centroid",
    "triangle_base_left",
    "triangle_base_right",
    "ellipse_bottom",
    "ellipse_left",
    "ellipse_right",
];

/// One image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `1 x H x W`, values in `[0, 1]`.
    pub image: Tensor<f64>,
    pub landmarks: LandmarkSet,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn respects_margin(&self) -> bool {
        within_margin(&self.landmarks.coords, self.height(), self.width())
    }
}

fn within_margin(coords: &[(f64, f64)], h: usize, w: usize) -> bool {
    coords.iter().all(|&(r, c)| {
        r >= BORDER_MARGIN
            && c >= BORDER_MARGIN
            && r <= h as f64 - 1.0 - BORDER_MARGIN
            && c <= w as f64 - 1.0 - BORDER_MARGIN
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub landmarks: usize,
    pub seed: u64,
    pub landmark_names: Vec<String>,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Disjoint train / validation / test partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub meta: DatasetMeta,
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl DatasetSplit {
    /// Checks that no id appears in two partitions.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in self.train.iter().chain(&self.validation).chain(&self.test) {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::config(format!(
                    "sample {} appears in more than one split",
                    s.id
                )));
            }
        }
        Ok(())
    }

    pub fn summary_line(&self) -> String {
        format!(
            "dataset n={} size={}x{} landmarks={} seed={} split={}/{}/{}",
            self.meta.n,
            self.meta.height,
            self.meta.width,
            self.meta.landmarks,
            self.meta.seed,
            self.train.len(),
            self.validation.len(),
            self.test.len()
        )
    }
}

/// Pose of one composite figure.
#[derive(Debug, Clone, Copy)]
struct Figure {
    row: f64,
    col: f64,
    unit: f64,
    angle: f64,
}

impl Figure {
    // local frame: x to the right, y downwards, in units of `unit`
    const ELLIPSE_AXES: (f64, f64) = (9.0, 6.0);
    const TRIANGLE: [(f64, f64); 3] = [(16.0, -10.0), (10.0, 7.0), (22.0, 7.0)];
    const SHIFT: (f64, f64) = (-6.5, 1.0);

    fn to_image(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let (x, y) = ((x + Self::SHIFT.0) * self.unit, (y + Self::SHIFT.1) * self.unit);
        let (s, c) = self.angle.sin_cos();
        (self.row + x * s + y * c, self.col + x * c - y * s)
    }

    fn to_local(&self, (row, col): (f64, f64)) -> (f64, f64) {
        let (dr, dc) = (row - self.row, col - self.col);
        let (s, c) = self.angle.sin_cos();
        let x = dc * c + dr * s;
        let y = -dc * s + dr * c;
        (x / self.unit - Self::SHIFT.0, y / self.unit - Self::SHIFT.1)
    }

    fn local_landmarks() -> [(f64, f64); 9] {
        let (ax, ay) = Self::ELLIPSE_AXES;
        let [apex, bl, br] = Self::TRIANGLE;
        let tri_centroid = ((apex.0 + bl.0 + br.0) / 3.0, (apex.1 + bl.1 + br.1) / 3.0);
        [
            (0.0, -ay),
            (0.0, 0.0),
            apex,
            (tri_centroid.0 / 2.0, tri_centroid.1 / 2.0),
            bl,
            br,
            (0.0, ay),
            (-ax, 0.0),
            (ax, 0.0),
        ]
    }

    fn outline_points(&self) -> Vec<(f64, f64)> {
        let (ax, ay) = Self::ELLIPSE_AXES;
        let mut pts: Vec<_> = (0..24)
            .map(|k| {
                let t = k as f64 * std::f64::consts::TAU / 24.0;
                self.to_image((ax * t.cos(), ay * t.sin()))
            })
            .collect();
        pts.extend(Self::TRIANGLE.iter().map(|&p| self.to_image(p)));
        pts
    }

    fn intensity(&self, row: f64, col: f64) -> f64 {
        let (x, y) = self.to_local((row, col));
        let (ax, ay) = Self::ELLIPSE_AXES;
        let q = ((x / ax).powi(2) + (y / ay).powi(2)).sqrt();
        // outline roughly two pixels wide
        if (q - 1.0).abs() * ax.min(ay) * self.unit < 1.0 {
            return 0.9;
        }
        if in_triangle((x, y), Self::TRIANGLE) {
            return 0.55;
        }
        0.2
    }
}

fn in_triangle(p: (f64, f64), [a, b, c]: [(f64, f64); 3]) -> bool {
    let cross = |o: (f64, f64), u: (f64, f64), v: (f64, f64)| {
        (u.0 - o.0) * (v.1 - o.1) - (u.1 - o.1) * (v.0 - o.0)
    };
    let (d1, d2, d3) = (cross(a, b, p), cross(b, c, p), cross(c, a, p));
    let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(neg && pos)
}

fn quantize_pixel(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * PGM_MAX).round() / PGM_MAX
}

fn quantize_coord(v: f64) -> f64 {
    (v * COORD_GRID).round() / COORD_GRID
}

fn generate_sample(id: String, h: usize, w: usize, n_landmarks: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let base = h.min(w) as f64 / 64.0;
    let noise = Normal::new(0.0, NOISE_SD).expect("valid normal");
    for _ in 0..MAX_GEN_ATTEMPTS {
        let fig = Figure {
            row: rng.gen_range(0.3..0.7) * h as f64,
            col: rng.gen_range(0.3..0.7) * w as f64,
            unit: base * rng.gen_range(0.8..1.2),
            angle: rng.gen_range(-30f64..30.0).to_radians(),
        };
        let coords: Vec<(f64, f64)> = Figure::local_landmarks()[..n_landmarks]
            .iter()
            .map(|&p| {
                let (r, c) = fig.to_image(p);
                (quantize_coord(r), quantize_coord(c))
            })
            .collect();
        let fits = fig
            .outline_points()
            .iter()
            .all(|&(r, c)| r >= 0.0 && c >= 0.0 && r <= (h - 1) as f64 && c <= (w - 1) as f64);
        if !fits || !within_margin(&coords, h, w) {
            continue;
        }
        let mut pixels = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let v = fig.intensity(r as f64, c as f64) + noise.sample(rng);
                pixels.push(quantize_pixel(v));
            }
        }
        let names = LANDMARK_NAMES[..n_landmarks].iter().map(|s| s.to_string()).collect();
        return Ok(Sample {
            id,
            image: Tensor::new(vec![1, h, w], pixels)?,
            landmarks: LandmarkSet::new(coords, names)?,
        });
    }
    Err(Error::config(format!(
        "could not fit a figure with a {BORDER_MARGIN}-pixel landmark margin into {h} x {w} after {MAX_GEN_ATTEMPTS} attempts"
    )))
}

/// Generates `n` samples and splits them 60/20/20 into train, validation and test.
pub fn gen_dataset(n: usize, h: usize, w: usize, n_landmarks: usize, seed: u64) -> Result<DatasetSplit> {
    if n < 10 {
        return Err(Error::Validation(format!("dataset needs n >= 10, got {n}")));
    }
    if n_landmarks == 0 || n_landmarks > LANDMARK_NAMES.len() {
        return Err(Error::Validation(format!(
            "landmark count must be in 1..={}, got {n_landmarks}",
            LANDMARK_NAMES.len()
        )));
    }
    if h < 16 || w < 16 {
        return Err(Error::Validation(format!("image size {h} x {w} is below 16 x 16")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| generate_sample(format!("s{i:05}"), h, w, n_landmarks, &mut rng))
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = n * 6 / 10;
    let n_val = n * 2 / 10;
    let mut parts = [
        order[..n_train].to_vec(),
        order[n_train..n_train + n_val].to_vec(),
        order[n_train + n_val..].to_vec(),
    ];
    parts.iter_mut().for_each(|p| p.sort_unstable());
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let ids = |idx: &[usize]| idx.iter().map(|&i| samples[i].id.clone()).collect::<Vec<_>>();
    let meta = DatasetMeta {
        n,
        height: h,
        width: w,
        landmarks: n_landmarks,
        seed,
        landmark_names: LANDMARK_NAMES[..n_landmarks].iter().map(|s| s.to_string()).collect(),
        train: ids(&parts[0]),
        validation: ids(&parts[1]),
        test: ids(&parts[2]),
    };
    Ok(DatasetSplit {
        meta,
        train: pick(&parts[0]),
        validation: pick(&parts[1]),
        test: pick(&parts[2]),
    })
}

/// One draw of the augmentation transforms. [`AugmentParams::neutral`] is
/// the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    /// Translation in pixels, `(rows, cols)`.
    pub shift: (f64, f64),
    pub scale: f64,
    pub angle_deg: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl AugmentParams {
    pub fn neutral() -> Self {
        Self {
            flip: false,
            shift: (0.0, 0.0),
            scale: 1.0,
            angle_deg: 0.0,
            brightness: 0.0,
            contrast: 1.0,
        }
    }

    pub fn draw(h: usize, w: usize, rng: &mut impl Rng) -> Self {
        Self {
            flip: rng.gen_bool(0.5),
            shift: (
                rng.gen_range(-0.1..=0.1) * h as f64,
                rng.gen_range(-0.1..=0.1) * w as f64,
            ),
            scale: rng.gen_range(0.9..=1.1),
            angle_deg: rng.gen_range(-15.0..=15.0),
            brightness: rng.gen_range(-0.1..=0.1),
            contrast: rng.gen_range(0.9..=1.1),
        }
    }

    fn is_rigid_shift(&self) -> bool {
        self.scale == 1.0 && self.angle_deg == 0.0
    }

    /// Maps a source `(row, col)` to its augmented position.
    pub fn map_point(&self, (r, c): (f64, f64), h: usize, w: usize) -> (f64, f64) {
        let (r, mut c) = if self.is_rigid_shift() {
            (r + self.shift.0, c + self.shift.1)
        } else {
            let (cr, cc) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
            let (s, co) = self.angle_deg.to_radians().sin_cos();
            let (dr, dc) = (r - cr, c - cc);
            (
                cr + self.scale * (co * dr + s * dc) + self.shift.0,
                cc + self.scale * (-s * dr + co * dc) + self.shift.1,
            )
        };
        if self.flip {
            c = (w - 1) as f64 - c;
        }
        (r, c)
    }

    /// Inverse of [`map_point`](Self::map_point).
    fn unmap_point(&self, (r, c): (f64, f64), h: usize, w: usize) -> (f64, f64) {
        let c = if self.flip { (w - 1) as f64 - c } else { c };
        let (r, c) = (r - self.shift.0, c - self.shift.1);
        if self.is_rigid_shift() {
            return (r, c);
        }
        let (cr, cc) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
        let (s, co) = self.angle_deg.to_radians().sin_cos();
        let (dr, dc) = ((r - cr) / self.scale, (c - cc) / self.scale);
        (cr + co * dr - s * dc, cc + s * dr + co * dc)
    }

    /// Applies the transform; `None` when a landmark would leave the margin.
    pub fn apply(&self, sample: &Sample) -> Option<Sample> {
        let (h, w) = (sample.height(), sample.width());
        let coords: Vec<_> = sample
            .landmarks
            .coords
            .iter()
            .map(|&p| self.map_point(p, h, w))
            .collect();
        if !within_margin(&coords, h, w) {
            return None;
        }
        let src = sample.image.data();
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let (sr, sc) = self.unmap_point((r as f64, c as f64), h, w);
                let (sr, sc) = (sr.round(), sc.round());
                let v = if sr >= 0.0 && sc >= 0.0 && sr < h as f64 && sc < w as f64 {
                    src[sr as usize * w + sc as usize]
                } else {
                    0.0
                };
                out.push((v * self.contrast + self.brightness).clamp(0.0, 1.0));
            }
        }
        Some(Sample {
            id: sample.id.clone(),
            image: Tensor::new(vec![1, h, w], out).ok()?,
            landmarks: LandmarkSet {
                coords,
                names: sample.landmarks.names.clone(),
            },
        })
    }
}

/// Random flip, shift, scale, rotation, brightness and contrast. Draws that
/// push a landmark into the border margin are redrawn; after 10 failures the
/// sample is returned unchanged.
pub fn augment(sample: &Sample, rng: &mut impl Rng) -> Sample {
    for _ in 0..MAX_AUGMENT_ATTEMPTS {
        let params = AugmentParams::draw(sample.height(), sample.width(), rng);
        if let Some(s) = params.apply(sample) {
            return s;
        }
    }
    sample.clone()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

/// Writes `meta.json`, `images/<id>.pgm` and `landmarks.csv` under `dir`.
pub fn save_dataset(split: &DatasetSplit, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let meta = serde_json::to_string_pretty(&split.meta).expect("meta serialises");
    write_file(&dir.join("meta.json"), meta.as_bytes())?;

    let mut all: Vec<&Sample> = split.train.iter().chain(&split.validation).chain(&split.test).collect();
    all.sort_by(|a, b| a.id.cmp(&b.id));
    for s in &all {
        let (h, w) = (s.height(), s.width());
        let mut pgm = format!("P5\n{w} {h}\n65535\n").into_bytes();
        for &v in s.image.data() {
            let q = (v * PGM_MAX).round() as u16;
            pgm.extend_from_slice(&q.to_be_bytes());
        }
        write_file(&images.join(format!("{}.pgm", s.id)), &pgm)?;
    }
    write_csv(
        &dir.join("landmarks.csv"),
        &["id", "landmark_index", "row", "col"],
        all.iter()
            .flat_map(|s| s.landmarks.coords.iter().enumerate().map(|(i, &(r, c))| (s.id.as_str(), i, r, c))),
    )
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses a binary 16-bit PGM into `[0, 1]` values.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = read_file(path)?;
    let mut pos = 0usize;
    let mut token = |what: &str| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, start as u64, format!("missing {what}")));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token("magic")?;
    if magic != "P5" {
        return Err(Error::format(path, 0, format!("expected P5 magic, found {magic:?}")));
    }
    let mut number = |what: &str| -> Result<usize> {
        let t = token(what)?;
        t.parse().map_err(|_| Error::format(path, 0, format!("bad {what} {t:?}")))
    };
    let w = number("width")?;
    let h = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 65535 {
        return Err(Error::format(path, pos as u64, format!("expected maxval 65535, found {maxval}")));
    }
    let data_start = pos + 1;
    let need = data_start + 2 * w * h;
    if bytes.len() < need {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated pixel data: {} of {} bytes", bytes.len().saturating_sub(data_start), 2 * w * h),
        ));
    }
    let pixels = bytes[data_start..need]
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / PGM_MAX)
        .collect();
    Ok((h, w, pixels))
}

fn parse_landmarks(path: &Path) -> Result<BTreeMap<String, Vec<(usize, f64, f64)>>> {
    let mut out: BTreeMap<String, Vec<(usize, f64, f64)>> = BTreeMap::new();
    for (at, r) in read_csv(path, &["id", "landmark_index", "row", "col"])? {
        let id: String = field(path, at, &r, 0, "id")?;
        let idx = field(path, at, &r, 1, "landmark_index")?;
        let row = field(path, at, &r, 2, "row")?;
        let col = field(path, at, &r, 3, "col")?;
        out.entry(id).or_default().push((idx, row, col));
    }
    Ok(out)
}

/// Reads a directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<DatasetSplit> {
    let meta_path = dir.join("meta.json");
    let meta: DatasetMeta = serde_json::from_slice(&read_file(&meta_path)?).map_err(|e| {
        Error::format(&meta_path, e.column() as u64, e.to_string())
    })?;
    let lm_path = dir.join("landmarks.csv");
    let mut landmarks = parse_landmarks(&lm_path)?;
    let mut load = |ids: &[String]| -> Result<Vec<Sample>> {
        ids.iter()
            .map(|id| {
                let img_path = dir.join("images").join(format!("{id}.pgm"));
                let (h, w, pixels) = read_pgm(&img_path)?;
                if (h, w) != (meta.height, meta.width) {
                    return Err(Error::format(
                        &img_path,
                        0,
                        format!("image is {h} x {w}, meta says {} x {}", meta.height, meta.width),
                    ));
                }
                let mut rows = landmarks.remove(id).ok_or_else(|| {
                    Error::format(&lm_path, 0, format!("no landmarks for sample {id}"))
                })?;
                rows.sort_by_key(|r| r.0);
                if rows.len() != meta.landmarks || rows.iter().enumerate().any(|(i, r)| r.0 != i) {
                    return Err(Error::format(
                        &lm_path,
                        0,
                        format!("sample {id} needs landmark indices 0..{}", meta.landmarks),
                    ));
                }
                let set = LandmarkSet::new(
                    rows.iter().map(|r| (r.1, r.2)).collect(),
                    meta.landmark_names.clone(),
                )?;
                set.check_bounds(h, w).map_err(|e| {
                    Error::Validation(format!("{}: sample {id}: {e}", lm_path.display()))
                })?;
                Ok(Sample {
                    id: id.clone(),
                    image: Tensor::new(vec![1, h, w], pixels)?,
                    landmarks: set,
                })
            })
            .collect()
    };
    let train = load(&meta.train)?;
    let validation = load(&meta.validation)?;
    let test = load(&meta.test)?;
    let split = DatasetSplit {
        meta,
        train,
        validation,
        test,
    };
    split.check_disjoint()?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSplit {
        gen_dataset(10, 32, 32, 4, 7).unwrap()
    }

    #[test]
    fn split_sizes() {
        let d = gen_dataset(400, 32, 32, 4, 1).unwrap();
        assert_eq!((d.train.len(), d.validation.len(), d.test.len()), (240, 80, 80));
        d.check_disjoint().unwrap();
        assert!(matches!(gen_dataset(5, 32, 32, 4, 1), Err(Error::Validation(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(small(), small());
        assert_ne!(small().train[0].image, gen_dataset(10, 32, 32, 4, 8).unwrap().train[0].image);
    }

    #[test]
    fn margin_holds_over_many_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..1000 {
            let s = generate_sample(format!("m{i}"), 64, 64, 9, &mut rng).unwrap();
            assert!(s.respects_margin());
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn neutral_augmentation_is_identity() {
        let s = &small().train[0];
        assert_eq!(&AugmentParams::neutral().apply(s).unwrap(), s);
    }

    #[test]
    fn double_flip_restores_landmarks() {
        let s = &small().train[1];
        let flip = AugmentParams {
            flip: true,
            ..AugmentParams::neutral()
        };
        let once = flip.apply(s).unwrap();
        assert_ne!(once.landmarks, s.landmarks);
        let twice = flip.apply(&once).unwrap();
        assert_eq!(twice.landmarks.coords, s.landmarks.coords);
        assert_eq!(twice.image, s.image);
    }

    #[test]
    fn pure_translation_shifts_landmarks_exactly() {
        let d = gen_dataset(20, 64, 64, 4, 11).unwrap();
        let p = AugmentParams {
            shift: (5.0, -3.0),
            ..AugmentParams::neutral()
        };
        let mut checked = 0;
        for s in &d.train {
            if let Some(t) = p.apply(s) {
                for (a, b) in s.landmarks.coords.iter().zip(&t.landmarks.coords) {
                    assert_eq!((b.0 - a.0, b.1 - a.1), (5.0, -3.0));
                }
                assert_eq!(t.image.data()[10 * 64 + 7], s.image.data()[5 * 64 + 10]);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn augmentation_keeps_invariants() {
        let d = small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            for s in &d.train {
                let a = augment(s, &mut rng);
                assert!(a.respects_margin());
                assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
                assert_eq!(a, augment(s, &mut rng2));
            }
        }
    }

    #[test]
    fn augmented_landmarks_follow_the_image() {
        // a single bright pixel moved by a non-trivial transform must land
        // where the landmark map sends it (up to nearest-neighbour rounding)
        let mut pixels = vec![0.0; 32 * 32];
        pixels[12 * 32 + 19] = 1.0;
        let s = Sample {
            id: "p".into(),
            image: Tensor::new(vec![1, 32, 32], pixels).unwrap(),
            landmarks: LandmarkSet::unnamed(vec![(12.0, 19.0)]).unwrap(),
        };
        let p = AugmentParams {
            flip: true,
            shift: (1.5, -2.0),
            scale: 1.05,
            angle_deg: 9.0,
            brightness: 0.0,
            contrast: 1.0,
        };
        let t = p.apply(&s).unwrap();
        let (lr, lc) = t.landmarks.coords[0];
        let bright: Vec<_> = (0..32 * 32).filter(|&i| t.image.data()[i] > 0.5).collect();
        assert!(!bright.is_empty());
        for i in bright {
            let (r, c) = ((i / 32) as f64, (i % 32) as f64);
            assert!((r - lr).abs() <= 1.5 && (c - lc).abs() <= 1.5);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
        for (a, b) in back.train.iter().zip(&d.train) {
            assert!(a.image.bitwise_eq(&b.image));
        }
    }

    #[test]
    fn truncated_image_is_a_format_error() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let img = dir.path().join("images").join(format!("{}.pgm", d.train[0].id));
        let bytes = fs::read(&img).unwrap();
        fs::write(&img, &bytes[..bytes.len() / 2]).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Format { file, offset, .. }) => {
                assert_eq!(file, img);
                assert_eq!(offset, (bytes.len() / 2) as u64);
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_bounds_landmark_is_rejected() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let csv_path = dir.path().join("landmarks.csv");
        let text = fs::read_to_string(&csv_path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let f: Vec<&str> = lines[1].split(',').collect();
        lines[1] = format!("{},{},{},{}", f[0], f[1], 40.0, f[3]);
        fs::write(&csv_path, lines.join("\n") + "\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Validation(_))));
    }
}
