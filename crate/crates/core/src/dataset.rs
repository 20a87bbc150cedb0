//! Synthetic cross-camera re-identification data.
//!
//! Each identity is a stack of four colored geometric patches at fixed body
//! zones (head, torso, legs, feet). The torso patch gets a fully
//! identity-specific color and shape, the remaining zones draw from small
//! palettes, so no single outer patch identifies a person but their
//! combination does. Camera 0 renders everything; higher cameras shift hue
//! slightly and blank the designated occlusion region (the torso by
//! default), which removes the most discriminative patch from one view.
//!
//! The first half of the identities (rounded up) forms the training split;
//! the rest are evaluation identities whose camera-0 images become queries
//! and whose remaining images become the gallery.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Background gray level for generated images.
pub const BACKGROUND: f64 = 0.12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

/// One image with its retrieval metadata.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `3 x H x W`, values in `[0, 1]`.
    pub image: Tensor,
    pub identity: usize,
    pub camera: usize,
    pub split: Split,
}

/// Axis-aligned pixel rectangle, rows `top..top+height`, cols
/// `left..left+width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        i >= self.top && i < self.top + self.height && j >= self.left && j < self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// Generator parameters.
#[derive(Debug, Clone)]
pub struct ToySpec {
    pub num_identities: usize,
    pub images_per_identity_per_camera: usize,
    pub num_cameras: usize,
    pub height: usize,
    pub width: usize,
    pub noise_std: f64,
    /// Region blanked on every camera other than 0.
    pub occlusion: Rect,
    pub seed: u64,
}

impl ToySpec {
    pub fn with_defaults() -> ToySpec {
        let (height, width) = (64, 32);
        ToySpec {
            num_identities: 24,
            images_per_identity_per_camera: 4,
            num_cameras: 2,
            height,
            width,
            noise_std: 0.05,
            occlusion: body_zones(height, width)[1],
            seed: 0,
        }
    }

    /// Identity count of the training split (the rest evaluate).
    pub fn train_identities(&self) -> usize {
        self.num_identities - self.num_identities / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::Config(
                "need at least 2 identities (train and eval splits)".into(),
            ));
        }
        if self.images_per_identity_per_camera == 0 {
            return Err(Error::Config("images_per_identity_per_camera must be positive".into()));
        }
        if self.num_cameras < 2 {
            return Err(Error::Config(
                "cross-camera data needs at least 2 cameras".into(),
            ));
        }
        if self.height < 16 || self.width < 8 {
            return Err(Error::Config(format!(
                "image size {}x{} too small for the patch layout (min 16x8)",
                self.height, self.width
            )));
        }
        let occ = &self.occlusion;
        if occ.area() == 0
            || occ.top + occ.height > self.height
            || occ.left + occ.width > self.width
        {
            return Err(Error::Config(format!(
                "occlusion region {occ:?} outside {}x{} image bounds",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// The four fixed body zones, top to bottom.
pub fn body_zones(height: usize, width: usize) -> [Rect; 4] {
    let rows = |a: f64, b: f64| {
        let top = (a * height as f64) as usize;
        let bot = ((b * height as f64) as usize).max(top + 1).min(height);
        (top, bot - top)
    };
    let left = width / 4;
    let w = width - 2 * (width / 4);
    let zone = |a, b| {
        let (top, h) = rows(a, b);
        Rect {
            top,
            left,
            height: h,
            width: w,
        }
    };
    [
        zone(0.05, 0.20),
        zone(0.28, 0.52),
        zone(0.58, 0.80),
        zone(0.85, 0.97),
    ]
}

#[derive(Debug, Clone, Copy)]
enum PatchShape {
    Fill,
    Disc,
    Ring,
    Cross,
    Stripes,
}

const OUTER_SHAPES: [PatchShape; 3] = [PatchShape::Fill, PatchShape::Disc, PatchShape::Stripes];
const TORSO_SHAPES: [PatchShape; 5] = [
    PatchShape::Fill,
    PatchShape::Disc,
    PatchShape::Ring,
    PatchShape::Cross,
    PatchShape::Stripes,
];

// small per-zone palettes for head / legs / feet
const PALETTES: [[[f64; 3]; 3]; 3] = [
    [[0.9, 0.3, 0.2], [0.2, 0.5, 0.9], [0.8, 0.8, 0.2]],
    [[0.3, 0.8, 0.3], [0.7, 0.3, 0.8], [0.9, 0.6, 0.2]],
    [[0.6, 0.6, 0.9], [0.9, 0.4, 0.6], [0.4, 0.8, 0.8]],
];

#[derive(Debug, Clone)]
struct IdentityStyle {
    colors: [[f64; 3]; 4],
    shapes: [PatchShape; 4],
}

fn keyed_rng(seed: u64, a: u64, b: u64, c: u64) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&a.to_le_bytes());
    key[16..24].copy_from_slice(&b.to_le_bytes());
    key[24..32].copy_from_slice(&c.to_le_bytes());
    ChaCha20Rng::from_seed(key)
}

fn identity_style(seed: u64, identity: usize) -> IdentityStyle {
    let mut rng = keyed_rng(seed, u64::MAX, identity as u64, 0);
    let torso_color = [
        rng.gen_range(0.25..1.0),
        rng.gen_range(0.25..1.0),
        rng.gen_range(0.25..1.0),
    ];
    let torso_shape = TORSO_SHAPES[rng.gen_range(0..TORSO_SHAPES.len())];
    let mut colors = [[0.0; 3]; 4];
    let mut shapes = [PatchShape::Fill; 4];
    colors[1] = torso_color;
    shapes[1] = torso_shape;
    for (zone, palette) in [0usize, 2, 3].into_iter().zip(PALETTES.iter()) {
        colors[zone] = palette[rng.gen_range(0..palette.len())];
        shapes[zone] = OUTER_SHAPES[rng.gen_range(0..OUTER_SHAPES.len())];
    }
    IdentityStyle { colors, shapes }
}

fn draw_patch(image: &mut Tensor, zone: &Rect, shape: PatchShape, color: [f64; 3]) {
    let (ch, cw) = (
        zone.top as f64 + zone.height as f64 / 2.0,
        zone.left as f64 + zone.width as f64 / 2.0,
    );
    let (rh, rw) = (zone.height as f64 / 2.0, zone.width as f64 / 2.0);
    for i in zone.top..zone.top + zone.height {
        for j in zone.left..zone.left + zone.width {
            let dy = (i as f64 + 0.5 - ch) / rh;
            let dx = (j as f64 + 0.5 - cw) / rw;
            let inside = match shape {
                PatchShape::Fill => true,
                PatchShape::Disc => dy * dy + dx * dx <= 1.0,
                PatchShape::Ring => {
                    let r2 = dy * dy + dx * dx;
                    (0.35..=1.0).contains(&r2)
                }
                PatchShape::Cross => dy.abs() <= 0.34 || dx.abs() <= 0.34,
                PatchShape::Stripes => (i - zone.top) % 4 < 2,
            };
            if inside {
                for (k, &c) in color.iter().enumerate() {
                    *image.at3_mut(k, i, j) = c;
                }
            }
        }
    }
}

fn render_identity(spec: &ToySpec, style: &IdentityStyle) -> Tensor {
    let mut image = Tensor::filled(&[3, spec.height, spec.width], BACKGROUND);
    let zones = body_zones(spec.height, spec.width);
    for (zone, (&shape, &color)) in zones.iter().zip(style.shapes.iter().zip(style.colors.iter()))
    {
        draw_patch(&mut image, zone, shape, color);
    }
    image
}

/// Slight channel-mixing hue rotation; camera 0 is the reference view.
pub fn hue_shift(image: &Tensor, camera: usize) -> Tensor {
    if camera == 0 {
        return image.clone();
    }
    let alpha = 0.1 * camera as f64;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = image.clone();
    for i in 0..h {
        for j in 0..w {
            let r = image.at3(0, i, j);
            let g = image.at3(1, i, j);
            let b = image.at3(2, i, j);
            *out.at3_mut(0, i, j) = (1.0 - alpha) * r + alpha * g;
            *out.at3_mut(1, i, j) = (1.0 - alpha) * g + alpha * b;
            *out.at3_mut(2, i, j) = (1.0 - alpha) * b + alpha * r;
        }
    }
    out
}

/// Fills a region with the background color.
pub fn occlude(image: &Tensor, region: &Rect) -> Tensor {
    let mut out = image.clone();
    for i in region.top..region.top + region.height {
        for j in region.left..region.left + region.width {
            for k in 0..3 {
                *out.at3_mut(k, i, j) = BACKGROUND;
            }
        }
    }
    out
}

/// Deterministically generates the full train/query/gallery sample list.
pub fn generate_toy(spec: &ToySpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let n_train = spec.train_identities();
    let mut samples = Vec::new();
    for identity in 0..spec.num_identities {
        let style = identity_style(spec.seed, identity);
        let base = render_identity(spec, &style);
        for camera in 0..spec.num_cameras {
            let mut view = hue_shift(&base, camera);
            if camera != 0 {
                view = occlude(&view, &spec.occlusion);
            }
            for n in 0..spec.images_per_identity_per_camera {
                let mut image = view.clone();
                if spec.noise_std > 0.0 {
                    let mut rng =
                        keyed_rng(spec.seed, identity as u64, camera as u64, n as u64);
                    let normal = Normal::new(0.0, spec.noise_std)
                        .map_err(|e| Error::Config(format!("noise_std: {e}")))?;
                    for v in image.data_mut() {
                        *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
                    }
                }
                let split = if identity < n_train {
                    Split::Train
                } else if camera == 0 {
                    Split::Query
                } else {
                    Split::Gallery
                };
                samples.push(Sample {
                    image,
                    identity,
                    camera,
                    split,
                });
            }
        }
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// PPM (P6) import/export and the on-disk directory contract
// ---------------------------------------------------------------------------

/// Writes an RGB image in `[0, 1]` as binary PPM (P6), 8 bits per channel.
pub fn write_ppm(image: &Tensor, path: &Path) -> Result<()> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::shape("write_ppm", format!("{:?}", image.shape())));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut bytes = Vec::with_capacity(32 + 3 * h * w);
    bytes.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    for i in 0..h {
        for j in 0..w {
            for k in 0..3 {
                let v = (image.at3(k, i, j).clamp(0.0, 1.0) * 255.0).round() as u8;
                bytes.push(v);
            }
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary PPM (P6) with maxval 255 into a `[0, 1]` tensor.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(path, "truncated ppm header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P6" {
        return Err(Error::parse(path, "not a binary ppm (missing P6 magic)"));
    }
    let w: usize = token(&bytes)?
        .parse()
        .map_err(|e| Error::parse(path, format!("bad width: {e}")))?;
    let h: usize = token(&bytes)?
        .parse()
        .map_err(|e| Error::parse(path, format!("bad height: {e}")))?;
    let maxval = token(&bytes)?;
    if maxval != "255" {
        return Err(Error::parse(path, format!("unsupported maxval {maxval}")));
    }
    pos += 1; // exactly one whitespace byte after the header
    let expected = 3 * h * w;
    if bytes.len() < pos + expected {
        return Err(Error::parse(
            path,
            format!("pixel payload too short: {} < {expected}", bytes.len() - pos),
        ));
    }
    let mut image = Tensor::zeros(&[3, h, w]);
    for i in 0..h {
        for j in 0..w {
            for k in 0..3 {
                let byte = bytes[pos + (i * w + j) * 3 + k];
                *image.at3_mut(k, i, j) = byte as f64 / 255.0;
            }
        }
    }
    Ok(image)
}

fn sample_filename(sample: &Sample, n: usize) -> String {
    format!("id_{}_cam_{}_{}.ppm", sample.identity, sample.camera, n)
}

/// Parses `id_<identity>_cam_<camera>_<n>.ppm`.
fn parse_filename(path: &Path) -> Result<(usize, usize)> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::parse(path, "non-utf8 filename"))?;
    let parts: Vec<&str> = stem.split('_').collect();
    let fail = || Error::parse(path, "expected filename id_<identity>_cam_<camera>_<n>.ppm");
    if parts.len() != 5 || parts[0] != "id" || parts[2] != "cam" {
        return Err(fail());
    }
    let identity = parts[1].parse().map_err(|_| fail())?;
    let camera = parts[3].parse().map_err(|_| fail())?;
    let _: usize = parts[4].parse().map_err(|_| fail())?;
    Ok((identity, camera))
}

/// Writes samples under `dir/{train,query,gallery}/` with the filename
/// contract; creates the directories.
pub fn export_dir(samples: &[Sample], dir: &Path) -> Result<()> {
    for split in [Split::Train, Split::Query, Split::Gallery] {
        std::fs::create_dir_all(dir.join(split.dir_name()))
            .map_err(|e| Error::io(dir.join(split.dir_name()), e))?;
    }
    // running index per (identity, camera, split)
    let mut counters: std::collections::BTreeMap<(usize, usize, &str), usize> =
        std::collections::BTreeMap::new();
    for sample in samples {
        let key = (sample.identity, sample.camera, sample.split.dir_name());
        let n = counters.entry(key).or_insert(0);
        let path = dir
            .join(sample.split.dir_name())
            .join(sample_filename(sample, *n));
        *n += 1;
        write_ppm(&sample.image, &path)?;
    }
    Ok(())
}

/// Loads a directory written per the export contract. Every split directory
/// must exist and be non-empty.
pub fn load_dir(dir: &Path) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for split in [Split::Train, Split::Query, Split::Gallery] {
        let split_dir = dir.join(split.dir_name());
        if !split_dir.is_dir() {
            return Err(Error::Config(format!(
                "missing split directory {}",
                split_dir.display()
            )));
        }
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&split_dir)
            .map_err(|e| Error::io(&split_dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().map_or(false, |ext| ext == "ppm"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Config(format!(
                "split directory {} contains no .ppm files",
                split_dir.display()
            )));
        }
        for path in paths {
            let (identity, camera) = parse_filename(&path)?;
            let image = read_ppm(&path)?;
            samples.push(Sample {
                image,
                identity,
                camera,
                split,
            });
        }
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Mirrors the width axis.
pub fn flip_horizontal(image: &Tensor) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = Tensor::zeros(image.shape());
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                *out.at3_mut(k, i, j) = image.at3(k, i, w - 1 - j);
            }
        }
    }
    out
}

/// Samples an erase rectangle with area ratio in `[0.02, 0.4]` and aspect
/// ratio in `[0.3, 3.33]`; gives up after 100 attempts that do not fit.
pub fn sample_erase_rect(height: usize, width: usize, rng: &mut impl Rng) -> Option<Rect> {
    let total = (height * width) as f64;
    for _ in 0..100 {
        let area = rng.gen_range(0.02..0.4) * total;
        let aspect = rng.gen_range(0.3..3.33);
        let eh = (area * aspect).sqrt().round() as usize;
        let ew = (area / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh > height || ew > width {
            continue;
        }
        let ratio = (eh * ew) as f64 / total;
        if !(0.02..=0.4).contains(&ratio) {
            continue;
        }
        let top = rng.gen_range(0..=height - eh);
        let left = rng.gen_range(0..=width - ew);
        return Some(Rect {
            top,
            left,
            height: eh,
            width: ew,
        });
    }
    None
}

/// Replaces the rectangle with uniform random values in `[0, 1)`.
pub fn apply_erase(image: &Tensor, rect: &Rect, rng: &mut impl Rng) -> Tensor {
    let c = image.shape()[0];
    let mut out = image.clone();
    for i in rect.top..rect.top + rect.height {
        for j in rect.left..rect.left + rect.width {
            for k in 0..c {
                *out.at3_mut(k, i, j) = rng.gen_range(0.0..1.0);
            }
        }
    }
    out
}

/// Deterministic core of [`augment`] with the random choices made explicit.
pub fn augment_with(
    image: &Tensor,
    flip: bool,
    erase: Option<&Rect>,
    rng: &mut impl Rng,
) -> Tensor {
    let flipped = if flip {
        flip_horizontal(image)
    } else {
        image.clone()
    };
    match erase {
        Some(rect) => apply_erase(&flipped, rect, rng),
        None => flipped,
    }
}

/// Training augmentation: horizontal flip with probability 0.5, then random
/// erasing with probability 0.5.
pub fn augment(image: &Tensor, rng: &mut impl Rng) -> Tensor {
    let flip = rng.gen_bool(0.5);
    let erase = if rng.gen_bool(0.5) {
        sample_erase_rect(image.shape()[1], image.shape()[2], rng)
    } else {
        None
    };
    augment_with(image, flip, erase.as_ref(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> ToySpec {
        let (height, width) = (32, 16);
        ToySpec {
            num_identities: 6,
            images_per_identity_per_camera: 2,
            num_cameras: 2,
            height,
            width,
            noise_std: 0.0,
            occlusion: body_zones(height, width)[1],
            seed: 3,
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = ToySpec {
            noise_std: 0.07,
            ..small_spec()
        };
        let a = generate_toy(&spec).unwrap();
        let b = generate_toy(&spec).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.identity, y.identity);
        }
    }

    #[test]
    fn noiseless_same_identity_camera_images_are_identical() {
        let samples = generate_toy(&small_spec()).unwrap();
        let same: Vec<&Sample> = samples
            .iter()
            .filter(|s| s.identity == 0 && s.camera == 0)
            .collect();
        assert_eq!(same.len(), 2);
        assert_eq!(same[0].image, same[1].image);
    }

    #[test]
    fn camera_b_is_exactly_hue_shift_plus_occlusion() {
        let spec = small_spec();
        let samples = generate_toy(&spec).unwrap();
        let cam_a = samples
            .iter()
            .find(|s| s.identity == 1 && s.camera == 0)
            .unwrap();
        let cam_b = samples
            .iter()
            .find(|s| s.identity == 1 && s.camera == 1)
            .unwrap();
        let expected = occlude(&hue_shift(&cam_a.image, 1), &spec.occlusion);
        assert_eq!(cam_b.image, expected);
    }

    #[test]
    fn noisy_pixels_stay_in_unit_range() {
        let spec = ToySpec {
            num_identities: 4,
            images_per_identity_per_camera: 8,
            noise_std: 0.1,
            ..small_spec()
        };
        let samples = generate_toy(&spec).unwrap();
        assert!(samples.len() >= 50);
        for s in &samples {
            for &v in s.image.data() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_cross_camera() {
        let samples = generate_toy(&small_spec()).unwrap();
        let train: std::collections::BTreeSet<usize> = samples
            .iter()
            .filter(|s| s.split == Split::Train)
            .map(|s| s.identity)
            .collect();
        let eval: std::collections::BTreeSet<usize> = samples
            .iter()
            .filter(|s| s.split != Split::Train)
            .map(|s| s.identity)
            .collect();
        assert!(train.is_disjoint(&eval));
        assert!(!train.is_empty() && !eval.is_empty());

        // every query identity has a gallery image from another camera
        for q in samples.iter().filter(|s| s.split == Split::Query) {
            assert!(samples.iter().any(|g| g.split == Split::Gallery
                && g.identity == q.identity
                && g.camera != q.camera));
        }
    }

    #[test]
    fn spec_validation_rejects_bad_occlusion() {
        let mut spec = small_spec();
        spec.occlusion = Rect {
            top: 30,
            left: 0,
            height: 10,
            width: 4,
        };
        assert!(matches!(generate_toy(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn ppm_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let image = Tensor::from_fn(&[3, 8, 5], |i| ((i * 13 % 97) as f64) / 96.0);
        write_ppm(&image, &path).unwrap();
        let loaded = read_ppm(&path).unwrap();
        assert_eq!(loaded.shape(), image.shape());
        assert!(image.max_abs_diff(&loaded) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn export_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_toy(&small_spec()).unwrap();
        export_dir(&samples, dir.path()).unwrap();
        let loaded = load_dir(dir.path()).unwrap();
        assert_eq!(loaded.len(), samples.len());
        // same multiset of (identity, camera, split); per-split filename sort
        // may reorder within a split
        let mut want: Vec<(usize, usize, &str)> = samples
            .iter()
            .map(|s| (s.identity, s.camera, s.split.dir_name()))
            .collect();
        let mut got: Vec<(usize, usize, &str)> = loaded
            .iter()
            .map(|s| (s.identity, s.camera, s.split.dir_name()))
            .collect();
        want.sort();
        got.sort();
        assert_eq!(want, got);
        for s in &loaded {
            let original = samples
                .iter()
                .find(|o| {
                    o.identity == s.identity && o.camera == s.camera && o.split == s.split
                })
                .unwrap();
            assert!(original.image.max_abs_diff(&s.image) <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn filename_contract() {
        let path = Path::new("id_3_cam_1_0.ppm");
        assert_eq!(parse_filename(path).unwrap(), (3, 1));
        assert!(parse_filename(Path::new("3_1_0.ppm")).is_err());
        assert!(parse_filename(Path::new("id_x_cam_1_0.ppm")).is_err());
    }

    #[test]
    fn missing_query_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_toy(&small_spec()).unwrap();
        export_dir(&samples, dir.path()).unwrap();
        std::fs::remove_dir_all(dir.path().join("query")).unwrap();
        let err = load_dir(dir.path()).unwrap_err();
        assert!(err.to_string().contains("query"), "{err}");
    }

    #[test]
    fn augment_without_flip_or_erase_is_identity() {
        let image = Tensor::from_fn(&[3, 16, 8], |i| (i % 7) as f64 / 7.0);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let out = augment_with(&image, false, None, &mut rng);
        assert_eq!(out, image);
    }

    #[test]
    fn double_flip_is_identity() {
        let image = Tensor::from_fn(&[3, 10, 6], |i| (i as f64).fract());
        assert_eq!(flip_horizontal(&flip_horizontal(&image)), image);
    }

    #[test]
    fn erase_diff_region_audit() {
        let (h, w) = (32, 16);
        let image = Tensor::filled(&[3, h, w], 0.5);
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let mut applied = 0;
        for _ in 0..50 {
            let Some(rect) = sample_erase_rect(h, w, &mut rng) else {
                continue;
            };
            applied += 1;
            let ratio = rect.area() as f64 / (h * w) as f64;
            assert!((0.02..=0.4).contains(&ratio), "area ratio {ratio}");
            let out = apply_erase(&image, &rect, &mut rng);
            for i in 0..h {
                for j in 0..w {
                    let differs = (0..3).any(|k| out.at3(k, i, j) != image.at3(k, i, j));
                    assert_eq!(
                        differs,
                        rect.contains(i, j),
                        "pixel ({i}, {j}) vs rect {rect:?}"
                    );
                }
            }
        }
        assert!(applied > 30);
    }
}
