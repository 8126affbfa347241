//! Procedurally generated person datasets and their on-disk format.
//!
//! A person is a stack of flat shapes (head with a hair cap, torso with
//! optional stripes, two legs, an optional carried box) whose colors and
//! proportions come from an [`IdentityLatent`]. Each dataset has two camera
//! views with fixed illumination gains and color casts; every image adds
//! its own background, horizontal jitter and pixel noise.
//!
//! The `generic` mode replaces persons with a vocabulary of geometric
//! shapes on textured backgrounds and serves as an unrelated source domain.
//!
//! Layout on disk:
//!
//! ```text
//! images/{person:04}_{view}_{idx:02}.png
//! labels.csv        image_file,person_id,camera_id
//! attributes.csv    person_id,a_0,...,a_{K-1}
//! manifest.json     spec, generator version, sha256 per file
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{fnv1a, mix64};
use crate::tensor::Tensor;

pub const GENERATOR_VERSION: &str = "persons-1";

/// Number of attribute predicates [`derive_attributes`] can produce.
pub const NUM_PREDICATES: usize = 16;

pub const PREDICATE_NAMES: [&str; NUM_PREDICATES] = [
    "torso_red",
    "torso_green",
    "torso_blue",
    "torso_bright",
    "legs_red",
    "legs_green",
    "legs_blue",
    "legs_bright",
    "broad_build",
    "slim_build",
    "long_hair",
    "carrying",
    "carrying_warm",
    "striped",
    "high_contrast",
    "torso_saturated",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorMode {
    Persons,
    Generic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub identities: usize,
    pub images_per_view: usize,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub attributes: usize,
    pub noise: f64,
    pub seed: u64,
    pub mode: GeneratorMode,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            identities: 64,
            images_per_view: 4,
            views: 2,
            height: 128,
            width: 64,
            attributes: NUM_PREDICATES,
            noise: 0.04,
            seed: 0,
            mode: GeneratorMode::Persons,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("identities", self.identities),
            ("images_per_view", self.images_per_view),
            ("views", self.views),
            ("height", self.height),
            ("width", self.width),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config { key: format!("dataset.{key}"), reason: "must be >= 1".into() });
            }
        }
        if self.height < 8 || self.width < 4 {
            return Err(Error::Config {
                key: "dataset.height".into(),
                reason: format!("{}x{} is too small to draw a person", self.height, self.width),
            });
        }
        if self.attributes > NUM_PREDICATES {
            return Err(Error::Config {
                key: "dataset.attributes".into(),
                reason: format!("only {NUM_PREDICATES} attribute predicates exist, asked for {}", self.attributes),
            });
        }
        if self.mode == GeneratorMode::Persons && self.attributes == 0 {
            return Err(Error::Config { key: "dataset.attributes".into(), reason: "must be >= 1".into() });
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::Config { key: "dataset.noise".into(), reason: "must lie in [0, 0.5]".into() });
        }
        Ok(())
    }

    pub fn num_images(&self) -> usize {
        self.identities * self.views * self.images_per_view
    }
}

// ── latents and views ──────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityLatent {
    pub torso: [f64; 3],
    pub legs: [f64; 3],
    /// Torso width as a fraction of the image width.
    pub aspect: f64,
    /// Fraction of the head covered by hair.
    pub hair: f64,
    pub carried: bool,
    pub carried_color: [f64; 3],
    pub stripes: bool,
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

impl IdentityLatent {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            torso: random_color(rng),
            legs: random_color(rng),
            aspect: rng.gen_range(0.35..=0.65),
            hair: rng.gen_range(0.15..=0.85),
            carried: rng.gen_bool(0.4),
            carried_color: random_color(rng),
            stripes: rng.gen_bool(0.35),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewModel {
    pub gain: f64,
    pub cast: [f64; 3],
    /// Maximum horizontal offset of the body centre, as a fraction of width.
    pub jitter: f64,
    pub noise: f64,
}

impl ViewModel {
    /// A view that leaves colors untouched and adds no jitter or noise.
    pub fn identity() -> Self {
        Self { gain: 1.0, cast: [1.0; 3], jitter: 0.0, noise: 0.0 }
    }

    /// The dataset's camera views. The first is bright and warm, the second
    /// dim and cool, so the same person looks systematically different.
    pub fn for_dataset(spec: &DatasetSpec) -> Vec<ViewModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(spec.seed ^ 0x7669_6577));
        (0..spec.views)
            .map(|v| {
                let warm = v % 2 == 0;
                let gain = if warm { rng.gen_range(1.05..1.3) } else { rng.gen_range(0.7..0.95) };
                let tilt = rng.gen_range(0.06..0.14);
                let cast = if warm { [1.0 + tilt, 1.0, 1.0 - tilt] } else { [1.0 - tilt, 1.0, 1.0 + tilt] };
                ViewModel { gain, cast, jitter: 0.1, noise: spec.noise }
            })
            .collect()
    }
}

/// The documented attribute predicates, in [`PREDICATE_NAMES`] order,
/// truncated to the first `k`.
pub fn derive_attributes(latent: &IdentityLatent, k: usize) -> Result<Vec<u8>> {
    if k > NUM_PREDICATES {
        return Err(Error::Invalid(format!("{k} attributes requested, only {NUM_PREDICATES} are defined")));
    }
    let dominant = |c: &[f64; 3], i: usize| (0..3).all(|j| j == i || c[i] > c[j]);
    let luma = |c: &[f64; 3]| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
    let mean = |c: &[f64; 3]| (c[0] + c[1] + c[2]) / 3.0;
    let spread = |c: &[f64; 3]| c.iter().copied().fold(f64::MIN, f64::max) - c.iter().copied().fold(f64::MAX, f64::min);
    let l = latent;
    let all = [
        dominant(&l.torso, 0),
        dominant(&l.torso, 1),
        dominant(&l.torso, 2),
        mean(&l.torso) > 0.5,
        dominant(&l.legs, 0),
        dominant(&l.legs, 1),
        dominant(&l.legs, 2),
        mean(&l.legs) > 0.5,
        l.aspect > 0.55,
        l.aspect < 0.45,
        l.hair > 0.5,
        l.carried,
        l.carried && l.carried_color[0] > l.carried_color[2],
        l.stripes,
        (luma(&l.torso) - luma(&l.legs)).abs() > 0.25,
        spread(&l.torso) > 0.5,
    ];
    Ok(all[..k].iter().map(|&b| u8::from(b)).collect())
}

// ── rendering ──────────────────────────────────────────────────────────

/// HWC RGB image with values in `[0, 1]`.
struct Canvas {
    h: usize,
    w: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn fill_rect(&mut self, y0: f64, y1: f64, x0: f64, x1: f64, mut color: impl FnMut(usize, usize) -> [f64; 3]) {
        let ys = (y0 * self.h as f64).round().max(0.0) as usize;
        let ye = ((y1 * self.h as f64).round() as usize).min(self.h);
        let xs = (x0 * self.w as f64).round().max(0.0) as usize;
        let xe = ((x1 * self.w as f64).round() as usize).min(self.w);
        for y in ys..ye {
            for x in xs..xe {
                self.px[y * self.w + x] = color(y, x);
            }
        }
    }

    fn fill_ellipse(&mut self, cy: f64, cx: f64, ry: f64, rx: f64, mut color: impl FnMut(usize, usize) -> [f64; 3]) {
        for y in 0..self.h {
            for x in 0..self.w {
                let dy = ((y as f64 + 0.5) / self.h as f64 - cy) / ry;
                let dx = ((x as f64 + 0.5) / self.w as f64 - cx) / rx;
                if dy * dy + dx * dx <= 1.0 {
                    self.px[y * self.w + x] = color(y, x);
                }
            }
        }
    }
}

const SKIN: [f64; 3] = [0.85, 0.68, 0.55];
const HAIR: [f64; 3] = [0.18, 0.12, 0.08];

fn background(h: usize, w: usize, rng: &mut impl Rng) -> Canvas {
    let base: f64 = rng.gen_range(0.25..0.75);
    let tint = [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)];
    let slope: f64 = rng.gen_range(-0.2..0.2);
    let mut px = Vec::with_capacity(h * w);
    for y in 0..h {
        let v = base + slope * (y as f64 / h as f64 - 0.5);
        for _ in 0..w {
            px.push([v + tint[0], v + tint[1], v + tint[2]]);
        }
    }
    Canvas { h, w, px }
}

fn finish(mut c: Canvas, view: &ViewModel, rng: &mut impl Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(c.h * c.w * 3);
    for p in &mut c.px {
        for ch in 0..3 {
            let noise = if view.noise > 0.0 { view.noise * (rng.gen::<f64>() * 2.0 - 1.0) * 3f64.sqrt() } else { 0.0 };
            let v = (p[ch] * view.gain * view.cast[ch] + noise).clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    out
}

/// Renders one person as 8-bit HWC RGB.
pub fn render_person_u8(latent: &IdentityLatent, view: &ViewModel, h: usize, w: usize, rng: &mut impl Rng) -> Vec<u8> {
    let mut c = background(h, w, rng);
    let cx = 0.5 + if view.jitter > 0.0 { rng.gen_range(-view.jitter..=view.jitter) } else { 0.0 };
    let half = latent.aspect / 2.0;

    // legs, then torso over their tops, then head
    let leg_w = latent.aspect * 0.42;
    c.fill_rect(0.58, 0.96, cx - half + 0.02, cx - half + 0.02 + leg_w, |_, _| latent.legs);
    c.fill_rect(0.58, 0.96, cx + half - 0.02 - leg_w, cx + half - 0.02, |_, _| latent.legs);
    let stripe_period = (h as f64 / 16.0).max(1.0);
    c.fill_rect(0.24, 0.6, cx - half, cx + half, |y, _| {
        if latent.stripes && ((y as f64 / stripe_period) as usize) % 2 == 1 {
            latent.torso.map(|v| v * 0.45)
        } else {
            latent.torso
        }
    });
    let (hy, hr) = (0.14, 0.095);
    let hair_line = hy - hr + 2.0 * hr * latent.hair;
    c.fill_ellipse(hy, cx, hr, 0.17, |y, _| {
        if (y as f64 + 0.5) / h as f64 <= hair_line { HAIR } else { SKIN }
    });
    if latent.carried {
        c.fill_rect(0.38, 0.62, cx + half, cx + half + 0.2, |_, _| latent.carried_color);
    }
    finish(c, view, rng)
}

/// Renders one person as a `[3, h, w]` tensor in `[0, 1]`.
pub fn render_person(latent: &IdentityLatent, view: &ViewModel, h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    hwc_to_tensor(&render_person_u8(latent, view, h, w, rng), h, w)
}

/// Generic-domain class: a shape kind and a color.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeLatent {
    pub kind: u8,
    pub color: [f64; 3],
    pub size: f64,
}

fn render_shapes_u8(latent: &ShapeLatent, view: &ViewModel, h: usize, w: usize, rng: &mut impl Rng) -> Vec<u8> {
    let mut c = background(h, w, rng);
    // diagonal texture so the background is not flat
    let period = rng.gen_range(3..8);
    for y in 0..h {
        for x in 0..w {
            if (x + y) % period == 0 {
                c.px[y * w + x] = c.px[y * w + x].map(|v| v * 0.8);
            }
        }
    }
    let copies = rng.gen_range(1..=3);
    for _ in 0..copies {
        let cy = rng.gen_range(0.2..0.8);
        let cx = rng.gen_range(0.25..0.75);
        let s = latent.size * rng.gen_range(0.8..1.2);
        let col = latent.color;
        match latent.kind % 4 {
            0 => c.fill_ellipse(cy, cx, s * 0.5, s, |_, _| col),
            1 => c.fill_rect(cy - s * 0.5, cy + s * 0.5, cx - s, cx + s, |_, _| col),
            2 => c.fill_rect(cy - s, cy + s, cx - s * 0.25, cx + s * 0.25, |_, _| col),
            _ => {
                c.fill_rect(cy - s * 0.15, cy + s * 0.15, cx - s, cx + s, |_, _| col);
                c.fill_rect(cy - s, cy + s, cx - s * 0.15, cx + s * 0.15, |_, _| col);
            }
        }
    }
    finish(c, view, rng)
}

pub fn hwc_to_tensor(px: &[u8], h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[3, h, w], |i| {
        let (ch, rest) = (i / (h * w), i % (h * w));
        f64::from(px[rest * 3 + ch]) / 255.0
    })
}

// ── datasets ───────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub file: String,
    pub person: usize,
    pub camera: usize,
    /// 8-bit HWC RGB.
    pub pixels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub images: Vec<ImageRecord>,
    /// Per person id; empty rows for generic datasets.
    pub attributes: Vec<Vec<u8>>,
}

fn stream_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix64(seed), |acc, &p| mix64(acc ^ p.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

pub fn image_file_name(person: usize, view: usize, idx: usize) -> String {
    format!("images/{person:04}_{view}_{idx:02}.png")
}

/// Latent of person `id`, a pure function of the dataset seed and id.
pub fn identity_latent(spec: &DatasetSpec, id: usize) -> IdentityLatent {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, &[fnv1a(b"identity"), id as u64]));
    IdentityLatent::sample(&mut rng)
}

fn shape_latent(spec: &DatasetSpec, id: usize) -> ShapeLatent {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, &[fnv1a(b"shape"), id as u64]));
    ShapeLatent { kind: (id % 4) as u8, color: random_color(&mut rng), size: rng.gen_range(0.12..0.3) }
}

impl Dataset {
    /// Renders the dataset in memory; bytes are a pure function of `spec`.
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let views = ViewModel::for_dataset(spec);
        let mut images = Vec::with_capacity(spec.num_images());
        let mut attributes = Vec::with_capacity(spec.identities);
        for person in 0..spec.identities {
            let latent = identity_latent(spec, person);
            let shape = shape_latent(spec, person);
            attributes.push(match spec.mode {
                GeneratorMode::Persons => derive_attributes(&latent, spec.attributes)?,
                GeneratorMode::Generic => Vec::new(),
            });
            for (v, view) in views.iter().enumerate() {
                for idx in 0..spec.images_per_view {
                    let seed = stream_seed(spec.seed, &[fnv1a(b"image"), person as u64, v as u64, idx as u64]);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let pixels = match spec.mode {
                        GeneratorMode::Persons => render_person_u8(&latent, view, spec.height, spec.width, &mut rng),
                        GeneratorMode::Generic => render_shapes_u8(&shape, view, spec.height, spec.width, &mut rng),
                    };
                    images.push(ImageRecord { file: image_file_name(person, v, idx), person, camera: v, pixels });
                }
            }
        }
        Ok(Self { spec: spec.clone(), images, attributes })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn height(&self) -> usize {
        self.spec.height
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    pub fn num_identities(&self) -> usize {
        self.attributes.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.first().map_or(0, Vec::len)
    }

    pub fn image(&self, i: usize) -> Tensor {
        hwc_to_tensor(&self.images[i].pixels, self.height(), self.width())
    }

    /// Stacks images into `[n, 3, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let (h, w) = (self.height(), self.width());
        let mut data = Vec::with_capacity(indices.len() * 3 * h * w);
        for &i in indices {
            data.extend_from_slice(self.image(i).data());
        }
        Tensor::new(&[indices.len(), 3, h, w], data).expect("consistent batch")
    }

    /// Attribute targets of image `i` as 0.0 / 1.0.
    pub fn attribute_targets(&self, i: usize) -> Vec<f64> {
        self.attributes[self.images[i].person].iter().map(|&a| f64::from(a)).collect()
    }

    /// Image indices grouped by person id.
    pub fn by_person(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.images.iter().enumerate() {
            out.entry(r.person).or_default().push(i);
        }
        out
    }

    /// A dataset holding only the given persons, relabelled `0..` in order.
    pub fn subset_persons(&self, persons: &[usize]) -> Dataset {
        let remap: BTreeMap<usize, usize> = persons.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        let images = self
            .images
            .iter()
            .filter_map(|r| remap.get(&r.person).map(|&np| ImageRecord { person: np, ..r.clone() }))
            .collect();
        let attributes = persons.iter().map(|&p| self.attributes[p].clone()).collect();
        let mut spec = self.spec.clone();
        spec.identities = persons.len();
        Dataset { spec, images, attributes }
    }

    /// Writes the dataset under `out`. An existing non-empty directory is
    /// rejected unless `force` is set.
    pub fn save(&self, out: impl AsRef<Path>, force: bool) -> Result<()> {
        let out = out.as_ref();
        if out.exists() {
            let non_empty = fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
            if non_empty && !force {
                return Err(Error::Invalid(format!(
                    "{} exists and is not empty (use --force to overwrite)",
                    out.display()
                )));
            }
        }
        let img_dir = out.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let mut checksums = BTreeMap::new();
        let mut write = |rel: &str, bytes: &[u8]| -> Result<()> {
            let path = out.join(rel);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            checksums.insert(rel.to_owned(), sha256_hex(bytes));
            Ok(())
        };
        let mut labels = String::from("image_file,person_id,camera_id\n");
        for r in &self.images {
            write(&r.file, &encode_png(&r.pixels, self.height(), self.width())?)?;
            labels.push_str(&format!("{},{},{}\n", r.file, r.person, r.camera));
        }
        write("labels.csv", labels.as_bytes())?;
        let k = self.num_attributes();
        let mut attrs = String::from("person_id");
        for i in 0..k {
            attrs.push_str(&format!(",a_{i}"));
        }
        attrs.push('\n');
        for (p, a) in self.attributes.iter().enumerate() {
            attrs.push_str(&p.to_string());
            for v in a {
                attrs.push_str(&format!(",{v}"));
            }
            attrs.push('\n');
        }
        write("attributes.csv", attrs.as_bytes())?;
        let manifest = Manifest { generator_version: GENERATOR_VERSION.into(), spec: self.spec.clone(), files: checksums };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let path = out.join("manifest.json");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    generator_version: String,
    spec: DatasetSpec,
    files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode_png(px: &[u8], h: usize, w: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let mut enc = png::Encoder::new(&mut buf, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let err = |e: png::EncodingError| Error::Invalid(format!("png encoding failed: {e}"));
    let mut writer = enc.write_header().map_err(err)?;
    writer.write_image_data(px).map_err(err)?;
    writer.finish().map_err(err)?;
    Ok(buf)
}

fn decode_png(bytes: &[u8], file: &str, h: usize, w: usize) -> Result<Vec<u8>> {
    let bad = |reason: String| Error::Dataset { file: file.to_owned(), reason };
    let reader = png::Decoder::new(Cursor::new(bytes));
    let mut reader = reader.read_info().map_err(|e| bad(format!("png decode: {e}")))?;
    let size = reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(format!("png decode: {e}")))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(bad(format!("expected 8-bit RGB, got {:?} {:?}", info.color_type, info.bit_depth)));
    }
    if (info.height as usize, info.width as usize) != (h, w) {
        return Err(bad(format!("expected {h}x{w}, got {}x{}", info.height, info.width)));
    }
    buf.truncate(info.buffer_size());
    Ok(buf)
}

fn read_file(root: &Path, rel: &str) -> Result<Vec<u8>> {
    let path: PathBuf = root.join(rel);
    fs::read(&path).map_err(|e| Error::Dataset { file: rel.to_owned(), reason: format!("cannot read: {e}") })
}

fn parse_field<T: std::str::FromStr>(s: &str, file: &str, line: usize, what: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Dataset {
        file: file.to_owned(),
        reason: format!("line {line}: bad {what} `{s}`"),
    })
}

/// Loads a dataset written by [`Dataset::save`], verifying every checksum
/// and cross-reference.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let manifest_bytes = read_file(root, "manifest.json")?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Dataset { file: "manifest.json".into(), reason: e.to_string() })?;
    let spec = manifest.spec;
    let checked = |rel: &str| -> Result<Vec<u8>> {
        let expected = manifest.files.get(rel).ok_or_else(|| Error::Dataset {
            file: rel.to_owned(),
            reason: "not listed in manifest.json".into(),
        })?;
        let bytes = read_file(root, rel)?;
        if &sha256_hex(&bytes) != expected {
            return Err(Error::Dataset { file: rel.to_owned(), reason: "checksum mismatch".into() });
        }
        Ok(bytes)
    };

    let labels_file = "labels.csv";
    let labels = String::from_utf8(checked(labels_file)?)
        .map_err(|_| Error::Dataset { file: labels_file.into(), reason: "not utf-8".into() })?;
    let mut lines = labels.lines();
    if lines.next() != Some("image_file,person_id,camera_id") {
        return Err(Error::Dataset { file: labels_file.into(), reason: "unexpected header".into() });
    }
    let mut images = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::Dataset { file: labels_file.into(), reason: format!("line {}: expected 3 columns", n + 2) });
        }
        let file = cols[0].to_owned();
        let person = parse_field(cols[1], labels_file, n + 2, "person_id")?;
        let camera = parse_field(cols[2], labels_file, n + 2, "camera_id")?;
        let pixels = decode_png(&checked(&file)?, &file, spec.height, spec.width)?;
        images.push(ImageRecord { file, person, camera, pixels });
    }

    let attr_file = "attributes.csv";
    let attrs = String::from_utf8(checked(attr_file)?)
        .map_err(|_| Error::Dataset { file: attr_file.into(), reason: "not utf-8".into() })?;
    let mut lines = attrs.lines();
    let k = lines.next().map_or(0, |h| h.split(',').count().saturating_sub(1));
    let mut by_id: BTreeMap<usize, Vec<u8>> = BTreeMap::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != k + 1 {
            return Err(Error::Dataset { file: attr_file.into(), reason: format!("line {}: expected {} columns", n + 2, k + 1) });
        }
        let id: usize = parse_field(cols[0], attr_file, n + 2, "person_id")?;
        let row = cols[1..]
            .iter()
            .map(|c| match c.trim() {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(Error::Dataset { file: attr_file.into(), reason: format!("line {}: attribute `{other}` is not 0/1", n + 2) }),
            })
            .collect::<Result<Vec<u8>>>()?;
        if by_id.insert(id, row).is_some() {
            return Err(Error::Dataset { file: attr_file.into(), reason: format!("duplicate person_id {id}") });
        }
    }
    let count = by_id.len();
    if by_id.keys().copied().ne(0..count) {
        return Err(Error::Dataset { file: attr_file.into(), reason: "person ids must be contiguous from 0".into() });
    }
    if let Some(r) = images.iter().find(|r| r.person >= count) {
        return Err(Error::Dataset {
            file: labels_file.into(),
            reason: format!("{} references person {} absent from {attr_file}", r.file, r.person),
        });
    }
    let attributes: Vec<Vec<u8>> = by_id.into_values().collect();
    log::info!(
        "loaded {} images of {} identities, {} attributes from {}",
        images.len(),
        attributes.len(),
        k,
        root.display()
    );
    Ok(Dataset { spec, images, attributes })
}
