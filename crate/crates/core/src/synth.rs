//! Toy cross-domain clothing dataset: clean shop renders, cluttered and
//! occluded consumer renders, ground-truth garment masks, and the on-disk
//! format (binary PPM/PGM plus a hashed JSON manifest).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gating::AttentionMap;
use crate::rng::{StreamKey, StreamRng};
use crate::tensor::{Shape, Tensor};

pub const MIN_EXTENT: usize = 16;
pub const OCCLUSION_PROB: f64 = 0.3;
pub const OCCLUDER_AREA: (f64, f64) = (0.10, 0.25);
const SHOP_BACKGROUND: f32 = 0.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Shop,
    Consumer,
}

impl Domain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Shop => "shop",
            Domain::Consumer => "consumer",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Silhouette {
    Tee,
    Dress,
    Trousers,
    Skirt,
    Tank,
}

impl Silhouette {
    pub const ALL: [Silhouette; 5] = [
        Silhouette::Tee,
        Silhouette::Dress,
        Silhouette::Trousers,
        Silhouette::Skirt,
        Silhouette::Tank,
    ];

    /// Membership test in garment coordinates, both axes in [-1, 1] with
    /// `v` pointing down.
    pub fn contains(&self, u: f32, v: f32) -> bool {
        let au = u.abs();
        match self {
            Silhouette::Tee => {
                let body = au < 0.45 && v > -0.6 && v < 0.8;
                let sleeves = au < 0.88 && v > -0.6 && v < -0.22;
                body || sleeves
            }
            Silhouette::Dress => v > -0.85 && v < 0.85 && au < 0.22 + 0.38 * (v + 0.85) / 1.7,
            Silhouette::Trousers => {
                let gap = v > -0.45 && au < 0.06 + 0.06 * (v + 0.45);
                v > -0.85 && v < 0.85 && au < 0.45 && !gap
            }
            Silhouette::Skirt => v > -0.6 && v < 0.65 && au < 0.3 + 0.38 * (v + 0.6) / 1.25,
            Silhouette::Tank => {
                let neck = u * u + (v + 0.75) * (v + 0.75) < 0.04;
                au < 0.38 && v > -0.75 && v < 0.8 && !neck
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Stripes,
    Checks,
}

/// Parameters of one synthetic garment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemSpec {
    pub item_id: String,
    pub silhouette: Silhouette,
    pub pattern: Pattern,
    /// Stripe period in garment units, within [0.18, 0.6].
    pub period: f32,
    /// Stripe direction in radians, within [0, pi).
    pub angle: f32,
    pub palette: [[f32; 3]; 2],
    /// Half-extent of the garment relative to the image, within [0.8, 0.95].
    pub scale: f32,
    /// Bound on consumer-view rotation in radians, within [0.1, 0.35].
    pub max_rotation: f32,
}

impl ItemSpec {
    pub fn sample(index: usize, key: StreamKey) -> ItemSpec {
        let mut rng = key.rng();
        let silhouette = Silhouette::ALL[rng.random_range(0..Silhouette::ALL.len())];
        let pattern = if rng.random_bool(0.5) {
            Pattern::Stripes
        } else {
            Pattern::Checks
        };
        let mut colour = || -> [f32; 3] { std::array::from_fn(|_| rng.random_range(0.05f32..0.85)) };
        let palette = [colour(), colour()];
        ItemSpec {
            item_id: item_id(index),
            silhouette,
            pattern,
            period: rng.random_range(0.18..0.6),
            angle: rng.random_range(0.0..std::f32::consts::PI),
            palette,
            scale: rng.random_range(0.8..0.95),
            max_rotation: rng.random_range(0.1..0.35),
        }
    }

    fn colour_at(&self, u: f32, v: f32) -> [f32; 3] {
        let (s, c) = self.angle.sin_cos();
        let a = ((u * c + v * s) / self.period).floor() as i64;
        let idx = match self.pattern {
            Pattern::Stripes => a,
            Pattern::Checks => a + ((v * c - u * s) / self.period).floor() as i64,
        };
        self.palette[idx.rem_euclid(2) as usize]
    }
}

pub fn item_id(index: usize) -> String {
    format!("item{index:04}")
}

pub fn image_id(item: &str, domain: Domain, k: usize) -> String {
    format!("{item}_{}_{k}", domain.as_str())
}

/// Similarity placing the garment in the image: image point
/// `rot(theta) * scale * garment + shift`, all in [-1, 1] image units.
#[derive(Debug, Clone, Copy)]
struct Placement {
    scale: f32,
    theta: f32,
    shift: (f32, f32),
}

impl Placement {
    fn to_garment(&self, x: f32, y: f32) -> (f32, f32) {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = ((x - self.shift.0) / self.scale, (y - self.shift.1) / self.scale);
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

/// One render held in memory: image (1, 3, H, W) and mask (1, 1, H, W),
/// both already quantized to the 8-bit grid used on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSample {
    pub image_id: String,
    pub item_id: String,
    pub domain: Domain,
    pub image: Tensor,
    pub mask: Tensor,
}

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<f32>,
    mask: Vec<f32>,
}

impl Canvas {
    fn new(h: usize, w: usize, fill: [f32; 3]) -> Canvas {
        let mut rgb = vec![0.0; 3 * h * w];
        for c in 0..3 {
            rgb[c * h * w..(c + 1) * h * w].fill(fill[c]);
        }
        Canvas {
            h,
            w,
            rgb,
            mask: vec![0.0; h * w],
        }
    }

    fn coords(&self, r: usize, col: usize) -> (f32, f32) {
        (
            (col as f32 + 0.5) / self.w as f32 * 2.0 - 1.0,
            (r as f32 + 0.5) / self.h as f32 * 2.0 - 1.0,
        )
    }

    fn put(&mut self, r: usize, col: usize, rgb: [f32; 3]) {
        let plane = self.h * self.w;
        for (c, v) in rgb.iter().enumerate() {
            self.rgb[c * plane + r * self.w + col] = *v;
        }
    }

    fn fill_rect(&mut self, r0: usize, r1: usize, c0: usize, c1: usize, rgb: [f32; 3]) {
        for r in r0..r1.min(self.h) {
            for col in c0..c1.min(self.w) {
                self.put(r, col, rgb);
            }
        }
    }

    fn draw_garment(&mut self, spec: &ItemSpec, place: Placement, gain: f32) {
        for r in 0..self.h {
            for col in 0..self.w {
                let (x, y) = self.coords(r, col);
                let (u, v) = place.to_garment(x, y);
                if spec.silhouette.contains(u, v) {
                    let rgb = spec.colour_at(u, v).map(|c| c * gain);
                    self.put(r, col, rgb);
                    self.mask[r * self.w + col] = 1.0;
                }
            }
        }
    }

    /// Inclusive-exclusive row/column bounds of the mask, if non-empty.
    fn mask_bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.h {
            for col in 0..self.w {
                if self.mask[r * self.w + col] > 0.0 {
                    bb = Some(match bb {
                        None => (r, r + 1, col, col + 1),
                        Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r + 1), c0.min(col), c1.max(col + 1)),
                    });
                }
            }
        }
        bb
    }

    fn finish(self, image_id: String, item_id: &str, domain: Domain) -> RenderedSample {
        let quant = |v: f32| f32::from(to_byte(v)) / 255.0;
        let image = Tensor::from_parts(Shape::new(1, 3, self.h, self.w), self.rgb.into_iter().map(quant).collect());
        let mask = Tensor::from_parts(Shape::new(1, 1, self.h, self.w), self.mask.into_iter().map(quant).collect());
        RenderedSample {
            image_id,
            item_id: item_id.to_string(),
            domain,
            image,
            mask,
        }
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn check_extents(extents: (usize, usize)) -> Result<()> {
    if extents.0 < MIN_EXTENT || extents.1 < MIN_EXTENT {
        return Err(Error::Dataset(format!(
            "extents too small: {}x{} (minimum {MIN_EXTENT}x{MIN_EXTENT})",
            extents.0, extents.1
        )));
    }
    Ok(())
}

/// Shop view `k`: uniform near-white background, no clutter or occluder.
/// Views beyond the first get a small shift and scale change.
pub fn render_shop(spec: &ItemSpec, extents: (usize, usize), k: usize, key: StreamKey) -> Result<RenderedSample> {
    check_extents(extents)?;
    let place = if k == 0 {
        Placement {
            scale: spec.scale,
            theta: 0.0,
            shift: (0.0, 0.0),
        }
    } else {
        let mut rng = key.rng();
        Placement {
            scale: spec.scale * rng.random_range(0.9..1.0),
            theta: 0.0,
            shift: (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
        }
    };
    let mut canvas = Canvas::new(extents.0, extents.1, [SHOP_BACKGROUND; 3]);
    canvas.draw_garment(spec, place, 1.0);
    Ok(canvas.finish(image_id(&spec.item_id, Domain::Shop, k), &spec.item_id, Domain::Shop))
}

/// Consumer view: cluttered background, affine jitter, lighting change,
/// pixel noise, and with probability [`OCCLUSION_PROB`] an occluding patch
/// that is zeroed in the mask.
pub fn render_consumer(spec: &ItemSpec, extents: (usize, usize), k: usize, key: StreamKey) -> Result<RenderedSample> {
    check_extents(extents)?;
    let (h, w) = extents;
    let mut rng = key.rng();
    let random_colour = |rng: &mut StreamRng| -> [f32; 3] { std::array::from_fn(|_| rng.random_range(0.0f32..1.0)) };

    let base = std::array::from_fn(|_| rng.random_range(0.2f32..0.8));
    let mut canvas = Canvas::new(h, w, base);
    for _ in 0..rng.random_range(4..9) {
        let rh = rng.random_range(h / 8..=h / 2);
        let rw = rng.random_range(w / 8..=w / 2);
        let r0 = rng.random_range(0..h);
        let c0 = rng.random_range(0..w);
        let colour = random_colour(&mut rng);
        canvas.fill_rect(r0, r0 + rh, c0, c0 + rw, colour);
    }

    let place = Placement {
        scale: spec.scale * rng.random_range(0.75..1.0),
        theta: rng.random_range(-spec.max_rotation..=spec.max_rotation),
        shift: (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)),
    };
    let gain = rng.random_range(0.8..1.1);
    canvas.draw_garment(spec, place, gain);

    if rng.random_bool(OCCLUSION_PROB) {
        if let Some((r0, r1, c0, c1)) = canvas.mask_bbox() {
            let (bh, bw) = ((r1 - r0) as f64, (c1 - c0) as f64);
            let frac = rng.random_range(OCCLUDER_AREA.0..=OCCLUDER_AREA.1);
            let aspect: f64 = rng.random_range(0.5..2.0);
            let area = frac * bh * bw;
            let oh = ((area * aspect).sqrt().round() as usize).clamp(1, r1 - r0);
            let ow = ((area / oh as f64).round() as usize).clamp(1, c1 - c0);
            let or = r0 + rng.random_range(0..=(r1 - r0 - oh));
            let oc = c0 + rng.random_range(0..=(c1 - c0 - ow));
            let colour = random_colour(&mut rng);
            canvas.fill_rect(or, or + oh, oc, oc + ow, colour);
            for r in or..or + oh {
                canvas.mask[r * w + oc..r * w + oc + ow].fill(0.0);
            }
        }
    }

    for v in canvas.rgb.iter_mut() {
        *v += rng.random_range(-0.04f32..0.04);
    }
    Ok(canvas.finish(image_id(&spec.item_id, Domain::Consumer, k), &spec.item_id, Domain::Consumer))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One item's files. Test items supply the query set (consumer images) and
/// the gallery (shop images); train items supply triplets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemEntry {
    pub id: String,
    pub shop: Vec<String>,
    pub consumer: Vec<String>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    /// Image height and width.
    pub extents: [usize; 2],
    pub items: Vec<ItemEntry>,
    pub hashes: BTreeMap<String, String>,
}

/// A dataset image as seen by samplers and retrieval.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRef {
    pub id: String,
    pub item: String,
    pub domain: Domain,
    pub path: String,
}

impl ImageRef {
    fn from_path(item: &str, domain: Domain, path: &str) -> ImageRef {
        let id = Path::new(path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.to_string());
        ImageRef {
            id,
            item: item.to_string(),
            domain,
            path: path.to_string(),
        }
    }

    pub fn mask_path(&self) -> String {
        format!("masks/{}.pgm", self.id)
    }
}

impl DatasetManifest {
    pub fn extents(&self) -> (usize, usize) {
        (self.extents[0], self.extents[1])
    }

    pub fn item(&self, id: &str) -> Option<&ItemEntry> {
        self.items.iter().find(|e| e.id == id)
    }

    pub fn images(&self, item: &ItemEntry, domain: Domain) -> Vec<ImageRef> {
        let paths = match domain {
            Domain::Shop => &item.shop,
            Domain::Consumer => &item.consumer,
        };
        paths.iter().map(|p| ImageRef::from_path(&item.id, domain, p)).collect()
    }

    pub fn all_images(&self) -> Vec<ImageRef> {
        self.items
            .iter()
            .flat_map(|it| {
                let mut v = self.images(it, Domain::Shop);
                v.extend(self.images(it, Domain::Consumer));
                v
            })
            .collect()
    }

    fn split_images(&self, split: Split, domain: Domain) -> Vec<ImageRef> {
        self.items
            .iter()
            .filter(|it| it.split == split)
            .flat_map(|it| self.images(it, domain))
            .collect()
    }

    /// Shop images of test items.
    pub fn gallery(&self) -> Vec<ImageRef> {
        self.split_images(Split::Test, Domain::Shop)
    }

    /// Consumer images of test items.
    pub fn queries(&self) -> Vec<ImageRef> {
        self.split_images(Split::Test, Domain::Consumer)
    }

    /// Copy restricted to items in `split`.
    pub fn split(&self, split: Split) -> DatasetManifest {
        self.restrict(|e| e.split == split)
    }

    pub fn restrict(&self, keep: impl Fn(&ItemEntry) -> bool) -> DatasetManifest {
        DatasetManifest {
            seed: self.seed,
            extents: self.extents,
            items: self.items.iter().filter(|e| keep(e)).cloned().collect(),
            hashes: self.hashes.clone(),
        }
    }

    /// Seeded item-level subsample of exactly `ceil(fraction * n_items)`
    /// items, kept in manifest order.
    pub fn subsample(&self, fraction: f64, key: StreamKey) -> Result<DatasetManifest> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("train_fraction {fraction} outside (0, 1]")));
        }
        let n = self.items.len();
        let keep_n = ((fraction * n as f64).ceil() as usize).min(n);
        let picked = rand::seq::index::sample(&mut key.rng(), n, keep_n);
        let mut keep = vec![false; n];
        for i in picked {
            keep[i] = true;
        }
        Ok(DatasetManifest {
            seed: self.seed,
            extents: self.extents,
            items: self
                .items
                .iter()
                .zip(&keep)
                .filter(|(_, k)| **k)
                .map(|(e, _)| e.clone())
                .collect(),
            hashes: self.hashes.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub n_items: usize,
    pub consumers_per_item: usize,
    /// Shop views per item; the in-shop task needs at least 2.
    pub shops_per_item: usize,
    /// Image height and width.
    pub extents: (usize, usize),
    pub seed: u64,
}

impl GenerateOptions {
    pub fn new(n_items: usize, consumers_per_item: usize, extents: (usize, usize), seed: u64) -> Self {
        GenerateOptions {
            n_items,
            consumers_per_item,
            shops_per_item: 1,
            extents,
            seed,
        }
    }

    /// Number of test items: half the items rounded down, at least one.
    pub fn test_items(&self) -> usize {
        (self.n_items / 2).max(1)
    }
}

/// Render every item and its views in memory, in manifest order.
pub fn render_dataset(opts: &GenerateOptions) -> Result<Vec<(ItemSpec, Vec<RenderedSample>)>> {
    if opts.n_items < 2 {
        return Err(Error::Config(format!("n_items must be at least 2, got {}", opts.n_items)));
    }
    if opts.consumers_per_item < 1 || opts.shops_per_item < 1 {
        return Err(Error::Config("consumers_per_item and shops_per_item must be at least 1".into()));
    }
    check_extents(opts.extents)?;
    let root = StreamKey::root(opts.seed).label("synth");
    (0..opts.n_items)
        .into_par_iter()
        .map(|i| {
            let key = root.label("item").index(i as u64);
            let spec = ItemSpec::sample(i, key.label("spec"));
            let mut samples = Vec::with_capacity(opts.shops_per_item + opts.consumers_per_item);
            for k in 0..opts.shops_per_item {
                samples.push(render_shop(&spec, opts.extents, k, key.label("shop").index(k as u64))?);
            }
            for k in 0..opts.consumers_per_item {
                samples.push(render_consumer(&spec, opts.extents, k, key.label("consumer").index(k as u64))?);
            }
            Ok((spec, samples))
        })
        .collect()
}

fn ppm_header(magic: &str, h: usize, w: usize) -> String {
    format!("{magic}\n{w} {h}\n255\n")
}

fn encode_image(t: &Tensor) -> Vec<u8> {
    let s = t.shape();
    let plane = s.plane();
    let mut out = ppm_header("P6", s.h, s.w).into_bytes();
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push(to_byte(t.data()[c * plane + i]));
        }
    }
    out
}

fn encode_mask(t: &Tensor) -> Vec<u8> {
    let s = t.shape();
    let mut out = ppm_header("P5", s.h, s.w).into_bytes();
    out.extend(t.data().iter().map(|&v| to_byte(v)));
    out
}

fn expected_len(path: &str, extents: (usize, usize)) -> usize {
    let (h, w) = extents;
    if path.ends_with(".ppm") {
        ppm_header("P6", h, w).len() + 3 * h * w
    } else {
        ppm_header("P5", h, w).len() + h * w
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Render and write a dataset under `out`. Test items are a seeded choice of
/// [`GenerateOptions::test_items`] items.
pub fn generate_dataset(opts: &GenerateOptions, out: &Path) -> Result<DatasetManifest> {
    let rendered = render_dataset(opts)?;
    let n_test = opts.test_items();
    let test: Vec<usize> = rand::seq::index::sample(
        &mut StreamKey::root(opts.seed).label("synth").label("split").rng(),
        opts.n_items,
        n_test,
    )
    .into_vec();

    let mut items = Vec::with_capacity(rendered.len());
    let mut hashes = BTreeMap::new();
    for (i, (spec, samples)) in rendered.iter().enumerate() {
        let mut entry = ItemEntry {
            id: spec.item_id.clone(),
            shop: Vec::new(),
            consumer: Vec::new(),
            split: if test.contains(&i) { Split::Test } else { Split::Train },
        };
        for s in samples {
            let image_rel = format!("images/{}.ppm", s.image_id);
            let mask_rel = format!("masks/{}.pgm", s.image_id);
            for (rel, bytes) in [(&image_rel, encode_image(&s.image)), (&mask_rel, encode_mask(&s.mask))] {
                write_file(&out.join(rel), &bytes)?;
                hashes.insert(rel.clone(), sha256_hex(&bytes));
            }
            match s.domain {
                Domain::Shop => entry.shop.push(image_rel),
                Domain::Consumer => entry.consumer.push(image_rel),
            }
        }
        items.push(entry);
    }
    let manifest = DatasetManifest {
        seed: opts.seed,
        extents: [opts.extents.0, opts.extents.1],
        items,
        hashes,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_file(&out.join("manifest.json"), &json)?;
    Ok(manifest)
}

/// A dataset on disk whose manifest and file hashes have been verified.
/// Pixels are decoded on access.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let bytes = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: manifest_path.clone(),
        source,
    })?;
    check_extents(manifest.extents())?;
    for img in manifest.all_images() {
        for rel in [&img.path, &img.mask_path()] {
            if !manifest.hashes.contains_key(rel.as_str()) {
                return Err(Error::Malformed {
                    path: manifest_path.clone(),
                    reason: format!("no hash recorded for {rel}"),
                });
            }
        }
    }
    let ds = Dataset {
        root: dir.to_path_buf(),
        manifest,
    };
    for rel in ds.manifest.hashes.keys() {
        ds.read_verified(rel)?;
    }
    Ok(ds)
}

impl Dataset {
    fn read_verified(&self, rel: &str) -> Result<Vec<u8>> {
        let path = self.root.join(rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let want = expected_len(rel, self.manifest.extents());
        if bytes.len() < want {
            return Err(Error::ShortRead { path });
        }
        if bytes.len() > want {
            return Err(Error::Malformed {
                path,
                reason: format!("{} trailing bytes", bytes.len() - want),
            });
        }
        match self.manifest.hashes.get(rel) {
            Some(h) if *h == sha256_hex(&bytes) => Ok(bytes),
            Some(_) => Err(Error::HashMismatch { path }),
            None => Err(Error::Malformed {
                path,
                reason: "file not listed in manifest".into(),
            }),
        }
    }

    fn decode(&self, rel: &str, format: image::ImageFormat) -> Result<image::DynamicImage> {
        let bytes = self.read_verified(rel)?;
        image::load_from_memory_with_format(&bytes, format).map_err(|e| Error::Malformed {
            path: self.root.join(rel),
            reason: e.to_string(),
        })
    }

    /// Image as a (1, 3, H, W) tensor in [0, 1].
    pub fn image(&self, img: &ImageRef) -> Result<Tensor> {
        let rgb = self.decode(&img.path, image::ImageFormat::Pnm)?.into_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let plane = h * w;
        let mut data = vec![0.0f32; 3 * plane];
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = f32::from(px.0[c]) / 255.0;
            }
        }
        Tensor::from_vec(Shape::new(1, 3, h, w), data)
    }

    /// Mask as a (1, 1, H, W) tensor in [0, 1].
    pub fn mask(&self, img: &ImageRef) -> Result<Tensor> {
        let luma = self.decode(&img.mask_path(), image::ImageFormat::Pnm)?.into_luma8();
        let (w, h) = (luma.width() as usize, luma.height() as usize);
        let data = luma.pixels().map(|p| f32::from(p.0[0]) / 255.0).collect();
        Tensor::from_vec(Shape::new(1, 1, h, w), data)
    }
}

/// Area-averaged downsample of a (N, 1, H, W) mask to `(th, tw)`, clamped
/// to [0, 1]. Non-integer ratios weight partially covered source pixels by
/// their overlap.
pub fn oracle_attention(mask: &Tensor, target: (usize, usize)) -> Result<AttentionMap> {
    let s = mask.shape();
    let (th, tw) = target;
    if s.c != 1 {
        return Err(Error::Config(format!("mask must have one channel, got shape {s}")));
    }
    if th == 0 || tw == 0 || th > s.h || tw > s.w {
        return Err(Error::Config(format!(
            "target {th}x{tw} larger than mask {}x{} or empty",
            s.h, s.w
        )));
    }
    let rows = overlap_weights(s.h, th);
    let cols = overlap_weights(s.w, tw);
    let out_shape = Shape::new(s.n, 1, th, tw);
    let mut out = vec![0.0f32; out_shape.numel()];
    let cell = (s.h as f64 / th as f64) * (s.w as f64 / tw as f64);
    for n in 0..s.n {
        let src = mask.sample(n);
        for (ti, rw) in rows.iter().enumerate() {
            for (tj, cw) in cols.iter().enumerate() {
                let mut acc = 0.0f64;
                for &(r, wr) in rw {
                    for &(c, wc) in cw {
                        acc += wr * wc * f64::from(src[r * s.w + c]);
                    }
                }
                out[out_shape.offset(n, 0, ti, tj)] = ((acc / cell) as f32).clamp(0.0, 1.0);
            }
        }
    }
    AttentionMap::new(Tensor::from_vec(out_shape, out)?)
}

/// For each of `dst` output cells, the source indices it overlaps and the
/// overlap length in source-pixel units.
fn overlap_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let (lo, hi) = (i as f64 * ratio, (i + 1) as f64 * ratio);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|k| {
                    let w = hi.min(k as f64 + 1.0) - lo.max(k as f64);
                    (w > 1e-12).then_some((k, w))
                })
                .collect()
        })
        .collect()
}
