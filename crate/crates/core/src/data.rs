//! Dataset ingestion, the binary glyph cache and episode sampling.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GmnError, Result};
use crate::glyph::{BinaryImage, PACKED_LEN, PIXELS, SIDE};

pub const CACHE_MAGIC: [u8; 4] = *b"GMNC";
pub const CACHE_VERSION: u32 = 1;
/// Side of a raw Omniglot glyph.
pub const RAW_SIDE: usize = 105;
pub const MNIST_TEST_COUNT: usize = 10_000;
/// Seed of the one-off MNIST binarization.
pub const MNIST_DEFAULT_SEED: u64 = 20_160_519;
/// Environment variable naming the dataset cache directory.
pub const DATA_ROOT_ENV: &str = "GMN_DATA_ROOT";

pub const OMNIGLOT_TRAIN_FILE: &str = "omniglot_train.gmnc";
pub const OMNIGLOT_TEST_FILE: &str = "omniglot_test.gmnc";
pub const OMNIGLOT_MANIFEST: &str = "omniglot_manifest.json";
pub const MNIST_TEST_FILE: &str = "mnist_test.gmnc";
pub const MNIST_MANIFEST: &str = "mnist_manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// All images of one character class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlyphClass {
    pub class_id: u32,
    pub alphabet_id: u32,
    pub images: Vec<BinaryImage>,
}

/// Class-indexed binary images of one split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlyphDataset {
    pub split: Split,
    pub classes: Vec<GlyphClass>,
}

impl GlyphDataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_images(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).sum()
    }

    pub fn class_ids(&self) -> BTreeSet<u32> {
        self.classes.iter().map(|c| c.class_id).collect()
    }

    pub fn alphabet_ids(&self) -> BTreeSet<u32> {
        self.classes.iter().map(|c| c.alphabet_id).collect()
    }

    /// Serialize to the cache format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.num_images() * PACKED_LEN + self.classes.len() * 12);
        out.extend_from_slice(&CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.classes.len() as u32).to_le_bytes());
        for c in &self.classes {
            out.extend_from_slice(&c.class_id.to_le_bytes());
            out.extend_from_slice(&c.alphabet_id.to_le_bytes());
            out.extend_from_slice(&(c.images.len() as u32).to_le_bytes());
            for img in &c.images {
                out.extend_from_slice(&img.pack());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], split: Split) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != CACHE_MAGIC {
            return Err(GmnError::Contract("not a glyph cache (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != CACHE_VERSION {
            return Err(GmnError::Contract(format!("glyph cache version {version}, expected {CACHE_VERSION}")));
        }
        let n = cur.u32()? as usize;
        let mut classes = Vec::with_capacity(n);
        for _ in 0..n {
            let class_id = cur.u32()?;
            let alphabet_id = cur.u32()?;
            let count = cur.u32()? as usize;
            let images = (0..count).map(|_| BinaryImage::unpack(cur.take(PACKED_LEN)?)).collect::<Result<_>>()?;
            classes.push(GlyphClass { class_id, alphabet_id, images });
        }
        if cur.pos != bytes.len() {
            return Err(GmnError::Contract("trailing bytes after glyph cache".into()));
        }
        Ok(GlyphDataset { split, classes })
    }

    pub fn write(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        write_atomic(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn read(path: &Path, split: Split) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, split).map_err(|e| GmnError::Ingest { path: path.to_path_buf(), message: e.to_string() })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(GmnError::Contract("truncated glyph cache".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

/// Write `bytes` unless `path` already holds identical content; returns whether it wrote.
fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<bool> {
    if let Ok(existing) = fs::read(path) {
        if Sha256::digest(&existing) == Sha256::digest(bytes) {
            return Ok(false);
        }
    }
    write_atomic(path, bytes)?;
    Ok(true)
}

/// Area-average a grayscale image to 28×28 ink coverage (`1 − luma/255`).
pub fn area_downscale(width: usize, height: usize, luma: &[u8]) -> Vec<f64> {
    let weights = |in_len: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = in_len as f64 / SIDE as f64;
        (0..SIDE)
            .map(|o| {
                let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
                let mut taps = Vec::new();
                let mut i = lo.floor() as usize;
                while (i as f64) < hi && i < in_len {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    if overlap > 0.0 {
                        taps.push((i, overlap / scale));
                    }
                    i += 1;
                }
                taps
            })
            .collect()
    };
    let (wy, wx) = (weights(height), weights(width));
    let mut out = vec![0.0; PIXELS];
    for (oy, ty) in wy.iter().enumerate() {
        for (ox, tx) in wx.iter().enumerate() {
            let mut acc = 0.0;
            for &(y, a) in ty {
                for &(x, b) in tx {
                    acc += a * b * (1.0 - luma[y * width + x] as f64 / 255.0);
                }
            }
            out[oy * SIDE + ox] = acc;
        }
    }
    out
}

/// Ink ≥ 0.5 becomes 1.
pub fn threshold(ink: &[f64]) -> Result<BinaryImage> {
    if ink.len() != PIXELS {
        return Err(GmnError::Shape(format!("threshold expects {PIXELS} values, got {}", ink.len())));
    }
    Ok(BinaryImage::from_fn(|y, x| ink[y * SIDE + x] >= 0.5))
}

/// Area-average a 105×105 grayscale glyph to 28×28 and threshold at half ink.
pub fn downscale_binarize(width: usize, height: usize, luma: &[u8]) -> Result<BinaryImage> {
    if width != RAW_SIDE || height != RAW_SIDE || luma.len() != width * height {
        return Err(GmnError::Shape(format!(
            "expected a {RAW_SIDE}×{RAW_SIDE} grayscale glyph, got {width}×{height} with {} values",
            luma.len()
        )));
    }
    threshold(&area_downscale(width, height, luma))
}

/// Decode an image file and downscale it.
pub fn load_glyph(path: &Path) -> Result<BinaryImage> {
    let img = image::open(path).map_err(|e| GmnError::Ingest { path: path.to_path_buf(), message: e.to_string() })?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    downscale_binarize(w as usize, h as usize, luma.as_raw())
        .map_err(|e| GmnError::Ingest { path: path.to_path_buf(), message: e.to_string() })
}

/// Expected shape of the Omniglot source tree.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OmniglotLayout {
    pub background_dir: String,
    pub evaluation_dir: String,
    pub background_alphabets: usize,
    pub evaluation_alphabets: usize,
    pub total_classes: usize,
    pub images_per_class: usize,
}

impl Default for OmniglotLayout {
    /// The canonical background/evaluation split.
    fn default() -> Self {
        OmniglotLayout {
            background_dir: "images_background".into(),
            evaluation_dir: "images_evaluation".into(),
            background_alphabets: 30,
            evaluation_alphabets: 20,
            total_classes: 1623,
            images_per_class: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub file: String,
    pub classes: usize,
    pub images: usize,
    pub alphabets: Vec<String>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OmniglotManifest {
    pub source: String,
    pub layout: OmniglotLayout,
    pub train: SplitManifest,
    pub test: SplitManifest,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MnistManifest {
    pub source: String,
    pub seed: u64,
    pub test: SplitManifest,
}

/// Result of an ingestion run.
#[derive(Clone, Debug)]
pub struct Ingested<M> {
    pub manifest: M,
    /// False when every cache file already held identical content.
    pub wrote: bool,
}

fn sorted_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| GmnError::Ingest { path: path.to_path_buf(), message: e.to_string() })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn sorted_images(path: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn find_split_root(source: &Path, name: &str) -> Option<PathBuf> {
    [source.join(name), source.join("python").join(name)].into_iter().find(|p| p.is_dir())
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Read both Omniglot splits from `source`, checking counts against `layout`.
pub fn read_omniglot_tree(source: &Path, layout: &OmniglotLayout) -> Result<(GlyphDataset, GlyphDataset, Vec<String>, Vec<String>)> {
    let mut problems = Vec::new();
    let mut next_class = 0u32;
    let mut next_alphabet = 0u32;
    let mut read_split = |dir: &str, expected_alphabets: usize, split: Split, problems: &mut Vec<String>| -> Result<(GlyphDataset, Vec<String>)> {
        let root = match find_split_root(source, dir) {
            Some(r) => r,
            None => {
                problems.push(format!("missing directory {}", source.join(dir).display()));
                return Ok((GlyphDataset { split, classes: Vec::new() }, Vec::new()));
            }
        };
        let alphabets = sorted_dirs(&root)?;
        if alphabets.len() != expected_alphabets {
            problems.push(format!("{}: {} alphabets, expected {expected_alphabets}", root.display(), alphabets.len()));
        }
        let mut classes = Vec::new();
        let mut names = Vec::new();
        for alphabet in &alphabets {
            names.push(dir_name(alphabet));
            let alphabet_id = next_alphabet;
            next_alphabet += 1;
            for character in sorted_dirs(alphabet)? {
                let files = sorted_images(&character)?;
                if files.len() != layout.images_per_class {
                    problems.push(format!(
                        "{}: {} images, expected {}",
                        character.display(),
                        files.len(),
                        layout.images_per_class
                    ));
                }
                let images = files.iter().map(|f| load_glyph(f)).collect::<Result<Vec<_>>>()?;
                classes.push(GlyphClass { class_id: next_class, alphabet_id, images });
                next_class += 1;
            }
        }
        Ok((GlyphDataset { split, classes }, names))
    };
    let (train, train_names) = read_split(&layout.background_dir, layout.background_alphabets, Split::Train, &mut problems)?;
    let (test, test_names) = read_split(&layout.evaluation_dir, layout.evaluation_alphabets, Split::Test, &mut problems)?;
    let total = train.num_classes() + test.num_classes();
    if total != layout.total_classes {
        problems.push(format!("{total} classes in total, expected {}", layout.total_classes));
    }
    if !problems.is_empty() {
        return Err(GmnError::CountMismatch(problems));
    }
    Ok((train, test, train_names, test_names))
}

/// Ingest the Omniglot tree at `source` into `cache_dir`.
pub fn ingest_omniglot(source: &Path, cache_dir: &Path, layout: &OmniglotLayout) -> Result<Ingested<OmniglotManifest>> {
    let (train, test, train_names, test_names) = read_omniglot_tree(source, layout)?;
    audit_disjoint(&train, &test)?;
    let mut wrote = false;
    let mut split_manifest = |ds: &GlyphDataset, file: &str, alphabets: Vec<String>| -> Result<SplitManifest> {
        let bytes = ds.to_bytes();
        wrote |= write_if_changed(&cache_dir.join(file), &bytes)?;
        Ok(SplitManifest { file: file.into(), classes: ds.num_classes(), images: ds.num_images(), alphabets, sha256: sha256_hex(&bytes) })
    };
    let manifest = OmniglotManifest {
        source: source.display().to_string(),
        layout: layout.clone(),
        train: split_manifest(&train, OMNIGLOT_TRAIN_FILE, train_names)?,
        test: split_manifest(&test, OMNIGLOT_TEST_FILE, test_names)?,
    };
    wrote |= write_if_changed(&cache_dir.join(OMNIGLOT_MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(Ingested { manifest, wrote })
}

fn idx_file(source: &Path, stems: &[&str]) -> Result<PathBuf> {
    if source.is_file() {
        return Ok(source.to_path_buf());
    }
    stems
        .iter()
        .map(|s| source.join(s))
        .find(|p| p.is_file())
        .ok_or_else(|| GmnError::Ingest { path: source.to_path_buf(), message: format!("none of {stems:?} found") })
}

/// Parse an IDX file with the given magic, returning its dimensions and payload.
pub fn read_idx(path: &Path, magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let err = |m: String| GmnError::Ingest { path: path.to_path_buf(), message: m };
    if bytes.len() < 4 {
        return Err(err("file too short".into()));
    }
    let found = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    if found != magic {
        return Err(err(format!("IDX magic {found:#x}, expected {magic:#x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(err("truncated header".into()));
    }
    let dims: Vec<usize> = (0..ndim).map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize).collect();
    let n: usize = dims.iter().product();
    if bytes.len() != header + n {
        return Err(err(format!("payload of {} bytes, expected {n}", bytes.len() - header)));
    }
    Ok((dims, bytes.split_off(header)))
}

/// Binarize MNIST test digits once with Bernoulli draws `p = intensity / 255`.
pub fn binarize_mnist(dims: &[usize], pixels: &[u8], labels: &[u8], seed: u64) -> Result<GlyphDataset> {
    if dims.len() != 3 || dims[1] != SIDE || dims[2] != SIDE {
        return Err(GmnError::Shape(format!("MNIST images must be N×28×28, got {dims:?}")));
    }
    if dims[0] != labels.len() {
        return Err(GmnError::Shape(format!("{} images but {} labels", dims[0], labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<GlyphClass> = (0..10).map(|d| GlyphClass { class_id: d, alphabet_id: 0, images: Vec::new() }).collect();
    for (i, &label) in labels.iter().enumerate() {
        if label > 9 {
            return Err(GmnError::Contract(format!("label {label} at index {i}")));
        }
        let src = &pixels[i * PIXELS..(i + 1) * PIXELS];
        let mut k = 0;
        let img = BinaryImage::from_fn(|_, _| {
            let p = src[k] as f64 / 255.0;
            k += 1;
            rng.random::<f64>() < p
        });
        classes[label as usize].images.push(img);
    }
    Ok(GlyphDataset { split: Split::Test, classes })
}

/// Ingest the MNIST test IDX files found at `source` into `cache_dir`.
pub fn ingest_mnist_test(source: &Path, cache_dir: &Path, seed: u64) -> Result<Ingested<MnistManifest>> {
    let images_path = idx_file(source, &["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"])?;
    let labels_path = idx_file(source, &["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"])?;
    let (dims, pixels) = read_idx(&images_path, 0x0803)?;
    let (_, labels) = read_idx(&labels_path, 0x0801)?;
    if dims.first() != Some(&MNIST_TEST_COUNT) {
        return Err(GmnError::Ingest {
            path: images_path,
            message: format!("{} images, expected {MNIST_TEST_COUNT}", dims.first().copied().unwrap_or(0)),
        });
    }
    let ds = binarize_mnist(&dims, &pixels, &labels, seed)?;
    let bytes = ds.to_bytes();
    let mut wrote = write_if_changed(&cache_dir.join(MNIST_TEST_FILE), &bytes)?;
    let manifest = MnistManifest {
        source: source.display().to_string(),
        seed,
        test: SplitManifest {
            file: MNIST_TEST_FILE.into(),
            classes: ds.num_classes(),
            images: ds.num_images(),
            alphabets: vec!["digits".into()],
            sha256: sha256_hex(&bytes),
        },
    };
    wrote |= write_if_changed(&cache_dir.join(MNIST_MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(Ingested { manifest, wrote })
}

/// Dataset cache directory: an explicit path or `$GMN_DATA_ROOT`, else `./data`.
pub fn data_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn load_cached(root: &Path, file: &str, split: Split, command: &'static str) -> Result<GlyphDataset> {
    let path = root.join(file);
    if !path.is_file() {
        return Err(GmnError::MissingCache { path, command });
    }
    GlyphDataset::read(&path, split)
}

pub fn load_omniglot(root: &Path, split: Split) -> Result<GlyphDataset> {
    let file = match split {
        Split::Train => OMNIGLOT_TRAIN_FILE,
        Split::Test => OMNIGLOT_TEST_FILE,
    };
    load_cached(root, file, split, "ingest-omniglot")
}

pub fn load_mnist(root: &Path) -> Result<GlyphDataset> {
    load_cached(root, MNIST_TEST_FILE, Split::Test, "ingest-mnist")
}

/// Ordered `(image, class id)` items; prefixes are conditioning sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub items: Vec<(BinaryImage, u32)>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn images(&self) -> Vec<&BinaryImage> {
        self.items.iter().map(|(im, _)| im).collect()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.items.iter().map(|(_, c)| *c).collect()
    }

    pub fn distinct_classes(&self) -> usize {
        self.labels().into_iter().collect::<BTreeSet<_>>().len()
    }
}

/// Draw `classes` distinct classes, then per slot a class uniformly and an image
/// uniformly, without replacement inside a class until its images run out.
pub fn sample_episode<R: Rng + ?Sized>(dataset: &GlyphDataset, len: usize, classes: usize, rng: &mut R) -> Result<Episode> {
    if len == 0 || classes == 0 {
        return Err(GmnError::Contract("episode length and class count must be positive".into()));
    }
    if dataset.num_classes() < classes {
        return Err(GmnError::Contract(format!("{classes} classes requested from a split with {}", dataset.num_classes())));
    }
    let picked: Vec<usize> = sample_indices(rng, dataset.num_classes(), classes).into_vec();
    if let Some(&c) = picked.iter().find(|&&c| dataset.classes[c].images.is_empty()) {
        return Err(GmnError::Contract(format!("class {} has no images", dataset.classes[c].class_id)));
    }
    let mut pools: Vec<Vec<usize>> = picked.iter().map(|_| Vec::new()).collect();
    let mut items = Vec::with_capacity(len);
    for _ in 0..len {
        let slot = rng.random_range(0..classes);
        let class = &dataset.classes[picked[slot]];
        if pools[slot].is_empty() {
            pools[slot] = (0..class.images.len()).collect();
            pools[slot].shuffle(rng);
        }
        let idx = pools[slot].pop().unwrap();
        items.push((class.images[idx].clone(), class.class_id));
    }
    Ok(Episode { items })
}

/// Train and test must share no class and no alphabet.
pub fn audit_disjoint(train: &GlyphDataset, test: &GlyphDataset) -> Result<()> {
    let mut problems = Vec::new();
    let shared: Vec<u32> = train.class_ids().intersection(&test.class_ids()).copied().collect();
    if !shared.is_empty() {
        problems.push(format!("class ids in both splits: {shared:?}"));
    }
    let shared: Vec<u32> = train.alphabet_ids().intersection(&test.alphabet_ids()).copied().collect();
    if !shared.is_empty() {
        problems.push(format!("alphabet ids in both splits: {shared:?}"));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(GmnError::CountMismatch(problems))
    }
}

/// Every label of `episode` must belong to `dataset`.
pub fn audit_episode(episode: &Episode, dataset: &GlyphDataset) -> Result<()> {
    let ids = dataset.class_ids();
    match episode.labels().into_iter().find(|c| !ids.contains(c)) {
        Some(c) => Err(GmnError::Contract(format!("class {c} is not part of the {:?} split", dataset.split))),
        None => Ok(()),
    }
}

/// Independent stream for worker `worker` under `seed`.
pub fn worker_rng(seed: u64, worker: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(worker);
    rng
}

/// Procedural stroke glyphs: each class is a few random line segments, each
/// instance a jittered, slightly thickened rendering of them.
pub fn synthetic_glyphs(classes: usize, per_class: usize, first_class_id: u32, split: Split, seed: u64) -> GlyphDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = (0..classes)
        .map(|c| {
            let strokes: Vec<[f64; 4]> = (0..rng.random_range(2..=4))
                .map(|_| [rng.random_range(5.0..23.0), rng.random_range(5.0..23.0), rng.random_range(5.0..23.0), rng.random_range(5.0..23.0)])
                .collect();
            let images = (0..per_class)
                .map(|_| {
                    let (dx, dy) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
                    let width = rng.random_range(0.9..1.6);
                    let segs: Vec<[f64; 4]> = strokes
                        .iter()
                        .map(|s| {
                            let j = |rng: &mut ChaCha8Rng| rng.random_range(-0.8..0.8);
                            [s[0] + dx + j(&mut rng), s[1] + dy + j(&mut rng), s[2] + dx + j(&mut rng), s[3] + dy + j(&mut rng)]
                        })
                        .collect();
                    BinaryImage::from_fn(|y, x| segs.iter().any(|s| segment_distance(x as f64, y as f64, s) < width))
                })
                .collect();
            GlyphClass { class_id: first_class_id + c as u32, alphabet_id: first_class_id + c as u32, images }
        })
        .collect();
    GlyphDataset { split, classes }
}

fn segment_distance(px: f64, py: f64, s: &[f64; 4]) -> f64 {
    let (ax, ay, bx, by) = (s[0], s[1], s[2], s[3]);
    let (vx, vy) = (bx - ax, by - ay);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 { 0.0 } else { (((px - ax) * vx + (py - ay) * vy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (ax + t * vx, ay + t * vy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}
