//! Procedural image-caption corpus.
//!
//! Scenes hold one to three colored shapes on a patterned background, laid
//! out on a 2×2 grid of cells. Captions mention a random nonempty subset of
//! the objects and never the background, so some visible content always goes
//! undescribed. Every record is a pure function of `(seed, index)`.

mod image;
mod tokenizer;

pub use image::ImageArray;
pub use tokenizer::{vocab_size, vocabulary_file, TokenSequence, Tokenizer, EOS, PAD, SOS, UNK, VOCABULARY};

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DESK_IMAGE_SIZE: usize = 32;
pub const DESK_PATCH_SIZE: usize = 8;
pub const DESK_CONTEXT_LENGTH: usize = 32;
pub const PAPER_IMAGE_SIZE: usize = 224;
pub const PAPER_PATCH_SIZE: usize = 16;
pub const PAPER_CONTEXT_LENGTH: usize = 77;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("output already exists at {0} (pass force to overwrite)")]
    Exists(PathBuf),
    #[error("corpus must contain at least one record")]
    Empty,
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid corpus: {0}")]
    Invalid(String),
}

impl From<serde_json::Error> for CorpusError {
    fn from(e: serde_json::Error) -> Self {
        CorpusError::Format(e.to_string())
    }
}

macro_rules! closed_vocab {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }
        }
    };
}

closed_vocab!(ShapeKind {
    Circle => "circle",
    Square => "square",
    Triangle => "triangle",
    Cross => "cross",
});

closed_vocab!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    Cyan => "cyan",
    Magenta => "magenta",
    White => "white",
    Orange => "orange",
});

closed_vocab!(Size {
    Small => "small",
    Large => "large",
});

closed_vocab!(
    /// A cell of the 2×2 layout grid.
    Position {
        TopLeft => "top left",
        TopRight => "top right",
        BottomLeft => "bottom left",
        BottomRight => "bottom right",
    }
);

closed_vocab!(Pattern {
    Plain => "plain",
    Striped => "striped",
    Checker => "checker",
    Gradient => "gradient",
});

impl ShapeKind {
    /// Segmentation class id; 0 is background.
    pub fn class_id(self) -> u8 {
        self as u8 + 1
    }
}

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.75, 0.2],
            Color::Blue => [0.15, 0.25, 0.9],
            Color::Yellow => [0.95, 0.9, 0.15],
            Color::Cyan => [0.1, 0.85, 0.85],
            Color::Magenta => [0.85, 0.15, 0.8],
            Color::White => [0.97, 0.97, 0.97],
            Color::Orange => [0.98, 0.55, 0.1],
        }
    }
}

impl Position {
    fn cell(self) -> (usize, usize) {
        match self {
            Position::TopLeft => (0, 0),
            Position::TopRight => (0, 1),
            Position::BottomLeft => (1, 0),
            Position::BottomRight => (1, 1),
        }
    }
}

/// Segmentation class names, indexed by class id.
pub const SEGMENTATION_CLASSES: [&str; 5] = ["background", "circle", "square", "triangle", "cross"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: Color,
    pub size: Size,
    pub position: Position,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Background {
    pub pattern: Pattern,
    pub color: Color,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub background: Background,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if !(1..=3).contains(&self.objects.len()) {
            return Err(CorpusError::Invalid(format!(
                "scene has {} objects, expected 1 to 3",
                self.objects.len()
            )));
        }
        let cells: HashSet<Position> = self.objects.iter().map(|o| o.position).collect();
        if cells.len() != self.objects.len() {
            return Err(CorpusError::Invalid("two objects share a grid cell".into()));
        }
        Ok(())
    }

    /// Per-pixel class ids (0 = background) for a square image.
    fn pixel_classes(&self, size: usize) -> Vec<u8> {
        let cell = size as f64 / 2.0;
        let mut out = vec![0u8; size * size];
        for obj in &self.objects {
            let (cy, cx) = obj.position.cell();
            let center = (cx as f64 * cell + cell / 2.0, cy as f64 * cell + cell / 2.0);
            let r = match obj.size {
                Size::Large => 0.44 * cell,
                Size::Small => 0.28 * cell,
            };
            for y in 0..size {
                for x in 0..size {
                    let dx = x as f64 + 0.5 - center.0;
                    let dy = y as f64 + 0.5 - center.1;
                    if covers(obj.shape, dx, dy, r) {
                        out[y * size + x] = obj.shape.class_id();
                    }
                }
            }
        }
        out
    }

    pub fn render(&self, size: usize) -> ImageArray {
        let classes = self.pixel_classes(size);
        let bg = self.background.color.rgb();
        let mut data = Vec::with_capacity(size * size * 3);
        for y in 0..size {
            for x in 0..size {
                let owner = self
                    .objects
                    .iter()
                    .find(|o| classes[y * size + x] != 0 && o.position == position_of(x, y, size));
                let rgb = match owner {
                    Some(o) => o.color.rgb(),
                    None => {
                        let f = match self.background.pattern {
                            Pattern::Plain => 1.0,
                            Pattern::Striped => if (y / 4) % 2 == 0 { 1.0 } else { 0.45 },
                            Pattern::Checker => if (x / 4 + y / 4) % 2 == 0 { 1.0 } else { 0.45 },
                            Pattern::Gradient => 0.35 + 0.65 * x as f64 / (size - 1).max(1) as f64,
                        };
                        [bg[0] * f, bg[1] * f, bg[2] * f]
                    }
                };
                // quantized so that in-memory images equal their PPM encoding
                data.extend(rgb.iter().map(|v| (v * 255.0).round() / 255.0));
            }
        }
        ImageArray::new(size, size, data).expect("rendered pixels are in range")
    }

    /// Per-patch class ids, row-major. An object claims a patch when it
    /// covers at least an eighth of the patch's pixels; ties go to the
    /// larger coverage, then the lower class id.
    pub fn patch_labels(&self, size: usize, patch: usize) -> Vec<u8> {
        let classes = self.pixel_classes(size);
        let g = size / patch;
        let mut out = Vec::with_capacity(g * g);
        for py in 0..g {
            for px in 0..g {
                let mut counts = [0usize; 5];
                for y in py * patch..(py + 1) * patch {
                    for x in px * patch..(px + 1) * patch {
                        counts[classes[y * size + x] as usize] += 1;
                    }
                }
                let (best, n) = (1..5)
                    .map(|c| (c, counts[c]))
                    .fold((0, 0), |acc, (c, n)| if n > acc.1 { (c, n) } else { acc });
                out.push(if n * 8 >= patch * patch { best as u8 } else { 0 });
            }
        }
        out
    }
}

fn position_of(x: usize, y: usize, size: usize) -> Position {
    match (y * 2 >= size, x * 2 >= size) {
        (false, false) => Position::TopLeft,
        (false, true) => Position::TopRight,
        (true, false) => Position::BottomLeft,
        (true, true) => Position::BottomRight,
    }
}

fn covers(shape: ShapeKind, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => dx.abs().max(dy.abs()) <= 0.8 * r,
        ShapeKind::Triangle => {
            let t = (dy + r) / (2.0 * r);
            (0.0..=1.0).contains(&t) && dx.abs() <= t * r
        }
        ShapeKind::Cross => {
            let arm = r / 3.0;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
    }
}

/// Caption templates; `{}` receives the object list.
pub const CAPTION_TEMPLATES: [&str; 4] = ["{}", "a picture of {}", "an image with {}", "there is {}"];

pub fn object_phrase(o: &SceneObject) -> String {
    format!(
        "a {} {} {} in the {}",
        o.size.word(),
        o.color.word(),
        o.shape.word(),
        o.position.word()
    )
}

/// Deterministically renders a caption from its template and mentioned subset.
pub fn render_caption(
    template_id: usize,
    scene: &SceneSpec,
    mentioned: &[usize],
) -> Result<String, CorpusError> {
    let template = CAPTION_TEMPLATES
        .get(template_id)
        .ok_or_else(|| CorpusError::Invalid(format!("unknown caption template {template_id}")))?;
    if mentioned.is_empty() {
        return Err(CorpusError::Invalid("caption mentions no objects".into()));
    }
    let mut parts = Vec::with_capacity(mentioned.len());
    for &i in mentioned {
        let o = scene
            .objects
            .get(i)
            .ok_or_else(|| CorpusError::Invalid(format!("mentioned object {i} not in scene")))?;
        parts.push(object_phrase(o));
    }
    Ok(template.replace("{}", &parts.join(" and ")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: usize,
    pub template_id: usize,
    /// Indices into the scene's objects, ascending.
    pub mentioned: Vec<usize>,
    pub text: String,
}

impl CaptionRecord {
    pub fn validate(&self, scene: &SceneSpec) -> Result<(), CorpusError> {
        let expected = render_caption(self.template_id, scene, &self.mentioned)?;
        if expected != self.text {
            return Err(CorpusError::Invalid(format!(
                "caption {:?} does not match its scene (expected {expected:?})",
                self.text
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub image_size: usize,
    pub patch_size: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            image_size: DESK_IMAGE_SIZE,
            patch_size: DESK_PATCH_SIZE,
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.patch_size == 0 || self.image_size % (2 * self.patch_size) != 0 {
            return Err(CorpusError::Geometry(format!(
                "image size {} must be a multiple of twice the patch size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// Knobs for in-memory generation beyond the default pretraining corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneOptions {
    pub geometry: Geometry,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Mention every object instead of a random nonempty subset.
    pub mention_all: bool,
    /// Resample records whose caption duplicates an earlier one.
    pub unique_captions: bool,
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self {
            geometry: Geometry::default(),
            min_objects: 1,
            max_objects: 3,
            mention_all: false,
            unique_captions: true,
        }
    }
}

impl SceneOptions {
    /// Single-object scenes with full captions: the shape-classification set.
    pub fn single_object() -> Self {
        Self {
            min_objects: 1,
            max_objects: 1,
            mention_all: true,
            unique_captions: false,
            ..Self::default()
        }
    }
}

/// One image-caption pair with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub scene: SceneSpec,
    pub caption: CaptionRecord,
    pub image: ImageArray,
    /// Per-patch class ids, row-major.
    pub labels: Vec<u8>,
}

impl Sample {
    pub fn validate(&self) -> Result<(), CorpusError> {
        self.scene.validate()?;
        self.caption.validate(&self.scene)
    }

    /// Class of the first object; the label of single-object scenes.
    pub fn primary_shape(&self) -> ShapeKind {
        self.scene.objects[0].shape
    }
}

fn record_rng(seed: u64, index: usize, attempt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((index as u64) << 20) | attempt);
    rng
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[T]) -> T {
    items[rng.random_range(0..items.len())]
}

fn sample_scene(rng: &mut ChaCha8Rng, opts: &SceneOptions) -> SceneSpec {
    let count = rng.random_range(opts.min_objects..=opts.max_objects);
    let mut cells: Vec<usize> = sample(rng, 4, count).into_vec();
    cells.sort_unstable();
    let objects: Vec<SceneObject> = cells
        .into_iter()
        .map(|c| SceneObject {
            shape: pick(rng, ShapeKind::ALL),
            color: pick(rng, Color::ALL),
            size: pick(rng, Size::ALL),
            position: Position::ALL[c],
        })
        .collect();
    let free: Vec<Color> = Color::ALL
        .iter()
        .copied()
        .filter(|c| objects.iter().all(|o| o.color != *c))
        .collect();
    let background = Background {
        pattern: pick(rng, Pattern::ALL),
        color: pick(rng, &free),
    };
    SceneSpec {
        objects,
        background,
    }
}

fn sample_record(
    seed: u64,
    index: usize,
    attempt: u64,
    opts: &SceneOptions,
) -> Result<Sample, CorpusError> {
    let mut rng = record_rng(seed, index, attempt);
    let scene = sample_scene(&mut rng, opts);
    let n = scene.objects.len();
    let mentioned: Vec<usize> = if opts.mention_all {
        (0..n).collect()
    } else {
        let k = rng.random_range(1..=n);
        let mut m = sample(&mut rng, n, k).into_vec();
        m.sort_unstable();
        m
    };
    let template_id = rng.random_range(0..CAPTION_TEMPLATES.len());
    let text = render_caption(template_id, &scene, &mentioned)?;
    let g = opts.geometry;
    Ok(Sample {
        id: index,
        image: scene.render(g.image_size),
        labels: scene.patch_labels(g.image_size, g.patch_size),
        caption: CaptionRecord {
            image_id: index,
            template_id,
            mentioned,
            text,
        },
        scene,
    })
}

/// Generates `n` records in memory. Pure in `(n, seed, opts)`.
pub fn generate_samples(n: usize, seed: u64, opts: &SceneOptions) -> Result<Vec<Sample>, CorpusError> {
    if n == 0 {
        return Err(CorpusError::Empty);
    }
    opts.geometry.validate()?;
    if opts.min_objects == 0 || opts.min_objects > opts.max_objects || opts.max_objects > 4 {
        return Err(CorpusError::Invalid("object count range must lie within 1..=4".into()));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    for index in 0..n {
        let mut attempt = 0;
        loop {
            let s = sample_record(seed, index, attempt, opts)?;
            if !opts.unique_captions || seen.insert(s.caption.text.clone()) {
                out.push(s);
                break;
            }
            attempt += 1;
            if attempt > 10_000 {
                return Err(CorpusError::Invalid(
                    "caption space exhausted while enforcing uniqueness".into(),
                ));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    id: usize,
    image: String,
    caption: String,
    labels: Vec<Vec<u8>>,
    template_id: usize,
    mentioned: Vec<usize>,
    scene: SceneSpec,
}

/// Paths written by [`generate_corpus`].
#[derive(Debug, Clone)]
pub struct CorpusFiles {
    pub manifest: PathBuf,
    pub vocabulary: PathBuf,
    pub images: Vec<PathBuf>,
}

/// Writes `n` records under `dir`: `manifest.jsonl`, `vocab.txt` and
/// `images/NNNNNN.ppm`. Refuses to overwrite an existing manifest unless
/// `force` is set.
pub fn generate_corpus(n: usize, seed: u64, dir: &Path, force: bool) -> Result<CorpusFiles, CorpusError> {
    let samples = generate_samples(n, seed, &SceneOptions::default())?;
    write_corpus(&samples, Geometry::default(), dir, force)
}

pub fn write_corpus(
    samples: &[Sample],
    geometry: Geometry,
    dir: &Path,
    force: bool,
) -> Result<CorpusFiles, CorpusError> {
    let manifest = dir.join(MANIFEST_FILE);
    if manifest.exists() && !force {
        return Err(CorpusError::Exists(manifest));
    }
    fs::create_dir_all(dir.join("images"))?;
    let vocabulary = dir.join(VOCAB_FILE);
    fs::write(&vocabulary, vocabulary_file())?;
    let grid = geometry.grid();
    let mut lines = Vec::new();
    let mut images = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = format!("images/{:06}.ppm", s.id);
        let path = dir.join(&rel);
        fs::write(&path, s.image.to_ppm())?;
        images.push(path);
        let line = ManifestLine {
            id: s.id,
            image: rel,
            caption: s.caption.text.clone(),
            labels: s.labels.chunks(grid).map(<[u8]>::to_vec).collect(),
            template_id: s.caption.template_id,
            mentioned: s.caption.mentioned.clone(),
            scene: s.scene.clone(),
        };
        writeln!(lines, "{}", serde_json::to_string(&line)?)?;
    }
    fs::write(&manifest, lines)?;
    Ok(CorpusFiles {
        manifest,
        vocabulary,
        images,
    })
}

/// Reads a corpus written by [`generate_corpus`], validating every record.
pub fn load_corpus(dir: &Path) -> Result<Vec<Sample>, CorpusError> {
    let file = fs::File::open(dir.join(MANIFEST_FILE))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine = serde_json::from_str(&line)?;
        let image = ImageArray::from_ppm(&fs::read(dir.join(&m.image))?)?;
        let sample = Sample {
            id: m.id,
            caption: CaptionRecord {
                image_id: m.id,
                template_id: m.template_id,
                mentioned: m.mentioned,
                text: m.caption,
            },
            scene: m.scene,
            image,
            labels: m.labels.concat(),
        };
        sample.validate()?;
        out.push(sample);
    }
    if out.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_records_rejected() {
        assert!(matches!(
            generate_samples(0, 1, &SceneOptions::default()),
            Err(CorpusError::Empty)
        ));
    }

    #[test]
    fn captions_are_unique_and_consistent() {
        let s = generate_samples(200, 3, &SceneOptions::default()).unwrap();
        let texts: HashSet<_> = s.iter().map(|r| r.caption.text.clone()).collect();
        assert_eq!(texts.len(), 200);
        for r in &s {
            r.validate().unwrap();
            assert!(r.caption.text.split_whitespace().count() + 2 <= DESK_CONTEXT_LENGTH);
        }
    }

    #[test]
    fn background_never_mentioned() {
        for r in generate_samples(100, 9, &SceneOptions::default()).unwrap() {
            assert!(!r.caption.text.contains("background"));
            for p in Pattern::ALL {
                assert!(!r.caption.text.contains(p.word()));
            }
        }
    }

    #[test]
    fn background_color_differs_from_objects() {
        for r in generate_samples(100, 4, &SceneOptions::default()).unwrap() {
            assert!(r.scene.objects.iter().all(|o| o.color != r.scene.background.color));
        }
    }

    #[test]
    fn large_object_claims_its_cell() {
        let scene = SceneSpec {
            objects: vec![SceneObject {
                shape: ShapeKind::Square,
                color: Color::Red,
                size: Size::Large,
                position: Position::BottomRight,
            }],
            background: Background {
                pattern: Pattern::Plain,
                color: Color::Blue,
            },
        };
        let labels = scene.patch_labels(32, 8);
        let sq = ShapeKind::Square.class_id();
        let expected: Vec<u8> = (0..16)
            .map(|i| if i / 4 >= 2 && i % 4 >= 2 { sq } else { 0 })
            .collect();
        assert_eq!(labels, expected);
        let img = scene.render(32);
        assert_eq!(img.pixel(24, 24), [230.0 / 255.0, 26.0 / 255.0, 26.0 / 255.0]);
        assert_eq!(img.pixel(0, 0)[2], (0.9f64 * 255.0).round() / 255.0);
    }

    #[test]
    fn caption_render_rejects_bad_subsets() {
        let s = &generate_samples(1, 1, &SceneOptions::default()).unwrap()[0];
        assert!(render_caption(0, &s.scene, &[]).is_err());
        assert!(render_caption(0, &s.scene, &[7]).is_err());
        assert!(render_caption(9, &s.scene, &[0]).is_err());
    }

    #[test]
    fn single_object_options() {
        for r in generate_samples(50, 2, &SceneOptions::single_object()).unwrap() {
            assert_eq!(r.scene.objects.len(), 1);
            assert_eq!(r.caption.mentioned, vec![0]);
        }
    }
}
