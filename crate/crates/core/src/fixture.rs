//! Desk-scale synthetic fixture: a small seeded convolutional backbone,
//! synthetic face / object / pareidolia rasters, dataset manifests, human
//! judgments and an experiment manifest.
//!
//! Faces are skin-toned ovals with two dark eyes above a mouth. Objects are
//! clutters of colored rectangles and ellipses. Pareidolia images are object
//! bodies carrying a face-like eye/eye/mouth arrangement whose contrast grows
//! with a per-image face-likeness `s`; simulated judges say "face" with
//! probability rising in `s`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

use crate::backbone::fixtures::desk_backbone;

pub const SIDE: u32 = 64;
pub const N_JUDGES: u64 = 30;

#[derive(Debug, Clone, Copy)]
pub struct FixtureSpec {
    pub seed: u64,
    pub backbone_seed: u64,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_set: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec { seed: 20_240_601, backbone_seed: 7, train_per_class: 60, val_per_class: 20, test_per_set: 30 }
    }
}

type Color = [f32; 3];

fn rgb(c: Color) -> Rgb<u8> {
    Rgb(c.map(|v| v.round().clamp(0.0, 255.0) as u8))
}

fn lerp(a: Color, b: Color, t: f32) -> Color {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])]
}

fn random_color(rng: &mut impl Rng, lo: f32, hi: f32) -> Color {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

fn skin(rng: &mut impl Rng) -> Color {
    [rng.random_range(195.0..235.0), rng.random_range(150.0..190.0), rng.random_range(120.0..160.0)]
}

fn fill_ellipse(img: &mut RgbImage, cx: f32, cy: f32, rx: f32, ry: f32, c: Color) {
    for y in 0..img.height() {
        for x in 0..img.width() {
            let dx = (x as f32 + 0.5 - cx) / rx;
            let dy = (y as f32 + 0.5 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                img.put_pixel(x, y, rgb(c));
            }
        }
    }
}

fn fill_rect(img: &mut RgbImage, x0: f32, y0: f32, x1: f32, y1: f32, c: Color) {
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            if px >= x0 && px < x1 && py >= y0 && py < y1 {
                img.put_pixel(x, y, rgb(c));
            }
        }
    }
}

fn background(rng: &mut impl Rng) -> RgbImage {
    let top = random_color(rng, 40.0, 200.0);
    let bottom = lerp(top, random_color(rng, 40.0, 200.0), 0.5);
    RgbImage::from_fn(SIDE, SIDE, |_, y| rgb(lerp(top, bottom, y as f32 / SIDE as f32)))
}

/// Eyes and mouth centered on (cx, cy) of a face-sized region.
fn face_marks(img: &mut RgbImage, rng: &mut impl Rng, cx: f32, cy: f32, scale: f32, c: Color) {
    let eye_dx = rng.random_range(6.0..8.5) * scale;
    let eye_y = cy - rng.random_range(5.0..8.0) * scale;
    let eye_r = rng.random_range(2.0..3.2) * scale;
    fill_ellipse(img, cx - eye_dx, eye_y, eye_r, eye_r, c);
    fill_ellipse(img, cx + eye_dx, eye_y, eye_r, eye_r, c);
    let mouth_w = rng.random_range(5.0..8.0) * scale;
    let mouth_y = cy + rng.random_range(8.0..11.0) * scale;
    fill_rect(img, cx - mouth_w, mouth_y, cx + mouth_w, mouth_y + rng.random_range(2.0..3.5) * scale, c);
}

pub fn face_image(rng: &mut impl Rng) -> RgbImage {
    let mut img = background(rng);
    let cx = 32.0 + rng.random_range(-3.0..3.0);
    let cy = 34.0 + rng.random_range(-3.0..3.0);
    let (rx, ry) = (rng.random_range(15.0..19.0), rng.random_range(19.0..24.0));
    // hair
    let hair = random_color(rng, 10.0, 90.0);
    fill_ellipse(&mut img, cx, cy - ry * 0.35, rx * 1.08, ry * 0.75, hair);
    fill_ellipse(&mut img, cx, cy, rx, ry, skin(rng));
    let dark = random_color(rng, 10.0, 60.0);
    face_marks(&mut img, rng, cx, cy, 1.0, dark);
    img
}

fn clutter(img: &mut RgbImage, rng: &mut impl Rng, n: usize) {
    for _ in 0..n {
        let c = random_color(rng, 0.0, 255.0);
        let (x, y) = (rng.random_range(0.0..56.0), rng.random_range(0.0..56.0));
        let (w, h) = (rng.random_range(8.0..30.0), rng.random_range(8.0..30.0));
        if rng.random_bool(0.5) {
            fill_rect(img, x, y, x + w, y + h, c);
        } else {
            fill_ellipse(img, x + w / 2.0, y + h / 2.0, w / 2.0, h / 2.0, c);
        }
    }
}

pub fn object_image(rng: &mut impl Rng) -> RgbImage {
    let mut img = background(rng);
    let n = rng.random_range(2..5);
    clutter(&mut img, rng, n);
    img
}

/// Object body with a face-like arrangement; `s` in [0, 1] sets how
/// face-like it looks.
pub fn pareidolia_image(rng: &mut impl Rng, s: f32) -> RgbImage {
    let mut img = background(rng);
    clutter(&mut img, rng, 1);
    let body = lerp(random_color(rng, 60.0, 230.0), skin(rng), 0.4 * s);
    let cx = 32.0 + rng.random_range(-4.0..4.0);
    let cy = 33.0 + rng.random_range(-4.0..4.0);
    let (w, h) = (rng.random_range(15.0..21.0), rng.random_range(16.0..23.0));
    if rng.random_bool(0.5) {
        fill_rect(&mut img, cx - w, cy - h, cx + w, cy + h, body);
    } else {
        fill_ellipse(&mut img, cx, cy, w, h, body);
    }
    let marks = lerp(body, [20.0, 20.0, 20.0], 0.25 + 0.75 * s);
    let scale = rng.random_range(0.8..1.1);
    face_marks(&mut img, rng, cx, cy, scale, marks);
    img
}

#[derive(Debug, Clone)]
pub struct GeneratedFixture {
    pub dir: PathBuf,
    pub experiment_manifest: PathBuf,
}

fn save(img: &RgbImage, path: &Path) -> std::io::Result<()> {
    img.save(path).map_err(std::io::Error::other)
}

pub const EXPERIMENT_TOML: &str = r#"# Desk-scale fixture experiment. Paths resolve against this file.
seed = 20240601
model = "desk_backbone.onnx"
datasets = ["train.tsv", "val.tsv", "test.tsv"]
judgments = "judgments.csv"
output_dir = "out"
extract_batch_size = 16

[train]
epochs = 40
batch_size = 64

# The fixture has 120 training images (two batches per epoch); at the
# default 1e-4 the head barely moves from its random start in 80 steps.
[train.optimizer]
kind = "adam"
learning_rate = 0.01
beta1 = 0.9
beta2 = 0.999
epsilon = 1e-8

[bootstrap]
n_resamples = 2000
level = 0.95

[units]
alpha = 0.05
correction = "none"
grid_rows = 8
grid_cols = 8
"#;

/// Writes the fixture into `dir` (created if needed).
pub fn generate(dir: &Path, spec: &FixtureSpec) -> std::io::Result<GeneratedFixture> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut train = String::from("# id\tpath\tlabel\tset\n");
    let mut val = train.clone();
    let mut test = train.clone();
    let emit = |out: &mut String, id: &str, img: &RgbImage, label: &str, set: &str| -> std::io::Result<()> {
        let rel = format!("images/{id}.png");
        save(img, &dir.join(&rel))?;
        writeln!(out, "{id}\t{rel}\t{label}\t{set}").expect("writing to a String");
        Ok(())
    };

    for i in 0..spec.train_per_class {
        emit(&mut train, &format!("train_face_{i:03}"), &face_image(&mut rng), "face", "train")?;
        emit(&mut train, &format!("train_object_{i:03}"), &object_image(&mut rng), "object", "train")?;
    }
    for i in 0..spec.val_per_class {
        emit(&mut val, &format!("val_face_{i:03}"), &face_image(&mut rng), "face", "validation")?;
        emit(&mut val, &format!("val_object_{i:03}"), &object_image(&mut rng), "object", "validation")?;
    }
    for i in 0..spec.test_per_set {
        emit(&mut test, &format!("test_face_{i:03}"), &face_image(&mut rng), "face", "test_face")?;
    }
    for i in 0..spec.test_per_set {
        emit(&mut test, &format!("test_object_{i:03}"), &object_image(&mut rng), "object", "test_object")?;
    }
    let mut judgments = String::from("record_id,n_judges,n_face_judgments\n");
    for i in 0..spec.test_per_set {
        let s = (i as f32 + 0.5) / spec.test_per_set as f32;
        let id = format!("test_pareidolia_{i:03}");
        emit(&mut test, &id, &pareidolia_image(&mut rng, s), "object", "test_pareidolia")?;
        let p = (0.05 + 0.9 * s as f64).clamp(0.0, 1.0);
        let k = Binomial::new(N_JUDGES, p).expect("valid binomial").sample(&mut rng);
        writeln!(judgments, "{id},{N_JUDGES},{k}").expect("writing to a String");
    }

    std::fs::write(dir.join("train.tsv"), train)?;
    std::fs::write(dir.join("val.tsv"), val)?;
    std::fs::write(dir.join("test.tsv"), test)?;
    std::fs::write(dir.join("judgments.csv"), judgments)?;
    std::fs::write(dir.join("desk_backbone.onnx"), desk_backbone(spec.backbone_seed).encode())?;
    let manifest = dir.join("experiment.toml");
    std::fs::write(&manifest, EXPERIMENT_TOML)?;
    Ok(GeneratedFixture { dir: dir.to_path_buf(), experiment_manifest: manifest })
}
