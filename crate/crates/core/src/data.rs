//! Re-ID datasets: the Market-style directory layout, a procedural toy
//! generator, image decoding, resizing and channel normalization.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::{rng_for, stream};
use crate::tensor::Tensor;

pub const TRAIN_DIR: &str = "bounding_box_train";
pub const QUERY_DIR: &str = "query";
pub const GALLERY_DIR: &str = "bounding_box_test";

/// Height and width of generated toy images.
pub const SYNTH_HW: (usize, usize) = (384, 192);

const IMAGE_EXTENSIONS: [&str; 5] = ["jpg", "jpeg", "png", "ppm", "pnm"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => TRAIN_DIR,
            Split::Query => QUERY_DIR,
            Split::Gallery => GALLERY_DIR,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    /// Decoded `3 x H x W` pixels in `[0, 1]`.
    Pixels(Arc<Tensor<f32>>),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReidSample {
    pub source: ImageSource,
    /// `-1` marks a distractor, `0` a junk image.
    pub person_id: i64,
    pub camera_id: u32,
    pub split: Split,
}

impl ReidSample {
    /// Distractors and junk images never count as matches.
    pub fn is_distractor(&self) -> bool {
        self.person_id <= 0
    }

    /// Pixels in `[0, 1]`, resized to `hw` when they differ.
    pub fn load(&self, hw: (usize, usize)) -> Result<Tensor<f32>> {
        let img = match &self.source {
            ImageSource::Pixels(t) => {
                let (_, h, w) = dims3(t)?;
                if (h, w) == hw {
                    return Ok(t.as_ref().clone());
                }
                t.as_ref().clone()
            }
            ImageSource::File(p) => decode_image(p)?,
        };
        resize_bilinear(&img, hw)
    }

    /// Market-style file name: `PPPP_cC_IIIIII.png`.
    pub fn file_name(&self, index: usize) -> String {
        if self.person_id < 0 {
            format!("-1_c{}_{index:06}.png", self.camera_id)
        } else {
            format!("{:04}_c{}_{index:06}.png", self.person_id, self.camera_id)
        }
    }
}

/// Parses `ID_cCAM...` (e.g. `0002_c1s1_000451_03.jpg` or `-1_c3s2_...`).
pub fn parse_market_name(name: &str) -> Result<(i64, u32)> {
    let bad = |why: &str| Error::Data(format!("cannot parse file name `{name}`: {why}"));
    let (pid, rest) = name.split_once('_').ok_or_else(|| bad("missing `_` after the person id"))?;
    let person: i64 = pid.parse().map_err(|_| bad("person id is not an integer"))?;
    if person < -1 {
        return Err(bad("person id below -1"));
    }
    let rest = rest.strip_prefix('c').ok_or_else(|| bad("camera field must start with `c`"))?;
    let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
    let camera: u32 = digits.parse().map_err(|_| bad("camera id is not an integer"))?;
    if camera == 0 {
        return Err(bad("camera ids start at 1"));
    }
    Ok((person, camera))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetCounts {
    pub train_images: usize,
    pub train_ids: usize,
    pub query_images: usize,
    pub gallery_images: usize,
    pub distractors: usize,
}

impl fmt::Display for DatasetCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "train_images={} train_ids={} query_images={} gallery_images={} distractors={}",
            self.train_images, self.train_ids, self.query_images, self.gallery_images, self.distractors
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<ReidSample>,
    pub query: Vec<ReidSample>,
    pub gallery: Vec<ReidSample>,
}

impl Dataset {
    pub fn counts(&self) -> DatasetCounts {
        DatasetCounts {
            train_images: self.train.len(),
            train_ids: self.label_map().len(),
            query_images: self.query.len(),
            gallery_images: self.gallery.len(),
            distractors: self.gallery.iter().filter(|s| s.is_distractor()).count(),
        }
    }

    /// Training person ids mapped to contiguous class labels in id order.
    pub fn label_map(&self) -> BTreeMap<i64, usize> {
        let mut ids: Vec<i64> = self.train.iter().map(|s| s.person_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect()
    }

    /// Training samples paired with their class labels.
    pub fn train_labels(&self) -> Result<(Vec<usize>, usize)> {
        let map = self.label_map();
        if let Some(s) = self.train.iter().find(|s| s.is_distractor()) {
            return Err(Error::Data(format!(
                "training split contains distractor/junk id {}",
                s.person_id
            )));
        }
        let labels = self.train.iter().map(|s| map[&s.person_id]).collect();
        Ok((labels, map.len()))
    }

    /// Writes the dataset as PNG files in the Market directory layout.
    pub fn write_market_layout(&self, root: &Path) -> Result<()> {
        for (split, samples) in [
            (Split::Train, &self.train),
            (Split::Query, &self.query),
            (Split::Gallery, &self.gallery),
        ] {
            let dir = root.join(split.dir_name());
            std::fs::create_dir_all(&dir)?;
            for (i, s) in samples.iter().enumerate() {
                let img = match &s.source {
                    ImageSource::Pixels(t) => t.as_ref().clone(),
                    ImageSource::File(p) => decode_image(p)?,
                };
                save_png(&img, &dir.join(s.file_name(i)))?;
            }
        }
        Ok(())
    }
}

/// Reads `bounding_box_train`, `query` and `bounding_box_test` under `root`.
/// Files are listed in sorted order; any unparseable image name is an error.
pub fn ingest_market_layout(root: &Path) -> Result<Dataset> {
    let mut ds = Dataset::default();
    for split in [Split::Train, Split::Query, Split::Gallery] {
        let dir = root.join(split.dir_name());
        if !dir.is_dir() {
            return Err(Error::Data(format!("missing directory {}", dir.display())));
        }
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        paths.sort();
        let out = match split {
            Split::Train => &mut ds.train,
            Split::Query => &mut ds.query,
            Split::Gallery => &mut ds.gallery,
        };
        for path in paths {
            let ext = path
                .extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase)
                .unwrap_or_default();
            if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
                continue;
            }
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let (person_id, camera_id) = parse_market_name(name)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            out.push(ReidSample {
                source: ImageSource::File(path),
                person_id,
                camera_id,
                split,
            });
        }
    }
    if ds.train.is_empty() && ds.query.is_empty() && ds.gallery.is_empty() {
        return Err(Error::Data(format!("no images found under {}", root.display())));
    }
    Ok(ds)
}

/// Reads a dataset described by a split file: one `<role> <path>` pair per
/// line, where the role is `train`, `query` or `gallery` and the path is
/// relative to `root`. Blank lines and `#` comments are skipped. File names
/// follow the same grammar as the Market-1501 layout.
pub fn ingest_split_file(root: &Path, split_file: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(split_file)
        .map_err(|e| Error::Data(format!("{}: {e}", split_file.display())))?;
    let mut ds = Dataset::default();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = |msg: String| Error::Data(format!("{} line {}: {msg}", split_file.display(), no + 1));
        let (role, rel) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| at(format!("expected `<role> <path>`, got `{line}`")))?;
        let (split, out) = match role {
            "train" => (Split::Train, &mut ds.train),
            "query" => (Split::Query, &mut ds.query),
            "gallery" => (Split::Gallery, &mut ds.gallery),
            _ => return Err(at(format!("unknown role `{role}` (train, query, gallery)"))),
        };
        let path = root.join(rel.trim());
        if !path.is_file() {
            return Err(at(format!("no such file {}", path.display())));
        }
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let (person_id, camera_id) = parse_market_name(name).map_err(|e| at(e.to_string()))?;
        out.push(ReidSample {
            source: ImageSource::File(path),
            person_id,
            camera_id,
            split,
        });
    }
    if ds.train.is_empty() && ds.query.is_empty() && ds.gallery.is_empty() {
        return Err(Error::Data(format!("{} lists no images", split_file.display())));
    }
    Ok(ds)
}

struct Identity {
    upper: [f32; 3],
    lower: [f32; 3],
    accent: [f32; 3],
    period: usize,
    vertical_stripes: bool,
    waist: f32,
    width: f32,
}

struct Camera {
    gain: [f32; 3],
    offset: [f32; 3],
    background: [f32; 3],
}

fn color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

/// Procedural toy re-ID data. Each identity has a fixed clothing palette and
/// stripe texture; each camera a fixed photometric gain/offset and
/// background; each image a random placement, scale and pixel noise.
/// Per identity, the first `per_id / 2` images train, the next one is the
/// query and the rest form the gallery; image `j` comes from camera
/// `j % cameras + 1`.
pub fn synth_dataset(num_ids: usize, per_id: usize, cameras: usize, seed: u64) -> Result<Dataset> {
    if num_ids < 2 || per_id < 2 || cameras < 2 {
        return Err(Error::Data(format!(
            "synthetic dataset needs at least 2 ids, 2 images per id and 2 cameras (got {num_ids}, {per_id}, {cameras})"
        )));
    }
    let cams: Vec<Camera> = (0..cameras)
        .map(|c| {
            let mut rng = rng_for(seed, stream::SYNTH_CAMERA, c as u64);
            Camera {
                gain: [0; 3].map(|_| rng.gen_range(0.85..1.15)),
                offset: [0; 3].map(|_| rng.gen_range(-0.05..0.05)),
                background: color(&mut rng),
            }
        })
        .collect();
    let train_per_id = per_id / 2;
    let mut ds = Dataset::default();
    for id in 0..num_ids {
        let mut rng = rng_for(seed, stream::SYNTH_IDENTITY, id as u64);
        let ident = Identity {
            upper: color(&mut rng),
            lower: color(&mut rng),
            accent: color(&mut rng),
            period: rng.gen_range(8..40),
            vertical_stripes: rng.gen_bool(0.5),
            waist: rng.gen_range(0.42..0.6),
            width: rng.gen_range(0.45..0.7),
        };
        for j in 0..per_id {
            let cam = j % cameras;
            let index = (id * per_id + j) as u64;
            let pixels = render_synth(&ident, &cams[cam], &mut rng_for(seed, stream::SYNTH_IMAGE, index));
            let split = if j < train_per_id {
                Split::Train
            } else if j == train_per_id {
                Split::Query
            } else {
                Split::Gallery
            };
            let sample = ReidSample {
                source: ImageSource::Pixels(Arc::new(pixels)),
                person_id: id as i64 + 1,
                camera_id: cam as u32 + 1,
                split,
            };
            match split {
                Split::Train => ds.train.push(sample),
                Split::Query => ds.query.push(sample),
                Split::Gallery => ds.gallery.push(sample),
            }
        }
    }
    Ok(ds)
}

fn render_synth(ident: &Identity, cam: &Camera, rng: &mut impl Rng) -> Tensor<f32> {
    let (h, w) = SYNTH_HW;
    let scale: f32 = rng.gen_range(0.85..1.0);
    let body_h = h as f32 * 0.85 * scale;
    let body_w = w as f32 * ident.width * scale;
    let top = rng.gen_range(0.02..(h as f32 - body_h - 1.0).max(0.03));
    let left = rng.gen_range(0.0..(w as f32 - body_w).max(1.0));
    let head = body_h * 0.14;
    let waist = top + head + (body_h - head) * ident.waist;
    let phase = rng.gen_range(0..ident.period);
    let shade = rng.gen_range(0.9f32..1.1);
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f32, x as f32);
            let inside = fx >= left && fx < left + body_w && fy >= top && fy < top + body_h;
            let rgb = if !inside {
                let tint = ((x / 24 + y / 24) % 2) as f32 * 0.06;
                cam.background.map(|c| c + tint)
            } else if fy < top + head {
                [0.85, 0.7, 0.55]
            } else if fy < waist {
                let t = if ident.vertical_stripes { x } else { y };
                if (t + phase) % ident.period < ident.period / 2 {
                    ident.upper
                } else {
                    ident.accent
                }
            } else {
                ident.lower
            };
            for c in 0..3 {
                let noise: f32 = rng.gen_range(-0.03..0.03);
                let v = (rgb[c] * shade + noise) * cam.gain[c] + cam.offset[c];
                // Quantized to 8 bits so PNG round trips are exact.
                data[c * h * w + y * w + x] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    Tensor::new(&[3, h, w], data).expect("sized above")
}

fn dims3(t: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Shape {
            expected: vec![3, 0, 0],
            actual: t.shape().to_vec(),
        }),
    }
}

/// Decodes an 8-bit image into `3 x H x W` floats in `[0, 1]`.
pub fn decode_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    }))
}

pub fn save_png(img: &Tensor<f32>, path: &Path) -> Result<()> {
    let (c, h, w) = dims3(img)?;
    if c != 3 {
        return Err(Error::Dim {
            axis: "channels",
            expected: 3,
            actual: c,
        });
    }
    let d = img.data();
    let raw: Vec<u8> = (0..h * w * 3)
        .map(|i| {
            let (p, ch) = (i / 3, i % 3);
            (d[ch * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    image::RgbImage::from_raw(w as u32, h as u32, raw)
        .expect("buffer sized to the image")
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
}

/// Bilinear resize with half-pixel centers (an exact 2x downscale averages
/// 2x2 blocks).
pub fn resize_bilinear(img: &Tensor<f32>, (oh, ow): (usize, usize)) -> Result<Tensor<f32>> {
    let (c, h, w) = dims3(img)?;
    if (h, w) == (oh, ow) {
        return Ok(img.clone());
    }
    if oh == 0 || ow == 0 {
        return Err(Error::Invalid("resize target must be non-empty".into()));
    }
    let axis = |o: usize, out: usize, inp: usize| {
        let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let ys: Vec<_> = (0..oh).map(|y| axis(y, oh, h)).collect();
    let xs: Vec<_> = (0..ow).map(|x| axis(x, ow, w)).collect();
    let src = img.data();
    Ok(Tensor::from_fn(&[c, oh, ow], |i| {
        let (ch, y, x) = (i / (oh * ow), (i / ow) % oh, i % ow);
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let at = |yy: usize, xx: usize| src[ch * h * w + yy * w + xx];
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    }))
}

/// Stacks `3 x H x W` images into an `N x 3 x H x W` batch.
pub fn stack_images(images: Vec<Tensor<f32>>) -> Result<Tensor<f32>> {
    let batched = images
        .into_iter()
        .map(|img| {
            let mut shape = vec![1];
            shape.extend_from_slice(img.shape());
            img.reshape(&shape)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&batched)
}

/// Per-channel `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    /// The ImageNet statistics used by pretrained backbones.
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }

    pub fn apply(&self, img: &mut Tensor<f32>) -> Result<()> {
        let (c, h, w) = dims3(img)?;
        if c != 3 {
            return Err(Error::Dim {
                axis: "channels",
                expected: 3,
                actual: c,
            });
        }
        for (ch, plane) in img.data_mut().chunks_mut(h * w).enumerate() {
            let (m, s) = (self.mean[ch] as f32, self.std[ch] as f32);
            plane.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(())
    }
}
