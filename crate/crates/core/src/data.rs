//! Synthetic shapes dataset, split manifests and VOC-style annotation files.
//!
//! On-disk layout of a dataset directory:
//!
//! ```text
//! dataset.json            generation spec and split sizes
//! manifest.json           {"labeled": [...], "unlabeled": [...], "eval": [...]}
//! images/<id>.png
//! annotations/<id>.xml    VOC schema, 1-based inclusive pixel coordinates
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{AnnotatedObject, Annotation};
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether the pixel center `(px, py)` lies inside the shape drawn in the
    /// `size × size` square at `(x0, y0)`.
    fn contains(self, x0: f64, y0: f64, size: f64, px: f64, py: f64) -> bool {
        let (u, v) = ((px - x0) / size, (py - y0) / size);
        match self {
            Shape::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            Shape::Square => (0.0..1.0).contains(&u) && (0.0..1.0).contains(&v),
            // Apex at the top center, base along the bottom edge.
            Shape::Triangle => (0.0..1.0).contains(&v) && (u - 0.5).abs() <= 0.5 * v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Noise,
    Gradient,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeClass {
    pub shape: Shape,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub image_size: u32,
    pub classes: Vec<ShapeClass>,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Side length range of a shape's square footprint, in pixels.
    pub min_size: u32,
    pub max_size: u32,
    pub background: Background,
    /// Fraction of each object's color drawn at random instead of from its class color.
    pub color_jitter: f64,
    /// Standard deviation of per-pixel noise, in 0..255 units.
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 96,
            classes: vec![
                ShapeClass {
                    shape: Shape::Circle,
                    color: [220, 60, 50],
                },
                ShapeClass {
                    shape: Shape::Square,
                    color: [50, 180, 70],
                },
                ShapeClass {
                    shape: Shape::Triangle,
                    color: [60, 90, 220],
                },
            ],
            min_objects: 1,
            max_objects: 3,
            min_size: 14,
            max_size: 40,
            background: Background::Mixed,
            color_jitter: 0.5,
            pixel_noise: 12.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.shape.name().to_string()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::config("synthetic spec needs at least one class"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::config("objects per image must satisfy 1 <= min <= max"));
        }
        if self.min_size < 4 || self.min_size > self.max_size || self.max_size >= self.image_size {
            return Err(Error::config("object sizes must satisfy 4 <= min <= max < image_size"));
        }
        if !(0.0..=1.0).contains(&self.color_jitter) || self.pixel_noise < 0.0 {
            return Err(Error::config("color_jitter must be in [0, 1] and pixel_noise >= 0"));
        }
        Ok(())
    }
}

/// A generated or loaded image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub annotation: Annotation,
}

const PLACEMENT_RETRIES: usize = 50;
const IMAGE_ATTEMPTS: usize = 100;

fn sample_id(i: usize) -> String {
    format!("{i:06}")
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one normal per call keeps the stream layout simple.
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(0.0..255.0),
        rng.random_range(0.0..255.0),
        rng.random_range(0.0..255.0),
    ]
}

fn paint_background(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let n = spec.image_size as usize;
    let kind = match spec.background {
        Background::Mixed if rng.random_bool(0.5) => Background::Noise,
        Background::Mixed => Background::Gradient,
        other => other,
    };
    let mut px = vec![[0.0; 3]; n * n];
    match kind {
        Background::Gradient => {
            let (c0, c1) = (random_color(rng), random_color(rng));
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            for y in 0..n {
                for x in 0..n {
                    let u = (x as f64 / n as f64 - 0.5) * dx + (y as f64 / n as f64 - 0.5) * dy;
                    let t = (u / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
                    for c in 0..3 {
                        px[y * n + x][c] = c0[c] + t * (c1[c] - c0[c]);
                    }
                }
            }
        }
        _ => {
            let base = random_color(rng);
            // Blocky noise at 8-pixel cells gives texture beyond per-pixel grain.
            let cells = n.div_ceil(8);
            let blocks: Vec<[f64; 3]> = (0..cells * cells)
                .map(|_| [gauss(rng) * 25.0, gauss(rng) * 25.0, gauss(rng) * 25.0])
                .collect();
            for y in 0..n {
                for x in 0..n {
                    let b = blocks[(y / 8) * cells + x / 8];
                    for c in 0..3 {
                        px[y * n + x][c] = base[c] + b[c];
                    }
                }
            }
        }
    }
    px
}

struct Placed {
    class: usize,
    x0: f64,
    y0: f64,
    size: f64,
    /// Pixel footprint `[x0, y0, x1, y1)` used for overlap tests.
    footprint: [i64; 4],
}

fn try_generate(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Option<(RgbImage, Annotation)> {
    let n = spec.image_size as usize;
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut placed: Vec<Placed> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(0..spec.classes.len());
        let mut ok = None;
        for _ in 0..PLACEMENT_RETRIES {
            let size = rng.random_range(spec.min_size..=spec.max_size) as f64;
            let x0 = rng.random_range(0.0..(n as f64 - size));
            let y0 = rng.random_range(0.0..(n as f64 - size));
            let fp = [
                x0.floor() as i64 - 1,
                y0.floor() as i64 - 1,
                (x0 + size).ceil() as i64 + 1,
                (y0 + size).ceil() as i64 + 1,
            ];
            let clear = placed.iter().all(|p| {
                fp[2] <= p.footprint[0] || p.footprint[2] <= fp[0] || fp[3] <= p.footprint[1] || p.footprint[3] <= fp[1]
            });
            if clear {
                ok = Some(Placed {
                    class,
                    x0,
                    y0,
                    size,
                    footprint: fp,
                });
                break;
            }
        }
        placed.push(ok?);
    }

    let mut px = paint_background(spec, rng);
    let mut objects = Vec::with_capacity(placed.len());
    for p in &placed {
        let cls = &spec.classes[p.class];
        let random = random_color(rng);
        let color: Vec<f64> = (0..3)
            .map(|c| (1.0 - spec.color_jitter) * cls.color[c] as f64 + spec.color_jitter * random[c])
            .collect();
        let (mut xmin, mut ymin, mut xmax, mut ymax) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..n {
            for x in 0..n {
                if cls.shape.contains(p.x0, p.y0, p.size, x as f64 + 0.5, y as f64 + 0.5) {
                    px[y * n + x] = [color[0], color[1], color[2]];
                    xmin = xmin.min(x);
                    ymin = ymin.min(y);
                    xmax = xmax.max(x);
                    ymax = ymax.max(y);
                }
            }
        }
        if xmin == usize::MAX {
            return None;
        }
        let s = n as f64;
        objects.push(AnnotatedObject {
            class_id: p.class + 1,
            bbox: BBox::new(
                xmin as f64 / s,
                ymin as f64 / s,
                (xmax + 1) as f64 / s,
                (ymax + 1) as f64 / s,
            ),
            difficult: false,
        });
    }

    let mut img = RgbImage::new(spec.image_size, spec.image_size);
    for (i, p) in px.iter().enumerate() {
        let mut out = [0u8; 3];
        for c in 0..3 {
            let noise = if spec.pixel_noise > 0.0 {
                gauss(rng) * spec.pixel_noise
            } else {
                0.0
            };
            out[c] = (p[c] + noise).round().clamp(0.0, 255.0) as u8;
        }
        img.put_pixel((i % n) as u32, (i / n) as u32, Rgb(out));
    }
    Some((img, Annotation::new(objects)))
}

/// Image `index` of the dataset described by `spec`. Each image draws from
/// its own random stream, so images can be produced in any order.
pub fn generate_one(spec: &SyntheticSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    for _ in 0..IMAGE_ATTEMPTS {
        if let Some((image, annotation)) = try_generate(spec, &mut rng) {
            return Ok(Sample {
                id: sample_id(index),
                image,
                annotation,
            });
        }
    }
    Err(Error::Data(format!(
        "could not place objects without overlap for image {index} after {IMAGE_ATTEMPTS} attempts"
    )))
}

pub fn generate(spec: &SyntheticSpec, n: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::config("cannot generate an empty dataset"));
    }
    (0..n).map(|i| generate_one(spec, i)).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub eval: Vec<String>,
}

impl SplitManifest {
    /// Consecutive id ranges: labeled first, then unlabeled, then eval.
    pub fn sequential(n_labeled: usize, n_unlabeled: usize, n_eval: usize) -> Self {
        let ids = |from: usize, len: usize| (from..from + len).map(sample_id).collect();
        Self {
            labeled: ids(0, n_labeled),
            unlabeled: ids(n_labeled, n_unlabeled),
            eval: ids(n_labeled + n_unlabeled, n_eval),
        }
    }

    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len() + self.eval.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.labeled.iter().chain(&self.unlabeled).chain(&self.eval) {
            if !seen.insert(id) {
                return Err(Error::Data(format!("id {id:?} appears in more than one split")));
            }
        }
        Ok(())
    }
}

/// Maps VOC class names to 1-based class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    names: Vec<String>,
}

impl ClassMap {
    pub fn new(names: Vec<String>) -> Self {
        Self { names }
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name).map(|i| i + 1)
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        id.checked_sub(1).and_then(|i| self.names.get(i)).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocRecord {
    pub filename: String,
    pub width: u32,
    pub height: u32,
    pub annotation: Annotation,
}

fn child<'a, 'i>(node: roxmltree::Node<'a, 'i>, name: &str) -> Option<roxmltree::Node<'a, 'i>> {
    node.children().find(|c| c.has_tag_name(name))
}

fn child_text<'a>(node: roxmltree::Node<'a, '_>, name: &str) -> Option<&'a str> {
    child(node, name).and_then(|c| c.text()).map(str::trim)
}

/// Parses a VOC annotation. Pixel coordinates are 1-based and inclusive, so
/// the box covering pixels `xmin..=xmax` maps to `[(xmin − 1)/W, xmax/W]`.
pub fn parse_voc_xml(text: &str, classes: &ClassMap, path: &Path) -> Result<VocRecord> {
    let fail = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let doc = roxmltree::Document::parse(text).map_err(|e| fail(e.to_string()))?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(fail(format!(
            "root element is <{}>, expected <annotation>",
            root.tag_name().name()
        )));
    }
    let filename = child_text(root, "filename").unwrap_or_default().to_string();
    let size = child(root, "size").ok_or_else(|| fail("missing <size>".into()))?;
    let dim = |name: &str| -> Result<u32> {
        let v: u32 = child_text(size, name)
            .ok_or_else(|| fail(format!("missing <size>/<{name}>")))?
            .parse()
            .map_err(|_| fail(format!("<size>/<{name}> is not a positive integer")))?;
        if v == 0 {
            return Err(fail(format!("<size>/<{name}> is zero")));
        }
        Ok(v)
    };
    let (width, height) = (dim("width")?, dim("height")?);

    let mut objects = Vec::new();
    for (i, obj) in root.children().filter(|c| c.has_tag_name("object")).enumerate() {
        let name = child_text(obj, "name").ok_or_else(|| fail(format!("<object> {i}: missing <name>")))?;
        let class_id = classes
            .id(name)
            .ok_or_else(|| fail(format!("<object> {i}: unknown class {name:?}")))?;
        let difficult = match child_text(obj, "difficult") {
            None | Some("0") | Some("") => false,
            Some("1") => true,
            Some(other) => return Err(fail(format!("<object> {i}: <difficult> is {other:?}, expected 0 or 1"))),
        };
        let bnd = child(obj, "bndbox").ok_or_else(|| fail(format!("<object> {i}: missing <bndbox>")))?;
        let coord = |name: &str| -> Result<f64> {
            child_text(bnd, name)
                .ok_or_else(|| fail(format!("<object> {i}: missing <bndbox>/<{name}>")))?
                .parse::<f64>()
                .map_err(|_| fail(format!("<object> {i}: <bndbox>/<{name}> is not a number")))
        };
        let (w, h) = (width as f64, height as f64);
        let bbox = BBox::new(
            ((coord("xmin")? - 1.0) / w).clamp(0.0, 1.0),
            ((coord("ymin")? - 1.0) / h).clamp(0.0, 1.0),
            (coord("xmax")? / w).clamp(0.0, 1.0),
            (coord("ymax")? / h).clamp(0.0, 1.0),
        );
        if !bbox.is_valid() {
            return Err(fail(format!("<object> {i}: <bndbox> is empty or inverted")));
        }
        objects.push(AnnotatedObject {
            class_id,
            bbox,
            difficult,
        });
    }
    Ok(VocRecord {
        filename,
        width,
        height,
        annotation: Annotation::new(objects),
    })
}

pub fn read_voc_xml(path: &Path, classes: &ClassMap) -> Result<VocRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_voc_xml(&text, classes, path)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Inverse of [`parse_voc_xml`] for boxes on pixel boundaries.
pub fn to_voc_xml(record: &VocRecord, classes: &ClassMap) -> Result<String> {
    let mut s = String::new();
    s.push_str("<annotation>\n");
    s.push_str(&format!("  <filename>{}</filename>\n", xml_escape(&record.filename)));
    s.push_str(&format!(
        "  <size>\n    <width>{}</width>\n    <height>{}</height>\n    <depth>3</depth>\n  </size>\n",
        record.width, record.height
    ));
    let (w, h) = (record.width as f64, record.height as f64);
    for obj in &record.annotation.objects {
        let name = classes
            .name(obj.class_id)
            .ok_or_else(|| Error::Data(format!("class id {} has no name", obj.class_id)))?;
        s.push_str(&format!(
            "  <object>\n    <name>{}</name>\n    <difficult>{}</difficult>\n    <bndbox>\n      \
             <xmin>{}</xmin>\n      <ymin>{}</ymin>\n      <xmax>{}</xmax>\n      <ymax>{}</ymax>\n    \
             </bndbox>\n  </object>\n",
            xml_escape(name),
            obj.difficult as u8,
            (obj.bbox.xmin * w).round() as i64 + 1,
            (obj.bbox.ymin * h).round() as i64 + 1,
            (obj.bbox.xmax * w).round() as i64,
            (obj.bbox.ymax * h).round() as i64,
        ));
    }
    s.push_str("</annotation>\n");
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub spec: SyntheticSpec,
    pub class_names: Vec<String>,
}

/// A dataset directory loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub info: DatasetInfo,
    pub manifest: SplitManifest,
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl Dataset {
    pub fn class_map(&self) -> ClassMap {
        ClassMap::new(self.info.class_names.clone())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Generates the three splits and writes them under `dir`, which must be
/// empty or absent unless `force` is set.
pub fn write_synthetic_dataset(dir: &Path, spec: &SyntheticSpec, manifest: &SplitManifest, force: bool) -> Result<()> {
    spec.validate()?;
    manifest.validate()?;
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Data(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    let images = dir.join("images");
    let annotations = dir.join("annotations");
    for d in [&images, &annotations] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let classes = ClassMap::new(spec.class_names());
    for i in 0..manifest.len() {
        let sample = generate_one(spec, i)?;
        let png = images.join(format!("{}.png", sample.id));
        sample.image.save(&png)?;
        let record = VocRecord {
            filename: format!("{}.png", sample.id),
            width: spec.image_size,
            height: spec.image_size,
            annotation: sample.annotation,
        };
        let xml = annotations.join(format!("{}.xml", sample.id));
        fs::write(&xml, to_voc_xml(&record, &classes)?).map_err(|e| Error::io(&xml, e))?;
    }
    write_json(
        &dir.join("dataset.json"),
        &DatasetInfo {
            spec: spec.clone(),
            class_names: spec.class_names(),
        },
    )?;
    write_json(&dir.join("manifest.json"), manifest)
}

fn load_sample(dir: &Path, id: &str, classes: &ClassMap) -> Result<Sample> {
    let record = read_voc_xml(&dir.join("annotations").join(format!("{id}.xml")), classes)?;
    let png = dir.join("images").join(&record.filename);
    let image = image::open(&png)
        .map_err(|e| Error::Data(format!("{}: {e}", png.display())))?
        .to_rgb8();
    if image.width() != record.width || image.height() != record.height {
        return Err(Error::Data(format!(
            "{} is {}x{} but its annotation declares {}x{}",
            png.display(),
            image.width(),
            image.height(),
            record.width,
            record.height
        )));
    }
    Ok(Sample {
        id: id.to_string(),
        image,
        annotation: record.annotation,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let info: DatasetInfo = read_json(&dir.join("dataset.json"))?;
    let manifest: SplitManifest = read_json(&dir.join("manifest.json"))?;
    manifest.validate()?;
    let classes = ClassMap::new(info.class_names.clone());
    let load =
        |ids: &[String]| -> Result<Vec<Sample>> { ids.iter().map(|id| load_sample(dir, id, &classes)).collect() };
    Ok(Dataset {
        labeled: load(&manifest.labeled)?,
        unlabeled: load(&manifest.unlabeled)?,
        eval: load(&manifest.eval)?,
        info,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes() -> ClassMap {
        ClassMap::new(vec!["circle".into(), "square".into(), "triangle".into()])
    }

    #[test]
    fn voc_normalization() {
        let xml = "<annotation><size><width>200</width><height>200</height></size>\
                   <object><name>square</name><bndbox><xmin>1</xmin><ymin>1</ymin>\
                   <xmax>100</xmax><ymax>100</ymax></bndbox></object></annotation>";
        let r = parse_voc_xml(xml, &classes(), Path::new("a.xml")).unwrap();
        let b = r.annotation.objects[0].bbox;
        assert_eq!((b.xmin, b.ymin, b.xmax, b.ymax), (0.0, 0.0, 0.5, 0.5));
        assert_eq!(r.annotation.objects[0].class_id, 2);
    }

    #[test]
    fn voc_empty_and_errors() {
        let empty = "<annotation><size><width>10</width><height>10</height></size></annotation>";
        assert!(parse_voc_xml(empty, &classes(), Path::new("e.xml"))
            .unwrap()
            .annotation
            .objects
            .is_empty());
        let err = parse_voc_xml("<annotation><size>", &classes(), Path::new("m.xml")).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        let no_size = "<annotation><object/></annotation>";
        let err = parse_voc_xml(no_size, &classes(), Path::new("s.xml")).unwrap_err();
        assert!(err.to_string().contains("<size>"));
        let no_box = "<annotation><size><width>10</width><height>10</height></size>\
                      <object><name>circle</name></object></annotation>";
        let err = parse_voc_xml(no_box, &classes(), Path::new("b.xml")).unwrap_err();
        assert!(err.to_string().contains("<bndbox>"));
    }

    #[test]
    fn difficult_flag() {
        let xml = "<annotation><size><width>10</width><height>10</height></size>\
                   <object><name>circle</name><difficult>1</difficult><bndbox><xmin>1</xmin>\
                   <ymin>1</ymin><xmax>5</xmax><ymax>5</ymax></bndbox></object></annotation>";
        let r = parse_voc_xml(xml, &classes(), Path::new("d.xml")).unwrap();
        assert!(r.annotation.objects[0].difficult);
        assert!(r.annotation.training_objects().objects.is_empty());
    }

    #[test]
    fn xml_round_trip() {
        let s = generate_one(&SyntheticSpec::default(), 3).unwrap();
        let rec = VocRecord {
            filename: "x.png".into(),
            width: 96,
            height: 96,
            annotation: s.annotation.clone(),
        };
        let text = to_voc_xml(&rec, &classes()).unwrap();
        let back = parse_voc_xml(&text, &classes(), Path::new("x.xml")).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec {
            seed: 5,
            ..Default::default()
        };
        assert_eq!(generate(&spec, 4).unwrap(), generate(&spec, 4).unwrap());
        let other = SyntheticSpec {
            seed: 6,
            ..spec.clone()
        };
        assert_ne!(generate(&spec, 4).unwrap(), generate(&other, 4).unwrap());
    }

    #[test]
    fn fixed_object_count() {
        let spec = SyntheticSpec {
            min_objects: 1,
            max_objects: 1,
            ..Default::default()
        };
        for s in generate(&spec, 20).unwrap() {
            assert_eq!(s.annotation.objects.len(), 1);
        }
    }

    #[test]
    fn manifest_disjointness() {
        let m = SplitManifest::sequential(2, 3, 1);
        m.validate().unwrap();
        assert_eq!(m.len(), 6);
        let mut bad = m.clone();
        bad.eval.push("000000".into());
        assert!(bad.validate().is_err());
    }
}
