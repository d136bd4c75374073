//! Samples under the three supervision forms, their certain/uncertain region
//! masks, flip augmentation, and the on-disk dataset directory.
//!
//! Dataset directory layout:
//!
//! ```text
//! <dir>/index.jsonl        one JSON record per line, in sample order
//! <dir>/images/<id>.f32    raw H×W×C little-endian f32, row-major, channels last
//! ```
//!
//! Index record fields, in order: `id`, `split`, `kind`, `height`, `width`,
//! `channels`, `boxes`, `dots`, `truth`. Boxes are `[x_min, y_min, x_max, y_max]`,
//! dots `[x, y]`, all in image pixels. `boxes` is non-empty only for
//! `kind = "box"`, `dots` only for `kind = "dot"`; `truth` holds the hidden
//! ground truth of synthetic samples.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Point};
use crate::grid::{LevelSpec, PyramidSpec};

/// Row-major `height × width × channels` image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch {
                left: vec![height, width, channels],
                right: vec![data.len()],
            });
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    /// Horizontal mirror.
    pub fn flipped(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        let c = self.channels;
        for row in 0..self.height {
            let line = &self.data[row * self.width * c..][..self.width * c];
            for px in line.chunks_exact(c).rev() {
                data.extend_from_slice(px);
            }
        }
        Self { data, ..*self }
    }

    /// Channels-first copy as `f64`, the layout the network consumes.
    pub fn to_chw(&self) -> Vec<f64> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; h * w * c];
        for (i, px) in self.data.chunks_exact(c).enumerate() {
            for (ch, v) in px.iter().enumerate() {
                out[ch * h * w + i] = *v as f64;
            }
        }
        out
    }

    fn contains(&self, p: &Point) -> bool {
        p.x >= 0.0 && p.x < self.width as f64 && p.y >= 0.0 && p.y < self.height as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionKind {
    Box,
    Dot,
    Unlabeled,
}

impl SupervisionKind {
    pub const ALL: [SupervisionKind; 3] = [SupervisionKind::Box, SupervisionKind::Dot, SupervisionKind::Unlabeled];

    pub fn name(self) -> &'static str {
        match self {
            SupervisionKind::Box => "box",
            SupervisionKind::Dot => "dot",
            SupervisionKind::Unlabeled => "unlabeled",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Supervision {
    BoxLabeled(Vec<BBox>),
    DotLabeled(Vec<Point>),
    Unlabeled,
}

impl Supervision {
    pub fn kind(&self) -> SupervisionKind {
        match self {
            Supervision::BoxLabeled(_) => SupervisionKind::Box,
            Supervision::DotLabeled(_) => SupervisionKind::Dot,
            Supervision::Unlabeled => SupervisionKind::Unlabeled,
        }
    }

    pub fn boxes(&self) -> &[BBox] {
        match self {
            Supervision::BoxLabeled(b) => b,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainBox,
    TrainDot,
    TrainUnlabeled,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train_box" => Ok(Split::TrainBox),
            "train_dot" => Ok(Split::TrainDot),
            "train_unlabeled" => Ok(Split::TrainUnlabeled),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// A sample together with its hidden ground truth. Training code only ever
/// sees the [`TrainingSample`] view, which has no truth field.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub split: Split,
    pub image: Image,
    pub supervision: Supervision,
    hidden_truth: Option<Vec<BBox>>,
}

impl Sample {
    pub fn new(id: u64, split: Split, image: Image, supervision: Supervision, hidden_truth: Option<Vec<BBox>>) -> Result<Self> {
        match &supervision {
            Supervision::BoxLabeled(b) if b.is_empty() => {
                return Err(Error::Data(format!("sample {id}: box-labeled with no boxes")))
            }
            Supervision::DotLabeled(d) if d.is_empty() => {
                return Err(Error::Data(format!("sample {id}: dot-labeled with no dots")))
            }
            _ => {}
        }
        for b in supervision.boxes().iter().chain(hidden_truth.iter().flatten()) {
            b.validate()?;
        }
        if let Supervision::DotLabeled(dots) = &supervision {
            for p in dots {
                if !image.contains(p) {
                    return Err(Error::PointOutsideImage { x: p.x, y: p.y, width: image.width, height: image.height });
                }
            }
        }
        Ok(Self { id, split, image, supervision, hidden_truth })
    }

    /// Ground truth of synthetic samples. Reserved for evaluation.
    pub fn hidden_truth(&self) -> Option<&[BBox]> {
        self.hidden_truth.as_deref()
    }

    pub fn training_view(&self) -> TrainingSample {
        TrainingSample { id: self.id, image: self.image.clone(), supervision: self.supervision.clone() }
    }

    /// Mirrors the image and every annotation, truth included.
    pub fn flipped(&self) -> Self {
        let w = self.image.width as f64;
        Self {
            id: self.id,
            split: self.split,
            image: self.image.flipped(),
            supervision: flip_supervision(&self.supervision, w),
            hidden_truth: self.hidden_truth.as_ref().map(|t| t.iter().map(|b| flip_box(b, w)).collect()),
        }
    }
}

/// What the training loop is allowed to see of a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub id: u64,
    pub image: Image,
    pub supervision: Supervision,
}

impl TrainingSample {
    pub fn flipped(&self) -> Self {
        Self {
            id: self.id,
            image: self.image.flipped(),
            supervision: flip_supervision(&self.supervision, self.image.width as f64),
        }
    }
}

/// Horizontal flip of a sample; applying it twice restores the original.
pub fn flip_augment(sample: &Sample) -> Sample {
    sample.flipped()
}

fn flip_box(b: &BBox, width: f64) -> BBox {
    BBox { x_min: width - b.x_max, y_min: b.y_min, x_max: width - b.x_min, y_max: b.y_max }
}

fn flip_point(p: &Point, width: f64) -> Point {
    let mut x = width - p.x;
    if x >= width {
        x = width.next_down();
    }
    Point { x, y: p.y }
}

fn flip_supervision(s: &Supervision, width: f64) -> Supervision {
    match s {
        Supervision::BoxLabeled(b) => Supervision::BoxLabeled(b.iter().map(|b| flip_box(b, width)).collect()),
        Supervision::DotLabeled(d) => Supervision::DotLabeled(d.iter().map(|p| flip_point(p, width)).collect()),
        Supervision::Unlabeled => Supervision::Unlabeled,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    CertainPositive,
    CertainNegative,
    Uncertain,
}

/// Per-level region labels, row-major within each level.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    pub pyramid: PyramidSpec,
    pub levels: Vec<Vec<Region>>,
}

impl RegionMask {
    pub fn get(&self, level: usize, row: usize, col: usize) -> Region {
        self.levels[level][row * self.pyramid.levels[level].width + col]
    }

    pub fn count(&self, level: usize, region: Region) -> usize {
        self.levels[level].iter().filter(|r| **r == region).count()
    }
}

/// Cell whose center is nearest to `p`; ties go to the earlier cell in row-major order.
pub fn nearest_cell(level: &LevelSpec, p: &Point) -> (usize, usize) {
    let axis = |v: f64, n: usize| -> usize {
        let s = level.stride as f64;
        // cells k-1 and k are equidistant from v = k*s; the earlier one wins
        let k = (v / s).ceil() as i64 - 1;
        k.clamp(0, n as i64 - 1) as usize
    };
    (axis(p.y, level.height), axis(p.x, level.width))
}

/// Certain/uncertain partition of every pyramid cell for one sample.
pub fn build_region_mask(image: &Image, supervision: &Supervision, pyramid: &PyramidSpec) -> Result<RegionMask> {
    let mut levels = Vec::with_capacity(pyramid.num_levels());
    for spec in &pyramid.levels {
        let labels = match supervision {
            Supervision::Unlabeled => vec![Region::Uncertain; spec.cells()],
            Supervision::BoxLabeled(boxes) => {
                let mut labels = Vec::with_capacity(spec.cells());
                for row in 0..spec.height {
                    for col in 0..spec.width {
                        let (x, y) = spec.cell_center(row, col);
                        let inside = boxes.iter().any(|b| b.contains_strictly(x, y));
                        labels.push(if inside { Region::Uncertain } else { Region::CertainNegative });
                    }
                }
                labels
            }
            Supervision::DotLabeled(dots) => {
                let mut labels = vec![Region::Uncertain; spec.cells()];
                for p in dots {
                    if !image.contains(p) {
                        return Err(Error::PointOutsideImage { x: p.x, y: p.y, width: image.width, height: image.height });
                    }
                    let (r, c) = nearest_cell(spec, p);
                    labels[r * spec.width + c] = Region::CertainPositive;
                }
                labels
            }
        };
        levels.push(labels);
    }
    Ok(RegionMask { pyramid: pyramid.clone(), levels })
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexRecord {
    id: u64,
    split: Split,
    kind: SupervisionKind,
    height: usize,
    width: usize,
    channels: usize,
    boxes: Vec<[f64; 4]>,
    dots: Vec<[f64; 2]>,
    truth: Option<Vec<[f64; 4]>>,
}

pub const INDEX_FILE: &str = "index.jsonl";
pub const IMAGE_DIR: &str = "images";

/// Writes samples in the directory format documented at module level.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    let img_dir = dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let index_path = dir.join(INDEX_FILE);
    let file = fs::File::create(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut index = BufWriter::new(file);
    for s in samples {
        let rec = IndexRecord {
            id: s.id,
            split: s.split,
            kind: s.supervision.kind(),
            height: s.image.height,
            width: s.image.width,
            channels: s.image.channels,
            boxes: s.supervision.boxes().iter().map(BBox::as_array).collect(),
            dots: match &s.supervision {
                Supervision::DotLabeled(d) => d.iter().map(|p| [p.x, p.y]).collect(),
                _ => Vec::new(),
            },
            truth: s.hidden_truth.as_ref().map(|t| t.iter().map(BBox::as_array).collect()),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(index, "{line}").map_err(|e| Error::io(&index_path, e))?;

        let path = img_dir.join(format!("{}.f32", s.id));
        let bytes: Vec<u8> = s.image.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    index.flush().map_err(|e| Error::io(&index_path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let index_path = dir.join(INDEX_FILE);
    let file = fs::File::open(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&index_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: IndexRecord =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", index_path.display(), n + 1)))?;
        let path = dir.join(IMAGE_DIR).join(format!("{}.f32", rec.id));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != rec.height * rec.width * rec.channels * 4 {
            return Err(Error::Data(format!("{}: unexpected size {}", path.display(), bytes.len())));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let image = Image::new(rec.height, rec.width, rec.channels, data)?;
        let supervision = match rec.kind {
            SupervisionKind::Box => Supervision::BoxLabeled(rec.boxes.into_iter().map(BBox::from_array).collect()),
            SupervisionKind::Dot => Supervision::DotLabeled(rec.dots.into_iter().map(|[x, y]| Point { x, y }).collect()),
            SupervisionKind::Unlabeled => Supervision::Unlabeled,
        };
        let truth = rec.truth.map(|t| t.into_iter().map(BBox::from_array).collect());
        out.push(Sample::new(rec.id, rec.split, image, supervision, truth)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: usize, h: usize) -> Image {
        Image::new(h, w, 1, (0..w * h).map(|v| v as f32).collect()).unwrap()
    }

    fn pyramid() -> PyramidSpec {
        PyramidSpec::for_image(32, 32, &[4, 8]).unwrap()
    }

    #[test]
    fn unlabeled_all_uncertain() {
        let m = build_region_mask(&img(32, 32), &Supervision::Unlabeled, &pyramid()).unwrap();
        for l in 0..2 {
            assert_eq!(m.count(l, Region::Uncertain), m.pyramid.levels[l].cells());
        }
    }

    #[test]
    fn full_image_box_all_uncertain() {
        let sup = Supervision::BoxLabeled(vec![BBox::new(0., 0., 32., 32.).unwrap()]);
        let m = build_region_mask(&img(32, 32), &sup, &pyramid()).unwrap();
        assert!(m.levels.iter().flatten().all(|r| *r == Region::Uncertain));
    }

    #[test]
    fn box_counts_cells_with_interior_centers() {
        // stride 4 centers at 2, 6, 10, ...; box (4, 4)-(12, 8) strictly holds x in {6, 10}, y in {6}
        let sup = Supervision::BoxLabeled(vec![BBox::new(4., 4., 12., 8.).unwrap()]);
        let m = build_region_mask(&img(32, 32), &sup, &pyramid()).unwrap();
        assert_eq!(m.count(0, Region::Uncertain), 2);
        assert_eq!(m.get(0, 1, 1), Region::Uncertain);
        assert_eq!(m.get(0, 1, 2), Region::Uncertain);
        // stride 8 center (4, 4) sits on the box corner: not strictly inside
        assert_eq!(m.count(1, Region::Uncertain), 0);
    }

    #[test]
    fn dot_at_cell_center() {
        let p = PyramidSpec::for_image(64, 64, &[8]).unwrap();
        let sup = Supervision::DotLabeled(vec![Point { x: 20.0, y: 36.0 }]);
        let m = build_region_mask(&img(64, 64), &sup, &p).unwrap();
        assert_eq!(m.count(0, Region::CertainPositive), 1);
        assert_eq!(m.count(0, Region::Uncertain), 63);
        assert_eq!(m.get(0, 4, 2), Region::CertainPositive);
    }

    #[test]
    fn nearest_cell_matches_exhaustive_search() {
        let spec = LevelSpec { stride: 4, height: 8, width: 8 };
        let mut coords = Vec::new();
        for i in 0..=128 {
            coords.push(i as f64 * 0.25);
        }
        for &x in &coords {
            for &y in coords.iter().step_by(7) {
                let p = Point { x, y };
                let mut best = (f64::INFINITY, 0, 0);
                for r in 0..spec.height {
                    for c in 0..spec.width {
                        let (cx, cy) = spec.cell_center(r, c);
                        let d = (cx - x).powi(2) + (cy - y).powi(2);
                        if d < best.0 {
                            best = (d, r, c);
                        }
                    }
                }
                assert_eq!(nearest_cell(&spec, &p), (best.1, best.2), "point {p:?}");
            }
        }
    }

    #[test]
    fn dot_outside_image_errors() {
        let sup = Supervision::DotLabeled(vec![Point { x: 40.0, y: 3.0 }]);
        assert!(matches!(
            build_region_mask(&img(32, 32), &sup, &pyramid()),
            Err(Error::PointOutsideImage { .. })
        ));
    }

    #[test]
    fn flip_box_and_dot() {
        let s = Sample::new(
            0,
            Split::TrainBox,
            img(10, 10),
            Supervision::BoxLabeled(vec![BBox::new(1., 2., 3., 4.).unwrap()]),
            Some(vec![BBox::new(1., 2., 3., 4.).unwrap()]),
        )
        .unwrap();
        let f = flip_augment(&s);
        assert_eq!(f.supervision.boxes()[0].as_array(), [7., 2., 9., 4.]);
        assert_eq!(f.hidden_truth().unwrap()[0].as_array(), [7., 2., 9., 4.]);
        assert_eq!(flip_augment(&f), s);

        let d = Sample::new(1, Split::TrainDot, img(10, 10), Supervision::DotLabeled(vec![Point { x: 0.0, y: 5.0 }]), None)
            .unwrap();
        let fd = flip_augment(&d);
        let Supervision::DotLabeled(p) = &fd.supervision else { unreachable!() };
        assert!(p[0].x < 10.0 && 10.0 - p[0].x <= 2.0 * f64::EPSILON * 10.0);
        assert_eq!(p[0].y, 5.0);
    }

    #[test]
    fn image_flip_is_involution() {
        let im = Image::new(2, 3, 2, (0..12).map(|v| v as f32).collect()).unwrap();
        let f = im.flipped();
        assert_eq!(f.get(0, 0, 0), im.get(0, 2, 0));
        assert_eq!(f.get(1, 2, 1), im.get(1, 0, 1));
        assert_eq!(f.flipped(), im);
    }

    #[test]
    fn empty_annotation_lists_rejected() {
        assert!(Sample::new(0, Split::TrainBox, img(4, 4), Supervision::BoxLabeled(vec![]), None).is_err());
        assert!(Sample::new(0, Split::TrainDot, img(4, 4), Supervision::DotLabeled(vec![]), None).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![
            Sample::new(
                3,
                Split::TrainBox,
                img(8, 8),
                Supervision::BoxLabeled(vec![BBox::new(0.1, 0.2, 3.3, 4.7).unwrap()]),
                Some(vec![BBox::new(0.1, 0.2, 3.3, 4.7).unwrap()]),
            )
            .unwrap(),
            Sample::new(4, Split::TrainDot, img(8, 8), Supervision::DotLabeled(vec![Point { x: 1.0 / 3.0, y: 2.5 }]), Some(vec![]))
                .unwrap(),
            Sample::new(5, Split::Test, img(8, 8), Supervision::Unlabeled, None).unwrap(),
        ];
        write_dataset(dir.path(), &samples).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), samples);
    }
}
