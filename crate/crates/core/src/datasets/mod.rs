//! Face images with semantic label maps, the ROI grouping table, and the
//! procedural corpus used by tests and desk-scale training.
//!
//! On-disk layout:
//!
//! ```text
//! root/images/<id>.png      RGB image
//! root/labels/<id>.png      single-channel or paletted integer class map
//! root/splits/{train,val,test}.txt   one id per line
//! root/classes.json         optional class table (defaults to ClassTable::celebamask())
//! ```

mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::imageops::{self, FilterType};
use serde::{Deserialize, Serialize};
use ssae_tensor::Tensor;

use crate::error::{Error, Result};
use crate::imageio;
use crate::roi::RoiLabel;

pub use synthetic::{make_synthetic_dataset, make_synthetic_faces, SyntheticFace};

/// Integer class map, row-major `height x width`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u16>) -> Self {
        assert_eq!(data.len(), height * width, "label map size");
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, class: u16) -> Self {
        Self::new(height, width, vec![class; height * width])
    }

    /// Nearest-neighbour resize; identity when the size is unchanged.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = ((y * 2 + 1) * self.height / (2 * height)).min(self.height - 1);
            for x in 0..width {
                let sx = ((x * 2 + 1) * self.width / (2 * width)).min(self.width - 1);
                data.push(self.data[sy * self.width + sx]);
            }
        }
        Self::new(height, width, data)
    }

    pub fn hflip(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        Self::new(self.height, self.width, data)
    }
}

/// One face image with its ground-truth parsing.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// `[3, H, W]`, values in `[-1, 1]`.
    pub image: Tensor<f32>,
    pub labelmap: LabelMap,
}

impl ImageSample {
    pub fn size(&self) -> (usize, usize) {
        (self.labelmap.height, self.labelmap.width)
    }

    /// Image as a batch of one, `[1, 3, H, W]`.
    pub fn batch(&self) -> Tensor<f32> {
        let s = self.image.shape();
        self.image.clone().reshape(&[1, s[0], s[1], s[2]])
    }

    pub fn hflip(&self) -> Self {
        let [c, h, w] = self.image.shape() else { unreachable!("sample images are [3, H, W]") };
        let (c, h, w) = (*c, *h, *w);
        let image = Tensor::from_fn(&[c, h, w], |i| {
            let x = i % w;
            self.image.data()[i - x + (w - 1 - x)]
        });
        Self { id: self.id.clone(), image, labelmap: self.labelmap.hflip() }
    }
}

/// Stacks sample images into `[N, 3, H, W]`.
pub fn stack_images(samples: &[&ImageSample]) -> Tensor<f32> {
    let parts: Vec<Tensor<f32>> = samples.iter().map(|s| s.batch()).collect();
    Tensor::stack_batch(&parts)
}

/// Per-ROI masks at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiMaskSet {
    /// `[H, W]` masks with values in `[0, 1]`.
    pub masks: BTreeMap<RoiLabel, Tensor<f32>>,
    /// True when derived from annotated label maps (values in `{0, 1}`).
    pub ground_truth: bool,
}

impl RoiMaskSet {
    pub fn get(&self, roi: RoiLabel) -> Option<&Tensor<f32>> {
        self.masks.get(&roi)
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Mapping from dataset-native class names/ids to the five ROIs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTable {
    /// Native class name to integer id.
    pub classes: BTreeMap<String, u16>,
    /// ROI name to the native class names folded into it.
    pub rois: BTreeMap<String, Vec<String>>,
}

impl ClassTable {
    /// CelebAMask-HQ style parsing classes. Eyebrows and eyeglasses belong to no ROI.
    pub fn celebamask() -> Self {
        let names = [
            "background", "skin", "nose", "eye_g", "l_eye", "r_eye", "l_brow", "r_brow", "l_ear", "r_ear", "mouth",
            "u_lip", "l_lip", "hair", "hat", "ear_r", "neck_l", "neck", "cloth",
        ];
        let classes = names.iter().enumerate().map(|(i, n)| (n.to_string(), i as u16)).collect();
        let group = |roi: RoiLabel, members: &[&str]| {
            (roi.name().to_string(), members.iter().map(|m| m.to_string()).collect::<Vec<_>>())
        };
        let rois = [
            group(RoiLabel::Hair, &["hair"]),
            group(RoiLabel::Skin, &["skin"]),
            group(RoiLabel::Nose, &["nose"]),
            group(RoiLabel::Eyes, &["l_eye", "r_eye"]),
            group(RoiLabel::LipsMouth, &["u_lip", "l_lip", "mouth"]),
        ]
        .into_iter()
        .collect();
        Self { classes, rois }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: Self = serde_json::from_str(&text)?;
        table.validate()?;
        Ok(table)
    }

    pub fn class_id(&self, name: &str) -> Option<u16> {
        self.classes.get(name).copied()
    }

    pub fn validate(&self) -> Result<()> {
        self.lookup().map(|_| ())
    }

    /// Dense table `class id -> ROI`.
    pub fn lookup(&self) -> Result<ClassLookup> {
        let max = self.classes.values().copied().max().unwrap_or(0) as usize;
        let mut known = vec![false; max + 1];
        for &id in self.classes.values() {
            known[id as usize] = true;
        }
        let mut roi_of = vec![None; max + 1];
        for (roi_name, members) in &self.rois {
            let roi = RoiLabel::from_str(roi_name)?;
            for m in members {
                let id = self
                    .class_id(m)
                    .ok_or_else(|| Error::Config(format!("ROI {roi_name} references unknown class {m:?}")))?;
                if let Some(prev) = roi_of[id as usize].replace(roi) {
                    return Err(Error::Config(format!("class {m:?} grouped into both {prev} and {roi}")));
                }
            }
        }
        Ok(ClassLookup { known, roi_of })
    }
}

impl Default for ClassTable {
    fn default() -> Self {
        Self::celebamask()
    }
}

#[derive(Clone, Debug)]
pub struct ClassLookup {
    known: Vec<bool>,
    roi_of: Vec<Option<RoiLabel>>,
}

impl ClassLookup {
    pub fn roi(&self, id: u16) -> Result<Option<RoiLabel>> {
        match self.known.get(id as usize) {
            Some(true) => Ok(self.roi_of[id as usize]),
            _ => Err(Error::UnknownClass { id }),
        }
    }
}

/// Derives the five binary ROI masks from a label map.
pub fn labelmap_to_roi_masks(labelmap: &LabelMap, table: &ClassTable) -> Result<RoiMaskSet> {
    let lookup = table.lookup()?;
    let n = labelmap.height * labelmap.width;
    let mut planes: BTreeMap<RoiLabel, Vec<f32>> = RoiLabel::ALL.iter().map(|&r| (r, vec![0.0; n])).collect();
    for (i, &id) in labelmap.data.iter().enumerate() {
        if let Some(roi) = lookup.roi(id)? {
            planes.get_mut(&roi).expect("all ROIs present")[i] = 1.0;
        }
    }
    let masks = planes
        .into_iter()
        .map(|(roi, data)| (roi, Tensor::new(&[labelmap.height, labelmap.width], data)))
        .collect();
    Ok(RoiMaskSet { masks, ground_truth: true })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Invalid(format!("unknown split {s:?}"))),
        }
    }
}

/// Class table stored beside a dataset, or the default one.
pub fn dataset_class_table(root: &Path) -> Result<ClassTable> {
    let path = root.join("classes.json");
    if path.exists() {
        ClassTable::from_json_file(&path)
    } else {
        Ok(ClassTable::default())
    }
}

/// Loads one split, resized to `image_size`, sorted by id.
pub fn load_dataset(root: &Path, split: Split, image_size: usize) -> Result<Vec<ImageSample>> {
    let table = dataset_class_table(root)?;
    let lookup = table.lookup()?;
    let split_path = root.join("splits").join(format!("{split}.txt"));
    let text = std::fs::read_to_string(&split_path).map_err(|e| Error::io(&split_path, e))?;
    let mut ids: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    ids.sort_unstable();
    ids.dedup();

    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let img_path = root.join("images").join(format!("{id}.png"));
        let label_path = root.join("labels").join(format!("{id}.png"));
        if !label_path.exists() {
            log::warn!("skipping {id}: no label map at {}", label_path.display());
            continue;
        }
        let rgb = imageio::read_png_rgb(&img_path)?;
        let (lh, lw, ids) = imageio::read_label_png(&label_path)?;
        if (lw as u32, lh as u32) != rgb.dimensions() {
            return Err(Error::Dataset(format!("{id}: image and label map sizes differ")));
        }
        for &c in &ids {
            lookup.roi(c)?;
        }
        let rgb = if rgb.dimensions() == (image_size as u32, image_size as u32) {
            rgb
        } else {
            imageops::resize(&rgb, image_size as u32, image_size as u32, FilterType::Triangle)
        };
        let labelmap = LabelMap::new(lh, lw, ids).resize_nearest(image_size, image_size);
        out.push(ImageSample { id: id.to_string(), image: imageio::rgb_to_tensor(&rgb), labelmap });
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("split {split} under {} has no usable samples", root.display())));
    }
    Ok(out)
}

/// Writes samples in the on-disk layout, all listed in `split`.
pub fn write_dataset(root: &Path, split: Split, samples: &[ImageSample], table: &ClassTable) -> Result<()> {
    for dir in ["images", "labels", "splits"] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut ids = String::new();
    for s in samples {
        let rgb = imageio::tensor_to_rgb(&s.image)?;
        imageio::write_png_rgb(&root.join("images").join(format!("{}.png", s.id)), &rgb)?;
        let lm = &s.labelmap;
        imageio::write_label_png(&root.join("labels").join(format!("{}.png", s.id)), lm.height, lm.width, &lm.data)?;
        ids.push_str(&s.id);
        ids.push('\n');
    }
    let split_path = root.join("splits").join(format!("{split}.txt"));
    std::fs::write(&split_path, ids).map_err(|e| Error::io(&split_path, e))?;
    let table_path = root.join("classes.json");
    std::fs::write(&table_path, serde_json::to_string_pretty(table)?).map_err(|e| Error::io(&table_path, e))
}
