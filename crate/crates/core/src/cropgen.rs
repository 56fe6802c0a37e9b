//! Crop augmentation at annotation level.
//!
//! Images are never decoded: a crop is an integer pixel rectangle, and every
//! annotation is shifted into the cropped frame, given a new box and window,
//! and labeled with its area (A–E) and presence flag. A manifest of crop
//! rectangles lets external tools cut the pixels.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    classify_keypoint, domain_vector, window_from_bbox, ActivationWindow, AreaContext, ImageExtent, KeypointArea, Rect,
    WindowConfig,
};
use crate::interop::{GtAnnotation, GtDocument, GtImage};
use crate::pose::PoseInstance;

pub const MIN_CROP_SIDE: u32 = 8;
pub const MAX_CROP_RETRIES: usize = 100;

/// Range of the retained side fraction, drawn independently per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropStrength {
    pub min_frac: f64,
    pub max_frac: f64,
}

impl Default for CropStrength {
    fn default() -> Self {
        Self { min_frac: 0.5, max_frac: 0.9 }
    }
}

impl CropStrength {
    pub fn new(min_frac: f64, max_frac: f64) -> Result<Self> {
        if !(min_frac > 0.0 && min_frac <= max_frac && max_frac <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "crop strength ({min_frac}, {max_frac}) must satisfy 0 < min <= max <= 1"
            )));
        }
        Ok(Self { min_frac, max_frac })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub image_id: u64,
    /// Integer pixel rectangle inside the source image.
    pub rect: Rect,
    /// Seed of this image's RNG stream.
    pub seed: u64,
}

impl CropSpec {
    pub fn extent(&self) -> ImageExtent {
        ImageExtent { width: self.rect.width() as u32, height: self.rect.height() as u32 }
    }

    pub fn identity(image_id: u64, image: ImageExtent) -> Self {
        Self { image_id, rect: image.rect(), seed: 0 }
    }
}

/// Per-image stream seed, independent of processing order.
pub fn image_seed(seed: u64, image_id: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ image_id.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws `(offset, length)` along one axis of length `full`.
fn sample_axis<R: Rng>(full: u32, strength: &CropStrength, rng: &mut R) -> (u32, u32) {
    let frac = rng.random_range(strength.min_frac..=strength.max_frac);
    let len = ((frac * full as f64).round() as u32).clamp(1, full);
    // Cut either the leading or the trailing side.
    let offset = if rng.random_bool(0.5) { full - len } else { 0 };
    (offset, len)
}

/// Samples a crop rectangle, redrawing when a side falls below 8 px.
pub fn sample_crop_rect<R: Rng>(image: ImageExtent, strength: &CropStrength, rng: &mut R) -> Result<Rect> {
    for _ in 0..MAX_CROP_RETRIES {
        let (x0, w) = sample_axis(image.width, strength, rng);
        let (y0, h) = sample_axis(image.height, strength, rng);
        if w >= MIN_CROP_SIDE && h >= MIN_CROP_SIDE {
            return Rect::new(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64);
        }
    }
    Err(Error::CropSampling { retries: MAX_CROP_RETRIES })
}

pub fn sample_crop(image_id: u64, image: ImageExtent, strength: &CropStrength, seed: u64) -> Result<CropSpec> {
    let stream = image_seed(seed, image_id);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let rect = sample_crop_rect(image, strength, &mut rng)?;
    Ok(CropSpec { image_id, rect, seed: stream })
}

/// A person after cropping, with per-keypoint area labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedInstance {
    /// Labeled keypoints carry presence 0/1; unlabeled ones presence 0.
    pub instance: PoseInstance,
    pub areas: Vec<Option<KeypointArea>>,
    pub window: ActivationWindow,
    pub image: ImageExtent,
}

/// Moves `inst` into the cropped frame. Returns `None` when no labeled
/// keypoint stays inside the crop or the box leaves it entirely.
///
/// The new box is the old one clipped to the crop, and the area shrinks in
/// proportion. Visible keypoints that leave the image become "labeled, not
/// visible" (v = 1).
pub fn transform_instance(
    inst: &PoseInstance,
    crop: &CropSpec,
    window_cfg: &WindowConfig,
) -> Result<Option<ExtendedInstance>> {
    let image = crop.extent();
    let (dx, dy) = (-crop.rect.x0, -crop.rect.y0);
    let Some(clipped) = inst.bbox.intersect(&crop.rect) else {
        return Ok(None);
    };
    let bbox = clipped.translate(dx, dy);

    let mut out = inst.clone();
    out.bbox = bbox;
    out.area = inst.area.map(|a| {
        let ratio = clipped.area() / inst.bbox.area();
        if ratio == 1.0 {
            a
        } else {
            a * ratio
        }
    });
    for k in out.keypoints.iter_mut().filter(|k| k.is_labeled()) {
        k.x += dx;
        k.y += dy;
    }
    if !out.keypoints.iter().any(|k| k.is_labeled() && image.contains(&k.point())) {
        return Ok(None);
    }

    let window = window_from_bbox(&bbox, window_cfg)?;
    let mut areas = Vec::with_capacity(out.keypoints.len());
    for k in out.keypoints.iter_mut() {
        if !k.is_labeled() {
            k.presence = Some(0.0);
            areas.push(None);
            continue;
        }
        let area = classify_keypoint(&k.point(), &bbox, &window, &image);
        k.presence = Some(if area.in_window() { 1.0 } else { 0.0 });
        if k.visibility == 2 && !image.contains(&k.point()) {
            k.visibility = 1;
        }
        areas.push(Some(area));
    }
    Ok(Some(ExtendedInstance { instance: out, areas, window, image }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedInstance {
    pub annotation_id: u64,
    pub image_id: u64,
}

/// Result of cropping one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageCrop {
    pub crop: CropSpec,
    pub image: GtImage,
    pub kept: Vec<(GtAnnotation, ExtendedInstance)>,
    pub dropped: Vec<DroppedInstance>,
}

pub fn crop_image(
    image: &GtImage,
    annotations: &[&GtAnnotation],
    strength: &CropStrength,
    seed: u64,
    window_cfg: &WindowConfig,
) -> Result<ImageCrop> {
    let wrap = |e: Error| Error::Image { image_id: image.id, source: Box::new(e) };
    let extent = ImageExtent::new(image.width, image.height).map_err(wrap)?;
    let crop = sample_crop(image.id, extent, strength, seed).map_err(wrap)?;
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for ann in annotations {
        let inst = ann.to_instance().map_err(wrap)?;
        match transform_instance(&inst, &crop, window_cfg).map_err(wrap)? {
            Some(ext) => kept.push((GtAnnotation::from_instance(&ext.instance, ann), ext)),
            None => dropped.push(DroppedInstance { annotation_id: ann.id, image_id: image.id }),
        }
    }
    let cropped = crop.extent();
    let image = GtImage { width: cropped.width, height: cropped.height, ..image.clone() };
    Ok(ImageCrop { crop, image, kept, dropped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cropset {
    pub gt: GtDocument,
    pub manifest: Vec<CropSpec>,
    pub dropped: Vec<DroppedInstance>,
    /// Area percentages over the output; `None` when nothing is labeled.
    pub domain: Option<[f64; 5]>,
}

impl Cropset {
    /// Manifest rows `image_id,x0,y0,x1,y1,seed`.
    pub fn manifest_csv(&self) -> String {
        let mut out = String::from("image_id,x0,y0,x1,y1,seed\n");
        for c in &self.manifest {
            let r = c.rect;
            out.push_str(&format!("{},{},{},{},{},{}\n", c.image_id, r.x0, r.y0, r.x1, r.y1, c.seed));
        }
        out
    }
}

/// Annotations of each image, in document order.
pub fn annotations_by_image(doc: &GtDocument) -> BTreeMap<u64, Vec<&GtAnnotation>> {
    let mut by_image: BTreeMap<u64, Vec<&GtAnnotation>> = BTreeMap::new();
    for a in &doc.annotations {
        by_image.entry(a.image_id).or_default().push(a);
    }
    by_image
}

/// Joins per-image results, in the order given, into the output document.
pub fn assemble(doc: &GtDocument, crops: Vec<ImageCrop>) -> Cropset {
    let mut images = Vec::with_capacity(crops.len());
    let mut annotations = Vec::new();
    let mut manifest = Vec::with_capacity(crops.len());
    let mut dropped = Vec::new();
    let mut extended = Vec::new();
    for c in crops {
        images.push(c.image);
        manifest.push(c.crop);
        dropped.extend(c.dropped);
        for (ann, ext) in c.kept {
            annotations.push(ann);
            extended.push(ext);
        }
    }
    let domain = domain_vector(extended.iter().map(|e| AreaContext {
        instance: &e.instance,
        window: &e.window,
        image: e.image,
    }))
    .ok();
    let gt = GtDocument { images, annotations, extra: doc.extra.clone() };
    Cropset { gt, manifest, dropped, domain }
}

/// Crops every image of `doc` once. Output is a function of the input and
/// `seed` only.
pub fn build_cropset(
    doc: &GtDocument,
    strength: &CropStrength,
    seed: u64,
    window_cfg: &WindowConfig,
) -> Result<Cropset> {
    let by_image = annotations_by_image(doc);
    let crops = doc
        .images
        .iter()
        .map(|img| {
            let anns = by_image.get(&img.id).map(Vec::as_slice).unwrap_or(&[]);
            crop_image(img, anns, strength, seed, window_cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(doc, crops))
}
