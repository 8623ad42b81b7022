//! Annotated image splits held in memory.

use std::collections::HashMap;
use std::path::Path;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::pairs::{discover_rois, AnnotationFile, BoundingBox, PairRecord, ProposalConfig};
use crate::rng::stream;
use crate::trainer::PairSet;

const PROPOSAL_TAG: u64 = 0x5eed_0002;

/// A hidden object: the image it sits in, its box and its class index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlapSample {
    pub image: usize,
    pub flap: BoundingBox,
    pub label: usize,
}

/// An annotation file with its decoded images, in annotation order.
#[derive(Clone, Debug)]
pub struct Split {
    pub annotations: AnnotationFile,
    pub images: Vec<RgbImage>,
}

impl Split {
    pub fn new(annotations: AnnotationFile, images: Vec<RgbImage>) -> Result<Self> {
        if annotations.images.len() != images.len() {
            return Err(Error::Shape(format!(
                "{} image entries, {} images",
                annotations.images.len(),
                images.len()
            )));
        }
        Ok(Self { annotations, images })
    }

    /// Reads `annotations.json` and the files under `images/` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let annotations = AnnotationFile::load(&dir.join("annotations.json"))?;
        let images = annotations
            .images
            .iter()
            .map(|e| Ok(image::open(dir.join("images").join(&e.file_name))?.to_rgb8()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(annotations, images)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Category names ordered by category id; class indices follow this order.
    pub fn class_names(&self) -> Vec<String> {
        self.annotations.category_names().into_values().collect()
    }

    fn class_index(&self) -> HashMap<u64, usize> {
        self.annotations
            .category_names()
            .keys()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect()
    }

    /// Scene context class per image, when every image records one.
    pub fn contexts(&self) -> Option<Vec<usize>> {
        self.annotations.images.iter().map(|e| e.context).collect()
    }

    /// One sample per annotated object.
    pub fn flap_samples(&self) -> Result<Vec<FlapSample>> {
        let index: HashMap<u64, usize> =
            self.annotations.images.iter().enumerate().map(|(i, e)| (e.id, i)).collect();
        let classes = self.class_index();
        self.annotations
            .annotations
            .iter()
            .map(|a| {
                let image = *index.get(&a.image_id).ok_or(Error::MissingAnnotation(a.image_id))?;
                let label = *classes
                    .get(&a.category_id)
                    .ok_or_else(|| Error::UnknownClass(a.category_id.to_string()))?;
                let (w, h) = self.images[image].dimensions();
                if !a.bbox.fits(w, h) {
                    return Err(Error::InvalidRoi {
                        roi: a.bbox,
                        width: w,
                        height: h,
                    });
                }
                Ok(FlapSample {
                    image,
                    flap: a.bbox,
                    label,
                })
            })
            .collect()
    }

    /// Runs the proposal pipeline on every image.
    pub fn propose(&self, cfg: &ProposalConfig, seed: u64) -> Result<Vec<PairRecord>> {
        let by_image = self.annotations.by_image();
        let mut out = Vec::new();
        for (entry, img) in self.annotations.images.iter().zip(&self.images) {
            let gt: Vec<BoundingBox> = by_image
                .get(&entry.id)
                .map(|v| v.iter().map(|a| a.bbox).collect())
                .unwrap_or_default();
            let mut rng = stream(seed, &[PROPOSAL_TAG, entry.id]);
            for roi in discover_rois(img, entry.id, cfg, &mut rng, Some(&gt))? {
                out.push(PairRecord {
                    image_id: entry.id,
                    roi,
                    source: cfg.source,
                });
            }
        }
        Ok(out)
    }

    /// Groups pair records by image into a training set. Records naming
    /// unknown images are rejected.
    pub fn pair_set(&self, records: &[PairRecord]) -> Result<PairSet> {
        let index: HashMap<u64, usize> =
            self.annotations.images.iter().enumerate().map(|(i, e)| (e.id, i)).collect();
        let mut rois = vec![Vec::new(); self.len()];
        for r in records {
            let i = *index.get(&r.image_id).ok_or(Error::MissingAnnotation(r.image_id))?;
            let (w, h) = self.images[i].dimensions();
            if !r.roi.fits(w, h) || r.roi.area() == 0 {
                return Err(Error::InvalidRoi {
                    roi: r.roi,
                    width: w,
                    height: h,
                });
            }
            rois[i].push(r.roi);
        }
        Ok(PairSet {
            image_ids: self.annotations.images.iter().map(|e| e.id).collect(),
            images: self.images.clone(),
            rois,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairs::ProposalSource;
    use crate::synthworld::{render_split, CoocConfig};

    #[test]
    fn samples_and_pairs_from_rendered_split() {
        let cfg = CoocConfig::default();
        let (ann, images) = render_split(&cfg, 0, 1..4).unwrap();
        let n_ann = ann.annotations.len();
        let split = Split::new(ann, images).unwrap();
        assert_eq!(split.class_names().len(), 8);
        let samples = split.flap_samples().unwrap();
        assert_eq!(samples.len(), n_ann);
        assert!(samples.iter().all(|s| s.label < 8));

        let gt = ProposalConfig {
            source: ProposalSource::GT,
            ..Default::default()
        };
        let records = split.propose(&gt, 0).unwrap();
        assert_eq!(records.len(), n_ann);
        let set = split.pair_set(&records).unwrap();
        assert_eq!(set.num_pairs(), n_ann);
        let bad = PairRecord {
            image_id: 99,
            roi: BoundingBox::new(0, 0, 4, 4),
            source: ProposalSource::GT,
        };
        assert!(matches!(split.pair_set(&[bad]), Err(Error::MissingAnnotation(99))));
    }
}
