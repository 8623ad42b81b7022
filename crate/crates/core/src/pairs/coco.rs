//! COCO-style annotation files and pair manifests.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BoundingBox, ProposalSource};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    /// Scene context class, present in generated datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: u64,
    pub bbox: BoundingBox,
    pub category_id: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
}

impl AnnotationFile {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Annotations grouped by image id, in file order.
    pub fn by_image(&self) -> HashMap<u64, Vec<&Annotation>> {
        let mut map: HashMap<u64, Vec<&Annotation>> = HashMap::new();
        for a in &self.annotations {
            map.entry(a.image_id).or_default().push(a);
        }
        map
    }

    pub fn category_names(&self) -> BTreeMap<u64, String> {
        self.categories.iter().map(|c| (c.id, c.name.clone())).collect()
    }
}

/// One line of a pair manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub image_id: u64,
    pub roi: BoundingBox,
    pub source: ProposalSource,
}

impl PairRecord {
    pub fn write_jsonl(records: &[PairRecord], path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        for r in records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Vec<PairRecord>> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut out = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_record_line_format() {
        let r = PairRecord {
            image_id: 4,
            roi: BoundingBox::new(1, 2, 3, 4),
            source: ProposalSource::GT,
        };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"image_id":4,"roi":[1,2,3,4],"source":"GT"}"#
        );
    }

    #[test]
    fn parses_coco_with_float_boxes() {
        let text = r#"{"images":[{"id":1,"file_name":"a.png","width":10,"height":10}],
            "annotations":[{"image_id":1,"bbox":[1.5,2.0,3.0,4.0],"category_id":3}],
            "categories":[{"id":3,"name":"cup"}]}"#;
        let f: AnnotationFile = serde_json::from_str(text).unwrap();
        assert_eq!(f.annotations[0].bbox, BoundingBox::new(1, 2, 4, 4));
        assert_eq!(f.by_image()[&1].len(), 1);
    }
}
