//! CSV + PNG dataset layout.
//!
//! `attributes.csv` in the dataset root has a header row
//! `filename[,split],<attribute>...`. Filenames are relative to the root,
//! `split` is `train` or `test` (all rows are training data when the column
//! is absent) and labels are coded either {0, 1} or {-1, 1} per file.

use std::collections::HashSet;
use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;

use super::{image_to_tensor, tensor_to_image, AttributeVector, Dataset, Sample, Splits};
use crate::error::{Error, LoadIssue, Result};

pub const MANIFEST_FILE: &str = "attributes.csv";
pub const IMAGE_DIR: &str = "images";

/// Centre-crops to a square, then bicubic-resizes to `size`.
pub fn crop_and_resize(img: &RgbImage, size: usize) -> RgbImage {
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let cropped = image::imageops::crop_imm(img, (w - side) / 2, (h - side) / 2, side, side).to_image();
    if side as usize == size {
        cropped
    } else {
        image::imageops::resize(&cropped, size as u32, size as u32, FilterType::CatmullRom)
    }
}

struct Row {
    line: usize,
    filename: String,
    split: String,
    labels: Vec<i64>,
}

/// Loads and validates a manifest; every problem found is reported at once.
pub fn load_manifest(root: &Path, image_size: usize) -> Result<Splits> {
    let csv_path = root.join(MANIFEST_FILE);
    let issue = |line: Option<usize>, reason: String| LoadIssue {
        file: csv_path.clone(),
        line,
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&csv_path)
        .map_err(|e| Error::Load(vec![issue(None, e.to_string())]))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Load(vec![issue(Some(1), e.to_string())]))?
        .clone();
    if headers.is_empty() || headers.as_slice().is_empty() {
        log::warn!("{} is empty; returning an empty dataset", csv_path.display());
        return Ok(Splits {
            train: Dataset::empty(Vec::new(), image_size),
            test: Dataset::empty(Vec::new(), image_size),
        });
    }
    if headers.get(0) != Some("filename") {
        return Err(Error::Load(vec![issue(Some(1), "first column must be `filename`".into())]));
    }
    let has_split = headers.get(1) == Some("split");
    let first_attr = if has_split { 2 } else { 1 };
    let names: Vec<String> = headers.iter().skip(first_attr).map(str::to_string).collect();
    if names.is_empty() {
        return Err(Error::Load(vec![issue(Some(1), "no attribute columns".into())]));
    }
    let unique: HashSet<_> = names.iter().collect();
    if unique.len() != names.len() {
        return Err(Error::Load(vec![issue(Some(1), "duplicate attribute names".into())]));
    }
    if !has_split {
        log::warn!("{} has no split column; every row is training data", csv_path.display());
    }

    let mut issues = Vec::new();
    let mut rows = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                issues.push(issue(Some(line), e.to_string()));
                continue;
            }
        };
        if record.len() != headers.len() {
            issues.push(issue(
                Some(line),
                format!("expected {} fields, found {}", headers.len(), record.len()),
            ));
            continue;
        }
        let split = if has_split { record[1].to_string() } else { "train".into() };
        if split != "train" && split != "test" {
            issues.push(issue(Some(line), format!("unknown split {split:?}")));
            continue;
        }
        let mut labels = Vec::with_capacity(names.len());
        for (name, field) in names.iter().zip(record.iter().skip(first_attr)) {
            match field.parse::<i64>() {
                Ok(v @ -1..=1) => labels.push(v),
                _ => issues.push(issue(Some(line), format!("non-binary label {field:?} for {name}"))),
            }
        }
        if labels.len() == names.len() {
            rows.push(Row {
                line,
                filename: record[0].to_string(),
                split,
                labels,
            });
        }
    }
    if rows.is_empty() && issues.is_empty() {
        log::warn!("{} lists no images; returning an empty dataset", csv_path.display());
    }

    let plus_minus = rows.iter().any(|r| r.labels.contains(&-1));
    let mut train = Dataset::empty(names.clone(), image_size);
    let mut test = Dataset::empty(names, image_size);
    for row in rows {
        if plus_minus && row.labels.contains(&0) {
            issues.push(issue(
                Some(row.line),
                "label 0 in a file coded {-1, 1}".into(),
            ));
            continue;
        }
        let path = root.join(&row.filename);
        let img = match image::open(&path) {
            Ok(img) => img.to_rgb8(),
            Err(e) => {
                issues.push(LoadIssue {
                    file: path,
                    line: Some(row.line),
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let attrs = AttributeVector(row.labels.iter().map(|&v| if v == 1 { 1.0 } else { 0.0 }).collect());
        let id = Path::new(&row.filename)
            .file_stem()
            .map_or_else(|| row.filename.clone(), |s| s.to_string_lossy().into_owned());
        let sample = Sample {
            id,
            image: image_to_tensor(&crop_and_resize(&img, image_size)),
            attrs,
        };
        if row.split == "test" {
            test.samples.push(sample);
        } else {
            train.samples.push(sample);
        }
    }
    if !issues.is_empty() {
        return Err(Error::Load(issues));
    }
    Ok(Splits { train, test })
}

/// Writes both splits as PNGs plus `attributes.csv` with {0, 1} labels.
pub fn write_manifest(root: &Path, splits: &Splits) -> Result<()> {
    let images = root.join(IMAGE_DIR);
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let csv_path = root.join(MANIFEST_FILE);
    let mut writer = csv::Writer::from_path(&csv_path).map_err(|e| Error::Config(e.to_string()))?;
    let mut header = vec!["filename".to_string(), "split".to_string()];
    header.extend(splits.train.attribute_names.iter().cloned());
    writer.write_record(&header).map_err(|e| Error::Config(e.to_string()))?;
    for (split, set) in [("train", &splits.train), ("test", &splits.test)] {
        for s in &set.samples {
            let rel = format!("{IMAGE_DIR}/{}.png", s.id);
            let path = root.join(&rel);
            tensor_to_image(&s.image)?
                .save(&path)
                .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
            let mut record = vec![rel, split.to_string()];
            record.extend(s.attrs.values().iter().map(|&v| (v as u8).to_string()));
            writer.write_record(&record).map_err(|e| Error::Config(e.to_string()))?;
        }
    }
    writer.flush().map_err(|e| Error::io(&csv_path, e))
}
