use std::cell::Cell;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::BoxAnnotation;
use crate::geometry::BBox;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    /// Relative to the manifest directory unless absolute.
    pub image: String,
    pub boxes: Vec<BoxAnnotation>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireBox {
    class: usize,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRecord {
    image: String,
    boxes: Vec<WireBox>,
}

/// Annotated image list. Every access to annotations is counted, which lets
/// callers prove that a stream was consumed without labels.
#[derive(Debug)]
pub struct DatasetManifest {
    pub split: Split,
    root: PathBuf,
    records: Vec<Record>,
    label_reads: Cell<usize>,
}

impl DatasetManifest {
    pub fn new(split: Split, root: PathBuf, records: Vec<Record>) -> Self {
        Self {
            split,
            root,
            records,
            label_reads: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Resolved path of image `i`. Does not touch annotations.
    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.records[i].image)
    }

    pub fn image_paths(&self) -> Vec<PathBuf> {
        (0..self.len()).map(|i| self.image_path(i)).collect()
    }

    pub fn boxes(&self, i: usize) -> &[BoxAnnotation] {
        self.label_reads.set(self.label_reads.get() + 1);
        &self.records[i].boxes
    }

    /// All records, annotations included; counts as reading every label.
    pub fn records(&self) -> &[Record] {
        self.label_reads.set(self.label_reads.get() + self.records.len());
        &self.records
    }

    /// Number of annotation lists handed out so far.
    pub fn label_reads(&self) -> usize {
        self.label_reads.get()
    }

    /// Checks that every image exists and every box lies inside it.
    pub fn validate(&self) -> Result<()> {
        let label = self.root.join(self.split.file_name()).display().to_string();
        for (i, r) in self.records.iter().enumerate() {
            let path = self.root.join(&r.image);
            let (w, h) = image::image_dimensions(&path).map_err(|e| Error::Manifest {
                path: label.clone(),
                line: i + 1,
                message: format!("image {}: {e}", path.display()),
            })?;
            for (j, b) in r.boxes.iter().enumerate() {
                if b.bbox.x2 > f64::from(w) || b.bbox.y2 > f64::from(h) {
                    return Err(Error::Manifest {
                        path: label.clone(),
                        line: i + 1,
                        message: format!("box {j} {:?} exceeds the {w}x{h} image", b.bbox),
                    });
                }
            }
        }
        Ok(())
    }
}

fn check_box(b: &WireBox) -> std::result::Result<BoxAnnotation, String> {
    let bbox = BBox::new(b.x1, b.y1, b.x2, b.y2);
    let finite = [b.x1, b.y1, b.x2, b.y2].iter().all(|v| v.is_finite());
    if !finite || b.x1 < 0.0 || b.y1 < 0.0 {
        return Err(format!("coordinates {:?} out of bounds", [b.x1, b.y1, b.x2, b.y2]));
    }
    if b.x2 <= b.x1 || b.y2 <= b.y1 {
        return Err(format!("degenerate box {:?}", [b.x1, b.y1, b.x2, b.y2]));
    }
    Ok(BoxAnnotation {
        class_id: b.class,
        bbox,
    })
}

/// Reads a JSON-lines manifest. The split is inferred from the file name
/// (`test*` is the test split, anything else train).
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let label = path.display().to_string();
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Manifest {
            path: label.clone(),
            line: n + 1,
            message,
        };
        let w: WireRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let boxes = w
            .boxes
            .iter()
            .enumerate()
            .map(|(j, b)| check_box(b).map_err(|m| err(format!("box {j}: {m}"))))
            .collect::<Result<Vec<_>>>()?;
        records.push(Record { image: w.image, boxes });
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    let split = if stem.starts_with("test") { Split::Test } else { Split::Train };
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok(DatasetManifest::new(split, root, records))
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for r in &manifest.records {
        let w = WireRecord {
            image: r.image.clone(),
            boxes: r
                .boxes
                .iter()
                .map(|b| WireBox {
                    class: b.class_id,
                    x1: b.bbox.x1,
                    y1: b.bbox.y1,
                    x2: b.bbox.x2,
                    y2: b.bbox.y2,
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &w).map_err(|e| Error::InvalidInput(e.to_string()))?;
        out.push(b'\n');
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(class_id: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> BoxAnnotation {
        BoxAnnotation {
            class_id,
            bbox: BBox::new(x1, y1, x2, y2),
        }
    }

    #[test]
    fn write_then_read_round_trips() {
        let d = tempfile::tempdir().unwrap();
        let records = vec![
            Record {
                image: "images/a.png".into(),
                boxes: vec![ann(1, 0.0, 1.5, 10.25, 20.0), ann(7, 3.0, 3.0, 4.0, 5.0)],
            },
            Record {
                image: "images/b.png".into(),
                boxes: vec![],
            },
        ];
        let m = DatasetManifest::new(Split::Test, d.path().to_path_buf(), records.clone());
        let p = d.path().join("test.jsonl");
        write_manifest(&m, &p).unwrap();
        let back = read_manifest(&p).unwrap();
        assert_eq!(back.split, Split::Test);
        assert_eq!(back.records(), &records[..]);
        assert_eq!(back.image_path(1), d.path().join("images/b.png"));
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(r#"{"image":"images/a.png","boxes":[{"class":1,"x1":0.0,"#));
    }

    #[test]
    fn malformed_lines_name_their_line() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("train.jsonl");
        let good = r#"{"image":"a.png","boxes":[]}"#;
        let cases = [
            (format!("{good}\n{{not json\n"), 2, ""),
            (format!("{good}\n{good}\n{}\n", r#"{"image":"c.png","boxes":[{"class":0,"x1":5,"y1":0,"x2":5,"y2":3}]}"#), 3, "box 0"),
            (format!("{}\n", r#"{"image":"c.png","boxes":[{"class":0,"x1":1,"y1":0,"x2":5,"y2":3},{"class":0,"x1":-1,"y1":0,"x2":5,"y2":3}]}"#), 1, "box 1"),
        ];
        for (text, line, needle) in cases {
            std::fs::write(&p, text).unwrap();
            match read_manifest(&p) {
                Err(Error::Manifest { line: l, message, .. }) => {
                    assert_eq!(l, line);
                    assert!(message.contains(needle), "{message}");
                }
                other => panic!("expected manifest error, got {other:?}"),
            }
        }
    }

    #[test]
    fn empty_box_list_is_legal() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("train.jsonl");
        std::fs::write(&p, "{\"image\":\"a.png\",\"boxes\":[]}\n").unwrap();
        let m = read_manifest(&p).unwrap();
        assert_eq!(m.len(), 1);
        assert!(m.boxes(0).is_empty());
    }

    #[test]
    fn label_reads_are_counted() {
        let m = DatasetManifest::new(
            Split::Train,
            PathBuf::from("."),
            vec![Record {
                image: "a.png".into(),
                boxes: vec![],
            }],
        );
        let _ = m.image_paths();
        assert_eq!(m.label_reads(), 0);
        let _ = m.boxes(0);
        assert_eq!(m.label_reads(), 1);
    }

    #[test]
    fn validation_checks_images_and_bounds() {
        let d = tempfile::tempdir().unwrap();
        let img = crate::tensor::Array::full(&[3, 8, 8], 0.5f32);
        crate::toydomains::save_png(&img, &d.path().join("a.png")).unwrap();
        let mk = |x2: f64, image: &str| {
            DatasetManifest::new(
                Split::Train,
                d.path().to_path_buf(),
                vec![Record {
                    image: image.into(),
                    boxes: vec![ann(0, 0.0, 0.0, x2, 4.0)],
                }],
            )
        };
        mk(8.0, "a.png").validate().unwrap();
        assert!(mk(9.0, "a.png").validate().is_err());
        assert!(mk(4.0, "missing.png").validate().is_err());
    }
}
