//! Readers and writers for every file format the pipeline exchanges.
//!
//! All files are UTF-8 CSV with LF line endings, a mandatory header row and
//! `.` as decimal separator. Box columns list the X pair before the Y pair. Floats are written in shortest round-trip
//! form, so reading a written file reproduces every value bit for bit.
//!
//! | file | header |
//! |------|--------|
//! | class vocabulary | `LabelName,Kind` (`Kind` is `object` or `attribute`) |
//! | triplet vocabulary | `LabelName1,RelationshipLabel,LabelName2` |
//! | detections | `ImageID,LabelName,XMin,XMax,YMin,YMax,Score` |
//! | ground-truth boxes | `ImageID,LabelName,XMin,XMax,YMin,YMax` |
//! | relations | `ImageID,LabelName1,XMin1,XMax1,YMin1,YMax1,LabelName2,XMin2,XMax2,YMin2,YMax2,RelationshipLabel` |
//! | relation predictions | relations columns with `Confidence1`/`Confidence2` after each box, then `Score` |
//! | visual scores | `ImageID,SubjKey,ObjKey,Predicate,Score` |

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::bbox::{BoundingBox, BoxError};
use crate::types::{ClassId, ClassVocabulary, Detection, PredicateId, RelationInstance, Triplet, TripletVocabulary, VocabularyError};

pub const CLASS_HEADER: &[&str] = &["LabelName", "Kind"];
pub const TRIPLET_HEADER: &[&str] = &["LabelName1", "RelationshipLabel", "LabelName2"];
pub const DETECTION_HEADER: &[&str] = &["ImageID", "LabelName", "XMin", "XMax", "YMin", "YMax", "Score"];
pub const RELATION_HEADER: &[&str] = &[
    "ImageID",
    "LabelName1",
    "XMin1",
    "XMax1",
    "YMin1",
    "YMax1",
    "LabelName2",
    "XMin2",
    "XMax2",
    "YMin2",
    "YMax2",
    "RelationshipLabel",
];
pub const PREDICTION_HEADER: &[&str] = &[
    "ImageID",
    "LabelName1",
    "XMin1",
    "XMax1",
    "YMin1",
    "YMax1",
    "Confidence1",
    "LabelName2",
    "XMin2",
    "XMax2",
    "YMin2",
    "YMax2",
    "Confidence2",
    "RelationshipLabel",
    "Score",
];
pub const SCORE_TABLE_HEADER: &[&str] = &["ImageID", "SubjKey", "ObjKey", "Predicate", "Score"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: header {found:?} does not match expected {expected:?}")]
    BadHeader {
        path: PathBuf,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("{path}:{line}: malformed row: {reason}")]
    MalformedRow { path: PathBuf, line: u64, reason: String },
    #[error("{path}:{line}: unknown class name {name:?}")]
    UnknownClassName { path: PathBuf, line: u64, name: String },
    #[error("{path}:{line}: {source}")]
    BoxInvariantViolation {
        path: PathBuf,
        line: u64,
        #[source]
        source: BoxError,
    },
    #[error("{path}:{line}: triplet ({subject}, {predicate}, {object}) is not in the vocabulary")]
    UnknownTriplet {
        path: PathBuf,
        line: u64,
        subject: String,
        predicate: String,
        object: String,
    },
    #[error("{path}:{line}: duplicate key {key}")]
    DuplicateKey { path: PathBuf, line: u64, key: String },
    #[error("{path}: {source}")]
    Vocabulary {
        path: PathBuf,
        #[source]
        source: VocabularyError,
    },
}

impl IngestError {
    /// Stable variant name, used in machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            IngestError::Io { .. } => "Io",
            IngestError::Csv { .. } => "Csv",
            IngestError::BadHeader { .. } => "BadHeader",
            IngestError::MalformedRow { .. } => "MalformedRow",
            IngestError::UnknownClassName { .. } => "UnknownClassName",
            IngestError::BoxInvariantViolation { .. } => "BoxInvariantViolation",
            IngestError::UnknownTriplet { .. } => "UnknownTriplet",
            IngestError::DuplicateKey { .. } => "DuplicateKey",
            IngestError::Vocabulary { .. } => "Vocabulary",
        }
    }
}

type Result<T> = std::result::Result<T, IngestError>;

/// Row-level parsing context: file path plus current 1-based line number.
struct RowCtx<'a> {
    path: &'a Path,
    line: u64,
}

impl RowCtx<'_> {
    fn malformed(&self, reason: impl Into<String>) -> IngestError {
        IngestError::MalformedRow {
            path: self.path.to_path_buf(),
            line: self.line,
            reason: reason.into(),
        }
    }

    fn float(&self, record: &csv::StringRecord, idx: usize, column: &str) -> Result<f64> {
        let raw = &record[idx];
        let v: f64 = raw
            .trim()
            .parse()
            .map_err(|_| self.malformed(format!("column {column}: {raw:?} is not a number")))?;
        if !v.is_finite() {
            return Err(self.malformed(format!("column {column}: {raw:?} is not finite")));
        }
        Ok(v)
    }

    fn probability(&self, record: &csv::StringRecord, idx: usize, column: &str) -> Result<f64> {
        let v = self.float(record, idx, column)?;
        if !(0.0..=1.0).contains(&v) {
            return Err(self.malformed(format!("column {column}: {v} is outside [0, 1]")));
        }
        Ok(v)
    }

    /// Reads `XMin,XMax,YMin,YMax` starting at `idx`.
    fn bbox(&self, record: &csv::StringRecord, idx: usize) -> Result<BoundingBox> {
        let x_min = self.float(record, idx, "XMin")?;
        let x_max = self.float(record, idx + 1, "XMax")?;
        let y_min = self.float(record, idx + 2, "YMin")?;
        let y_max = self.float(record, idx + 3, "YMax")?;
        BoundingBox::new(x_min, y_min, x_max, y_max).map_err(|source| IngestError::BoxInvariantViolation {
            path: self.path.to_path_buf(),
            line: self.line,
            source,
        })
    }

    fn class(&self, classes: &ClassVocabulary, name: &str) -> Result<ClassId> {
        classes.id(name).ok_or_else(|| IngestError::UnknownClassName {
            path: self.path.to_path_buf(),
            line: self.line,
            name: name.to_string(),
        })
    }
}

/// Reads `path` after checking its header against `accepted`. Returns the
/// index of the matching header together with the data rows.
fn read_rows(path: &Path, accepted: &[&[&str]]) -> Result<(usize, Vec<(u64, csv::StringRecord)>)> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let csv_err = |source| IngestError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(csv_err)?,
        None => {
            return Err(IngestError::BadHeader {
                path: path.to_path_buf(),
                expected: accepted[0].iter().map(|s| s.to_string()).collect(),
                found: Vec::new(),
            })
        }
    };
    let found: Vec<String> = header.iter().map(|s| s.trim().to_string()).collect();
    let variant = accepted
        .iter()
        .position(|h| h.len() == found.len() && h.iter().zip(&found).all(|(a, b)| a == b))
        .ok_or_else(|| IngestError::BadHeader {
            path: path.to_path_buf(),
            expected: accepted[0].iter().map(|s| s.to_string()).collect(),
            found: found.clone(),
        })?;
    let width = accepted[variant].len();
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if rec.len() != width {
            return Err(IngestError::MalformedRow {
                path: path.to_path_buf(),
                line,
                reason: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        rows.push((line, rec));
    }
    Ok((variant, rows))
}

struct CsvOut {
    path: PathBuf,
    writer: BufWriter<File>,
}

impl CsvOut {
    fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let file = File::create(path).map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut out = CsvOut {
            path: path.to_path_buf(),
            writer: BufWriter::new(file),
        };
        out.row(header.iter().map(|s| s.to_string()))?;
        Ok(out)
    }

    fn row<I: IntoIterator<Item = String>>(&mut self, fields: I) -> Result<()> {
        let line = fields.into_iter().map(|f| quote(&f)).collect::<Vec<_>>().join(",");
        writeln!(self.writer, "{line}").map_err(|source| IngestError::Io {
            path: self.path.clone(),
            source,
        })
    }

    fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|source| IngestError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

fn quote(field: &str) -> String {
    if field.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn box_fields(b: &BoundingBox) -> [String; 4] {
    [
        b.x_min().to_string(),
        b.x_max().to_string(),
        b.y_min().to_string(),
        b.y_max().to_string(),
    ]
}

fn name_of(classes: &ClassVocabulary, id: ClassId) -> String {
    classes.name(id).unwrap_or("?").to_string()
}

// ---------------------------------------------------------------------------
// Vocabularies

pub fn read_class_vocabulary(path: &Path) -> Result<ClassVocabulary> {
    let (_, rows) = read_rows(path, &[CLASS_HEADER])?;
    let mut vocab = ClassVocabulary::default();
    for (line, rec) in rows {
        let ctx = RowCtx { path, line };
        let is_attribute = match rec[1].trim() {
            "object" | "" => false,
            "attribute" => true,
            other => return Err(ctx.malformed(format!("Kind must be object or attribute, got {other:?}"))),
        };
        vocab
            .push(rec[0].trim(), is_attribute)
            .map_err(|source| IngestError::Vocabulary {
                path: path.to_path_buf(),
                source,
            })?;
    }
    Ok(vocab)
}

pub fn write_class_vocabulary(path: &Path, classes: &ClassVocabulary) -> Result<()> {
    let mut out = CsvOut::create(path, CLASS_HEADER)?;
    for e in classes.entries() {
        let kind = if e.is_attribute { "attribute" } else { "object" };
        out.row([e.name.clone(), kind.to_string()])?;
    }
    out.finish()
}

/// Predicates receive ids in order of first appearance.
pub fn read_triplet_vocabulary(path: &Path, classes: &ClassVocabulary) -> Result<TripletVocabulary> {
    let (_, rows) = read_rows(path, &[TRIPLET_HEADER])?;
    let mut vocab = TripletVocabulary::new();
    for (line, rec) in rows {
        let ctx = RowCtx { path, line };
        let subject = ctx.class(classes, rec[0].trim())?;
        let predicate_name = rec[1].trim();
        if predicate_name.is_empty() {
            return Err(ctx.malformed("empty RelationshipLabel"));
        }
        let object = ctx.class(classes, rec[2].trim())?;
        let predicate = vocab.intern_predicate(predicate_name);
        vocab.insert(Triplet {
            subject,
            predicate,
            object,
        });
    }
    Ok(vocab)
}

pub fn write_triplet_vocabulary(path: &Path, classes: &ClassVocabulary, triplets: &TripletVocabulary) -> Result<()> {
    let mut out = CsvOut::create(path, TRIPLET_HEADER)?;
    for t in triplets.iter() {
        out.row([
            name_of(classes, t.subject),
            triplets.predicate_name(t.predicate).unwrap_or("?").to_string(),
            name_of(classes, t.object),
        ])?;
    }
    out.finish()
}

// ---------------------------------------------------------------------------
// Detections

/// Reads a detection CSV. A file without the `Score` column is read as ground
/// truth with confidence 1.
pub fn read_detections(path: &Path, classes: &ClassVocabulary) -> Result<Vec<Detection>> {
    let gt_header = &DETECTION_HEADER[..6];
    let (variant, rows) = read_rows(path, &[DETECTION_HEADER, gt_header])?;
    let mut out = Vec::with_capacity(rows.len());
    for (line, rec) in rows {
        let ctx = RowCtx { path, line };
        let image_id = rec[0].trim();
        if image_id.is_empty() {
            return Err(ctx.malformed("empty ImageID"));
        }
        let class_id = ctx.class(classes, rec[1].trim())?;
        let bbox = ctx.bbox(&rec, 2)?;
        let confidence = if variant == 0 {
            ctx.probability(&rec, 6, "Score")?
        } else {
            1.0
        };
        out.push(Detection::new(image_id, class_id, bbox, confidence));
    }
    Ok(out)
}

pub fn write_detections(path: &Path, detections: &[Detection], classes: &ClassVocabulary) -> Result<()> {
    let mut out = CsvOut::create(path, DETECTION_HEADER)?;
    for d in detections {
        let [x0, x1, y0, y1] = box_fields(&d.bbox);
        out.row([
            d.image_id.clone(),
            name_of(classes, d.class_id),
            x0,
            x1,
            y0,
            y1,
            d.confidence.to_string(),
        ])?;
    }
    out.finish()
}

pub fn write_ground_truth_boxes(path: &Path, boxes: &[Detection], classes: &ClassVocabulary) -> Result<()> {
    let mut out = CsvOut::create(path, &DETECTION_HEADER[..6])?;
    for d in boxes {
        let [x0, x1, y0, y1] = box_fields(&d.bbox);
        out.row([d.image_id.clone(), name_of(classes, d.class_id), x0, x1, y0, y1])?;
    }
    out.finish()
}

// ---------------------------------------------------------------------------
// Ground-truth annotations

/// Ground-truth boxes and relations, keyed by image, plus per-class image counts.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    num_classes: usize,
    boxes: BTreeMap<String, Vec<Detection>>,
    relations: BTreeMap<String, Vec<RelationInstance>>,
    class_image_counts: Vec<usize>,
    duplicate_relations: usize,
}

impl AnnotationSet {
    /// `boxes` may be empty; subject and (non-attribute) object boxes of every
    /// relation are added to the box list. Exact duplicate relations and
    /// boxes are dropped; the relation duplicate count is kept.
    pub fn new(num_classes: usize, boxes: Vec<Detection>, relations: Vec<RelationInstance>) -> Self {
        let mut rel_map: BTreeMap<String, Vec<RelationInstance>> = BTreeMap::new();
        let mut duplicate_relations = 0;
        for r in relations {
            let list = rel_map.entry(r.image_id.clone()).or_default();
            if list.iter().any(|x| same_relation(x, &r)) {
                duplicate_relations += 1;
            } else {
                list.push(r);
            }
        }
        let mut box_map: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
        let from_relations = rel_map.values().flatten().flat_map(|r| {
            let obj = (!r.object.bbox.is_null()).then(|| r.object.clone());
            std::iter::once(r.subject.clone()).chain(obj)
        });
        for mut d in boxes.into_iter().chain(from_relations) {
            d.confidence = 1.0;
            let list = box_map.entry(d.image_id.clone()).or_default();
            if !list.iter().any(|x| x.class_id == d.class_id && x.bbox == d.bbox) {
                list.push(d);
            }
        }
        for image in rel_map.keys() {
            box_map.entry(image.clone()).or_default();
        }
        let mut set = AnnotationSet {
            num_classes,
            boxes: box_map,
            relations: rel_map,
            class_image_counts: Vec::new(),
            duplicate_relations,
        };
        set.class_image_counts = set.count_images_per_class();
        set
    }

    fn count_images_per_class(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for dets in self.boxes.values() {
            let present: BTreeSet<usize> = dets.iter().map(|d| d.class_id.0).collect();
            for k in present {
                if k < counts.len() {
                    counts[k] += 1;
                }
            }
        }
        counts
    }

    /// Adds standalone ground-truth boxes (e.g. unrelated objects).
    pub fn with_boxes(self, extra: Vec<Detection>) -> Self {
        let boxes = self.boxes.into_values().flatten().chain(extra).collect();
        let relations = self.relations.into_values().flatten().collect();
        let dups = self.duplicate_relations;
        let mut set = AnnotationSet::new(self.num_classes, boxes, relations);
        set.duplicate_relations += dups;
        set
    }

    /// Restricts the set to the given images.
    pub fn subset(&self, images: &BTreeSet<String>) -> Self {
        let boxes = images
            .iter()
            .filter_map(|i| self.boxes.get(i))
            .flatten()
            .cloned()
            .collect();
        let relations = images
            .iter()
            .filter_map(|i| self.relations.get(i))
            .flatten()
            .cloned()
            .collect();
        AnnotationSet::new(self.num_classes, boxes, relations)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Sorted image ids.
    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.boxes.keys().map(String::as_str)
    }

    pub fn num_images(&self) -> usize {
        self.boxes.len()
    }

    pub fn boxes(&self, image_id: &str) -> &[Detection] {
        self.boxes.get(image_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn relations(&self, image_id: &str) -> &[RelationInstance] {
        self.relations.get(image_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn all_boxes(&self) -> impl Iterator<Item = &Detection> {
        self.boxes.values().flatten()
    }

    pub fn all_relations(&self) -> impl Iterator<Item = &RelationInstance> {
        self.relations.values().flatten()
    }

    /// `n_k`: number of distinct images containing at least one box of class k.
    pub fn class_image_counts(&self) -> &[usize] {
        &self.class_image_counts
    }

    pub fn duplicate_relations(&self) -> usize {
        self.duplicate_relations
    }

    /// Sorted ids of images containing class `k`.
    pub fn images_with_class(&self, k: ClassId) -> Vec<&str> {
        self.boxes
            .iter()
            .filter(|(_, dets)| dets.iter().any(|d| d.class_id == k))
            .map(|(i, _)| i.as_str())
            .collect()
    }
}

fn same_relation(a: &RelationInstance, b: &RelationInstance) -> bool {
    a.predicate_id == b.predicate_id
        && a.subject.class_id == b.subject.class_id
        && a.object.class_id == b.object.class_id
        && a.subject.bbox == b.subject.bbox
        && a.object.bbox == b.object.bbox
}

/// Reads a ground-truth relation CSV and validates every row against the
/// triplet vocabulary. Attribute objects must carry the all-zero box.
pub fn read_relations(path: &Path, classes: &ClassVocabulary, triplets: &TripletVocabulary) -> Result<AnnotationSet> {
    let (_, rows) = read_rows(path, &[RELATION_HEADER])?;
    let mut relations = Vec::with_capacity(rows.len());
    for (line, rec) in rows {
        let ctx = RowCtx { path, line };
        let image_id = rec[0].trim().to_string();
        if image_id.is_empty() {
            return Err(ctx.malformed("empty ImageID"));
        }
        let subject_name = rec[1].trim();
        let object_name = rec[6].trim();
        let predicate_name = rec[11].trim();
        let subject_class = ctx.class(classes, subject_name)?;
        let object_class = ctx.class(classes, object_name)?;
        let subject_box = ctx.bbox(&rec, 2)?;
        let object_box = ctx.bbox(&rec, 7)?;
        let unknown = || IngestError::UnknownTriplet {
            path: path.to_path_buf(),
            line,
            subject: subject_name.to_string(),
            predicate: predicate_name.to_string(),
            object: object_name.to_string(),
        };
        let predicate_id = triplets.predicate_id(predicate_name).ok_or_else(unknown)?;
        if !triplets.contains(subject_class, predicate_id, object_class) {
            return Err(unknown());
        }
        if classes.is_attribute(subject_class) {
            return Err(ctx.malformed(format!("attribute {subject_name:?} cannot be a subject")));
        }
        if classes.is_attribute(object_class) != object_box.is_null() {
            return Err(ctx.malformed(
                "attribute objects require the all-zero box and object classes require a real box",
            ));
        }
        relations.push(RelationInstance {
            image_id: image_id.clone(),
            subject: Detection::ground_truth(image_id.clone(), subject_class, subject_box),
            object: Detection::ground_truth(image_id.clone(), object_class, object_box),
            predicate_id,
            score: 1.0,
        });
    }
    Ok(AnnotationSet::new(classes.len(), Vec::new(), relations))
}

pub fn write_relations(
    path: &Path,
    relations: &[RelationInstance],
    classes: &ClassVocabulary,
    triplets: &TripletVocabulary,
) -> Result<()> {
    let mut out = CsvOut::create(path, RELATION_HEADER)?;
    for r in relations {
        let mut row = vec![r.image_id.clone(), name_of(classes, r.subject.class_id)];
        row.extend(box_fields(&r.subject.bbox));
        row.push(name_of(classes, r.object.class_id));
        row.extend(box_fields(&r.object.bbox));
        row.push(triplets.predicate_name(r.predicate_id).unwrap_or("?").to_string());
        out.row(row)?;
    }
    out.finish()
}

// ---------------------------------------------------------------------------
// Relation predictions

pub fn write_relation_predictions(
    path: &Path,
    instances: &[RelationInstance],
    classes: &ClassVocabulary,
    triplets: &TripletVocabulary,
) -> Result<()> {
    let mut out = CsvOut::create(path, PREDICTION_HEADER)?;
    for r in instances {
        let mut row = vec![r.image_id.clone(), name_of(classes, r.subject.class_id)];
        row.extend(box_fields(&r.subject.bbox));
        row.push(r.subject.confidence.to_string());
        row.push(name_of(classes, r.object.class_id));
        row.extend(box_fields(&r.object.bbox));
        row.push(r.object.confidence.to_string());
        row.push(triplets.predicate_name(r.predicate_id).unwrap_or("?").to_string());
        row.push(r.score.to_string());
        out.row(row)?;
    }
    out.finish()
}

pub fn read_relation_predictions(
    path: &Path,
    classes: &ClassVocabulary,
    triplets: &TripletVocabulary,
) -> Result<Vec<RelationInstance>> {
    let (_, rows) = read_rows(path, &[PREDICTION_HEADER])?;
    let mut out = Vec::with_capacity(rows.len());
    for (line, rec) in rows {
        let ctx = RowCtx { path, line };
        let image_id = rec[0].trim().to_string();
        if image_id.is_empty() {
            return Err(ctx.malformed("empty ImageID"));
        }
        let subject = Detection::new(
            image_id.clone(),
            ctx.class(classes, rec[1].trim())?,
            ctx.bbox(&rec, 2)?,
            ctx.probability(&rec, 6, "Confidence1")?,
        );
        let object = Detection::new(
            image_id.clone(),
            ctx.class(classes, rec[7].trim())?,
            ctx.bbox(&rec, 8)?,
            ctx.probability(&rec, 12, "Confidence2")?,
        );
        let predicate_name = rec[13].trim();
        let predicate_id = triplets.predicate_id(predicate_name).ok_or_else(|| IngestError::UnknownTriplet {
            path: path.to_path_buf(),
            line,
            subject: rec[1].trim().to_string(),
            predicate: predicate_name.to_string(),
            object: rec[7].trim().to_string(),
        })?;
        out.push(RelationInstance {
            image_id,
            subject,
            object,
            predicate_id,
            score: ctx.probability(&rec, 14, "Score")?,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Visual score table

/// Box coordinates quantized to 6 decimal places, in `XMin,XMax,YMin,YMax` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BoxKey([i64; 4]);

const KEY_SCALE: f64 = 1e6;

impl BoxKey {
    pub fn from_box(b: &BoundingBox) -> Self {
        let q = |v: f64| (v * KEY_SCALE).round() as i64;
        BoxKey([q(b.x_min()), q(b.x_max()), q(b.y_min()), q(b.y_max())])
    }

    /// Parses `XMin:XMax:YMin:YMax`.
    pub fn parse(raw: &str) -> Option<Self> {
        let parts: Vec<f64> = raw.split(':').map(|p| p.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().ok()?;
        if parts.len() != 4 {
            return None;
        }
        let b = BoundingBox::new(parts[0], parts[2], parts[1], parts[3]).ok()?;
        Some(Self::from_box(&b))
    }
}

impl std::fmt::Display for BoxKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|q| format!("{}.{:06}", q / 1_000_000, q % 1_000_000))
            .collect();
        write!(f, "{}", parts.join(":"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ScoreKey {
    pub image_id: String,
    pub subject: BoxKey,
    pub object: BoxKey,
    pub predicate: String,
}

/// Externally produced per-pair, per-predicate scores (e.g. from a visual model).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    entries: BTreeMap<ScoreKey, f64>,
}

impl ScoreTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the previous score when the key already existed.
    pub fn insert(&mut self, key: ScoreKey, score: f64) -> Option<f64> {
        self.entries.insert(key, score)
    }

    pub fn key(image_id: &str, subject: &BoundingBox, object: &BoundingBox, predicate: &str) -> ScoreKey {
        ScoreKey {
            image_id: image_id.to_string(),
            subject: BoxKey::from_box(subject),
            object: BoxKey::from_box(object),
            predicate: predicate.to_string(),
        }
    }

    pub fn get(&self, image_id: &str, subject: &BoundingBox, object: &BoundingBox, predicate: &str) -> Option<f64> {
        self.entries.get(&Self::key(image_id, subject, object, predicate)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ScoreKey, f64)> {
        self.entries.iter().map(|(k, v)| (k, *v))
    }
}

pub fn read_score_table(path: &Path) -> Result<ScoreTable> {
    let (_, rows) = read_rows(path, &[SCORE_TABLE_HEADER])?;
    let mut table = ScoreTable::new();
    for (line, rec) in rows {
        let ctx = RowCtx { path, line };
        let image_id = rec[0].trim();
        if image_id.is_empty() {
            return Err(ctx.malformed("empty ImageID"));
        }
        let subject = BoxKey::parse(&rec[1]).ok_or_else(|| ctx.malformed(format!("bad SubjKey {:?}", &rec[1])))?;
        let object = BoxKey::parse(&rec[2]).ok_or_else(|| ctx.malformed(format!("bad ObjKey {:?}", &rec[2])))?;
        let predicate = rec[3].trim();
        if predicate.is_empty() {
            return Err(ctx.malformed("empty Predicate"));
        }
        let score = ctx.probability(&rec, 4, "Score")?;
        let key = ScoreKey {
            image_id: image_id.to_string(),
            subject,
            object,
            predicate: predicate.to_string(),
        };
        let display = format!("{image_id},{subject},{object},{predicate}");
        if table.insert(key, score).is_some() {
            return Err(IngestError::DuplicateKey {
                path: path.to_path_buf(),
                line,
                key: display,
            });
        }
    }
    Ok(table)
}

pub fn write_score_table(path: &Path, table: &ScoreTable) -> Result<()> {
    let mut out = CsvOut::create(path, SCORE_TABLE_HEADER)?;
    for (k, v) in table.iter() {
        out.row([
            k.image_id.clone(),
            k.subject.to_string(),
            k.object.to_string(),
            k.predicate.clone(),
            v.to_string(),
        ])?;
    }
    out.finish()
}

/// Convenience lookup of a predicate name, falling back to the numeric id.
pub fn predicate_label(triplets: &TripletVocabulary, id: PredicateId) -> String {
    triplets
        .predicate_name(id)
        .map(str::to_string)
        .unwrap_or_else(|| id.to_string())
}
