use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const HEADER_TAG: &str = "#fewgraph-corpus";
const HEADER_VERSION: &str = "v1";

/// Which side of a cross-domain pairing a text belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::Source => "S",
            Domain::Target => "T",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "S" => Some(Domain::Source),
            "T" => Some(Domain::Target),
            _ => None,
        }
    }
}

/// Ordered, unique class names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSpace {
    classes: Vec<String>,
}

impl LabelSpace {
    pub fn new<S: Into<String>>(classes: impl IntoIterator<Item = S>) -> Result<Self> {
        let classes: Vec<String> = classes.into_iter().map(Into::into).collect();
        if classes.len() < 2 {
            return Err(Error::Data(format!(
                "a label space needs at least 2 classes, got {}",
                classes.len()
            )));
        }
        for (i, c) in classes.iter().enumerate() {
            if c.is_empty() || c == "?" || c.contains([',', '\t', '\n', ' ']) {
                return Err(Error::Data(format!("invalid class name {c:?}")));
            }
            if classes[..i].contains(c) {
                return Err(Error::Data(format!("duplicate class name {c:?}")));
            }
        }
        Ok(LabelSpace { classes })
    }

    /// `k2`, the number of classes.
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.classes
    }

    pub fn name(&self, class: usize) -> &str {
        &self.classes[class]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }
}

/// One text: its precomputed embedding plus optional label and domain tag.
#[derive(Clone, Debug, PartialEq)]
pub struct TextRecord {
    pub id: String,
    pub embedding: Vec<f64>,
    pub label: Option<usize>,
    pub domain: Domain,
}

/// A validated collection of [`TextRecord`]s sharing one embedding width and
/// label space.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    dim: usize,
    labels: LabelSpace,
    records: Vec<TextRecord>,
}

impl Corpus {
    pub fn new(dim: usize, labels: LabelSpace, records: Vec<TextRecord>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Data("embedding dimension must be positive".into()));
        }
        for r in &records {
            check_record(r, dim, &labels).map_err(Error::Data)?;
        }
        Ok(Corpus {
            dim,
            labels,
            records,
        })
    }

    /// `k1`, the embedding width.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &LabelSpace {
        &self.labels
    }

    pub fn records(&self) -> &[TextRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Indices of records in `domain`.
    pub fn domain_indices(&self, domain: Domain) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].domain == domain)
            .collect()
    }

    pub fn has_labeled_source(&self) -> bool {
        self.records
            .iter()
            .any(|r| r.domain == Domain::Source && r.label.is_some())
    }

    /// Appends all records of `other`, which must share width and label space.
    pub fn merge(&mut self, other: Corpus) -> Result<()> {
        if other.dim != self.dim || other.labels != self.labels {
            return Err(Error::Config(format!(
                "cannot merge corpora: dim {} vs {}, classes {:?} vs {:?}",
                self.dim,
                other.dim,
                self.labels.names(),
                other.labels.names()
            )));
        }
        self.records.extend(other.records);
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{HEADER_TAG} {HEADER_VERSION} dim={} classes={}\n",
            self.dim,
            self.labels.names().join(",")
        );
        for r in &self.records {
            let label = r.label.map_or("?", |c| self.labels.name(c));
            let _ = write!(out, "{}\t{}\t{}\t", r.id, label, r.domain.tag());
            for (i, v) in r.embedding.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{v:?}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses the line-oriented corpus format. `origin` only labels errors.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let fmt_err = |line: usize, msg: String| Error::Format {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| fmt_err(1, "empty file, expected corpus header".into()))?;
        let (dim, labels) = parse_header(header).map_err(|m| fmt_err(1, m))?;

        let mut records = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let record = parse_record(line, dim, &labels).map_err(|m| fmt_err(lineno, m))?;
            records.push(record);
        }
        Ok(Corpus {
            dim,
            labels,
            records,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn parse_header(line: &str) -> Result<(usize, LabelSpace), String> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(HEADER_TAG) {
        return Err(format!("expected header starting with {HEADER_TAG:?}"));
    }
    match parts.next() {
        Some(HEADER_VERSION) => {}
        other => return Err(format!("unsupported corpus version {other:?}")),
    }
    let mut dim = None;
    let mut classes = None;
    for kv in parts {
        match kv.split_once('=') {
            Some(("dim", v)) => {
                dim = Some(v.parse::<usize>().map_err(|_| format!("bad dim {v:?}"))?)
            }
            Some(("classes", v)) => classes = Some(v.split(',').collect::<Vec<_>>()),
            _ => return Err(format!("unexpected header field {kv:?}")),
        }
    }
    let dim = dim.ok_or("header is missing dim=")?;
    if dim == 0 {
        return Err("dim must be positive".into());
    }
    let labels = LabelSpace::new(classes.ok_or("header is missing classes=")?)
        .map_err(|e| e.to_string())?;
    Ok((dim, labels))
}

fn parse_record(line: &str, dim: usize, labels: &LabelSpace) -> Result<TextRecord, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(format!(
            "expected 4 tab-separated fields, found {}",
            fields.len()
        ));
    }
    let label = match fields[1] {
        "?" => None,
        name => Some(
            labels
                .index_of(name)
                .ok_or_else(|| format!("unknown class {name:?}"))?,
        ),
    };
    let domain = Domain::from_tag(fields[2])
        .ok_or_else(|| format!("domain must be S or T, got {:?}", fields[2]))?;
    let embedding = fields[3]
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| format!("bad number {t:?}")))
        .collect::<Result<Vec<_>, _>>()?;
    let record = TextRecord {
        id: fields[0].to_string(),
        embedding,
        label,
        domain,
    };
    check_record(&record, dim, labels)?;
    Ok(record)
}

fn check_record(r: &TextRecord, dim: usize, labels: &LabelSpace) -> Result<(), String> {
    if r.id.is_empty() || r.id.contains(['\t', '\n']) {
        return Err(format!("invalid record id {:?}", r.id));
    }
    if r.embedding.len() != dim {
        return Err(format!(
            "record {:?} has {} embedding values, expected {dim}",
            r.id,
            r.embedding.len()
        ));
    }
    if r.embedding.iter().any(|v| !v.is_finite()) {
        return Err(format!("record {:?} has a non-finite embedding value", r.id));
    }
    if let Some(c) = r.label {
        if c >= labels.len() {
            return Err(format!(
                "record {:?} has label {c} outside {} classes",
                r.id,
                labels.len()
            ));
        }
    }
    Ok(())
}
