//! On-disk formats: parameter checkpoints, catalog and pair-buffer records,
//! template files, metrics tables and plain token lines.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rcr_core::catalog::{AttributeSchema, Catalog, Item, Split};
use rcr_core::constraint::{PairBuffer, PairSample};
use rcr_core::eval::AblationCurve;
use rcr_core::numkit::{ParamSet, Tensor};
use rcr_core::trainer::{EpisodeMetrics, MetricsLog};
use rcr_core::user_sim::{format_template_line, parse_template_line, Template};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{RcrError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CATALOG_VERSION: u32 = 1;
pub const BUFFER_VERSION: u32 = 1;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| RcrError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| RcrError::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| RcrError::io(path, e))
}

fn json_line<W: Write, T: Serialize>(w: &mut W, path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string(value).map_err(|e| RcrError::format(path, e))?;
    writeln!(w, "{s}").map_err(|e| RcrError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| RcrError::format(path, e))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| RcrError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).map_err(|e| RcrError::format(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| RcrError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| RcrError::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Section {
    name: String,
    params: Vec<ParamRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointDoc {
    format_version: u32,
    sections: Vec<Section>,
}

/// Groups parameters into sections named by the prefix before the first dot.
pub fn checkpoint_to_string(params: &ParamSet) -> String {
    let mut sections: Vec<Section> = Vec::new();
    for (name, value) in params.entries() {
        let section = name.split('.').next().unwrap_or(name);
        let record = ParamRecord {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            values: value.data().to_vec(),
        };
        match sections.iter_mut().find(|s| s.name == section) {
            Some(s) => s.params.push(record),
            None => sections.push(Section {
                name: section.to_string(),
                params: vec![record],
            }),
        }
    }
    let doc = CheckpointDoc {
        format_version: CHECKPOINT_VERSION,
        sections,
    };
    serde_json::to_string_pretty(&doc).expect("checkpoint is serialisable")
}

pub fn checkpoint_from_str(text: &str) -> std::result::Result<ParamSet, String> {
    let doc: CheckpointDoc = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if doc.format_version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {}", doc.format_version));
    }
    let mut params = ParamSet::new();
    for section in doc.sections {
        for p in section.params {
            let t = Tensor::new(p.shape, p.values).map_err(|e| format!("{}: {e}", p.name))?;
            params.add(&p.name, t).map_err(|e| e.to_string())?;
        }
    }
    Ok(params)
}

pub fn write_checkpoint(path: &Path, params: &ParamSet) -> Result<()> {
    write_text(path, &(checkpoint_to_string(params) + "\n"))
}

pub fn read_checkpoint(path: &Path) -> Result<ParamSet> {
    checkpoint_from_str(&read_text(path)?).map_err(|m| RcrError::format(path, m))
}

#[derive(Debug, Serialize, Deserialize)]
struct CatalogHeader {
    format: String,
    version: u32,
    attributes: Vec<String>,
    values: Vec<Vec<String>>,
    embed_dim: usize,
    items: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ItemRecord {
    id: usize,
    split: Split,
    attrs: Vec<usize>,
    retrieval: Vec<usize>,
    embedding: Vec<f64>,
}

pub fn write_catalog(path: &Path, catalog: &Catalog) -> Result<()> {
    let mut w = create(path)?;
    let schema = catalog.schema();
    let header = CatalogHeader {
        format: "rcr-catalog".into(),
        version: CATALOG_VERSION,
        attributes: schema.names().to_vec(),
        values: (0..schema.num_attributes()).map(|a| schema.value_names(a).to_vec()).collect(),
        embed_dim: catalog.embed_dim(),
        items: catalog.len(),
    };
    json_line(&mut w, path, &header)?;
    for item in catalog.items() {
        json_line(&mut w, path, &ItemRecord {
            id: item.id,
            split: item.split,
            attrs: item.attrs.clone(),
            retrieval: catalog.retrieval_attrs(item.id).to_vec(),
            embedding: item.embedding.clone(),
        })?;
    }
    w.flush().map_err(|e| RcrError::io(path, e))
}

pub fn read_catalog(path: &Path) -> Result<Catalog> {
    let mut lines = open(path)?.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| RcrError::format(path, "empty catalog file"))?
        .map_err(|e| RcrError::io(path, e))?;
    let header: CatalogHeader = serde_json::from_str(&header_line).map_err(|e| RcrError::format(path, e))?;
    if header.format != "rcr-catalog" || header.version != CATALOG_VERSION {
        return Err(RcrError::format(path, format!("unsupported catalog {} v{}", header.format, header.version)));
    }
    let schema = AttributeSchema::new(header.attributes, header.values)?;
    let mut items = Vec::with_capacity(header.items);
    let mut retrieval = Vec::with_capacity(header.items);
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| RcrError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ItemRecord =
            serde_json::from_str(&line).map_err(|e| RcrError::format(path, format!("line {}: {e}", n + 2)))?;
        if r.embedding.len() != header.embed_dim {
            return Err(RcrError::format(path, format!("item {} has embedding length {}", r.id, r.embedding.len())));
        }
        retrieval.push(r.retrieval);
        items.push(Item {
            id: r.id,
            attrs: r.attrs,
            embedding: r.embedding,
            split: r.split,
        });
    }
    if items.len() != header.items {
        return Err(RcrError::format(path, format!("header promises {} items, found {}", header.items, items.len())));
    }
    Ok(Catalog::from_items(schema, items)?.with_retrieval_attrs(retrieval)?)
}

pub fn write_templates(path: &Path, templates: &[Template], schema: &AttributeSchema) -> Result<()> {
    let text: String = templates
        .iter()
        .map(|t| format_template_line(t, schema) + "\n")
        .collect();
    write_text(path, &text)
}

/// One template per non-empty line; `#` starts a comment line.
pub fn parse_templates(text: &str, schema: &AttributeSchema) -> rcr_core::Result<Vec<Template>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .enumerate()
        .map(|(id, l)| parse_template_line(l, id, schema))
        .collect()
}

pub fn read_templates(path: &Path, schema: &AttributeSchema) -> Result<Vec<Template>> {
    parse_templates(&read_text(path)?, schema).map_err(|e| RcrError::format(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct BufferHeader {
    format: String,
    version: u32,
    capacity: usize,
    violations: usize,
    clean: usize,
}

pub fn write_buffer(path: &Path, buffer: &PairBuffer) -> Result<()> {
    let mut w = create(path)?;
    let header = BufferHeader {
        format: "rcr-pairs".into(),
        version: BUFFER_VERSION,
        capacity: buffer.capacity,
        violations: buffer.violations().len(),
        clean: buffer.clean().len(),
    };
    json_line(&mut w, path, &header)?;
    for s in buffer.violations().iter().chain(buffer.clean()) {
        json_line(&mut w, path, s)?;
    }
    w.flush().map_err(|e| RcrError::io(path, e))
}

/// Reloads a buffer; samples are refiled by their stored oracle label.
pub fn read_buffer(path: &Path) -> Result<PairBuffer> {
    let mut lines = open(path)?.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| RcrError::format(path, "empty buffer file"))?
        .map_err(|e| RcrError::io(path, e))?;
    let header: BufferHeader = serde_json::from_str(&header_line).map_err(|e| RcrError::format(path, e))?;
    if header.format != "rcr-pairs" || header.version != BUFFER_VERSION {
        return Err(RcrError::format(path, "not a pair buffer file"));
    }
    let mut buffer = PairBuffer::new(header.capacity);
    for line in lines {
        let line = line.map_err(|e| RcrError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: PairSample = serde_json::from_str(&line).map_err(|e| RcrError::format(path, e))?;
        buffer.push(s);
    }
    Ok(buffer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MetricsRow {
    episode: usize,
    steps: usize,
    success: u8,
    nv: usize,
    lambda: f64,
    mean_reward: f64,
    mean_penalty: f64,
    disc_loss: Option<f64>,
}

/// Append-only writer for training metrics.
pub struct MetricsWriter {
    inner: csv::Writer<BufWriter<File>>,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let w = create(path)?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        inner
            .write_record(["episode", "steps", "success", "nv", "lambda", "mean_reward", "mean_penalty", "disc_loss"])
            .map_err(|e| RcrError::format(path, e))?;
        Ok(Self {
            inner,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, m: &EpisodeMetrics) -> Result<()> {
        let row = MetricsRow {
            episode: m.episode,
            steps: m.steps,
            success: m.success as u8,
            nv: m.nv,
            lambda: m.lambda,
            mean_reward: m.mean_reward,
            mean_penalty: m.mean_penalty,
            disc_loss: m.disc_loss,
        };
        self.inner.serialize(row).map_err(|e| RcrError::format(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| RcrError::io(&self.path, e))
    }
}

pub fn write_metrics(path: &Path, log: &MetricsLog) -> Result<()> {
    let mut w = MetricsWriter::create(path)?;
    for r in &log.rows {
        w.append(r)?;
    }
    w.finish()
}

pub fn read_metrics(path: &Path) -> Result<MetricsLog> {
    let mut r = csv::Reader::from_reader(open(path)?);
    let mut rows = Vec::new();
    for rec in r.deserialize::<MetricsRow>() {
        let m = rec.map_err(|e| RcrError::format(path, e))?;
        rows.push(EpisodeMetrics {
            episode: m.episode,
            steps: m.steps,
            success: m.success != 0,
            nv: m.nv,
            lambda: m.lambda,
            mean_reward: m.mean_reward,
            mean_penalty: m.mean_penalty,
            disc_loss: m.disc_loss,
        });
    }
    Ok(MetricsLog { rows })
}

/// One smoothed curve: `episode,sr,ni,nv,lambda`.
pub fn write_curve(path: &Path, curve: &AblationCurve) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["episode", "sr", "ni", "nv", "lambda"]).map_err(|e| RcrError::format(path, e))?;
    for i in 0..curve.episodes.len() {
        w.write_record([
            curve.episodes[i].to_string(),
            curve.sr[i].to_string(),
            curve.ni[i].to_string(),
            curve.nv[i].to_string(),
            curve.lambda[i].to_string(),
        ])
        .map_err(|e| RcrError::format(path, e))?;
    }
    w.flush().map_err(|e| RcrError::io(path, e))
}

/// Token-per-space lines.
pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l.as_ref());
        text.push('\n');
    }
    write_text(path, &text)
}
