// SPDX-License-Identifier: MIT OR Apache-2.0

//! NDJSON routing traces.
//!
//! The first line is a [`TraceHeader`]; every following line is one
//! [`TraceLine`] (one token at one layer). Files may be gzip-compressed;
//! compression is detected from the magic bytes. The wire contract is
//! `schema/trace-v1.schema.json`.
//!
//! ```text
//! {"format_version":1,"model_label":"desk","num_layers":4,"experts_per_layer":8,"top_k":2,"includes_logits":true}
//! {"sample_id":"domain-0","token_position":0,"layer":0,"phase":"prompt","topk":[{"index":3,"weight":0.6},{"index":1,"weight":0.4}],"logits":[...]}
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForwardRecord;
use crate::routing::{softmax, ExpertGrid, Phase, RoutingRecord};

pub const FORMAT_VERSION: u32 = 1;
/// Top-K weight sum tolerance for trace lines; external producers may
/// write 32-bit floats.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-6;
/// Key of the line an exporter leaves when it stops mid-run.
pub const TRUNCATION_KEY: &str = "truncated";

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub format_version: u32,
    pub model_label: String,
    pub num_layers: usize,
    pub experts_per_layer: usize,
    pub top_k: usize,
    pub includes_logits: bool,
}

impl TraceHeader {
    pub fn new(model_label: impl Into<String>, grid: ExpertGrid, top_k: usize, includes_logits: bool) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model_label: model_label.into(),
            num_layers: grid.num_layers,
            experts_per_layer: grid.experts_per_layer,
            top_k,
            includes_logits,
        }
    }

    pub fn grid(&self) -> ExpertGrid {
        ExpertGrid::new(self.num_layers, self.experts_per_layer)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(self.format_version));
        }
        let bad = |field: &str, message: &str| Error::Trace {
            line: 1,
            field: field.into(),
            message: message.into(),
        };
        if self.num_layers == 0 {
            return Err(bad("num_layers", "must be positive"));
        }
        if self.experts_per_layer == 0 {
            return Err(bad("experts_per_layer", "must be positive"));
        }
        if self.top_k == 0 || self.top_k > self.experts_per_layer {
            return Err(bad("top_k", "must be in 1..=experts_per_layer"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopKEntry {
    pub index: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceLine {
    pub sample_id: String,
    pub token_position: usize,
    pub layer: usize,
    pub phase: Phase,
    pub topk: Vec<TopKEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<f64>>,
}

impl TraceLine {
    /// Carries the effective (post-intervention) logits when present.
    pub fn from_record(sample_id: &str, record: &RoutingRecord, with_logits: bool) -> Self {
        Self {
            sample_id: sample_id.to_owned(),
            token_position: record.token_position,
            layer: record.layer,
            phase: record.phase,
            topk: record
                .topk_indices
                .iter()
                .zip(&record.topk_weights)
                .map(|(&index, &weight)| TopKEntry { index, weight })
                .collect(),
            logits: if with_logits {
                record.effective_logits().map(<[f64]>::to_vec)
            } else {
                None
            },
        }
    }

    /// Checks the line against the header geometry, returning the offending
    /// field and a message.
    pub fn check(&self, header: &TraceHeader) -> std::result::Result<(), (&'static str, String)> {
        if self.layer >= header.num_layers {
            return Err(("layer", format!("{} >= num_layers {}", self.layer, header.num_layers)));
        }
        if self.topk.len() != header.top_k {
            return Err(("topk", format!("{} entries, top_k is {}", self.topk.len(), header.top_k)));
        }
        let mut seen = HashSet::with_capacity(self.topk.len());
        for e in &self.topk {
            if e.index >= header.experts_per_layer {
                return Err((
                    "topk.index",
                    format!("{} >= experts_per_layer {}", e.index, header.experts_per_layer),
                ));
            }
            if !seen.insert(e.index) {
                return Err(("topk.index", format!("expert {} selected twice", e.index)));
            }
            if !e.weight.is_finite() || e.weight < 0.0 {
                return Err(("topk.weight", format!("invalid weight {}", e.weight)));
            }
        }
        let sum: f64 = self.topk.iter().map(|e| e.weight).sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(("topk.weight", format!("weights sum to {sum}")));
        }
        match (&self.logits, header.includes_logits) {
            (Some(l), true) => {
                if l.len() != header.experts_per_layer {
                    return Err((
                        "logits",
                        format!("{} values, experts_per_layer is {}", l.len(), header.experts_per_layer),
                    ));
                }
                if l.iter().any(|x| !x.is_finite()) {
                    return Err(("logits", "non-finite value".into()));
                }
            }
            (None, true) => return Err(("logits", "missing; header declares logits".into())),
            (Some(_), false) => return Err(("logits", "present; header declares none".into())),
            (None, false) => {}
        }
        Ok(())
    }

    /// `probabilities` is the softmax of the logits, absent without logits.
    pub fn into_record(self, header: &TraceHeader) -> (String, RoutingRecord) {
        let probabilities = self.logits.as_deref().map(softmax);
        let record = RoutingRecord {
            token_position: self.token_position,
            layer: self.layer,
            phase: self.phase,
            num_experts: header.experts_per_layer,
            logits: self.logits,
            adjusted_logits: None,
            probabilities,
            topk_indices: self.topk.iter().map(|e| e.index).collect(),
            topk_weights: self.topk.iter().map(|e| e.weight).collect(),
        };
        (self.sample_id, record)
    }
}

/// Append-only writer: header first, then one line per record.
pub struct TraceWriter<W: Write> {
    out: W,
    header: TraceHeader,
    line: usize,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W, header: TraceHeader) -> Result<Self> {
        header.validate()?;
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        Ok(Self {
            out,
            header,
            line: 1,
        })
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    /// Writes one record. A record inconsistent with the header aborts
    /// with the line number it would have taken.
    pub fn write(&mut self, sample_id: &str, record: &RoutingRecord) -> Result<()> {
        let line = TraceLine::from_record(sample_id, record, self.header.includes_logits);
        let number = self.line + 1;
        if self.header.includes_logits && line.logits.is_none() {
            return Err(Error::Trace {
                line: number,
                field: "logits".into(),
                message: "record carries no logits".into(),
            });
        }
        line.check(&self.header).map_err(|(field, message)| Error::Trace {
            line: number,
            field: field.into(),
            message,
        })?;
        serde_json::to_writer(&mut self.out, &line)?;
        self.out.write_all(b"\n")?;
        self.line = number;
        Ok(())
    }

    pub fn write_forward(&mut self, sample_id: &str, record: &ForwardRecord) -> Result<()> {
        for r in &record.routing_records {
            self.write(sample_id, r)?;
        }
        Ok(())
    }

    /// Lines written so far, header included.
    pub fn lines(&self) -> usize {
        self.line
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Writes a complete trace. Returns the number of lines.
pub fn write_trace<'a, W: Write>(
    out: W,
    header: TraceHeader,
    records: impl IntoIterator<Item = (&'a str, &'a RoutingRecord)>,
) -> Result<usize> {
    let mut w = TraceWriter::new(out, header)?;
    for (id, r) in records {
        w.write(id, r)?;
    }
    let lines = w.lines();
    w.finish()?;
    Ok(lines)
}

/// Wraps `input`, decompressing when it starts with the gzip magic bytes.
pub fn detect_compression<'a, R: Read + 'a>(input: R) -> Result<Box<dyn BufRead + 'a>> {
    let mut buf = BufReader::new(input);
    let head = buf.fill_buf()?;
    if head.starts_with(&GZIP_MAGIC) {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(buf))))
    } else {
        Ok(Box::new(buf))
    }
}

fn read_line(input: &mut dyn BufRead, buf: &mut Vec<u8>) -> std::io::Result<bool> {
    buf.clear();
    if input.read_until(b'\n', buf)? == 0 {
        return Ok(false);
    }
    if buf.last() == Some(&b'\n') {
        buf.pop();
        if buf.last() == Some(&b'\r') {
            buf.pop();
        }
    }
    Ok(true)
}

fn json_error_field(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    for prefix in ["unknown field `", "missing field `"] {
        if let Some(rest) = msg.strip_prefix(prefix) {
            return rest.split('`').next().unwrap_or("").to_owned();
        }
    }
    "json".into()
}

enum Parsed {
    Line(TraceLine),
    Truncated,
}

fn parse_line(bytes: &[u8]) -> std::result::Result<Parsed, (String, String)> {
    let text = std::str::from_utf8(bytes).map_err(|e| ("utf8".to_owned(), e.to_string()))?;
    if text.trim().is_empty() {
        return Err(("line".into(), "empty line".into()));
    }
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ("json".to_owned(), e.to_string()))?;
    if value.get(TRUNCATION_KEY).is_some() {
        return Ok(Parsed::Truncated);
    }
    serde_json::from_value(value)
        .map(Parsed::Line)
        .map_err(|e| (json_error_field(&e), e.to_string()))
}

/// Streaming reader. Memory use is one line at a time.
pub struct TraceReader<'a> {
    input: Box<dyn BufRead + 'a>,
    header: TraceHeader,
    line: usize,
    buf: Vec<u8>,
}

impl<'a> TraceReader<'a> {
    pub fn new<R: Read + 'a>(input: R) -> Result<Self> {
        let mut input = detect_compression(input)?;
        let mut buf = Vec::new();
        if !read_line(&mut *input, &mut buf)? {
            return Err(Error::Trace {
                line: 1,
                field: "header".into(),
                message: "empty trace".into(),
            });
        }
        let header: TraceHeader = std::str::from_utf8(&buf)
            .map_err(|e| e.to_string())
            .and_then(|t| serde_json::from_str(t).map_err(|e| e.to_string()))
            .map_err(|message| Error::Trace {
                line: 1,
                field: "header".into(),
                message,
            })?;
        header.validate()?;
        Ok(Self {
            input,
            header,
            line: 1,
            buf,
        })
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }
}

impl Iterator for TraceReader<'_> {
    type Item = Result<(String, RoutingRecord)>;

    fn next(&mut self) -> Option<Self::Item> {
        match read_line(&mut *self.input, &mut self.buf) {
            Ok(false) => return None,
            Ok(true) => {}
            Err(e) => return Some(Err(e.into())),
        }
        self.line += 1;
        let line_no = self.line;
        let err = |field: String, message: String| Error::Trace {
            line: line_no,
            field,
            message,
        };
        Some(match parse_line(&self.buf) {
            Ok(Parsed::Line(line)) => match line.check(&self.header) {
                Ok(()) => Ok(line.into_record(&self.header)),
                Err((field, message)) => Err(err(field.into(), message)),
            },
            Ok(Parsed::Truncated) => Err(err(TRUNCATION_KEY.into(), "producer stopped mid-run".into())),
            Err((field, message)) => Err(err(field, message)),
        })
    }
}

/// Header plus a stream of `(sample_id, record)`.
pub fn read_trace<'a, R: Read + 'a>(input: R) -> Result<TraceReader<'a>> {
    TraceReader::new(input)
}

pub fn open_trace(path: &Path) -> Result<TraceReader<'static>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    TraceReader::new(file)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub line: usize,
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub header: Option<TraceHeader>,
    /// Lines read, header included.
    pub lines: usize,
    pub records: usize,
    pub samples: usize,
    pub prompt_records: usize,
    pub generation_records: usize,
    pub duplicates: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Default)]
struct SampleState {
    max_prompt: Option<(usize, usize)>,
    min_generation: Option<(usize, usize)>,
    layers: BTreeMap<usize, usize>,
}

/// Full scan that reports every violation instead of stopping at the first.
pub fn validate<R: Read>(input: R) -> ValidationReport {
    let mut report = ValidationReport::default();
    let push = |report: &mut ValidationReport, line: usize, field: &str, message: String| {
        report.violations.push(Violation {
            line,
            field: field.into(),
            message,
        })
    };
    let mut input = match detect_compression(input) {
        Ok(i) => i,
        Err(e) => {
            push(&mut report, 0, "io", e.to_string());
            return report;
        }
    };
    let mut buf = Vec::new();
    let mut header: Option<TraceHeader> = None;
    let mut keys: HashSet<(String, usize, usize)> = HashSet::new();
    let mut samples: BTreeMap<String, SampleState> = BTreeMap::new();
    let mut line_no = 0;
    let mut unreadable = 0;
    loop {
        match read_line(&mut *input, &mut buf) {
            Ok(true) => {}
            Ok(false) => break,
            Err(e) => {
                push(&mut report, line_no + 1, "io", e.to_string());
                break;
            }
        }
        line_no += 1;
        if line_no == 1 {
            let parsed = std::str::from_utf8(&buf)
                .map_err(|e| e.to_string())
                .and_then(|t| serde_json::from_str::<TraceHeader>(t).map_err(|e| e.to_string()));
            match parsed {
                Ok(h) => {
                    if let Err(e) = h.validate() {
                        push(&mut report, 1, "header", e.to_string());
                    } else {
                        header = Some(h);
                    }
                }
                Err(message) => push(&mut report, 1, "header", message),
            }
            continue;
        }
        let line = match parse_line(&buf) {
            Ok(Parsed::Line(l)) => l,
            Ok(Parsed::Truncated) => {
                push(&mut report, line_no, TRUNCATION_KEY, "producer stopped mid-run".into());
                continue;
            }
            Err((field, message)) => {
                unreadable += 1;
                push(&mut report, line_no, &field, message);
                continue;
            }
        };
        if !keys.insert((line.sample_id.clone(), line.token_position, line.layer)) {
            report.duplicates += 1;
            push(
                &mut report,
                line_no,
                "key",
                format!(
                    "duplicate (sample {}, token {}, layer {})",
                    line.sample_id, line.token_position, line.layer
                ),
            );
            continue;
        }
        let state = samples.entry(line.sample_id.clone()).or_default();
        *state.layers.entry(line.token_position).or_default() += 1;
        if let Some(h) = &header {
            if let Err((field, message)) = line.check(h) {
                push(&mut report, line_no, field, message);
                continue;
            }
        }
        report.records += 1;
        let pos = (line.token_position, line_no);
        match line.phase {
            Phase::Prompt => {
                report.prompt_records += 1;
                if state.max_prompt.is_none_or(|(p, _)| pos.0 > p) {
                    state.max_prompt = Some(pos);
                }
            }
            Phase::Generation => {
                report.generation_records += 1;
                if state.min_generation.is_none_or(|(p, _)| pos.0 < p) {
                    state.min_generation = Some(pos);
                }
            }
        }
    }
    if line_no == 0 {
        push(&mut report, 1, "header", "empty trace".into());
    }
    report.lines = line_no;
    report.samples = samples.len();
    if let Some(h) = &header {
        for (id, state) in &samples {
            if let (Some((p, _)), Some((g, line))) = (state.max_prompt, state.min_generation) {
                if p >= g {
                    push(
                        &mut report,
                        line,
                        "phase",
                        format!("sample {id}: generation token {g} precedes prompt token {p}"),
                    );
                }
            }
            // an unreadable line may be the missing layer; it is already reported
            for (&pos, &count) in state.layers.iter().filter(|_| unreadable == 0) {
                if count != h.num_layers {
                    push(
                        &mut report,
                        0,
                        "layer",
                        format!("sample {id} token {pos}: {count} of {} layers", h.num_layers),
                    );
                }
            }
        }
    }
    report.header = header;
    report
}
