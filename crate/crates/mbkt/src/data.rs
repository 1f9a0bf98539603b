//! Feature-sequence datasets and their line-delimited JSON format.
//!
//! The first line is a header, every following line one sample:
//!
//! ```text
//! {"dims":[20,24,8],"mode":"sevenclass","aligned":false}
//! {"id":"s0","label":4,"vision":{"shape":[12,20],"data":"<base64 f32 LE>"},"language":{...},"audio":{...}}
//! ```
//!
//! `label` is a class index 0..=6 (sentiment score + 3) for `sevenclass`
//! and four 0/1 flags (happy, sad, angry, neutral) for `multilabel4`.
//! `audio` may be omitted.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use mbkt_core::{HeadMode, Label, Modality, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("dataset file is empty")]
    Empty,
    #[error("line {line}: bad header: {msg}")]
    Header { line: usize, msg: String },
    #[error("line {line}: malformed record: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: unknown mode {mode:?} (expected sevenclass or multilabel4)")]
    UnknownMode { line: usize, mode: String },
    #[error("line {line}: {modality} features have width {found}, header says {expected}")]
    DimMismatch {
        line: usize,
        modality: Modality,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: dataset is marked aligned but lengths are V={t_v} L={t_l} A={t_a}")]
    Alignment {
        line: usize,
        t_v: usize,
        t_l: usize,
        t_a: usize,
    },
    #[error("line {line}: bad label: {msg}")]
    Label { line: usize, msg: String },
}

/// One modality of one sample, stored at 32-bit precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub t: usize,
    pub d: usize,
    pub data: Vec<f32>,
}

impl Features {
    pub fn new(t: usize, d: usize, data: Vec<f32>) -> Self {
        assert_eq!(t * d, data.len(), "feature buffer does not match its shape");
        Self { t, d, data }
    }

    pub fn from_tensor(x: &Tensor) -> Self {
        Self::new(x.rows(), x.cols(), x.data().iter().map(|&v| v as f32).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.t, self.d], self.data.iter().map(|&v| f64::from(v)).collect())
            .expect("features always have positive dims")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: Label,
    pub vision: Features,
    pub language: Features,
    pub audio: Option<Features>,
}

impl Sample {
    pub fn has_audio(&self) -> bool {
        self.audio.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Feature widths of vision, language and audio.
    pub dims: [usize; 3],
    pub head: HeadMode,
    pub aligned: bool,
    pub samples: Vec<Sample>,
}

/// Sample tensors converted once to the model's precision.
pub struct SampleTensors {
    pub vision: Tensor,
    pub language: Tensor,
    pub audio: Option<Tensor>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn tensors(&self) -> Vec<SampleTensors> {
        self.samples
            .iter()
            .map(|s| SampleTensors {
                vision: s.vision.to_tensor(),
                language: s.language.to_tensor(),
                audio: s.audio.as_ref().map(Features::to_tensor),
            })
            .collect()
    }

    /// A copy sharing the header, holding the samples at `idx` in order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            dims: self.dims,
            head: self.head,
            aligned: self.aligned,
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Number of samples per class, or per emotion flag for multi-label data.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.head.classes()];
        for s in &self.samples {
            match s.label {
                Label::Sentiment(c) => counts[c as usize] += 1,
                Label::Emotion(f) => {
                    for (c, on) in f.iter().enumerate() {
                        counts[c] += usize::from(*on);
                    }
                }
            }
        }
        counts
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: [usize; 3],
    mode: String,
    aligned: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Blob {
    shape: [usize; 2],
    data: String,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawLabel {
    Class(i64),
    Flags(Vec<i64>),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    label: RawLabel,
    vision: Blob,
    language: Blob,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    audio: Option<Blob>,
}

fn encode(f: &Features) -> Blob {
    let mut bytes = Vec::with_capacity(f.data.len() * 4);
    for v in &f.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Blob {
        shape: [f.t, f.d],
        data: B64.encode(bytes),
    }
}

fn decode(b: &Blob, line: usize) -> Result<Features, DataError> {
    let bad = |msg: String| DataError::Malformed { line, msg };
    let bytes = B64.decode(&b.data).map_err(|e| bad(format!("base64: {e}")))?;
    let [t, d] = b.shape;
    if t == 0 || d == 0 {
        return Err(bad(format!("empty shape {:?}", b.shape)));
    }
    if bytes.len() != t * d * 4 {
        return Err(bad(format!(
            "shape {t}x{d} needs {} bytes, payload has {}",
            t * d * 4,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Features { t, d, data })
}

fn mode_name(head: HeadMode) -> &'static str {
    match head {
        HeadMode::SevenClass => "sevenclass",
        HeadMode::MultiLabel4 => "multilabel4",
    }
}

fn parse_mode(s: &str) -> Option<HeadMode> {
    match s {
        "sevenclass" => Some(HeadMode::SevenClass),
        "multilabel4" => Some(HeadMode::MultiLabel4),
        _ => None,
    }
}

fn parse_label(raw: RawLabel, head: HeadMode, line: usize) -> Result<Label, DataError> {
    let bad = |msg: &str| DataError::Label {
        line,
        msg: msg.to_string(),
    };
    match (head, raw) {
        (HeadMode::SevenClass, RawLabel::Class(c)) if (0..=6).contains(&c) => Ok(Label::Sentiment(c as u8)),
        (HeadMode::SevenClass, RawLabel::Class(_)) => Err(bad("class index outside 0..=6")),
        (HeadMode::SevenClass, RawLabel::Flags(_)) => Err(bad("sevenclass label must be an integer")),
        (HeadMode::MultiLabel4, RawLabel::Flags(f)) if f.len() == 4 && f.iter().all(|v| *v == 0 || *v == 1) => {
            Ok(Label::Emotion([f[0] == 1, f[1] == 1, f[2] == 1, f[3] == 1]))
        }
        (HeadMode::MultiLabel4, _) => Err(bad("multilabel4 label must be four 0/1 flags")),
    }
}

fn raw_label(l: &Label) -> RawLabel {
    match l {
        Label::Sentiment(c) => RawLabel::Class(i64::from(*c)),
        Label::Emotion(f) => RawLabel::Flags(f.iter().map(|&b| i64::from(b)).collect()),
    }
}

pub fn parse_dataset(reader: impl BufRead) -> Result<Dataset, DataError> {
    let mut lines = reader.lines().enumerate();
    let io = |e| DataError::Io {
        path: PathBuf::from("<input>"),
        source: e,
    };
    let (header, header_line) = loop {
        match lines.next() {
            None => return Err(DataError::Empty),
            Some((i, l)) => {
                let l = l.map_err(io)?;
                if !l.trim().is_empty() {
                    break (l, i + 1);
                }
            }
        }
    };
    let header: Header = serde_json::from_str(&header).map_err(|e| DataError::Header {
        line: header_line,
        msg: e.to_string(),
    })?;
    let head = parse_mode(&header.mode).ok_or_else(|| DataError::UnknownMode {
        line: header_line,
        mode: header.mode.clone(),
    })?;
    if header.dims.contains(&0) {
        return Err(DataError::Header {
            line: header_line,
            msg: "feature widths must be positive".into(),
        });
    }
    let mut samples = Vec::new();
    for (i, l) in lines {
        let line = i + 1;
        let l = l.map_err(io)?;
        if l.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&l).map_err(|e| DataError::Malformed {
            line,
            msg: e.to_string(),
        })?;
        let vision = decode(&rec.vision, line)?;
        let language = decode(&rec.language, line)?;
        let audio = rec.audio.as_ref().map(|b| decode(b, line)).transpose()?;
        let widths = [Some(&vision), Some(&language), audio.as_ref()];
        for (m, f) in Modality::ALL.iter().zip(widths) {
            if let Some(f) = f {
                if f.d != header.dims[m.index()] {
                    return Err(DataError::DimMismatch {
                        line,
                        modality: *m,
                        expected: header.dims[m.index()],
                        found: f.d,
                    });
                }
            }
        }
        if header.aligned {
            let t_a = audio.as_ref().map_or(vision.t, |a| a.t);
            if vision.t != language.t || vision.t != t_a {
                return Err(DataError::Alignment {
                    line,
                    t_v: vision.t,
                    t_l: language.t,
                    t_a,
                });
            }
        }
        samples.push(Sample {
            id: rec.id,
            label: parse_label(rec.label, head, line)?,
            vision,
            language,
            audio,
        });
    }
    if samples.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(Dataset {
        dims: header.dims,
        head,
        aligned: header.aligned,
        samples,
    })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dataset(BufReader::new(file)).map_err(|e| match e {
        DataError::Io { source, .. } => DataError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

pub fn write_dataset(ds: &Dataset, mut w: impl Write) -> std::io::Result<()> {
    let header = Header {
        dims: ds.dims,
        mode: mode_name(ds.head).to_string(),
        aligned: ds.aligned,
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for s in &ds.samples {
        let rec = Record {
            id: s.id.clone(),
            label: raw_label(&s.label),
            vision: encode(&s.vision),
            language: encode(&s.language),
            audio: s.audio.as_ref().map(encode),
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    write_dataset(ds, &mut w).map_err(io)?;
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let f = |t, d, s: f32| Features::new(t, d, (0..t * d).map(|i| i as f32 * s - 1.5).collect());
        Dataset {
            dims: [3, 2, 1],
            head: HeadMode::SevenClass,
            aligned: false,
            samples: vec![
                Sample {
                    id: "a".into(),
                    label: Label::Sentiment(5),
                    vision: f(2, 3, 0.25),
                    language: f(4, 2, -0.5),
                    audio: Some(f(3, 1, 1e-3)),
                },
                Sample {
                    id: "b".into(),
                    label: Label::Sentiment(0),
                    vision: f(1, 3, 7.0),
                    language: f(1, 2, 0.1),
                    audio: None,
                },
            ],
        }
    }

    fn text(ds: &Dataset) -> String {
        let mut buf = Vec::new();
        write_dataset(ds, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn round_trip_is_value_exact() {
        let ds = tiny();
        let back = parse_dataset(text(&ds).as_bytes()).unwrap();
        assert_eq!(back, ds);
        assert!(!back.samples[1].has_audio());
    }

    #[test]
    fn errors_cite_lines() {
        let ds = tiny();
        let good = text(&ds);
        let mut lines: Vec<&str> = good.lines().collect();
        lines[2] = "{not json";
        match parse_dataset(lines.join("\n").as_bytes()) {
            Err(DataError::Malformed { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_dataset("".as_bytes()), Err(DataError::Empty)));
        let unknown = good.replacen("sevenclass", "fiveclass", 1);
        assert!(matches!(
            parse_dataset(unknown.as_bytes()),
            Err(DataError::UnknownMode { line: 1, .. })
        ));
        let wide = good.replacen("[3,2,1]", "[4,2,1]", 1);
        assert!(matches!(
            parse_dataset(wide.as_bytes()),
            Err(DataError::DimMismatch {
                line: 2,
                modality: Modality::Vision,
                ..
            })
        ));
        let aligned = good.replacen("false", "true", 1);
        assert!(matches!(
            parse_dataset(aligned.as_bytes()),
            Err(DataError::Alignment { line: 2, .. })
        ));
        let bad_label = good.replacen("\"label\":5", "\"label\":9", 1);
        assert!(matches!(
            parse_dataset(bad_label.as_bytes()),
            Err(DataError::Label { line: 2, .. })
        ));
        let header_only = lines[0].to_string();
        assert!(matches!(parse_dataset(header_only.as_bytes()), Err(DataError::Empty)));
    }

    #[test]
    fn multilabel_labels_round_trip() {
        let mut ds = tiny();
        ds.head = HeadMode::MultiLabel4;
        ds.samples[0].label = Label::Emotion([true, false, true, false]);
        ds.samples[1].label = Label::Emotion([false; 4]);
        let s = text(&ds);
        assert!(s.contains("\"label\":[1,0,1,0]"));
        assert_eq!(parse_dataset(s.as_bytes()).unwrap(), ds);
        assert_eq!(ds.class_counts(), vec![1, 0, 1, 0]);
    }
}
