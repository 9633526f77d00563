use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

/// Ordered gesture labels; a label's position is its class index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GestureVocab(Vec<String>);

impl GestureVocab {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(config("gesture vocabulary is empty"));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = labels.iter().find(|l| !seen.insert(l.as_str())) {
            return Err(config(format!("gesture {dup} listed twice")));
        }
        Ok(GestureVocab(labels))
    }

    /// The ten gestures that occur in the Suturing task.
    pub fn suturing() -> Self {
        GestureVocab(
            ["G1", "G2", "G3", "G4", "G5", "G6", "G8", "G9", "G10", "G11"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
    }

    /// First `n` Suturing gestures, or `G1..Gn` beyond ten.
    pub fn first(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(config("need at least one gesture class"));
        }
        if n <= 10 {
            Ok(GestureVocab(Self::suturing().0[..n].to_vec()))
        } else {
            Ok(GestureVocab((1..=n).map(|i| format!("G{i}")).collect()))
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.0.iter().position(|l| l == label)
    }

    pub fn label(&self, index: usize) -> &str {
        &self.0[index]
    }

    pub fn labels(&self) -> &[String] {
        &self.0
    }
}

/// How frame numbers in transcript files are counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(try_from = "u8", into = "u8")]
pub enum IndexBase {
    #[default]
    Zero,
    One,
}

impl TryFrom<u8> for IndexBase {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(IndexBase::Zero),
            1 => Ok(IndexBase::One),
            other => Err(format!("index base must be 0 or 1, got {other}")),
        }
    }
}

impl From<IndexBase> for u8 {
    fn from(b: IndexBase) -> u8 {
        b.offset() as u8
    }
}

impl IndexBase {
    fn offset(self) -> usize {
        match self {
            IndexBase::Zero => 0,
            IndexBase::One => 1,
        }
    }
}

/// Inclusive frame range carrying one gesture class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub start: usize,
    pub end: usize,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transcript {
    pub video_id: String,
    entries: Vec<TranscriptEntry>,
}

impl Transcript {
    /// Entries must be sorted, non-overlapping and have `start ≤ end`.
    pub fn new(video_id: impl Into<String>, entries: Vec<TranscriptEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if e.start > e.end {
                return Err(config(format!(
                    "entry {i}: start {} after end {}",
                    e.start, e.end
                )));
            }
            if i > 0 && e.start <= entries[i - 1].end {
                return Err(config(format!(
                    "entry {i} overlaps or precedes entry {}",
                    i - 1
                )));
            }
        }
        Ok(Transcript {
            video_id: video_id.into(),
            entries,
        })
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    /// Gesture covering `frame`, if any.
    pub fn label_at(&self, frame: usize) -> Option<usize> {
        let i = self.entries.partition_point(|e| e.end < frame);
        self.entries
            .get(i)
            .filter(|e| e.start <= frame)
            .map(|e| e.label)
    }

    pub fn write(&self, path: &Path, vocab: &GestureVocab) -> Result<()> {
        let file = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut out = std::io::BufWriter::new(file);
        let io = |e| Error::io(format!("writing {}", path.display()), e);
        for e in &self.entries {
            writeln!(out, "{} {} {}", e.start, e.end, vocab.label(e.label)).map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

/// Reads `start_frame end_frame label` lines. Blank lines are skipped.
pub fn load_transcript(
    path: &Path,
    video_id: &str,
    vocab: &GestureVocab,
    base: IndexBase,
) -> Result<Transcript> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_transcript(&text, video_id, vocab, base).map_err(|reason| Error::format(path, reason))
}

pub(crate) fn parse_transcript(
    text: &str,
    video_id: &str,
    vocab: &GestureVocab,
    base: IndexBase,
) -> std::result::Result<Transcript, String> {
    let mut entries: Vec<TranscriptEntry> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 3 {
            return Err(format!(
                "line {n}: expected `start end label`, got `{}`",
                line.trim()
            ));
        }
        let frame = |s: &str| -> std::result::Result<usize, String> {
            let v: usize = s
                .parse()
                .map_err(|_| format!("line {n}: bad frame number `{s}`"))?;
            v.checked_sub(base.offset())
                .ok_or_else(|| format!("line {n}: frame {v} below index base {}", base.offset()))
        };
        let (start, end) = (frame(fields[0])?, frame(fields[1])?);
        let label = vocab
            .index_of(fields[2])
            .ok_or_else(|| format!("line {n}: gesture {} not in vocabulary", fields[2]))?;
        if start > end {
            return Err(format!("line {n}: start {start} after end {end}"));
        }
        if let Some(prev) = entries.last() {
            if start <= prev.end {
                return Err(format!(
                    "line {n}: frames {start}..{end} overlap or precede previous entry ending at {}",
                    prev.end
                ));
            }
        }
        entries.push(TranscriptEntry { start, end, label });
    }
    Ok(Transcript {
        video_id: video_id.to_string(),
        entries,
    })
}
