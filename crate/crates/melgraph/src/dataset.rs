//! Dataset manifests: the labeled corpus, its label vocabulary, and split
//! assignments.
//!
//! A manifest is a UTF-8 TSV file with the header
//! `id	audio_path	label	split	speaker	duration_s`. The `duration_s`
//! field may be empty. Label ids are assigned lexicographically so that two
//! reorderings of the same manifest produce identical models under a fixed
//! seed.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Error, Debug)]
pub enum DatasetError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest format error at line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("manifest validation error: {0}")]
    Validation(String),
}

pub const MANIFEST_COLUMNS: [&str; 6] =
    ["id", "audio_path", "label", "split", "speaker", "duration_s"];

/// Train/validation/test assignment of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split token {other:?}")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ordered label space. Ids are contiguous `0..C-1`, assigned by sorting the
/// distinct class names lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocab {
    classes: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelVocab {
    pub fn from_labels<I, S>(labels: I) -> Result<LabelVocab>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let distinct: BTreeSet<String> =
            labels.into_iter().map(|s| s.as_ref().to_string()).collect();
        if distinct.is_empty() {
            return Err(DatasetError::Validation("empty label vocabulary".into()));
        }
        let classes: Vec<String> = distinct.into_iter().collect();
        let index = classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
        Ok(LabelVocab { classes, index })
    }

    pub fn id_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn name_of(&self, id: usize) -> Option<&str> {
        self.classes.get(id).map(|s| s.as_str())
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// One labeled sample: a clip on disk plus its class, split, and speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub audio_path: String,
    pub label: String,
    pub split: Split,
    pub speaker: String,
    pub duration_s: Option<f64>,
}

/// A validated dataset: records plus the vocabulary built from them.
#[derive(Debug, Clone)]
pub struct Manifest {
    records: Vec<SampleRecord>,
    vocab: LabelVocab,
}

impl Manifest {
    /// Build a manifest from records, validating id uniqueness and deriving
    /// the vocabulary from the sorted distinct labels.
    pub fn new(records: Vec<SampleRecord>) -> Result<Manifest> {
        if records.is_empty() {
            return Err(DatasetError::Validation("manifest has no records".into()));
        }
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(DatasetError::Validation(format!(
                    "duplicate sample id {:?}",
                    r.id
                )));
            }
        }
        let vocab = LabelVocab::from_labels(records.iter().map(|r| r.label.as_str()))?;
        let manifest = Manifest { records, vocab };
        manifest.warn_speaker_overlap();
        Ok(manifest)
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn vocab(&self) -> &LabelVocab {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Records of one split, in manifest order.
    pub fn split_records(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Integer label id of a record (total by construction: every record's
    /// label is in the vocabulary).
    pub fn label_id(&self, record: &SampleRecord) -> usize {
        self.vocab
            .id_of(&record.label)
            .expect("record label is in vocab by construction")
    }

    // The corpus this format was designed around is split speaker-independently,
    // but arbitrary manifests must load; overlap is reported, not rejected.
    fn warn_speaker_overlap(&self) {
        let mut by_split: BTreeMap<Split, BTreeSet<&str>> = BTreeMap::new();
        for r in &self.records {
            by_split.entry(r.split).or_default().insert(&r.speaker);
        }
        let splits: Vec<(&Split, &BTreeSet<&str>)> = by_split.iter().collect();
        for i in 0..splits.len() {
            for j in i + 1..splits.len() {
                let shared: Vec<&&str> = splits[i].1.intersection(splits[j].1).collect();
                if !shared.is_empty() {
                    log::warn!(
                        "splits {} and {} share {} speaker(s), e.g. {:?}",
                        splits[i].0,
                        splits[j].0,
                        shared.len(),
                        shared[0]
                    );
                }
            }
        }
    }
}

/// Load and validate a manifest TSV.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_manifest(&text)
}

/// Parse manifest TSV text (the file contents of [`load_manifest`]).
pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| DatasetError::Format {
            line: 1,
            msg: "empty file".into(),
        })?;
    let cols: Vec<&str> = header.split('\t').collect();
    if cols != MANIFEST_COLUMNS {
        return Err(DatasetError::Format {
            line: 1,
            msg: format!(
                "expected header {:?}, found {:?}",
                MANIFEST_COLUMNS.join("\t"),
                header
            ),
        });
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != MANIFEST_COLUMNS.len() {
            return Err(DatasetError::Format {
                line: lineno,
                msg: format!(
                    "expected {} tab-separated fields, found {}",
                    MANIFEST_COLUMNS.len(),
                    fields.len()
                ),
            });
        }
        let split = Split::from_str(fields[3]).map_err(|msg| DatasetError::Format {
            line: lineno,
            msg,
        })?;
        let duration_s = if fields[5].is_empty() {
            None
        } else {
            Some(fields[5].parse::<f64>().map_err(|e| DatasetError::Format {
                line: lineno,
                msg: format!("bad duration_s {:?}: {e}", fields[5]),
            })?)
        };
        records.push(SampleRecord {
            id: fields[0].to_string(),
            audio_path: fields[1].to_string(),
            label: fields[2].to_string(),
            split,
            speaker: fields[4].to_string(),
            duration_s,
        });
    }
    Manifest::new(records)
}

/// Write a manifest back to TSV. `load_manifest` of the result is identity on
/// records and vocabulary.
pub fn save_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str(&MANIFEST_COLUMNS.join("\t"));
    out.push('\n');
    for r in manifest.records() {
        let duration = r.duration_s.map(|d| d.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.id, r.audio_path, r.label, r.split, r.speaker, duration
        ));
    }
    fs::write(path, out).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Per-(split, class) sample counts. Cells absent from the manifest are zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitCounts {
    counts: BTreeMap<(Split, String), usize>,
}

impl SplitCounts {
    pub fn get(&self, split: Split, class: &str) -> usize {
        self.counts
            .get(&(split, class.to_string()))
            .copied()
            .unwrap_or(0)
    }

    pub fn split_total(&self, split: Split) -> usize {
        self.counts
            .iter()
            .filter(|((s, _), _)| *s == split)
            .map(|(_, n)| n)
            .sum()
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Split, &str, usize)> {
        self.counts.iter().map(|((s, c), n)| (*s, c.as_str(), *n))
    }
}

/// Count samples per (split, class).
pub fn split_counts(manifest: &Manifest) -> SplitCounts {
    let mut counts = BTreeMap::new();
    for r in manifest.records() {
        *counts.entry((r.split, r.label.clone())).or_insert(0) += 1;
    }
    SplitCounts { counts }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tsv(rows: &[&str]) -> String {
        let mut s = MANIFEST_COLUMNS.join("\t");
        s.push('\n');
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    #[test]
    fn three_rows_build_vocab_from_sorted_distinct_labels() {
        let text = tsv(&[
            "s1\ta.wav\ta\ttrain\tspk1\t1.0",
            "s2\tb.wav\tb\ttrain\tspk1\t",
            "s3\tc.wav\ta\tval\tspk2\t0.5",
        ]);
        let m = parse_manifest(&text).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.vocab().classes(), &["a".to_string(), "b".to_string()]);
        assert_eq!(m.vocab().id_of("a"), Some(0));
        assert_eq!(m.vocab().id_of("b"), Some(1));
        assert_eq!(m.records()[1].duration_s, None);
    }

    #[test]
    fn duplicate_id_is_rejected_by_name() {
        let text = tsv(&[
            "s1\ta.wav\ta\ttrain\tspk1\t1.0",
            "s1\tb.wav\tb\ttrain\tspk1\t1.0",
        ]);
        let err = parse_manifest(&text).unwrap_err();
        assert!(err.to_string().contains("s1"), "error was: {err}");
    }

    #[test]
    fn missing_column_is_a_format_error() {
        let text = "id\taudio_path\tlabel\tsplit\tspeaker\n\
                    s1\ta.wav\ta\ttrain\tspk1\n";
        assert!(matches!(
            parse_manifest(text),
            Err(DatasetError::Format { line: 1, .. })
        ));
    }

    #[test]
    fn unknown_split_token_is_rejected() {
        let text = tsv(&["s1\ta.wav\ta\tdev\tspk1\t"]);
        let err = parse_manifest(&text).unwrap_err();
        assert!(err.to_string().contains("dev"));
    }

    #[test]
    fn split_counts_uniform_case() {
        let mut rows = Vec::new();
        for split in ["train", "val", "test"] {
            for class in ["a", "b"] {
                rows.push(format!(
                    "{split}_{class}\tx.wav\t{class}\t{split}\tspk\t"
                ));
            }
        }
        let rows: Vec<&str> = rows.iter().map(|s| s.as_str()).collect();
        let m = parse_manifest(&tsv(&rows)).unwrap();
        let counts = split_counts(&m);
        for split in Split::ALL {
            for class in ["a", "b"] {
                assert_eq!(counts.get(split, class), 1);
            }
        }
        assert_eq!(counts.total(), m.len());
    }

    #[test]
    fn empty_split_has_zero_cells() {
        let text = tsv(&["s1\ta.wav\ta\ttrain\tspk1\t"]);
        let m = parse_manifest(&text).unwrap();
        let counts = split_counts(&m);
        assert_eq!(counts.get(Split::Test, "a"), 0);
        assert_eq!(counts.split_total(Split::Test), 0);
    }

    /// Emotion-corpus-shaped manifest: 9365 rows, 7 classes, splits
    /// 3729/3310/2326, with the published per-cell distribution.
    #[test]
    fn corpus_shaped_manifest_reproduces_published_counts() {
        let cells: [(&str, [usize; 3]); 7] = [
            ("anger", [586, 531, 360]),
            ("disgust", [666, 608, 404]),
            ("fear", [461, 404, 291]),
            ("guilt", [453, 395, 281]),
            ("happiness", [561, 471, 363]),
            ("sadness", [606, 543, 381]),
            ("surprise", [396, 358, 246]),
        ];
        let mut rows = Vec::new();
        let mut n = 0usize;
        for (class, per_split) in &cells {
            for (si, count) in per_split.iter().enumerate() {
                let split = Split::ALL[si];
                for _ in 0..*count {
                    rows.push(format!("s{n}\t{n}.wav\t{class}\t{split}\tspk{}\t", n % 68));
                    n += 1;
                }
            }
        }
        let rows: Vec<&str> = rows.iter().map(|s| s.as_str()).collect();
        let m = parse_manifest(&tsv(&rows)).unwrap();
        assert_eq!(m.len(), 9365);
        assert_eq!(m.vocab().len(), 7);
        let counts = split_counts(&m);
        assert_eq!(counts.split_total(Split::Train), 3729);
        assert_eq!(counts.split_total(Split::Val), 3310);
        assert_eq!(counts.split_total(Split::Test), 2326);
        assert_eq!(counts.get(Split::Train, "anger"), 586);
        assert_eq!(counts.get(Split::Test, "surprise"), 246);
    }

    #[test]
    fn save_load_round_trip_preserves_records_and_vocab() {
        let text = tsv(&[
            "s1\tpath a.wav\tcalm\ttrain\tspk1\t1.25",
            "s2\tb.wav\tangry\tval\tspk2\t",
            "s3\tc.wav\tcalm\ttest\tspk3\t0.125",
        ]);
        let m = parse_manifest(&text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        save_manifest(&m, &path).unwrap();
        let m2 = load_manifest(&path).unwrap();
        assert_eq!(m.records(), m2.records());
        assert_eq!(m.vocab(), m2.vocab());
    }

    #[test]
    fn vocab_ids_are_order_independent() {
        let a = tsv(&[
            "s1\ta.wav\tzeta\ttrain\tspk\t",
            "s2\tb.wav\talpha\ttrain\tspk\t",
        ]);
        let b = tsv(&[
            "s2\tb.wav\talpha\ttrain\tspk\t",
            "s1\ta.wav\tzeta\ttrain\tspk\t",
        ]);
        let ma = parse_manifest(&a).unwrap();
        let mb = parse_manifest(&b).unwrap();
        assert_eq!(ma.vocab(), mb.vocab());
        assert_eq!(ma.vocab().id_of("alpha"), Some(0));
    }
}
