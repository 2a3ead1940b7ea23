//! Questions, documents and instances, plus the line-oriented dataset format.
//!
//! A dataset file holds one JSON record per line:
//!
//! ```text
//! {"id":"q1","question":"what is the hue of bado","answers":["kilo"],
//!  "documents":[{"id":"d1","paragraphs":["...","..."]}],"split":"train"}
//! ```

mod synthetic;
pub mod text;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use text::{contains_run, exact_match, normalize_token, token_f1, tokenize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split `{other}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub gold_answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub paragraphs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub question: Question,
    pub documents: Vec<Document>,
    pub split: Split,
}

impl Instance {
    pub fn id(&self) -> &str {
        &self.question.id
    }

    /// True if some paragraph contains a gold answer as a token run.
    pub fn is_answerable(&self) -> bool {
        let golds: Vec<Vec<String>> = self
            .question
            .gold_answers
            .iter()
            .map(|a| tokenize(a))
            .collect();
        self.documents
            .iter()
            .flat_map(|d| &d.paragraphs)
            .any(|p| {
                let toks = tokenize(p);
                golds.iter().any(|g| contains_run(&toks, g))
            })
    }

    pub fn paragraph_count(&self) -> usize {
        self.documents.iter().map(|d| d.paragraphs.len()).sum()
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    question: String,
    answers: Vec<String>,
    documents: Vec<Document>,
    split: Split,
}

impl From<&Instance> for Record {
    fn from(inst: &Instance) -> Self {
        Record {
            id: inst.question.id.clone(),
            question: inst.question.text.clone(),
            answers: inst.question.gold_answers.clone(),
            documents: inst.documents.clone(),
            split: inst.split,
        }
    }
}

impl Record {
    fn into_instance(self, line: usize) -> Result<Instance> {
        if self.answers.is_empty() {
            return Err(Error::Parse {
                line,
                message: "`answers` must not be empty".into(),
            });
        }
        if self.documents.is_empty() {
            return Err(Error::Parse {
                line,
                message: "instance has no documents".into(),
            });
        }
        Ok(Instance {
            question: Question {
                id: self.id,
                text: self.question,
                gold_answers: self.answers,
            },
            documents: self.documents,
            split: self.split,
        })
    }
}

/// Parses a dataset from any line source. Blank lines are skipped.
pub fn read_dataset(reader: impl BufRead) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let inst = record.into_instance(lineno)?;
        if !seen.insert(inst.question.id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate instance id `{}` at line {lineno}",
                inst.question.id
            )));
        }
        if matches!(inst.split, Split::Train | Split::Dev) && !inst.is_answerable() {
            log::warn!(
                "instance `{}` (line {lineno}) has no paragraph containing a gold answer",
                inst.question.id
            );
        }
        out.push(inst);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Instance>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file))
}

pub fn write_dataset(instances: &[Instance], mut writer: impl Write) -> std::io::Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut writer, &Record::from(inst))?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn save_dataset(instances: &[Instance], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(instances, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// Instances of one split, in file order.
pub fn filter_split(instances: &[Instance], split: Split) -> Vec<Instance> {
    instances
        .iter()
        .filter(|i| i.split == split)
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str) -> Instance {
        Instance {
            question: Question {
                id: id.into(),
                text: "what is the hue of bado".into(),
                gold_answers: vec!["kilo mena".into()],
            },
            documents: vec![Document {
                id: format!("{id}-d0"),
                paragraphs: vec!["the hue of bado is kilo mena.".into(), "foo bar".into()],
            }],
            split: Split::Train,
        }
    }

    #[test]
    fn empty_input_is_empty_dataset() {
        assert!(read_dataset("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn two_lines_keep_order() {
        let data = vec![sample("b"), sample("a")];
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 2);
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), data);
    }

    #[test]
    fn missing_answers_names_line() {
        let good = serde_json::to_string(&Record::from(&sample("a"))).unwrap();
        let bad = r#"{"id":"x","question":"q","documents":[{"id":"d","paragraphs":["p"]}],"split":"dev"}"#;
        let text = format!("{good}\n{bad}\n");
        match read_dataset(text.as_bytes()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("answers"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_rejected() {
        let mut buf = Vec::new();
        write_dataset(&[sample("a"), sample("a")], &mut buf).unwrap();
        assert!(matches!(
            read_dataset(buf.as_slice()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn save_to_missing_dir_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("no/such/dir/data.jsonl");
        assert!(matches!(save_dataset(&[], &path), Err(Error::Io { .. })));
    }

    #[test]
    fn save_empty_writes_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        save_dataset(&[], &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap().len(), 0);
        let one = dir.path().join("one.jsonl");
        save_dataset(&[sample("a")], &one).unwrap();
        let text = std::fs::read_to_string(&one).unwrap();
        assert_eq!(text.lines().count(), 1);
    }

    #[test]
    fn answerability() {
        let mut inst = sample("a");
        assert!(inst.is_answerable());
        inst.question.gold_answers = vec!["mena kilo".into()];
        assert!(!inst.is_answerable());
    }
}
