//! Documents, queries, tokenization and the JSON Lines corpus/query formats.
//!
//! Corpus files hold one `{"id", "title", "text"}` object per line. Query
//! files hold one `{"id", "query", "contrastive"?, "answers", "gold_ids",
//! "labels"?}` object per line. Blank lines are ignored.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::error::{Error, Result};

/// Lowercases `text` and splits it on every maximal run of characters that
/// are neither letters (`L*`) nor numbers (`N*`).
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !is_word_char(c))
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

fn is_word_char(c: char) -> bool {
    use GeneralCategory::*;
    matches!(
        get_general_category(c),
        UppercaseLetter
            | LowercaseLetter
            | TitlecaseLetter
            | ModifierLetter
            | OtherLetter
            | DecimalNumber
            | LetterNumber
            | OtherNumber
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub text: String,
    /// `tokenize(title + " " + text)`.
    pub tokens: Vec<String>,
}

impl Document {
    pub fn new(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        let id = id.into();
        let title = title.into();
        let text = text.into();
        let tokens = tokenize(&format!("{title} {text}"));
        Document {
            id,
            title,
            text,
            tokens,
        }
    }

    /// Distinct tokens in order of first occurrence.
    pub fn distinct_tokens(&self) -> Vec<String> {
        distinct(&self.tokens)
    }
}

pub(crate) fn distinct(tokens: &[String]) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    tokens
        .iter()
        .filter(|t| seen.insert(t.as_str()))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    #[serde(rename = "query")]
    pub text: String,
    #[serde(
        rename = "contrastive",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub contrastive_text: Option<String>,
    #[serde(default)]
    pub answers: Vec<String>,
    #[serde(rename = "gold_ids", default)]
    pub gold_doc_ids: Vec<String>,
    #[serde(rename = "labels", default, skip_serializing_if = "Option::is_none")]
    pub label_per_doc: Option<BTreeMap<String, u8>>,
}

impl Query {
    pub fn tokens(&self) -> Vec<String> {
        tokenize(&self.text)
    }

    pub fn contrastive_tokens(&self) -> Option<Vec<String>> {
        self.contrastive_text.as_deref().map(tokenize)
    }
}

/// Dense token → index mapping, indices assigned in order of first
/// appearance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Vocabulary::default();
        for t in tokens {
            vocab.insert(t.as_ref());
        }
        vocab
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len();
        self.tokens.push(token.to_owned());
        self.index.insert(token.to_owned(), i);
        i
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    documents: Vec<Document>,
    vocabulary: Vocabulary,
    by_id: HashMap<String, usize>,
    average_doc_length: f64,
}

impl Corpus {
    pub fn from_documents(documents: Vec<Document>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(documents.len());
        let mut vocabulary = Vocabulary::default();
        let mut total_len = 0usize;
        for (i, doc) in documents.iter().enumerate() {
            if doc.id.is_empty() {
                return Err(Error::invalid(format!("document #{i} has an empty id")));
            }
            if by_id.insert(doc.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(doc.id.clone()));
            }
            for t in &doc.tokens {
                vocabulary.insert(t);
            }
            total_len += doc.tokens.len();
        }
        let average_doc_length = if documents.is_empty() {
            0.0
        } else {
            total_len as f64 / documents.len() as f64
        };
        Ok(Corpus {
            documents,
            vocabulary,
            by_id,
            average_doc_length,
        })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn doc_count(&self) -> usize {
        self.documents.len()
    }

    pub fn average_doc_length(&self) -> f64 {
        self.average_doc_length
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&i| &self.documents[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    /// Checks that every gold id of every query resolves in this corpus.
    pub fn validate_queries(&self, queries: &[Query]) -> Result<()> {
        for q in queries {
            if q.id.is_empty() {
                return Err(Error::invalid("query with empty id"));
            }
            for g in &q.gold_doc_ids {
                if self.get(g).is_none() {
                    return Err(Error::UnknownDocument(g.clone()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct DocumentRecord {
    id: String,
    title: String,
    text: String,
}

fn read_lines(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let content = read_lines(path)?;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let records: Vec<DocumentRecord> = parse_jsonl(path.as_ref())?;
    let docs = records
        .into_iter()
        .map(|r| Document::new(r.id, r.title, r.text))
        .collect();
    Corpus::from_documents(docs)
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<Query>> {
    let queries: Vec<Query> = parse_jsonl(path.as_ref())?;
    let mut seen = std::collections::HashSet::new();
    for q in &queries {
        if q.id.is_empty() {
            return Err(Error::invalid("query with empty id"));
        }
        if !seen.insert(q.id.as_str()) {
            return Err(Error::DuplicateId(q.id.clone()));
        }
    }
    Ok(queries)
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, &r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    write_jsonl(
        path.as_ref(),
        corpus.documents().iter().map(|d| DocumentRecord {
            id: d.id.clone(),
            title: d.title.clone(),
            text: d.text.clone(),
        }),
    )
}

pub fn write_queries(path: impl AsRef<Path>, queries: &[Query]) -> Result<()> {
    write_jsonl(path.as_ref(), queries)
}
