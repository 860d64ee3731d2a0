//! Corpus ingestion, bucketed sequence sampling, and synthetic tasks.

use std::fs;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::Label;
use crate::dist::TokenId;
use crate::oracle::{Oracle, OracleError};
use crate::seed;

/// Default bounds, in tokens, of the long-document slice.
pub const LONG_DOC_WINDOW: (usize, usize) = (6000, 7000);

/// Half-open length buckets `[32,100), [100,200), …, [900,1000)`.
pub fn default_buckets() -> Vec<(usize, usize)> {
    let mut b = vec![(32, 100)];
    b.extend((1..10).map(|i| (i * 100, (i + 1) * 100)));
    b
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corpus {0} contains no documents")]
    Empty(PathBuf),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("invalid sampling request: {0}")]
    Sampling(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

/// A line of a corpus file that could not be parsed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineError {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedCorpus {
    pub documents: Vec<Document>,
    pub errors: Vec<LineError>,
}

/// Reads `{"id", "text"}` objects, one per line. Blank lines are skipped;
/// malformed lines are reported in `errors`.
pub fn load_jsonl(path: &Path) -> Result<LoadedCorpus, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let mut out = LoadedCorpus::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Document>(&line) {
            Ok(doc) => out.documents.push(doc),
            Err(e) => out.errors.push(LineError {
                line: i + 1,
                message: e.to_string(),
            }),
        }
    }
    if out.documents.is_empty() {
        return Err(CorpusError::Empty(path.to_path_buf()));
    }
    Ok(out)
}

/// Tokenizes `doc`, reusing a copy stored under `cache_dir` when present.
pub fn tokenize_cached<O: Oracle + ?Sized>(
    doc: &Document,
    tokenizer_id: &str,
    cache_dir: Option<&Path>,
    backend: &O,
) -> Result<Vec<TokenId>, CorpusError> {
    let Some(dir) = cache_dir else {
        return Ok(backend.tokenize(&doc.text)?);
    };
    let key = seed::derive_str(seed::derive_str(seed::derive_str(0, tokenizer_id), &doc.id), &doc.text);
    let path = dir.join(format!("{key:016x}.json"));
    if let Ok(text) = fs::read_to_string(&path) {
        if let Ok(tokens) = serde_json::from_str(&text) {
            return Ok(tokens);
        }
    }
    let tokens = backend.tokenize(&doc.text)?;
    let io_err = |source| CorpusError::Io {
        path: path.clone(),
        source,
    };
    fs::create_dir_all(dir).map_err(io_err)?;
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, serde_json::to_string(&tokens).expect("token ids serialize")).map_err(io_err)?;
    fs::rename(&tmp, &path).map_err(io_err)?;
    Ok(tokens)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub seq_id: String,
    pub doc_id: String,
    pub tokens: Vec<TokenId>,
    pub next_token: Option<TokenId>,
    pub bucket: (usize, usize),
    /// Ground-truth label, for synthetic samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

/// A bucket that could not be sampled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BucketWarning {
    pub doc_id: String,
    pub bucket: (usize, usize),
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct Sampled {
    pub samples: Vec<SequenceSample>,
    pub warnings: Vec<BucketWarning>,
}

/// Draws `n_per_bucket` document prefixes per bucket, with lengths uniform
/// over the bucket's achievable range. With ground truth, each sample also
/// records the document token that follows it.
pub fn sample_sequences(
    doc_id: &str,
    doc: &[TokenId],
    n_per_bucket: usize,
    buckets: &[(usize, usize)],
    rng_seed: u64,
    with_ground_truth: bool,
) -> Result<Sampled, CorpusError> {
    if n_per_bucket == 0 {
        return Err(CorpusError::Sampling("n_per_bucket must be >= 1".into()));
    }
    if let Some(&(lo, hi)) = buckets.iter().find(|(lo, hi)| lo >= hi || *lo == 0) {
        return Err(CorpusError::Sampling(format!("bucket [{lo}, {hi}) is empty")));
    }
    let doc_seed = seed::derive_str(rng_seed, doc_id);
    let mut out = Sampled::default();
    for (b, &(lo, hi)) in buckets.iter().enumerate() {
        // prefix lengths must leave room for the next token when it is needed
        let max_len = if with_ground_truth { doc.len().saturating_sub(1) } else { doc.len() };
        let upper = hi.min(max_len + 1);
        if upper <= lo {
            out.warnings.push(BucketWarning {
                doc_id: doc_id.to_string(),
                bucket: (lo, hi),
                message: format!("document of {} tokens too short for this bucket", doc.len()),
            });
            continue;
        }
        let mut rng = seed::rng(seed::derive(doc_seed, b as u64));
        for i in 0..n_per_bucket {
            let len = rng.random_range(lo..upper);
            out.samples.push(SequenceSample {
                seq_id: format!("{doc_id}/{lo}-{hi}/{i}"),
                doc_id: doc_id.to_string(),
                tokens: doc[..len].to_vec(),
                next_token: with_ground_truth.then(|| doc[len]),
                bucket: (lo, hi),
                label: None,
            });
        }
    }
    Ok(out)
}

/// Parameters of a synthetic probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticSpec {
    /// A magic number hidden in filler text, followed by a query asking for it.
    NiahMagic {
        total_len: usize,
        /// Tokens between the end of the needle and the end of the sequence.
        needle_distance: usize,
        #[serde(default = "default_digits")]
        digits: usize,
        #[serde(default = "default_window")]
        window: usize,
    },
    /// Numbered register lines followed by a query for one line's value.
    LongevalRegisters {
        lines: usize,
        /// How many lines the target sits before the last one (0 = last).
        answer_line_distance: usize,
        #[serde(default = "default_window")]
        window: usize,
    },
}

fn default_digits() -> usize {
    6
}

fn default_window() -> usize {
    32
}

/// A generated probe with its expected answer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticSample {
    pub sample: SequenceSample,
    pub label: Label,
    pub answer_text: String,
    pub answer_tokens: Vec<TokenId>,
}

pub const NIAH_QUERY: &str = "the magic number mentioned in the provided text is";

fn digits_string<R: Rng>(rng: &mut R, digits: usize) -> String {
    (0..digits).map(|_| char::from(b'0' + rng.random_range(0..10u8))).collect()
}

fn tokenize_nonempty<O: Oracle + ?Sized>(backend: &O, text: &str) -> Result<Vec<TokenId>, CorpusError> {
    let t = backend.tokenize(text)?;
    if t.is_empty() {
        return Err(CorpusError::Spec(format!("`{text}` tokenizes to nothing")));
    }
    Ok(t)
}

/// Needle-in-a-haystack probe. The label is short iff the whole needle lies
/// within the final `window` tokens.
pub fn gen_niah<O: Oracle + ?Sized>(
    spec: &SyntheticSpec,
    filler: &[TokenId],
    rng_seed: u64,
    backend: &O,
) -> Result<SyntheticSample, CorpusError> {
    let &SyntheticSpec::NiahMagic {
        total_len,
        needle_distance,
        digits,
        window,
    } = spec
    else {
        return Err(CorpusError::Spec("expected a niah_magic spec".into()));
    };
    if digits == 0 {
        return Err(CorpusError::Spec("digits must be >= 1".into()));
    }
    let mut rng = seed::rng(rng_seed);
    let number = digits_string(&mut rng, digits);
    let needle = tokenize_nonempty(backend, &format!("the magic number is {number}."))?;
    let query = tokenize_nonempty(backend, NIAH_QUERY)?;
    if needle_distance < query.len() {
        return Err(CorpusError::Spec(format!(
            "needle distance {needle_distance} collides with the {}-token query",
            query.len()
        )));
    }
    if total_len < needle.len() + needle_distance {
        return Err(CorpusError::Spec(format!(
            "total length {total_len} cannot hold the needle at distance {needle_distance}"
        )));
    }
    let before = total_len - needle.len() - needle_distance;
    let after = needle_distance - query.len();
    let needed = before + after;
    if needed > 0 && filler.len() < needed {
        return Err(CorpusError::Spec(format!(
            "filler has {} tokens, {needed} needed",
            filler.len()
        )));
    }
    let start = if filler.len() > needed { rng.random_range(0..=filler.len() - needed) } else { 0 };
    let chunk = &filler[start..start + needed];
    let mut tokens = Vec::with_capacity(total_len);
    tokens.extend_from_slice(&chunk[..before]);
    tokens.extend_from_slice(&needle);
    tokens.extend_from_slice(&chunk[before..]);
    tokens.extend_from_slice(&query);
    debug_assert_eq!(tokens.len(), total_len);

    let label = if needle_distance + needle.len() <= window { Label::Short } else { Label::Long };
    let answer_tokens = backend.tokenize(&number)?;
    Ok(SyntheticSample {
        sample: SequenceSample {
            seq_id: format!("niah/{total_len}/{needle_distance}/{rng_seed:016x}"),
            doc_id: "synthetic".into(),
            next_token: answer_tokens.first().copied(),
            bucket: (total_len, total_len + 1),
            tokens,
            label: Some(label),
        },
        label,
        answer_text: number,
        answer_tokens,
    })
}

/// Register-retrieval probe. The label is short iff the target line starts
/// within the final `window` tokens.
pub fn gen_longeval<O: Oracle + ?Sized>(
    spec: &SyntheticSpec,
    rng_seed: u64,
    backend: &O,
) -> Result<SyntheticSample, CorpusError> {
    let &SyntheticSpec::LongevalRegisters {
        lines,
        answer_line_distance,
        window,
    } = spec
    else {
        return Err(CorpusError::Spec("expected a longeval_registers spec".into()));
    };
    if lines < 2 {
        return Err(CorpusError::Spec("need at least 2 register lines".into()));
    }
    if answer_line_distance >= lines {
        return Err(CorpusError::Spec(format!(
            "answer line distance {answer_line_distance} outside {lines} lines"
        )));
    }
    let mut rng = seed::rng(rng_seed);
    let mut ids: Vec<String> = Vec::with_capacity(lines);
    while ids.len() < lines {
        let id = format!("{:04}", rng.random_range(0..10_000u32));
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    let values: Vec<String> = (0..lines).map(|_| digits_string(&mut rng, 5)).collect();
    let target = lines - 1 - answer_line_distance;

    let mut tokens = Vec::new();
    let mut target_start = 0;
    for (i, (id, value)) in ids.iter().zip(&values).enumerate() {
        if i == target {
            target_start = tokens.len();
        }
        tokens.extend(tokenize_nonempty(
            backend,
            &format!("line {id}: register_content is <{value}>"),
        )?);
    }
    let query = tokenize_nonempty(
        backend,
        &format!("what is the register_content in line {} ? the register_content is <", ids[target]),
    )?;
    if window < query.len() {
        return Err(CorpusError::Spec(format!(
            "window {window} is smaller than the {}-token query",
            query.len()
        )));
    }
    tokens.extend_from_slice(&query);
    let distance = tokens.len() - target_start;
    let label = if distance <= window { Label::Short } else { Label::Long };
    let answer_tokens = backend.tokenize(&values[target])?;
    let len = tokens.len();
    Ok(SyntheticSample {
        sample: SequenceSample {
            seq_id: format!("longeval/{lines}/{answer_line_distance}/{rng_seed:016x}"),
            doc_id: "synthetic".into(),
            next_token: answer_tokens.first().copied(),
            bucket: (len, len + 1),
            tokens,
            label: Some(label),
        },
        label,
        answer_text: values[target].clone(),
        answer_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{MockOracle, MockOracleSpec, WordVocab};

    fn lexicon_mock() -> MockOracle {
        "marker".parse::<MockOracleSpec>().map(|s| MockOracle::new(s).unwrap()).unwrap()
    }

    fn filler(n: usize) -> Vec<TokenId> {
        let ids = WordVocab::builtin().word_ids();
        (0..n).map(|i| ids.start + (i as TokenId % (ids.end - ids.start))).collect()
    }

    #[test]
    fn jsonl_loading() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        fs::write(&p, "{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"b\",\"text\":\"y\"}\n").unwrap();
        assert_eq!(load_jsonl(&p).unwrap().documents.len(), 2);
        fs::write(&p, "{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"b\"}\n").unwrap();
        let c = load_jsonl(&p).unwrap();
        assert_eq!(c.documents.len(), 1);
        assert_eq!(c.errors.len(), 1);
        assert_eq!(c.errors[0].line, 2);
        fs::write(&p, "").unwrap();
        assert!(matches!(load_jsonl(&p), Err(CorpusError::Empty(_))));
        assert!(load_jsonl(&dir.path().join("missing.jsonl")).is_err());
    }

    #[test]
    fn one_sample_per_bucket() {
        let doc: Vec<TokenId> = (0..1000).collect();
        let out = sample_sequences("d", &doc, 1, &default_buckets(), 7, true).unwrap();
        assert_eq!(out.samples.len(), 10);
        assert!(out.warnings.is_empty());
        for s in &out.samples {
            assert!(s.tokens.len() >= s.bucket.0 && s.tokens.len() < s.bucket.1);
            assert_eq!(s.next_token, Some(doc[s.tokens.len()]));
        }
        let again = sample_sequences("d", &doc, 1, &default_buckets(), 7, true).unwrap();
        assert_eq!(out.samples, again.samples);
    }

    #[test]
    fn short_documents_skip_buckets() {
        let doc: Vec<TokenId> = (0..150).collect();
        let out = sample_sequences("d", &doc, 3, &default_buckets(), 1, true).unwrap();
        assert_eq!(out.samples.len(), 6);
        assert_eq!(out.warnings.len(), 8);
        assert!(out.samples.iter().all(|s| s.tokens.len() < 150));
    }

    #[test]
    fn token_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = lexicon_mock();
        let doc = Document {
            id: "d1".into(),
            text: "the old king said".into(),
        };
        let a = tokenize_cached(&doc, "builtin", Some(dir.path()), &m).unwrap();
        let b = tokenize_cached(&doc, "builtin", Some(dir.path()), &m).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn niah_examples() {
        let m = lexicon_mock();
        let near = SyntheticSpec::NiahMagic {
            total_len: 300,
            needle_distance: 10,
            digits: 6,
            window: 32,
        };
        let s = gen_niah(&near, &filler(1000), 3, &m).unwrap();
        assert_eq!(s.label, Label::Short);
        assert_eq!(s.sample.tokens.len(), 300);
        assert_eq!(s.answer_text.len(), 6);
        assert_eq!(s.answer_tokens.len(), 6);

        let far = SyntheticSpec::NiahMagic {
            total_len: 800,
            needle_distance: 500,
            digits: 6,
            window: 32,
        };
        let s = gen_niah(&far, &filler(1000), 3, &m).unwrap();
        assert_eq!(s.label, Label::Long);
        // the needle really sits where the label says
        let v = WordVocab::builtin();
        let text = v.detokenize(&s.sample.tokens[800 - 500 - 11..800 - 500]);
        assert_eq!(text, format!("the magic number is {}.", s.answer_text));

        let clash = SyntheticSpec::NiahMagic {
            total_len: 300,
            needle_distance: 3,
            digits: 6,
            window: 32,
        };
        assert!(gen_niah(&clash, &filler(1000), 3, &m).is_err());
    }

    #[test]
    fn niah_numbers_are_zero_padded() {
        let m = lexicon_mock();
        let spec = SyntheticSpec::NiahMagic {
            total_len: 60,
            needle_distance: 20,
            digits: 6,
            window: 32,
        };
        for seed in 0..200 {
            let s = gen_niah(&spec, &filler(100), seed, &m).unwrap();
            assert_eq!(s.answer_text.len(), 6);
            assert!(s.answer_text.bytes().all(|b| b.is_ascii_digit()));
        }
    }

    #[test]
    fn longeval_examples() {
        let m = lexicon_mock();
        let last = SyntheticSpec::LongevalRegisters {
            lines: 50,
            answer_line_distance: 0,
            window: 32,
        };
        let a = gen_longeval(&last, 9, &m).unwrap();
        assert_eq!(a.label, Label::Short);
        let b = gen_longeval(&last, 9, &m).unwrap();
        assert_eq!(a.sample.tokens, b.sample.tokens);

        let first = SyntheticSpec::LongevalRegisters {
            lines: 50,
            answer_line_distance: 49,
            window: 32,
        };
        assert_eq!(gen_longeval(&first, 9, &m).unwrap().label, Label::Long);

        let one = SyntheticSpec::LongevalRegisters {
            lines: 1,
            answer_line_distance: 0,
            window: 32,
        };
        assert!(gen_longeval(&one, 9, &m).is_err());
    }

    #[test]
    fn longeval_wide_window() {
        let m = lexicon_mock();
        let spec = |d, window| SyntheticSpec::LongevalRegisters {
            lines: 10,
            answer_line_distance: d,
            window,
        };
        // each line and the query are 15 tokens
        assert_eq!(gen_longeval(&spec(1, 32), 1, &m).unwrap().label, Label::Long);
        assert_eq!(gen_longeval(&spec(1, 64), 1, &m).unwrap().label, Label::Short);
    }

    #[test]
    fn spec_json() {
        let s: SyntheticSpec =
            serde_json::from_str(r#"{"kind":"niah_magic","total_len":100,"needle_distance":40}"#).unwrap();
        assert_eq!(
            s,
            SyntheticSpec::NiahMagic {
                total_len: 100,
                needle_distance: 40,
                digits: 6,
                window: 32
            }
        );
    }
}
