//! tf-idf machinery: the cosine-similarity baseline matcher and the
//! candidate-retrieval pipeline (message expansion with top-5 history
//! keywords, inverted-index lookup).
//!
//! Weighting is raw term frequency times idf = ln(N / df), idf taken from
//! whichever corpus the caller designates (the index for retrieval, the
//! training data for the baseline). No smoothing, no sublinear tf.

use std::collections::BTreeMap;
use std::path::Path;

use crate::binfmt::{atomic_write, w_str, w_u32, w_u64, Reader};
use crate::corpus::{tokenize, RawInstance};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Document {
    pub id: usize,
    pub text: String,
    pub tokens: Vec<String>,
    /// Where the response came from, when known (its source context).
    pub context_ref: Option<String>,
}

/// Term to posting list over a response corpus, postings sorted by document
/// id, plus per-document tf-idf norms. Immutable after build.
#[derive(Debug, Clone)]
pub struct InvertedIndex {
    docs: Vec<Document>,
    postings: BTreeMap<String, Vec<(u32, u32)>>,
    doc_norms: Vec<f64>,
}

impl InvertedIndex {
    pub fn build(entries: Vec<(String, Option<String>)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Data("cannot index an empty corpus".into()));
        }
        let docs: Vec<Document> = entries
            .into_iter()
            .enumerate()
            .map(|(id, (text, context_ref))| Document {
                id,
                tokens: tokenize(&text),
                text,
                context_ref,
            })
            .collect();
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        for doc in &docs {
            let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
            for t in &doc.tokens {
                *tf.entry(t).or_insert(0) += 1;
            }
            for (term, count) in tf {
                postings.entry(term.to_string()).or_default().push((doc.id as u32, count));
            }
        }
        let mut index = InvertedIndex { docs, postings, doc_norms: Vec::new() };
        index.doc_norms = index.compute_norms();
        Ok(index)
    }

    fn compute_norms(&self) -> Vec<f64> {
        let mut sq = vec![0.0; self.docs.len()];
        for (term, posting) in &self.postings {
            let idf = self.idf(term).expect("term is indexed");
            for &(doc, tf) in posting {
                let w = tf as f64 * idf;
                sq[doc as usize] += w * w;
            }
        }
        sq.into_iter().map(f64::sqrt).collect()
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn doc(&self, id: usize) -> &Document {
        &self.docs[id]
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// ln(N / df); None for terms outside the index vocabulary.
    pub fn idf(&self, term: &str) -> Option<f64> {
        let df = self.df(term);
        (df > 0).then(|| (self.docs.len() as f64 / df as f64).ln())
    }

    pub fn posting(&self, term: &str) -> Option<&[(u32, u32)]> {
        self.postings.get(term).map(Vec::as_slice)
    }

    const MAGIC: &'static [u8] = b"SMIX";
    const VERSION: u32 = 1;

    /// Versioned binary container: document store plus the term dictionary
    /// with postings.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        w_u32(&mut out, Self::VERSION);
        w_u64(&mut out, self.docs.len() as u64);
        for doc in &self.docs {
            w_str(&mut out, &doc.text);
            match &doc.context_ref {
                Some(r) => {
                    out.push(1);
                    w_str(&mut out, r);
                }
                None => out.push(0),
            }
        }
        w_u64(&mut out, self.postings.len() as u64);
        for (term, posting) in &self.postings {
            w_str(&mut out, term);
            w_u64(&mut out, posting.len() as u64);
            for &(doc, tf) in posting {
                w_u32(&mut out, doc);
                w_u32(&mut out, tf);
            }
        }
        atomic_write(path, &out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Data(format!("index not found: {}: {e}", path.display())))?;
        let mut r = Reader::new(&bytes, "index");
        r.expect_magic(Self::MAGIC)?;
        let version = r.r_u32()?;
        if version != Self::VERSION {
            return Err(Error::Data(format!("unsupported index version {version}")));
        }
        let n_docs = r.r_u64()? as usize;
        let mut docs = Vec::with_capacity(n_docs);
        for id in 0..n_docs {
            let text = r.r_str()?;
            let context_ref = if r.r_u8()? == 1 { Some(r.r_str()?) } else { None };
            docs.push(Document { id, tokens: tokenize(&text), text, context_ref });
        }
        let n_terms = r.r_u64()? as usize;
        let mut postings = BTreeMap::new();
        for _ in 0..n_terms {
            let term = r.r_str()?;
            let len = r.r_u64()? as usize;
            let mut posting = Vec::with_capacity(len);
            for _ in 0..len {
                posting.push((r.r_u32()?, r.r_u32()?));
            }
            postings.insert(term, posting);
        }
        let mut index = InvertedIndex { docs, postings, doc_norms: Vec::new() };
        index.doc_norms = index.compute_norms();
        Ok(index)
    }
}

/// Document-frequency table for the baseline matcher; idf computed on the
/// training data, to which every instance contributes its concatenated
/// context and its response as two documents.
#[derive(Debug, Clone, Default)]
pub struct DfStats {
    pub df: BTreeMap<String, u32>,
    pub n_docs: u64,
}

impl DfStats {
    pub fn from_training(instances: &[RawInstance]) -> Self {
        let mut stats = DfStats::default();
        for inst in instances {
            let context: Vec<&String> = inst.utterances.iter().flatten().collect();
            stats.add_doc(context.iter().map(|s| s.as_str()));
            stats.add_doc(inst.response.iter().map(String::as_str));
        }
        stats
    }

    fn add_doc<'a>(&mut self, tokens: impl Iterator<Item = &'a str>) {
        let distinct: std::collections::BTreeSet<&str> = tokens.collect();
        for t in distinct {
            *self.df.entry(t.to_string()).or_insert(0) += 1;
        }
        self.n_docs += 1;
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.df.get(term).map(|&df| (self.n_docs as f64 / df as f64).ln())
    }
}

/// Sparse tf-idf vector: raw tf times idf; terms without an idf are dropped.
pub fn tfidf_weights<'a>(
    tokens: impl Iterator<Item = &'a str>,
    idf_of: impl Fn(&str) -> Option<f64>,
) -> BTreeMap<String, f64> {
    let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
    for t in tokens {
        *tf.entry(t).or_insert(0) += 1;
    }
    tf.into_iter()
        .filter_map(|(term, count)| idf_of(term).map(|idf| (term.to_string(), count as f64 * idf)))
        .collect()
}

/// Cosine of two sparse vectors; zero on a zero vector.
pub fn cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(t, &wa)| b.get(t).map(|&wb| wa * wb))
        .sum();
    let na: f64 = a.values().map(|w| w * w).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|w| w * w).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// The baseline matcher: cosine between the tf-idf vectors of the
/// concatenated context and the response.
pub fn tfidf_baseline_score(
    context: &[Vec<String>],
    response: &[String],
    stats: &DfStats,
) -> f64 {
    let ctx = tfidf_weights(
        context.iter().flatten().map(String::as_str),
        |t| stats.idf(t),
    );
    let resp = tfidf_weights(response.iter().map(String::as_str), |t| stats.idf(t));
    cosine(&ctx, &resp)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedQuery {
    pub message: Vec<String>,
    pub keywords: Vec<String>,
}

impl ExpandedQuery {
    pub fn tokens(&self) -> Vec<String> {
        self.message.iter().chain(&self.keywords).cloned().collect()
    }
}

/// Expands the current message (the last utterance) with the top-5 keywords
/// of the previous turns, ranked by tf within the context times idf from the
/// index. Fewer than 5 distinct candidates means all of them; a single-turn
/// context expands to the message itself.
pub fn expand_message(context: &[Vec<String>], index: &InvertedIndex) -> ExpandedQuery {
    assert!(!context.is_empty(), "expand_message: empty context");
    let message = context.last().unwrap().clone();
    let history = &context[..context.len() - 1];
    let mut scored: Vec<(String, f64)> = tfidf_weights(
        history.iter().flatten().map(String::as_str),
        |t| index.idf(t),
    )
    .into_iter()
    .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    let keywords = scored.into_iter().take(5).map(|(t, _)| t).collect();
    ExpandedQuery { message, keywords }
}

#[derive(Debug, Clone)]
pub struct RetrievalHit {
    pub doc_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct RetrievalResult {
    pub hits: Vec<RetrievalHit>,
    /// Set when k exceeded the corpus size and everything was returned.
    pub truncated_to_corpus: bool,
}

/// Top-k documents by tf-idf cosine against the query, accumulated over the
/// postings of the query's indexed terms; ties break by ascending document
/// id. When the query shares terms with fewer than k documents, the
/// remainder is filled with zero-score documents in id order (the exact
/// brute-force ranking); a query with no indexed terms returns nothing.
pub fn retrieve_candidates(
    query_tokens: &[String],
    index: &InvertedIndex,
    k: usize,
) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(Error::Usage("retrieve: k must be at least 1".into()));
    }
    let query = tfidf_weights(query_tokens.iter().map(String::as_str), |t| index.idf(t));
    if query.is_empty() {
        return Ok(RetrievalResult { hits: Vec::new(), truncated_to_corpus: false });
    }
    let qnorm: f64 = query.values().map(|w| w * w).sum::<f64>().sqrt();
    let mut dots: BTreeMap<u32, f64> = BTreeMap::new();
    for (term, &qw) in &query {
        let idf = index.idf(term).expect("query terms are indexed");
        for &(doc, tf) in index.posting(term).expect("query terms are indexed") {
            *dots.entry(doc).or_insert(0.0) += qw * (tf as f64 * idf);
        }
    }
    let mut hits: Vec<RetrievalHit> = dots
        .into_iter()
        .map(|(doc, dot)| {
            let dnorm = index.doc_norms[doc as usize];
            // a term present in every document has idf 0, so a query can be
            // non-empty yet have a zero vector
            let score = if dnorm == 0.0 || qnorm == 0.0 { 0.0 } else { dot / (qnorm * dnorm) };
            RetrievalHit { doc_id: doc as usize, score }
        })
        .collect();
    hits.sort_by(|a, b| {
        b.score.partial_cmp(&a.score).unwrap().then_with(|| a.doc_id.cmp(&b.doc_id))
    });
    let truncated = k > index.len();
    let want = k.min(index.len());
    if hits.len() > want {
        hits.truncate(want);
    } else if hits.len() < want {
        // zero-score fill in id order, matching a full brute-force ranking
        let have: std::collections::BTreeSet<usize> =
            hits.iter().map(|h| h.doc_id).collect();
        for id in 0..index.len() {
            if hits.len() == want {
                break;
            }
            if !have.contains(&id) {
                hits.push(RetrievalHit { doc_id: id, score: 0.0 });
            }
        }
    }
    Ok(RetrievalResult { hits, truncated_to_corpus: truncated })
}
