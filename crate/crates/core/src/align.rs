//! Translation-probability similarity.
//!
//! Captions of one image are treated as monolingual parallel sentences:
//! every unordered caption pair becomes a sentence pair, words are aligned
//! with IBM Model 1 EM in both directions, the two alignments are merged
//! with grow-diag-final-and, consistent entity pairs are extracted, and the
//! co-occurrence counts give the pair similarity s = p(i|j) * p(j|i).
//!
//! Sentences are the case-folded captions with stop words removed (stop
//! words are dropped for every similarity method). Since Model 1 has no
//! distortion component, repeated function words would otherwise all link
//! to their first occurrence and spray span-crossing links that block
//! entity-pair extraction.
//!
//! The NULL source token carries a fixed alignment probability `null_prob`
//! while real source words share the remainder uniformly. With the classic
//! uniform 1/(l+1) weighting, NULL and a source word that co-occurs with
//! every target would receive identical counts forever and the lexicon
//! could not sharpen past ~0.98 on tiny corpora.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{Entity, RawCaption, StopWordList};
use crate::error::{Error, Result};

/// Default fixed NULL-alignment probability.
pub const DEFAULT_NULL_PROB: f64 = 0.08;

/// Default EM iteration count.
pub const DEFAULT_ITERATIONS: usize = 5;

/// An entity span over one side of a sentence pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntitySpan {
    /// Token range, end exclusive.
    pub start: usize,
    pub end: usize,
    /// Normalized entity form.
    pub form: String,
}

/// One caption pair with entity spans on both sides.
#[derive(Debug, Clone)]
pub struct SentencePair {
    pub image_id: String,
    pub src_caption: u32,
    pub tgt_caption: u32,
    pub src_tokens: Vec<String>,
    pub tgt_tokens: Vec<String>,
    pub src_spans: Vec<EntitySpan>,
    pub tgt_spans: Vec<EntitySpan>,
}

/// All unordered caption pairs of a corpus.
#[derive(Debug, Clone, Default)]
pub struct PseudoParallelCorpus {
    pub pairs: Vec<SentencePair>,
}

/// Word links of one sentence pair, (source index, target index).
pub type AlignmentMatrix = BTreeSet<(usize, usize)>;

/// A caption reduced to its case-folded non-stop-word tokens, with entity
/// spans remapped into the filtered token sequence.
#[derive(Debug, Clone)]
struct FilteredCaption {
    tokens: Vec<String>,
    spans: Vec<EntitySpan>,
}

fn filter_caption(cap: &RawCaption, entities: &[&Entity], stops: &StopWordList) -> FilteredCaption {
    let folded: Vec<String> = cap.tokens.iter().map(|t| t.to_lowercase()).collect();
    // new index of each surviving token position
    let mut new_index = vec![usize::MAX; folded.len()];
    let mut tokens = Vec::new();
    for (i, t) in folded.iter().enumerate() {
        if !stops.contains(t) {
            new_index[i] = tokens.len();
            tokens.push(t.clone());
        }
    }
    let kept_before = |pos: usize| -> usize {
        folded[..pos].iter().filter(|t| !stops.contains(t)).count()
    };
    let mut spans: Vec<EntitySpan> = entities
        .iter()
        .map(|e| EntitySpan {
            start: kept_before(e.span.0),
            end: kept_before(e.span.1),
            form: e.normalized_form(),
        })
        .filter(|s| s.end > s.start)
        .collect();
    spans.sort_by_key(|s| s.start);
    FilteredCaption { tokens, spans }
}

/// Build the pseudo-parallel corpus: each image's captions paired in all
/// unordered combinations (5 captions give 10 pairs). Sentences are the
/// stop-word-filtered captions; entity spans are carried over into the
/// filtered token space (entities whose tokens are all stop words get no
/// span and never participate in extraction).
pub fn build_pseudo_parallel(
    captions: &[RawCaption],
    entities: &[Entity],
    stops: &StopWordList,
) -> PseudoParallelCorpus {
    let mut by_image: BTreeMap<&str, Vec<&RawCaption>> = BTreeMap::new();
    for c in captions {
        by_image.entry(c.image_id.as_str()).or_default().push(c);
    }
    let mut ents_by_caption: HashMap<(&str, u32), Vec<&Entity>> = HashMap::new();
    for e in entities {
        ents_by_caption
            .entry((e.image_id.as_str(), e.caption_index))
            .or_default()
            .push(e);
    }

    let mut pairs = Vec::new();
    for (image_id, mut caps) in by_image {
        caps.sort_by_key(|c| c.caption_index);
        let filtered: Vec<FilteredCaption> = caps
            .iter()
            .map(|c| {
                let ents = ents_by_caption
                    .get(&(image_id, c.caption_index))
                    .map(Vec::as_slice)
                    .unwrap_or(&[]);
                filter_caption(c, ents, stops)
            })
            .collect();
        for a in 0..caps.len() {
            for b in (a + 1)..caps.len() {
                pairs.push(SentencePair {
                    image_id: image_id.to_string(),
                    src_caption: caps[a].caption_index,
                    tgt_caption: caps[b].caption_index,
                    src_tokens: filtered[a].tokens.clone(),
                    tgt_tokens: filtered[b].tokens.clone(),
                    src_spans: filtered[a].spans.clone(),
                    tgt_spans: filtered[b].spans.clone(),
                });
            }
        }
    }
    PseudoParallelCorpus { pairs }
}

/// Reverse every pair, for training the backward direction.
pub fn reversed(corpus: &PseudoParallelCorpus) -> PseudoParallelCorpus {
    PseudoParallelCorpus {
        pairs: corpus
            .pairs
            .iter()
            .map(|p| SentencePair {
                image_id: p.image_id.clone(),
                src_caption: p.tgt_caption,
                tgt_caption: p.src_caption,
                src_tokens: p.tgt_tokens.clone(),
                tgt_tokens: p.src_tokens.clone(),
                src_spans: p.tgt_spans.clone(),
                tgt_spans: p.src_spans.clone(),
            })
            .collect(),
    }
}

/// IBM Model 1 lexical probabilities t(target | source).
#[derive(Debug, Clone)]
pub struct LexiconTable {
    src_vocab: Vec<String>,
    tgt_vocab: Vec<String>,
    src_index: HashMap<String, usize>,
    tgt_index: HashMap<String, usize>,
    /// Per source word: co-occurring target id -> probability.
    table: Vec<BTreeMap<usize, f64>>,
    /// Fixed NULL alignment probability used in training and Viterbi.
    pub null_prob: f64,
    /// Corpus log-likelihood after each EM iteration.
    pub log_likelihoods: Vec<f64>,
}

/// Source id 0 is reserved for NULL.
pub const NULL_ID: usize = 0;

impl LexiconTable {
    pub fn prob(&self, src: &str, tgt: &str) -> f64 {
        let (Some(&s), Some(&t)) = (self.src_index.get(src), self.tgt_index.get(tgt)) else {
            return 0.0;
        };
        self.table[s].get(&t).copied().unwrap_or(0.0)
    }

    pub fn null_prob_of(&self, tgt: &str) -> f64 {
        let Some(&t) = self.tgt_index.get(tgt) else {
            return 0.0;
        };
        self.table[NULL_ID].get(&t).copied().unwrap_or(0.0)
    }

    /// Per-source probability row, for the row-sum invariant.
    pub fn rows(&self) -> impl Iterator<Item = (&str, f64)> {
        self.src_vocab
            .iter()
            .zip(self.table.iter())
            .map(|(w, row)| (w.as_str(), row.values().sum::<f64>()))
    }

    /// Every (source, target, probability) entry, in vocabulary order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &str, f64)> {
        self.src_vocab.iter().zip(self.table.iter()).flat_map(
            move |(src, row)| {
                row.iter()
                    .map(move |(&t, &p)| (src.as_str(), self.tgt_vocab[t].as_str(), p))
            },
        )
    }
}

/// Train IBM Model 1 by EM from uniform initialization over the
/// co-occurring vocabulary, NULL included on the source side.
pub fn train_ibm1(
    corpus: &PseudoParallelCorpus,
    iterations: usize,
    null_prob: f64,
) -> Result<LexiconTable> {
    if corpus.pairs.is_empty() {
        return Err(Error::invalid("empty pseudo-parallel corpus"));
    }
    if !(0.0..1.0).contains(&null_prob) {
        return Err(Error::invalid("null_prob must be in [0, 1)"));
    }

    // vocabularies in first-seen order; source id 0 is NULL
    let mut src_vocab = vec!["<NULL>".to_string()];
    let mut src_index: HashMap<String, usize> = HashMap::new();
    src_index.insert("<NULL>".into(), NULL_ID);
    let mut tgt_vocab = Vec::new();
    let mut tgt_index: HashMap<String, usize> = HashMap::new();
    let intern = |vocab: &mut Vec<String>, index: &mut HashMap<String, usize>, w: &str| {
        if let Some(&i) = index.get(w) {
            i
        } else {
            let i = vocab.len();
            vocab.push(w.to_string());
            index.insert(w.to_string(), i);
            i
        }
    };

    let mut pairs_idx: Vec<(Vec<usize>, Vec<usize>)> = Vec::with_capacity(corpus.pairs.len());
    for p in &corpus.pairs {
        let s: Vec<usize> = p
            .src_tokens
            .iter()
            .map(|w| intern(&mut src_vocab, &mut src_index, w))
            .collect();
        let t: Vec<usize> = p
            .tgt_tokens
            .iter()
            .map(|w| intern(&mut tgt_vocab, &mut tgt_index, w))
            .collect();
        pairs_idx.push((s, t));
    }
    if tgt_vocab.is_empty() {
        return Err(Error::invalid("corpus has no target tokens"));
    }

    // co-occurring target sets per source (NULL co-occurs with everything)
    let mut cooc: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); src_vocab.len()];
    for (s, t) in &pairs_idx {
        for &ti in t {
            cooc[NULL_ID].insert(ti);
            for &si in s {
                cooc[si].insert(ti);
            }
        }
    }

    let mut table: Vec<BTreeMap<usize, f64>> = cooc
        .iter()
        .map(|set| {
            let u = 1.0 / set.len().max(1) as f64;
            set.iter().map(|&t| (t, u)).collect()
        })
        .collect();

    let mut log_likelihoods = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut counts: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); src_vocab.len()];
        let mut totals = vec![0.0f64; src_vocab.len()];
        let mut ll = 0.0;
        for (s, t) in &pairs_idx {
            let l = s.len() as f64;
            let real_w = if s.is_empty() { 0.0 } else { (1.0 - null_prob) / l };
            for &ti in t {
                let w_null = null_prob * table[NULL_ID].get(&ti).copied().unwrap_or(0.0);
                let mut denom = w_null;
                for &si in s {
                    denom += real_w * table[si].get(&ti).copied().unwrap_or(0.0);
                }
                if denom <= 0.0 {
                    continue;
                }
                ll += denom.ln();
                let post_null = w_null / denom;
                *counts[NULL_ID].entry(ti).or_insert(0.0) += post_null;
                totals[NULL_ID] += post_null;
                for &si in s {
                    let post = real_w * table[si].get(&ti).copied().unwrap_or(0.0) / denom;
                    *counts[si].entry(ti).or_insert(0.0) += post;
                    totals[si] += post;
                }
            }
        }
        for (si, row) in counts.into_iter().enumerate() {
            if totals[si] > 0.0 {
                table[si] = row
                    .into_iter()
                    .map(|(t, c)| (t, c / totals[si]))
                    .collect();
            }
        }
        log_likelihoods.push(ll);
    }

    Ok(LexiconTable {
        src_vocab,
        tgt_vocab,
        src_index,
        tgt_index,
        table,
        null_prob,
        log_likelihoods,
    })
}

/// Align each target word to its argmax-probability source word; a NULL
/// winner yields no link. NULL sits at position 0, so ties go to NULL
/// first and then to the smaller real source index.
pub fn viterbi_align(pair: &SentencePair, lexicon: &LexiconTable) -> AlignmentMatrix {
    let mut links = AlignmentMatrix::new();
    if pair.src_tokens.is_empty() {
        return links;
    }
    let real_w = (1.0 - lexicon.null_prob) / pair.src_tokens.len() as f64;
    for (j, tgt) in pair.tgt_tokens.iter().enumerate() {
        let mut best = lexicon.null_prob * lexicon.null_prob_of(tgt);
        let mut best_src: Option<usize> = None;
        for (i, src) in pair.src_tokens.iter().enumerate() {
            let score = real_w * lexicon.prob(src, tgt);
            if score > best {
                best = score;
                best_src = Some(i);
            }
        }
        if let Some(i) = best_src {
            links.insert((i, j));
        }
    }
    links
}

/// Merge two directional alignments with grow-diag-final-and.
///
/// Starts from the intersection, grows with 8-neighborhood union points
/// whose source or target word is still unaligned, then adds points present
/// in both directions whose endpoints are both unaligned.
pub fn symmetrize_gdfa(
    forward: &AlignmentMatrix,
    backward: &AlignmentMatrix,
    src_len: usize,
    tgt_len: usize,
) -> AlignmentMatrix {
    let union: AlignmentMatrix = forward.union(backward).cloned().collect();
    let mut alignment: AlignmentMatrix = forward.intersection(backward).cloned().collect();
    let mut src_aligned = vec![false; src_len];
    let mut tgt_aligned = vec![false; tgt_len];
    for &(i, j) in &alignment {
        src_aligned[i] = true;
        tgt_aligned[j] = true;
    }

    const NEIGHBORS: [(isize, isize); 8] = [
        (-1, -1),
        (-1, 0),
        (-1, 1),
        (0, -1),
        (0, 1),
        (1, -1),
        (1, 0),
        (1, 1),
    ];
    loop {
        let mut added = false;
        for (i, j) in alignment.clone() {
            for (di, dj) in NEIGHBORS {
                let ni = i as isize + di;
                let nj = j as isize + dj;
                if ni < 0 || nj < 0 || ni as usize >= src_len || nj as usize >= tgt_len {
                    continue;
                }
                let p = (ni as usize, nj as usize);
                if union.contains(&p)
                    && !alignment.contains(&p)
                    && (!src_aligned[p.0] || !tgt_aligned[p.1])
                {
                    alignment.insert(p);
                    src_aligned[p.0] = true;
                    tgt_aligned[p.1] = true;
                    added = true;
                }
            }
        }
        if !added {
            break;
        }
    }

    // final-and: points in both directions with both endpoints unaligned
    for p in forward.intersection(backward) {
        if !alignment.contains(p) && !src_aligned[p.0] && !tgt_aligned[p.1] {
            alignment.insert(*p);
            src_aligned[p.0] = true;
            tgt_aligned[p.1] = true;
        }
    }
    alignment
}

/// Extract entity pairs whose spans are consistently aligned: at least one
/// link inside span_i x span_j and no link crossing a span boundary.
pub fn extract_entity_pairs(
    pair: &SentencePair,
    alignment: &AlignmentMatrix,
) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for s in &pair.src_spans {
        for t in &pair.tgt_spans {
            let mut internal = 0usize;
            let mut crossing = false;
            for &(i, j) in alignment.iter() {
                let in_src = i >= s.start && i < s.end;
                let in_tgt = j >= t.start && j < t.end;
                if in_src && in_tgt {
                    internal += 1;
                } else if in_src != in_tgt && (in_src || in_tgt) {
                    crossing = true;
                    break;
                }
            }
            if internal > 0 && !crossing {
                out.push((s.form.clone(), t.form.clone()));
            }
        }
    }
    out
}

/// How the printed conditional p(i|j) = c(i,j) / sum_k c(i,k) is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Normalization {
    /// Denominator sums over partners of i, exactly as printed.
    #[default]
    AsPrinted,
    /// Denominator sums over partners of j (the transposed reading).
    Transposed,
}

/// Symmetric co-occurrence counts over normalized entity forms with the
/// conditional probabilities derived from them.
#[derive(Debug, Clone, Default)]
pub struct TranslationTable {
    counts: BTreeMap<(String, String), u64>,
    row_sums: BTreeMap<String, u64>,
    pub normalization: Normalization,
}

impl TranslationTable {
    pub fn new(normalization: Normalization) -> Self {
        TranslationTable {
            normalization,
            ..Default::default()
        }
    }

    /// Record one extracted co-occurrence of forms `i` and `j`.
    pub fn add_pair(&mut self, i: &str, j: &str) {
        *self
            .counts
            .entry((i.to_string(), j.to_string()))
            .or_insert(0) += 1;
        if i != j {
            *self
                .counts
                .entry((j.to_string(), i.to_string()))
                .or_insert(0) += 1;
        }
        *self.row_sums.entry(i.to_string()).or_insert(0) += 1;
        if i != j {
            *self.row_sums.entry(j.to_string()).or_insert(0) += 1;
        }
    }

    pub fn count(&self, i: &str, j: &str) -> u64 {
        self.counts
            .get(&(i.to_string(), j.to_string()))
            .copied()
            .unwrap_or(0)
    }

    pub fn row_sum(&self, form: &str) -> u64 {
        self.row_sums.get(form).copied().unwrap_or(0)
    }

    /// Conditional p(i|j) under the configured reading of the printed
    /// formula.
    pub fn p_i_given_j(&self, i: &str, j: &str) -> f64 {
        let c = self.count(i, j) as f64;
        if c == 0.0 {
            return 0.0;
        }
        let denom = match self.normalization {
            Normalization::AsPrinted => self.row_sum(i),
            Normalization::Transposed => self.row_sum(j),
        } as f64;
        if denom == 0.0 {
            0.0
        } else {
            c / denom
        }
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn n_forms(&self) -> usize {
        self.row_sums.len()
    }

    /// Serialize as TSV: `form_i  form_j  count  p(i|j)  p(j|i)`, one line
    /// per unordered pair.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for ((i, j), &c) in &self.counts {
            if i > j {
                continue;
            }
            writeln!(
                w,
                "{i}\t{j}\t{c}\t{}\t{}",
                self.p_i_given_j(i, j),
                self.p_i_given_j(j, i)
            )?;
        }
        Ok(())
    }

    /// Rebuild from the TSV written by [`TranslationTable::write_tsv`].
    pub fn from_tsv<R: BufRead>(reader: R, normalization: Normalization) -> Result<Self> {
        let mut table = TranslationTable::new(normalization);
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::parse(lineno, "expected 5 tab-separated fields"));
            }
            let c: u64 = fields[2]
                .parse()
                .map_err(|_| Error::parse(lineno, "count is not an integer"))?;
            for _ in 0..c {
                table.add_pair(fields[0], fields[1]);
            }
        }
        Ok(table)
    }
}

/// s(i, j) = p(i|j) * p(j|i); zero for unseen pairs.
pub fn translation_similarity(i: &str, j: &str, table: &TranslationTable) -> f64 {
    table.p_i_given_j(i, j) * table.p_i_given_j(j, i)
}

/// Run the full alignment stage over a corpus: train both directions,
/// Viterbi-align every pair, symmetrize, extract entity pairs, count.
pub struct AlignmentOutcome {
    pub table: TranslationTable,
    pub forward: LexiconTable,
    pub backward: LexiconTable,
    /// Per pair: symmetrized links, parallel to `corpus.pairs`.
    pub alignments: Vec<AlignmentMatrix>,
}

pub fn align_corpus(
    corpus: &PseudoParallelCorpus,
    iterations: usize,
    null_prob: f64,
    normalization: Normalization,
) -> Result<AlignmentOutcome> {
    let forward = train_ibm1(corpus, iterations, null_prob)?;
    let rev = reversed(corpus);
    let backward = train_ibm1(&rev, iterations, null_prob)?;

    let mut table = TranslationTable::new(normalization);
    let mut alignments = Vec::with_capacity(corpus.pairs.len());
    for (pair, rpair) in corpus.pairs.iter().zip(rev.pairs.iter()) {
        let fwd = viterbi_align(pair, &forward);
        let bwd_t: AlignmentMatrix = viterbi_align(rpair, &backward)
            .into_iter()
            .map(|(i, j)| (j, i))
            .collect();
        let merged = symmetrize_gdfa(&fwd, &bwd_t, pair.src_tokens.len(), pair.tgt_tokens.len());
        for (fi, fj) in extract_entity_pairs(pair, &merged) {
            table.add_pair(&fi, &fj);
        }
        alignments.push(merged);
    }
    Ok(AlignmentOutcome {
        table,
        forward,
        backward,
        alignments,
    })
}
