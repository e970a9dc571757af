//! Translation scoring with the joint model as a log-linear feature:
//! hypothesis scoring, n-best rescoring and a monotone phrase-based beam
//! decoder.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use log::{debug, warn};
use rayon::prelude::*;

use crate::corpus::{AlignmentLinks, SentenceIds, UNK};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::joint::{affiliations, JointModelParams, LogProbMode};
use crate::math::DenseVector;
use crate::scalar::Scalar;

/// Name of the joint-model feature in weight files.
pub const NNJM_FEATURE: &str = "nnjm";

/// Features produced by [`monotone_decode`], in this order. `lm` is a slot
/// for an external language model and is always 0 here.
pub const DECODER_FEATURES: [&str; 5] = [NNJM_FEATURE, "phrase", "word_penalty", "unk", "lm"];

/// A target candidate with its word alignment and feature values.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub words: Vec<String>,
    /// `(source, target)` links.
    pub alignment: AlignmentLinks,
    pub features: Vec<f64>,
}

/// Per-feature weights of the log-linear model.
#[derive(Clone, Debug, PartialEq)]
pub struct LogLinearWeights {
    names: Vec<String>,
    values: Vec<f64>,
}

impl LogLinearWeights {
    pub fn new(pairs: Vec<(String, f64)>) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for (i, (name, v)) in pairs.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("weight {name:?}")));
            }
            if seen.insert(name.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate weight {name:?}")));
            }
        }
        let (names, values) = pairs.into_iter().unzip();
        Ok(LogLinearWeights { names, values })
    }

    /// One `name<TAB>value` per line; blank lines are skipped.
    pub fn read<R: BufRead>(reader: R, path: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(name), Some(value), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::parse(path, n + 1, "expected \"name<TAB>value\""));
            };
            let value: f64 = value
                .parse()
                .map_err(|_| Error::parse(path, n + 1, format!("bad weight {value:?}")))?;
            pairs.push((name.to_string(), value));
        }
        Self::new(pairs).map_err(|e| Error::parse(path, 0, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?), path)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Weight of `name`, 0 when absent.
    pub fn get(&self, name: &str) -> f64 {
        self.index_of(name).map_or(0.0, |i| self.values[i])
    }

    pub fn dot(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.values.len() {
            return Err(Error::dims("log-linear score", self.values.len(), features.len()));
        }
        Ok(features.iter().zip(&self.values).map(|(f, w)| f * w).sum())
    }

    pub fn scaled(&self, c: f64) -> Self {
        LogLinearWeights {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }
}

/// Joint-model log-probability of a target sentence, one term per word.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisScore {
    pub total: f64,
    pub per_word: Vec<f64>,
}

/// A source sentence mapped into the joint model's vocabulary with its
/// sentence vector computed once.
#[derive(Clone, Debug)]
pub struct PreparedSource<T> {
    pub words: Vec<String>,
    pub ids: SentenceIds,
    pub sentence: Arc<DenseVector<T>>,
}

/// The joint model as a feature function. Without an encoder the sentence
/// vector is all zeros.
#[derive(Clone, Copy, Debug)]
pub struct NeuralFeature<'a, T> {
    pub model: &'a JointModelParams<T>,
    pub encoder: Option<&'a EncoderParams<T>>,
    pub mode: LogProbMode,
}

impl<'a, T: Scalar> NeuralFeature<'a, T> {
    pub fn new(model: &'a JointModelParams<T>, encoder: Option<&'a EncoderParams<T>>, mode: LogProbMode) -> Result<Self> {
        if let Some(e) = encoder {
            if e.output_dim() != model.sentence_dim() {
                return Err(Error::dims("encoder output vs joint sentence slot", model.sentence_dim(), e.output_dim()));
            }
        }
        Ok(NeuralFeature { model, encoder, mode })
    }

    pub fn prepare(&self, source: &[String]) -> Result<PreparedSource<T>> {
        let tokens: Vec<&str> = source.iter().map(String::as_str).collect();
        let ids = SentenceIds::new(self.model.source_vocab().encode(&tokens))?;
        let sentence = match self.encoder {
            Some(e) => Arc::new(e.encode(&SentenceIds::new(e.vocab().encode(&tokens))?)?),
            None => Arc::new(DenseVector::zeros(self.model.sentence_dim())),
        };
        Ok(PreparedSource {
            words: source.to_vec(),
            ids,
            sentence,
        })
    }

    fn target_ids(&self, words: &[String]) -> Vec<u32> {
        let vocab = self.model.target_vocab();
        words.iter().map(|w| vocab.id(w).unwrap_or(UNK)).collect()
    }

    /// Log-probability of each target word given its context.
    pub fn score_words(&self, source: &PreparedSource<T>, words: &[String], alignment: &AlignmentLinks) -> Result<HypothesisScore> {
        if words.is_empty() {
            warn!("empty hypothesis scored as 0");
            return Ok(HypothesisScore { total: 0.0, per_word: Vec::new() });
        }
        alignment
            .validate(source.ids.len(), words.len())
            .map_err(Error::InvalidArgument)?;
        let target = SentenceIds::new(self.target_ids(words))?;
        let aff = affiliations(alignment, source.ids.len(), words.len());
        let per_word = (0..words.len())
            .map(|i| {
                let ctx = self.model.context_at(&source.ids, &target, &aff, i, &source.sentence)?;
                self.model.log_prob(&ctx, self.mode)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(HypothesisScore {
            total: per_word.iter().sum(),
            per_word,
        })
    }

    /// Scores only positions `from..` of `words`, with affiliations taken
    /// from the alignment as known so far.
    fn score_suffix(&self, source: &PreparedSource<T>, target: &SentenceIds, alignment: &AlignmentLinks, from: usize) -> Result<f64> {
        let aff = affiliations(alignment, source.ids.len(), target.len());
        (from..target.len())
            .map(|i| {
                let ctx = self.model.context_at(&source.ids, target, &aff, i, &source.sentence)?;
                self.model.log_prob(&ctx, self.mode)
            })
            .sum()
    }
}

/// Joint-model score of `hyp` as a translation of `source`.
pub fn score_hypothesis<T: Scalar>(feature: &NeuralFeature<'_, T>, source: &[String], hyp: &Hypothesis) -> Result<HypothesisScore> {
    let prepared = feature.prepare(source)?;
    feature.score_words(&prepared, &hyp.words, &hyp.alignment)
}

/// Writes `sent_id<TAB>i<TAB>gold<TAB>logprob` for every word.
pub fn write_word_scores<W: Write>(out: &mut W, sent_id: usize, words: &[String], score: &HypothesisScore) -> Result<()> {
    for (i, (w, lp)) in words.iter().zip(&score.per_word).enumerate() {
        writeln!(out, "{sent_id}\t{i}\t{w}\t{lp}")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedHypothesis {
    /// Position in the input list.
    pub index: usize,
    pub score: f64,
    pub hypothesis: Hypothesis,
}

/// Reranks candidates by `weights · features`, best first; ties keep input
/// order. When `neural` is given and the weights name an `nnjm` feature,
/// that slot is filled with the joint-model score first.
pub fn rescore_nbest<T: Scalar>(
    source: &[String],
    candidates: Vec<Hypothesis>,
    weights: &LogLinearWeights,
    neural: Option<&NeuralFeature<'_, T>>,
) -> Result<Vec<RankedHypothesis>> {
    if let Some(bad) = candidates.iter().find(|h| h.features.len() != weights.len()) {
        return Err(Error::dims("n-best features", weights.len(), bad.features.len()));
    }
    let slot = weights.index_of(NNJM_FEATURE);
    let candidates = match (neural, slot) {
        (Some(nf), Some(k)) => {
            let prepared = nf.prepare(source)?;
            candidates
                .into_par_iter()
                .map(|mut h| {
                    h.features[k] = nf.score_words(&prepared, &h.words, &h.alignment)?.total;
                    Ok(h)
                })
                .collect::<Result<Vec<_>>>()?
        }
        _ => candidates,
    };
    let mut ranked = candidates
        .into_iter()
        .enumerate()
        .map(|(index, hypothesis)| {
            Ok(RankedHypothesis {
                index,
                score: weights.dot(&hypothesis.features)?,
                hypothesis,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(ranked)
}

/// One n-best line.
#[derive(Clone, Debug, PartialEq)]
pub struct NbestEntry {
    pub sent_id: usize,
    pub hypothesis: Hypothesis,
}

fn split_fields(line: &str) -> Vec<&str> {
    line.split("|||").map(str::trim).collect()
}

/// Parses `sent_id ||| target tokens ||| alignment ||| f1 f2 …` lines. A
/// trailing `||| score` field, as written by the decoder, is ignored.
pub fn read_nbest<R: BufRead>(reader: R, path: &Path) -> Result<Vec<NbestEntry>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::parse(path, n + 1, msg);
        let fields = split_fields(&line);
        if !(4..=5).contains(&fields.len()) {
            return Err(err(format!("expected 4 or 5 fields separated by |||, found {}", fields.len())));
        }
        let sent_id = fields[0].parse().map_err(|_| err(format!("bad sentence id {:?}", fields[0])))?;
        let words: Vec<String> = fields[1].split_whitespace().map(String::from).collect();
        let alignment = AlignmentLinks::parse(fields[2]).map_err(err)?;
        let features = fields[3]
            .split_whitespace()
            .map(|f| f.parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| err(format!("bad feature list {:?}", fields[3])))?;
        if let Some(&(_, t)) = alignment.links().iter().find(|l| l.1 >= words.len()) {
            return Err(err(format!("link target {t} outside a {}-word hypothesis", words.len())));
        }
        out.push(NbestEntry {
            sent_id,
            hypothesis: Hypothesis { words, alignment, features },
        });
    }
    Ok(out)
}

pub fn load_nbest(path: &Path) -> Result<Vec<NbestEntry>> {
    read_nbest(BufReader::new(File::open(path)?), path)
}

/// `sent_id ||| tokens ||| alignment ||| features ||| score`.
pub fn format_nbest_line(sent_id: usize, hyp: &Hypothesis, score: f64) -> String {
    let features: Vec<String> = hyp.features.iter().map(|f| f.to_string()).collect();
    format!(
        "{sent_id} ||| {} ||| {} ||| {} ||| {score}",
        hyp.words.join(" "),
        hyp.alignment,
        features.join(" ")
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhraseEntry {
    pub target: Vec<String>,
    /// Phrase-internal `(source, target)` links.
    pub alignment: AlignmentLinks,
    pub logprob: f64,
}

/// Source phrase → candidate translations, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhraseTable {
    entries: BTreeMap<Vec<String>, Vec<PhraseEntry>>,
    max_len: usize,
}

impl PhraseTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, source: Vec<String>, entry: PhraseEntry) -> Result<()> {
        if source.is_empty() || entry.target.is_empty() {
            return Err(Error::InvalidArgument("phrase pairs must be non-empty on both sides".into()));
        }
        entry
            .alignment
            .validate(source.len(), entry.target.len())
            .map_err(Error::InvalidArgument)?;
        if !entry.logprob.is_finite() {
            return Err(Error::NonFinite(format!("phrase log-probability for {:?}", source.join(" "))));
        }
        self.max_len = self.max_len.max(source.len());
        self.entries.entry(source).or_default().push(entry);
        Ok(())
    }

    /// `src ||| tgt ||| i-j pairs ||| logprob` per line.
    pub fn read<R: BufRead>(reader: R, path: &Path) -> Result<Self> {
        let mut table = PhraseTable::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::parse(path, n + 1, msg);
            let fields = split_fields(&line);
            if fields.len() != 4 {
                return Err(err(format!("expected 4 fields separated by |||, found {}", fields.len())));
            }
            let source: Vec<String> = fields[0].split_whitespace().map(String::from).collect();
            let target: Vec<String> = fields[1].split_whitespace().map(String::from).collect();
            let alignment = AlignmentLinks::parse(fields[2]).map_err(err)?;
            let logprob = fields[3].parse().map_err(|_| err(format!("bad log-probability {:?}", fields[3])))?;
            table
                .insert(source, PhraseEntry { target, alignment, logprob })
                .map_err(|e| err(e.to_string()))?;
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?), path)
    }

    pub fn lookup(&self, source: &[String]) -> &[PhraseEntry] {
        self.entries.get(source).map_or(&[], Vec::as_slice)
    }

    pub fn max_phrase_len(&self) -> usize {
        self.max_len
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    /// Hypotheses kept per stack.
    pub beam: usize,
    /// Translate source words with no table entry as themselves, firing
    /// the `unk` feature once per word.
    pub passthrough: bool,
    /// Complete hypotheses returned.
    pub nbest: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            beam: 100,
            passthrough: true,
            nbest: 1,
        }
    }
}

#[derive(Clone, Debug)]
struct Partial {
    covered: usize,
    words: Vec<String>,
    links: Vec<(usize, usize)>,
    phrase: f64,
    unk: usize,
    neural: f64,
    score: f64,
    /// Choice made at each step, for deterministic tie-breaking.
    path: Vec<(usize, usize)>,
}

/// Candidate expansions of `source[start..]`: `(length, entry, is_unk)`.
fn options<'t>(source: &[String], start: usize, table: &'t PhraseTable, passthrough: &'t [PhraseEntry]) -> Vec<(usize, &'t PhraseEntry, bool)> {
    let mut out = Vec::new();
    for len in 1..=table.max_phrase_len().min(source.len() - start) {
        for e in table.lookup(&source[start..start + len]) {
            out.push((len, e, false));
        }
    }
    if let Some(e) = passthrough.get(start).filter(|_| out.is_empty()) {
        if !e.target.is_empty() {
            out.push((1, e, true));
        }
    }
    out
}

/// Left-to-right phrase-based search. Stack `j` holds partial hypotheses
/// covering the first `j` source words, pruned to `beam` by partial
/// log-linear score; phrase target words are scored one at a time with the
/// joint model as they are appended. Complete hypotheses are re-scored with
/// [`score_hypothesis`] and returned best first; equal scores fall back to
/// the earliest choice sequence.
pub fn monotone_decode<T: Scalar>(
    source: &[String],
    table: &PhraseTable,
    weights: &LogLinearWeights,
    config: &DecoderConfig,
    neural: Option<&NeuralFeature<'_, T>>,
) -> Result<Vec<RankedHypothesis>> {
    if source.is_empty() {
        return Err(Error::InvalidArgument("cannot decode an empty sentence".into()));
    }
    if config.beam == 0 || config.nbest == 0 {
        return Err(Error::InvalidArgument("beam and n-best sizes must be positive".into()));
    }
    let w_nn = weights.get(NNJM_FEATURE);
    let w_phrase = weights.get("phrase");
    let w_wp = weights.get("word_penalty");
    let w_unk = weights.get("unk");
    let neural = neural.filter(|_| w_nn != 0.0);
    let prepared = neural.map(|nf| nf.prepare(source)).transpose()?;
    let target_vocab = neural.map(|nf| nf.model.target_vocab());

    let passthrough: Vec<PhraseEntry> = source
        .iter()
        .map(|w| PhraseEntry {
            target: if config.passthrough { vec![w.clone()] } else { Vec::new() },
            alignment: AlignmentLinks::new(vec![(0, 0)]),
            logprob: 0.0,
        })
        .collect();

    let n = source.len();
    let mut stacks: Vec<Vec<Partial>> = vec![Vec::new(); n + 1];
    stacks[0].push(Partial {
        covered: 0,
        words: Vec::new(),
        links: Vec::new(),
        phrase: 0.0,
        unk: 0,
        neural: 0.0,
        score: 0.0,
        path: Vec::new(),
    });
    for j in 0..n {
        let mut stack = std::mem::take(&mut stacks[j]);
        stack.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.path.cmp(&b.path)));
        stack.truncate(config.beam);
        let opts = options(source, j, table, &passthrough);
        for hyp in &stack {
            for (k, &(len, entry, is_unk)) in opts.iter().enumerate() {
                let mut next = hyp.clone();
                let t0 = next.words.len();
                next.covered = j + len;
                next.words.extend(entry.target.iter().cloned());
                next.links.extend(entry.alignment.offset(j, t0));
                next.phrase += entry.logprob;
                next.unk += usize::from(is_unk);
                if let (Some(nf), Some(p), Some(v)) = (neural, &prepared, target_vocab) {
                    let ids = next.words.iter().map(|w| v.id(w).unwrap_or(UNK)).collect();
                    let target = SentenceIds::new(ids)?;
                    let links = AlignmentLinks::new(next.links.clone());
                    next.neural += nf.score_suffix(p, &target, &links, t0)?;
                }
                next.score = w_nn * next.neural
                    + w_phrase * next.phrase
                    + w_wp * next.words.len() as f64
                    + w_unk * next.unk as f64;
                next.path.push((len, k));
                stacks[j + len].push(next);
            }
        }
        debug!("stack {j}: {} hypotheses expanded", stack.len());
    }

    let mut complete = std::mem::take(&mut stacks[n]);
    if complete.is_empty() {
        let gap = (0..n).rev().find(|&j| !stacks[j].is_empty()).unwrap_or(0);
        let gap = (gap..n)
            .find(|&j| options(source, j, table, &passthrough).is_empty())
            .unwrap_or(gap);
        return Err(Error::Uncoverable { position: gap });
    }
    complete.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.path.cmp(&b.path)));
    complete.truncate(config.beam);

    let mut ranked = complete
        .into_iter()
        .map(|p| {
            let alignment = AlignmentLinks::new(p.links);
            let nn = match (neural, &prepared) {
                (Some(nf), Some(src)) => nf.score_words(src, &p.words, &alignment)?.total,
                _ => 0.0,
            };
            let features = vec![nn, p.phrase, p.words.len() as f64, p.unk as f64, 0.0];
            let score = w_nn * nn + w_phrase * p.phrase + w_wp * features[2] + w_unk * features[3];
            Ok((p.path, RankedHypothesis {
                index: 0,
                score,
                hypothesis: Hypothesis { words: p.words, alignment, features },
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then_with(|| a.0.cmp(&b.0)));
    Ok(ranked
        .into_iter()
        .take(config.nbest)
        .enumerate()
        .map(|(i, (_, mut r))| {
            r.index = i;
            r
        })
        .collect())
}
