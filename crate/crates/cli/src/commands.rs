use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use log::{info, warn};
use rayon::prelude::*;

use bccnn::bilingual::{train, BccnnModel, TrainConfig};
use bccnn::corpus::{load_word2vec_text, read_parallel, AlignmentLinks, SentenceIds, Vocabulary};
use bccnn::encoder::{Activation, EncoderConfig, EncoderParams};
use bccnn::gradcheck;
use bccnn::joint::{
    encode_sources, train_nnjm, zero_sentence_vectors, JointConfig, JointModelParams, LogProbMode, NnjmTrainConfig,
    Objective,
};
use bccnn::math::Rng;
use bccnn::scorer::{
    format_nbest_line, load_nbest, monotone_decode, rescore_nbest, write_word_scores, DecoderConfig, Hypothesis,
    LogLinearWeights, NeuralFeature, PhraseTable,
};
use bccnn::snapshot::Snapshot;
use bccnn::synthetic::{generate, CorpusKind, SyntheticConfig};

use crate::args::*;

/// How a command failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, configuration or missing inputs (exit 2).
    Usage(anyhow::Error),
    /// Anything that went wrong while working (exit 1).
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

pub type CmdResult = std::result::Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn require_file(path: &Path) -> std::result::Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(anyhow!("input file not found: {}", path.display())))
    }
}

fn read_lines(path: &Path) -> anyhow::Result<Vec<String>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    BufReader::new(f)
        .lines()
        .collect::<io::Result<_>>()
        .with_context(|| format!("reading {}", path.display()))
}

fn read_input(path: Option<&Path>) -> anyhow::Result<Vec<String>> {
    match path {
        Some(p) => read_lines(p),
        None => Ok(io::stdin().lock().lines().collect::<io::Result<_>>()?),
    }
}

fn tokens(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

fn stdout() -> BufWriter<io::StdoutLock<'static>> {
    BufWriter::new(io::stdout().lock())
}

fn load_bccnn(path: &Path) -> anyhow::Result<BccnnModel<f64>> {
    let snap = Snapshot::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(BccnnModel::from_snapshot(snap)?)
}

fn load_joint(path: &Path) -> anyhow::Result<JointModelParams<f64>> {
    let snap = Snapshot::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(JointModelParams::from_snapshot(snap)?)
}

fn encoder_config(a: &EncoderArgs) -> EncoderConfig {
    EncoderConfig {
        embed_dim: a.embed_dim,
        window: a.window,
        filters: a.filters,
        chunks: a.chunks,
        hidden: a.hidden,
        dropout: a.dropout,
        projection_activation: match a.projection {
            ProjectionArg::Relu => Activation::Relu,
            ProjectionArg::Identity => Activation::Identity,
        },
        init_bias: a.init_bias,
        freeze_embeddings: a.freeze_embeddings,
    }
}

fn print_settings(pairs: &[(&str, String)]) -> io::Result<()> {
    let mut out = stdout();
    for (k, v) in pairs {
        writeln!(out, "{k} = {v}")?;
    }
    out.flush()
}

pub fn train_encoder(a: &TrainEncoderArgs) -> CmdResult {
    let enc = encoder_config(&a.encoder);
    let cfg = TrainConfig {
        margin: a.margin,
        l2: a.lambda,
        lr: a.lr,
        epochs: a.epochs,
        batch: a.batch,
        negatives: a.negatives,
        source_negatives: a.source_negatives,
        seed: a.seed,
        heldout_fraction: a.heldout,
        distractors: a.distractors,
    };
    enc.validate().map_err(usage)?;
    cfg.validate().map_err(usage)?;
    if a.print_config {
        print_settings(&[
            ("embed-dim", enc.embed_dim.to_string()),
            ("window", enc.window.to_string()),
            ("filters", enc.filters.to_string()),
            ("chunks", enc.chunks.to_string()),
            ("hidden", enc.hidden.to_string()),
            ("dropout", enc.dropout.to_string()),
            ("margin", cfg.margin.to_string()),
            ("lambda", cfg.l2.to_string()),
            ("lr", cfg.lr.to_string()),
            ("epochs", cfg.epochs.to_string()),
            ("batch", cfg.batch.to_string()),
            ("negatives", cfg.negatives.to_string()),
            ("seed", cfg.seed.to_string()),
        ])?;
        return Ok(());
    }
    require_file(&a.corpus.src)?;
    require_file(&a.corpus.tgt)?;
    for p in [&a.encoder.src_embeddings, &a.encoder.tgt_embeddings].into_iter().flatten() {
        require_file(p)?;
    }
    let out = a.out.as_ref().ok_or_else(|| usage(anyhow!("--out is required")))?;
    info!("encoder config: {enc:?}");

    let src = read_lines(&a.corpus.src)?;
    let tgt = read_lines(&a.corpus.tgt)?;
    let sv = Vocabulary::build_from_lines(src.iter().map(String::as_str), a.encoder.vocab_size)?;
    let tv = Vocabulary::build_from_lines(tgt.iter().map(String::as_str), a.encoder.vocab_size)?;
    let corpus = read_parallel(&a.corpus.src, &a.corpus.tgt, None, &sv, &tv)?;
    info!("{} pairs, vocabularies {} / {}", corpus.len(), sv.len(), tv.len());

    let mut rng = Rng::new(a.seed);
    let mut tower = |vocab: Vocabulary, path: &Option<PathBuf>| -> anyhow::Result<EncoderParams<f64>> {
        match path {
            Some(p) => {
                let (table, report) = load_word2vec_text(p, vocab, enc.embed_dim, &mut rng)?;
                info!("{}: {} vectors loaded, {} initialized randomly", p.display(), report.found, report.missing);
                for w in &report.warnings {
                    warn!("{w}");
                }
                Ok(EncoderParams::init(&enc, table, &mut rng)?)
            }
            None => Ok(EncoderParams::random(&enc, vocab, &mut rng)?),
        }
    };
    let source = tower(sv, &a.encoder.src_embeddings)?;
    let target = tower(tv, &a.encoder.tgt_embeddings)?;
    let mut model = BccnnModel::new(source, target)?;

    let mut log = stdout();
    train(&mut model, &corpus, &cfg, |e| {
        let _ = writeln!(log, "{e}").and_then(|_| log.flush());
    })?;
    model.to_snapshot().save(out)?;
    info!("wrote {}", out.display());
    Ok(())
}

pub fn train_nnjm_cmd(a: &TrainNnjmArgs) -> CmdResult {
    let jc = JointConfig {
        order: a.order,
        window: a.source_window,
        embed_dim: a.embed_dim,
        hidden: a.hidden,
        source_input_vocab: a.source_vocab,
        target_input_vocab: a.target_vocab,
        output_vocab: a.output_vocab,
    };
    let cfg = NnjmTrainConfig {
        objective: match a.objective {
            ObjectiveArg::Nce => Objective::Nce,
            ObjectiveArg::Softmax => Objective::Softmax,
        },
        kappa: a.kappa,
        noise_exponent: a.noise_exponent,
        redraw_gold: a.redraw_gold,
        lr: a.lr,
        lr_decay: a.lr_decay,
        epochs: a.epochs,
        batch: a.batch,
        l2: a.lambda,
        seed: a.seed,
        heldout_fraction: a.heldout,
        ..NnjmTrainConfig::default()
    };
    jc.validate().map_err(usage)?;
    cfg.validate().map_err(usage)?;
    require_file(&a.corpus.src)?;
    require_file(&a.corpus.tgt)?;
    require_file(&a.align)?;
    if let Some(p) = &a.encoder {
        require_file(p)?;
    }

    let src = read_lines(&a.corpus.src)?;
    let tgt = read_lines(&a.corpus.tgt)?;
    let sv = Vocabulary::build_from_lines(src.iter().map(String::as_str), a.source_vocab)?;
    let tv = Vocabulary::build_from_lines(tgt.iter().map(String::as_str), a.target_vocab.max(a.output_vocab))?;
    let corpus = read_parallel(&a.corpus.src, &a.corpus.tgt, Some(&a.align), &sv, &tv)?;

    let (sentences, dim) = match &a.encoder {
        Some(p) => {
            let encoder = load_bccnn(p)?.source;
            let ids = src
                .iter()
                .map(|l| SentenceIds::from_words(encoder.vocab(), l))
                .collect::<bccnn::Result<Vec<_>>>()?;
            let refs: Vec<&SentenceIds> = ids.iter().collect();
            (encode_sources(&encoder, &refs)?, encoder.output_dim())
        }
        None => (zero_sentence_vectors(corpus.len(), 0), 0),
    };
    let mut model = JointModelParams::random(&jc, sv, tv, dim, &mut Rng::new(a.seed))?;
    let mut log = stdout();
    train_nnjm(&mut model, &corpus, &sentences, &cfg, |e| {
        let _ = writeln!(log, "{e}").and_then(|_| log.flush());
    })?;
    model.to_snapshot().save(&a.out)?;
    info!("wrote {}", a.out.display());
    Ok(())
}

pub fn embed(a: &EmbedArgs) -> CmdResult {
    require_file(&a.model)?;
    if let Some(p) = &a.input {
        require_file(p)?;
    }
    let model = load_bccnn(&a.model)?;
    let tower = match a.side {
        SideArg::Source => &model.source,
        SideArg::Target => &model.target,
    };
    let lines = read_input(a.input.as_deref())?;
    let vectors = lines
        .par_iter()
        .enumerate()
        .map(|(n, l)| {
            let ids = SentenceIds::from_words(tower.vocab(), l).with_context(|| format!("input line {}", n + 1))?;
            let v = if a.shared { tower.encode_shared(&ids)? } else { tower.encode(&ids)? };
            Ok(v.into_vec())
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut out = stdout();
    for v in vectors {
        let text: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
        writeln!(out, "{}", text.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

struct Neural {
    model: JointModelParams<f64>,
    encoder: Option<EncoderParams<f64>>,
    mode: LogProbMode,
}

impl Neural {
    fn load(a: &NeuralArgs) -> std::result::Result<Option<Self>, Failure> {
        let Some(path) = &a.nnjm else {
            if a.encoder.is_some() {
                return Err(usage(anyhow!("--encoder needs --nnjm")));
            }
            return Ok(None);
        };
        require_file(path)?;
        if let Some(p) = &a.encoder {
            require_file(p)?;
        }
        let model = load_joint(path)?;
        let encoder = a.encoder.as_deref().map(load_bccnn).transpose()?.map(|m| m.source);
        let mode = match a.mode {
            ModeArg::Exact => LogProbMode::Exact,
            ModeArg::SelfNorm => LogProbMode::SelfNorm,
        };
        Ok(Some(Neural { model, encoder, mode }))
    }

    fn feature(&self) -> bccnn::Result<NeuralFeature<'_, f64>> {
        NeuralFeature::new(&self.model, self.encoder.as_ref(), self.mode)
    }
}

pub fn score(a: &ScoreArgs) -> CmdResult {
    require_file(&a.corpus.src)?;
    require_file(&a.corpus.tgt)?;
    require_file(&a.align)?;
    let neural = Neural::load(&a.neural)?.ok_or_else(|| usage(anyhow!("--nnjm is required")))?;
    let feature = neural.feature()?;
    let src = read_lines(&a.corpus.src)?;
    let tgt = read_lines(&a.corpus.tgt)?;
    let align = read_lines(&a.align)?;
    if src.len() != tgt.len() || src.len() != align.len() {
        return Err(anyhow!("line counts differ: {} source, {} target, {} alignment", src.len(), tgt.len(), align.len()).into());
    }
    let scored = (0..src.len())
        .into_par_iter()
        .map(|i| {
            let links = AlignmentLinks::parse(&align[i])
                .map_err(|m| anyhow!("{}:{}: {m}", a.align.display(), i + 1))?;
            let prepared = feature.prepare(&tokens(&src[i]))?;
            let words = tokens(&tgt[i]);
            let score = feature.score_words(&prepared, &words, &links)?;
            Ok((words, score))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut out = stdout();
    for (i, (words, score)) in scored.iter().enumerate() {
        if a.totals {
            writeln!(out, "{i}\t{}", score.total)?;
        } else {
            write_word_scores(&mut out, i, words, score)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn decode(a: &DecodeArgs) -> CmdResult {
    require_file(&a.phrase_table)?;
    require_file(&a.weights)?;
    if let Some(p) = &a.input {
        require_file(p)?;
    }
    if a.beam == 0 || a.nbest == 0 {
        return Err(usage(anyhow!("beam and nbest must be positive")));
    }
    let neural = Neural::load(&a.neural)?;
    let feature = neural.as_ref().map(Neural::feature).transpose()?;
    let table = PhraseTable::load(&a.phrase_table)?;
    let weights = LogLinearWeights::load(&a.weights)?;
    let cfg = DecoderConfig {
        beam: a.beam,
        passthrough: a.passthrough,
        nbest: a.nbest,
    };
    let lines = read_input(a.input.as_deref())?;
    let results = lines
        .par_iter()
        .enumerate()
        .map(|(i, l)| {
            monotone_decode(&tokens(l), &table, &weights, &cfg, feature.as_ref())
                .with_context(|| format!("sentence {i}"))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut out = stdout();
    for (i, ranked) in results.iter().enumerate() {
        if a.nbest == 1 {
            writeln!(out, "{}", ranked[0].hypothesis.words.join(" "))?;
        } else {
            for r in ranked {
                writeln!(out, "{}", format_nbest_line(i, &r.hypothesis, r.score))?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn rescore(a: &RescoreArgs) -> CmdResult {
    require_file(&a.nbest)?;
    require_file(&a.src)?;
    require_file(&a.weights)?;
    let neural = Neural::load(&a.neural)?;
    let feature = neural.as_ref().map(Neural::feature).transpose()?;
    let weights = LogLinearWeights::load(&a.weights)?;
    let src = read_lines(&a.src)?;
    let mut groups: BTreeMap<usize, Vec<Hypothesis>> = BTreeMap::new();
    for e in load_nbest(&a.nbest)? {
        groups.entry(e.sent_id).or_default().push(e.hypothesis);
    }
    let mut out = stdout();
    for (id, hyps) in groups {
        let source = src
            .get(id)
            .ok_or_else(|| anyhow!("n-best sentence id {id} has no source line ({} lines)", src.len()))?;
        for r in rescore_nbest(&tokens(source), hyps, &weights, feature.as_ref())? {
            writeln!(out, "{}", format_nbest_line(id, &r.hypothesis, r.score))?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn grad_check(a: &GradCheckArgs) -> CmdResult {
    if !(a.tolerance > 0.0) {
        return Err(usage(anyhow!("tolerance must be positive")));
    }
    let reports = gradcheck::suites::all(a.seed);
    let mut out = stdout();
    let mut failed = 0;
    for r in &reports {
        let ok = r.passed(a.tolerance);
        failed += usize::from(!ok);
        writeln!(out, "{} {r}", if ok { "PASS" } else { "FAIL" })?;
    }
    out.flush()?;
    if failed > 0 {
        return Err(anyhow!("{failed} of {} gradient groups failed", reports.len()).into());
    }
    Ok(())
}

pub fn gen_synthetic(a: &GenSyntheticArgs) -> CmdResult {
    let kind = match a.kind {
        KindArg::Dictionary => CorpusKind::Dictionary,
        KindArg::Long => CorpusKind::Long,
        KindArg::Disambiguation => CorpusKind::Disambiguation,
        KindArg::Noisy => CorpusKind::Noisy,
    };
    let mut cfg = SyntheticConfig::new(kind, a.pairs, a.seed);
    if let Some(v) = a.vocab {
        cfg.vocab = v;
    }
    if cfg.vocab == 0 || a.pairs == 0 {
        return Err(usage(anyhow!("pairs and vocab must be positive")));
    }
    fs::create_dir_all(&a.out_dir)?;
    generate(&cfg, a.stream)?.write(&a.out_dir, &a.prefix)?;
    info!("wrote {} pairs to {}", a.pairs, a.out_dir.display());
    Ok(())
}

pub fn eval_retrieval(a: &EvalRetrievalArgs) -> CmdResult {
    require_file(&a.model)?;
    require_file(&a.corpus.src)?;
    require_file(&a.corpus.tgt)?;
    let model = load_bccnn(&a.model)?;
    let pairs = read_parallel(&a.corpus.src, &a.corpus.tgt, None, model.source.vocab(), model.target.vocab())?;
    let p = model.retrieval_eval(&pairs, a.distractors, a.seed)?;
    let mut out = stdout();
    writeln!(out, "precision@1\t{p:.6}")?;
    out.flush()?;
    Ok(())
}
