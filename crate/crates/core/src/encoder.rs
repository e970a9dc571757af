//! Chunk-based convolutional sentence encoder.
//!
//! A sentence is embedded, convolved with `L` width-`h` filters (Relu),
//! each feature map is split into `C` contiguous chunks and max-pooled per
//! chunk, and the resulting `L·C` vector passes through dropout and two
//! Relu layers to give the sentence vector `O`. An extra Relu layer maps
//! `O` into the space shared with the other language (`O'`).

use std::collections::BTreeMap;
use std::ops::Range;

use crate::corpus::{EmbeddingTable, SentenceIds, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::math::{decay_slice, relu_in_place, sgd_slice, xavier_init, DenseMatrix, DenseVector, Rng};
use crate::scalar::Scalar;
use crate::snapshot::Snapshot;

/// Affine layer `W·x + b` with `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: DenseMatrix<T>,
    pub bias: DenseVector<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: DenseMatrix<T>, bias: DenseVector<T>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::dims("Linear::new", weight.rows(), bias.len()));
        }
        Ok(Linear { weight, bias })
    }

    pub fn xavier(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        Linear {
            weight: xavier_init(outputs, inputs, rng),
            bias: DenseVector::zeros(outputs),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            weight: DenseMatrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: DenseVector::zeros(self.bias.len()),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub(crate) fn forward(&self, x: &[T]) -> Vec<T> {
        let mut out = self.bias.as_slice().to_vec();
        let mut tmp = vec![T::zero(); self.outputs()];
        self.weight.gemv(x, &mut tmp);
        for (o, t) in out.iter_mut().zip(tmp) {
            *o += t;
        }
        out
    }

    /// Accumulates parameter gradients for upstream `gz` at input `x` and
    /// returns the gradient with respect to `x`.
    pub(crate) fn backward(&self, x: &[T], gz: &[T], grad: &mut Linear<T>) -> Vec<T> {
        grad.weight.add_outer(T::one(), gz, x);
        for (b, &g) in grad.bias.as_mut_slice().iter_mut().zip(gz) {
            *b += g;
        }
        let mut gx = vec![T::zero(); self.inputs()];
        self.weight.gemv_t_acc(gz, &mut gx);
        gx
    }

    pub(crate) fn add_scaled(&mut self, other: &Linear<T>, s: T) {
        crate::math::axpy(s, other.weight.as_slice(), self.weight.as_mut_slice());
        crate::math::axpy(s, other.bias.as_slice(), self.bias.as_mut_slice());
    }

    pub(crate) fn sgd(&mut self, grad: &Linear<T>, lr: T, l2: T) {
        sgd_slice(self.weight.as_mut_slice(), grad.weight.as_slice(), lr, l2);
        sgd_slice(self.bias.as_mut_slice(), grad.bias.as_slice(), lr, l2);
    }

    pub fn sq_norm(&self) -> T {
        self.weight.sq_norm() + self.bias.sq_norm()
    }

    pub(crate) fn store(&self, snap: &mut Snapshot<T>, name: &str) {
        snap.put_matrix(&format!("{name}.w"), &self.weight);
        snap.put_vector(&format!("{name}.b"), &self.bias);
    }

    pub(crate) fn restore(snap: &mut Snapshot<T>, name: &str) -> Result<Self> {
        let weight = snap.take_matrix(&format!("{name}.w"))?;
        let bias = snap.take_vector(&format!("{name}.b"))?;
        Linear::new(weight, bias)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, v: &mut [T]) {
        if self == Activation::Relu {
            relu_in_place(v);
        }
    }

    /// Gates `g` by the derivative, given the activation's output.
    fn gate<T: Scalar>(self, out: &[T], g: &mut [T]) {
        if self == Activation::Relu {
            for (gi, &o) in g.iter_mut().zip(out) {
                if o <= T::zero() {
                    *gi = T::zero();
                }
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Snapshot(format!("unknown activation {other:?}"))),
        }
    }
}

/// Filter bank: row `l` of `filters` is filter `l` flattened over an
/// `h × k` window (word-major).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub window: usize,
    pub filters: DenseMatrix<T>,
    pub bias: DenseVector<T>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(window: usize, filters: DenseMatrix<T>, bias: DenseVector<T>) -> Result<Self> {
        if window == 0 || filters.rows() == 0 {
            return Err(Error::InvalidArgument("convolution needs h >= 1 and L >= 1".into()));
        }
        if !filters.cols().is_multiple_of(window) {
            return Err(Error::dims("ConvLayer::new", format!("multiple of {window}"), filters.cols()));
        }
        if bias.len() != filters.rows() {
            return Err(Error::dims("ConvLayer::new", filters.rows(), bias.len()));
        }
        Ok(ConvLayer { window, filters, bias })
    }

    pub fn num_filters(&self) -> usize {
        self.filters.rows()
    }

    /// Word dimension the filters expect.
    pub fn word_dim(&self) -> usize {
        self.filters.cols() / self.window
    }
}

/// Hyperparameters of one encoder tower.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub window: usize,
    pub filters: usize,
    pub chunks: usize,
    /// Width of both FC layers and of the shared-space projection.
    pub hidden: usize,
    pub dropout: f64,
    pub projection_activation: Activation,
    /// Starting value of every bias. A small positive value keeps ReLU
    /// units from starting dead.
    pub init_bias: f64,
    pub freeze_embeddings: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embed_dim: 192,
            window: 3,
            filters: 100,
            chunks: 4,
            hidden: 192,
            dropout: 0.5,
            projection_activation: Activation::Relu,
            init_bias: 0.1,
            freeze_embeddings: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.window == 0 || self.filters == 0 || self.chunks == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument(
                "embed-dim, window, filters, chunks and hidden must all be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !self.init_bias.is_finite() {
            return Err(Error::InvalidArgument(format!("initial bias must be finite, got {}", self.init_bias)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub embeddings: EmbeddingTable<T>,
    pub conv: ConvLayer<T>,
    pub chunks: usize,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub projection: Linear<T>,
    pub dropout: f64,
    pub projection_activation: Activation,
    pub freeze_embeddings: bool,
}

/// Forward-pass mode. Dropout only runs in `Train`.
pub enum Pass<'a> {
    Infer,
    Train(&'a mut Rng),
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct EncoderTrace<T> {
    pub ids: Vec<u32>,
    /// Padded input, `n' × k`.
    pub input: DenseMatrix<T>,
    /// Post-Relu feature maps, one per filter.
    pub feature_maps: Vec<Vec<T>>,
    /// Absolute argmax position per (filter, chunk), filter-major.
    pub argmax: Vec<usize>,
    pub pooled: Vec<T>,
    /// Per-unit dropout multiplier (0 or `1/(1-rate)`); `None` in infer mode.
    pub dropout_mask: Option<Vec<T>>,
    pub dropped: Vec<T>,
    pub hidden1: Vec<T>,
    /// The sentence vector `O`.
    pub output: Vec<T>,
    /// `O'` when the shared-space projection was applied.
    pub projected: Option<Vec<T>>,
}

/// Gradients matching [`EncoderParams`]; embedding rows are sparse.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderGrads<T> {
    pub conv_filters: DenseMatrix<T>,
    pub conv_bias: DenseVector<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub projection: Linear<T>,
    pub embeddings: BTreeMap<u32, Vec<T>>,
}

/// Embeds a sentence, right-padding with zero `<pad>` rows up to
/// `max(n, chunks + window - 1)` rows so the feature map has at least
/// `chunks` entries.
pub fn embed_sentence<T: Scalar>(
    s: &SentenceIds,
    emb: &EmbeddingTable<T>,
    window: usize,
    chunks: usize,
) -> DenseMatrix<T> {
    let k = emb.dim();
    let rows = padded_len(s.len(), window, chunks);
    let mut x = DenseMatrix::zeros(rows, k);
    for (r, &id) in s.ids().iter().enumerate() {
        if id != PAD {
            x.row_mut(r).copy_from_slice(emb.row(id));
        }
    }
    x
}

pub fn padded_len(n: usize, window: usize, chunks: usize) -> usize {
    n.max(chunks + window - 1)
}

/// Relu feature maps, one per filter, each of length `rows - h + 1`.
pub fn convolve<T: Scalar>(x: &DenseMatrix<T>, conv: &ConvLayer<T>) -> Result<Vec<Vec<T>>> {
    let h = conv.window;
    let k = x.cols();
    if k != conv.word_dim() {
        return Err(Error::dims("convolve", conv.word_dim(), k));
    }
    if x.rows() < h {
        return Err(Error::InvalidArgument(format!(
            "input has {} rows, shorter than window {h}",
            x.rows()
        )));
    }
    let positions = x.rows() - h + 1;
    let filters = conv.num_filters();
    let mut maps = vec![vec![T::zero(); positions]; filters];
    let mut z = vec![T::zero(); filters];
    let data = x.as_slice();
    for i in 0..positions {
        let window = &data[i * k..(i + h) * k];
        conv.filters.gemv(window, &mut z);
        for (l, map) in maps.iter_mut().enumerate() {
            map[i] = (z[l] + conv.bias[l]).max(T::zero());
        }
    }
    Ok(maps)
}

/// Chunk boundaries for a map of length `len`: the first `chunks - 1`
/// chunks have `len / chunks` entries, the last absorbs the remainder.
pub fn chunk_bounds(len: usize, chunks: usize) -> Result<Vec<Range<usize>>> {
    if chunks == 0 || len < chunks {
        return Err(Error::InvalidArgument(format!(
            "cannot split a feature map of length {len} into {chunks} chunks"
        )));
    }
    let size = len / chunks;
    Ok((0..chunks)
        .map(|c| {
            let start = c * size;
            let end = if c + 1 == chunks { len } else { start + size };
            start..end
        })
        .collect())
}

/// Max of each chunk, with the (first) argmax position of each.
pub fn chunk_max_pool<T: Scalar>(y: &[T], chunks: usize) -> Result<(DenseVector<T>, Vec<usize>)> {
    let bounds = chunk_bounds(y.len(), chunks)?;
    let mut values = Vec::with_capacity(chunks);
    let mut argmax = Vec::with_capacity(chunks);
    for range in bounds {
        let mut best = range.start;
        for i in range {
            if y[i] > y[best] {
                best = i;
            }
        }
        values.push(y[best]);
        argmax.push(best);
    }
    Ok((DenseVector::from(values), argmax))
}

impl<T: Scalar> EncoderParams<T> {
    /// Fresh parameters around an existing embedding table.
    pub fn init(config: &EncoderConfig, embeddings: EmbeddingTable<T>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if embeddings.dim() != config.embed_dim {
            return Err(Error::dims("EncoderParams::init", config.embed_dim, embeddings.dim()));
        }
        let k = config.embed_dim;
        let b = T::of(config.init_bias);
        let mut conv = ConvLayer {
            window: config.window,
            filters: xavier_init(config.filters, config.window * k, rng),
            bias: DenseVector::zeros(config.filters),
        };
        let mut fc1 = Linear::xavier(config.filters * config.chunks, config.hidden, rng);
        let mut fc2 = Linear::xavier(config.hidden, config.hidden, rng);
        let mut projection = Linear::xavier(config.hidden, config.hidden, rng);
        for bias in [&mut conv.bias, &mut fc1.bias, &mut fc2.bias, &mut projection.bias] {
            bias.as_mut_slice().iter_mut().for_each(|x| *x = b);
        }
        Ok(EncoderParams {
            embeddings,
            conv,
            chunks: config.chunks,
            fc1,
            fc2,
            projection,
            dropout: config.dropout,
            projection_activation: config.projection_activation,
            freeze_embeddings: config.freeze_embeddings,
        })
    }

    /// Random embeddings plus fresh parameters.
    pub fn random(config: &EncoderConfig, vocab: Vocabulary, rng: &mut Rng) -> Result<Self> {
        let emb = EmbeddingTable::random(vocab, config.embed_dim, rng);
        Self::init(config, emb, rng)
    }

    pub fn config(&self) -> EncoderConfig {
        EncoderConfig {
            embed_dim: self.embeddings.dim(),
            window: self.conv.window,
            filters: self.conv.num_filters(),
            chunks: self.chunks,
            hidden: self.fc2.outputs(),
            dropout: self.dropout,
            projection_activation: self.projection_activation,
            init_bias: EncoderConfig::default().init_bias,
            freeze_embeddings: self.freeze_embeddings,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.embeddings.vocab()
    }

    /// Dimension of `O` and `O'`.
    pub fn output_dim(&self) -> usize {
        self.fc2.outputs()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let k = self.embeddings.dim();
        if self.conv.word_dim() != k {
            return Err(Error::dims("encoder conv width", k, self.conv.word_dim()));
        }
        if self.fc1.inputs() != self.conv.num_filters() * self.chunks {
            return Err(Error::dims("encoder fc1 input", self.conv.num_filters() * self.chunks, self.fc1.inputs()));
        }
        if self.fc2.inputs() != self.fc1.outputs() {
            return Err(Error::dims("encoder fc2 input", self.fc1.outputs(), self.fc2.inputs()));
        }
        if self.projection.inputs() != self.fc2.outputs() || self.projection.outputs() != self.fc2.outputs() {
            return Err(Error::dims(
                "encoder projection",
                format!("{0}x{0}", self.fc2.outputs()),
                format!("{}x{}", self.projection.outputs(), self.projection.inputs()),
            ));
        }
        Ok(())
    }

    /// Sentence vector `O` with the trace needed for backprop.
    pub fn forward(&self, s: &SentenceIds, pass: Pass<'_>) -> Result<(DenseVector<T>, EncoderTrace<T>)> {
        s.check_vocab(self.embeddings.vocab().len())?;
        let input = embed_sentence(s, &self.embeddings, self.conv.window, self.chunks);
        let feature_maps = convolve(&input, &self.conv)?;

        let width = self.conv.num_filters() * self.chunks;
        let mut pooled = Vec::with_capacity(width);
        let mut argmax = Vec::with_capacity(width);
        for map in &feature_maps {
            let (v, idx) = chunk_max_pool(map, self.chunks)?;
            pooled.extend_from_slice(v.as_slice());
            argmax.extend(idx);
        }

        let (dropout_mask, dropped) = match pass {
            Pass::Infer => (None, pooled.clone()),
            Pass::Train(rng) => {
                let keep = 1.0 - self.dropout;
                let scale = T::of(1.0 / keep);
                let mask: Vec<T> = (0..width)
                    .map(|_| if rng.bernoulli(keep) { scale } else { T::zero() })
                    .collect();
                let dropped = pooled.iter().zip(&mask).map(|(&p, &m)| p * m).collect();
                (Some(mask), dropped)
            }
        };

        let mut hidden1 = self.fc1.forward(&dropped);
        relu_in_place(&mut hidden1);
        let mut output = self.fc2.forward(&hidden1);
        relu_in_place(&mut output);

        let trace = EncoderTrace {
            ids: s.ids().to_vec(),
            input,
            feature_maps,
            argmax,
            pooled,
            dropout_mask,
            dropped,
            hidden1,
            output: output.clone(),
            projected: None,
        };
        Ok((DenseVector::from(output), trace))
    }

    /// `O' = σ(W^t·O + b^t)`.
    pub fn project_shared(&self, o: &DenseVector<T>) -> Result<DenseVector<T>> {
        if o.len() != self.projection.inputs() {
            return Err(Error::dims("project_shared", self.projection.inputs(), o.len()));
        }
        let mut z = self.projection.forward(o.as_slice());
        self.projection_activation.apply(&mut z);
        Ok(DenseVector::from(z))
    }

    /// Forward pass through the shared-space projection; the trace records `O'`.
    pub fn forward_shared(&self, s: &SentenceIds, pass: Pass<'_>) -> Result<(DenseVector<T>, EncoderTrace<T>)> {
        let (o, mut trace) = self.forward(s, pass)?;
        let projected = self.project_shared(&o)?;
        trace.projected = Some(projected.as_slice().to_vec());
        Ok((projected, trace))
    }

    /// Inference-mode sentence vector `O`.
    pub fn encode(&self, s: &SentenceIds) -> Result<DenseVector<T>> {
        Ok(self.forward(s, Pass::Infer)?.0)
    }

    /// Inference-mode shared-space vector `O'`.
    pub fn encode_shared(&self, s: &SentenceIds) -> Result<DenseVector<T>> {
        Ok(self.forward_shared(s, Pass::Infer)?.0)
    }

    pub fn zero_grads(&self) -> EncoderGrads<T> {
        EncoderGrads {
            conv_filters: DenseMatrix::zeros(self.conv.filters.rows(), self.conv.filters.cols()),
            conv_bias: DenseVector::zeros(self.conv.bias.len()),
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
            projection: self.projection.zeros_like(),
            embeddings: BTreeMap::new(),
        }
    }

    /// Accumulates into `grads` the gradient of a scalar loss whose gradient
    /// with respect to the trace's final output is `upstream` (`O'` if the
    /// trace went through the projection, `O` otherwise).
    pub fn backward(&self, trace: &EncoderTrace<T>, upstream: &[T], grads: &mut EncoderGrads<T>) -> Result<()> {
        let hidden = self.fc2.outputs();
        let width = self.conv.num_filters() * self.chunks;
        if upstream.len() != hidden
            || trace.output.len() != hidden
            || trace.pooled.len() != width
            || trace.argmax.len() != width
            || trace.input.cols() != self.embeddings.dim()
            || trace.feature_maps.len() != self.conv.num_filters()
        {
            return Err(Error::dims(
                "encoder backward",
                format!("trace for hidden={hidden}, pooled={width}"),
                format!("upstream={}, pooled={}", upstream.len(), trace.pooled.len()),
            ));
        }

        let mut g_out = match &trace.projected {
            Some(projected) => {
                let mut gz = upstream.to_vec();
                self.projection_activation.gate(projected, &mut gz);
                self.projection.backward(&trace.output, &gz, &mut grads.projection)
            }
            None => upstream.to_vec(),
        };

        Activation::Relu.gate(&trace.output, &mut g_out);
        let mut g_h1 = self.fc2.backward(&trace.hidden1, &g_out, &mut grads.fc2);
        Activation::Relu.gate(&trace.hidden1, &mut g_h1);
        let mut g_pooled = self.fc1.backward(&trace.dropped, &g_h1, &mut grads.fc1);
        if let Some(mask) = &trace.dropout_mask {
            for (g, &m) in g_pooled.iter_mut().zip(mask) {
                *g *= m;
            }
        }

        let h = self.conv.window;
        let k = self.embeddings.dim();
        let x = trace.input.as_slice();
        let mut g_x = vec![T::zero(); x.len()];
        for (l, map) in trace.feature_maps.iter().enumerate() {
            for c in 0..self.chunks {
                let g = g_pooled[l * self.chunks + c];
                let pos = trace.argmax[l * self.chunks + c];
                // Relu gate: a clamped position passes nothing back.
                if g == T::zero() || map[pos] <= T::zero() {
                    continue;
                }
                let window = &x[pos * k..(pos + h) * k];
                crate::math::axpy(g, window, grads.conv_filters.row_mut(l));
                grads.conv_bias.as_mut_slice()[l] += g;
                crate::math::axpy(g, self.conv.filters.row(l), &mut g_x[pos * k..(pos + h) * k]);
            }
        }

        if !self.freeze_embeddings {
            for (p, &id) in trace.ids.iter().enumerate() {
                if id == PAD {
                    continue;
                }
                let row = grads.embeddings.entry(id).or_insert_with(|| vec![T::zero(); k]);
                crate::math::axpy(T::one(), &g_x[p * k..(p + 1) * k], row);
            }
        }
        Ok(())
    }

    /// `Σ θ²` over trainable parameters (embeddings only when not frozen).
    pub fn sq_norm(&self) -> T {
        let mut total = self.conv.filters.sq_norm()
            + self.conv.bias.sq_norm()
            + self.fc1.sq_norm()
            + self.fc2.sq_norm()
            + self.projection.sq_norm();
        if !self.freeze_embeddings {
            total += self.embeddings.matrix().sq_norm();
        }
        total
    }

    /// SGD step with L2 decay over every trainable parameter, including
    /// embedding rows that received no gradient.
    pub fn apply_grads(&mut self, grads: &EncoderGrads<T>, lr: T, l2: T) {
        sgd_slice(self.conv.filters.as_mut_slice(), grads.conv_filters.as_slice(), lr, l2);
        sgd_slice(self.conv.bias.as_mut_slice(), grads.conv_bias.as_slice(), lr, l2);
        self.fc1.sgd(&grads.fc1, lr, l2);
        self.fc2.sgd(&grads.fc2, lr, l2);
        self.projection.sgd(&grads.projection, lr, l2);
        if !self.freeze_embeddings {
            let matrix = self.embeddings.matrix_mut();
            decay_slice(matrix.as_mut_slice(), lr, l2);
            for (&id, g) in &grads.embeddings {
                crate::math::axpy(-lr, g, matrix.row_mut(id as usize));
            }
            // <pad> is a constant zero input, never a parameter.
            matrix.row_mut(PAD as usize).iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn store(&self, snap: &mut Snapshot<T>, prefix: &str) {
        let key = |s: &str| format!("{prefix}{s}");
        snap.set_meta(&key("window"), self.conv.window);
        snap.set_meta(&key("chunks"), self.chunks);
        snap.set_meta(&key("dropout"), self.dropout);
        snap.set_meta(&key("projection_activation"), self.projection_activation.name());
        snap.set_meta(&key("freeze_embeddings"), self.freeze_embeddings);
        let vocab = self.embeddings.vocab();
        snap.lists.insert(key("vocab"), vocab.words().to_vec());
        snap.lists
            .insert(key("vocab_freq"), vocab.freqs().iter().map(u64::to_string).collect());
        snap.put_matrix(&key("embeddings"), self.embeddings.matrix());
        snap.put_matrix(&key("conv.w"), &self.conv.filters);
        snap.put_vector(&key("conv.b"), &self.conv.bias);
        self.fc1.store(snap, &key("fc1"));
        self.fc2.store(snap, &key("fc2"));
        self.projection.store(snap, &key("proj"));
    }

    pub fn restore(snap: &mut Snapshot<T>, prefix: &str) -> Result<Self> {
        let key = |s: &str| format!("{prefix}{s}");
        let words = snap.take_list(&key("vocab"))?;
        let freqs = snap
            .take_list(&key("vocab_freq"))?
            .iter()
            .map(|f| f.parse().map_err(|_| Error::Snapshot(format!("bad frequency {f:?}"))))
            .collect::<Result<Vec<u64>>>()?;
        let vocab = Vocabulary::from_words(words, freqs)?;
        let embeddings = EmbeddingTable::new(vocab, snap.take_matrix(&key("embeddings"))?)?;
        let window: usize = snap.meta(&key("window"))?;
        let conv = ConvLayer::new(window, snap.take_matrix(&key("conv.w"))?, snap.take_vector(&key("conv.b"))?)?;
        let params = EncoderParams {
            embeddings,
            conv,
            chunks: snap.meta(&key("chunks"))?,
            fc1: Linear::restore(snap, &key("fc1"))?,
            fc2: Linear::restore(snap, &key("fc2"))?,
            projection: Linear::restore(snap, &key("proj"))?,
            dropout: snap.meta(&key("dropout"))?,
            projection_activation: Activation::parse(&snap.meta::<String>(&key("projection_activation"))?)?,
            freeze_embeddings: snap.meta(&key("freeze_embeddings"))?,
        };
        params.check_shapes()?;
        Ok(params)
    }
}

impl<T: Scalar> EncoderGrads<T> {
    pub fn add_scaled(&mut self, other: &EncoderGrads<T>, s: T) {
        crate::math::axpy(s, other.conv_filters.as_slice(), self.conv_filters.as_mut_slice());
        crate::math::axpy(s, other.conv_bias.as_slice(), self.conv_bias.as_mut_slice());
        self.fc1.add_scaled(&other.fc1, s);
        self.fc2.add_scaled(&other.fc2, s);
        self.projection.add_scaled(&other.projection, s);
        for (&id, g) in &other.embeddings {
            let row = self.embeddings.entry(id).or_insert_with(|| vec![T::zero(); g.len()]);
            crate::math::axpy(s, g, row);
        }
    }

    pub fn is_zero(&self) -> bool {
        let zero = |xs: &[T]| xs.iter().all(|&x| x == T::zero());
        zero(self.conv_filters.as_slice())
            && zero(self.conv_bias.as_slice())
            && zero(self.fc1.weight.as_slice())
            && zero(self.fc1.bias.as_slice())
            && zero(self.fc2.weight.as_slice())
            && zero(self.fc2.bias.as_slice())
            && zero(self.projection.weight.as_slice())
            && zero(self.projection.bias.as_slice())
            && self.embeddings.values().all(|r| zero(r))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::math::Rng;

    fn toy_vocab(n: usize) -> Vocabulary {
        let words: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        Vocabulary::build(&words, n).unwrap()
    }

    fn toy(k: usize, l: usize, c: usize, hidden: usize, seed: u64) -> EncoderParams<f64> {
        let cfg = EncoderConfig {
            embed_dim: k,
            window: 3,
            filters: l,
            chunks: c,
            hidden,
            dropout: 0.5,
            ..EncoderConfig::default()
        };
        EncoderParams::random(&cfg, toy_vocab(12), &mut Rng::new(seed)).unwrap()
    }

    fn sent(ids: &[u32]) -> SentenceIds {
        SentenceIds::new(ids.to_vec()).unwrap()
    }

    #[test]
    fn padding_rule() {
        let p = toy(4, 3, 4, 6, 1);
        let ten = sent(&[4, 5, 6, 7, 8, 9, 10, 11, 12, 13]);
        assert_eq!(embed_sentence(&ten, &p.embeddings, 3, 4).rows(), 10);
        let two = sent(&[4, 5]);
        let x = embed_sentence(&two, &p.embeddings, 3, 4);
        assert_eq!(x.rows(), 6);
        for r in 2..6 {
            assert!(x.row(r).iter().all(|&v| v == 0.0));
        }
        assert_eq!(x.row(0), p.embeddings.row(4));
        assert_eq!(x.cols(), 4);
    }

    #[test]
    fn embed_width_follows_table() {
        let p = toy(192, 2, 4, 8, 1);
        assert_eq!(embed_sentence(&sent(&[4]), &p.embeddings, 3, 4).cols(), 192);
    }

    #[test]
    fn convolve_hand_examples() {
        let x = DenseMatrix::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let conv = ConvLayer::new(3, DenseMatrix::from_vec(1, 3, vec![1.0; 3]).unwrap(), DenseVector::from(vec![0.0])).unwrap();
        assert_eq!(convolve(&x, &conv).unwrap(), vec![vec![6.0, 9.0]]);
        let conv = ConvLayer { bias: DenseVector::from(vec![-100.0]), ..conv };
        assert_eq!(convolve(&x, &conv).unwrap(), vec![vec![0.0, 0.0]]);

        let short = DenseMatrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
        assert!(convolve(&short, &conv).is_err());
    }

    #[test]
    fn feature_map_length() {
        let p = toy(4, 3, 4, 6, 2);
        let x = embed_sentence(&sent(&[4, 5, 6, 7, 8, 9, 10, 11, 12, 13]), &p.embeddings, 3, 4);
        let maps = convolve(&x, &p.conv).unwrap();
        assert_eq!(maps.len(), 3);
        assert!(maps.iter().all(|m| m.len() == 8));
    }

    #[test]
    fn chunk_pool_examples() {
        let (v, idx) = chunk_max_pool(&[3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0], 4).unwrap();
        assert_eq!(v.as_slice(), &[3.0, 4.0, 9.0, 6.0]);
        assert_eq!(idx, vec![0, 2, 5, 7]);
        let (v, _) = chunk_max_pool(&[5.0, 2.0, 7.0], 1).unwrap();
        assert_eq!(v.as_slice(), &[7.0]);
        let (v, idx) = chunk_max_pool(&[1.0, 2.0, 3.0, 4.0, 5.0], 2).unwrap();
        assert_eq!(v.as_slice(), &[2.0, 5.0]);
        assert_eq!(idx, vec![1, 4]);
        assert!(chunk_max_pool(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn pool_ties_take_first_index() {
        let (_, idx) = chunk_max_pool(&[2.0, 2.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(idx, vec![0, 2]);
    }

    #[test]
    fn forward_shapes_at_default_scale() {
        let cfg = EncoderConfig::default();
        let p: EncoderParams<f64> = EncoderParams::random(&cfg, toy_vocab(20), &mut Rng::new(3)).unwrap();
        let (o, trace) = p.forward(&sent(&[4, 5, 6, 7, 8]), Pass::Infer).unwrap();
        assert_eq!(trace.pooled.len(), 400);
        assert_eq!(o.len(), 192);
        assert_eq!(p.project_shared(&o).unwrap().len(), 192);
    }

    #[test]
    fn infer_is_deterministic_and_zero_dropout_matches() {
        let mut p = toy(4, 3, 2, 6, 4);
        let s = sent(&[4, 7, 9, 5, 6]);
        let a = p.encode(&s).unwrap();
        assert_eq!(a, p.encode(&s).unwrap());
        p.dropout = 0.0;
        let (b, trace) = p.forward(&s, Pass::Train(&mut Rng::new(9))).unwrap();
        assert_eq!(a, b);
        assert!(trace.dropout_mask.unwrap().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn projection_identity_and_clamp() {
        let mut p = toy(4, 3, 2, 3, 5);
        p.projection = Linear::new(DenseMatrix::identity(3), DenseVector::zeros(3)).unwrap();
        let o = DenseVector::from(vec![0.5, 0.0, 2.0]);
        assert_eq!(p.project_shared(&o).unwrap(), o);
        p.projection.bias = DenseVector::from(vec![-1.0, 0.0, 0.0]);
        assert_eq!(p.project_shared(&o).unwrap().as_slice(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p = toy(4, 3, 2, 6, 6);
        let (_, trace) = p.forward_shared(&sent(&[4, 7, 9]), Pass::Train(&mut Rng::new(1))).unwrap();
        let mut g = p.zero_grads();
        p.backward(&trace, &[0.0; 6], &mut g).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn backward_rejects_mismatched_trace() {
        let p = toy(4, 3, 2, 6, 6);
        let other = toy(4, 3, 4, 6, 6);
        let (_, trace) = other.forward_shared(&sent(&[4, 7, 9]), Pass::Infer).unwrap();
        let mut g = p.zero_grads();
        assert!(p.backward(&trace, &[1.0; 6], &mut g).is_err());
    }

    #[test]
    fn only_argmax_positions_receive_filter_gradient() {
        // One filter, k=1, C=1: only the window at the global max contributes.
        let mut p = toy(1, 1, 1, 2, 7);
        p.conv.filters = DenseMatrix::from_vec(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        let s = sent(&[4, 5, 6, 7, 8]);
        let (_, trace) = p.forward(&s, Pass::Infer).unwrap();
        let best = trace.argmax[0];
        let mut g = p.zero_grads();
        p.backward(&trace, &[1.0, 1.0], &mut g).unwrap();
        for (p_idx, &id) in s.ids().iter().enumerate() {
            let touched = g.embeddings.get(&id).is_some_and(|r| r[0] != 0.0);
            let in_window = (best..best + 3).contains(&p_idx);
            assert!(!touched || in_window, "position {p_idx} outside argmax window got gradient");
        }
    }

    #[test]
    fn snapshot_round_trip_bit_exact() {
        let p = toy(4, 3, 2, 6, 8);
        let mut snap = Snapshot::new("encoder");
        p.store(&mut snap, "");
        let bytes = snap.to_bytes();
        let mut back = Snapshot::<f64>::from_bytes(&bytes).unwrap();
        let q = EncoderParams::restore(&mut back, "").unwrap();
        assert_eq!(p, q);
        let mut again = Snapshot::new("encoder");
        q.store(&mut again, "");
        assert_eq!(again.to_bytes(), bytes);
    }

    #[test]
    fn f32_forward_tracks_f64() {
        let p = toy(4, 3, 2, 6, 9);
        let s = sent(&[4, 7, 9, 11]);
        let o64 = p.encode_shared(&s).unwrap();
        let q = EncoderParams::<f32> {
            embeddings: EmbeddingTable::new(p.vocab().clone(), p.embeddings.matrix().cast()).unwrap(),
            conv: ConvLayer::new(3, p.conv.filters.cast(), p.conv.bias.as_slice().iter().map(|&x| x as f32).collect()).unwrap(),
            chunks: p.chunks,
            fc1: Linear::new(p.fc1.weight.cast(), p.fc1.bias.as_slice().iter().map(|&x| x as f32).collect()).unwrap(),
            fc2: Linear::new(p.fc2.weight.cast(), p.fc2.bias.as_slice().iter().map(|&x| x as f32).collect()).unwrap(),
            projection: Linear::new(p.projection.weight.cast(), p.projection.bias.as_slice().iter().map(|&x| x as f32).collect()).unwrap(),
            dropout: p.dropout,
            projection_activation: p.projection_activation,
            freeze_embeddings: false,
        };
        let o32 = q.encode_shared(&s).unwrap();
        for i in 0..o64.len() {
            assert!((o64[i] - o32[i] as f64).abs() < 1e-5);
        }
    }

    /// Brute-force chunker: materializes every boundary from the size rule.
    fn brute_chunks(y: &[f64], c: usize) -> Vec<f64> {
        let len = y.len();
        let base = len / c;
        let mut sizes = vec![base; c];
        sizes[c - 1] = len - base * (c - 1);
        let mut out = Vec::new();
        let mut start = 0;
        for size in sizes {
            let mut best = f64::NEG_INFINITY;
            for &v in &y[start..start + size] {
                if v > best {
                    best = v;
                }
            }
            out.push(best);
            start += size;
        }
        out
    }

    proptest! {
        #[test]
        fn pooling_matches_brute_force(y in prop::collection::vec(-10.0f64..10.0, 1..60), c in 1usize..9) {
            prop_assume!(y.len() >= c);
            let (v, idx) = chunk_max_pool(&y, c).unwrap();
            let expected = brute_chunks(&y, c);
            prop_assert_eq!(v.as_slice(), expected.as_slice());
            let bounds = chunk_bounds(y.len(), c).unwrap();
            prop_assert_eq!(bounds.iter().map(|r| r.len()).sum::<usize>(), y.len());
            for (r, i) in bounds.iter().zip(idx) {
                prop_assert!(r.contains(&i));
            }
        }

        #[test]
        fn single_chunk_is_global_max(y in prop::collection::vec(-10.0f64..10.0, 1..60)) {
            let (v, _) = chunk_max_pool(&y, 1).unwrap();
            let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(v[0], max);
        }

        #[test]
        fn padding_is_minimal(n in 1usize..30, h in 1usize..6, c in 1usize..9) {
            let rows = padded_len(n, h, c);
            prop_assert!(rows >= n);
            prop_assert!(rows - h + 1 >= c);
            // One row fewer would either drop a word or leave < c positions.
            prop_assert!(rows == n || rows - h < c);
        }
    }
}
