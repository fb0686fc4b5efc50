use rand::Rng;

use super::{ModelConfig, ModelParams};
use crate::data::{CountTriple, Sample, Sentence, Token, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::numerics::{dot, layernorm_backward, layernorm_with_cache, softmax, softmax_row, LayerNormCache};

/// The query positions the count-collapsed route can evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QueryToken {
    Eq,
    Four,
    Five,
}

impl QueryToken {
    pub fn token(self) -> Token {
        match self {
            QueryToken::Eq => Token::Eq,
            QueryToken::Four => Token::Four,
            QueryToken::Five => Token::Five,
        }
    }

    pub fn answer(answer: Token) -> Self {
        match answer {
            Token::Four => QueryToken::Four,
            Token::Five => QueryToken::Five,
            other => panic!("{other} is not an answer token"),
        }
    }
}

/// Number of visible tokens of each type when the query sits at `query`.
pub fn multiplicities(counts: CountTriple, query: QueryToken) -> [f64; VOCAB_SIZE] {
    let mut m = [0.0; VOCAB_SIZE];
    m[Token::Bos.id()] = 1.0;
    m[Token::Zero.id()] = counts.n0 as f64;
    m[Token::One.id()] = counts.n1 as f64;
    m[Token::Two.id()] = counts.n2 as f64;
    m[Token::Eq.id()] = 1.0;
    if query != QueryToken::Eq {
        m[query.token().id()] += 1.0;
    }
    m
}

/// Outputs of the count-collapsed forward pass at one query.
#[derive(Debug, Clone, PartialEq)]
pub struct CountForward {
    /// Concatenated head outputs, `heads · head_dim`.
    pub head_outputs: Vec<f64>,
    pub logits: [f64; VOCAB_SIZE],
    /// `z_{t,h} = O_hᵀ w_{h,t}` per head.
    pub contributions: Vec<[f64; VOCAB_SIZE]>,
    /// Total attention mass per token type, per head.
    pub attention: Vec<[f64; VOCAB_SIZE]>,
}

impl CountForward {
    pub fn head_output(&self, head: usize) -> &[f64] {
        let d0 = self.head_outputs.len() / self.contributions.len();
        &self.head_outputs[head * d0..(head + 1) * d0]
    }
}

/// Per-token-type features of a model; everything the count-collapsed route needs.
pub struct CountEngine<'a> {
    config: &'a ModelConfig,
    params: &'a ModelParams,
    x: Vec<Vec<f64>>,
    ln_cache: Vec<Option<LayerNormCache>>,
    keys: Vec<f64>,
    queries: Vec<f64>,
    values: Vec<f64>,
    scale: f64,
}

impl<'a> CountEngine<'a> {
    pub fn new(config: &'a ModelConfig, params: &'a ModelParams) -> Result<Self> {
        if config.dropout != 0.0 {
            return Err(Error::DropoutOnFastPath(config.dropout));
        }
        let (a, d0) = (config.heads, config.head_dim);
        let mut x = Vec::with_capacity(VOCAB_SIZE);
        let mut ln_cache = Vec::with_capacity(VOCAB_SIZE);
        for t in 0..VOCAB_SIZE {
            let e = params.embed.row(t);
            match &params.layer_norm {
                Some(ln) => {
                    let (y, c) = layernorm_with_cache(e, ln.gamma.row(0), ln.beta.row(0));
                    x.push(y);
                    ln_cache.push(Some(c));
                }
                None => {
                    x.push(e.to_vec());
                    ln_cache.push(None);
                }
            }
        }
        let mut keys = vec![0.0; a * VOCAB_SIZE * d0];
        let mut queries = vec![0.0; a * VOCAB_SIZE * d0];
        let mut values = vec![0.0; a * VOCAB_SIZE * d0];
        for h in 0..a {
            for (t, xt) in x.iter().enumerate() {
                let o = (h * VOCAB_SIZE + t) * d0;
                params.key[h].vec_mul(xt, &mut keys[o..o + d0]);
                params.query[h].vec_mul(xt, &mut queries[o..o + d0]);
                params.value[h].vec_mul(xt, &mut values[o..o + d0]);
            }
        }
        Ok(Self {
            config,
            params,
            x,
            ln_cache,
            keys,
            queries,
            values,
            scale: config.logit_scale(),
        })
    }

    fn slot(&self, head: usize, token: usize) -> std::ops::Range<usize> {
        let d0 = self.config.head_dim;
        let o = (head * VOCAB_SIZE + token) * d0;
        o..o + d0
    }

    pub fn key(&self, head: usize, token: usize) -> &[f64] {
        &self.keys[self.slot(head, token)]
    }

    pub fn query(&self, head: usize, token: usize) -> &[f64] {
        &self.queries[self.slot(head, token)]
    }

    pub fn value(&self, head: usize, token: usize) -> &[f64] {
        &self.values[self.slot(head, token)]
    }

    pub fn heads(&self) -> usize {
        self.config.heads
    }

    pub fn head_dim(&self) -> usize {
        self.config.head_dim
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    /// Output bias plus the skip term for a query token: the logits with every head ablated.
    pub fn base_logits(&self, query_token: usize) -> [f64; VOCAB_SIZE] {
        let mut z = [0.0; VOCAB_SIZE];
        z.copy_from_slice(self.params.out_b.row(0));
        if let Some(u) = &self.params.unembed {
            let mut skip = [0.0; VOCAB_SIZE];
            u.vec_mul(&self.x[query_token], &mut skip);
            for t in 0..VOCAB_SIZE {
                z[t] += skip[t];
            }
        }
        z
    }

    /// Input feature (embedding after optional layer norm) of a token type.
    pub fn input_feature(&self, token: usize) -> &[f64] {
        &self.x[token]
    }

    /// Scaled attention logit from a query token type to a key token type.
    pub fn attention_logit(&self, head: usize, query: usize, key: usize) -> f64 {
        self.scale * dot(self.query(head, query), self.key(head, key))
    }

    pub fn forward(&self, counts: CountTriple, query: QueryToken) -> CountForward {
        self.forward_multiplicities(&multiplicities(counts, query), query.token().id())
    }

    /// Attention over token types weighted by `mult`, queried by `query_token`.
    pub fn forward_multiplicities(&self, mult: &[f64; VOCAB_SIZE], query_token: usize) -> CountForward {
        let (a, d0) = (self.config.heads, self.config.head_dim);
        let mut head_outputs = vec![0.0; a * d0];
        let mut attention = vec![[0.0; VOCAB_SIZE]; a];
        for h in 0..a {
            let p = self.type_attention(h, query_token, mult);
            let out = &mut head_outputs[h * d0..(h + 1) * d0];
            for (t, &pt) in p.iter().enumerate() {
                if pt == 0.0 {
                    continue;
                }
                for (o, v) in out.iter_mut().zip(self.value(h, t)) {
                    *o += pt * v;
                }
            }
            attention[h] = p;
        }
        let (logits, contributions) = self.output_layer(&head_outputs, query_token);
        CountForward {
            head_outputs,
            logits,
            contributions,
            attention,
        }
    }

    /// Per-type attention mass `m_t e^{ℓ_t} / Σ m_s e^{ℓ_s}` (max-subtracted).
    fn type_attention(&self, head: usize, query_token: usize, mult: &[f64; VOCAB_SIZE]) -> [f64; VOCAB_SIZE] {
        let q = self.query(head, query_token);
        let mut logits = [f64::NEG_INFINITY; VOCAB_SIZE];
        let mut max = f64::NEG_INFINITY;
        for t in 0..VOCAB_SIZE {
            if mult[t] > 0.0 {
                logits[t] = self.scale * dot(q, self.key(head, t));
                max = max.max(logits[t]);
            }
        }
        let mut p = [0.0; VOCAB_SIZE];
        let mut z = 0.0;
        for t in 0..VOCAB_SIZE {
            if mult[t] > 0.0 {
                p[t] = mult[t] * (logits[t] - max).exp();
                z += p[t];
            }
        }
        p.iter_mut().for_each(|v| *v /= z);
        p
    }

    fn output_layer(&self, head_outputs: &[f64], query_token: usize) -> ([f64; VOCAB_SIZE], Vec<[f64; VOCAB_SIZE]>) {
        let (a, d0) = (self.config.heads, self.config.head_dim);
        let w = &self.params.out_w;
        let mut contributions = vec![[0.0; VOCAB_SIZE]; a];
        let mut logits = self.base_logits(query_token);
        for (h, c) in contributions.iter_mut().enumerate() {
            for k in 0..d0 {
                let o = head_outputs[h * d0 + k];
                for (t, row) in c.iter_mut().zip(w.row(h * d0 + k)) {
                    *t += o * row;
                }
            }
            for t in 0..VOCAB_SIZE {
                logits[t] += c[t];
            }
        }
        (logits, contributions)
    }
}

/// Count-collapsed forward at one query. Refuses dropout.
pub fn forward_counts(
    config: &ModelConfig,
    params: &ModelParams,
    counts: CountTriple,
    query: QueryToken,
) -> Result<CountForward> {
    Ok(CountEngine::new(config, params)?.forward(counts, query))
}

#[derive(Debug, Clone)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grad: ModelParams,
}

/// Per-type gradient accumulators for the count-collapsed backward pass.
struct TypeGrads {
    dk: Vec<f64>,
    dq: Vec<f64>,
    dv: Vec<f64>,
    dx: Vec<Vec<f64>>,
}

/// Mean NLL over the two supervised positions (answer at `=`, `[EOS]` at the
/// answer) and its gradient, via the count-collapsed route.
pub fn loss_counts(config: &ModelConfig, params: &ModelParams, batch: &[Sample]) -> Result<LossAndGrad> {
    let engine = CountEngine::new(config, params)?;
    let (a, d0, d) = (config.heads, config.head_dim, config.d);
    let mut grad = params.zeros_like();
    let mut tg = TypeGrads {
        dk: vec![0.0; engine.keys.len()],
        dq: vec![0.0; engine.keys.len()],
        dv: vec![0.0; engine.keys.len()],
        dx: vec![vec![0.0; d]; VOCAB_SIZE],
    };
    let weight = 1.0 / (2.0 * batch.len().max(1) as f64);
    let mut loss = 0.0;
    let mut d_out = vec![0.0; d0];

    for sample in batch {
        let answer_query = QueryToken::answer(sample.answer);
        for (query, target) in [(QueryToken::Eq, sample.answer), (answer_query, Token::Eos)] {
            let qt = query.token().id();
            let mult = multiplicities(sample.counts, query);
            let fwd = engine.forward_multiplicities(&mult, qt);
            loss -= weight * crate::numerics::log_softmax_at(&fwd.logits, target.id());

            let mut dz = softmax(&fwd.logits);
            dz[target.id()] -= 1.0;
            dz.iter_mut().for_each(|g| *g *= weight);

            for (b, g) in grad.out_b.row_mut(0).iter_mut().zip(&dz) {
                *b += g;
            }
            grad.out_w.add_outer(&fwd.head_outputs, &dz);
            if let (Some(u), Some(du)) = (&params.unembed, &mut grad.unembed) {
                du.add_outer(engine.input_feature(qt), &dz);
                u.mul_vec_acc(&dz, &mut tg.dx[qt]);
            }

            for h in 0..a {
                d_out.iter_mut().for_each(|g| *g = 0.0);
                for k in 0..d0 {
                    d_out[k] = dot(params.out_w.row(h * d0 + k), &dz);
                }
                let out = &fwd.head_outputs[h * d0..(h + 1) * d0];
                let d_out_dot_out = dot(&d_out, out);
                let p = &fwd.attention[h];
                let q = engine.query(h, qt).to_vec();
                let mut dq = vec![0.0; d0];
                for t in 0..VOCAB_SIZE {
                    if p[t] == 0.0 {
                        continue;
                    }
                    let s = engine.slot(h, t);
                    let dlogit = p[t] * (dot(&d_out, engine.value(h, t)) - d_out_dot_out);
                    for k in 0..d0 {
                        tg.dv[s.start + k] += p[t] * d_out[k];
                        tg.dk[s.start + k] += engine.scale * dlogit * q[k];
                        dq[k] += engine.scale * dlogit * engine.keys[s.start + k];
                    }
                }
                let sq = engine.slot(h, qt);
                for k in 0..d0 {
                    tg.dq[sq.start + k] += dq[k];
                }
            }
        }
    }

    // Push per-type feature gradients through K/Q/V, then the embedding pipeline.
    for h in 0..a {
        for t in 0..VOCAB_SIZE {
            let s = engine.slot(h, t);
            let xt = &engine.x[t];
            for (proj, dproj, g) in [
                (&params.key[h], &mut grad.key[h], &tg.dk[s.clone()]),
                (&params.query[h], &mut grad.query[h], &tg.dq[s.clone()]),
                (&params.value[h], &mut grad.value[h], &tg.dv[s.clone()]),
            ] {
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                dproj.add_outer(xt, g);
                proj.mul_vec_acc(g, &mut tg.dx[t]);
            }
        }
    }
    embed_backward(params, &mut grad, &engine.ln_cache, &tg.dx);

    Ok(LossAndGrad { loss, grad })
}

fn embed_backward(params: &ModelParams, grad: &mut ModelParams, caches: &[Option<LayerNormCache>], dx: &[Vec<f64>]) {
    for (t, g) in dx.iter().enumerate() {
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        let de = match (&params.layer_norm, &mut grad.layer_norm, &caches[t]) {
            (Some(ln), Some(dln), Some(cache)) => {
                let crate::model::LayerNormParams { gamma, beta } = dln;
                layernorm_backward(g, ln.gamma.row(0), cache, gamma.row_mut(0), beta.row_mut(0))
            }
            _ => g.clone(),
        };
        for (e, v) in grad.embed.row_mut(t).iter_mut().zip(&de) {
            *e += v;
        }
    }
}

/// Attention rows, head outputs and logits recorded by the reference route.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub positions: Vec<usize>,
    /// `[query][head][key position]`, zero for masked (future) positions.
    pub attention: Vec<Vec<Vec<f64>>>,
    /// `[query][heads · head_dim]`
    pub head_outputs: Vec<Vec<f64>>,
    pub logits: Vec<[f64; VOCAB_SIZE]>,
}

/// Position-level features of one sequence.
struct SequenceFeatures {
    x: Vec<Vec<f64>>,
    ln_cache: Vec<Option<LayerNormCache>>,
    /// `[position][head]` → head_dim vector
    keys: Vec<Vec<Vec<f64>>>,
    queries: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
}

impl SequenceFeatures {
    fn new(params: &ModelParams, tokens: &[Token], upto: usize) -> Self {
        let a = params.heads();
        let d0 = params.head_dim();
        let mut f = SequenceFeatures {
            x: Vec::with_capacity(upto),
            ln_cache: Vec::with_capacity(upto),
            keys: Vec::with_capacity(upto),
            queries: Vec::with_capacity(upto),
            values: Vec::with_capacity(upto),
        };
        for tok in &tokens[..upto] {
            let e = params.embed.row(tok.id());
            let (x, cache) = match &params.layer_norm {
                Some(ln) => {
                    let (y, c) = layernorm_with_cache(e, ln.gamma.row(0), ln.beta.row(0));
                    (y, Some(c))
                }
                None => (e.to_vec(), None),
            };
            let project = |mats: &[crate::numerics::Matrix]| {
                (0..a)
                    .map(|h| {
                        let mut o = vec![0.0; d0];
                        mats[h].vec_mul(&x, &mut o);
                        o
                    })
                    .collect::<Vec<_>>()
            };
            f.keys.push(project(&params.key));
            f.queries.push(project(&params.query));
            f.values.push(project(&params.value));
            f.x.push(x);
            f.ln_cache.push(cache);
        }
        f
    }
}

struct PositionForward {
    /// `[head]` attention row over the whole sequence (masked entries 0).
    attention: Vec<Vec<f64>>,
    /// Concatenated head outputs before dropout.
    head_outputs: Vec<f64>,
    logits: [f64; VOCAB_SIZE],
}

fn forward_at(config: &ModelConfig, params: &ModelParams, f: &SequenceFeatures, pos: usize, dropout_mask: Option<&[f64]>) -> PositionForward {
    let (a, d0) = (config.heads, config.head_dim);
    let len = f.x.len();
    let scale = config.logit_scale();
    let mask: Vec<bool> = (0..len).map(|j| j > pos).collect();
    let mut attention = Vec::with_capacity(a);
    let mut head_outputs = vec![0.0; a * d0];
    for h in 0..a {
        let q = &f.queries[pos][h];
        let logits: Vec<f64> = (0..len)
            .map(|j| if j <= pos { scale * dot(q, &f.keys[j][h]) } else { f64::NEG_INFINITY })
            .collect();
        let p = softmax_row(&logits, &mask).expect("position 0 is always visible");
        let out = &mut head_outputs[h * d0..(h + 1) * d0];
        for j in 0..=pos {
            for (o, v) in out.iter_mut().zip(&f.values[j][h]) {
                *o += p[j] * v;
            }
        }
        attention.push(p);
    }
    let mut z = [0.0; VOCAB_SIZE];
    z.copy_from_slice(params.out_b.row(0));
    let dropped: Vec<f64> = match dropout_mask {
        Some(m) => head_outputs.iter().zip(m).map(|(o, s)| o * s).collect(),
        None => head_outputs.clone(),
    };
    let mut tmp = [0.0; VOCAB_SIZE];
    params.out_w.vec_mul(&dropped, &mut tmp);
    for t in 0..VOCAB_SIZE {
        z[t] += tmp[t];
    }
    if let Some(u) = &params.unembed {
        u.vec_mul(&f.x[pos], &mut tmp);
        for t in 0..VOCAB_SIZE {
            z[t] += tmp[t];
        }
    }
    PositionForward {
        attention,
        head_outputs,
        logits: z,
    }
}

/// Reference causal forward at the requested positions only.
pub fn forward_positions(
    config: &ModelConfig,
    params: &ModelParams,
    tokens: &[Token],
    positions: &[usize],
    trace: bool,
) -> (Vec<[f64; VOCAB_SIZE]>, Option<ForwardTrace>) {
    let upto = positions.iter().copied().max().map_or(0, |p| p + 1);
    let f = SequenceFeatures::new(params, tokens, upto);
    let mut logits = Vec::with_capacity(positions.len());
    let mut tr = trace.then(ForwardTrace::default);
    for &pos in positions {
        let pf = forward_at(config, params, &f, pos, None);
        logits.push(pf.logits);
        if let Some(tr) = tr.as_mut() {
            tr.positions.push(pos);
            tr.attention.push(pf.attention);
            tr.head_outputs.push(pf.head_outputs);
            tr.logits.push(pf.logits);
        }
    }
    (logits, tr)
}

/// Reference causal forward; logits at every position.
pub fn forward_full(
    config: &ModelConfig,
    params: &ModelParams,
    tokens: &[Token],
    trace: bool,
) -> (Vec<[f64; VOCAB_SIZE]>, Option<ForwardTrace>) {
    let positions: Vec<usize> = (0..tokens.len()).collect();
    forward_positions(config, params, tokens, &positions, trace)
}

/// Same objective as [`loss_counts`], computed position by position over the
/// explicit token sequences. With `dropout_rng` and a nonzero dropout rate,
/// inverted dropout is applied to the concatenated head outputs.
pub fn loss_full<R: Rng + ?Sized>(
    config: &ModelConfig,
    params: &ModelParams,
    batch: &[Sentence],
    mut dropout_rng: Option<&mut R>,
) -> LossAndGrad {
    let (a, d0, d) = (config.heads, config.head_dim, config.d);
    let scale = config.logit_scale();
    let weight = 1.0 / (2.0 * batch.len().max(1) as f64);
    let mut grad = params.zeros_like();
    let mut loss = 0.0;

    for sentence in batch {
        let tokens = &sentence.tokens;
        let supervised = [
            (sentence.eq_position(), sentence.answer),
            (sentence.answer_position(), Token::Eos),
        ];
        let upto = sentence.answer_position() + 1;
        let f = SequenceFeatures::new(params, tokens, upto);
        let mut dx = vec![vec![0.0; d]; upto];

        for (pos, target) in supervised {
            let mask: Option<Vec<f64>> = match dropout_rng.as_deref_mut() {
                Some(rng) if config.dropout > 0.0 => Some(
                    (0..a * d0)
                        .map(|_| {
                            if rng.random::<f64>() < config.dropout {
                                0.0
                            } else {
                                1.0 / (1.0 - config.dropout)
                            }
                        })
                        .collect(),
                ),
                _ => None,
            };
            let pf = forward_at(config, params, &f, pos, mask.as_deref());
            loss -= weight * crate::numerics::log_softmax_at(&pf.logits, target.id());
            let mut dz = softmax(&pf.logits);
            dz[target.id()] -= 1.0;
            dz.iter_mut().for_each(|g| *g *= weight);

            for (b, g) in grad.out_b.row_mut(0).iter_mut().zip(&dz) {
                *b += g;
            }
            let dropped: Vec<f64> = match &mask {
                Some(m) => pf.head_outputs.iter().zip(m).map(|(o, s)| o * s).collect(),
                None => pf.head_outputs.clone(),
            };
            grad.out_w.add_outer(&dropped, &dz);
            if let (Some(u), Some(du)) = (&params.unembed, &mut grad.unembed) {
                du.add_outer(&f.x[pos], &dz);
                u.mul_vec_acc(&dz, &mut dx[pos]);
            }

            for h in 0..a {
                let mut d_out: Vec<f64> = (0..d0).map(|k| dot(params.out_w.row(h * d0 + k), &dz)).collect();
                if let Some(m) = &mask {
                    for k in 0..d0 {
                        d_out[k] *= m[h * d0 + k];
                    }
                }
                let out = &pf.head_outputs[h * d0..(h + 1) * d0];
                let d_out_dot_out = dot(&d_out, out);
                let p = &pf.attention[h];
                let q = &f.queries[pos][h];
                let mut dq = vec![0.0; d0];
                for j in 0..=pos {
                    let dlogit = p[j] * (dot(&d_out, &f.values[j][h]) - d_out_dot_out);
                    let dk: Vec<f64> = q.iter().map(|qk| scale * dlogit * qk).collect();
                    let dv: Vec<f64> = d_out.iter().map(|g| p[j] * g).collect();
                    for k in 0..d0 {
                        dq[k] += scale * dlogit * f.keys[j][h][k];
                    }
                    grad.key[h].add_outer(&f.x[j], &dk);
                    params.key[h].mul_vec_acc(&dk, &mut dx[j]);
                    grad.value[h].add_outer(&f.x[j], &dv);
                    params.value[h].mul_vec_acc(&dv, &mut dx[j]);
                }
                grad.query[h].add_outer(&f.x[pos], &dq);
                params.query[h].mul_vec_acc(&dq, &mut dx[pos]);
            }
        }

        for (j, g) in dx.iter().enumerate() {
            let t = tokens[j].id();
            let de = match (&params.layer_norm, &mut grad.layer_norm, &f.ln_cache[j]) {
                (Some(ln), Some(dln), Some(cache)) => {
                    let crate::model::LayerNormParams { gamma, beta } = dln;
                    layernorm_backward(g, ln.gamma.row(0), cache, gamma.row_mut(0), beta.row_mut(0))
                }
                _ => g.clone(),
            };
            for (e, v) in grad.embed.row_mut(t).iter_mut().zip(&de) {
                *e += v;
            }
        }
    }
    LossAndGrad { loss, grad }
}
