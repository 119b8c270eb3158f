use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::transformer::{
    block_backward, block_forward, block_layer_shapes, BlockMode, BlockOptions, BlockProjections,
    BlockSubspace, BlockWeights, ActivationTape, BLOCK_GROUPS, GROUPS_PER_BLOCK, LAYERS_PER_BLOCK,
};
use crate::objectives::{Corpus, Evaluation, Objective, ParamSet, SubspaceParams};
use crate::projection::{streams, ProjectionSet};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, RngStream};

/// Next-token language model: token embedding plus a learned positional
/// table, a stack of transformer blocks, and a linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TinyLmConfig {
    pub vocab: usize,
    pub dim: usize,
    pub seq_len: usize,
    pub blocks: usize,
    pub batch_size: usize,
    /// Held-out sequences defining the deterministic objective.
    pub eval_sequences: usize,
    pub corpus_len: usize,
    pub seed: u64,
    pub embed_std: f64,
    pub pos_std: f64,
    pub head_std: f64,
    pub causal: bool,
}

impl Default for TinyLmConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            dim: 64,
            seq_len: 64,
            blocks: 2,
            batch_size: 8,
            eval_sequences: 16,
            corpus_len: 200_000,
            seed: 0,
            embed_std: 1.0,
            pos_std: 0.1,
            head_std: 0.02,
            causal: true,
        }
    }
}

impl TinyLmConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab", self.vocab),
            ("dim", self.dim),
            ("seq_len", self.seq_len),
            ("blocks", self.blocks),
            ("batch_size", self.batch_size),
            ("eval_sequences", self.eval_sequences),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("tiny_lm: {name} must be positive")));
        }
        if self.vocab > 256 {
            return Err(Error::Config("tiny_lm: vocab must be at most 256".into()));
        }
        if self.corpus_len < 4 * (self.seq_len + 1) {
            return Err(Error::Config("tiny_lm: corpus too short for the sequence length".into()));
        }
        for (name, std) in [("embed_std", self.embed_std), ("pos_std", self.pos_std), ("head_std", self.head_std)] {
            if !(std > 0.0 && std.is_finite()) {
                return Err(Error::Config(format!("tiny_lm: {name} must be positive")));
            }
        }
        Ok(())
    }
}

/// A batch is a list of start offsets; sequence `i` is
/// `tokens[start .. start + s + 1]`.
pub struct TinyLm<T> {
    cfg: TinyLmConfig,
    corpus: Corpus,
    train_span: usize,
    eval_starts: Vec<usize>,
    _scalar: std::marker::PhantomData<T>,
}

const EMBED: usize = 0;
const POS: usize = 1;
const HEAD: usize = 2;

impl<T: Scalar> TinyLm<T> {
    /// Model over a synthetic corpus generated from `cfg.seed`.
    pub fn new(cfg: TinyLmConfig) -> Result<Self> {
        cfg.validate()?;
        let corpus = Corpus::synthetic(cfg.vocab, cfg.corpus_len, cfg.seed)?;
        Self::with_corpus(cfg, corpus)
    }

    /// The last tenth of the corpus is held out for the evaluation batch.
    pub fn with_corpus(cfg: TinyLmConfig, corpus: Corpus) -> Result<Self> {
        cfg.validate()?;
        if corpus.vocab() != cfg.vocab {
            return Err(Error::Config(format!(
                "corpus vocab {} differs from model vocab {}",
                corpus.vocab(),
                cfg.vocab
            )));
        }
        let window = cfg.seq_len + 1;
        let held_out = (corpus.len() / 10).max(window);
        if corpus.len() < held_out + window {
            return Err(Error::Config("tiny_lm: corpus too short".into()));
        }
        let train_span = corpus.len() - held_out - window + 1;
        let eval_base = corpus.len() - held_out;
        let eval_room = held_out - window + 1;
        let eval_starts = (0..cfg.eval_sequences)
            .map(|i| eval_base + (i * eval_room) / cfg.eval_sequences)
            .collect();
        Ok(Self {
            cfg,
            corpus,
            train_span,
            eval_starts,
            _scalar: std::marker::PhantomData,
        })
    }

    pub fn config(&self) -> &TinyLmConfig {
        &self.cfg
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    fn block_weights(&self, params: &ParamSet<T>) -> Result<Vec<BlockWeights<T>>> {
        if params.layers.len() != self.cfg.blocks * LAYERS_PER_BLOCK || params.dense.len() != 3 {
            return Err(Error::shape(
                "tiny_lm",
                format!("{} layers / {} dense parameters", params.layers.len(), params.dense.len()),
            ));
        }
        params
            .layers
            .chunks(LAYERS_PER_BLOCK)
            .map(BlockWeights::from_layers)
            .collect()
    }

    /// Loss, and gradients when `grads` is set. `subspace` switches every
    /// block to subspace mode.
    fn run(
        &self,
        params: &ParamSet<T>,
        subspace: Option<(&ProjectionSet<T>, &SubspaceParams<T>)>,
        batch: &[usize],
        grads: bool,
    ) -> Result<Evaluation<T>> {
        if batch.is_empty() {
            return Err(Error::Config("tiny_lm: empty batch".into()));
        }
        let cfg = &self.cfg;
        let (s, n, v) = (cfg.seq_len, cfg.dim, cfg.vocab);
        let weights = self.block_weights(params)?;
        let (embed, pos, head) = (&params.dense[EMBED], &params.dense[POS], &params.dense[HEAD]);
        if embed.shape() != (v, n) || pos.shape() != (s, n) || head.shape() != (n, v) {
            return Err(Error::shape("tiny_lm", "embedding/positional/head shapes"));
        }
        let sub_blocks = match subspace {
            Some((proj, b)) => {
                if proj.len() != params.layers.len() || b.layers.len() != params.layers.len() {
                    return Err(Error::shape("tiny_lm", "subspace does not match layer count"));
                }
                let projs = proj
                    .mats
                    .chunks(LAYERS_PER_BLOCK)
                    .map(BlockProjections::from_layers)
                    .collect::<Result<Vec<_>>>()?;
                let subs = b
                    .layers
                    .chunks(LAYERS_PER_BLOCK)
                    .map(BlockSubspace::from_layers)
                    .collect::<Result<Vec<_>>>()?;
                Some((projs, subs))
            }
            None => None,
        };
        let mode = |i: usize| match &sub_blocks {
            Some((p, b)) => BlockMode::Rso { proj: &p[i], sub: &b[i] },
            None => BlockMode::Full,
        };

        let layer_grad_shapes: Vec<(usize, usize)> = match subspace {
            Some((_, b)) => b.layers.iter().map(Matrix::shape).collect(),
            None => params.layer_shapes(),
        };
        let mut layer_grads: Vec<Matrix<T>> =
            layer_grad_shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        let mut d_embed = Matrix::zeros(v, n);
        let mut d_pos = Matrix::zeros(s, n);
        let mut d_head = Matrix::zeros(n, v);

        let scale = T::one() / T::of_usize(batch.len() * s);
        let mut total = T::zero();
        for &start in batch {
            let window = self
                .corpus
                .tokens()
                .get(start..start + s + 1)
                .ok_or_else(|| Error::Config(format!("tiny_lm: sequence start {start} out of range")))?;
            let mut x = pos.clone();
            for (i, &tok) in window[..s].iter().enumerate() {
                for (dst, &e) in x.row_mut(i).iter_mut().zip(embed.row(tok as usize)) {
                    *dst += e;
                }
            }
            let mut tapes: Vec<ActivationTape<T>> = Vec::with_capacity(cfg.blocks);
            for (i, w) in weights.iter().enumerate() {
                let opts = BlockOptions { causal: cfg.causal, index: i };
                let (out, tape) = block_forward(&x, w, mode(i), opts)?;
                if grads {
                    tapes.push(tape);
                }
                x = out;
            }
            let mut logits = x.matmul(head)?;
            for (i, &target) in window[1..].iter().enumerate() {
                let row = logits.row_mut(i);
                let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let mut z = T::zero();
                for l in row.iter_mut() {
                    *l = (*l - max).exp();
                    z += *l;
                }
                let p_target = row[target as usize] / z;
                total += -(p_target.ln());
                if grads {
                    // Row becomes ∂loss/∂logits = (softmax − onehot)·scale.
                    for l in row.iter_mut() {
                        *l = *l / z * scale;
                    }
                    row[target as usize] -= scale;
                }
            }
            if !grads {
                continue;
            }
            d_head.axpy(T::one(), &x.matmul_tn(&logits)?)?;
            let mut upstream = logits.matmul_nt(head)?;
            for i in (0..cfg.blocks).rev() {
                let g = block_backward(&weights[i], mode(i), &tapes[i], &upstream)?;
                for (acc, gi) in layer_grads[i * LAYERS_PER_BLOCK..].iter_mut().zip(g.layers()) {
                    acc.axpy(T::one(), gi)?;
                }
                upstream = g.input;
            }
            d_pos.axpy(T::one(), &upstream)?;
            for (i, &tok) in window[..s].iter().enumerate() {
                for (dst, &g) in d_embed.row_mut(tok as usize).iter_mut().zip(upstream.row(i)) {
                    *dst += g;
                }
            }
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::NonFinite("tiny_lm loss".into()));
        }
        Ok(Evaluation {
            loss,
            layer_grads: if grads { layer_grads } else { Vec::new() },
            dense_grads: if grads { vec![d_embed, d_pos, d_head] } else { Vec::new() },
        })
    }
}

impl<T: Scalar> Objective<T> for TinyLm<T> {
    type Batch = Vec<usize>;

    fn name(&self) -> &'static str {
        "tiny_lm"
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.cfg.blocks)
            .flat_map(|_| block_layer_shapes(self.cfg.dim))
            .collect()
    }

    fn projection_groups(&self) -> Vec<usize> {
        (0..self.cfg.blocks)
            .flat_map(|b| BLOCK_GROUPS.map(|g| b * GROUPS_PER_BLOCK + g))
            .collect()
    }

    fn initial_params(&self) -> ParamSet<T> {
        let cfg = &self.cfg;
        let mut rng = RngStream::derived(cfg.seed, &[streams::INIT]);
        let layers = (0..cfg.blocks)
            .flat_map(|_| {
                BlockWeights::random(cfg.dim, &mut rng)
                    .expect("positive std")
                    .into_layers()
            })
            .collect();
        let mut draw = |r, c, std| rng.gauss(r, c, std).expect("validated std");
        let embed = draw(cfg.vocab, cfg.dim, cfg.embed_std);
        let pos = draw(cfg.seq_len, cfg.dim, cfg.pos_std);
        let head = draw(cfg.dim, cfg.vocab, cfg.head_std);
        ParamSet::with_dense(layers, vec![embed, pos, head])
    }

    fn full_batch(&self) -> Vec<usize> {
        self.eval_starts.clone()
    }

    fn sample_batch(&self, rng: &mut RngStream) -> Vec<usize> {
        (0..self.cfg.batch_size).map(|_| rng.below(self.train_span)).collect()
    }

    fn is_stochastic(&self) -> bool {
        true
    }

    fn evaluate(&self, params: &ParamSet<T>, batch: &Vec<usize>) -> Result<Evaluation<T>> {
        self.run(params, None, batch, true)
    }

    fn loss(&self, params: &ParamSet<T>, batch: &Vec<usize>) -> Result<T> {
        Ok(self.run(params, None, batch, false)?.loss)
    }

    fn evaluate_subspace(
        &self,
        params: &ParamSet<T>,
        proj: &ProjectionSet<T>,
        b: &SubspaceParams<T>,
        batch: &Vec<usize>,
    ) -> Result<Evaluation<T>> {
        self.run(params, Some((proj, b)), batch, true)
    }

    fn loss_subspace(
        &self,
        params: &ParamSet<T>,
        proj: &ProjectionSet<T>,
        b: &SubspaceParams<T>,
        batch: &Vec<usize>,
    ) -> Result<T> {
        Ok(self.run(params, Some((proj, b)), batch, false)?.loss)
    }
}
