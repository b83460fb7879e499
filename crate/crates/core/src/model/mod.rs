//! The end-to-end network: embed, mask from the first attention layer,
//! encode, upsample with positional queries, reconstruct.
//!
//! Masking is realized by restricting the first layer's keys and values to
//! the unmasked set `U`, which equals adding a `-inf` column mask before the
//! softmax. For self-attention, only the `U` query rows continue into the
//! trunk, so nothing downstream reads a masked token. Mask selection is
//! computed on plain values and enters the graph only as constant indices.

mod checkpoint;
mod config;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{parse_modality, parse_task, task_str, ModelConfig};

use crate::attention::{multi_head, AttentionMap, AttentionParams, BlockParams, NormParams, Projections};
use crate::data::{Label, Sample, Task, Tokens};
use crate::embedding::EmbeddingParams;
use crate::error::{Error, Result};
use crate::masker::{query_count, random_mask_padded, sample_mask_with, MaskSpec};
use crate::ndtensor::{grad_check_with, Bound, GradCheckOptions, GradCheckReport, Graph, ParamId, Params, Tensor, Var};
use crate::rng::Rng;

/// Where one sample's mask comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskSource {
    /// Sampled from the sample's own first-layer attention.
    Guided {
        rng: Rng,
        ratio: f64,
    },
    /// Uniform over non-pad positions.
    Random {
        rng: Rng,
        ratio: f64,
    },
    Fixed(MaskSpec),
    /// Full attention.
    Unmasked,
}

/// Positional-query decoder `softmax((P·W_Q)(H·W_K)ᵀ/√d_k)(H·W_V)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

/// Two-layer gelu MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MlpParams {
    fn init(
        params: &mut Params,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        std: f64,
        rng: &mut Rng,
    ) -> Self {
        MlpParams {
            w1: params.insert(format!("{name}.w1"), Tensor::randn(&[d_in, hidden], std, rng)),
            b1: params.insert(format!("{name}.b1"), Tensor::zeros(&[hidden])),
            w2: params.insert(format!("{name}.w2"), Tensor::randn(&[hidden, d_out], std, rng)),
            b2: params.insert(format!("{name}.b2"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, vars: &Bound, x: Var) -> Result<Var> {
        let h = g.matmul(x, vars[self.w1])?;
        let h = g.add(h, vars[self.b1])?;
        let h = g.gelu(h);
        let y = g.matmul(h, vars[self.w2])?;
        g.add(y, vars[self.b2])
    }
}

/// Mean-pool plus linear downstream head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub task: Task,
    pub w: ParamId,
    pub b: ParamId,
}

/// Graph handles for one pretraining sample.
#[derive(Clone, Debug)]
pub struct SampleGraph {
    pub loss: Var,
    pub mask: MaskSpec,
    pub hidden: Var,
    /// Predictions for the masked positions, one row per entry of `mask.masked`.
    pub reconstruction: Var,
}

/// Values of a pretraining forward pass over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutput {
    /// Mean of the per-sample losses.
    pub loss: f64,
    pub sample_losses: Vec<f64>,
    pub masks: Vec<MaskSpec>,
    pub reconstructions: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Logits(Vec<f64>),
    Value(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmaModel {
    pub config: ModelConfig,
    pub params: Params,
    pub embed: EmbeddingParams,
    pub first: AttentionParams,
    pub blocks: Vec<BlockParams>,
    pub final_norm: NormParams,
    pub decoder: DecoderParams,
    pub recon: MlpParams,
    pub head: Option<HeadParams>,
}

impl SmaModel {
    /// Fresh model; every weight matrix is drawn from `N(0, init_std²)`,
    /// norms start at gain 1 and bias 0, biases at 0.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let std = c.init_std;
        let mut params = Params::new();
        let embed = EmbeddingParams::init(&mut params, c.modality, c.d_raw, c.n, c.d_embed, std, rng);
        let first = AttentionParams::init(
            &mut params,
            c.kind,
            c.d_embed,
            c.d_k,
            c.d_v,
            c.heads,
            c.latents,
            std,
            rng,
        )?;
        let blocks = (0..c.layers)
            .map(|i| BlockParams::init(&mut params, &format!("block{i}"), c.d_v, c.d_k, c.heads, std, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = NormParams::init(&mut params, "final_norm", c.d_v);
        let decoder = DecoderParams {
            w_q: params.insert("decoder.w_q", Tensor::randn(&[c.d_embed, c.d_k], std, rng)),
            w_k: params.insert("decoder.w_k", Tensor::randn(&[c.d_v, c.d_k], std, rng)),
            w_v: params.insert("decoder.w_v", Tensor::randn(&[c.d_v, c.d_v], std, rng)),
        };
        let recon = MlpParams::init(&mut params, "recon", c.d_v, 4 * c.d_v, c.output_width(), std, rng);
        Ok(SmaModel {
            config,
            params,
            embed,
            first,
            blocks,
            final_norm,
            decoder,
            recon,
            head: None,
        })
    }

    /// Adds (or replaces) a downstream head.
    pub fn attach_head(&mut self, task: Task, rng: &mut Rng) {
        let out = match task {
            Task::Classification { classes } => classes,
            Task::Regression => 1,
        };
        let d = self.config.d_v;
        let w = Tensor::randn(&[d, out], self.config.init_std, rng);
        let b = Tensor::zeros(&[out]);
        let (w, b) = match &self.head {
            Some(h) => {
                *self.params.get_mut(h.w) = w;
                *self.params.get_mut(h.b) = b;
                (h.w, h.b)
            }
            None => (self.params.insert("head.w", w), self.params.insert("head.b", b)),
        };
        self.head = Some(HeadParams { task, w, b });
    }

    /// Reorders the positional table so row `j` holds the old row `p[j]`.
    pub fn permute_positions(&mut self, p: &[usize]) -> Result<()> {
        crate::data::invert_permutation(p)?;
        if p.len() != self.config.n {
            return Err(Error::InvalidPermutation(format!(
                "length {} for n={}",
                p.len(),
                self.config.n
            )));
        }
        let table = self.params.get_mut(self.embed.positions);
        let old = table.clone();
        for (j, &i) in p.iter().enumerate() {
            table.data_mut()[j * self.config.d_embed..(j + 1) * self.config.d_embed].copy_from_slice(old.row(i));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &Tokens) -> Result<()> {
        if tokens.len() != self.config.n {
            return Err(Error::Config(format!(
                "sequence length {} does not match model n={}",
                tokens.len(),
                self.config.n
            )));
        }
        Ok(())
    }

    fn project(&self, g: &mut Graph, vars: &Bound, tokens: &Tokens) -> Result<Projections> {
        self.check_tokens(tokens)?;
        let x_hat = self.embed.embed(g, vars, tokens)?;
        self.first.project(g, vars, x_hat)
    }

    fn choose_mask(&self, g: &Graph, p: &Projections, tokens: &Tokens, source: &mut MaskSource) -> Result<MaskSpec> {
        let pads = tokens.pad_mask();
        match source {
            MaskSource::Guided { rng, ratio } => {
                let map = self.first.map(g, p)?;
                let queries = self
                    .config
                    .query_count
                    .unwrap_or_else(|| query_count(map.queries(), *ratio));
                sample_mask_with(&map, *ratio, &pads, queries, rng)
            }
            MaskSource::Random { rng, ratio } => random_mask_padded(&pads, *ratio, rng),
            MaskSource::Fixed(mask) => {
                if mask.len() != tokens.len() {
                    return Err(Error::ShapeMismatch {
                        op: "fixed mask",
                        left: vec![mask.len()],
                        right: vec![tokens.len()],
                    });
                }
                Ok(mask.clone())
            }
            MaskSource::Unmasked => Ok(MaskSpec::none(&pads)),
        }
    }

    /// Encoder output `H` for one sequence, plus the mask that was used.
    ///
    /// Cross-attention yields `l` rows; self-attention yields one row per
    /// unmasked, non-pad position.
    pub fn encode(
        &self,
        g: &mut Graph,
        vars: &Bound,
        tokens: &Tokens,
        source: &mut MaskSource,
    ) -> Result<(Var, MaskSpec)> {
        let p = self.project(g, vars, tokens)?;
        let mask = self.choose_mask(g, &p, tokens, source)?;
        let mut h = self.first.forward_kept(g, vars, &p, &mask.unmasked)?;
        for block in &self.blocks {
            h = block.forward(g, vars, h)?;
        }
        let h = self.final_norm.apply(g, vars, h)?;
        Ok((h, mask))
    }

    /// Decoder outputs for the positions in `rows`.
    pub fn decode_upsample(&self, g: &mut Graph, vars: &Bound, h: Var, rows: &[usize]) -> Result<Var> {
        let p = g.gather_rows(vars[self.embed.positions], rows)?;
        let q = g.matmul(p, vars[self.decoder.w_q])?;
        let k = g.matmul(h, vars[self.decoder.w_k])?;
        let v = g.matmul(h, vars[self.decoder.w_v])?;
        multi_head(g, q, k, v, 1)
    }

    pub fn reconstruct(&self, g: &mut Graph, vars: &Bound, o: Var) -> Result<Var> {
        self.recon.forward(g, vars, o)
    }

    /// Masked-only reconstruction loss for one sample.
    pub fn pretrain_sample(
        &self,
        g: &mut Graph,
        vars: &Bound,
        sample: &Sample,
        source: &mut MaskSource,
    ) -> Result<SampleGraph> {
        let (hidden, mask) = self.encode(g, vars, &sample.tokens, source)?;
        if mask.masked.is_empty() {
            return Err(Error::EmptyMask("pretraining requires a non-empty mask"));
        }
        let o = self.decode_upsample(g, vars, hidden, &mask.masked)?;
        let pred = self.reconstruct(g, vars, o)?;
        let rows: Vec<usize> = (0..mask.masked.len()).collect();
        let loss = match &sample.tokens {
            Tokens::Discrete(ids) => {
                let targets: Vec<usize> = mask.masked.iter().map(|&i| usize::from(ids[i])).collect();
                g.cross_entropy_masked(pred, &targets, &rows)?
            }
            Tokens::Continuous { values, width } => {
                let target: Vec<f64> = mask
                    .masked
                    .iter()
                    .flat_map(|&i| values[i * width..(i + 1) * width].iter().copied())
                    .collect();
                g.mse_masked(pred, &Tensor::new(vec![rows.len(), *width], target)?, &rows)?
            }
        };
        Ok(SampleGraph {
            loss,
            mask,
            hidden,
            reconstruction: pred,
        })
    }

    /// Batch loss as the mean of per-sample losses; one mask source per sample.
    pub fn pretrain_graph(
        &self,
        g: &mut Graph,
        vars: &Bound,
        batch: &[Sample],
        sources: &mut [MaskSource],
    ) -> Result<(Var, Vec<SampleGraph>)> {
        if batch.len() != sources.len() || batch.is_empty() {
            return Err(Error::Contract(format!(
                "{} samples need as many mask sources, got {}",
                batch.len(),
                sources.len()
            )));
        }
        let samples = batch
            .iter()
            .zip(sources.iter_mut())
            .map(|(s, src)| self.pretrain_sample(g, vars, s, src))
            .collect::<Result<Vec<_>>>()?;
        let losses: Vec<Var> = samples.iter().map(|s| s.loss).collect();
        Ok((g.mean_scalars(&losses)?, samples))
    }

    pub fn pretrain_forward(&self, batch: &[Sample], sources: &mut [MaskSource]) -> Result<PretrainOutput> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let (loss, samples) = self.pretrain_graph(&mut g, &vars, batch, sources)?;
        Ok(PretrainOutput {
            loss: g.value(loss).item(),
            sample_losses: samples.iter().map(|s| g.value(s.loss).item()).collect(),
            reconstructions: samples.iter().map(|s| g.value(s.reconstruction).clone()).collect(),
            masks: samples.into_iter().map(|s| s.mask).collect(),
        })
    }

    /// Compares reverse-mode gradients of the pretraining loss against
    /// central differences, over every parameter, with the masks held fixed.
    pub fn grad_check_pretrain(
        &self,
        batch: &[Sample],
        masks: &[MaskSpec],
        opts: GradCheckOptions,
    ) -> Result<GradCheckReport> {
        let forward = |g: &mut Graph, vars: &[Var]| {
            let bound = Bound::from_vars(vars.to_vec());
            let mut sources: Vec<MaskSource> = masks.iter().cloned().map(MaskSource::Fixed).collect();
            self.pretrain_graph(g, &bound, batch, &mut sources)
                .map(|(loss, _)| loss)
        };
        grad_check_with(forward, self.params.tensors(), opts)
    }

    /// Encoder output under a fixed mask.
    pub fn encoder_hidden(&self, tokens: &Tokens, mask: &MaskSpec) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let (h, _) = self.encode(&mut g, &vars, tokens, &mut MaskSource::Fixed(mask.clone()))?;
        Ok(g.value(h).clone())
    }

    /// Unnormalized first-layer map of one sequence, before masking.
    pub fn attention_map(&self, tokens: &Tokens) -> Result<AttentionMap> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let p = self.project(&mut g, &vars, tokens)?;
        self.first.map(&g, &p)
    }

    /// Predictions for every position under `mask`, `n × output_width`.
    pub fn reconstruct_all(&self, tokens: &Tokens, mask: &MaskSpec) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let (h, _) = self.encode(&mut g, &vars, tokens, &mut MaskSource::Fixed(mask.clone()))?;
        let all: Vec<usize> = (0..self.config.n).collect();
        let o = self.decode_upsample(&mut g, &vars, h, &all)?;
        let y = self.reconstruct(&mut g, &vars, o)?;
        Ok(g.value(y).clone())
    }

    fn head(&self) -> Result<&HeadParams> {
        self.head
            .as_ref()
            .ok_or_else(|| Error::Config("model has no downstream head".into()))
    }

    /// Unmasked encoder, mean-pooled, through the head: `1 × out`.
    pub fn head_output(&self, g: &mut Graph, vars: &Bound, tokens: &Tokens) -> Result<Var> {
        let head = self.head()?.clone();
        let (h, _) = self.encode(g, vars, tokens, &mut MaskSource::Unmasked)?;
        let pooled = g.mean_rows(h)?;
        let y = g.matmul(pooled, vars[head.w])?;
        g.add(y, vars[head.b])
    }

    /// Supervised loss averaged over the batch (cross-entropy or squared error).
    pub fn finetune_graph(&self, g: &mut Graph, vars: &Bound, batch: &[Sample]) -> Result<Var> {
        let task = self.head()?.task;
        if batch.is_empty() {
            return Err(Error::Data("empty fine-tuning batch".into()));
        }
        let mut losses = Vec::with_capacity(batch.len());
        for (i, s) in batch.iter().enumerate() {
            let y = self.head_output(g, vars, &s.tokens)?;
            let loss = match (task, s.label) {
                (Task::Classification { classes }, Some(Label::Class(c))) => {
                    if c >= classes {
                        return Err(Error::IndexOutOfRange {
                            context: "class label",
                            index: c,
                            bound: classes,
                        });
                    }
                    g.cross_entropy_masked(y, &[c], &[0])?
                }
                (Task::Regression, Some(Label::Value(v))) => g.mse_masked(y, &Tensor::filled(&[1, 1], v), &[0])?,
                (_, None) => return Err(Error::Data(format!("sample {i} has no label"))),
                (t, Some(l)) => return Err(Error::Data(format!("label {l:?} does not fit task {t:?}"))),
            };
            losses.push(loss);
        }
        g.mean_scalars(&losses)
    }

    pub fn finetune_forward(&self, batch: &[Sample]) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let loss = self.finetune_graph(&mut g, &vars, batch)?;
        Ok(g.value(loss).item())
    }

    pub fn predict(&self, tokens: &Tokens) -> Result<Prediction> {
        let task = self.head()?.task;
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let y = self.head_output(&mut g, &vars, tokens)?;
        let out = g.value(y).data().to_vec();
        Ok(match task {
            Task::Classification { .. } => Prediction::Logits(out),
            Task::Regression => Prediction::Value(out[0]),
        })
    }
}
