//! Raw tokens to embedded inputs `X·E + P`.
//!
//! Discrete inputs are UTF-8 bytes looked up in a 257-row table (256 byte
//! values plus a pad id); continuous inputs go through a shared linear
//! projection with no bias or nonlinearity. `P` is a learned per-position
//! table.

use crate::data::{Modality, Sample, Tokens};
use crate::error::{Error, Result};
use crate::ndtensor::{Bound, Graph, ParamId, Params, Tensor, Var};
use crate::rng::Rng;

pub const PAD_ID: u16 = 256;
pub const BYTE_VOCAB: usize = 257;

/// Byte-level ids for `bytes`, padded with [`PAD_ID`] to length `n`.
pub fn encode_discrete(bytes: &[u8], n: usize) -> Result<Vec<u16>> {
    if bytes.len() > n {
        return Err(Error::Truncation { len: bytes.len(), n });
    }
    let mut ids: Vec<u16> = bytes.iter().map(|&b| u16::from(b)).collect();
    ids.resize(n, PAD_ID);
    Ok(ids)
}

/// Bytes of the non-pad positions.
pub fn decode_discrete(ids: &[u16]) -> Vec<u8> {
    ids.iter().filter(|&&i| i != PAD_ID).map(|&i| i as u8).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams {
    /// `vocab × d_embed` lookup or `d_raw × d_embed` projection.
    pub table: ParamId,
    /// `n × d_embed` positional table.
    pub positions: ParamId,
    pub modality: Modality,
    pub d_raw: usize,
    pub n: usize,
    pub d_embed: usize,
}

impl EmbeddingParams {
    pub fn init(
        params: &mut Params,
        modality: Modality,
        d_raw: usize,
        n: usize,
        d_embed: usize,
        std: f64,
        rng: &mut Rng,
    ) -> Self {
        let rows = match modality {
            Modality::Discrete => BYTE_VOCAB,
            Modality::Continuous => d_raw,
        };
        let table = params.insert("embed.table", Tensor::randn(&[rows, d_embed], std, rng));
        let positions = params.insert("embed.positions", Tensor::randn(&[n, d_embed], std, rng));
        EmbeddingParams {
            table,
            positions,
            modality,
            d_raw,
            n,
            d_embed,
        }
    }

    /// `n × d_embed` embedding of one sequence.
    pub fn embed(&self, g: &mut Graph, vars: &Bound, tokens: &Tokens) -> Result<Var> {
        if tokens.len() != self.n {
            return Err(Error::ShapeMismatch {
                op: "embed",
                left: vec![tokens.len()],
                right: vec![self.n],
            });
        }
        let content = match tokens {
            Tokens::Discrete(ids) => {
                if self.modality != Modality::Discrete {
                    return Err(Error::Data("discrete tokens given to a continuous embedding".into()));
                }
                let rows: Vec<usize> = ids.iter().map(|&i| usize::from(i)).collect();
                if let Some(&bad) = rows.iter().find(|&&i| i >= BYTE_VOCAB) {
                    return Err(Error::IndexOutOfRange {
                        context: "embed token id",
                        index: bad,
                        bound: BYTE_VOCAB,
                    });
                }
                g.gather_rows(vars[self.table], &rows)?
            }
            Tokens::Continuous { values, width } => {
                if self.modality != Modality::Continuous {
                    return Err(Error::Data("continuous tokens given to a discrete embedding".into()));
                }
                let x = g.constant(Tensor::new(vec![self.n, *width], values.clone())?);
                continuous_projection(g, x, vars[self.table])?
            }
        };
        g.add(content, vars[self.positions])
    }

    /// `b × n × d_embed` embeddings of a batch, values only.
    pub fn embed_batch(&self, params: &Params, batch: &[Sample]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let mut data = Vec::with_capacity(batch.len() * self.n * self.d_embed);
        for s in batch {
            let x = self.embed(&mut g, &vars, &s.tokens)?;
            data.extend_from_slice(g.value(x).data());
        }
        Tensor::new(vec![batch.len(), self.n, self.d_embed], data)
    }
}

/// Per-token linear map `x[n×d_raw] · E[d_raw×d_embed]`.
pub fn continuous_projection(g: &mut Graph, x: Var, e: Var) -> Result<Var> {
    let (xw, ew) = (g.value(x).cols(), g.value(e).shape()[0]);
    if xw != ew {
        return Err(Error::ShapeMismatch {
            op: "continuous_projection",
            left: g.value(x).shape().to_vec(),
            right: g.value(e).shape().to_vec(),
        });
    }
    g.matmul(x, e)
}
