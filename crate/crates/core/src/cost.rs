//! Analytic parameter and training-FLOP accounting for both arms.
//!
//! Formulas follow the standard per-operation table: embeddings are counted
//! as parameters only, de-embedding as `2·n_vocab·d` FLOPs with no `T`
//! factor, and nonlinearities, norms and biases are left out. The totals
//! cover the non-embedding operations, so `flops_total = 2·N·T + token-token`.
//! All arithmetic is integer.

use std::fmt;
use std::io::Write;

use crate::error::{Error, Result};
use crate::lm::Arm;
use crate::preset::ArchConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostOp {
    Embed,
    QkvProject,
    TokenToken,
    OutputProject,
    Feedforward,
    DeEmbed,
}

impl CostOp {
    pub const ALL: [CostOp; 6] = [
        CostOp::Embed,
        CostOp::QkvProject,
        CostOp::TokenToken,
        CostOp::OutputProject,
        CostOp::Feedforward,
        CostOp::DeEmbed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CostOp::Embed => "embed",
            CostOp::QkvProject => "qkv_project",
            CostOp::TokenToken => "token_token",
            CostOp::OutputProject => "output_project",
            CostOp::Feedforward => "feedforward",
            CostOp::DeEmbed => "de_embed",
        }
    }

    fn is_embedding(self) -> bool {
        matches!(self, CostOp::Embed | CostOp::DeEmbed)
    }
}

impl fmt::Display for CostOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub op: CostOp,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostBreakdown {
    pub arm: Arm,
    pub n_layer: u64,
    /// `d_model` for the Transformer, `d_token` for the Tokenformer.
    pub d: u64,
    /// `[n_q, n_k, n_v, n_o, n_ffn]`; all zero for the Transformer.
    pub pairs: [u64; 5],
    pub n_vocab: u64,
    pub seq_len: u64,
    pub rows: Vec<CostRow>,
}

impl CostBreakdown {
    pub fn row(&self, op: CostOp) -> CostRow {
        *self.rows.iter().find(|r| r.op == op).expect("every op has a row")
    }

    /// `N`: parameters of every non-embedding row.
    pub fn non_embedding_params(&self) -> u64 {
        self.rows.iter().filter(|r| !r.op.is_embedding()).map(|r| r.params).sum()
    }

    pub fn embedding_params(&self) -> u64 {
        self.rows.iter().filter(|r| r.op.is_embedding()).map(|r| r.params).sum()
    }

    /// Training FLOPs of the non-embedding rows, `2·N·T + token-token`.
    pub fn flops_total(&self) -> u64 {
        self.rows.iter().filter(|r| !r.op.is_embedding()).map(|r| r.flops).sum()
    }

    pub fn flops_token_token(&self) -> u64 {
        self.row(CostOp::TokenToken).flops
    }

    /// Every row, de-embedding included.
    pub fn flops_with_de_embed(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }
}

fn check_positive(values: &[(&str, u64)]) -> Result<()> {
    match values.iter().find(|(_, v)| *v == 0) {
        Some((name, _)) => Err(Error::Config(format!("{name} must be positive"))),
        None => Ok(()),
    }
}

fn checked(label: &str, terms: &[u64]) -> Result<u64> {
    terms
        .iter()
        .try_fold(1u64, |acc, &t| acc.checked_mul(t))
        .ok_or_else(|| Error::Config(format!("{label} overflows 64 bits")))
}

pub fn transformer_costs(n_layer: u64, d_model: u64, n_vocab: u64, seq_len: u64) -> Result<CostBreakdown> {
    check_positive(&[("n_layer", n_layer), ("d_model", d_model), ("n_vocab", n_vocab), ("T", seq_len)])?;
    let (l, d, t) = (n_layer, d_model, seq_len);
    let row = |op, params, flops| CostRow { op, params, flops };
    let rows = vec![
        row(CostOp::Embed, checked("embed", &[n_vocab, d])?, 0),
        row(CostOp::QkvProject, checked("qkv", &[3, l, d, d])?, checked("qkv", &[6, l, d, d, t])?),
        row(CostOp::TokenToken, 0, checked("token-token", &[4, l, d, t, t])?),
        row(CostOp::OutputProject, checked("output", &[l, d, d])?, checked("output", &[2, l, d, d, t])?),
        row(CostOp::Feedforward, checked("ffn", &[8, l, d, d])?, checked("ffn", &[16, l, d, d, t])?),
        row(CostOp::DeEmbed, 0, checked("de-embed", &[2, n_vocab, d])?),
    ];
    Ok(CostBreakdown { arm: Arm::Transformer, n_layer, d: d_model, pairs: [0; 5], n_vocab, seq_len, rows })
}

pub fn tokenformer_costs(
    n_layer: u64,
    d_token: u64,
    pairs: [u64; 5],
    n_vocab: u64,
    seq_len: u64,
) -> Result<CostBreakdown> {
    let [n_q, n_k, n_v, n_o, n_ffn] = pairs;
    check_positive(&[
        ("n_layer", n_layer),
        ("d_token", d_token),
        ("n_q", n_q),
        ("n_k", n_k),
        ("n_v", n_v),
        ("n_o", n_o),
        ("n_ffn", n_ffn),
        ("n_vocab", n_vocab),
        ("T", seq_len),
    ])?;
    let (l, d, t) = (n_layer, d_token, seq_len);
    let qkv = n_q + n_k + n_v;
    let row = |op, params, flops| CostRow { op, params, flops };
    let rows = vec![
        row(CostOp::Embed, checked("embed", &[n_vocab, d])?, 0),
        row(CostOp::QkvProject, checked("qkv", &[l, d, qkv])?, checked("qkv", &[2, l, d, qkv, t])?),
        row(CostOp::TokenToken, 0, checked("token-token", &[4, l, d, t, t])?),
        row(CostOp::OutputProject, checked("output", &[l, d, n_o])?, checked("output", &[2, l, d, n_o, t])?),
        row(CostOp::Feedforward, checked("ffn", &[2, l, d, n_ffn])?, checked("ffn", &[4, l, d, n_ffn, t])?),
        row(CostOp::DeEmbed, 0, checked("de-embed", &[2, n_vocab, d])?),
    ];
    Ok(CostBreakdown { arm: Arm::Tokenformer, n_layer, d: d_token, pairs, n_vocab, seq_len, rows })
}

impl ArchConfig {
    pub fn costs(&self, seq_len: u64) -> Result<CostBreakdown> {
        match self {
            ArchConfig::Tokenformer(c) => tokenformer_costs(
                c.n_layer as u64,
                c.d_model as u64,
                c.pair_counts().map(|n| n as u64),
                c.n_vocab as u64,
                seq_len,
            ),
            ArchConfig::Transformer(c) => {
                transformer_costs(c.n_layer as u64, c.d_model as u64, c.n_vocab as u64, seq_len)
            }
        }
    }
}

/// Width of the Transformer whose `12·n_layer·d²` is closest to `n`.
pub fn matched_transformer_width(n: u64, n_layer: u64) -> u64 {
    let per = 12 * n_layer as i128;
    let guess = (n as f64 / per as f64).sqrt().round() as i128;
    (guess - 1..=guess + 1).filter(|&d| d >= 1).min_by_key(|&d| (n as i128 - per * d * d).abs()).unwrap_or(1) as u64
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SweepRow {
    pub arm: Arm,
    pub n_layer: u64,
    pub d: u64,
    /// Key-value pairs per layer summed over the five projections; 0 for the Transformer.
    pub pairs: u64,
    pub seq_len: u64,
    pub params: u64,
    pub flops_total: u64,
    pub flops_tt: u64,
}

pub const SWEEP_HEADER: &str = "arm,n_layer,d,pairs,T,params,flops_total,flops_tt";

impl SweepRow {
    pub fn from_breakdown(c: &CostBreakdown) -> Self {
        SweepRow {
            arm: c.arm,
            n_layer: c.n_layer,
            d: c.d,
            pairs: c.pairs.iter().sum(),
            seq_len: c.seq_len,
            params: c.non_embedding_params(),
            flops_total: c.flops_total(),
            flops_tt: c.flops_token_token(),
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.arm, self.n_layer, self.d, self.pairs, self.seq_len, self.params, self.flops_total, self.flops_tt
        )
    }
}

/// One row per (config, T), configs outermost.
pub fn flops_vs_length_sweep(configs: &[ArchConfig], seq_lens: &[u64]) -> Result<Vec<SweepRow>> {
    if configs.is_empty() || seq_lens.is_empty() {
        return Err(Error::Config("sweep needs at least one config and one T".into()));
    }
    let mut rows = Vec::with_capacity(configs.len() * seq_lens.len());
    for c in configs {
        for &t in seq_lens {
            rows.push(SweepRow::from_breakdown(&c.costs(t)?));
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(out: &mut W, rows: &[SweepRow]) -> std::io::Result<()> {
    writeln!(out, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.to_csv())?;
    }
    Ok(())
}
