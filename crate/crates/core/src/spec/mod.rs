//! Attention variants: customizable-function containers, the online row-norm
//! protocol, and instantiation of the parallel and recurrent templates.

mod backward;
mod builtins;
mod file;
mod parallel;
mod recurrent;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{parse_str, Expr, ExprError, Func};
use crate::graph::{Dim, DimKind, GraphError};

pub use backward::{derive_backward, BackwardGraph};
pub use builtins::{builtin, builtin_names, BUILTIN_NAMES};
pub use file::{Axis, DimsDef, DirectDef, ExtraDef, MaskDef, OnlineDef, RowNormDef, VariantFile};
pub use parallel::{build_parallel, build_sections, ParallelGraph, SectionGraphs, TileExtents};
pub use recurrent::{build_recurrent, build_unrolled, RecurrenceDef};

/// Placeholder names with fixed meaning inside the templates.
pub const RESERVED_NAMES: [&str; 15] =
    ["q", "k", "v", "scores", "acc", "o", "h", "row_idx", "col_idx", "rescale", "dqk", "dv", "seq_q", "seq_k", "inf"];

pub fn is_reserved(name: &str) -> bool {
    RESERVED_NAMES.contains(&name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Parallel,
    Recurrent,
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pattern::Parallel => "parallel",
            Pattern::Recurrent => "recurrent",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnDims {
    pub batch: usize,
    pub heads: usize,
    pub seq_q: usize,
    pub seq_k: usize,
    pub dqk: usize,
    pub dv: usize,
}

impl AttnDims {
    pub fn validate(&self) -> Result<(), SpecError> {
        for (name, v) in [
            ("batch", self.batch),
            ("heads", self.heads),
            ("seq_q", self.seq_q),
            ("seq_k", self.seq_k),
            ("dqk", self.dqk),
            ("dv", self.dv),
        ] {
            if v == 0 {
                return Err(SpecError::InvalidDims(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Multiplies both sequence lengths by `factor` (rounded, at least 1).
    pub fn scaled(&self, factor: f64) -> AttnDims {
        let s = |n: usize| ((n as f64 * factor).round() as usize).max(1);
        AttnDims { seq_q: s(self.seq_q), seq_k: s(self.seq_k), ..*self }
    }

    pub fn dim(&self, kind: DimKind) -> Dim {
        let extent = match kind {
            DimKind::Batch => self.batch,
            DimKind::Heads => self.heads,
            DimKind::SeqQ => self.seq_q,
            DimKind::SeqK => self.seq_k,
            DimKind::DimQK => self.dqk,
            DimKind::DimV => self.dv,
            DimKind::One => 1,
        };
        Dim::of(kind, extent)
    }

    /// Size constants visible to every expression.
    pub fn constants(&self) -> [(&'static str, f64); 4] {
        [("dqk", self.dqk as f64), ("dv", self.dv as f64), ("seq_q", self.seq_q as f64), ("seq_k", self.seq_k as f64)]
    }
}

impl fmt::Display for AttnDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "batch={} heads={} seq_q={} seq_k={} dqk={} dv={}",
            self.batch, self.heads, self.seq_q, self.seq_k, self.dqk, self.dv
        )
    }
}

/// Elementwise-only transform (or mask) spliced into the template.
#[derive(Debug, Clone, PartialEq)]
pub struct ModificationFn {
    pub expr: Expr,
    /// A mask yields a keep-indicator from positions and extras; the template
    /// applies it to the scores.
    pub ismask: bool,
}

impl ModificationFn {
    pub fn parse(source: &str) -> Result<ModificationFn, SpecError> {
        let expr = parse_str(source).map_err(|e| SpecError::expr(source, e))?;
        if let Some(f) = Func::ALL.into_iter().find(|f| f.is_reduce() && expr.calls(*f)) {
            return Err(SpecError::expr(source, ExprError::ReduceInElementwiseContext(f.name().into())));
        }
        Ok(ModificationFn { expr, ismask: false })
    }

    pub fn mask(source: &str) -> Result<ModificationFn, SpecError> {
        let m = ModificationFn::parse(source)?;
        if m.expr.mentions("scores") {
            return Err(SpecError::InvalidMask(source.to_string()));
        }
        Ok(ModificationFn { ismask: true, ..m })
    }

    /// Keep-indicator for the standard causal mask, aligned to the last key.
    pub fn causal() -> ModificationFn {
        ModificationFn::mask("where(col_idx <= row_idx + seq_k - seq_q, 1, 0)").expect("causal mask parses")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub name: String,
    pub expr: Expr,
}

impl Assignment {
    pub fn parse(name: &str, source: &str) -> Result<Assignment, SpecError> {
        let expr = parse_str(source).map_err(|e| SpecError::expr(source, e))?;
        Ok(Assignment { name: name.to_string(), expr })
    }
}

/// Blockwise form of a row normalization with per-row carried state.
///
/// `fwd` runs once per key block as an ordered list of assignments. Inside it
/// `scores` names the current block, each rowscale name its value from the
/// previous block, and assigning `scores` / `rescale` sets the probabilities
/// accumulated into the output and the factor applied to the accumulator
/// beforehand. Other assigned names are block-local temporaries.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineRowNorm {
    pub rowscales: Vec<String>,
    pub prologue: Vec<Assignment>,
    pub fwd: Vec<Assignment>,
    /// Reads `acc` and the final rowscales.
    pub epilogue: Expr,
}

/// Row normalization over complete rows; assignments run in order and the
/// final value of `scores` is the result.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectRowNorm {
    pub steps: Vec<Assignment>,
}

impl DirectRowNorm {
    pub fn parse(source: &str) -> Result<DirectRowNorm, SpecError> {
        Ok(DirectRowNorm { steps: vec![Assignment::parse("scores", source)?] })
    }
}

/// A row normalization may carry both forms: the online form drives tiled
/// execution, the direct form the full-row oracle.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RowNorm {
    pub online: Option<OnlineRowNorm>,
    pub direct: Option<DirectRowNorm>,
}

impl RowNorm {
    fn exprs(&self) -> Vec<&Expr> {
        let mut out = Vec::new();
        if let Some(o) = &self.online {
            out.extend(o.fwd.iter().map(|a| &a.expr));
        }
        if let Some(d) = &self.direct {
            out.extend(d.steps.iter().map(|a| &a.expr));
        }
        out
    }
}

/// How an instance generator fills an extra input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fill {
    Uniform {
        lo: f64,
        hi: f64,
    },
    Constant(f64),
    /// Per-head retention decay `1 - 2^(-5 - head)` at every position.
    RetentionDecay,
    /// Per-head decay mask `gamma^(i - j)` for `j <= i`, zero above.
    RetentionMask,
}

impl Default for Fill {
    fn default() -> Fill {
        Fill::Uniform { lo: -1.0, hi: 1.0 }
    }
}

pub fn retention_gamma(head: usize) -> f64 {
    1.0 - (-5.0 - head as f64).exp2()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtraInput {
    pub name: String,
    pub axes: [DimKind; 2],
    pub fill: Fill,
}

impl ExtraInput {
    pub fn new(name: &str, axes: [DimKind; 2], fill: Fill) -> ExtraInput {
        ExtraInput { name: name.to_string(), axes, fill }
    }

    pub fn shape(&self, dims: &AttnDims) -> Vec<Dim> {
        self.axes.iter().map(|&k| dims.dim(k)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSpec {
    pub name: String,
    pub pattern: Pattern,
    pub dims: AttnDims,
    pub q_mod: Option<ModificationFn>,
    pub k_mod: Option<ModificationFn>,
    pub v_mod: Option<ModificationFn>,
    /// Applied to the score block in order; masks are flagged.
    pub score_mods: Vec<ModificationFn>,
    pub rownorm: Option<RowNorm>,
    pub output_mod: Option<ModificationFn>,
    pub h_mod: Option<ModificationFn>,
    pub extras: Vec<ExtraInput>,
}

impl AttentionSpec {
    /// Plain bilinear form `(Q K^T) V` with no customizations.
    pub fn new(name: &str, pattern: Pattern, dims: AttnDims) -> AttentionSpec {
        AttentionSpec {
            name: name.to_string(),
            pattern,
            dims,
            q_mod: None,
            k_mod: None,
            v_mod: None,
            score_mods: Vec::new(),
            rownorm: None,
            output_mod: None,
            h_mod: None,
            extras: Vec::new(),
        }
    }

    pub fn with_dims(&self, dims: AttnDims) -> AttentionSpec {
        AttentionSpec { dims, ..self.clone() }
    }

    pub fn online(&self) -> Option<&OnlineRowNorm> {
        self.rownorm.as_ref().and_then(|r| r.online.as_ref())
    }

    pub fn direct(&self) -> Option<&DirectRowNorm> {
        self.rownorm.as_ref().and_then(|r| r.direct.as_ref())
    }

    /// Whether the variant can run blockwise over keys.
    pub fn is_tileable(&self) -> bool {
        self.pattern == Pattern::Parallel && (self.rownorm.is_none() || self.online().is_some())
    }

    pub fn extra(&self, name: &str) -> Option<&ExtraInput> {
        self.extras.iter().find(|e| e.name == name)
    }

    pub(crate) fn score_mods_use(&self, name: &str) -> bool {
        self.score_mods.iter().any(|m| m.expr.mentions(name))
    }

    /// Whether an exponential-family function consumes the scores after
    /// score modification `index`; decides between `-inf` and `0` mask fill.
    pub(crate) fn exp_downstream_of(&self, index: usize) -> bool {
        let exp_like = |e: &Expr| e.calls(Func::Exp) || e.calls(Func::Exp2) || e.calls(Func::Sigmoid);
        self.score_mods[index + 1..].iter().any(|m| !m.ismask && exp_like(&m.expr))
            || self.rownorm.as_ref().is_some_and(|r| r.exprs().into_iter().any(exp_like))
    }

    /// Structural checks that do not need graph construction.
    pub fn validate(&self) -> Result<(), SpecError> {
        self.dims.validate()?;
        let mut seen = std::collections::HashSet::new();
        for e in &self.extras {
            if is_reserved(&e.name) || !seen.insert(e.name.as_str()) || crate::expr::Func::from_name(&e.name).is_some()
            {
                return Err(SpecError::ReservedName(e.name.clone()));
            }
            if e.axes.iter().any(|k| matches!(k, DimKind::Batch | DimKind::Heads)) {
                return Err(SpecError::InvalidDims(format!("extra `{}` may not use batch/heads axes", e.name)));
            }
        }
        for m in [&self.q_mod, &self.k_mod, &self.v_mod, &self.output_mod, &self.h_mod].into_iter().flatten() {
            if m.ismask {
                return Err(SpecError::InvalidMask("masks are only allowed among score modifications".into()));
            }
            if m.expr.has_reduce() {
                return Err(SpecError::expr(
                    &m.expr.to_string(),
                    ExprError::ReduceInElementwiseContext("row reduction".into()),
                ));
            }
        }
        for m in &self.score_mods {
            if m.expr.has_reduce() {
                return Err(SpecError::expr(
                    &m.expr.to_string(),
                    ExprError::ReduceInElementwiseContext("row reduction".into()),
                ));
            }
        }
        match self.pattern {
            Pattern::Parallel => {
                if self.h_mod.is_some() {
                    return Err(SpecError::PatternMismatch("parallel variants take no h_mod".into()));
                }
            }
            Pattern::Recurrent => {
                if self.rownorm.is_some() {
                    return Err(SpecError::PatternMismatch(
                        "recurrent variants fold normalization into h_mod; rownorm is not supported".into(),
                    ));
                }
                if !self.score_mods.is_empty() {
                    return Err(SpecError::PatternMismatch("recurrent variants take no score modifications".into()));
                }
                if self.dims.seq_q != self.dims.seq_k {
                    return Err(SpecError::InvalidDims("recurrent variants need seq_q == seq_k".into()));
                }
            }
        }
        if let Some(o) = self.online() {
            validate_online(o)?;
        }
        Ok(())
    }
}

fn validate_online(o: &OnlineRowNorm) -> Result<(), SpecError> {
    let mut names = std::collections::HashSet::new();
    for r in &o.rowscales {
        if is_reserved(r) || !names.insert(r.as_str()) {
            return Err(SpecError::InvalidRowNorm(format!("invalid rowscale name `{r}`")));
        }
    }
    for r in &o.rowscales {
        if !o.prologue.iter().any(|a| &a.name == r) {
            return Err(SpecError::InvalidRowNorm(format!("rowscale `{r}` has no prologue initializer")));
        }
    }
    for a in &o.prologue {
        if !o.rowscales.contains(&a.name) {
            return Err(SpecError::InvalidRowNorm(format!("prologue assigns unknown rowscale `{}`", a.name)));
        }
    }
    for a in &o.fwd {
        if matches!(a.name.as_str(), "acc" | "o")
            || (is_reserved(&a.name) && !matches!(a.name.as_str(), "scores" | "rescale"))
        {
            return Err(SpecError::InvalidRowNorm(format!("fwd may not assign `{}`", a.name)));
        }
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
    #[error("in `{source_text}`: {error}")]
    Expr { source_text: String, error: ExprError },
    #[error("`{name}` is referenced in {context} but not declared as an extra input")]
    MissingExtraInput { name: String, context: String },
    #[error("shape-inconsistent fragment in {context}: {error}")]
    ShapeInconsistent { context: String, error: GraphError },
    #[error("{0}")]
    PatternMismatch(String),
    #[error("h_mod is required when a `decay` extra input is declared")]
    HModMissing,
    #[error("invalid dims: {0}")]
    InvalidDims(String),
    #[error("invalid row normalization: {0}")]
    InvalidRowNorm(String),
    #[error("invalid mask `{0}`: masks compute a keep-indicator and may not read scores")]
    InvalidMask(String),
    #[error("name `{0}` is reserved or declared twice")]
    ReservedName(String),
    #[error("variant file: {0}")]
    File(String),
}

impl SpecError {
    pub(crate) fn expr(source: &str, error: ExprError) -> SpecError {
        SpecError::Expr { source_text: source.to_string(), error }
    }

    /// Maps lowering failures to spec-level diagnostics for `context`.
    pub(crate) fn lowering(context: &str, expr: &Expr, error: ExprError) -> SpecError {
        match error {
            ExprError::UnboundVariable(name) => SpecError::MissingExtraInput { name, context: context.to_string() },
            ExprError::Graph(error) => SpecError::ShapeInconsistent { context: context.to_string(), error },
            error => SpecError::Expr { source_text: expr.to_string(), error },
        }
    }
}

impl From<GraphError> for SpecError {
    fn from(error: GraphError) -> SpecError {
        SpecError::ShapeInconsistent { context: "template".into(), error }
    }
}
