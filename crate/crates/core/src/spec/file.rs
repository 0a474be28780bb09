//! JSON variant-definition files. Expression leaves are `expr` source strings;
//! object key order is significant for ordered assignments.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{
    Assignment, AttentionSpec, AttnDims, DirectRowNorm, ExtraInput, Fill, ModificationFn, OnlineRowNorm, Pattern,
    RowNorm, SpecError,
};
use crate::graph::DimKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimsDef {
    #[serde(default = "one")]
    pub batch: usize,
    pub heads: usize,
    pub seq_q: usize,
    pub seq_k: usize,
    pub dqk: usize,
    pub dv: usize,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantFile {
    pub name: String,
    pub pattern: Pattern,
    pub dims: DimsDef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_mod: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_mod: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_mod: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_mod: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub masks: Vec<MaskDef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rownorm: Option<RowNormDef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_mod: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_mod: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extras: Vec<ExtraDef>,
}

/// Score modification applied after `score_mod`, in list order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskDef {
    pub expr: String,
    #[serde(default = "yes")]
    pub ismask: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowNormDef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direct: Option<DirectDef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub online: Option<OnlineDef>,
}

/// Either a single expression over `scores`, or ordered assignments whose
/// final `scores` is the result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DirectDef {
    Expr(String),
    Steps(IndexMap<String, String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineDef {
    pub rowscales: Vec<String>,
    pub prologue: IndexMap<String, String>,
    pub fwd: IndexMap<String, String>,
    pub epilogue: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    SeqQ,
    SeqK,
    Dqk,
    Dv,
    One,
}

impl From<Axis> for DimKind {
    fn from(a: Axis) -> DimKind {
        match a {
            Axis::SeqQ => DimKind::SeqQ,
            Axis::SeqK => DimKind::SeqK,
            Axis::Dqk => DimKind::DimQK,
            Axis::Dv => DimKind::DimV,
            Axis::One => DimKind::One,
        }
    }
}

fn axis_of(k: DimKind) -> Axis {
    match k {
        DimKind::SeqQ => Axis::SeqQ,
        DimKind::SeqK => Axis::SeqK,
        DimKind::DimQK => Axis::Dqk,
        DimKind::DimV => Axis::Dv,
        _ => Axis::One,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtraDef {
    pub name: String,
    pub shape: [Axis; 2],
    #[serde(default)]
    pub fill: Fill,
}

fn steps(map: &IndexMap<String, String>) -> Result<Vec<Assignment>, SpecError> {
    map.iter().map(|(n, s)| Assignment::parse(n, s)).collect()
}

fn unsteps(list: &[Assignment]) -> IndexMap<String, String> {
    list.iter().map(|a| (a.name.clone(), a.expr.to_string())).collect()
}

fn opt_mod(src: &Option<String>) -> Result<Option<ModificationFn>, SpecError> {
    src.as_deref().map(ModificationFn::parse).transpose()
}

impl VariantFile {
    pub fn from_json(text: &str) -> Result<VariantFile, SpecError> {
        serde_json::from_str(text).map_err(|e| SpecError::File(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("variant files serialize")
    }

    pub fn to_spec(&self) -> Result<AttentionSpec, SpecError> {
        let d = &self.dims;
        let dims = AttnDims { batch: d.batch, heads: d.heads, seq_q: d.seq_q, seq_k: d.seq_k, dqk: d.dqk, dv: d.dv };
        let mut score_mods = Vec::new();
        if let Some(s) = &self.score_mod {
            score_mods.push(ModificationFn::parse(s)?);
        }
        for m in &self.masks {
            score_mods.push(if m.ismask { ModificationFn::mask(&m.expr)? } else { ModificationFn::parse(&m.expr)? });
        }
        let rownorm = match &self.rownorm {
            None => None,
            Some(r) => {
                if r.direct.is_none() && r.online.is_none() {
                    return Err(SpecError::InvalidRowNorm("rownorm needs `direct` or `online`".into()));
                }
                let direct = match &r.direct {
                    None => None,
                    Some(DirectDef::Expr(s)) => Some(DirectRowNorm::parse(s)?),
                    Some(DirectDef::Steps(map)) => {
                        if map.keys().last().map(String::as_str) != Some("scores") {
                            return Err(SpecError::InvalidRowNorm("direct assignments must end with `scores`".into()));
                        }
                        Some(DirectRowNorm { steps: steps(map)? })
                    }
                };
                let online = match &r.online {
                    None => None,
                    Some(o) => Some(OnlineRowNorm {
                        rowscales: o.rowscales.clone(),
                        prologue: steps(&o.prologue)?,
                        fwd: steps(&o.fwd)?,
                        epilogue: crate::expr::parse_str(&o.epilogue).map_err(|e| SpecError::expr(&o.epilogue, e))?,
                    }),
                };
                Some(RowNorm { online, direct })
            }
        };
        let spec = AttentionSpec {
            name: self.name.clone(),
            pattern: self.pattern,
            dims,
            q_mod: opt_mod(&self.q_mod)?,
            k_mod: opt_mod(&self.k_mod)?,
            v_mod: opt_mod(&self.v_mod)?,
            score_mods,
            rownorm,
            output_mod: opt_mod(&self.output_mod)?,
            h_mod: opt_mod(&self.h_mod)?,
            extras: self
                .extras
                .iter()
                .map(|e| ExtraInput::new(&e.name, [e.shape[0].into(), e.shape[1].into()], e.fill))
                .collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_spec(spec: &AttentionSpec) -> VariantFile {
        let text = |m: &Option<ModificationFn>| m.as_ref().map(|m| m.expr.to_string());
        let mut mods = spec.score_mods.iter();
        let mut score_mod = None;
        if let Some(first) = spec.score_mods.first() {
            if !first.ismask {
                score_mod = Some(first.expr.to_string());
                mods.next();
            }
        }
        let d = spec.dims;
        VariantFile {
            name: spec.name.clone(),
            pattern: spec.pattern,
            dims: DimsDef { batch: d.batch, heads: d.heads, seq_q: d.seq_q, seq_k: d.seq_k, dqk: d.dqk, dv: d.dv },
            q_mod: text(&spec.q_mod),
            k_mod: text(&spec.k_mod),
            v_mod: text(&spec.v_mod),
            score_mod,
            masks: mods.map(|m| MaskDef { expr: m.expr.to_string(), ismask: m.ismask }).collect(),
            rownorm: spec.rownorm.as_ref().map(|r| RowNormDef {
                direct: r.direct.as_ref().map(|d| match d.steps.as_slice() {
                    [only] if only.name == "scores" => DirectDef::Expr(only.expr.to_string()),
                    list => DirectDef::Steps(unsteps(list)),
                }),
                online: r.online.as_ref().map(|o| OnlineDef {
                    rowscales: o.rowscales.clone(),
                    prologue: unsteps(&o.prologue),
                    fwd: unsteps(&o.fwd),
                    epilogue: o.epilogue.to_string(),
                }),
            }),
            output_mod: text(&spec.output_mod),
            h_mod: text(&spec.h_mod),
            extras: spec
                .extras
                .iter()
                .map(|e| ExtraDef {
                    name: e.name.clone(),
                    shape: [axis_of(e.axes[0]), axis_of(e.axes[1])],
                    fill: e.fill,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::{builtin, builtin_names};

    #[test]
    fn builtins_round_trip_through_json() {
        for n in builtin_names() {
            let spec = builtin(n).unwrap();
            let text = VariantFile::from_spec(&spec).to_json();
            let back = VariantFile::from_json(&text).unwrap().to_spec().unwrap();
            assert_eq!(back, spec, "{n}");
        }
    }

    #[test]
    fn missing_dims_names_the_field() {
        let err = VariantFile::from_json(r#"{"name": "x", "pattern": "parallel"}"#).unwrap_err();
        assert!(err.to_string().contains("dims"), "{err}");
    }

    #[test]
    fn causal_mask_file() {
        let text = r#"{
            "name": "causal-relu",
            "pattern": "parallel",
            "dims": {"heads": 2, "seq_q": 16, "seq_k": 16, "dqk": 8, "dv": 8},
            "score_mod": "relu(scores)",
            "masks": [{"expr": "where(col_idx <= row_idx, 1, 0)", "ismask": true}]
        }"#;
        let spec = VariantFile::from_json(text).unwrap().to_spec().unwrap();
        assert_eq!(spec.dims.batch, 1);
        assert!(spec.score_mods[1].ismask);
        let bad = text.replace("where(col_idx <= row_idx, 1, 0)", "scores * 0");
        assert!(matches!(VariantFile::from_json(&bad).unwrap().to_spec(), Err(SpecError::InvalidMask(_))));
    }
}
