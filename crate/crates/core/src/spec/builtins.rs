//! Built-in variants with head/dimension configurations of the standard
//! microbenchmark suite. Sequence lengths default to 2048, batch to 1.

use super::{
    Assignment, AttentionSpec, AttnDims, DirectRowNorm, ExtraInput, Fill, ModificationFn, OnlineRowNorm, Pattern,
    RowNorm, SpecError,
};
use crate::expr::parse_str;
use crate::graph::DimKind;

pub const BUILTIN_NAMES: [&str; 9] = [
    "softmax",
    "softmax-deepseek",
    "softmax-diff",
    "sigmoid",
    "relu",
    "retention-parallel",
    "retention-recurrent",
    "gated-retention",
    "mamba2-ssm",
];

pub fn builtin_names() -> &'static [&'static str] {
    &BUILTIN_NAMES
}

const DEFAULT_SEQ: usize = 2048;

fn dims(heads: usize, dqk: usize, dv: usize) -> AttnDims {
    AttnDims { batch: 1, heads, seq_q: DEFAULT_SEQ, seq_k: DEFAULT_SEQ, dqk, dv }
}

fn m(src: &str) -> Option<ModificationFn> {
    Some(ModificationFn::parse(src).expect("builtin expression parses"))
}

fn steps(list: &[(&str, &str)]) -> Vec<Assignment> {
    list.iter().map(|(n, s)| Assignment::parse(n, s).expect("builtin expression parses")).collect()
}

/// Online softmax with exponential rescaling; fully masked rows produce zeros.
pub(crate) fn softmax_rownorm() -> RowNorm {
    RowNorm {
        online: Some(OnlineRowNorm {
            rowscales: vec!["m".into(), "l".into()],
            prologue: steps(&[("m", "-inf"), ("l", "0")]),
            fwd: steps(&[
                ("m_new", "max(m, reduceMax(scores))"),
                ("m_safe", "where(m_new > -inf, m_new, 0)"),
                ("rescale", "exp(m - m_safe)"),
                ("scores", "exp(scores - m_safe)"),
                ("l", "l * rescale + reduceSum(scores)"),
                ("m", "m_new"),
            ]),
            epilogue: parse_str("where(l > 0, acc / l, 0)").expect("builtin expression parses"),
        }),
        direct: Some(DirectRowNorm {
            steps: steps(&[
                ("p", "exp(scores - max(reduceMax(scores), -1e300))"),
                ("l", "reduceSum(p)"),
                ("scores", "where(l > 0, p / l, 0)"),
            ]),
        }),
    }
}

/// `scores / clamp(reduceAbssum(scores), 1, inf)` in both forms.
pub(crate) fn abssum_rownorm() -> RowNorm {
    RowNorm {
        online: Some(OnlineRowNorm {
            rowscales: vec!["a".into()],
            prologue: steps(&[("a", "0")]),
            fwd: steps(&[("a", "a + reduceAbssum(scores)")]),
            epilogue: parse_str("acc / clamp(a, 1, inf)").expect("builtin expression parses"),
        }),
        direct: Some(DirectRowNorm::parse("scores / clamp(reduceAbssum(scores), 1, inf)").expect("parses")),
    }
}

fn softmax_like(name: &str, d: AttnDims) -> AttentionSpec {
    AttentionSpec {
        q_mod: m("q / sqrt(dqk)"),
        rownorm: Some(softmax_rownorm()),
        ..AttentionSpec::new(name, Pattern::Parallel, d)
    }
}

pub fn builtin(name: &str) -> Result<AttentionSpec, SpecError> {
    let spec = match name {
        "softmax" => softmax_like(name, dims(32, 128, 128)),
        "softmax-deepseek" => softmax_like(name, dims(16, 192, 128)),
        "softmax-diff" => softmax_like(name, dims(12, 128, 256)),
        "sigmoid" => AttentionSpec {
            q_mod: m("q / sqrt(dqk)"),
            score_mods: vec![m("sigmoid(scores - log(seq_k))").unwrap()],
            ..AttentionSpec::new(name, Pattern::Parallel, dims(32, 128, 128))
        },
        "relu" => AttentionSpec {
            q_mod: m("q / sqrt(dqk)"),
            score_mods: vec![m("max(scores, 0)").unwrap()],
            ..AttentionSpec::new(name, Pattern::Parallel, dims(6, 64, 64))
        },
        "retention-parallel" => AttentionSpec {
            k_mod: m("k / sqrt(dqk)"),
            score_mods: vec![m("scores * mask").unwrap()],
            rownorm: Some(abssum_rownorm()),
            extras: vec![ExtraInput::new("mask", [DimKind::SeqQ, DimKind::SeqK], Fill::RetentionMask)],
            ..AttentionSpec::new(name, Pattern::Parallel, dims(32, 256, 512))
        },
        "retention-recurrent" => AttentionSpec {
            k_mod: m("k / sqrt(dqk)"),
            h_mod: m("h * decay"),
            extras: vec![ExtraInput::new("decay", [DimKind::SeqK, DimKind::One], Fill::RetentionDecay)],
            ..AttentionSpec::new(name, Pattern::Recurrent, dims(32, 256, 512))
        },
        "gated-retention" => AttentionSpec {
            k_mod: m("k / sqrt(dqk)"),
            h_mod: m("h * exp(log(sigmoid(gate)) / 16)"),
            extras: vec![ExtraInput::new("gate", [DimKind::SeqK, DimKind::One], Fill::Uniform { lo: -1.0, hi: 1.0 })],
            ..AttentionSpec::new(name, Pattern::Recurrent, dims(40, 256, 256))
        },
        "mamba2-ssm" => AttentionSpec {
            k_mod: m("k * gate"),
            h_mod: m("h * decay * gate"),
            extras: vec![
                ExtraInput::new("gate", [DimKind::SeqK, DimKind::One], Fill::Uniform { lo: 0.1, hi: 1.0 }),
                ExtraInput::new("decay", [DimKind::SeqK, DimKind::One], Fill::Uniform { lo: 0.5, hi: 1.0 }),
            ],
            ..AttentionSpec::new(name, Pattern::Recurrent, dims(80, 128, 64))
        },
        other => return Err(SpecError::UnknownVariant(other.to_string())),
    };
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_dims() {
        let s = builtin("softmax").unwrap().dims;
        assert_eq!((s.heads, s.dqk, s.dv), (32, 128, 128));
        let d = builtin("softmax-deepseek").unwrap().dims;
        assert_eq!((d.heads, d.dqk, d.dv), (16, 192, 128));
        let d = builtin("softmax-diff").unwrap().dims;
        assert_eq!((d.dqk, d.dv), (128, 256));
        assert_eq!(builtin("mamba2-ssm").unwrap().dims.heads, 80);
    }

    #[test]
    fn every_builtin_validates() {
        assert_eq!(builtin_names().len(), 9);
        for n in builtin_names() {
            let s = builtin(n).unwrap();
            s.validate().unwrap();
            assert_eq!(s.name, *n);
        }
        assert!(matches!(builtin("flash"), Err(SpecError::UnknownVariant(_))));
    }

    #[test]
    fn retention_parallel_rownorm_is_abssum_clamp() {
        let s = builtin("retention-parallel").unwrap();
        assert_eq!(s.score_mods[0].expr.to_string(), "scores * mask");
        let direct = s.direct().unwrap();
        assert_eq!(direct.steps[0].expr.to_string(), "scores / clamp(reduceAbssum(scores), 1.0, inf)");
    }
}
