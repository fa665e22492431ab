//! Loss stream parsing.
//!
//! Each non-empty line not starting with `#` is either a bare number, a
//! `{"loss": z}` object, or a prediction record
//! `{"pred": ..., "label": y, "loss_kind": "...", "costs": [...]}` where
//! `pred` is a class index, a probability vector, or `{"set": [..]}`.

use std::io::BufRead;

use anyhow::{anyhow, bail, Context, Result};
use riskmon::losses::{CostVector, LabelDistribution, LossKind, Prediction, PredictionRecord};
use serde::Deserialize;
use serde_json::Value;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    loss: Option<f64>,
    pred: Option<Value>,
    label: Option<usize>,
    loss_kind: Option<String>,
    costs: Option<Vec<f64>>,
}

fn parse_prediction(v: &Value) -> Result<Prediction> {
    match v {
        Value::Number(n) => {
            let k = n
                .as_u64()
                .ok_or_else(|| anyhow!("pred label must be a nonnegative integer"))?;
            Ok(Prediction::Label(k as usize))
        }
        Value::Array(xs) => {
            let probs = xs
                .iter()
                .map(|x| {
                    x.as_f64()
                        .ok_or_else(|| anyhow!("pred probabilities must be numbers"))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Prediction::Distribution(LabelDistribution::new(probs)?))
        }
        Value::Object(m) => {
            let set = m
                .get("set")
                .and_then(Value::as_array)
                .filter(|_| m.len() == 1)
                .ok_or_else(|| anyhow!("object pred must be {{\"set\": [..]}}"))?;
            let set = set
                .iter()
                .map(|x| {
                    x.as_u64()
                        .map(|k| k as usize)
                        .ok_or_else(|| anyhow!("set members must be nonnegative integers"))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Prediction::Set(set))
        }
        _ => bail!("pred must be an integer, an array of probabilities or a set object"),
    }
}

fn parse_kind(name: &str, costs: Option<Vec<f64>>) -> Result<LossKind> {
    let kind = match name {
        "misclassification" | "0-1" => LossKind::Misclassification,
        "weighted_misclassification" | "weighted" => {
            let c = costs.ok_or_else(|| anyhow!("weighted_misclassification needs costs"))?;
            return Ok(LossKind::WeightedMisclassification(CostVector::new(c)?));
        }
        "brier" => LossKind::Brier,
        "top_label_brier" => LossKind::TopLabelBrier,
        "true_class_brier" => LossKind::TrueClassBrier,
        "miscoverage" => LossKind::Miscoverage,
        other => bail!("unknown loss_kind {other:?}"),
    };
    if costs.is_some() {
        bail!("costs only apply to weighted_misclassification");
    }
    Ok(kind)
}

/// Converts one line to a loss, or `None` for blank and comment lines.
pub fn parse_line(line: &str, num_classes: usize) -> Result<Option<f64>> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let loss = if line.starts_with('{') {
        let raw: RawRecord = serde_json::from_str(line)?;
        match raw {
            RawRecord {
                loss: Some(z),
                pred: None,
                label: None,
                loss_kind: None,
                costs: None,
            } => z,
            RawRecord {
                loss: None,
                pred: Some(pred),
                label: Some(label),
                loss_kind: Some(kind),
                costs,
            } => {
                let record = PredictionRecord {
                    prediction: parse_prediction(&pred)?,
                    true_label: label,
                };
                parse_kind(&kind, costs)?.evaluate(&record, num_classes)?
            }
            _ => bail!("expected either {{loss}} or {{pred, label, loss_kind}}"),
        }
    } else {
        line.parse::<f64>()
            .map_err(|_| anyhow!("not a number: {line:?}"))?
    };
    if !(0.0..=1.0).contains(&loss) {
        bail!("loss {loss} is outside [0, 1]");
    }
    Ok(Some(loss))
}

/// Iterates losses with 1-based line numbers attached to errors.
pub fn losses<R: BufRead>(reader: R, num_classes: usize) -> impl Iterator<Item = Result<f64>> {
    reader.lines().enumerate().filter_map(move |(i, line)| {
        let n = i + 1;
        match line.with_context(|| format!("line {n}: read failed")) {
            Err(e) => Some(Err(e)),
            Ok(l) => parse_line(&l, num_classes)
                .with_context(|| format!("line {n}"))
                .transpose(),
        }
    })
}

pub fn read_all<R: BufRead>(reader: R, num_classes: usize) -> Result<Vec<f64>> {
    losses(reader, num_classes).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_and_object_losses() {
        assert_eq!(parse_line("0.25", 2).unwrap(), Some(0.25));
        assert_eq!(parse_line(r#"{"loss": 1}"#, 2).unwrap(), Some(1.0));
        assert_eq!(parse_line("   ", 2).unwrap(), None);
        assert_eq!(parse_line("# comment", 2).unwrap(), None);
    }

    #[test]
    fn prediction_records() {
        let l = |s: &str| parse_line(s, 3).unwrap().unwrap();
        assert_eq!(
            l(r#"{"pred": 1, "label": 2, "loss_kind": "misclassification"}"#),
            1.0
        );
        assert_eq!(
            l(r#"{"pred": 2, "label": 2, "loss_kind": "misclassification"}"#),
            0.0
        );
        let b = l(r#"{"pred": [0.5, 0.5], "label": 0, "loss_kind": "brier"}"#);
        assert!((b - 0.25).abs() < 1e-15);
        assert_eq!(
            l(r#"{"pred": {"set": [0, 1]}, "label": 2, "loss_kind": "miscoverage"}"#),
            1.0
        );
        let w = l(
            r#"{"pred": 0, "label": 1, "loss_kind": "weighted_misclassification", "costs": [1, 2, 4]}"#,
        );
        assert_eq!(w, 0.5);
    }

    #[test]
    fn malformed_records_are_rejected() {
        for bad in [
            "abc",
            "1.5",
            r#"{"loss": -0.1}"#,
            r#"{"loss": 0.1, "label": 1}"#,
            r#"{"pred": 0, "label": 1}"#,
            r#"{"pred": 0, "label": 1, "loss_kind": "nope"}"#,
            r#"{"pred": 0, "label": 1, "loss_kind": "brier"}"#,
            r#"{"pred": 0, "label": 5, "loss_kind": "misclassification"}"#,
            r#"{"los": 0.1}"#,
            r#"{"pred": 0, "label": 1, "loss_kind": "misclassification", "costs": [1, 1]}"#,
        ] {
            assert!(parse_line(bad, 3).is_err(), "{bad}");
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "0.1\n\n# skip\nfoo\n";
        let err = read_all(text.as_bytes(), 2).unwrap_err();
        assert!(format!("{err:#}").starts_with("line 4"), "{err:#}");
    }
}
