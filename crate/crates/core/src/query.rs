//! Declarative query documents.
//!
//! Custodians whitelist named queries; callers only ever supply a query name
//! and parameter values. A document is a predicate tree over payload fields,
//! a projection list and an optional aggregation.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueryError {
    #[error("query not approved: {0}")]
    NotApproved(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("parameter {name} must be a {expected}")]
    ParamType { name: String, expected: &'static str },
    #[error("unexpected parameter {0}")]
    UnexpectedParam(String),
    #[error("malformed query document: {0}")]
    Malformed(String),
    #[error("field {0} is identifying and cannot appear in a query")]
    IdentifyingField(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Number,
    String,
    Bool,
}

impl ParamKind {
    fn name(self) -> &'static str {
        match self {
            ParamKind::Number => "number",
            ParamKind::String => "string",
            ParamKind::Bool => "bool",
        }
    }

    fn accepts(self, v: &Value) -> bool {
        match self {
            ParamKind::Number => v.is_number(),
            ParamKind::String => v.is_string(),
            ParamKind::Bool => v.is_boolean(),
        }
    }
}

/// A literal value or a reference to a caller-supplied parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operand {
    Value(Value),
    Param(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Predicate {
    All,
    Cmp { field: String, cmp: CmpOp, value: Operand },
    Exists { field: String },
    And { clauses: Vec<Predicate> },
    Or { clauses: Vec<Predicate> },
    Not { clause: Box<Predicate> },
}

impl Predicate {
    pub fn eq(field: &str, value: impl Into<Value>) -> Self {
        Predicate::Cmp { field: field.into(), cmp: CmpOp::Eq, value: Operand::Value(value.into()) }
    }

    fn visit<'a>(&'a self, fields: &mut Vec<&'a str>, params: &mut Vec<&'a str>) {
        match self {
            Predicate::All => {}
            Predicate::Cmp { field, value, .. } => {
                fields.push(field);
                if let Operand::Param(p) = value {
                    params.push(p);
                }
            }
            Predicate::Exists { field } => fields.push(field),
            Predicate::And { clauses } | Predicate::Or { clauses } => {
                for c in clauses {
                    c.visit(fields, params);
                }
            }
            Predicate::Not { clause } => clause.visit(fields, params),
        }
    }

    /// Field names and parameter names mentioned anywhere in the tree.
    pub fn references(&self) -> (Vec<&str>, Vec<&str>) {
        let mut fields = Vec::new();
        let mut params = Vec::new();
        self.visit(&mut fields, &mut params);
        (fields, params)
    }

    /// Evaluates against a payload. Parameters must already be checked.
    pub fn matches(&self, payload: &BTreeMap<String, Value>, params: &BTreeMap<String, Value>) -> bool {
        match self {
            Predicate::All => true,
            Predicate::Exists { field } => payload.contains_key(field),
            Predicate::Cmp { field, cmp, value } => {
                let Some(actual) = payload.get(field) else { return false };
                let expected = match value {
                    Operand::Value(v) => v,
                    Operand::Param(p) => match params.get(p) {
                        Some(v) => v,
                        None => return false,
                    },
                };
                compare(actual, *cmp, expected)
            }
            Predicate::And { clauses } => clauses.iter().all(|c| c.matches(payload, params)),
            Predicate::Or { clauses } => clauses.iter().any(|c| c.matches(payload, params)),
            Predicate::Not { clause } => !clause.matches(payload, params),
        }
    }
}

fn order(a: &Value, b: &Value) -> Option<Ordering> {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => x.as_f64()?.partial_cmp(&y.as_f64()?),
        (Value::String(x), Value::String(y)) => Some(x.cmp(y)),
        (Value::Bool(x), Value::Bool(y)) => Some(x.cmp(y)),
        _ => None,
    }
}

fn compare(actual: &Value, cmp: CmpOp, expected: &Value) -> bool {
    let Some(o) = order(actual, expected) else {
        return matches!(cmp, CmpOp::Ne);
    };
    match cmp {
        CmpOp::Eq => o == Ordering::Equal,
        CmpOp::Ne => o != Ordering::Equal,
        CmpOp::Lt => o == Ordering::Less,
        CmpOp::Le => o != Ordering::Greater,
        CmpOp::Gt => o == Ordering::Greater,
        CmpOp::Ge => o != Ordering::Less,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of a numeric field over matching records; returns no rows.
    Mean { field: String },
    /// Number of matching records; returns no rows.
    Count,
    /// Rows whose `field` is within the top `percent` of matching records.
    TopPercentile { field: String, percent: Operand },
}

/// A whitelisted named query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDocument {
    pub name: String,
    #[serde(default)]
    pub schema_tag: Option<String>,
    #[serde(default)]
    pub params: BTreeMap<String, ParamKind>,
    pub predicate: Predicate,
    #[serde(default)]
    pub projection: Vec<String>,
    #[serde(default)]
    pub aggregation: Option<Aggregation>,
}

impl QueryDocument {
    /// Structural validation against the identifying-field denylist.
    pub fn validate(&self, denylist: &[String]) -> Result<(), QueryError> {
        if self.name.trim().is_empty() {
            return Err(QueryError::Malformed("empty query name".into()));
        }
        let (mut fields, mut params) = self.predicate.references();
        fields.extend(self.projection.iter().map(String::as_str));
        match &self.aggregation {
            Some(Aggregation::Mean { field }) => fields.push(field),
            Some(Aggregation::TopPercentile { field, percent }) => {
                fields.push(field);
                if let Operand::Param(p) = percent {
                    params.push(p);
                }
            }
            Some(Aggregation::Count) | None => {}
        }
        if let Some(f) = fields.iter().find(|f| denylist.iter().any(|d| d == *f)) {
            return Err(QueryError::IdentifyingField(f.to_string()));
        }
        if let Some(f) = fields.iter().find(|f| f.is_empty()) {
            return Err(QueryError::Malformed(format!("empty field name {f:?}")));
        }
        if let Some(p) = params.iter().find(|p| !self.params.contains_key(**p)) {
            return Err(QueryError::Malformed(format!("undeclared parameter {p}")));
        }
        Ok(())
    }

    /// Checks caller-supplied parameters against the declared kinds.
    pub fn check_params(&self, params: &BTreeMap<String, Value>) -> Result<(), QueryError> {
        for (name, kind) in &self.params {
            let v = params.get(name).ok_or_else(|| QueryError::MissingParam(name.clone()))?;
            if !kind.accepts(v) {
                return Err(QueryError::ParamType { name: name.clone(), expected: kind.name() });
            }
        }
        if let Some(extra) = params.keys().find(|k| !self.params.contains_key(*k)) {
            return Err(QueryError::UnexpectedParam(extra.clone()));
        }
        Ok(())
    }

    fn resolve_number(&self, op: &Operand, params: &BTreeMap<String, Value>) -> Option<f64> {
        match op {
            Operand::Value(v) => v.as_f64(),
            Operand::Param(p) => params.get(p)?.as_f64(),
        }
    }

    /// Runs the document over `(key, payload)` candidates.
    ///
    /// Candidates must already be filtered by schema tag. Returns the indices
    /// of selected candidates in input order, plus the aggregate value.
    pub fn evaluate<K>(
        &self,
        candidates: &[(K, &BTreeMap<String, Value>)],
        params: &BTreeMap<String, Value>,
    ) -> (Vec<usize>, Option<f64>) {
        let matching: Vec<usize> = candidates
            .iter()
            .enumerate()
            .filter(|(_, (_, p))| self.predicate.matches(p, params))
            .map(|(i, _)| i)
            .collect();
        match &self.aggregation {
            None => (matching, None),
            Some(Aggregation::Count) => (Vec::new(), Some(matching.len() as f64)),
            Some(Aggregation::Mean { field }) => {
                let values: Vec<f64> =
                    matching.iter().filter_map(|&i| candidates[i].1.get(field)?.as_f64()).collect();
                let mean = if values.is_empty() {
                    None
                } else {
                    Some(values.iter().sum::<f64>() / values.len() as f64)
                };
                (Vec::new(), mean)
            }
            Some(Aggregation::TopPercentile { field, percent }) => {
                let percent = self.resolve_number(percent, params).unwrap_or(0.0).clamp(0.0, 100.0);
                let mut scored: Vec<(usize, f64)> = matching
                    .iter()
                    .filter_map(|&i| Some((i, candidates[i].1.get(field)?.as_f64()?)))
                    .collect();
                scored.sort_by(|a, b| b.1.total_cmp(&a.1));
                let take = ((scored.len() as f64) * percent / 100.0).ceil() as usize;
                if take == 0 {
                    return (Vec::new(), None);
                }
                let threshold = scored[take - 1].1;
                let mut chosen: Vec<usize> =
                    scored.iter().filter(|(_, v)| *v >= threshold).map(|(i, _)| *i).collect();
                chosen.sort_unstable();
                (chosen, None)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn payload(v: Value) -> BTreeMap<String, Value> {
        serde_json::from_value(v).unwrap()
    }

    #[test]
    fn predicate_json_shape() {
        let p: Predicate = serde_json::from_value(json!({
            "op": "and",
            "clauses": [
                {"op": "cmp", "field": "course", "cmp": "eq", "value": {"value": "CS101"}},
                {"op": "cmp", "field": "mark", "cmp": "ge", "value": {"param": "min"}}
            ]
        }))
        .unwrap();
        let params = payload(json!({"min": 70}));
        assert!(p.matches(&payload(json!({"course": "CS101", "mark": 75})), &params));
        assert!(!p.matches(&payload(json!({"course": "CS101", "mark": 65})), &params));
        assert!(!p.matches(&payload(json!({"course": "CS102", "mark": 95})), &params));
    }

    #[test]
    fn type_mismatch_only_satisfies_ne() {
        let p = Predicate::Cmp { field: "mark".into(), cmp: CmpOp::Gt, value: Operand::Value(json!(5)) };
        assert!(!p.matches(&payload(json!({"mark": "high"})), &BTreeMap::new()));
        let p = Predicate::Cmp { field: "mark".into(), cmp: CmpOp::Ne, value: Operand::Value(json!(5)) };
        assert!(p.matches(&payload(json!({"mark": "high"})), &BTreeMap::new()));
    }

    #[test]
    fn validation_rejects_identifying_fields_and_undeclared_params() {
        let deny = vec!["name".to_string()];
        let mut doc = QueryDocument {
            name: "q".into(),
            schema_tag: None,
            params: BTreeMap::new(),
            predicate: Predicate::eq("name", "x"),
            projection: vec![],
            aggregation: None,
        };
        assert_eq!(doc.validate(&deny), Err(QueryError::IdentifyingField("name".into())));
        doc.predicate = Predicate::Cmp { field: "mark".into(), cmp: CmpOp::Eq, value: Operand::Param("p".into()) };
        assert!(matches!(doc.validate(&deny), Err(QueryError::Malformed(_))));
        doc.params.insert("p".into(), ParamKind::Number);
        assert_eq!(doc.validate(&deny), Ok(()));
        doc.projection = vec!["name".into()];
        assert!(doc.validate(&deny).is_err());
    }

    #[test]
    fn params_are_type_checked() {
        let mut doc = QueryDocument {
            name: "q".into(),
            schema_tag: None,
            params: BTreeMap::new(),
            predicate: Predicate::All,
            projection: vec![],
            aggregation: None,
        };
        doc.params.insert("p".into(), ParamKind::Number);
        assert!(doc.check_params(&payload(json!({"p": 3}))).is_ok());
        assert!(matches!(doc.check_params(&payload(json!({"p": "3"}))), Err(QueryError::ParamType { .. })));
        assert!(matches!(doc.check_params(&BTreeMap::new()), Err(QueryError::MissingParam(_))));
        assert!(matches!(
            doc.check_params(&payload(json!({"p": 3, "q": 1}))),
            Err(QueryError::UnexpectedParam(_))
        ));
    }

    #[test]
    fn top_percentile_of_distinct_values() {
        let doc = QueryDocument {
            name: "top".into(),
            schema_tag: None,
            params: [("p".to_string(), ParamKind::Number)].into(),
            predicate: Predicate::All,
            projection: vec!["mark".into()],
            aggregation: Some(Aggregation::TopPercentile { field: "mark".into(), percent: Operand::Param("p".into()) }),
        };
        let payloads: Vec<BTreeMap<String, Value>> = (0..100).map(|m| payload(json!({"mark": (m * 7) % 100}))).collect();
        let cands: Vec<(usize, &BTreeMap<String, Value>)> = payloads.iter().enumerate().collect();
        let (rows, agg) = doc.evaluate(&cands, &payload(json!({"p": 5})));
        assert_eq!(agg, None);
        let mut marks: Vec<i64> = rows.iter().map(|&i| payloads[i]["mark"].as_i64().unwrap()).collect();
        marks.sort_unstable();
        assert_eq!(marks, vec![95, 96, 97, 98, 99]);
    }
}
