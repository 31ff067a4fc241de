//! Heterogeneous entity records and their special-token text form.
//!
//! Structured records become `[COL] name [VAL] value` runs, semi-structured
//! trees are flattened key by key, and raw text passes through untouched.
//! Entity pairs are wrapped as `[CLS] left [SEP] right [SEP]`.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::tokenizer::special::{CLS, COL, SEP, VAL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecordError {
    #[error("structured attribute names must be non-empty")]
    EmptyAttribute,
    #[error("duplicate structured attribute {0:?}")]
    DuplicateAttribute(String),
    #[error("value cannot be read as a {kind:?} record: {reason}")]
    KindMismatch { kind: RecordKind, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordKind {
    Structured,
    SemiStructured,
    Text,
}

/// A node of a semi-structured tree.
#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Null,
    Leaf(String),
    Map(Vec<(String, TreeNode)>),
    List(Vec<TreeNode>),
}

impl TreeNode {
    pub fn leaf(s: impl Into<String>) -> Self {
        TreeNode::Leaf(s.into())
    }

    pub fn map<K: Into<String>>(entries: impl IntoIterator<Item = (K, TreeNode)>) -> Self {
        TreeNode::Map(entries.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }

    pub fn list(items: impl IntoIterator<Item = TreeNode>) -> Self {
        TreeNode::List(items.into_iter().collect())
    }

    fn from_json(value: &Value) -> Self {
        match value {
            Value::Null => TreeNode::Null,
            Value::String(s) => TreeNode::Leaf(s.clone()),
            Value::Bool(_) | Value::Number(_) => TreeNode::Leaf(value.to_string()),
            Value::Array(items) => TreeNode::List(items.iter().map(Self::from_json).collect()),
            Value::Object(map) => TreeNode::Map(
                map.iter()
                    .map(|(k, v)| (k.clone(), Self::from_json(v)))
                    .collect(),
            ),
        }
    }

    /// Value form used under a `[VAL]` marker: nested maps become
    /// `key: value` pairs and list items are comma separated.
    fn flatten(&self) -> String {
        match self {
            TreeNode::Null => String::new(),
            TreeNode::Leaf(s) => normalize_ws(s),
            TreeNode::List(items) => items
                .iter()
                .map(TreeNode::flatten)
                .collect::<Vec<_>>()
                .join(", "),
            TreeNode::Map(entries) => entries
                .iter()
                .map(|(k, v)| format!("{}: {}", normalize_ws(k), v.flatten()))
                .collect::<Vec<_>>()
                .join(", "),
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            TreeNode::Null => Value::Null,
            TreeNode::Leaf(s) => Value::String(s.clone()),
            TreeNode::List(items) => Value::Array(items.iter().map(TreeNode::to_json).collect()),
            TreeNode::Map(entries) => Value::Object(entries.iter().map(|(k, v)| (k.clone(), v.to_json())).collect()),
        }
    }

    fn is_scalar(&self) -> bool {
        matches!(self, TreeNode::Null | TreeNode::Leaf(_))
    }
}

/// An entity in one of the three representations.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Structured(Vec<(String, String)>),
    SemiStructured(TreeNode),
    Text(String),
}

impl Record {
    /// Builds a structured record, rejecting empty or repeated names.
    pub fn structured<K, V>(fields: impl IntoIterator<Item = (K, V)>) -> Result<Self, RecordError>
    where
        K: Into<String>,
        V: Into<String>,
    {
        let fields: Vec<(String, String)> = fields
            .into_iter()
            .map(|(k, v)| (k.into(), v.into()))
            .collect();
        let mut seen = HashSet::new();
        for (name, _) in &fields {
            if name.trim().is_empty() {
                return Err(RecordError::EmptyAttribute);
            }
            if !seen.insert(name.as_str()) {
                return Err(RecordError::DuplicateAttribute(name.clone()));
            }
        }
        Ok(Record::Structured(fields))
    }

    pub fn semi_structured(tree: TreeNode) -> Self {
        Record::SemiStructured(tree)
    }

    pub fn text(s: impl Into<String>) -> Self {
        Record::Text(s.into())
    }

    pub fn kind(&self) -> RecordKind {
        match self {
            Record::Structured(_) => RecordKind::Structured,
            Record::SemiStructured(_) => RecordKind::SemiStructured,
            Record::Text(_) => RecordKind::Text,
        }
    }

    /// Infers the kind from JSON shape: an object of scalars is
    /// structured, any other object or array is semi-structured, and a
    /// string is text.
    pub fn from_json(value: &Value) -> Result<Self, RecordError> {
        match value {
            Value::String(s) => Ok(Record::Text(s.clone())),
            Value::Object(map) if map.values().all(|v| !v.is_object() && !v.is_array()) => {
                Record::structured(map.iter().map(|(k, v)| (k.clone(), scalar_string(v))))
            }
            Value::Object(_) | Value::Array(_) => Ok(Record::SemiStructured(TreeNode::from_json(value))),
            Value::Null => Ok(Record::Text(String::new())),
            Value::Bool(_) | Value::Number(_) => Ok(Record::Text(value.to_string())),
        }
    }

    /// JSON form that `from_json` maps back to the same record.
    pub fn to_json(&self) -> Value {
        match self {
            Record::Structured(fields) => Value::Object(
                fields
                    .iter()
                    .map(|(k, v)| (k.clone(), Value::String(v.clone())))
                    .collect(),
            ),
            Record::SemiStructured(tree) => tree.to_json(),
            Record::Text(s) => Value::String(s.clone()),
        }
    }

    /// Reads `value` as a specific kind instead of inferring it.
    pub fn from_json_as(value: &Value, kind: RecordKind) -> Result<Self, RecordError> {
        match kind {
            RecordKind::Structured => match TreeNode::from_json(value) {
                TreeNode::Map(entries) if entries.iter().all(|(_, v)| v.is_scalar()) => {
                    Record::structured(entries.into_iter().map(|(k, v)| {
                        let v = match v {
                            TreeNode::Leaf(s) => s,
                            _ => String::new(),
                        };
                        (k, v)
                    }))
                }
                _ => Err(RecordError::KindMismatch {
                    kind,
                    reason: "expected an object with scalar values".into(),
                }),
            },
            RecordKind::SemiStructured => Ok(Record::SemiStructured(TreeNode::from_json(value))),
            RecordKind::Text => match value {
                Value::String(s) => Ok(Record::Text(s.clone())),
                _ => Err(RecordError::KindMismatch {
                    kind,
                    reason: "expected a string".into(),
                }),
            },
        }
    }
}

fn scalar_string(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Serialized text of a single entity.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SerializedEntity(String);

impl SerializedEntity {
    pub fn new(text: impl Into<String>) -> Self {
        Self(text.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.0.split_whitespace()
    }
}

impl fmt::Display for SerializedEntity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// `[CLS] left [SEP] right [SEP]` plus an optional match label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerializedPair {
    pub text: String,
    pub label: Option<bool>,
}

fn push_field(parts: &mut Vec<String>, name: &str, value: String) {
    parts.push(COL.to_string());
    parts.push(normalize_ws(name));
    parts.push(VAL.to_string());
    if !value.is_empty() {
        parts.push(value);
    }
}

fn serialize_tree_top(node: &TreeNode, parts: &mut Vec<String>) {
    match node {
        TreeNode::Map(entries) => {
            for (k, v) in entries {
                push_field(parts, k, v.flatten());
            }
        }
        TreeNode::List(items) => {
            for item in items {
                serialize_tree_top(item, parts);
            }
        }
        leaf => {
            let s = leaf.flatten();
            if !s.is_empty() {
                parts.push(s);
            }
        }
    }
}

/// Converts a record into its marker-annotated text.
pub fn serialize_record(record: &Record) -> SerializedEntity {
    match record {
        Record::Text(t) => SerializedEntity(t.clone()),
        Record::Structured(fields) => {
            let mut parts = Vec::with_capacity(fields.len() * 4);
            for (name, value) in fields {
                push_field(&mut parts, name, normalize_ws(value));
            }
            SerializedEntity(parts.join(" "))
        }
        Record::SemiStructured(tree) => {
            let mut parts = Vec::new();
            serialize_tree_top(tree, &mut parts);
            SerializedEntity(parts.join(" "))
        }
    }
}

/// Joins two serialized entities into one classification input.
pub fn encode_serialized(left: &SerializedEntity, right: &SerializedEntity, label: Option<bool>) -> SerializedPair {
    SerializedPair {
        text: format!("{CLS} {} {SEP} {} {SEP}", left.as_str(), right.as_str()),
        label,
    }
}

pub fn encode_pair(left: &Record, right: &Record, label: Option<bool>) -> SerializedPair {
    encode_serialized(&serialize_record(left), &serialize_record(right), label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn canon_structured() -> Record {
        Record::structured([
            ("Title", "Canon EOS 1100D"),
            ("brand", "Canon"),
            (
                "product description",
                "Digital SLR Camera w/EF-S 18-55mm f/3.5-5.6 is II Lens 32MP",
            ),
        ])
        .unwrap()
    }

    #[test]
    fn structured_canon_golden() {
        assert_eq!(
            serialize_record(&canon_structured()).as_str(),
            "[COL] Title [VAL] Canon EOS 1100D [COL] brand [VAL] Canon [COL] product description [VAL] Digital SLR Camera w/EF-S 18-55mm f/3.5-5.6 is II Lens 32MP"
        );
    }

    fn canon_semi_structured() -> Record {
        Record::from_json(&json!({
            "Title": "Canon EOS 1100D - Buy",
            "brand": "Canon",
            "battery": ["NP-400 Lithium", "ion rechargeable battery"],
            "digital_screen": "yes",
            "size": "7.5cm"
        }))
        .unwrap()
    }

    #[test]
    fn semi_structured_canon_golden() {
        let r = canon_semi_structured();
        assert_eq!(r.kind(), RecordKind::SemiStructured);
        assert_eq!(
            serialize_record(&r).as_str(),
            "[COL] Title [VAL] Canon EOS 1100D - Buy [COL] brand [VAL] Canon [COL] battery [VAL] NP-400 Lithium, ion rechargeable battery [COL] digital_screen [VAL] yes [COL] size [VAL] 7.5cm"
        );
        let p = encode_pair(&canon_structured(), &r, Some(true));
        assert!(p.text.starts_with("[CLS] [COL] Title [VAL] Canon EOS 1100D [COL] brand"));
        assert!(p.text.contains("32MP [SEP] [COL] Title [VAL] Canon EOS 1100D - Buy [COL]"));
        assert!(p.text.ends_with("7.5cm [SEP]"));
    }

    #[test]
    fn empty_structured_is_empty_string() {
        let r = Record::structured(Vec::<(String, String)>::new()).unwrap();
        assert_eq!(serialize_record(&r).as_str(), "");
    }

    #[test]
    fn nested_map_and_list_flattening() {
        let r = Record::from_json(&json!({
            "battery": {"name": "NP-400", "type": ["Lithium", "ion rechargeable battery"]}
        }))
        .unwrap();
        assert_eq!(r.kind(), RecordKind::SemiStructured);
        assert_eq!(
            serialize_record(&r).as_str(),
            "[COL] battery [VAL] name: NP-400, type: Lithium, ion rechargeable battery"
        );
    }

    #[test]
    fn null_values_serialize_empty() {
        let r = Record::from_json(&json!({"a": null, "b": "x"})).unwrap();
        assert_eq!(serialize_record(&r).as_str(), "[COL] a [VAL] [COL] b [VAL] x");
    }

    #[test]
    fn text_pair() {
        let p = encode_pair(&Record::text("abc"), &Record::text("xyz"), Some(true));
        assert_eq!(p.text, "[CLS] abc [SEP] xyz [SEP]");
        assert_eq!(p.label, Some(true));
        let e = encode_pair(&Record::text(""), &Record::text(""), None);
        assert_eq!(e.text, "[CLS]  [SEP]  [SEP]");
    }

    #[test]
    fn structured_validation() {
        assert_eq!(
            Record::structured([("", "x")]),
            Err(RecordError::EmptyAttribute)
        );
        assert_eq!(
            Record::structured([("a", "x"), ("a", "y")]),
            Err(RecordError::DuplicateAttribute("a".into()))
        );
    }

    #[test]
    fn kind_inference() {
        assert_eq!(Record::from_json(&json!({"a": "1"})).unwrap().kind(), RecordKind::Structured);
        assert_eq!(Record::from_json(&json!("t")).unwrap().kind(), RecordKind::Text);
        assert_eq!(
            Record::from_json(&json!({"a": {"b": "1"}})).unwrap().kind(),
            RecordKind::SemiStructured
        );
        assert_eq!(Record::from_json(&json!([1, 2])).unwrap().kind(), RecordKind::SemiStructured);
    }

    #[test]
    fn kind_override() {
        let flat = json!({"a": "1"});
        let r = Record::from_json_as(&flat, RecordKind::SemiStructured).unwrap();
        assert_eq!(r.kind(), RecordKind::SemiStructured);
        assert_eq!(serialize_record(&r), serialize_record(&Record::from_json(&flat).unwrap()));
        assert!(Record::from_json_as(&json!({"a": {"b": "1"}}), RecordKind::Structured).is_err());
        assert!(Record::from_json_as(&json!({"a": "1"}), RecordKind::Text).is_err());
    }

    #[test]
    fn markers_alternate_for_structured() {
        let s = serialize_record(&canon_structured());
        let markers: Vec<_> = s.tokens().filter(|t| *t == COL || *t == VAL).collect();
        assert_eq!(markers.len(), 6);
        for (i, m) in markers.iter().enumerate() {
            assert_eq!(*m, if i % 2 == 0 { COL } else { VAL });
        }
        assert!(!s.as_str().contains(CLS) && !s.as_str().contains(SEP));
    }
}
