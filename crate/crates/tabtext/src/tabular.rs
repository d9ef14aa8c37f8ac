//! Table schemas and row-to-text serialization.
//!
//! A schema names every column, assigns it a kind (numeric with an optional
//! unit, categorical with a value map, one-hot group member, or free text),
//! and declares the one-hot groups. A row then renders into one of four text
//! variants, and every rendered value is covered by a byte-offset span tagged
//! with the variable it came from (the column, or the group for collapsed
//! one-hot lists).

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Read, Write};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TabularError {
    #[error("schema document: {0}")]
    SchemaSyntax(#[from] toml::de::Error),
    #[error("schema declares no columns")]
    EmptyColumns,
    #[error("duplicate column {0:?}")]
    DuplicateColumn(String),
    #[error("duplicate group {0:?}")]
    DuplicateGroup(String),
    #[error("column {column:?}: unknown kind {kind:?} (expected numeric, categorical, onehot, or free_text)")]
    UnknownKind { column: String, kind: String },
    #[error("column {column:?}: field {field:?} does not apply to kind {kind:?}")]
    FieldKindMismatch {
        column: String,
        field: &'static str,
        kind: &'static str,
    },
    #[error("column {column:?}: kind {kind:?} requires field {field:?}")]
    MissingField {
        column: String,
        field: &'static str,
        kind: &'static str,
    },
    #[error("group {group:?} lists {member:?}, which is not a one-hot column assigned to it")]
    DanglingGroupMember { group: String, member: String },
    #[error("column {column:?} references group {group:?}, which is not declared")]
    UnknownGroup { column: String, group: String },
    #[error("column {column:?} belongs to group {group:?} but is not in its member list")]
    MemberNotListed { column: String, group: String },
    #[error("group {group:?}: empty policy {policy:?} (expected \"omit\" or \"none\")")]
    UnknownEmptyPolicy { group: String, policy: String },
    #[error("one-hot column {column:?} holds {value:?}, expected 0 or 1")]
    NonBinaryOnehot { column: String, value: String },
    #[error("numeric column {column:?} holds unparseable value {value:?}")]
    BadNumeric { column: String, value: String },
    #[error("categorical column {column:?} holds unmapped value {value:?}")]
    UnknownCategorical { column: String, value: String },
    #[error("row key {0:?} is not a schema column")]
    UnknownColumn(String),
    #[error("variant renders free text but the schema has no free_text column")]
    NoFreeTextColumn,
    #[error("CSV header is missing schema column {0:?}")]
    HeaderMissingColumn(String),
    #[error("CSV header column {0:?} is neither a schema column nor a label")]
    HeaderUnknownColumn(String),
    #[error("label column {column:?} holds {value:?}, expected 0 or 1")]
    BadLabel { column: String, value: String },
    #[error("data row {row}: {source}")]
    AtRow {
        row: usize,
        #[source]
        source: Box<TabularError>,
    },
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("record line {line}: {message}")]
    BadRecordLine { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ColumnKind {
    Numeric { unit: Option<String> },
    Categorical { values: BTreeMap<String, String> },
    OnehotMember { group: String, positive_label: String },
    FreeText,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnSpec {
    pub source_name: String,
    pub descriptive_name: String,
    pub kind: ColumnKind,
    pub order_index: usize,
}

impl ColumnSpec {
    /// Heading shown under the descriptive variants ("Age" + unit "years"
    /// becomes "Age in years").
    pub fn descriptive_heading(&self) -> String {
        match &self.kind {
            ColumnKind::Numeric { unit: Some(u) } => {
                format!("{} in {}", self.descriptive_name, u)
            }
            _ => self.descriptive_name.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EmptyPolicy {
    /// Leave the group out entirely (an empty positional field under ValuesOnly).
    Omit,
    /// Render the literal value "None".
    LiteralNone,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSpec {
    pub group_label: String,
    pub member_order: Vec<String>,
    pub empty_policy: EmptyPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableSchema {
    pub columns: Vec<ColumnSpec>,
    pub groups: IndexMap<String, GroupSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SerializationVariant {
    ValuesOnly,
    OriginalColumns,
    DescriptiveColumns,
    DescriptiveColumnsText,
}

impl SerializationVariant {
    pub const ALL: [SerializationVariant; 4] = [
        SerializationVariant::ValuesOnly,
        SerializationVariant::OriginalColumns,
        SerializationVariant::DescriptiveColumns,
        SerializationVariant::DescriptiveColumnsText,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SerializationVariant::ValuesOnly => "values_only",
            SerializationVariant::OriginalColumns => "original_columns",
            SerializationVariant::DescriptiveColumns => "descriptive_columns",
            SerializationVariant::DescriptiveColumnsText => "descriptive_columns_text",
        }
    }
}

impl fmt::Display for SerializationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SerializationVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == norm)
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

/// Byte-offset span in a serialized record's text, tagged with the variable
/// (column source name or group id) whose value it covers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordSpan {
    pub variable_id: String,
    pub char_start: usize,
    pub char_end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordLabel {
    pub task_id: String,
    pub value: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerializedRecord {
    pub text: String,
    pub spans: Vec<RecordSpan>,
    pub label: Option<RecordLabel>,
}

/// A row of raw cell values keyed by source column name. Empty strings and
/// absent keys both mean "missing".
pub type Row = BTreeMap<String, String>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaDoc {
    #[serde(default)]
    column: Vec<ColumnDoc>,
    #[serde(default)]
    group: Vec<GroupDoc>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ColumnDoc {
    name: String,
    heading: Option<String>,
    kind: String,
    unit: Option<String>,
    values: Option<BTreeMap<String, String>>,
    group: Option<String>,
    label: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupDoc {
    id: String,
    label: String,
    members: Vec<String>,
    #[serde(default = "default_empty_policy")]
    empty: String,
}

fn default_empty_policy() -> String {
    "omit".to_string()
}

/// Parse and validate a schema document (TOML: `[[column]]` and `[[group]]`
/// tables; see the repository README for the field reference).
pub fn parse_schema(document: &str) -> Result<TableSchema, TabularError> {
    let doc: SchemaDoc = toml::from_str(document)?;
    if doc.column.is_empty() {
        return Err(TabularError::EmptyColumns);
    }

    let mut groups: IndexMap<String, GroupSpec> = IndexMap::new();
    for g in &doc.group {
        let policy = match g.empty.as_str() {
            "omit" => EmptyPolicy::Omit,
            "none" => EmptyPolicy::LiteralNone,
            other => {
                return Err(TabularError::UnknownEmptyPolicy {
                    group: g.id.clone(),
                    policy: other.to_string(),
                })
            }
        };
        let spec = GroupSpec {
            group_label: g.label.clone(),
            member_order: g.members.clone(),
            empty_policy: policy,
        };
        if groups.insert(g.id.clone(), spec).is_some() {
            return Err(TabularError::DuplicateGroup(g.id.clone()));
        }
    }

    let mut columns = Vec::with_capacity(doc.column.len());
    let mut seen = HashSet::new();
    for (order_index, c) in doc.column.iter().enumerate() {
        if !seen.insert(c.name.clone()) {
            return Err(TabularError::DuplicateColumn(c.name.clone()));
        }
        let reject = |field: &'static str, set: bool| {
            if set {
                Err(TabularError::FieldKindMismatch {
                    column: c.name.clone(),
                    field,
                    kind: match c.kind.as_str() {
                        "numeric" => "numeric",
                        "categorical" => "categorical",
                        "onehot" => "onehot",
                        _ => "free_text",
                    },
                })
            } else {
                Ok(())
            }
        };
        let kind = match c.kind.as_str() {
            "numeric" => {
                reject("values", c.values.is_some())?;
                reject("group", c.group.is_some())?;
                reject("label", c.label.is_some())?;
                ColumnKind::Numeric {
                    unit: c.unit.clone(),
                }
            }
            "categorical" => {
                reject("unit", c.unit.is_some())?;
                reject("group", c.group.is_some())?;
                reject("label", c.label.is_some())?;
                let values = c.values.clone().ok_or(TabularError::MissingField {
                    column: c.name.clone(),
                    field: "values",
                    kind: "categorical",
                })?;
                ColumnKind::Categorical { values }
            }
            "onehot" => {
                reject("unit", c.unit.is_some())?;
                reject("values", c.values.is_some())?;
                let group = c.group.clone().ok_or(TabularError::MissingField {
                    column: c.name.clone(),
                    field: "group",
                    kind: "onehot",
                })?;
                let positive_label = c.label.clone().ok_or(TabularError::MissingField {
                    column: c.name.clone(),
                    field: "label",
                    kind: "onehot",
                })?;
                if !groups.contains_key(&group) {
                    return Err(TabularError::UnknownGroup {
                        column: c.name.clone(),
                        group,
                    });
                }
                if !groups[&group].member_order.contains(&c.name) {
                    return Err(TabularError::MemberNotListed {
                        column: c.name.clone(),
                        group,
                    });
                }
                ColumnKind::OnehotMember {
                    group,
                    positive_label,
                }
            }
            "free_text" => {
                reject("unit", c.unit.is_some())?;
                reject("values", c.values.is_some())?;
                reject("group", c.group.is_some())?;
                reject("label", c.label.is_some())?;
                ColumnKind::FreeText
            }
            other => {
                return Err(TabularError::UnknownKind {
                    column: c.name.clone(),
                    kind: other.to_string(),
                })
            }
        };
        columns.push(ColumnSpec {
            source_name: c.name.clone(),
            descriptive_name: c.heading.clone().unwrap_or_else(|| c.name.clone()),
            kind,
            order_index,
        });
    }

    let schema = TableSchema { columns, groups };
    for (gid, g) in &schema.groups {
        for member in &g.member_order {
            let ok = schema.column(member).is_some_and(|c| {
                matches!(&c.kind, ColumnKind::OnehotMember { group, .. } if group == gid)
            });
            if !ok {
                return Err(TabularError::DanglingGroupMember {
                    group: gid.clone(),
                    member: member.clone(),
                });
            }
        }
    }
    Ok(schema)
}

impl TableSchema {
    pub fn column(&self, source_name: &str) -> Option<&ColumnSpec> {
        self.columns.iter().find(|c| c.source_name == source_name)
    }

    pub fn free_text_column(&self) -> Option<&ColumnSpec> {
        self.columns
            .iter()
            .find(|c| matches!(c.kind, ColumnKind::FreeText))
    }

    /// Variable ids in rendering order: each column's source name, with a
    /// one-hot group appearing once (as its group id) at the position of its
    /// first member column.
    pub fn variable_order(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut seen_groups = HashSet::new();
        for c in &self.columns {
            match &c.kind {
                ColumnKind::OnehotMember { group, .. } => {
                    if seen_groups.insert(group.clone()) {
                        out.push(group.clone());
                    }
                }
                _ => out.push(c.source_name.clone()),
            }
        }
        out
    }

    /// Hex SHA-256 of the canonical schema serialization; recorded in
    /// manifests so artifacts can be traced to the schema that produced them.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_vec(self).expect("schema serialization");
        let digest = Sha256::digest(&canon);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn cell<'a>(row: &'a Row, name: &str) -> Option<&'a str> {
    match row.get(name) {
        Some(v) if !v.is_empty() => Some(v.as_str()),
        _ => None,
    }
}

/// Collapse a one-hot group to its comma-separated positive labels (in member
/// order) plus the raw member flags.
pub fn collapse_onehot_group(
    row: &Row,
    group_id: &str,
    schema: &TableSchema,
) -> Result<(String, Vec<bool>), TabularError> {
    let group = schema
        .groups
        .get(group_id)
        .ok_or_else(|| TabularError::UnknownGroup {
            column: String::new(),
            group: group_id.to_string(),
        })?;
    let mut flags = Vec::with_capacity(group.member_order.len());
    let mut labels = Vec::new();
    for member in &group.member_order {
        let col = schema.column(member).expect("validated member");
        let flag = match cell(row, member) {
            None | Some("0") => false,
            Some("1") => true,
            Some(other) => {
                return Err(TabularError::NonBinaryOnehot {
                    column: member.clone(),
                    value: other.to_string(),
                })
            }
        };
        flags.push(flag);
        if flag {
            if let ColumnKind::OnehotMember { positive_label, .. } = &col.kind {
                labels.push(positive_label.as_str());
            }
        }
    }
    Ok((labels.join(", "), flags))
}

/// One renderable slot of a row: a plain column, or a whole one-hot group.
struct Item {
    variable: String,
    source_heading: String,
    descriptive_heading: String,
    /// `None` means missing (skipped under column variants, an empty
    /// positional field under ValuesOnly).
    value: Option<String>,
}

fn build_items(
    row: &Row,
    schema: &TableSchema,
    variant: SerializationVariant,
) -> Result<Vec<Item>, TabularError> {
    for key in row.keys() {
        if schema.column(key).is_none() {
            return Err(TabularError::UnknownColumn(key.clone()));
        }
    }
    let want_free_text = variant == SerializationVariant::DescriptiveColumnsText;
    if want_free_text && schema.free_text_column().is_none() {
        return Err(TabularError::NoFreeTextColumn);
    }

    let mut items = Vec::new();
    let mut free_text: Option<Item> = None;
    let mut seen_groups = HashSet::new();
    for col in &schema.columns {
        match &col.kind {
            ColumnKind::FreeText => {
                if want_free_text {
                    free_text = Some(Item {
                        variable: col.source_name.clone(),
                        source_heading: col.source_name.clone(),
                        descriptive_heading: col.descriptive_heading(),
                        value: cell(row, &col.source_name).map(str::to_string),
                    });
                }
            }
            ColumnKind::OnehotMember { group, .. } => {
                if !seen_groups.insert(group.clone()) {
                    continue;
                }
                let spec = &schema.groups[group];
                let (fragment, _) = collapse_onehot_group(row, group, schema)?;
                let value = if fragment.is_empty() {
                    match spec.empty_policy {
                        EmptyPolicy::Omit => None,
                        EmptyPolicy::LiteralNone => Some("None".to_string()),
                    }
                } else {
                    Some(fragment)
                };
                items.push(Item {
                    variable: group.clone(),
                    source_heading: group.clone(),
                    descriptive_heading: spec.group_label.clone(),
                    value,
                });
            }
            ColumnKind::Numeric { .. } => {
                let value = match cell(row, &col.source_name) {
                    Some(raw) => {
                        if raw.parse::<f64>().is_err() {
                            return Err(TabularError::BadNumeric {
                                column: col.source_name.clone(),
                                value: raw.to_string(),
                            });
                        }
                        Some(raw.to_string())
                    }
                    None => None,
                };
                items.push(Item {
                    variable: col.source_name.clone(),
                    source_heading: col.source_name.clone(),
                    descriptive_heading: col.descriptive_heading(),
                    value,
                });
            }
            ColumnKind::Categorical { values } => {
                let value = match cell(row, &col.source_name) {
                    Some(raw) => Some(
                        values
                            .get(raw)
                            .ok_or_else(|| TabularError::UnknownCategorical {
                                column: col.source_name.clone(),
                                value: raw.to_string(),
                            })?
                            .clone(),
                    ),
                    None => None,
                };
                items.push(Item {
                    variable: col.source_name.clone(),
                    source_heading: col.source_name.clone(),
                    descriptive_heading: col.descriptive_heading(),
                    value,
                });
            }
        }
    }
    if let Some(ft) = free_text {
        items.push(ft);
    }
    // Guard against headings mapped to empty strings upstream: an empty value
    // is indistinguishable from missing once rendered.
    for item in &mut items {
        if item.value.as_deref() == Some("") {
            item.value = None;
        }
    }
    Ok(items)
}

/// Render one row into text plus value spans under the given variant.
pub fn serialize_row(
    row: &Row,
    schema: &TableSchema,
    variant: SerializationVariant,
) -> Result<SerializedRecord, TabularError> {
    let items = build_items(row, schema, variant)?;
    let mut text = String::new();
    let mut spans = Vec::new();
    match variant {
        SerializationVariant::ValuesOnly => {
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    text.push_str(", ");
                }
                if let Some(v) = &item.value {
                    let start = text.len();
                    text.push_str(v);
                    spans.push(RecordSpan {
                        variable_id: item.variable.clone(),
                        char_start: start,
                        char_end: text.len(),
                    });
                }
            }
        }
        _ => {
            let descriptive = variant != SerializationVariant::OriginalColumns;
            let mut first = true;
            for item in &items {
                let Some(v) = &item.value else { continue };
                if !first {
                    text.push_str("; ");
                }
                first = false;
                text.push_str(if descriptive {
                    &item.descriptive_heading
                } else {
                    &item.source_heading
                });
                text.push_str(": ");
                let start = text.len();
                text.push_str(v);
                spans.push(RecordSpan {
                    variable_id: item.variable.clone(),
                    char_start: start,
                    char_end: text.len(),
                });
            }
        }
    }
    Ok(SerializedRecord {
        text,
        spans,
        label: None,
    })
}

/// Reference parser for the OriginalColumns rendering: splits "name: value"
/// pairs joined by "; ". Values containing those joiners (group lists use
/// ", ") survive because splitting happens at the first ": " of each pair.
pub fn parse_original_columns(text: &str) -> Vec<(String, String)> {
    if text.is_empty() {
        return Vec::new();
    }
    text.split("; ")
        .filter_map(|pair| {
            let (name, value) = pair.split_once(": ")?;
            Some((name.to_string(), value.to_string()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerializeManifest {
    pub rows: usize,
    pub variant: SerializationVariant,
    pub schema_hash: String,
    pub label_column: Option<String>,
}

/// Serialize a CSV table (header row required) into records, attaching the
/// label column's 0/1 values when one is named. `ignore_columns` lists CSV
/// columns (such as the other tasks' labels) to pass over silently.
pub fn serialize_dataset<R: Read>(
    reader: R,
    schema: &TableSchema,
    variant: SerializationVariant,
    label_column: Option<&str>,
    ignore_columns: &[String],
) -> Result<(Vec<SerializedRecord>, SerializeManifest), TabularError> {
    let mut csv_reader = csv::ReaderBuilder::new().from_reader(reader);
    let headers = csv_reader.headers()?.clone();
    let header_names: Vec<String> = headers.iter().map(str::to_string).collect();

    for col in &schema.columns {
        if !header_names.iter().any(|h| h == &col.source_name) {
            return Err(TabularError::HeaderMissingColumn(col.source_name.clone()));
        }
    }
    if let Some(label) = label_column {
        if !header_names.iter().any(|h| h == label) {
            return Err(TabularError::HeaderMissingColumn(label.to_string()));
        }
    }
    for h in &header_names {
        let known = schema.column(h).is_some()
            || label_column == Some(h.as_str())
            || ignore_columns.iter().any(|c| c == h);
        if !known {
            return Err(TabularError::HeaderUnknownColumn(h.clone()));
        }
    }

    let mut records = Vec::new();
    for (i, result) in csv_reader.records().enumerate() {
        let row_no = i + 1;
        let at_row = |source: TabularError| TabularError::AtRow {
            row: row_no,
            source: Box::new(source),
        };
        let csv_row = result.map_err(TabularError::from).map_err(at_row)?;
        let mut row = Row::new();
        let mut label_value: Option<String> = None;
        for (h, v) in header_names.iter().zip(csv_row.iter()) {
            if schema.column(h).is_some() {
                row.insert(h.clone(), v.to_string());
            }
            if label_column == Some(h.as_str()) {
                label_value = Some(v.to_string());
            }
        }
        let mut record = serialize_row(&row, schema, variant).map_err(at_row)?;
        if let Some(label) = label_column {
            let raw = label_value.unwrap_or_default();
            let value = match raw.as_str() {
                "0" => 0,
                "1" => 1,
                _ => {
                    return Err(at_row(TabularError::BadLabel {
                        column: label.to_string(),
                        value: raw,
                    }))
                }
            };
            record.label = Some(RecordLabel {
                task_id: label.to_string(),
                value,
            });
        }
        records.push(record);
    }
    let manifest = SerializeManifest {
        rows: records.len(),
        variant,
        schema_hash: schema.hash(),
        label_column: label_column.map(str::to_string),
    };
    Ok((records, manifest))
}

/// Flatten a CSV table into a numeric matrix for tree baselines: numeric
/// columns pass through (empty cells become NaN), one-hot members become
/// 0/1, categorical columns expand to one indicator per declared value, and
/// free text is dropped. Returns feature names, rows, and the task labels.
pub fn extract_features<R: Read>(
    reader: R,
    schema: &TableSchema,
    label_column: &str,
    ignore_columns: &[String],
) -> Result<(Vec<String>, Vec<Vec<f64>>, Vec<u8>), TabularError> {
    let mut csv_reader = csv::ReaderBuilder::new().from_reader(reader);
    let headers: Vec<String> = csv_reader.headers()?.iter().map(str::to_string).collect();
    for col in &schema.columns {
        if !headers.iter().any(|h| h == &col.source_name) {
            return Err(TabularError::HeaderMissingColumn(col.source_name.clone()));
        }
    }
    let label_pos = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| TabularError::HeaderMissingColumn(label_column.to_string()))?;
    for h in &headers {
        let known = schema.column(h).is_some()
            || h == label_column
            || ignore_columns.iter().any(|c| c == h);
        if !known {
            return Err(TabularError::HeaderUnknownColumn(h.clone()));
        }
    }

    // One output slot per feature: (column position in CSV, name, encoder)
    enum Enc {
        Numeric,
        Flag,
        CategoryIs(String),
    }
    let mut slots: Vec<(usize, String, Enc)> = Vec::new();
    let mut cat_checks: Vec<(usize, String, Vec<String>)> = Vec::new();
    for col in &schema.columns {
        let pos = headers
            .iter()
            .position(|h| h == &col.source_name)
            .expect("checked above");
        match &col.kind {
            ColumnKind::Numeric { .. } => {
                slots.push((pos, col.source_name.clone(), Enc::Numeric))
            }
            ColumnKind::OnehotMember { .. } => {
                slots.push((pos, col.source_name.clone(), Enc::Flag))
            }
            ColumnKind::Categorical { values } => {
                cat_checks.push((
                    pos,
                    col.source_name.clone(),
                    values.keys().cloned().collect(),
                ));
                for key in values.keys() {
                    slots.push((
                        pos,
                        format!("{}={}", col.source_name, key),
                        Enc::CategoryIs(key.clone()),
                    ));
                }
            }
            ColumnKind::FreeText => {}
        }
    }

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, result) in csv_reader.records().enumerate() {
        let row_no = i + 1;
        let at_row = |source: TabularError| TabularError::AtRow {
            row: row_no,
            source: Box::new(source),
        };
        let csv_row = result.map_err(TabularError::from).map_err(at_row)?;
        for (pos, column, allowed) in &cat_checks {
            let raw = csv_row.get(*pos).unwrap_or("");
            if !raw.is_empty() && !allowed.iter().any(|k| k == raw) {
                return Err(at_row(TabularError::UnknownCategorical {
                    column: column.clone(),
                    value: raw.to_string(),
                }));
            }
        }
        let mut out = Vec::with_capacity(slots.len());
        for (pos, name, enc) in &slots {
            let raw = csv_row.get(*pos).unwrap_or("");
            let value = match enc {
                Enc::Numeric => {
                    if raw.is_empty() {
                        f64::NAN
                    } else {
                        raw.parse::<f64>().map_err(|_| {
                            at_row(TabularError::BadNumeric {
                                column: name.clone(),
                                value: raw.to_string(),
                            })
                        })?
                    }
                }
                Enc::Flag => match raw {
                    "" | "0" => 0.0,
                    "1" => 1.0,
                    other => {
                        return Err(at_row(TabularError::NonBinaryOnehot {
                            column: name.clone(),
                            value: other.to_string(),
                        }))
                    }
                },
                Enc::CategoryIs(key) => (raw == key) as u8 as f64,
            };
            out.push(value);
        }
        rows.push(out);
        let raw_label = csv_row.get(label_pos).unwrap_or("");
        labels.push(match raw_label {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(at_row(TabularError::BadLabel {
                    column: label_column.to_string(),
                    value: other.to_string(),
                }))
            }
        });
    }
    let names = slots.into_iter().map(|(_, name, _)| name).collect();
    Ok((names, rows, labels))
}

/// Write records as JSON lines.
pub fn write_records<W: Write>(
    mut writer: W,
    records: &[SerializedRecord],
) -> Result<(), TabularError> {
    for r in records {
        serde_json::to_writer(&mut writer, r)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Read JSON-line records, validating the span invariants (in bounds, sorted,
/// non-overlapping) so downstream code can rely on them.
pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<SerializedRecord>, TabularError> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SerializedRecord =
            serde_json::from_str(&line).map_err(|e| TabularError::BadRecordLine {
                line: i + 1,
                message: e.to_string(),
            })?;
        let mut cursor = 0usize;
        for s in &record.spans {
            if s.char_start < cursor
                || s.char_start >= s.char_end
                || s.char_end > record.text.len()
                || record.text.get(s.char_start..s.char_end).is_none()
            {
                return Err(TabularError::BadRecordLine {
                    line: i + 1,
                    message: format!(
                        "span {}..{} invalid for text of {} bytes",
                        s.char_start,
                        s.char_end,
                        record.text.len()
                    ),
                });
            }
            cursor = s.char_end;
        }
        if let Some(label) = &record.label {
            if label.value > 1 {
                return Err(TabularError::BadRecordLine {
                    line: i + 1,
                    message: format!("label value {} not binary", label.value),
                });
            }
        }
        records.push(record);
    }
    Ok(records)
}
