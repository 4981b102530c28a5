//! JSON extraction and shape validation for model output.

use std::fmt;

use serde_json::Value;

/// Expected shape of a JSON value.
#[derive(Debug, Clone, PartialEq)]
pub enum Schema {
    Any,
    String,
    NonEmptyString,
    Integer,
    Bool,
    Array {
        items: Box<Schema>,
        min_items: usize,
    },
    Object(Vec<Field>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub name: String,
    pub schema: Schema,
    pub required: bool,
}

impl Field {
    pub fn required(name: &str, schema: Schema) -> Self {
        Self {
            name: name.to_string(),
            schema,
            required: true,
        }
    }

    pub fn optional(name: &str, schema: Schema) -> Self {
        Self {
            name: name.to_string(),
            schema,
            required: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "at {}: {}", self.path, self.message)
    }
}

impl std::error::Error for SchemaError {}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

impl Schema {
    pub fn array_of(items: Schema) -> Self {
        Schema::Array {
            items: Box::new(items),
            min_items: 0,
        }
    }

    pub fn non_empty_array_of(items: Schema) -> Self {
        Schema::Array {
            items: Box::new(items),
            min_items: 1,
        }
    }

    pub fn object(fields: Vec<Field>) -> Self {
        Schema::Object(fields)
    }

    pub fn validate(&self, value: &Value) -> Result<(), SchemaError> {
        self.check(value, "$")
    }

    fn check(&self, value: &Value, path: &str) -> Result<(), SchemaError> {
        let fail = |message: String| {
            Err(SchemaError {
                path: path.to_string(),
                message,
            })
        };
        match (self, value) {
            (Schema::Any, _) => Ok(()),
            (Schema::String, Value::String(_)) => Ok(()),
            (Schema::NonEmptyString, Value::String(s)) if !s.trim().is_empty() => Ok(()),
            (Schema::NonEmptyString, Value::String(_)) => fail("expected a non-empty string".into()),
            (Schema::Integer, Value::Number(n)) if n.is_i64() || n.is_u64() => Ok(()),
            (Schema::Bool, Value::Bool(_)) => Ok(()),
            (Schema::Array { items, min_items }, Value::Array(xs)) => {
                if xs.len() < *min_items {
                    return fail(format!(
                        "expected at least {min_items} element(s), found {}",
                        xs.len()
                    ));
                }
                for (i, x) in xs.iter().enumerate() {
                    items.check(x, &format!("{path}[{i}]"))?;
                }
                Ok(())
            }
            (Schema::Object(fields), Value::Object(map)) => {
                for f in fields {
                    match map.get(&f.name) {
                        Some(v) => f.schema.check(v, &format!("{path}.{}", f.name))?,
                        None if f.required => {
                            return fail(format!("missing required field {:?}", f.name))
                        }
                        None => {}
                    }
                }
                Ok(())
            }
            (expected, found) => fail(format!(
                "expected {}, found {}",
                expected.describe(),
                kind(found)
            )),
        }
    }

    fn describe(&self) -> &'static str {
        match self {
            Schema::Any => "any value",
            Schema::String => "a string",
            Schema::NonEmptyString => "a non-empty string",
            Schema::Integer => "an integer",
            Schema::Bool => "a boolean",
            Schema::Array { .. } => "an array",
            Schema::Object(_) => "an object",
        }
    }
}

/// Correction appended to the user message after an invalid response.
pub fn corrective_message(error: &str) -> String {
    format!("Your previous output was not valid: {error}. Reply with only the requested JSON.")
}

/// Parses model output as JSON after removing a surrounding code fence.
pub fn extract_json(raw: &str) -> Result<Value, String> {
    let body = strip_fence(raw.trim());
    serde_json::from_str(body).map_err(|e| format!("output is not JSON ({e})"))
}

fn strip_fence(s: &str) -> &str {
    let Some(rest) = s.strip_prefix("```") else {
        return s;
    };
    // drop the info string, e.g. ```json
    let rest = match rest.find('\n') {
        Some(nl) => &rest[nl + 1..],
        None => rest,
    };
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

/// Extracts and validates. An object holding a single array is unwrapped
/// when an array is expected, since JSON-mode providers must return objects.
pub(crate) fn parse_against(raw: &str, schema: &Schema) -> Result<Value, String> {
    let mut value = extract_json(raw)?;
    if let (Schema::Array { .. }, Value::Object(map)) = (schema, &value) {
        if map.len() == 1 {
            if let Some(inner @ Value::Array(_)) = map.values().next() {
                value = inner.clone();
            }
        }
    }
    schema.validate(&value).map_err(|e| e.to_string())?;
    Ok(value)
}
