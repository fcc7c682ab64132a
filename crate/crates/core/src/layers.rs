//! Layer-spec files: a JSON array of objects carrying the [`ConvShape`]
//! field names, optionally tagged with `name` and `model`.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::shape::ConvShape;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(flatten)]
    pub shape: ConvShape,
}

impl From<ConvShape> for LayerSpec {
    fn from(shape: ConvShape) -> Self {
        LayerSpec {
            name: None,
            model: None,
            shape,
        }
    }
}

impl LayerSpec {
    pub fn label(&self, index: usize) -> String {
        match (&self.model, &self.name) {
            (Some(m), Some(n)) => format!("{m}/{n}"),
            (None, Some(n)) => n.clone(),
            (Some(m), None) => format!("{m}#{index}"),
            (None, None) => format!("layer{index}"),
        }
    }
}

/// Parses layer records from JSON text; `origin` only labels errors.
pub fn parse_layers(text: &str, origin: &Path) -> Result<Vec<LayerSpec>> {
    let parse_err = |record: Option<usize>, message: String| Error::Parse {
        path: origin.to_path_buf(),
        record,
        message,
    };
    let records: Vec<serde_json::Value> =
        serde_json::from_str(text).map_err(|e| parse_err(None, format!("expected a JSON array of layer objects: {e}")))?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, value)| {
            let serde_json::Value::Object(mut fields) = value else {
                return Err(parse_err(Some(i), "expected a layer object".into()));
            };
            let mut tag = |key: &str| match fields.remove(key) {
                None | Some(serde_json::Value::Null) => Ok(None),
                Some(serde_json::Value::String(s)) => Ok(Some(s)),
                Some(_) => Err(parse_err(Some(i), format!("`{key}` must be a string"))),
            };
            let name = tag("name")?;
            let model = tag("model")?;
            let shape: ConvShape = serde_json::from_value(serde_json::Value::Object(fields))
                .map_err(|e| parse_err(Some(i), e.to_string()))?;
            shape.validate().map_err(|e| parse_err(Some(i), e.to_string()))?;
            Ok(LayerSpec { name, model, shape })
        })
        .collect()
}

pub fn load_layers(path: impl AsRef<Path>) -> Result<Vec<LayerSpec>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_layers(&text, path)
}

/// Loads only the shapes of a layer-spec file, in file order.
pub fn load_layer_specs(path: impl AsRef<Path>) -> Result<Vec<ConvShape>> {
    Ok(load_layers(path)?.into_iter().map(|l| l.shape).collect())
}

pub fn to_json(layers: &[LayerSpec]) -> String {
    serde_json::to_string_pretty(layers).expect("layer specs always serialize")
}
