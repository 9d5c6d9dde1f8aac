//! Persistence. See `docs/formats.md` for byte-level layouts.
//!
//! - model files: magic, version byte, JSON header, little-endian binary arrays
//! - Wavefront OBJ meshes
//! - JSON documents (`format` + `version` envelope) for landmark specs,
//!   numeric arrays, coefficient vectors, datasets, decoder weights and
//!   metric reports
//!
//! Writers assume exclusive access to the target path; nothing is locked.

mod docs;
mod model_file;
mod obj;

pub use docs::{
    array_from_doc, array_to_doc, batch_from_doc, batch_to_doc, dataset_from_doc, dataset_to_doc,
    landmark_spec_from_doc, landmark_spec_to_doc, load_array, load_batch, load_dataset, load_landmark_spec,
    load_params, load_report, load_weights, params_from_doc, params_to_doc, report_from_doc, report_to_doc,
    save_array, save_batch, save_dataset, save_landmark_spec, save_params, save_report, save_weights,
    weights_from_doc, weights_to_doc, Dataset, FORMAT_ARRAY, FORMAT_DATASET, FORMAT_LANDMARKS, FORMAT_PARAMS,
    FORMAT_REPORT, FORMAT_WEIGHTS,
};
pub use model_file::{
    decode_model, encode_model, load_model, load_model_with_header, save_model, ModelHeader, MODEL_MAGIC,
    MODEL_VERSION,
};
pub use obj::{export_obj, import_obj, parse_obj, write_obj};

use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

/// Version written into every JSON document.
pub const DOC_VERSION: u64 = 1;

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(Error::at(path))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(Error::at(path))
}

/// Checks the `format` and `version` keys of a parsed document.
pub(crate) fn check_envelope(doc: &Value, format: &str) -> Result<()> {
    let found = doc
        .get("format")
        .ok_or_else(|| Error::MissingKey("format".into()))?
        .as_str()
        .ok_or_else(|| Error::Invalid("'format' must be a string".into()))?;
    if found != format {
        return Err(Error::Invalid(format!("expected a '{format}' document, found '{found}'")));
    }
    let version = doc
        .get("version")
        .ok_or_else(|| Error::MissingKey("version".into()))?
        .as_u64()
        .ok_or_else(|| Error::Invalid("'version' must be a non-negative integer".into()))?;
    if version != DOC_VERSION {
        return Err(Error::UnsupportedVersion {
            format: format.into(),
            found: version,
        });
    }
    Ok(())
}

pub(crate) fn field<'a>(doc: &'a Value, key: &str) -> Result<&'a Value> {
    doc.get(key).ok_or_else(|| Error::MissingKey(key.into()))
}

pub(crate) fn typed<T: serde::de::DeserializeOwned>(doc: &Value, key: &str) -> Result<T> {
    serde_json::from_value(field(doc, key)?.clone())
        .map_err(|e| Error::Invalid(format!("key '{key}': {e}")))
}
