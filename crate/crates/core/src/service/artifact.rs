//! Versioned, checksummed JSON files.
//!
//! Each artifact is a JSON object `{format, version, checksum, payload}`.
//! The checksum is FNV-1a 64 over the compact serialization of `payload`
//! as a generic JSON value, so the file stays plain JSON while truncation
//! or edits are detected on load.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::fnv;

pub const FORMAT_VERSION: u32 = 1;

fn checksum(payload: &Value) -> Result<String> {
    Ok(format!(
        "{:016x}",
        fnv::hash(serde_json::to_string(payload)?.as_bytes())
    ))
}

pub fn to_string<T: Serialize>(format: &str, payload: &T) -> Result<String> {
    let payload = serde_json::to_value(payload)?;
    let doc = json!({
        "format": format,
        "version": FORMAT_VERSION,
        "checksum": checksum(&payload)?,
        "payload": payload,
    });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    Ok(text)
}

pub fn from_str<T: DeserializeOwned>(format: &str, text: &str, origin: &str) -> Result<T> {
    let corrupt = |why: String| Error::CorruptState(format!("{origin}: {why}"));
    let doc: Value = serde_json::from_str(text).map_err(|e| corrupt(e.to_string()))?;
    let found = doc.get("format").and_then(Value::as_str);
    if found != Some(format) {
        return Err(corrupt(format!(
            "expected a {format} file, found {found:?}"
        )));
    }
    let version = doc
        .get("version")
        .and_then(Value::as_u64)
        .ok_or_else(|| corrupt("missing version".into()))?;
    if version > u64::from(FORMAT_VERSION) {
        return Err(Error::VersionMismatch {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            supported: FORMAT_VERSION,
        });
    }
    let payload = doc
        .get("payload")
        .ok_or_else(|| corrupt("missing payload".into()))?;
    if doc.get("checksum").and_then(Value::as_str) != Some(checksum(payload)?.as_str()) {
        return Err(corrupt("checksum mismatch".into()));
    }
    serde_json::from_value(payload.clone()).map_err(|e| corrupt(e.to_string()))
}

/// Write via a temporary file and rename, so readers never see a partial file.
pub fn write<T: Serialize>(path: &Path, format: &str, payload: &T) -> Result<()> {
    let text = to_string(format, payload)?;
    let tmp = path.with_extension("tmp");
    let io = |source| Error::StoreUnavailable {
        path: path.display().to_string(),
        source,
    };
    fs::write(&tmp, text).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn read<T: DeserializeOwned>(path: &Path, format: &str) -> Result<T> {
    let text = match fs::read_to_string(path) {
        Ok(text) => text,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingArtifact(path.display().to_string()))
        }
        Err(source) => {
            return Err(Error::StoreUnavailable {
                path: path.display().to_string(),
                source,
            })
        }
    };
    from_str(format, &text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn round_trip_and_failures() {
        let payload: BTreeMap<String, f64> =
            [("b".to_string(), 0.1), ("a".to_string(), 2.0 / 3.0)].into();
        let text = to_string("demo", &payload).unwrap();
        let back: BTreeMap<String, f64> = from_str("demo", &text, "t").unwrap();
        assert_eq!(back, payload);

        assert!(matches!(
            from_str::<BTreeMap<String, f64>>("other", &text, "t"),
            Err(Error::CorruptState(_))
        ));
        let truncated = &text[..text.len() / 2];
        assert!(matches!(
            from_str::<BTreeMap<String, f64>>("demo", truncated, "t"),
            Err(Error::CorruptState(_))
        ));
        let edited = text.replace("0.1", "0.2");
        assert!(matches!(
            from_str::<BTreeMap<String, f64>>("demo", &edited, "t"),
            Err(Error::CorruptState(_))
        ));
        let newer = text.replace("\"version\": 1", "\"version\": 2");
        assert!(matches!(
            from_str::<BTreeMap<String, f64>>("demo", &newer, "t"),
            Err(Error::VersionMismatch {
                found: 2,
                supported: 1
            })
        ));
    }

    #[test]
    fn missing_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read::<Value>(&dir.path().join("nope.json"), "demo"),
            Err(Error::MissingArtifact(_))
        ));
    }
}
