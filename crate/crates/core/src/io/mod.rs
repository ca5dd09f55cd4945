//! On-disk formats: model directories, weight and feature files, trial
//! lists and embedding tables.

pub mod features;
pub mod manifest;
pub mod weights;

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::network::Embedding;
use crate::tensor::Real;

pub use features::FeatureFile;
pub use manifest::{load_model, read_manifest, save_model, ModelManifest, Provenance};
pub use weights::{read_weights, write_weights, NamedTensor, TensorData};

/// One `label<TAB>enroll_id<TAB>test_id` line of a trial list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
}

pub fn parse_trial_list(text: &str) -> Result<Vec<Trial>> {
    let mut trials = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |why: &str| Error::format("trial list", format!("line {}: {why}", n + 1));
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        let [label, enroll, test] = fields[..] else {
            return Err(bad("expected `label<TAB>enroll_id<TAB>test_id`"));
        };
        let target = match label {
            "1" => true,
            "0" => false,
            _ => return Err(bad("label must be 1 or 0")),
        };
        if enroll.is_empty() || test.is_empty() {
            return Err(bad("empty utterance id"));
        }
        trials.push(Trial {
            target,
            enroll: enroll.to_owned(),
            test: test.to_owned(),
        });
    }
    Ok(trials)
}

/// `id` followed by the values with 9 significant digits, space separated.
pub fn format_embedding_line<T: Real>(id: &str, embedding: &Embedding<T>) -> String {
    let mut line = String::from(id);
    for v in &embedding.values {
        write!(line, " {:.8e}", v.as_f64()).unwrap();
    }
    line
}

/// Parses lines written by [`format_embedding_line`].
pub fn parse_embedding_table(text: &str) -> Result<HashMap<String, Embedding<f64>>> {
    let mut table = HashMap::new();
    let mut dim = None;
    for (n, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(id) = fields.next() else { continue };
        let bad = |why: String| Error::format("embedding table", format!("line {}: {why}", n + 1));
        let values = fields
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad(format!("`{id}` has a malformed value")))?;
        if values.is_empty() {
            return Err(bad(format!("`{id}` has no values")));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(bad(format!(
                    "`{id}` has {} values, earlier rows have {d}",
                    values.len()
                )))
            }
            _ => {}
        }
        if table.insert(id.to_owned(), Embedding { values }).is_some() {
            return Err(bad(format!("duplicate id `{id}`")));
        }
    }
    Ok(table)
}
