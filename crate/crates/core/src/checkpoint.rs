//! Weight-blob serialization shared by the backbone and the multi-task
//! head. Weights are stored as a name -> {shape, f64 data} map in JSON;
//! f64 round-trips exactly through serde_json, so save/load reproduces
//! outputs bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightEntry {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

pub type WeightMap = BTreeMap<String, WeightEntry>;

pub fn entry_from<F: Scalar>(array: &Array2<F>) -> WeightEntry {
    WeightEntry {
        shape: [array.nrows(), array.ncols()],
        data: array.iter().map(|x| x.into_f64()).collect(),
    }
}

/// Copy a stored entry into `target`, failing with the parameter name when
/// shapes disagree.
pub fn assign_entry<F: Scalar>(
    target: &mut Array2<F>,
    entry: &WeightEntry,
    name: &str,
) -> Result<()> {
    if [target.nrows(), target.ncols()] != entry.shape {
        return Err(Error::checkpoint(format!(
            "parameter '{name}': stored shape {:?} does not match expected {:?}",
            entry.shape,
            [target.nrows(), target.ncols()]
        )));
    }
    if entry.data.len() != entry.shape[0] * entry.shape[1] {
        return Err(Error::checkpoint(format!(
            "parameter '{name}': data length {} inconsistent with shape {:?}",
            entry.data.len(),
            entry.shape
        )));
    }
    for (t, &v) in target.iter_mut().zip(entry.data.iter()) {
        *t = F::cast(v);
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), value)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::checkpoint(format!("cannot open {}: {e}", path.display()))
    })?;
    let value = serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| Error::checkpoint(format!("{}: {e}", path.display())))?;
    Ok(value)
}
