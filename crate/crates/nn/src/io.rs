//! Named-array files in the safetensors container.

use std::collections::BTreeMap;
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::{Array, Float, NnError};

/// Serializes named arrays. Output bytes depend only on names and values.
pub fn to_bytes<T: Float>(arrays: &BTreeMap<String, Array<T>>) -> Result<Vec<u8>, NnError> {
    let raw: Vec<(String, Vec<usize>, Vec<u8>)> = arrays
        .iter()
        .map(|(k, a)| (k.clone(), a.shape().to_vec(), T::to_le_bytes_vec(a.data())))
        .collect();
    let views = raw
        .iter()
        .map(|(k, shape, bytes)| {
            TensorView::new(T::DTYPE, shape.clone(), bytes)
                .map(|v| (k.clone(), v))
                .map_err(|e| NnError::Format(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    safetensors::serialize(views, None).map_err(|e| NnError::Format(e.to_string()))
}

pub fn from_bytes<T: Float>(bytes: &[u8]) -> Result<BTreeMap<String, Array<T>>, NnError> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| NnError::Format(e.to_string()))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        let data: Vec<T> = match view.dtype() {
            Dtype::F32 => f32::from_le_bytes_slice(view.data())
                .into_iter()
                .map(|v| T::of(v as f64))
                .collect(),
            Dtype::F64 => f64::from_le_bytes_slice(view.data())
                .into_iter()
                .map(T::of)
                .collect(),
            other => {
                return Err(NnError::Format(format!(
                    "unsupported dtype {other:?} for `{name}`"
                )))
            }
        };
        out.insert(name, Array::from_vec(view.shape().to_vec(), data));
    }
    Ok(out)
}

pub fn save<T: Float>(path: &Path, arrays: &BTreeMap<String, Array<T>>) -> Result<(), NnError> {
    std::fs::write(path, to_bytes(arrays)?)?;
    Ok(())
}

pub fn load<T: Float>(path: &Path) -> Result<BTreeMap<String, Array<T>>, NnError> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_roundtrip_exactly() {
        let mut m = BTreeMap::new();
        m.insert(
            "b".to_string(),
            Array::<f32>::from_vec([2], vec![1.5, f32::MIN_POSITIVE]),
        );
        m.insert(
            "a.w".to_string(),
            Array::<f32>::from_vec([1, 2, 1], vec![-0.1, 3.25]),
        );
        let bytes = to_bytes(&m).unwrap();
        assert_eq!(from_bytes::<f32>(&bytes).unwrap(), m);
        assert_eq!(to_bytes(&m).unwrap(), bytes);
    }
}
