//! Named-tensor archives on disk (safetensors layout).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct ArchiveTensor<T> {
    pub dims: Vec<usize>,
    pub values: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct Archive<T> {
    pub tensors: IndexMap<String, ArchiveTensor<T>>,
    pub metadata: HashMap<String, String>,
}

fn decode<T: Scalar>(name: &str, view: &TensorView<'_>) -> Result<Vec<T>> {
    let bytes = view.data();
    let values = match view.dtype() {
        d if d == T::DTYPE => bytes.chunks_exact(std::mem::size_of::<T>()).map(T::from_le_chunk).collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().expect("4 bytes"))).expect("f32 cast"))
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes"))).expect("f64 cast"))
            .collect(),
        other => return Err(Error::TensorDtype { name: name.to_string(), dtype: format!("{other:?}") }),
    };
    Ok(values)
}

pub fn read_archive<T: Scalar>(path: &Path) -> Result<Archive<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes)?;
    let metadata = header.metadata().clone().unwrap_or_default();
    let st = SafeTensors::deserialize(&bytes)?;
    let mut names: Vec<String> = st.names().into_iter().cloned().collect();
    names.sort();
    let mut tensors = IndexMap::new();
    for name in names {
        let view = st.tensor(&name)?;
        let values = decode(&name, &view)?;
        tensors.insert(name, ArchiveTensor { dims: view.shape().to_vec(), values });
    }
    Ok(Archive { tensors, metadata })
}

/// Writes `tensors` next to `path` and renames into place.
pub fn write_archive<T: Scalar>(
    path: &Path,
    tensors: &[(String, Vec<usize>, &[T])],
    metadata: HashMap<String, String>,
) -> Result<()> {
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(name, dims, values)| (name.clone(), dims.clone(), T::to_le_bytes_vec(values)))
        .collect();
    let views: Vec<(String, TensorView<'_>)> = buffers
        .iter()
        .map(|(name, dims, bytes)| Ok((name.clone(), TensorView::new(T::DTYPE, dims.clone(), bytes)?)))
        .collect::<Result<_>>()?;
    let meta = if metadata.is_empty() { None } else { Some(metadata) };
    let serialized = safetensors::serialize(views, &meta)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serialized).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}
