//! 48×48×3 candidate patches and their binary container.
//!
//! Container layout (little-endian): magic `NDPS`, `u32` version, `u64`
//! patch count, three `u32` dims (height, width, channels), then per patch
//! a `u64` candidate id followed by `48·48·3` `f32` values in
//! height-width-channel order. Patches are written in ascending id order.

use std::collections::BTreeMap;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const PATCH_SIDE: usize = 48;
pub const PATCH_CHANNELS: usize = 3;
pub const PATCH_LEN: usize = PATCH_SIDE * PATCH_SIDE * PATCH_CHANNELS;
pub const PATCH_STORE_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"NDPS";

/// Intensities in `[0, 1]`, indexed `(y, x, channel)`; the three channels are
/// consecutive axial slices.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch(Box<[f32]>);

impl Patch {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.len() != PATCH_LEN {
            return Err(Error::Shape(format!(
                "patch needs {PATCH_LEN} values ({PATCH_SIDE}x{PATCH_SIDE}x{PATCH_CHANNELS}), got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Shape(format!("patch intensity {v} outside [0, 1]")));
        }
        Ok(Self(values.into_boxed_slice()))
    }

    pub fn zeros() -> Self {
        Self(vec![0.0; PATCH_LEN].into_boxed_slice())
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.0[(y * PATCH_SIDE + x) * PATCH_CHANNELS + c]
    }

    pub(crate) fn from_unchecked(values: Vec<f32>) -> Self {
        debug_assert_eq!(values.len(), PATCH_LEN);
        Self(values.into_boxed_slice())
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().map(|&v| f64::from(v)).sum::<f64>() / PATCH_LEN as f64
    }

    /// Appends this patch in channel-major `[3, 48, 48]` order.
    pub fn extend_chw(&self, out: &mut Vec<f64>) {
        for c in 0..PATCH_CHANNELS {
            out.extend(
                (0..PATCH_SIDE * PATCH_SIDE).map(|p| f64::from(self.0[p * PATCH_CHANNELS + c])),
            );
        }
    }
}

/// Network input shape for one patch.
pub fn patch_input_shape() -> [usize; 3] {
    [PATCH_CHANNELS, PATCH_SIDE, PATCH_SIDE]
}

/// Stacks patches into a `[n, 3, 48, 48]` batch.
pub fn patches_to_tensor<'a>(patches: impl ExactSizeIterator<Item = &'a Patch>) -> Result<Tensor> {
    let n = patches.len();
    if n == 0 {
        return Err(Error::Empty("no patches to batch".into()));
    }
    let mut data = Vec::with_capacity(n * PATCH_LEN);
    for p in patches {
        p.extend_chw(&mut data);
    }
    let [c, h, w] = patch_input_shape();
    Tensor::new(vec![n, c, h, w], data)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PatchStore {
    patches: BTreeMap<u64, Patch>,
}

impl PatchStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, candidate_id: u64, patch: Patch) -> Option<Patch> {
        self.patches.insert(candidate_id, patch)
    }

    pub fn get(&self, candidate_id: u64) -> Result<&Patch> {
        self.patches
            .get(&candidate_id)
            .ok_or(Error::MissingPatch(candidate_id))
    }

    pub fn contains(&self, candidate_id: u64) -> bool {
        self.patches.contains_key(&candidate_id)
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.patches.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &Patch)> {
        self.patches.iter().map(|(&k, v)| (k, v))
    }

    /// `[n, 3, 48, 48]` batch for the given ids, in order.
    pub fn batch(&self, ids: &[u64]) -> Result<Tensor> {
        let patches = ids.iter().map(|&id| self.get(id)).collect::<Result<Vec<_>>>()?;
        patches_to_tensor(patches.into_iter())
    }
}

pub fn save_patch_store(store: &PatchStore, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(MAGIC)?;
    write(&PATCH_STORE_VERSION.to_le_bytes())?;
    write(&(store.len() as u64).to_le_bytes())?;
    for d in [PATCH_SIDE, PATCH_SIDE, PATCH_CHANNELS] {
        write(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(8 + PATCH_LEN * 4);
    for (id, patch) in store.iter() {
        buf.clear();
        buf.extend_from_slice(&id.to_le_bytes());
        for v in patch.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        write(&buf)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a store written by [`save_patch_store`]. Any inconsistency, including
/// truncation, fails the whole load.
pub fn load_patch_store(path: &Path) -> Result<PatchStore> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut read = |buf: &mut [u8]| -> Result<()> {
        r.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format(path, "truncated patch store")
            } else {
                Error::io(path, e)
            }
        })
    };
    let mut magic = [0u8; 4];
    read(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format(path, "not a patch store (bad magic)"));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    read(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != PATCH_STORE_VERSION {
        return Err(Error::format(path, format!("unsupported patch store version {version}")));
    }
    read(&mut b8)?;
    let count = u64::from_le_bytes(b8);
    let mut dims = [0u32; 3];
    for d in &mut dims {
        read(&mut b4)?;
        *d = u32::from_le_bytes(b4);
    }
    if dims != [PATCH_SIDE as u32, PATCH_SIDE as u32, PATCH_CHANNELS as u32] {
        return Err(Error::format(path, format!("unsupported patch dims {dims:?}")));
    }
    let mut store = PatchStore::new();
    let mut raw = vec![0u8; PATCH_LEN * 4];
    for _ in 0..count {
        read(&mut b8)?;
        let id = u64::from_le_bytes(b8);
        read(&mut raw)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let patch = Patch::new(values).map_err(|e| Error::format(path, e.to_string()))?;
        if store.insert(id, patch).is_some() {
            return Err(Error::format(path, format!("duplicate candidate id {id}")));
        }
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "trailing bytes after last patch"));
    }
    Ok(store)
}
