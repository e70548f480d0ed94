//! Named parameter storage.

use std::collections::btree_map;
use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

/// An ordered map from parameter name to value. Iteration order is the
/// lexicographic name order, which keeps checksums and serialisation stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    /// Panics if the parameter is missing; models only look up names they
    /// created.
    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> btree_map::Iter<'_, String, Tensor> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> btree_map::IterMut<'_, String, Tensor> {
        self.entries.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Copies every entry of `other` into `self` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (k, v) in other.iter() {
            self.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, v) in self.iter() {
            if let Some(rest) = k.strip_prefix(prefix) {
                out.insert(rest.to_string(), v.clone());
            }
        }
        out
    }

    /// SHA-256 over names, shapes and the little-endian bytes of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

impl<'a> IntoIterator for &'a ParamStore {
    type Item = (&'a String, &'a Tensor);
    type IntoIter = btree_map::Iter<'a, String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 hex digest of arbitrary bytes.
pub fn digest_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_tracks_values_and_names() {
        let mut a = ParamStore::new();
        a.insert("w", Tensor::from_vec([2], vec![1.0, 2.0]));
        let mut b = a.clone();
        assert_eq!(a.checksum(), b.checksum());
        b.get_mut("w").unwrap().data_mut()[1] = 2.0000001;
        assert_ne!(a.checksum(), b.checksum());
        let mut c = ParamStore::new();
        c.insert("v", Tensor::from_vec([2], vec![1.0, 2.0]));
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn prefix_round_trip() {
        let mut a = ParamStore::new();
        a.insert("conv.weight", Tensor::zeros([1]));
        let mut outer = ParamStore::new();
        outer.extend_prefixed("image.", &a);
        assert!(outer.contains("image.conv.weight"));
        assert_eq!(outer.strip_prefix("image."), a);
    }
}
