use indexmap::IndexMap;

use super::graph::{Arr, Gradients, Graph, Var};

/// Named parameter tensors in a stable insertion order. Names use dotted
/// group prefixes (`enc_ind.stem.w`, `geo.conv1.b`, ...) so whole groups
/// can be frozen or copied by prefix.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Arr>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Arr) {
        let name = name.into();
        debug_assert!(
            !self.params.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.params.insert(name, value);
    }

    pub fn get(&self, name: &str) -> &Arr {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Arr {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.params.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Copies every parameter whose name starts with `src_prefix` into the
    /// matching `dst_prefix` name, which must already exist with the same
    /// shape. Returns the number of tensors copied.
    pub fn copy_prefix(&mut self, src: &ParamStore, src_prefix: &str, dst_prefix: &str) -> usize {
        let mut copied = 0;
        for (name, value) in src.iter() {
            if let Some(rest) = name.strip_prefix(src_prefix) {
                let dst = format!("{dst_prefix}{rest}");
                let slot = self.get_mut(&dst);
                assert_eq!(
                    slot.shape(),
                    value.shape(),
                    "shape mismatch copying {name} -> {dst}"
                );
                *slot = value.clone();
                copied += 1;
            }
        }
        copied
    }

    /// Bitwise equality of a parameter subset; used by the frozen-encoder
    /// assertions.
    pub fn bitwise_eq_prefix(&self, other: &ParamStore, prefix: &str) -> bool {
        for (name, value) in self.iter() {
            if !name.starts_with(prefix) {
                continue;
            }
            if !other.contains(name) {
                return false;
            }
            let theirs = other.get(name);
            if value.shape() != theirs.shape() {
                return false;
            }
            let same = value
                .iter()
                .zip(theirs.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return false;
            }
        }
        true
    }

    /// Registers every parameter as a gradient-tracked leaf in `graph`.
    pub fn bind(&self, graph: &mut Graph) -> ParamBinding {
        let mut vars = IndexMap::with_capacity(self.params.len());
        for (name, value) in &self.params {
            vars.insert(name.clone(), graph.leaf(value.clone()));
        }
        ParamBinding { vars }
    }
}

/// Graph handles for one binding of a [`ParamStore`].
pub struct ParamBinding {
    vars: IndexMap<String, Var>,
}

impl ParamBinding {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Collects this binding's gradients by parameter name. Parameters the
    /// loss does not reach get a `None`.
    pub fn collect_grads(&self, grads: &mut Gradients) -> IndexMap<String, Option<Arr>> {
        self.vars
            .iter()
            .map(|(name, var)| (name.clone(), grads.take(*var)))
            .collect()
    }
}
