//! Per-party state: keys, randomness and tagged tensor stores.

use std::collections::BTreeMap;

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::he::KeyPair;
use crate::ring::FixedTensor;
use crate::sharing::{Party, ShareMat};

/// What a stored tensor is, from the holder's point of view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tag {
    PlaintextWeight,
    Mask,
    MaskedValue,
    Ciphertext,
    Share,
    /// An unmasked tensor derived from client data. Never allowed on the server.
    LogicalPlaintext,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stored {
    pub tag: Tag,
    pub value: FixedTensor,
}

/// Tagged tensor store. The server's store rejects `LogicalPlaintext`.
#[derive(Debug, Clone)]
pub struct Store {
    owner: Party,
    items: BTreeMap<String, Stored>,
}

impl Store {
    pub fn new(owner: Party) -> Self {
        Self {
            owner,
            items: BTreeMap::new(),
        }
    }

    pub fn put(&mut self, name: &str, tag: Tag, value: FixedTensor) -> Result<()> {
        if self.owner == Party::Server && tag == Tag::LogicalPlaintext {
            return Err(Error::Audit(format!(
                "server asked to hold {name} as logical plaintext"
            )));
        }
        self.items.insert(name.to_string(), Stored { tag, value });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&FixedTensor> {
        self.items
            .get(name)
            .map(|s| &s.value)
            .ok_or_else(|| Error::Protocol(format!("{:?} holds no tensor {name}", self.owner)))
    }

    pub fn share(&self, name: &str) -> Result<ShareMat> {
        Ok(ShareMat {
            owner: self.owner,
            value: self.get(name)?.clone(),
            of: name.to_string(),
        })
    }

    pub fn items(&self) -> impl Iterator<Item = (&String, &Stored)> {
        self.items.iter()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

pub struct Client {
    pub keys: KeyPair,
    pub rng: ChaCha20Rng,
    pub store: Store,
}

pub struct Server {
    pub rng: ChaCha20Rng,
    pub store: Store,
}

/// Result of inspecting the server's store.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub tensors: usize,
    pub by_tag: BTreeMap<String, usize>,
    /// Non-weight server tensors equal to a logical intermediate.
    pub matches: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.matches.is_empty() && !self.by_tag.contains_key("logical-plaintext")
    }
}

fn tag_name(t: Tag) -> String {
    serde_json::to_value(t)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Checks the tags in `store` and compares every tensor that is not a
/// server weight against the logical intermediates in `trace`.
pub fn audit(store: &Store, trace: &BTreeMap<String, FixedTensor>) -> AuditReport {
    let mut r = AuditReport::default();
    for (name, s) in store.items() {
        r.tensors += 1;
        *r.by_tag.entry(tag_name(s.tag)).or_default() += 1;
        if s.tag == Tag::PlaintextWeight {
            continue;
        }
        for (tname, t) in trace {
            if t.shape() == s.value.shape() && t.data().iter().any(|&v| v != 0) && *t == s.value {
                r.matches.push(format!("{name} == {tname}"));
            }
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn server_rejects_logical_plaintext() {
        let mut s = Store::new(Party::Server);
        assert!(s.put("x", Tag::LogicalPlaintext, FixedTensor::zeros(1, 1)).is_err());
        let mut c = Store::new(Party::Client);
        c.put("x", Tag::LogicalPlaintext, FixedTensor::zeros(1, 1)).unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn audit_flags_equal_tensors() {
        let t = FixedTensor::from_vec(1, 2, vec![3, 4]).unwrap();
        let mut trace = BTreeMap::new();
        trace.insert("p0".to_string(), t.clone());
        let mut s = Store::new(Party::Server);
        s.put("w", Tag::PlaintextWeight, t.clone()).unwrap();
        assert!(audit(&s, &trace).passed());
        s.put("leak", Tag::Share, t).unwrap();
        let r = audit(&s, &trace);
        assert!(!r.passed());
        assert_eq!(r.matches, vec!["leak == p0".to_string()]);
        assert_eq!(r.by_tag["share"], 1);
    }
}
