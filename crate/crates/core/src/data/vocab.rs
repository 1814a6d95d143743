use std::collections::HashMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// String ↔ id map with reserved `PAD = 0` and `UNK = 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    items: Vec<String>,
    index: HashMap<String, usize>,
    frozen: bool,
}

impl Vocab {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    const RESERVED: [&'static str; 2] = ["<pad>", "<unk>"];

    pub fn new() -> Self {
        let items: Vec<String> = Self::RESERVED.iter().map(|s| s.to_string()).collect();
        let index = items.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Vocab {
            items,
            index,
            frozen: false,
        }
    }

    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocab::new();
        for t in tokens {
            v.add(t.as_ref());
        }
        v
    }

    /// Inserts `token` unless frozen; returns its id (UNK when frozen and unseen).
    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        if self.frozen {
            return Self::UNK;
        }
        let id = self.items.len();
        self.items.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn get(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.items.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.len() <= Self::RESERVED.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &str)> {
        self.items.iter().enumerate().map(|(i, s)| (i, s.as_str()))
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new()
    }
}

impl Serialize for Vocab {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.items[Self::RESERVED.len()..].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let items = Vec::<String>::deserialize(d)?;
        let mut v = Vocab::from_tokens(items);
        v.freeze();
        Ok(v)
    }
}
