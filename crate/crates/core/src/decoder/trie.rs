use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::id_registry::IdRegistry;
use crate::lm::tokenizer::EOS;
use crate::lm::Tokenizer;

/// Prefix tree over the token sequences of every registry id.
#[derive(Debug, Clone)]
pub struct IdTrie {
    children: Vec<BTreeMap<u32, usize>>,
    terminal: Vec<bool>,
    ids: usize,
}

pub const ROOT: usize = 0;

impl IdTrie {
    pub fn new() -> Self {
        IdTrie {
            children: vec![BTreeMap::new()],
            terminal: vec![false],
            ids: 0,
        }
    }

    pub fn build(registry: &IdRegistry, tokenizer: &Tokenizer) -> Result<Self> {
        let mut trie = IdTrie::new();
        for id in registry.distinct_ids() {
            let tokens = tokenizer.encode(id);
            if tokenizer.decode(&tokens) != id {
                return Err(Error::Decode(format!("id `{id}` does not survive tokenization")));
            }
            trie.insert(&tokens)?;
        }
        Ok(trie)
    }

    pub fn insert(&mut self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() || tokens.contains(&EOS) {
            return Err(Error::Decode("trie entries must be non-empty and eos-free".into()));
        }
        let mut node = ROOT;
        for &t in tokens {
            node = match self.children[node].get(&t) {
                Some(&n) => n,
                None => {
                    self.children.push(BTreeMap::new());
                    self.terminal.push(false);
                    let n = self.children.len() - 1;
                    self.children[node].insert(t, n);
                    n
                }
            };
        }
        if !self.terminal[node] {
            self.terminal[node] = true;
            self.ids += 1;
        }
        Ok(())
    }

    /// Number of distinct sequences stored.
    pub fn len(&self) -> usize {
        self.ids
    }

    pub fn is_empty(&self) -> bool {
        self.ids == 0
    }

    /// Node reached by `token` from `node`; eos never leaves a node.
    pub fn next(&self, node: usize, token: u32) -> Option<usize> {
        self.children[node].get(&token).copied()
    }

    pub fn is_terminal(&self, node: usize) -> bool {
        self.terminal[node]
    }

    /// Tokens that extend a valid prefix at `node`, eos included at leaves.
    pub fn allowed(&self, node: usize) -> impl Iterator<Item = u32> + '_ {
        self.terminal[node].then_some(EOS).into_iter().chain(self.children[node].keys().copied())
    }

    /// Whether `tokens` followed by eos is accepted.
    pub fn accepts(&self, tokens: &[u32]) -> bool {
        let mut node = ROOT;
        for &t in tokens {
            match self.next(node, t) {
                Some(n) => node = n,
                None => return false,
            }
        }
        self.terminal[node]
    }
}

impl Default for IdTrie {
    fn default() -> Self {
        Self::new()
    }
}
