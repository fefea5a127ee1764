//! Task-specific encoders: raw instances become an initial hidden state plus
//! the attention context the core runs under.
//!
//! Three interfaces, ordered by how much structure they inject: adjacency
//! masking for graphs (attention only along edges), rotary positions for
//! expression strings (relative distance carries the hierarchy), and rotary
//! positions over a shuffled bag of facts (sequence distance carries nothing;
//! routing must be discovered in latent space).

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};
use crate::taskgen::{FamilyInstance, GraphInstance};
use crate::tensor::AttnMask;
use rand::Rng as _;

/// Surface-id pool for graph nodes; larger than any node count in use so
/// identities cannot be memorized.
pub const NODE_ID_POOL: usize = 64;

/// How the readout should address the final hidden state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadoutQuery {
    /// Rows of the source and target nodes.
    Pair { s: usize, t: usize },
    /// Row 0, the [CLS] token.
    Cls,
    /// Rows of the two queried entities inside the query clause.
    Pointer { p: usize, q: usize },
}

/// Encoder output: everything the core needs besides parameters.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Embedding-table row per position.
    pub ids: Vec<u32>,
    /// Adjacency mask (topological interface only).
    pub mask: Option<Arc<AttnMask>>,
    /// Rotary positions (hierarchical and unstructured interfaces).
    pub positions: Option<Vec<u32>>,
    pub readout: ReadoutQuery,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Build the additive mask from an instance's adjacency with self-loops.
pub fn adjacency_mask(g: &GraphInstance) -> AttnMask {
    let edges: std::collections::HashSet<(usize, usize)> = g.edges.iter().copied().collect();
    AttnMask::from_adjacency(g.n, |i, j| edges.contains(&(i, j)))
}

/// Encode a graph instance: row i of the initial state is the embedding of
/// node i's surface id, freshly sampled per instance from the id pool.
/// Source and target are not marked; the pairwise readout addresses them.
pub fn encode_graph(g: &GraphInstance, seed: u64) -> Result<Encoded> {
    if g.n > NODE_ID_POOL {
        return Err(Error::InfeasibleParams(format!(
            "{} nodes exceed the surface-id pool of {NODE_ID_POOL}",
            g.n
        )));
    }
    let mut rng: Rng = rng_from_seed(seed);
    // Sample n distinct surface ids.
    let mut used = vec![false; NODE_ID_POOL];
    let mut ids = Vec::with_capacity(g.n);
    while ids.len() < g.n {
        let c = rng.random_range(0..NODE_ID_POOL);
        if !used[c] {
            used[c] = true;
            ids.push(c as u32);
        }
    }
    Ok(Encoded {
        ids,
        mask: Some(Arc::new(adjacency_mask(g))),
        positions: None,
        readout: ReadoutQuery::Pair { s: g.s, t: g.t },
    })
}

/// Character-level encoding of a boolean expression with [CLS] prepended.
pub fn encode_boolexpr(src: &str, vocab: &Vocab) -> Result<Encoded> {
    let mut ids = Vec::with_capacity(src.len() + 1);
    ids.push(vocab.id(CLS_TOKEN)?);
    for ch in src.chars() {
        ids.push(vocab.id(&ch.to_string())?);
    }
    let positions = (0..ids.len() as u32).collect();
    Ok(Encoded {
        ids,
        mask: None,
        positions: Some(positions),
        readout: ReadoutQuery::Cls,
    })
}

/// Word-level encoding of a shuffled relational document followed by the
/// query clause; returns the positions of the two queried entities.
pub fn encode_family(inst: &FamilyInstance, vocab: &Vocab) -> Result<Encoded> {
    let mut words: Vec<String> = Vec::new();
    for s in &inst.sentences {
        words.extend(s.split_whitespace().map(str::to_string));
    }
    let (a, b) = (&inst.query.0, &inst.query.1);
    if !words.iter().any(|w| w == a) || !words.iter().any(|w| w == b) {
        return Err(Error::GeneratorContract(format!(
            "query entities `{a}`/`{b}` absent from the document"
        )));
    }
    // query clause: what is <A> to <B> ?
    let p = words.len() + 2;
    let q = words.len() + 4;
    for w in ["what", "is", a.as_str(), "to", b.as_str(), "?"] {
        words.push(w.to_string());
    }
    let mut ids = Vec::with_capacity(words.len());
    for w in &words {
        ids.push(vocab.id(w)?);
    }
    let positions = (0..ids.len() as u32).collect();
    Ok(Encoded {
        ids,
        mask: None,
        positions: Some(positions),
        readout: ReadoutQuery::Pointer { p, q },
    })
}

pub const CLS_TOKEN: &str = "[CLS]";

/// Closed vocabulary: token per line, line number = id.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    /// Tokens of the expression interface.
    pub fn logic() -> Self {
        let toks = [CLS_TOKEN, "T", "F", "&", "|", "!", "(", ")"];
        Vocab::from_tokens(toks.iter().map(|s| s.to_string()).collect())
    }

    /// Tokens of the relational-text interface: template words, relation
    /// words, punctuation, then the name pool.
    pub fn family() -> Self {
        let mut toks: Vec<String> = [
            ".", "?", "is", "the", "of", "to", "what", "parent", "child", "sibling",
            "grandparent", "grandchild",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        toks.extend(crate::taskgen::family::name_pool());
        Vocab::from_tokens(toks)
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| {
                self.token(i)
                    .map(str::to_string)
                    .ok_or_else(|| Error::UnknownToken(format!("<id {i}>")))
            })
            .collect()
    }

    pub fn to_file(&self, path: &Path) -> Result<()> {
        let body = self.tokens.join("\n") + "\n";
        crate::checkpoint::atomic_write(path, body.as_bytes())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        Ok(Vocab::from_tokens(
            body.lines().map(str::to_string).collect(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{gen_family, gen_graph_labeled};

    #[test]
    fn eq4_mask_from_small_adjacency() {
        // A = [[0,1],[0,0]] -> mask rows: node 0 attends {0,1}, node 1 {1}
        let g = GraphInstance {
            n: 2,
            edges: vec![(0, 1)],
            s: 0,
            t: 1,
            label: true,
            hops: Some(1),
        };
        let m = adjacency_mask(&g);
        assert_eq!(m.additive(0, 0), 0.0);
        assert_eq!(m.additive(0, 1), 0.0);
        assert!(m.additive(1, 0) < -1e8);
        assert_eq!(m.additive(1, 1), 0.0);
    }

    #[test]
    fn empty_edges_mask_is_diagonal() {
        let g = GraphInstance {
            n: 3,
            edges: vec![],
            s: 0,
            t: 1,
            label: false,
            hops: None,
        };
        let m = adjacency_mask(&g);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.is_allowed(i, j), i == j);
            }
        }
    }

    #[test]
    fn graph_encoding_samples_distinct_ids() {
        let g = gen_graph_labeled(3, 16, true, 5).unwrap();
        let enc = encode_graph(&g, 77).unwrap();
        assert_eq!(enc.len(), 16);
        let set: std::collections::HashSet<_> = enc.ids.iter().collect();
        assert_eq!(set.len(), 16);
        assert!(enc.ids.iter().all(|&i| (i as usize) < NODE_ID_POOL));
        // deterministic per seed
        assert_eq!(encode_graph(&g, 77).unwrap().ids, enc.ids);
        assert_ne!(encode_graph(&g, 78).unwrap().ids, enc.ids);
    }

    #[test]
    fn boolexpr_encoding_lengths() {
        let v = Vocab::logic();
        let enc = encode_boolexpr("T", &v).unwrap();
        assert_eq!(enc.len(), 2);
        assert_eq!(enc.ids[0], v.id(CLS_TOKEN).unwrap());
        assert_eq!(enc.readout, ReadoutQuery::Cls);

        let src = "!((T&F)|(!(T|F)))";
        let enc = encode_boolexpr(src, &v).unwrap();
        assert_eq!(enc.len(), 1 + src.chars().count());
        assert_eq!(enc.len(), 18);

        assert!(matches!(
            encode_boolexpr("T^F", &v),
            Err(Error::UnknownToken(_))
        ));
    }

    #[test]
    fn boolexpr_encoding_is_deterministic() {
        let v = Vocab::logic();
        let a = encode_boolexpr("(T&F)", &v).unwrap();
        let b = encode_boolexpr("(T&F)", &v).unwrap();
        assert_eq!(a.ids, b.ids);
    }

    #[test]
    fn family_encoding_query_positions() {
        let inst = gen_family(2, 9).unwrap();
        let v = Vocab::family();
        let enc = encode_family(&inst, &v).unwrap();
        let ReadoutQuery::Pointer { p, q } = enc.readout else {
            panic!("family must use pointer readout");
        };
        let toks = v.detokenize(&enc.ids).unwrap();
        assert_eq!(toks[p], inst.query.0);
        assert_eq!(toks[q], inst.query.1);
        assert_eq!(toks[toks.len() - 1], "?");
        assert_eq!(toks[toks.len() - 6], "what");
    }

    #[test]
    fn family_vocab_roundtrip() {
        let inst = gen_family(3, 11).unwrap();
        let v = Vocab::family();
        let enc = encode_family(&inst, &v).unwrap();
        let toks = v.detokenize(&enc.ids).unwrap();
        // detokenize(tokenize(doc)) reproduces the document words
        let mut want: Vec<String> = Vec::new();
        for s in &inst.sentences {
            want.extend(s.split_whitespace().map(str::to_string));
        }
        want.extend(
            ["what", "is", inst.query.0.as_str(), "to", inst.query.1.as_str(), "?"]
                .iter()
                .map(|s| s.to_string()),
        );
        assert_eq!(toks, want);
    }

    #[test]
    fn vocab_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::family();
        v.to_file(&path).unwrap();
        let back = Vocab::from_file(&path).unwrap();
        assert_eq!(back.len(), v.len());
        assert_eq!(back.id("parent").unwrap(), v.id("parent").unwrap());
    }
}
