//! Star-graph path-finding task.
//!
//! A junction node has several arms (simple chains). The prompt lists every
//! directed edge, then asks for the path from a leaf of one arm to a leaf of
//! another. The start arm points into the junction, the end arm points out
//! of it, and the remaining arms get random directions, so the answer edges
//! appear verbatim in the prompt.

use crate::aug::{TokenId, Vocab};
use crate::error::{CoreError, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, VecDeque};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StarConfig {
    pub arms_min: usize,
    pub arms_max: usize,
    pub arm_len_min: usize,
    pub arm_len_max: usize,
    pub node_pool: u32,
    pub train_size: usize,
    pub test_size: usize,
}

impl StarConfig {
    pub fn medium() -> Self {
        Self {
            arms_min: 3,
            arms_max: 5,
            arm_len_min: 2,
            arm_len_max: 4,
            node_pool: 50,
            train_size: 100_000,
            test_size: 500,
        }
    }

    pub fn hard() -> Self {
        Self {
            arms_min: 2,
            arms_max: 8,
            arm_len_min: 1,
            arm_len_max: 8,
            node_pool: 100,
            train_size: 100_000,
            test_size: 500,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "medium" => Ok(Self::medium()),
            "hard" => Ok(Self::hard()),
            other => Err(CoreError::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.arms_min < 2 || self.arms_min > self.arms_max {
            return Err(CoreError::Config(format!(
                "arm count range {}..={} needs at least two arms",
                self.arms_min, self.arms_max
            )));
        }
        if self.arm_len_min < 1 || self.arm_len_min > self.arm_len_max {
            return Err(CoreError::Config(format!(
                "arm length range {}..={} is empty",
                self.arm_len_min, self.arm_len_max
            )));
        }
        let largest = 1 + self.arms_max * self.arm_len_max;
        if largest > self.node_pool as usize {
            return Err(CoreError::Config(format!(
                "largest graph has {largest} nodes but the label pool has {}",
                self.node_pool
            )));
        }
        Ok(())
    }

    /// Longest possible answer in tokens.
    pub fn max_answer_len(&self) -> usize {
        4 * self.arm_len_max
    }

    /// Longest possible prompt in tokens.
    pub fn max_prompt_len(&self) -> usize {
        3 * self.arms_max * self.arm_len_max + 3
    }
}

/// Token layout: node labels `0..pool`, then separator, query marker, MASK.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StarVocab {
    pub pool: u32,
}

impl StarVocab {
    pub fn sep(&self) -> TokenId {
        self.pool
    }
    pub fn query(&self) -> TokenId {
        self.pool + 1
    }
    pub fn mask(&self) -> TokenId {
        self.pool + 2
    }
    pub fn size(&self) -> u32 {
        self.pool + 3
    }
    pub fn vocab(&self) -> Vocab {
        Vocab {
            size: self.size(),
            mask: self.mask(),
        }
    }
    /// Human-readable token strings indexed by id.
    pub fn strings(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.pool).map(|i| i.to_string()).collect();
        v.extend([",".to_string(), "/".to_string(), "[MASK]".to_string()]);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StarInstance {
    pub junction: u32,
    /// Each arm listed from the junction outward, junction excluded.
    pub arms: Vec<Vec<u32>>,
    /// Directed edges in prompt order.
    pub edges: Vec<(u32, u32)>,
    pub start: u32,
    pub end: u32,
}

impl StarInstance {
    /// Edges of the start-to-end path, in traversal order.
    pub fn path_edges(&self) -> Vec<(u32, u32)> {
        let (sa, ea) = self.query_arms();
        let s = &self.arms[sa];
        let e = &self.arms[ea];
        let mut out = Vec::with_capacity(s.len() + e.len());
        for k in (0..s.len()).rev() {
            let to = if k == 0 { self.junction } else { s[k - 1] };
            out.push((s[k], to));
        }
        for k in 0..e.len() {
            let from = if k == 0 { self.junction } else { e[k - 1] };
            out.push((from, e[k]));
        }
        out
    }

    fn query_arms(&self) -> (usize, usize) {
        let find = |leaf: u32| self.arms.iter().position(|a| a.last() == Some(&leaf)).unwrap_or(0);
        (find(self.start), find(self.end))
    }

    /// Distance from the junction of every answer token: both tokens of an
    /// edge get the distance of the edge's farther endpoint.
    pub fn answer_distances(&self) -> Vec<usize> {
        let (sa, ea) = self.query_arms();
        let (ls, le) = (self.arms[sa].len(), self.arms[ea].len());
        let mut d = Vec::with_capacity(2 * (ls + le));
        for k in (1..=ls).rev() {
            d.extend([k, k]);
        }
        for k in 1..=le {
            d.extend([k, k]);
        }
        d
    }

    pub fn path_len(&self) -> usize {
        let (sa, ea) = self.query_arms();
        self.arms[sa].len() + self.arms[ea].len()
    }
}

pub fn generate_instance<R: Rng + ?Sized>(cfg: &StarConfig, rng: &mut R) -> Result<StarInstance> {
    cfg.validate()?;
    let n_arms = rng.gen_range(cfg.arms_min..=cfg.arms_max);
    let lens: Vec<usize> = (0..n_arms)
        .map(|_| rng.gen_range(cfg.arm_len_min..=cfg.arm_len_max))
        .collect();
    let total = 1 + lens.iter().sum::<usize>();
    let labels: Vec<u32> = rand::seq::index::sample(rng, cfg.node_pool as usize, total)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    let junction = labels[0];
    let mut arms = Vec::with_capacity(n_arms);
    let mut next = 1;
    for &l in &lens {
        arms.push(labels[next..next + l].to_vec());
        next += l;
    }
    let start_arm = rng.gen_range(0..n_arms);
    let mut end_arm = rng.gen_range(0..n_arms - 1);
    if end_arm >= start_arm {
        end_arm += 1;
    }
    let mut edges = Vec::with_capacity(total - 1);
    for (i, arm) in arms.iter().enumerate() {
        let inward = if i == start_arm {
            true
        } else if i == end_arm {
            false
        } else {
            rng.gen_bool(0.5)
        };
        let mut prev = junction;
        for &node in arm {
            edges.push(if inward { (node, prev) } else { (prev, node) });
            prev = node;
        }
    }
    edges.shuffle(rng);
    let start = *arms[start_arm].last().unwrap();
    let end = *arms[end_arm].last().unwrap();
    let arms = arms_from_edges(&edges, junction)?;
    Ok(StarInstance {
        junction,
        arms,
        edges,
        start,
        end,
    })
}

/// Recover arms by walking outward from the junction. Arms are ordered by the
/// first appearance of their junction edge in the edge list.
fn arms_from_edges(edges: &[(u32, u32)], junction: u32) -> Result<Vec<Vec<u32>>> {
    let mut adj: HashMap<u32, Vec<u32>> = HashMap::new();
    for &(u, v) in edges {
        adj.entry(u).or_default().push(v);
        adj.entry(v).or_default().push(u);
    }
    let mut arms = Vec::new();
    for &(u, v) in edges {
        let first = if u == junction {
            v
        } else if v == junction {
            u
        } else {
            continue;
        };
        let mut arm = vec![first];
        let mut prev = junction;
        let mut cur = first;
        loop {
            let nb = &adj[&cur];
            let nexts: Vec<u32> = nb.iter().copied().filter(|&w| w != prev).collect();
            match nexts.len() {
                0 => break,
                1 => {
                    prev = cur;
                    cur = nexts[0];
                    if cur == junction || arm.contains(&cur) {
                        return Err(CoreError::Malformed("cycle in star graph".into()));
                    }
                    arm.push(cur);
                }
                _ => return Err(CoreError::Malformed(format!("node {cur} branches off an arm"))),
            }
        }
        arms.push(arm);
    }
    if arms.iter().map(|a| a.len()).sum::<usize>() != edges.len() {
        return Err(CoreError::Malformed("edges not all reachable from the junction".into()));
    }
    Ok(arms)
}

/// Prompt `u v , u v , ... / start end` and answer `u v u v ...` along the path.
pub fn serialize(inst: &StarInstance, vocab: &StarVocab) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
    let check = |x: u32| {
        if x < vocab.pool {
            Ok(x)
        } else {
            Err(CoreError::VocabOverflow {
                label: x,
                pool: vocab.pool,
            })
        }
    };
    let mut prompt = Vec::with_capacity(3 * inst.edges.len() + 3);
    for (k, &(u, v)) in inst.edges.iter().enumerate() {
        if k > 0 {
            prompt.push(vocab.sep());
        }
        prompt.push(check(u)?);
        prompt.push(check(v)?);
    }
    prompt.push(vocab.query());
    prompt.push(check(inst.start)?);
    prompt.push(check(inst.end)?);
    let answer = inst.path_edges().into_iter().flat_map(|(u, v)| [u, v]).collect();
    Ok((prompt, answer))
}

/// Parse a prompt back into an instance. The junction cannot be read off a
/// two-arm graph, so it is supplied.
pub fn deserialize(prompt: &[TokenId], junction: u32, vocab: &StarVocab) -> Result<StarInstance> {
    let q = prompt
        .iter()
        .position(|&t| t == vocab.query())
        .ok_or_else(|| CoreError::Malformed("no query marker".into()))?;
    if prompt.len() != q + 3 {
        return Err(CoreError::Malformed(
            "query must be followed by exactly two nodes".into(),
        ));
    }
    let mut edges = Vec::new();
    for chunk in prompt[..q].split(|&t| t == vocab.sep()) {
        match chunk {
            [u, v] if *u < vocab.pool && *v < vocab.pool => edges.push((*u, *v)),
            _ => return Err(CoreError::Malformed(format!("bad edge {chunk:?}"))),
        }
    }
    let arms = arms_from_edges(&edges, junction)?;
    Ok(StarInstance {
        junction,
        arms,
        edges,
        start: prompt[q + 1],
        end: prompt[q + 2],
    })
}

/// Node path from `start` to `end` following directed edges, by BFS.
pub fn bfs_path(edges: &[(u32, u32)], start: u32, end: u32) -> Option<Vec<u32>> {
    let mut adj: HashMap<u32, Vec<u32>> = HashMap::new();
    for &(u, v) in edges {
        adj.entry(u).or_default().push(v);
    }
    let mut parent: HashMap<u32, u32> = HashMap::new();
    let mut queue = VecDeque::from([start]);
    parent.insert(start, start);
    while let Some(u) = queue.pop_front() {
        if u == end {
            let mut path = vec![end];
            let mut cur = end;
            while cur != start {
                cur = parent[&cur];
                path.push(cur);
            }
            path.reverse();
            return Some(path);
        }
        for &v in adj.get(&u).map(|v| v.as_slice()).unwrap_or(&[]) {
            if let std::collections::hash_map::Entry::Vacant(e) = parent.entry(v) {
                e.insert(u);
                queue.push_back(v);
            }
        }
    }
    None
}

/// Is `answer` the flattened edge list of the start-to-end path?
pub fn answer_is_valid(inst: &StarInstance, answer: &[TokenId]) -> bool {
    match bfs_path(&inst.edges, inst.start, inst.end) {
        Some(nodes) => {
            let flat: Vec<u32> = nodes.windows(2).flat_map(|w| [w[0], w[1]]).collect();
            flat == answer
        }
        None => false,
    }
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StarRecord {
    pub prompt: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    pub junction: u32,
    pub arms: Vec<Vec<u32>>,
    pub meta: StarMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StarMeta {
    pub start: u32,
    pub end: u32,
    pub edges: Vec<(u32, u32)>,
}

impl StarRecord {
    pub fn new(inst: &StarInstance, vocab: &StarVocab) -> Result<Self> {
        let (prompt, answer) = serialize(inst, vocab)?;
        Ok(Self {
            prompt,
            answer,
            junction: inst.junction,
            arms: inst.arms.clone(),
            meta: StarMeta {
                start: inst.start,
                end: inst.end,
                edges: inst.edges.clone(),
            },
        })
    }

    pub fn instance(&self) -> StarInstance {
        StarInstance {
            junction: self.junction,
            arms: self.arms.clone(),
            edges: self.meta.edges.clone(),
            start: self.meta.start,
            end: self.meta.end,
        }
    }
}

/// Sidecar describing the vocabulary of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabFile {
    pub pool: u32,
    pub size: u32,
    pub mask: TokenId,
    pub sep: TokenId,
    pub query: TokenId,
    pub tokens: Vec<String>,
}

impl From<StarVocab> for VocabFile {
    fn from(v: StarVocab) -> Self {
        Self {
            pool: v.pool,
            size: v.size(),
            mask: v.mask(),
            sep: v.sep(),
            query: v.query(),
            tokens: v.strings(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn presets_are_feasible() {
        StarConfig::medium().validate().unwrap();
        StarConfig::hard().validate().unwrap();
        let mut bad = StarConfig::medium();
        bad.node_pool = 10;
        assert!(matches!(bad.validate(), Err(CoreError::Config(_))));
        assert!(StarConfig::preset("easy").is_err());
    }

    #[test]
    fn answer_has_two_tokens_per_edge() {
        let inst = StarInstance {
            junction: 3,
            arms: vec![vec![12, 39], vec![6, 30, 1, 13], vec![7]],
            edges: vec![(39, 12), (12, 3), (3, 6), (6, 30), (30, 1), (1, 13), (3, 7)],
            start: 39,
            end: 13,
        };
        let v = StarVocab { pool: 50 };
        let (prompt, answer) = serialize(&inst, &v).unwrap();
        assert_eq!(answer, vec![39, 12, 12, 3, 3, 6, 6, 30, 30, 1, 1, 13]);
        assert!(answer_is_valid(&inst, &answer));
        assert_eq!(deserialize(&prompt, 3, &v).unwrap(), inst);
        assert_eq!(inst.answer_distances(), vec![2, 2, 1, 1, 1, 1, 2, 2, 3, 3, 4, 4]);
        assert_eq!(inst.path_len(), 6);
    }

    #[test]
    fn generated_instances_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = StarVocab { pool: 100 };
        for cfg in [StarConfig::medium(), StarConfig::hard()] {
            for _ in 0..200 {
                let inst = generate_instance(&cfg, &mut rng).unwrap();
                let (prompt, answer) = serialize(&inst, &v).unwrap();
                assert!(answer.len() <= cfg.max_answer_len());
                assert!(prompt.len() <= cfg.max_prompt_len());
                assert!(answer_is_valid(&inst, &answer));
                assert_eq!(deserialize(&prompt, inst.junction, &v).unwrap(), inst);
            }
        }
    }

    #[test]
    fn label_overflow_detected() {
        let inst = StarInstance {
            junction: 0,
            arms: vec![vec![1], vec![60]],
            edges: vec![(1, 0), (0, 60)],
            start: 1,
            end: 60,
        };
        assert!(matches!(
            serialize(&inst, &StarVocab { pool: 50 }),
            Err(CoreError::VocabOverflow { label: 60, .. })
        ));
    }
}
