//! Directed acyclic graph over data modalities.
//!
//! The graph drives both model wiring (whose latents feed whose decoder) and
//! training order. Vertices keep their declaration order, and every query
//! returns results in that order, so downstream consumers are deterministic.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModalityGraph {
    vertices: Vec<String>,
    edges: Vec<(usize, usize)>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    #[serde(skip)]
    parents: Vec<Vec<usize>>,
    #[serde(skip)]
    children: Vec<Vec<usize>>,
}

/// 1-based stage per vertex: roots are stage 1, otherwise one past the
/// deepest parent. Equal stages mean "trainable at the same time".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopoOrder {
    pub stage: Vec<usize>,
}

impl TopoOrder {
    pub fn n_stages(&self) -> usize {
        self.stage.iter().copied().max().unwrap_or(0)
    }

    /// Vertices grouped by stage, declaration order within each stage.
    pub fn grouped(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_stages()];
        for (v, &s) in self.stage.iter().enumerate() {
            groups[s - 1].push(v);
        }
        groups
    }
}

impl ModalityGraph {
    /// Builds and validates a graph from vertex names and name pairs.
    pub fn new(vertices: Vec<String>, edge_names: &[(String, String)]) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, name) in vertices.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::DuplicateVertex("empty vertex name".into()));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::DuplicateVertex(name.clone()));
            }
        }
        let mut edges = Vec::with_capacity(edge_names.len());
        for (from, to) in edge_names {
            let f = *index
                .get(from)
                .ok_or_else(|| Error::DanglingEdge(from.clone()))?;
            let t = *index
                .get(to)
                .ok_or_else(|| Error::DanglingEdge(to.clone()))?;
            if f == t {
                return Err(Error::Cycle(format!("self-loop on {}", from)));
            }
            edges.push((f, t));
        }
        let mut graph = Self {
            vertices,
            edges,
            index,
            parents: Vec::new(),
            children: Vec::new(),
        };
        graph.rebuild_adjacency();
        graph.check_acyclic()?;
        Ok(graph)
    }

    /// Restores derived adjacency after deserialization.
    pub fn from_serialized(vertices: Vec<String>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let names: Vec<(String, String)> = edges
            .iter()
            .map(|&(f, t)| {
                let fv = vertices.get(f).cloned();
                let tv = vertices.get(t).cloned();
                match (fv, tv) {
                    (Some(a), Some(b)) => Ok((a, b)),
                    _ => Err(Error::DanglingEdge(format!("edge ({}, {})", f, t))),
                }
            })
            .collect::<Result<_>>()?;
        Self::new(vertices, &names)
    }

    fn rebuild_adjacency(&mut self) {
        self.parents = vec![Vec::new(); self.vertices.len()];
        self.children = vec![Vec::new(); self.vertices.len()];
        for &(f, t) in &self.edges {
            self.parents[t].push(f);
            self.children[f].push(t);
        }
        for p in &mut self.parents {
            p.sort_unstable();
        }
        for c in &mut self.children {
            c.sort_unstable();
        }
    }

    fn check_acyclic(&self) -> Result<()> {
        // Kahn's algorithm; whatever survives is on or behind a cycle.
        let n = self.vertices.len();
        let mut indegree: Vec<usize> = self.parents.iter().map(|p| p.len()).collect();
        let mut queue: Vec<usize> = (0..n).filter(|&v| indegree[v] == 0).collect();
        let mut seen = 0usize;
        let mut head = 0usize;
        while head < queue.len() {
            let v = queue[head];
            head += 1;
            seen += 1;
            for &c in &self.children[v] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    queue.push(c);
                }
            }
        }
        if seen == n {
            return Ok(());
        }
        // Walk parent links among the remaining vertices until one repeats.
        let stuck: Vec<usize> = (0..n).filter(|&v| indegree[v] > 0).collect();
        let mut path = vec![stuck[0]];
        loop {
            let cur = *path.last().expect("nonempty path");
            let next = self.parents[cur]
                .iter()
                .copied()
                .find(|p| indegree[*p] > 0)
                .expect("cycle vertex has a cycle parent");
            if let Some(pos) = path.iter().position(|&v| v == next) {
                let mut cycle: Vec<&str> = path[pos..].iter().map(|&v| self.vertices[v].as_str()).collect();
                cycle.reverse();
                cycle.push(self.vertices[next].as_str());
                return Err(Error::Cycle(cycle.join(" -> ")));
            }
            path.push(next);
        }
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertex_names(&self) -> &[String] {
        &self.vertices
    }

    pub fn name(&self, v: usize) -> &str {
        &self.vertices[v]
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn vertex(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("modality {}", name)))
    }

    /// Direct predecessors, ascending by declaration index.
    pub fn parents(&self, m: usize) -> Result<&[usize]> {
        self.parents
            .get(m)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Lookup(format!("vertex index {}", m)))
    }

    pub fn children(&self, m: usize) -> Result<&[usize]> {
        self.children
            .get(m)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Lookup(format!("vertex index {}", m)))
    }

    /// Every vertex that can reach `m`, ascending by declaration index.
    pub fn ancestors(&self, m: usize) -> Result<Vec<usize>> {
        self.closure(m, |v| &self.parents[v])
    }

    /// Every vertex reachable from `m`, ascending by declaration index.
    pub fn offspring(&self, m: usize) -> Result<Vec<usize>> {
        self.closure(m, |v| &self.children[v])
    }

    fn closure<'a, F>(&'a self, m: usize, step: F) -> Result<Vec<usize>>
    where
        F: Fn(usize) -> &'a [usize],
    {
        if m >= self.vertices.len() {
            return Err(Error::Lookup(format!("vertex index {}", m)));
        }
        let mut seen = vec![false; self.vertices.len()];
        let mut frontier = vec![m];
        while let Some(v) = frontier.pop() {
            for &next in step(v) {
                if !seen[next] {
                    seen[next] = true;
                    frontier.push(next);
                }
            }
        }
        Ok((0..self.vertices.len()).filter(|&v| seen[v]).collect())
    }

    /// Longest-path depth per vertex; all vertices sharing a stage can be
    /// trained together.
    pub fn topo_stages(&self) -> TopoOrder {
        let n = self.vertices.len();
        let mut stage = vec![0usize; n];
        let mut indegree: Vec<usize> = self.parents.iter().map(|p| p.len()).collect();
        let mut queue: Vec<usize> = (0..n).filter(|&v| indegree[v] == 0).collect();
        for &v in &queue {
            stage[v] = 1;
        }
        let mut head = 0usize;
        while head < queue.len() {
            let v = queue[head];
            head += 1;
            for &c in &self.children[v] {
                stage[c] = stage[c].max(stage[v] + 1);
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    queue.push(c);
                }
            }
        }
        TopoOrder { stage }
    }
}
