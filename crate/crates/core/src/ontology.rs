//! Code hierarchy and the ancestor-attention code embedder.
//!
//! Each leaf code is embedded as a convex combination of the base
//! embeddings of itself and all of its ancestors. The mixing weights come
//! from a softmax over a small MLP score of the concatenated
//! `(child, ancestor)` base embeddings.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_cols, stack_rows, Bound, ParamId, ParamStore, Tape, Var};
use crate::error::{OtcError, Result};

/// Bundled three-level toy diagnosis hierarchy.
pub const TOY_ONTOLOGY_JSON: &str = include_str!("../data/toy_ontology.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    pub child: String,
    pub parent: String,
}

/// On-disk ontology document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OntologyFile {
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub edges: Vec<EdgeSpec>,
}

#[derive(Debug, Clone)]
pub struct OntologyDag {
    ids: Vec<String>,
    labels: Vec<Option<String>>,
    index: HashMap<String, usize>,
    parents: Vec<BTreeSet<usize>>,
    leaves: Vec<usize>,
    leaf_slot: HashMap<usize, usize>,
    closures: HashMap<usize, Vec<usize>>,
}

impl OntologyDag {
    pub fn from_file(file: OntologyFile) -> Result<Self> {
        let mut index = HashMap::new();
        let mut ids = Vec::with_capacity(file.nodes.len());
        let mut labels = Vec::with_capacity(file.nodes.len());
        for node in file.nodes {
            if index.insert(node.id.clone(), ids.len()).is_some() {
                return Err(OtcError::Ontology(format!("duplicate node `{}`", node.id)));
            }
            ids.push(node.id);
            labels.push(node.label);
        }
        if ids.is_empty() {
            return Err(OtcError::Ontology("ontology has no nodes".into()));
        }
        let mut parents = vec![BTreeSet::new(); ids.len()];
        let mut has_child = vec![false; ids.len()];
        for e in &file.edges {
            let lookup = |id: &str| {
                index
                    .get(id)
                    .copied()
                    .ok_or_else(|| OtcError::Ontology(format!("edge references unknown node `{id}`")))
            };
            let (c, p) = (lookup(&e.child)?, lookup(&e.parent)?);
            if c == p {
                return Err(OtcError::Ontology(format!("self-loop on `{}`", e.child)));
            }
            parents[c].insert(p);
            has_child[p] = true;
        }
        check_acyclic(&ids, &parents)?;

        let leaves: Vec<usize> = (0..ids.len()).filter(|&i| !has_child[i]).collect();
        let leaf_slot = leaves.iter().enumerate().map(|(s, &i)| (i, s)).collect();
        let mut dag = Self {
            ids,
            labels,
            index,
            parents,
            leaves,
            leaf_slot,
            closures: HashMap::new(),
        };
        dag.closures = dag
            .leaves
            .iter()
            .map(|&leaf| (leaf, dag.closure_of(leaf)))
            .collect();
        Ok(dag)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn toy() -> Self {
        Self::from_json(TOY_ONTOLOGY_JSON).expect("bundled ontology is valid")
    }

    /// Document form; edges are listed child by child in node order.
    pub fn to_file(&self) -> OntologyFile {
        OntologyFile {
            nodes: self
                .ids
                .iter()
                .zip(&self.labels)
                .map(|(id, label)| NodeSpec {
                    id: id.clone(),
                    label: label.clone(),
                })
                .collect(),
            edges: self
                .parents
                .iter()
                .enumerate()
                .flat_map(|(c, ps)| {
                    ps.iter().map(move |&p| EdgeSpec {
                        child: self.ids[c].clone(),
                        parent: self.ids[p].clone(),
                    })
                })
                .collect(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.ids.len()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.ids
    }

    pub fn label(&self, code: &str) -> Option<&str> {
        self.index.get(code).and_then(|&i| self.labels[i].as_deref())
    }

    pub fn contains(&self, code: &str) -> bool {
        self.index.contains_key(code)
    }

    pub fn is_leaf(&self, code: &str) -> bool {
        self.index
            .get(code)
            .is_some_and(|i| self.leaf_slot.contains_key(i))
    }

    pub fn leaves(&self) -> impl Iterator<Item = &str> + '_ {
        self.leaves.iter().map(|&i| self.ids[i].as_str())
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    /// Position of `code` among the leaves.
    pub fn leaf_index(&self, code: &str) -> Result<usize> {
        self.index
            .get(code)
            .and_then(|i| self.leaf_slot.get(i))
            .copied()
            .ok_or_else(|| OtcError::MissingCode(code.to_string()))
    }

    fn node_index(&self, code: &str) -> Result<usize> {
        self.index
            .get(code)
            .copied()
            .ok_or_else(|| OtcError::MissingCode(code.to_string()))
    }

    /// The code itself followed by all transitive parents, children before
    /// parents with ties broken by id.
    pub fn ancestor_closure(&self, code: &str) -> Result<Vec<String>> {
        let i = self.node_index(code)?;
        let closure = match self.closures.get(&i) {
            Some(c) => c.clone(),
            None => self.closure_of(i),
        };
        Ok(closure.into_iter().map(|j| self.ids[j].clone()).collect())
    }

    fn closure_indices(&self, leaf_slot: usize) -> &[usize] {
        &self.closures[&self.leaves[leaf_slot]]
    }

    fn closure_of(&self, start: usize) -> Vec<usize> {
        let mut members = BTreeSet::from([start]);
        let mut stack = vec![start];
        while let Some(n) = stack.pop() {
            for &p in &self.parents[n] {
                if members.insert(p) {
                    stack.push(p);
                }
            }
        }
        // Kahn's algorithm restricted to the closure; a node is ready once
        // all of its children inside the closure are placed.
        let mut pending: BTreeMap<usize, usize> = members.iter().map(|&m| (m, 0)).collect();
        for &m in &members {
            for p in &self.parents[m] {
                *pending.get_mut(p).expect("parent in closure") += 1;
            }
        }
        let mut ready: BTreeSet<(&str, usize)> = pending
            .iter()
            .filter(|(_, &c)| c == 0)
            .map(|(&m, _)| (self.ids[m].as_str(), m))
            .collect();
        let mut order = Vec::with_capacity(members.len());
        while let Some(first) = ready.pop_first() {
            let m = first.1;
            order.push(m);
            for &p in &self.parents[m] {
                let c = pending.get_mut(&p).expect("parent in closure");
                *c -= 1;
                if *c == 0 {
                    ready.insert((self.ids[p].as_str(), p));
                }
            }
        }
        order
    }
}

fn check_acyclic(ids: &[String], parents: &[BTreeSet<usize>]) -> Result<()> {
    let mut indegree = vec![0usize; ids.len()];
    for ps in parents {
        for &p in ps {
            indegree[p] += 1;
        }
    }
    let mut queue: Vec<usize> = (0..ids.len()).filter(|&i| indegree[i] == 0).collect();
    let mut seen = 0;
    while let Some(n) = queue.pop() {
        seen += 1;
        for &p in &parents[n] {
            indegree[p] -= 1;
            if indegree[p] == 0 {
                queue.push(p);
            }
        }
    }
    if seen != ids.len() {
        let stuck: Vec<&str> = (0..ids.len())
            .filter(|&i| indegree[i] > 0)
            .map(|i| ids[i].as_str())
            .collect();
        return Err(OtcError::Ontology(format!("cycle through {stuck:?}")));
    }
    Ok(())
}

/// Learnable base embeddings for every node plus the ancestor-attention MLP.
#[derive(Debug, Clone)]
pub struct CodeEmbedder {
    pub dim: usize,
    base: ParamId,
    w: ParamId,
    b: ParamId,
    omega: ParamId,
}

/// Embeddings of every leaf computed on one tape.
pub struct LeafEmbeddings<'t> {
    /// `num_leaves × dim`, rows in leaf order.
    pub table: Var<'t>,
    /// Attention over each leaf's ancestor closure, aligned with
    /// [`OntologyDag::ancestor_closure`].
    pub weights: Vec<Vec<f64>>,
}

impl CodeEmbedder {
    pub fn new<R: Rng>(
        dag: &OntologyDag,
        dim: usize,
        attn_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let limit = 1.0 / (dim as f64).sqrt();
        let base = store.add_uniform("onto.base", &[dag.num_nodes(), dim], limit, rng);
        let w = store.add_glorot("onto.w", 2 * dim, attn_dim, rng);
        let b = store.add_filled("onto.b", attn_dim, 0.0);
        let omega = store.add_glorot("onto.omega", attn_dim, 1, rng);
        Self {
            dim,
            base,
            w,
            b,
            omega,
        }
    }

    pub fn base_id(&self) -> ParamId {
        self.base
    }

    /// Embeds one code given its base-table rows; `closure[0]` is the code.
    fn embed_closure<'t>(
        &self,
        base: Var<'t>,
        w: Var<'t>,
        b: Var<'t>,
        omega: Var<'t>,
        closure: &[usize],
    ) -> Result<(Var<'t>, Vec<f64>)> {
        let own = base.gather_rows(&vec![closure[0]; closure.len()])?;
        let anc = base.gather_rows(closure)?;
        let scores = concat_cols(&[own, anc])?
            .matmul(w)?
            .add_bias(b)?
            .tanh()
            .matmul(omega)?;
        let alpha = scores.transpose().softmax(None)?;
        let q = alpha.matmul(anc)?;
        let weights = alpha.value().data().to_vec();
        Ok((q, weights))
    }

    /// Embedding and ancestor weights for a single code.
    pub fn encode_code<'t>(
        &self,
        params: &Bound<'t>,
        dag: &OntologyDag,
        code: &str,
    ) -> Result<(Var<'t>, Vec<f64>)> {
        let i = dag.node_index(code)?;
        let closure = match dag.closures.get(&i) {
            Some(c) => c.clone(),
            None => dag.closure_of(i),
        };
        self.embed_closure(
            params.get(self.base),
            params.get(self.w),
            params.get(self.b),
            params.get(self.omega),
            &closure,
        )
    }

    /// Embeds every leaf of the hierarchy.
    pub fn encode_leaves<'t>(&self, params: &Bound<'t>, dag: &OntologyDag) -> Result<LeafEmbeddings<'t>> {
        let (base, w, b, omega) = (
            params.get(self.base),
            params.get(self.w),
            params.get(self.b),
            params.get(self.omega),
        );
        let mut rows = Vec::with_capacity(dag.num_leaves());
        let mut weights = Vec::with_capacity(dag.num_leaves());
        for slot in 0..dag.num_leaves() {
            let (q, wts) = self.embed_closure(base, w, b, omega, dag.closure_indices(slot))?;
            rows.push(q);
            weights.push(wts);
        }
        Ok(LeafEmbeddings {
            table: stack_rows(&rows)?,
            weights,
        })
    }

    /// `(ancestor id, weight)` pairs in closure order.
    pub fn export_code_attention(
        &self,
        store: &ParamStore,
        dag: &OntologyDag,
        code: &str,
    ) -> Result<Vec<(String, f64)>> {
        let tape = Tape::new();
        let params = Bound::new(&tape, store);
        let (_, weights) = self.encode_code(&params, dag, code)?;
        Ok(dag.ancestor_closure(code)?.into_iter().zip(weights).collect())
    }
}
