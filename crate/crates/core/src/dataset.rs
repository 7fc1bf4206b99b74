//! Problem instances and their JSON-lines representation.
//!
//! One instance per line:
//!
//! ```text
//! {"num_nodes": p, "edges": [[src,dst],...], "node_feat": [[...]...],
//!  "edge_feat": [[...]...], "node_target": [...],
//!  "meta": {"problem": "gvi"|"diffusion", "alpha"|"mu": ..., "seed": ...}}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CgsError, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Gvi,
    Diffusion,
}

impl std::str::FromStr for ProblemKind {
    type Err = CgsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gvi" => Ok(ProblemKind::Gvi),
            "diffusion" => Ok(ProblemKind::Diffusion),
            other => Err(CgsError::Config(format!("unknown problem {other:?}"))),
        }
    }
}

impl std::fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProblemKind::Gvi => "gvi",
            ProblemKind::Diffusion => "diffusion",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub problem: ProblemKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    pub seed: u64,
    /// Echo of the generator settings, enough to regenerate the instance.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub spec: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub graph: Graph,
    /// `[p x 1]`
    pub node_target: Tensor,
    pub meta: InstanceMeta,
}

impl ProblemInstance {
    pub fn new(graph: Graph, node_target: Vec<f64>, meta: InstanceMeta) -> Result<Self> {
        if node_target.len() != graph.num_nodes() {
            return Err(CgsError::dim("ProblemInstance targets", &[graph.num_nodes()], &[node_target.len()]));
        }
        if node_target.iter().any(|v| !v.is_finite()) {
            return Err(CgsError::Validation("non-finite target".into()));
        }
        Ok(ProblemInstance {
            graph,
            node_target: Tensor::column(node_target),
            meta,
        })
    }

    pub fn targets(&self) -> &[f64] {
        self.node_target.data()
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    num_nodes: usize,
    edges: Vec<[usize; 2]>,
    node_feat: Vec<Vec<f64>>,
    edge_feat: Vec<Vec<f64>>,
    node_target: Vec<f64>,
    meta: InstanceMeta,
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn matrix(rows: &[Vec<f64>], n: usize, what: &str) -> Result<Tensor> {
    if rows.len() != n {
        return Err(CgsError::Validation(format!("{what} has {} rows, expected {n}", rows.len())));
    }
    if rows.is_empty() {
        return Ok(Tensor::zeros(&[0, 0]));
    }
    Tensor::from_rows(rows)
}

impl ProblemInstance {
    pub fn to_json_line(&self) -> Result<String> {
        let rec = Record {
            num_nodes: self.graph.num_nodes(),
            edges: self.graph.edges().iter().map(|&(s, d)| [s, d]).collect(),
            node_feat: rows(self.graph.node_feat()),
            edge_feat: rows(self.graph.edge_feat()),
            node_target: self.node_target.data().to_vec(),
            meta: self.meta.clone(),
        };
        serde_json::to_string(&rec).map_err(|e| CgsError::Parse {
            line: 0,
            message: e.to_string(),
        })
    }

    pub fn from_json_line(line: &str, line_no: usize) -> Result<Self> {
        let rec: Record = serde_json::from_str(line).map_err(|e| CgsError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let node_feat = matrix(&rec.node_feat, rec.num_nodes, "node_feat")?;
        let edge_feat = matrix(&rec.edge_feat, rec.edges.len(), "edge_feat")?;
        let edges = rec.edges.iter().map(|e| (e[0], e[1])).collect();
        let graph = Graph::new(rec.num_nodes, edges, node_feat, edge_feat).map_err(|e| match e {
            CgsError::Validation(m) => CgsError::Validation(format!("line {line_no}: {m}")),
            other => other,
        })?;
        ProblemInstance::new(graph, rec.node_target, rec.meta)
    }
}

pub fn write_jsonl(path: impl AsRef<Path>, instances: &[ProblemInstance]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| CgsError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in instances {
        writeln!(w, "{}", inst.to_json_line()?).map_err(|e| CgsError::io(path, e))?;
    }
    w.flush().map_err(|e| CgsError::io(path, e))
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<ProblemInstance>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CgsError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CgsError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(ProblemInstance::from_json_line(&line, i + 1)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ProblemInstance {
        let g = Graph::new(
            2,
            vec![(0, 1)],
            Tensor::from_rows(&[vec![1.0], vec![0.1 + 0.2]]).unwrap(),
            Tensor::from_rows(&[vec![-0.123_456_789_012_345_67]]).unwrap(),
        )
        .unwrap();
        let meta = InstanceMeta {
            problem: ProblemKind::Gvi,
            alpha: Some(0.9),
            mu: None,
            seed: 3,
            spec: serde_json::Value::Null,
        };
        ProblemInstance::new(g, vec![1.0 / 3.0, 2.0], meta).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let inst = tiny();
        write_jsonl(&path, &[inst.clone()]).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, vec![inst]);
    }

    #[test]
    fn empty_file_reads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_jsonl(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let good = tiny().to_json_line().unwrap();
        std::fs::write(&path, format!("{good}\n{{\"num_nodes\": 2,\n")).unwrap();
        match read_jsonl(&path) {
            Err(CgsError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_endpoint_is_validation_error() {
        let line = tiny().to_json_line().unwrap().replace("[[0,1]]", "[[0,5]]");
        assert!(matches!(
            ProblemInstance::from_json_line(&line, 1),
            Err(CgsError::Validation(_))
        ));
    }
}
