//! Line-delimited JSON dataset files.
//!
//! Line 1 is a header `{"format":"ciga-ds","version":1,"gen_config":{..},
//! "splits":{"train":N,"val":N,"test":N}}`; the following lines hold one graph
//! each, train first, then validation, then test. Floats are written in
//! shortest round-trip form, so a load reproduces the saved values exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetSplits, Graph, GraphMeta};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::scmgen::GenConfig;

pub const FORMAT: &str = "ciga-ds";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SplitCounts {
    train: usize,
    val: usize,
    test: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    gen_config: GenConfig,
    splits: SplitCounts,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRecord {
    n: usize,
    edges: Vec<[u32; 2]>,
    x: Vec<Vec<f64>>,
    y: usize,
    meta: GraphMeta,
}

impl From<&Graph> for GraphRecord {
    fn from(g: &Graph) -> Self {
        Self {
            n: g.num_nodes(),
            edges: g.edges().iter().map(|&(u, v)| [u, v]).collect(),
            x: g.features().to_rows(),
            y: g.label(),
            meta: g.meta().clone(),
        }
    }
}

impl GraphRecord {
    fn into_graph(self) -> Result<Graph> {
        if self.x.len() != self.n {
            return Err(Error::Shape(format!("{} feature rows for n = {}", self.x.len(), self.n)));
        }
        let d = self.x.first().map_or(0, Vec::len);
        let features = if self.n == 0 {
            Matrix::zeros(0, 0)
        } else {
            Matrix::from_rows(&self.x)?
        };
        debug_assert_eq!(features.cols(), d);
        Graph::new(
            self.n,
            self.edges.into_iter().map(|[u, v]| (u, v)).collect(),
            features,
            self.y,
            self.meta,
        )
    }
}

pub fn write_dataset<W: Write>(splits: &DatasetSplits, mut w: W) -> Result<()> {
    let header = Header {
        format: FORMAT.to_string(),
        version: VERSION,
        gen_config: splits.gen_config.clone(),
        splits: SplitCounts {
            train: splits.train.len(),
            val: splits.val.len(),
            test: splits.test.len(),
        },
    };
    let io = |e| Error::io("<dataset writer>", e);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    for g in splits.train.iter().chain(&splits.val).chain(&splits.test) {
        serde_json::to_writer(&mut w, &GraphRecord::from(g))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_dataset<R: Read>(r: R) -> Result<DatasetSplits> {
    let mut lines = BufReader::new(r).lines();
    let parse_err = |line: usize, msg: String| Error::Parse { line, msg };

    let first = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".into()))?
        .map_err(|e| parse_err(1, e.to_string()))?;
    let raw: serde_json::Value =
        serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
    if raw.get("format").and_then(|f| f.as_str()) != Some(FORMAT) {
        return Err(parse_err(1, format!("missing or wrong format tag (expected `{FORMAT}`)")));
    }
    let version = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| parse_err(1, "missing version".into()))?;
    if version != VERSION as u64 {
        return Err(Error::Version {
            found: version.min(u32::MAX as u64) as u32,
            expected: VERSION,
        });
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| parse_err(1, e.to_string()))?;

    let counts = [header.splits.train, header.splits.val, header.splits.test];
    let mut parts: [Vec<Graph>; 3] = Default::default();
    let mut line_no = 1;
    for (part, &count) in parts.iter_mut().zip(&counts) {
        part.reserve(count);
        for _ in 0..count {
            line_no += 1;
            let text = lines
                .next()
                .ok_or_else(|| parse_err(line_no, "unexpected end of file".into()))?
                .map_err(|e| parse_err(line_no, e.to_string()))?;
            let record: GraphRecord =
                serde_json::from_str(&text).map_err(|e| parse_err(line_no, e.to_string()))?;
            part.push(
                record
                    .into_graph()
                    .map_err(|e| parse_err(line_no, e.to_string()))?,
            );
        }
    }
    for rest in lines {
        line_no += 1;
        let text = rest.map_err(|e| parse_err(line_no, e.to_string()))?;
        if !text.trim().is_empty() {
            return Err(parse_err(line_no, "records beyond the declared split counts".into()));
        }
    }
    let [train, val, test] = parts;
    Ok(DatasetSplits {
        train,
        val,
        test,
        gen_config: header.gen_config,
    })
}

pub fn save_dataset(splits: &DatasetSplits, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(splits, BufWriter::new(file))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetSplits> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(file)
}
