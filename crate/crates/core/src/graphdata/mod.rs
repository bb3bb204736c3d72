//! Graphs, batches, and dataset persistence.

mod batch;
mod graph;
mod io;

pub use batch::Batch;
pub use graph::{normalize_adjacency, Graph, GraphMeta};
pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, FORMAT, VERSION};

use crate::scmgen::GenConfig;

/// Train/validation/test graphs with the generator settings that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<Graph>,
    pub val: Vec<Graph>,
    pub test: Vec<Graph>,
    pub gen_config: GenConfig,
}
