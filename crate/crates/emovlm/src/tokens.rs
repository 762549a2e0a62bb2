//! Ordered token sequences with a provenance tag — the currency passed
//! between pipeline stages.

use crate::autodiff::{Graph, Var};
use serde::{Deserialize, Serialize};

/// Which stage produced a token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    FrameGlobal,
    FrameLocal,
    FrameFused,
    Window,
    VideoGlobal,
    Audio,
    Text,
}

/// A graph-resident `[n, d]` token matrix. Order is position-significant;
/// the provenance is fixed at construction.
#[derive(Clone, Copy, Debug)]
pub struct TokenSeq {
    pub node: Var,
    pub rows: usize,
    pub width: usize,
    pub provenance: Provenance,
}

impl TokenSeq {
    pub fn new(g: &Graph, node: Var, provenance: Provenance) -> Self {
        let (rows, width) = g.shape(node);
        TokenSeq {
            node,
            rows,
            width,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }
}
