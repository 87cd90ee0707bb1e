//! Content-stream and query-stream attention masks.
//!
//! Both masks are derived from the group index of every position. A content
//! row may look at its own group and every earlier group; a query row may
//! only look at strictly earlier groups. With a BOS sentinel prepended as
//! group zero, every query row keeps at least one visible column.

use std::fmt;

use thiserror::Error;

use crate::grouping::{Grouping, Violation};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error(transparent)]
    Grouping(#[from] Violation),
    #[error("{which} mask is {got}x{got}, grouping needs {want}x{want}")]
    Shape { which: Stream, got: usize, want: usize },
    #[error("{which} mask mismatch at ({row}, {col}): expected {expected}")]
    Mismatch {
        which: Stream,
        row: usize,
        col: usize,
        expected: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Content,
    Query,
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stream::Content => "content",
            Stream::Query => "query",
        })
    }
}

/// Square boolean matrix, `true` = attention allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMatrix {
    n: usize,
    data: Vec<bool>,
}

impl BoolMatrix {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j));
            }
        }
        Self { n, data }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// Rows with no allowed column.
    pub fn empty_rows(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| !self.row(i).iter().any(|&b| b)).collect()
    }

    /// Text grid, `#` allowed and `.` blocked, one row per line.
    pub fn render(&self) -> String {
        let mut out = String::with_capacity(self.n * (self.n + 1));
        for i in 0..self.n {
            out.extend(self.row(i).iter().map(|&b| if b { '#' } else { '.' }));
            out.push('\n');
        }
        out
    }
}

/// Both masks for one grouping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPair {
    pub content: BoolMatrix,
    pub query: BoolMatrix,
    pub with_bos: bool,
}

impl MaskPair {
    pub fn new(g: &Grouping, with_bos: bool) -> Result<Self, MaskError> {
        Ok(Self {
            content: content_mask(g, with_bos)?,
            query: query_mask(g, with_bos)?,
            with_bos,
        })
    }
}

/// Group rank of every mask row. With BOS, row 0 is the sentinel at rank 0
/// and every grouped position moves down one row and up one rank.
pub fn row_ranks(g: &Grouping, with_bos: bool) -> Result<Vec<usize>, Violation> {
    g.validate(g.len())?;
    let ranks = g.group_of();
    Ok(if with_bos {
        std::iter::once(0)
            .chain(ranks.into_iter().map(|r| r + 1))
            .collect()
    } else {
        ranks
    })
}

pub fn content_mask(g: &Grouping, with_bos: bool) -> Result<BoolMatrix, MaskError> {
    let rank = row_ranks(g, with_bos)?;
    Ok(BoolMatrix::from_fn(rank.len(), |i, j| rank[j] <= rank[i]))
}

/// Strict-predecessor mask. Without BOS the rows of the first group are
/// all blocked; that case is logged but still returned.
pub fn query_mask(g: &Grouping, with_bos: bool) -> Result<BoolMatrix, MaskError> {
    let rank = row_ranks(g, with_bos)?;
    let m = BoolMatrix::from_fn(rank.len(), |i, j| rank[j] < rank[i]);
    if !with_bos {
        let empty = m.empty_rows();
        if !empty.is_empty() {
            log::warn!("query mask without BOS leaves rows {empty:?} with no visible column");
        }
    }
    Ok(m)
}

/// Recomputes both masks from `g` by their set definitions and compares them
/// element-wise against `mp`, reporting the first mismatch.
pub fn check_flow(mp: &MaskPair, g: &Grouping) -> Result<(), MaskError> {
    g.validate(g.len())?;
    let group_of = g.group_of();
    let offset = usize::from(mp.with_bos);
    let want = g.len() + offset;
    for (which, m) in [(Stream::Content, &mp.content), (Stream::Query, &mp.query)] {
        if m.size() != want {
            return Err(MaskError::Shape {
                which,
                got: m.size(),
                want,
            });
        }
    }
    // Earlier-or-same group membership, straight from the group lists.
    let members_upto = |k: usize, strict: bool| -> Vec<bool> {
        let mut seen = vec![false; want];
        if mp.with_bos {
            seen[0] = true;
        }
        let end = if strict { k } else { k + 1 };
        for group in &g.groups()[..end] {
            for &p in group {
                seen[p + offset] = true;
            }
        }
        seen
    };
    for row in 0..want {
        let (content_row, query_row) = if mp.with_bos && row == 0 {
            let mut c = vec![false; want];
            c[0] = true;
            (c, vec![false; want])
        } else {
            let k = group_of[row - offset];
            (members_upto(k, false), members_upto(k, true))
        };
        for col in 0..want {
            if mp.content.get(row, col) != content_row[col] {
                return Err(MaskError::Mismatch {
                    which: Stream::Content,
                    row,
                    col,
                    expected: content_row[col],
                });
            }
            if mp.query.get(row, col) != query_row[col] {
                return Err(MaskError::Mismatch {
                    which: Stream::Query,
                    row,
                    col,
                    expected: query_row[col],
                });
            }
        }
    }
    Ok(())
}
