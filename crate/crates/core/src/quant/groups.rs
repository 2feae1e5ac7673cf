//! Group layout shared by the quantizers, the STE backward rules and the
//! packed inference kernel.
//!
//! A `[rows x cols]` weight matrix is partitioned into scale groups. With
//! per-channel granularity each row is one group. With sub-channel
//! granularity each row is padded with zeros to the next multiple of the
//! block size and cut into `ceil(cols / block)` consecutive blocks; the
//! split matrix has shape `[rows * groups_per_row, block]` in the same
//! row-major element order. Pad positions exist only in the split layout:
//! they are excluded from group statistics and stripped on dequantization.

use crate::quant::Granularity;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupLayout {
    pub rows: usize,
    pub cols: usize,
    /// Group length in the split layout (equals `cols` for per-channel).
    pub block: usize,
    pub groups_per_row: usize,
    /// Zeros appended to each row before the split.
    pub pad: usize,
}

impl GroupLayout {
    pub fn new(rows: usize, cols: usize, granularity: Granularity) -> Self {
        match granularity {
            Granularity::PerChannel => Self {
                rows,
                cols,
                block: cols,
                groups_per_row: 1,
                pad: 0,
            },
            Granularity::SubChannel { block_size } => {
                let pad = (block_size - cols % block_size) % block_size;
                Self {
                    rows,
                    cols,
                    block: block_size,
                    groups_per_row: (cols + pad) / block_size,
                    pad,
                }
            }
        }
    }

    pub fn group_count(&self) -> usize {
        self.rows * self.groups_per_row
    }

    /// Shape of the split matrix, pad slots included.
    pub fn split_shape(&self) -> (usize, usize) {
        (self.group_count(), self.block)
    }

    /// Source row and real column range `[start, end)` covered by group `g`.
    /// Pad slots at the tail of a final partial block are not part of the
    /// range.
    pub fn group_span(&self, g: usize) -> GroupSpan {
        let row = g / self.groups_per_row;
        let start = (g % self.groups_per_row) * self.block;
        let end = (start + self.block).min(self.cols);
        GroupSpan {
            row,
            col_start: start,
            col_end: end,
        }
    }
}

/// Real-element extent of one group within the original matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupSpan {
    pub row: usize,
    pub col_start: usize,
    pub col_end: usize,
}
