//! Fixed sparse linear maps (gathers, scatters, pooling stencils).
//!
//! Every structural tensor operation in the network (im2col, layout
//! permutations, pooling, row selection) is a constant sparse matrix. Its
//! adjoint is the transposed matrix, so both directions are stored together
//! and backward passes of any order just flip between them.

/// Compressed sparse rows; `vals == None` means every stored entry is 1.
#[derive(Debug, Clone)]
pub struct Csr {
    out_len: usize,
    in_len: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Option<Vec<f64>>,
}

impl Csr {
    pub fn out_len(&self) -> usize {
        self.out_len
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_len);
        let mut out = vec![0.0; self.out_len];
        match &self.vals {
            None => {
                for (r, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for &c in &self.cols[self.offsets[r]..self.offsets[r + 1]] {
                        acc += x[c];
                    }
                    *o = acc;
                }
            }
            Some(vals) => {
                for (r, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for k in self.offsets[r]..self.offsets[r + 1] {
                        acc += vals[k] * x[self.cols[k]];
                    }
                    *o = acc;
                }
            }
        }
        out
    }

    fn transpose(&self) -> Csr {
        let mut counts = vec![0usize; self.in_len + 1];
        for &c in &self.cols {
            counts[c + 1] += 1;
        }
        for i in 0..self.in_len {
            counts[i + 1] += counts[i];
        }
        let offsets = counts.clone();
        let mut fill = counts;
        let mut cols = vec![0usize; self.cols.len()];
        let mut vals = self.vals.as_ref().map(|v| vec![0.0; v.len()]);
        for r in 0..self.out_len {
            for k in self.offsets[r]..self.offsets[r + 1] {
                let c = self.cols[k];
                let dst = fill[c];
                fill[c] += 1;
                cols[dst] = r;
                if let (Some(out), Some(src)) = (vals.as_mut(), self.vals.as_ref()) {
                    out[dst] = src[k];
                }
            }
        }
        Csr {
            out_len: self.in_len,
            in_len: self.out_len,
            offsets,
            cols,
            vals,
        }
    }
}

/// A sparse map together with its adjoint.
#[derive(Debug)]
pub struct SparsePair {
    forward: Csr,
    adjoint: Csr,
}

impl SparsePair {
    pub fn new(forward: Csr) -> Self {
        let adjoint = forward.transpose();
        SparsePair { forward, adjoint }
    }

    pub fn get(&self, transposed: bool) -> &Csr {
        if transposed {
            &self.adjoint
        } else {
            &self.forward
        }
    }
}

/// Row-by-row builder for a [`Csr`].
pub struct CsrBuilder {
    in_len: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    weighted: bool,
}

impl CsrBuilder {
    pub fn new(in_len: usize) -> Self {
        CsrBuilder {
            in_len,
            offsets: vec![0],
            cols: Vec::new(),
            vals: Vec::new(),
            weighted: false,
        }
    }

    pub fn push(&mut self, col: usize, val: f64) {
        debug_assert!(col < self.in_len);
        if val != 1.0 {
            self.weighted = true;
        }
        self.cols.push(col);
        self.vals.push(val);
    }

    pub fn end_row(&mut self) {
        self.offsets.push(self.cols.len());
    }

    pub fn finish(self) -> Csr {
        Csr {
            out_len: self.offsets.len() - 1,
            in_len: self.in_len,
            offsets: self.offsets,
            cols: self.cols,
            vals: self.weighted.then_some(self.vals),
        }
    }
}

/// Gather map: `out[i] = x[index[i]]`, or 0 where the index is `None`.
pub fn gather(in_len: usize, index: impl IntoIterator<Item = Option<usize>>) -> Csr {
    let mut b = CsrBuilder::new(in_len);
    for idx in index {
        if let Some(c) = idx {
            b.push(c, 1.0);
        }
        b.end_row();
    }
    b.finish()
}
