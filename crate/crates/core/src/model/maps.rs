//! Cached structural maps for the convolutional network.
//!
//! Activations inside the network use channel-major `[C, N, H, W]` layout so
//! that a convolution is one matrix product `W[Cout, Cin*k*k] x cols[Cin*k*k,
//! N*H*W]` and BN statistics reduce over a contiguous inner axis.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::autodiff::sparse::{gather, CsrBuilder};
use crate::autodiff::SparsePair;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
enum MapKey {
    Im2col {
        c: usize,
        n: usize,
        h: usize,
        w: usize,
        k: usize,
    },
    AvgPool2 {
        c: usize,
        n: usize,
        h: usize,
        w: usize,
    },
    NchwToCnhw {
        n: usize,
        c: usize,
        hw: usize,
    },
    Rows {
        total: usize,
        start: usize,
        len: usize,
        row: usize,
    },
    RepeatChannels {
        n: usize,
        c: usize,
        hw: usize,
    },
}

thread_local! {
    static CACHE: RefCell<HashMap<MapKey, Rc<SparsePair>>> = RefCell::new(HashMap::new());
}

fn cached(key: MapKey, build: impl FnOnce() -> SparsePair) -> Rc<SparsePair> {
    if let Some(m) = CACHE.with(|c| c.borrow().get(&key).cloned()) {
        return m;
    }
    let m = Rc::new(build());
    CACHE.with(|c| c.borrow_mut().insert(key, m.clone()));
    m
}

/// `[C, N, H, W]` -> `[C*k*k, N*H*W]` patches for a stride-1, same-padded
/// `k x k` convolution.
pub fn im2col(c: usize, n: usize, h: usize, w: usize, k: usize) -> Rc<SparsePair> {
    cached(MapKey::Im2col { c, n, h, w, k }, || {
        let pad = (k / 2) as isize;
        let in_len = c * n * h * w;
        let idx = (0..c).flat_map(move |ci| {
            (0..k * k).flat_map(move |kk| {
                let (ky, kx) = ((kk / k) as isize, (kk % k) as isize);
                (0..n * h * w).map(move |col| {
                    let ni = col / (h * w);
                    let y = ((col / w) % h) as isize + ky - pad;
                    let x = (col % w) as isize + kx - pad;
                    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                        None
                    } else {
                        Some(((ci * n + ni) * h + y as usize) * w + x as usize)
                    }
                })
            })
        });
        SparsePair::new(gather(in_len, idx))
    })
}

/// 2x2 average pooling with stride 2 on `[C, N, H, W]`; odd trailing rows
/// and columns are dropped.
pub fn avg_pool2(c: usize, n: usize, h: usize, w: usize) -> Rc<SparsePair> {
    cached(MapKey::AvgPool2 { c, n, h, w }, || {
        let (ho, wo) = (h / 2, w / 2);
        let mut b = CsrBuilder::new(c * n * h * w);
        for plane in 0..c * n {
            for y in 0..ho {
                for x in 0..wo {
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        b.push(plane * h * w + (2 * y + dy) * w + 2 * x + dx, 0.25);
                    }
                    b.end_row();
                }
            }
        }
        SparsePair::new(b.finish())
    })
}

/// Permutes `[N, C, HW]` into `[C, N, HW]`.
pub fn nchw_to_cnhw(n: usize, c: usize, hw: usize) -> Rc<SparsePair> {
    cached(MapKey::NchwToCnhw { n, c, hw }, || {
        let idx = (0..c).flat_map(move |ci| {
            (0..n).flat_map(move |ni| (0..hw).map(move |p| Some((ni * c + ci) * hw + p)))
        });
        SparsePair::new(gather(n * c * hw, idx))
    })
}

/// Selects rows `start..start+len` of a `[total, row]` array.
pub fn rows(total: usize, start: usize, len: usize, row: usize) -> Rc<SparsePair> {
    cached(MapKey::Rows { total, start, len, row }, || {
        let idx = (start * row..(start + len) * row).map(Some);
        SparsePair::new(gather(total * row, idx))
    })
}

/// Broadcasts a single-channel `[N, 1, HW]` batch to `[N, C, HW]`.
pub fn repeat_channels(n: usize, c: usize, hw: usize) -> Rc<SparsePair> {
    cached(MapKey::RepeatChannels { n, c, hw }, || {
        let idx = (0..n).flat_map(move |ni| (0..c).flat_map(move |_| (0..hw).map(move |p| Some(ni * hw + p))));
        SparsePair::new(gather(n * hw, idx))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_center_tap_is_identity() {
        let (c, n, h, w, k) = (2, 2, 3, 4, 3);
        let m = im2col(c, n, h, w, k);
        let x: Vec<f64> = (0..c * n * h * w).map(|v| v as f64).collect();
        let cols = m.get(false).apply(&x);
        let nhw = n * h * w;
        // row (ci, ky=1, kx=1) is the unshifted channel
        for ci in 0..c {
            let row = ci * k * k + 4;
            assert_eq!(&cols[row * nhw..(row + 1) * nhw], &x[ci * nhw..(ci + 1) * nhw]);
        }
        // top-left tap at the first pixel reads padding
        assert_eq!(cols[0], 0.0);
    }

    #[test]
    fn pooling_averages_blocks() {
        let m = avg_pool2(1, 1, 2, 2);
        assert_eq!(m.get(false).apply(&[1.0, 2.0, 3.0, 6.0]), vec![3.0]);
    }

    #[test]
    fn layout_permutation() {
        let m = nchw_to_cnhw(2, 3, 1);
        // NCHW: n0 = [0,1,2], n1 = [3,4,5]
        assert_eq!(
            m.get(false).apply(&[0., 1., 2., 3., 4., 5.]),
            vec![0., 3., 1., 4., 2., 5.]
        );
    }
}
