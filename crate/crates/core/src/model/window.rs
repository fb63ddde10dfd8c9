//! Window partitioning for windowed attention, including the cyclic shift
//! and its attention mask.
//!
//! Tokens live in a square grid stored row-major as `(side * side, c)`.
//! Windows are ordered row-major over the window grid, and tokens row-major
//! inside each window.

use std::rc::Rc;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Score offset that suppresses attention across shifted-window regions.
pub const MASK_VALUE: f64 = -100.0;

fn grid_side(op: &'static str, tokens: usize) -> Result<usize> {
    let side = (tokens as f64).sqrt().round() as usize;
    if side * side != tokens || side == 0 {
        return Err(Error::shape(op, format!("{tokens} tokens do not form a square grid")));
    }
    Ok(side)
}

fn check_window(op: &'static str, side: usize, m: usize) -> Result<()> {
    if m == 0 || side % m != 0 {
        return Err(Error::shape(op, format!("grid side {side} not divisible by window {m}")));
    }
    Ok(())
}

/// For each window slot, the grid token it reads after a cyclic shift of the
/// grid by `-shift` in both directions.
pub fn partition_index(side: usize, m: usize, shift: usize) -> Vec<usize> {
    let per_row = side / m;
    let mut idx = Vec::with_capacity(side * side);
    for wr in 0..per_row {
        for wc in 0..per_row {
            for sr in 0..m {
                for sc in 0..m {
                    let r = (wr * m + sr + shift) % side;
                    let c = (wc * m + sc + shift) % side;
                    idx.push(r * side + c);
                }
            }
        }
    }
    idx
}

fn inverse(perm: &[usize]) -> Vec<Option<usize>> {
    let mut inv = vec![None; perm.len()];
    for (slot, &src) in perm.iter().enumerate() {
        inv[src] = Some(slot);
    }
    inv
}

/// [`window_partition`] after cyclically shifting the grid by `shift` tokens.
pub fn partition_shifted<'t>(f: Var<'t>, m: usize, shift: usize) -> Result<Var<'t>> {
    let shape = f.shape();
    if shape.len() != 2 {
        return Err(Error::shape("window_partition", format!("expected (l, c), got {shape:?}")));
    }
    let side = grid_side("window_partition", shape[0])?;
    check_window("window_partition", side, m)?;
    let c = shape[1];
    let idx = Rc::new(partition_index(side, m, shift).into_iter().map(Some).collect());
    f.gather(c, idx, &[shape[0] / (m * m), m * m, c])
}

/// Inverse of [`partition_shifted`].
pub fn reverse_shifted<'t>(w: Var<'t>, side: usize, shift: usize) -> Result<Var<'t>> {
    let shape = w.shape();
    if shape.len() != 3 {
        return Err(Error::shape("window_reverse", format!("expected (n, m*m, c), got {shape:?}")));
    }
    let (n, mm, c) = (shape[0], shape[1], shape[2]);
    if n * mm != side * side {
        return Err(Error::shape(
            "window_reverse",
            format!("{n} windows of {mm} tokens cannot tile a {side}x{side} grid"),
        ));
    }
    let m = grid_side("window_reverse", mm)?;
    check_window("window_reverse", side, m)?;
    let idx = Rc::new(inverse(&partition_index(side, m, shift)));
    w.gather(c, idx, &[side * side, c])
}

/// `(l, c)` grid features to `(l / m^2, m^2, c)` windows.
pub fn window_partition<'t>(f: Var<'t>, m: usize) -> Result<Var<'t>> {
    partition_shifted(f, m, 0)
}

/// Inverse of [`window_partition`] for a grid of the given side.
pub fn window_reverse<'t>(windows: Var<'t>, side: usize) -> Result<Var<'t>> {
    reverse_shifted(windows, side, 0)
}

/// Additive mask `(windows, m^2, m^2)` for the shifted configuration: tokens
/// that came from different regions of the unshifted grid may not attend to
/// each other.
pub fn shift_mask(side: usize, m: usize, shift: usize) -> Tensor {
    let mut label = vec![0usize; side * side];
    let bounds = |x: usize| -> usize {
        if x < side - m {
            0
        } else if x < side - shift {
            1
        } else {
            2
        }
    };
    for r in 0..side {
        for c in 0..side {
            label[r * side + c] = bounds(r) * 3 + bounds(c);
        }
    }
    // labels are defined on the shifted grid, so partition without shifting
    let order = partition_index(side, m, 0);
    let nw = (side / m).pow(2);
    let mm = m * m;
    let mut data = vec![0.0; nw * mm * mm];
    for w in 0..nw {
        for i in 0..mm {
            for j in 0..mm {
                if label[order[w * mm + i]] != label[order[w * mm + j]] {
                    data[(w * mm + i) * mm + j] = MASK_VALUE;
                }
            }
        }
    }
    Tensor::new(&[nw, mm, mm], data).expect("mask shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use proptest::prelude::*;

    fn grid(tape: &Tape, side: usize, c: usize) -> Var<'_> {
        tape.constant(Tensor::from_fn(&[side * side, c], |i| i as f64))
    }

    #[test]
    fn four_windows_of_sixteen() {
        let tape = Tape::new();
        let w = window_partition(grid(&tape, 8, 3), 4).unwrap();
        assert_eq!(w.shape(), vec![4, 16, 3]);
    }

    #[test]
    fn single_window_is_identity_order() {
        let tape = Tape::new();
        let f = grid(&tape, 4, 2);
        let w = window_partition(f, 4).unwrap();
        assert_eq!(w.shape(), vec![1, 16, 2]);
        assert_eq!(w.value().data(), f.value().data());
        let back = window_reverse(w, 4).unwrap();
        assert_eq!(back.shape(), vec![16, 2]);
        assert_eq!(back.value().data(), f.value().data());
    }

    #[test]
    fn token_lands_in_expected_slot() {
        // token (row 5, col 6) of an 8x8 grid: window (1,1) = index 3, slot (1,2) = 6
        let tape = Tape::new();
        let w = window_partition(grid(&tape, 8, 1), 4).unwrap().value();
        assert_eq!(w.data()[3 * 16 + 6], (5 * 8 + 6) as f64);
    }

    #[test]
    fn errors_on_bad_geometry() {
        let tape = Tape::new();
        let f = tape.constant(Tensor::zeros(&[15, 2]));
        assert!(window_partition(f, 4).is_err());
        let g = grid(&tape, 6, 1);
        assert!(window_partition(g, 4).is_err());
        let w = tape.constant(Tensor::zeros(&[3, 16, 2]));
        assert!(window_reverse(w, 8).is_err());
    }

    #[test]
    fn shift_mask_blocks_wrapped_regions() {
        let m = shift_mask(8, 4, 2);
        assert_eq!(m.shape(), &[4, 16, 16]);
        // window 0 lies entirely in region (0,0): no masking
        assert!(m.data()[..256].iter().all(|&x| x == 0.0));
        // last window mixes four regions
        let last = &m.data()[3 * 256..];
        assert!(last.iter().any(|&x| x == MASK_VALUE));
        for i in 0..16 {
            assert_eq!(last[i * 16 + i], 0.0);
        }
    }

    proptest! {
        #[test]
        fn partition_reverse_roundtrip(per_row in 1usize..4, m in 1usize..5, c in 1usize..4, shifted in any::<bool>(), seed in any::<u64>()) {
            let side = per_row * m;
            let shift = if shifted { m / 2 } else { 0 };
            let mut rng = crate::rng::seeded(seed);
            let tape = Tape::new();
            let x = tape.constant(Tensor::from_fn(&[side * side, c], |_| crate::rng::normal(&mut rng)));
            let w = partition_shifted(x, m, shift).unwrap();
            let back = reverse_shifted(w, side, shift).unwrap();
            prop_assert_eq!(&*back.value(), &*x.value());
        }
    }
}
