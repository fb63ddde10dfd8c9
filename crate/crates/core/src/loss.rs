//! Segmentation, boundary and combined training losses.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub seg: f64,
    pub bnd: f64,
    pub dis: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            seg: 1.0,
            bnd: 1.0,
            dis: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("seg", self.seg), ("bnd", self.bnd), ("dis", self.dis)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

fn check_binary(op: &'static str, t: &Tensor) -> Result<()> {
    if t.data().iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(Error::Domain {
            op,
            detail: "target must be binary".into(),
        });
    }
    Ok(())
}

/// Mean pixelwise binary cross-entropy between `sigmoid(logits)` and the
/// binary mask.
pub fn segmentation_loss<'t>(mask_logits: Var<'t>, gt_mask: &Rc<Tensor>) -> Result<Var<'t>> {
    check_binary("segmentation_loss", gt_mask)?;
    mask_logits.bce_with_logits(Rc::clone(gt_mask))
}

/// Same form as [`segmentation_loss`], on boundary maps.
pub fn boundary_loss<'t>(boundary_logits: Var<'t>, gt_boundary: &Rc<Tensor>) -> Result<Var<'t>> {
    check_binary("boundary_loss", gt_boundary)?;
    boundary_logits.bce_with_logits(Rc::clone(gt_boundary))
}

/// A pixel is on the boundary iff it is foreground and at least one of its
/// 4-neighbours is background. Pixels outside the map do not count as
/// background.
pub fn gt_to_boundary(mask: &Tensor) -> Tensor {
    let shape = mask.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let m = mask.data();
    let fg = |r: usize, c: usize| m[r * w + c] > 0.5;
    Tensor::from_fn(&[h, w], |i| {
        let (r, c) = (i / w, i % w);
        if !fg(r, c) {
            return 0.0;
        }
        let edge = (r > 0 && !fg(r - 1, c))
            || (r + 1 < h && !fg(r + 1, c))
            || (c > 0 && !fg(r, c - 1))
            || (c + 1 < w && !fg(r, c + 1));
        if edge {
            1.0
        } else {
            0.0
        }
    })
}

/// `w_seg * seg + w_bnd * bnd + w_dis * dis`; an absent `dis` term
/// contributes nothing.
pub fn total_loss<'t>(seg: Var<'t>, bnd: Var<'t>, dis: Option<Var<'t>>, w: &LossWeights) -> Result<Var<'t>> {
    w.validate()?;
    let mut total = seg.scale(w.seg).add(bnd.scale(w.bnd))?;
    if let Some(dis) = dis {
        total = total.add(dis.scale(w.dis))?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn bce_extremes() {
        let tape = Tape::new();
        let gt = Rc::new(Tensor::full(&[4, 4], 1.0));
        let hi = tape.constant(Tensor::full(&[4, 4], 30.0));
        assert!(segmentation_loss(hi, &gt).unwrap().value().item().unwrap() < 1e-9);
        let zero = tape.constant(Tensor::zeros(&[4, 4]));
        let l = boundary_loss(zero, &gt).unwrap().value().item().unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_binary_or_mismatched_targets() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(segmentation_loss(x, &Rc::new(Tensor::full(&[2, 2], 0.5))).is_err());
        assert!(segmentation_loss(x, &Rc::new(Tensor::zeros(&[2, 3]))).is_err());
    }

    #[test]
    fn boundary_of_square_is_its_ring() {
        let mask = Tensor::from_fn(&[8, 8], |i| {
            let (r, c) = (i / 8, i % 8);
            if (2..6).contains(&r) && (2..6).contains(&c) {
                1.0
            } else {
                0.0
            }
        });
        let b = gt_to_boundary(&mask);
        assert_eq!(b.sum(), 12.0);
        assert_eq!(gt_to_boundary(&Tensor::zeros(&[8, 8])).sum(), 0.0);
        let mut single = Tensor::zeros(&[5, 5]);
        single.data_mut()[12] = 1.0;
        assert_eq!(gt_to_boundary(&single).data()[12], 1.0);
    }

    #[test]
    fn total_is_weighted_sum() {
        let tape = Tape::new();
        let c = |x: f64| tape.constant(Tensor::scalar(x));
        let w = LossWeights::default();
        assert_eq!(total_loss(c(1.0), c(2.0), Some(c(3.0)), &w).unwrap().value().item().unwrap(), 6.0);
        assert_eq!(total_loss(c(0.0), c(0.0), Some(c(0.0)), &w).unwrap().value().item().unwrap(), 0.0);
        let no_dis = LossWeights { dis: 0.0, ..w };
        assert_eq!(total_loss(c(1.0), c(2.0), Some(c(3.0)), &no_dis).unwrap().value().item().unwrap(), 3.0);
        let bad = LossWeights { bnd: -1.0, ..w };
        assert!(total_loss(c(1.0), c(2.0), None, &bad).is_err());
    }
}
