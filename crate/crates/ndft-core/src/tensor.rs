//! Dense fp64 tensors.
//!
//! A [`Tensor`] is a cheaply clonable handle (`Rc`) to row-major storage plus
//! an optional same-shape gradient accumulator. Shapes are fixed at
//! construction; data and gradient live behind separate cells so backward
//! rules can read one tensor's values while accumulating into another's
//! gradient (or its own). Tensors are deliberately not `Send`: the engine is
//! single-threaded by design and parallel callers each own a full replica.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

struct Inner {
    shape: Box<[usize]>,
    requires_grad: Cell<bool>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
}

/// Handle to an n-dimensional fp64 array participating in the tape.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl Tensor {
    /// Builds a tensor from raw data; `data.len()` must equal the shape product.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArg {
                op: "tensor",
                msg: format!("shape {:?} does not describe {} values", shape, data.len()),
            });
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                shape: shape.into(),
                requires_grad: Cell::new(false),
                data: RefCell::new(data),
                grad: RefCell::new(None),
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).expect("zeros: valid shape")
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(&[1], vec![value]).expect("scalar")
    }

    /// A trainable leaf: `requires_grad` set, gradient initially absent.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Toggles gradient tracking; used to freeze parameter groups during the
    /// other side's update.
    pub fn set_requires_grad(&self, on: bool) {
        self.inner.requires_grad.set(on);
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.inner.data.borrow_mut()
    }

    /// The current gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.inner.grad.borrow().is_some()
    }

    /// Adds `contrib` into the gradient accumulator (creating it at zero).
    pub fn accumulate_grad(&self, contrib: &[f64]) {
        debug_assert_eq!(contrib.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    /// Clears the gradient accumulator entirely.
    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Removes and returns the accumulated gradient (backward uses this to
    /// consume intermediate gradients as it propagates past them).
    pub fn take_grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow_mut().take()
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::InvalidArg {
                op: "scalar_value",
                msg: format!("expected scalar, got shape {:?}", self.shape()),
            });
        }
        Ok(self.data()[0])
    }

    /// Whether two handles share storage.
    pub fn same_storage(a: &Tensor, b: &Tensor) -> bool {
        Rc::ptr_eq(&a.inner, &b.inner)
    }

    /// Deep copy with fresh storage (gradient not copied).
    pub fn detached_clone(&self) -> Tensor {
        let t = Tensor::new(self.shape(), self.data().clone()).expect("clone shape valid");
        t.set_requires_grad(self.requires_grad());
        t
    }

    /// FNV-1a fingerprint of the exact bit pattern of the data.
    pub fn bit_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.data().iter() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn is_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        write!(
            f,
            "Tensor{:?}{}{:?}{}",
            self.shape(),
            if self.requires_grad() { "*" } else { "" },
            preview,
            if data.len() > 8 { "…" } else { "" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn grad_accumulates_additively() {
        let t = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(!t.has_grad());
        t.accumulate_grad(&[1.0, 0.0, 1.0]);
        t.accumulate_grad(&[0.5, 0.5, 0.5]);
        assert_eq!(t.grad().unwrap(), vec![1.5, 0.5, 1.5]);
        t.zero_grad();
        assert!(!t.has_grad());
    }

    #[test]
    fn fingerprint_tracks_bits() {
        let a = Tensor::new(&[2], vec![1.0, -0.0]).unwrap();
        let b = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
        assert_ne!(a.bit_fingerprint(), b.bit_fingerprint());
        let c = Tensor::new(&[2], vec![1.0, -0.0]).unwrap();
        assert_eq!(a.bit_fingerprint(), c.bit_fingerprint());
    }
}
