//! Dense row-major tensors.
//!
//! A [`Tensor`] is a cheap-to-clone handle (`Rc`) around a flat `f64` buffer
//! plus an optional gradient buffer of the same shape. Values are held in
//! `f64`; the on-disk format stores `f32` (see [`Tensor::write_to`]).

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Magic prefix of the binary tensor format: magic, u32 rank, u32 extents,
/// then the f32 payload row-major, all little-endian.
pub const TENSOR_MAGIC: &[u8; 8] = b"FMTENS01";

struct TensorInner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    /// Set when this tensor is the output of a recorded operation, so that
    /// downstream ops know gradient has to flow through it.
    tracked: Cell<bool>,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(TensorInner {
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
                tracked: Cell::new(false),
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel]).expect("consistent by construction")
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel]).expect("consistent by construction")
    }

    /// Rank-1 single-element tensor, the carrier for scalar losses.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![value]).expect("consistent by construction")
    }

    /// Stacks same-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::ShapeMismatch("stack of zero tensors".into()))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape() != first.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "stack expects uniform shapes, got {:?} and {:?}",
                    first.shape(),
                    t.shape()
                )));
            }
            data.extend_from_slice(&t.data());
        }
        Tensor::from_vec(&shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Overwrites the buffer in place; every handle to this tensor sees the
    /// new values (this is how shared weights stay shared across updates).
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "set_data: expected {} elements, got {}",
                self.numel(),
                values.len()
            )));
        }
        self.inner.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    pub(crate) fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.inner.data.borrow_mut()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.inner.requires_grad.set(flag);
    }

    pub fn with_requires_grad(self) -> Tensor {
        self.set_requires_grad(true);
        self
    }

    pub(crate) fn is_tracked(&self) -> bool {
        self.inner.tracked.get()
    }

    pub(crate) fn mark_tracked(&self) {
        self.inner.tracked.set(true);
    }

    /// True when gradient must flow into this tensor during backward.
    pub(crate) fn needs_grad(&self) -> bool {
        self.requires_grad() || self.is_tracked()
    }

    /// Copy of the accumulated gradient, if any backward pass reached this
    /// tensor since the last [`Tensor::clear_grad`].
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn grad_opt(&self) -> Ref<'_, Option<Vec<f64>>> {
        self.inner.grad.borrow()
    }

    /// Mutable gradient buffer, allocated as zeros on first use.
    pub(crate) fn grad_mut(&self) -> RefMut<'_, Vec<f64>> {
        {
            let mut g = self.inner.grad.borrow_mut();
            if g.is_none() {
                *g = Some(vec![0.0; self.numel()]);
            }
        }
        RefMut::map(self.inner.grad.borrow_mut(), |g| {
            g.as_mut().expect("allocated above")
        })
    }

    pub(crate) fn seed_grad_ones(&self) {
        *self.inner.grad.borrow_mut() = Some(vec![1.0; self.numel()]);
    }

    /// Identity of the underlying storage; clones of one tensor share it.
    pub fn storage_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    /// Extents of a rank-4 tensor as (n, c, h, w).
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            s => Err(Error::ShapeMismatch(format!("expected rank 4, got {:?}", s))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape() {
            &[a, b] => Ok((a, b)),
            s => Err(Error::ShapeMismatch(format!("expected rank 2, got {:?}", s))),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &e in self.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in self.inner.data.borrow().iter() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::BadTensorFormat(format!(
                "bad magic {:?}, expected {:?}",
                magic, TENSOR_MAGIC
            )));
        }
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(Error::BadTensorFormat(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        Tensor::from_vec(&shape, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Tensor> {
        let mut r = BufReader::new(File::open(path)?);
        let t = Tensor::read_from(&mut r)?;
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::BadTensorFormat(
                "trailing bytes after tensor payload".into(),
            ));
        }
        Ok(t)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            self.shape(),
            self.requires_grad()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn clones_share_storage() {
        let a = Tensor::zeros(&[4]);
        let b = a.clone();
        a.set_data(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(b.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(a.same_storage(&b));
    }

    #[test]
    fn stack_builds_batch_axis() {
        let a = Tensor::full(&[2, 2], 1.0);
        let b = Tensor::full(&[2, 2], 2.0);
        let s = Tensor::stack(&[a, b]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.to_vec(), vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn serialization_layout_is_exact() {
        let t = Tensor::from_vec(&[1, 2], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let mut expect = Vec::new();
        expect.extend_from_slice(b"FMTENS01");
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.5f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expect);

        let back = Tensor::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.to_vec(), t.to_vec());
    }

    #[test]
    fn read_rejects_bad_magic() {
        let mut buf = Vec::new();
        Tensor::scalar(1.0).write_to(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            Tensor::read_from(&mut buf.as_slice()),
            Err(Error::BadTensorFormat(_))
        ));
    }
}
