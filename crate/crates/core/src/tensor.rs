//! Dense f64 tensor with an optional gradient buffer.
//!
//! `Tensor` is the value type that lives outside the autodiff tape: model
//! parameters, dataset images, masks. Layout is row-major (last dimension
//! contiguous), so a C x H x W image stores channel planes back to back.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Magic bytes prefixed to every serialized tensor record.
pub const RECORD_MAGIC: &[u8; 5] = b"MGAT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor from a shape and matching flat data.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        if data.len() != numel {
            return Err(Error::shape(format!(
                "shape {shape:?} wants {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::filled(&[1], value)
    }

    /// He-normal initialization: N(0, sqrt(2 / fan_in)), the usual choice in
    /// front of a ReLU.
    pub fn he_init<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Self> {
        if fan_in == 0 {
            return Err(Error::config("he_init fan_in must be positive"));
        }
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        Tensor::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    /// Gradient buffer, present only after an accumulation.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient length {} does not match tensor numel {}",
                delta.len(),
                self.data.len()
            )));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    /// Multiplies the accumulated gradient by `factor` (used to turn a sum
    /// over a batch into a mean).
    pub fn scale_grad(&mut self, factor: f64) {
        if let Some(grad) = &mut self.grad {
            for g in grad.iter_mut() {
                *g *= factor;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Flat index for a rank-3 tensor laid out as C x H x W.
    #[inline]
    pub fn idx3(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.rank(), 3);
        (c * self.shape[1] + y) * self.shape[2] + x
    }

    /// Writes one binary record: magic, u32 rank, u32 dims, raw f64 payload,
    /// all little-endian.
    pub fn write_record<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(RECORD_MAGIC)?;
        out.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &dim in &self.shape {
            out.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads back one record written by [`Tensor::write_record`].
    pub fn read_record<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 5];
        input.read_exact(&mut magic)?;
        if &magic != RECORD_MAGIC {
            return Err(Error::data(format!(
                "bad tensor record magic {magic:?}, expected {RECORD_MAGIC:?}"
            )));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let rank = u32::from_le_bytes(word) as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::data(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            input.read_exact(&mut word)?;
            shape.push(u32::from_le_bytes(word) as usize);
        }
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::data(format!("zero dimension in stored shape {shape:?}")));
        }
        let mut data = Vec::with_capacity(numel);
        let mut dword = [0u8; 8];
        for _ in 0..numel {
            input.read_exact(&mut dword)?;
            data.push(f64::from_le_bytes(dword));
        }
        Tensor::new(&shape, data)
    }
}
