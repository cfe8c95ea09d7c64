//! Dense row-major tensors.
//!
//! Image batches use the `[N, C, H, W]` layout throughout the crate.

use crate::error::{NnError, Result};
use crate::real::{DType, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NnError::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Splits a 4-d shape into `(n, c, h, w)`.
    ///
    /// Panics on other ranks; layer code only ever sees image batches.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => panic!("expected a 4-d tensor, got shape {:?}", self.shape),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(NnError::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
        }
    }

    /// One item of a batch, keeping the leading axis (`[1, ...]`).
    pub fn item(&self, index: usize) -> Self {
        let n = self.shape[0];
        assert!(index < n, "batch index {index} out of range {n}");
        let stride = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Self {
            shape,
            data: self.data[index * stride..(index + 1) * stride].to_vec(),
        }
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| NnError::Shape("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(NnError::Shape(format!("stack: {:?} vs {:?}", t.shape, first.shape)));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Concatenates tensors along the existing leading axis.
    pub fn concat_batch(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| NnError::Shape("cannot concatenate zero tensors".into()))?;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(NnError::Shape(format!(
                    "concat_batch: {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Self { shape, data })
    }

    /// Concatenates 4-d tensors along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let (n, _, h, w) = parts
            .first()
            .ok_or_else(|| NnError::Shape("concat of zero tensors".into()))?
            .dims4();
        let mut total_c = 0;
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4();
            if (pn, ph, pw) != (n, h, w) {
                return Err(NnError::Shape(format!("concat: {:?} vs [{n}, _, {h}, {w}]", p.shape)));
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for p in parts {
                let pc = p.shape[1];
                data.extend_from_slice(&p.data[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        Ok(Self {
            shape: vec![n, total_c, h, w],
            data,
        })
    }

    /// Inverse of [`concat_channels`](Self::concat_channels).
    pub fn split_channels(&self, sizes: &[usize]) -> Vec<Self> {
        let (n, c, h, w) = self.dims4();
        assert_eq!(sizes.iter().sum::<usize>(), c, "split sizes must cover channels");
        let hw = h * w;
        let mut out: Vec<Self> = sizes.iter().map(|&sc| Self::zeros(&[n, sc, h, w])).collect();
        for b in 0..n {
            let mut offset = 0;
            for (part, &sc) in out.iter_mut().zip(sizes) {
                let src = &self.data[(b * c + offset) * hw..(b * c + offset + sc) * hw];
                part.data[b * sc * hw..(b + 1) * sc * hw].copy_from_slice(src);
                offset += sc;
            }
        }
        out
    }

    /// Little-endian binary encoding: dtype tag, rank, dims, then values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * T::DTYPE.size_of());
        out.push(match T::DTYPE {
            DType::F32 => 0u8,
            DType::F64 => 1u8,
        });
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &self.data {
            x.write_le(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| NnError::Format(m.to_string());
        let (&tag, rest) = bytes.split_first().ok_or_else(|| err("empty buffer"))?;
        let dtype = match tag {
            0 => DType::F32,
            1 => DType::F64,
            _ => return Err(err("unknown dtype tag")),
        };
        if dtype != T::DTYPE {
            return Err(NnError::Format(format!(
                "stored dtype {dtype:?} does not match requested {:?}",
                T::DTYPE
            )));
        }
        if rest.len() < 4 {
            return Err(err("truncated rank"));
        }
        let rank = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
        let mut pos = 4;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let chunk = rest.get(pos..pos + 8).ok_or_else(|| err("truncated dims"))?;
            shape.push(u64::from_le_bytes(chunk.try_into().unwrap()) as usize);
            pos += 8;
        }
        let len: usize = shape.iter().product();
        let size = dtype.size_of();
        let body = rest.get(pos..).unwrap_or(&[]);
        if body.len() != len * size {
            return Err(NnError::Format(format!(
                "expected {} payload bytes, found {}",
                len * size,
                body.len()
            )));
        }
        let data = body.chunks_exact(size).map(T::read_le).collect();
        Ok(Self { shape, data })
    }
}
