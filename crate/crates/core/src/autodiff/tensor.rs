use crate::error::{Error, Result};

/// Dense row-major `f64` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} holds {n} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Numpy-style broadcast of two shapes aligned on trailing dimensions.
pub(crate) fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape {
                    op,
                    detail: format!("cannot broadcast {a:?} with {b:?}"),
                })
            }
        };
    }
    Ok(out)
}

/// How an operand's elements map onto a broadcast output.
#[derive(Debug, Clone)]
pub(crate) enum Broadcast {
    /// Same shape as the output.
    Same,
    /// Operand equals the trailing block of the output: index `i % len`.
    Suffix(usize),
    /// Arbitrary: explicit operand index per output element.
    Map(Vec<usize>),
}

impl Broadcast {
    pub(crate) fn new(out: &[usize], operand: &[usize]) -> Self {
        if out == operand {
            return Broadcast::Same;
        }
        let offset = out.len() - operand.len();
        let trimmed: Vec<usize> = operand
            .iter()
            .copied()
            .skip_while(|&d| d == 1)
            .collect();
        let lead = operand.len() - trimmed.len();
        if out[offset + lead..] == trimmed[..] {
            return Broadcast::Suffix(trimmed.iter().product());
        }
        // General path: strides in operand space, zero on broadcast axes.
        let rank = out.len();
        let mut strides = vec![0usize; rank];
        let mut acc = 1;
        for i in (0..operand.len()).rev() {
            if operand[i] != 1 {
                strides[offset + i] = acc;
            }
            acc *= operand[i];
        }
        let total: usize = out.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut counter = vec![0usize; rank];
        let mut idx = 0usize;
        for _ in 0..total {
            map.push(idx);
            for d in (0..rank).rev() {
                counter[d] += 1;
                idx += strides[d];
                if counter[d] < out[d] {
                    break;
                }
                idx -= strides[d] * counter[d];
                counter[d] = 0;
            }
        }
        Broadcast::Map(map)
    }

    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Suffix(n) => i % n,
            Broadcast::Map(m) => m[i],
        }
    }

    /// Accumulates an output-shaped gradient into operand shape.
    pub(crate) fn reduce_into(&self, grad_out: &[f64], acc: &mut [f64]) {
        match self {
            Broadcast::Same => {
                for (a, g) in acc.iter_mut().zip(grad_out) {
                    *a += g;
                }
            }
            Broadcast::Suffix(n) => {
                for chunk in grad_out.chunks(*n) {
                    for (a, g) in acc.iter_mut().zip(chunk) {
                        *a += g;
                    }
                }
            }
            Broadcast::Map(m) => {
                for (g, &j) in grad_out.iter().zip(m) {
                    acc[j] += g;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shapes("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shapes("t", &[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shapes("t", &[], &[5]).unwrap(), vec![5]);
        assert!(broadcast_shapes("t", &[2, 3], &[2]).is_err());
    }

    #[test]
    fn broadcast_maps_match_naive_indexing() {
        let out = [2, 3, 4];
        let operand = [3, 1];
        let b = Broadcast::new(&out, &operand);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    let flat = (i * 3 + j) * 4 + k;
                    assert_eq!(b.index(flat), j);
                }
            }
        }
        let s = Broadcast::new(&out, &[1, 4]);
        assert!(matches!(s, Broadcast::Suffix(4)));
        assert_eq!(s.index(7), 3);
    }

    #[test]
    fn tensor_shape_checks() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(t.clone().reshape(vec![3, 2]).is_ok());
        assert!(t.reshape(vec![4]).is_err());
        assert_eq!(Tensor::scalar(2.0).shape(), &[] as &[usize]);
    }
}
