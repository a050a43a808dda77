use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Dense row-major `f64` array.
///
/// Storage is reference counted, so cloning a tensor is cheap and a parameter
/// can be placed on many tapes without copying. Mutation goes through
/// [`Tensor::data_mut`], which copies on write when the buffer is shared.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// Builds a tensor whose shape has already been validated by the caller.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn vector(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::from_parts(vec![n], values)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("tensor", "ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data)
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
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.last_dim();
        &self.data[i * w..(i + 1) * w]
    }

    /// Value at `(i, j)` of a rank-2 tensor.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Writes the manifest line `name rank e1 .. ek` followed by the raw
    /// little-endian values.
    pub fn write_named<W: Write>(&self, w: &mut W, name: &str) -> std::io::Result<()> {
        let mut line = format!("{name} {}", self.rank());
        for e in &self.shape {
            line.push(' ');
            line.push_str(&e.to_string());
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
        let mut bytes = Vec::with_capacity(self.numel() * 8);
        for v in self.data.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)
    }

    /// Reads one record produced by [`Tensor::write_named`]. Returns `None` at
    /// a clean end of stream.
    pub fn read_named<R: BufRead>(r: &mut R) -> std::result::Result<Option<(String, Tensor)>, String> {
        let mut line = String::new();
        let n = r.read_line(&mut line).map_err(|e| e.to_string())?;
        if n == 0 {
            return Ok(None);
        }
        let line = line.trim_end_matches('\n');
        let mut fields = line.split(' ');
        let name = fields
            .next()
            .filter(|s| !s.is_empty())
            .ok_or("missing tensor name")?
            .to_string();
        let rank: usize = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad rank for {name}"))?;
        let shape: Vec<usize> = fields
            .map(|s| s.parse::<usize>().map_err(|e| format!("bad extent for {name}: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        if shape.len() != rank {
            return Err(format!("{name}: rank {rank} but {} extents", shape.len()));
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 8];
        r.read_exact(&mut bytes).map_err(|e| format!("{name}: {e}"))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        Ok(Some((name, tensor)))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.numel() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data())
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.numel())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert_eq!(Tensor::scalar(3.0).numel(), 1);
    }

    #[test]
    fn serialization_roundtrip() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE, 0.1, 1e300]).unwrap();
        let s = Tensor::scalar(-0.0);
        let mut buf = Vec::new();
        t.write_named(&mut buf, "w.a").unwrap();
        s.write_named(&mut buf, "s").unwrap();
        assert!(buf.starts_with(b"w.a 2 2 3\n"));
        let mut r = std::io::Cursor::new(buf);
        let (n1, t1) = Tensor::read_named(&mut r).unwrap().unwrap();
        let (n2, t2) = Tensor::read_named(&mut r).unwrap().unwrap();
        assert_eq!((n1.as_str(), n2.as_str()), ("w.a", "s"));
        assert_eq!(t1, t);
        assert_eq!(t2.shape(), &[] as &[usize]);
        assert_eq!(t2.item().to_bits(), (-0.0f64).to_bits());
        assert!(Tensor::read_named(&mut r).unwrap().is_none());
    }

    #[test]
    fn copy_on_write() {
        let a = Tensor::ones(&[2]);
        let mut b = a.clone();
        b.data_mut()[0] = 5.0;
        assert_eq!(a.data(), &[1.0, 1.0]);
        assert_eq!(b.data(), &[5.0, 1.0]);
    }
}
