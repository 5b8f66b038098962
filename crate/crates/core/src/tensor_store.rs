//! Dense f32 tensors, the AFTN interchange format, and nearest-neighbour grid resizing.
//!
//! AFTN layout (all integers little-endian):
//!
//! | offset | size        | content                         |
//! |--------|-------------|---------------------------------|
//! | 0      | 4           | magic `b"AFTN"`                 |
//! | 4      | 4           | version, `u32` = 1              |
//! | 8      | 4           | ndim, `u32`                     |
//! | 12     | 4           | reserved, zero                  |
//! | 16     | 8 × ndim    | dims, `u64` each                |
//! | ...    | 4 × product | payload, `f32` row-major        |
//!
//! No padding and no footer: the file length is exactly `16 + 8·ndim + 4·product(dims)`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"AFTN";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

/// Row-major f32 tensor. Every dimension is at least 1 and there is at least one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn checked_numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Shape {
            shape: shape.to_vec(),
            message: "tensor needs at least one dimension".into(),
        });
    }
    if shape.contains(&0) {
        return Err(Error::Shape {
            shape: shape.to_vec(),
            message: "every dimension must be >= 1".into(),
        });
    }
    checked_numel(shape).ok_or_else(|| Error::Shape {
        shape: shape.to_vec(),
        message: "element count overflows usize".into(),
    })
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel = validate_shape(&shape)?;
        if numel != data.len() {
            return Err(Error::Shape {
                shape,
                message: format!("expects {numel} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = validate_shape(&shape)?;
        Ok(Self {
            shape,
            data: vec![0.0; numel],
        })
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f32) -> Result<Self> {
        let numel = validate_shape(&shape)?;
        Ok(Self {
            shape,
            data: (0..numel).map(&mut f).collect(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Same data, new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Elements per index of the leading dimension.
    pub fn stride0(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    /// Contiguous slice for index `i` of the leading dimension.
    pub fn slice0(&self, i: usize) -> &[f32] {
        let s = self.stride0();
        &self.data[i * s..(i + 1) * s]
    }

    /// Sub-tensor at index `i` of the leading dimension (drops that dimension).
    pub fn index0(&self, i: usize) -> Result<Tensor> {
        if self.ndim() < 2 {
            return Err(Error::Dimension(format!(
                "cannot index leading dim of a {}-d tensor",
                self.ndim()
            )));
        }
        if i >= self.shape[0] {
            return Err(Error::Index(format!(
                "leading index {i} out of range for shape {:?}",
                self.shape
            )));
        }
        Tensor::new(self.shape[1..].to_vec(), self.slice0(i).to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Serialized AFTN bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(encoded_len(&self.shape));
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses AFTN bytes, validating every header field and the exact payload length.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::format(
                "header",
                format!("need {HEADER_LEN} bytes, file has {}", bytes.len()),
            ));
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::format(
                "magic",
                format!("expected {:?}, found {:?}", MAGIC, &bytes[0..4]),
            ));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(
                "version",
                format!("unsupported version {version}"),
            ));
        }
        let ndim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let reserved = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        if reserved != 0 {
            return Err(Error::format(
                "reserved",
                format!("must be zero, found {reserved}"),
            ));
        }
        if ndim == 0 {
            return Err(Error::format("ndim", "tensor needs at least one dimension"));
        }

        let dims_end = ndim
            .checked_mul(8)
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::format("ndim", format!("{ndim} dims overflow")))?;
        if bytes.len() < dims_end {
            let present = (bytes.len() - HEADER_LEN) / 8;
            return Err(Error::format(
                "dims",
                format!("truncated: header declares {ndim} dims, file holds {present}"),
            ));
        }
        let mut shape = Vec::with_capacity(ndim);
        for k in 0..ndim {
            let at = HEADER_LEN + 8 * k;
            let d = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
            let d = usize::try_from(d)
                .map_err(|_| Error::format("dims", format!("dim {k} = {d} overflows usize")))?;
            if d == 0 {
                return Err(Error::format("dims", format!("dim {k} is zero")));
            }
            shape.push(d);
        }
        let numel = checked_numel(&shape)
            .ok_or_else(|| Error::format("dims", format!("{shape:?} element count overflows")))?;
        let payload_len = numel
            .checked_mul(4)
            .ok_or_else(|| Error::format("dims", format!("{shape:?} byte count overflows")))?;
        let payload = &bytes[dims_end..];
        if payload.len() < payload_len {
            return Err(Error::format(
                "payload",
                format!(
                    "truncated: expected {payload_len} bytes, found {}",
                    payload.len()
                ),
            ));
        }
        if payload.len() > payload_len {
            return Err(Error::format(
                "payload",
                format!(
                    "{} trailing bytes after {payload_len}-byte payload",
                    payload.len() - payload_len
                ),
            ));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { shape, data })
    }
}

/// Byte length of an AFTN file holding a tensor of `shape`.
pub fn encoded_len(shape: &[usize]) -> usize {
    HEADER_LEN + 8 * shape.len() + 4 * shape.iter().product::<usize>()
}

pub fn tensor_write(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, t.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn tensor_read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes)
}

/// A cell of an `h × w` token grid, 0-based. Flat index is `row * w + col`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridIndex {
    pub row: usize,
    pub col: usize,
}

impl GridIndex {
    pub fn from_flat(flat: usize, w: usize) -> Self {
        Self {
            row: flat / w,
            col: flat % w,
        }
    }

    pub fn flat(self, w: usize) -> usize {
        self.row * w + self.col
    }
}

/// Source coordinate for output coordinate `dst` when resizing `src_len -> dst_len`.
#[inline]
pub fn nearest_source(dst: usize, src_len: usize, dst_len: usize) -> usize {
    dst * src_len / dst_len
}

/// Nearest-neighbour resize of an `h × w` grid of `cell`-sized records.
///
/// Output cell `(r, c)` copies source cell `(r·h/out_h, c·w/out_w)` (floor division).
pub fn resize_grid<T: Copy>(
    src: &[T],
    h: usize,
    w: usize,
    cell: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    debug_assert_eq!(src.len(), h * w * cell);
    let mut out = Vec::with_capacity(out_h * out_w * cell);
    for r in 0..out_h {
        let sr = nearest_source(r, h, out_h);
        for c in 0..out_w {
            let sc = nearest_source(c, w, out_w);
            let at = (sr * w + sc) * cell;
            out.extend_from_slice(&src[at..at + cell]);
        }
    }
    out
}

/// Resizes the two leading dims of `src` (`h × w × ...`) to `out_h × out_w`; trailing dims are untouched.
pub fn resize_nearest(src: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if src.ndim() < 2 {
        return Err(Error::Dimension(format!(
            "resize needs leading h x w dims, got shape {:?}",
            src.shape()
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape {
            shape: vec![out_h, out_w],
            message: "resize target must be at least 1x1".into(),
        });
    }
    let (h, w) = (src.shape()[0], src.shape()[1]);
    let cell: usize = src.shape()[2..].iter().product();
    let data = resize_grid(src.data(), h, w, cell, out_h, out_w);
    let mut shape = vec![out_h, out_w];
    shape.extend_from_slice(&src.shape()[2..]);
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn write_2x2_is_48_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.aftn");
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        tensor_write(&t, &path).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(len, 16 + 2 * 8 + 4 * 4);
        assert_eq!(len as usize, encoded_len(&[2, 2]));
        assert_eq!(tensor_read(&path).unwrap(), t);
    }

    #[test]
    fn single_zero_round_trips() {
        let t = Tensor::new(vec![1], vec![0.0]).unwrap();
        let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.data()[0].to_bits(), 0.0f32.to_bits());
    }

    #[test]
    fn zero_dim_rejected_before_write() {
        assert!(matches!(
            Tensor::new(vec![3, 0], vec![]),
            Err(Error::Shape { .. })
        ));
        assert!(Tensor::zeros(vec![]).is_err());
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = Tensor::new(vec![1], vec![1.0]).unwrap().to_bytes();
        bytes[0] = b'X';
        match Tensor::from_bytes(&bytes) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "magic"),
            other => panic!("expected magic error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_dims_named() {
        // header declares 4 dims but only 3 dim entries follow
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"AFTN");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        for _ in 0..3 {
            bytes.extend_from_slice(&1u64.to_le_bytes());
        }
        match Tensor::from_bytes(&bytes) {
            Err(Error::Format { field, message }) => {
                assert_eq!(field, "dims");
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("expected dims truncation, got {other:?}"),
        }
    }

    #[test]
    fn payload_length_checked_both_ways() {
        let bytes = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().to_bytes();
        let short = &bytes[..bytes.len() - 1];
        assert!(matches!(
            Tensor::from_bytes(short),
            Err(Error::Format {
                field: "payload",
                ..
            })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            Tensor::from_bytes(&long),
            Err(Error::Format {
                field: "payload",
                ..
            })
        ));
    }

    #[test]
    fn dimension_overflow_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"AFTN");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(
            Tensor::from_bytes(&bytes),
            Err(Error::Format { field: "dims", .. })
        ));
    }

    #[test]
    fn wrong_version_and_reserved() {
        let mut bytes = Tensor::new(vec![1], vec![1.0]).unwrap().to_bytes();
        bytes[4] = 2;
        assert!(matches!(
            Tensor::from_bytes(&bytes),
            Err(Error::Format {
                field: "version",
                ..
            })
        ));
        let mut bytes = Tensor::new(vec![1], vec![1.0]).unwrap().to_bytes();
        bytes[12] = 1;
        assert!(matches!(
            Tensor::from_bytes(&bytes),
            Err(Error::Format {
                field: "reserved",
                ..
            })
        ));
    }

    #[test]
    fn resize_identity() {
        let t = Tensor::from_fn(vec![3, 5, 2], |i| i as f32).unwrap();
        assert_eq!(resize_nearest(&t, 3, 5).unwrap(), t);
    }

    #[test]
    fn resize_2x2_to_4x4_blocks() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = resize_nearest(&t, 4, 4).unwrap();
        #[rustfmt::skip]
        let expected = vec![
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(up.data(), &expected[..]);
    }

    #[test]
    fn resize_4x4_to_2x2_keeps_even_cells() {
        let t = Tensor::from_fn(vec![4, 4], |i| i as f32).unwrap();
        let down = resize_nearest(&t, 2, 2).unwrap();
        // cells (0,0), (0,2), (2,0), (2,2)
        assert_eq!(down.data(), &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn resize_rejects_bad_input() {
        let t = Tensor::new(vec![4], vec![0.0; 4]).unwrap();
        assert!(resize_nearest(&t, 2, 2).is_err());
        let t = Tensor::zeros(vec![2, 2]).unwrap();
        assert!(resize_nearest(&t, 0, 2).is_err());
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(1usize..5, 1..4).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            proptest::collection::vec(any::<u32>(), n).prop_map(move |bits| {
                Tensor::new(
                    shape.clone(),
                    bits.into_iter().map(f32::from_bits).collect(),
                )
                .unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn bytes_round_trip_bit_exact(t in arb_tensor()) {
            let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let a: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn resize_up_then_down_recovers(h in 1usize..7, w in 1usize..7, c in 1usize..3, seed in any::<u64>()) {
            let t = Tensor::from_fn(vec![h, w, c], |i| (i as u64 ^ seed) as f32).unwrap();
            let up = resize_nearest(&t, 2 * h, 2 * w).unwrap();
            let down = resize_nearest(&up, h, w).unwrap();
            prop_assert_eq!(down, t);
        }
    }
}
