use std::fmt;

use serde::{Deserialize, Serialize};

fn default_dtype_bytes() -> u64 {
    4
}

/// Batch/channel/height/width descriptor of an activation tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorShape {
    pub n: u64,
    pub c: u64,
    pub h: u64,
    pub w: u64,
    #[serde(default = "default_dtype_bytes")]
    pub dtype_bytes: u64,
}

impl TensorShape {
    /// fp32 shape.
    pub const fn new(n: u64, c: u64, h: u64, w: u64) -> Self {
        Self { n, c, h, w, dtype_bytes: 4 }
    }

    pub const fn with_dtype(self, dtype_bytes: u64) -> Self {
        Self { dtype_bytes, ..self }
    }

    pub const fn with_channels(self, c: u64) -> Self {
        Self { c, ..self }
    }

    pub const fn with_spatial(self, h: u64, w: u64) -> Self {
        Self { h, w, ..self }
    }

    pub fn numel(&self) -> u64 {
        self.n * self.c * self.h * self.w
    }

    /// `n·c·h·w·dtype_bytes`, or `None` on u64 overflow.
    pub fn checked_bytes(&self) -> Option<u64> {
        self.n
            .checked_mul(self.c)?
            .checked_mul(self.h)?
            .checked_mul(self.w)?
            .checked_mul(self.dtype_bytes)
    }

    pub fn bytes(&self) -> u64 {
        self.checked_bytes().expect("tensor byte size overflows u64")
    }

    pub fn is_valid(&self) -> bool {
        self.n >= 1
            && self.c >= 1
            && self.h >= 1
            && self.w >= 1
            && self.dtype_bytes >= 1
            && self.checked_bytes().is_some()
    }

    pub fn spatial(&self) -> (u64, u64) {
        (self.h, self.w)
    }

    /// Same dims, ignoring element width.
    pub fn same_dims(&self, other: &TensorShape) -> bool {
        (self.n, self.c, self.h, self.w) == (other.n, other.c, other.h, other.w)
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Output extent of a strided window: `floor((in + 2·pad − kernel)/stride) + 1`.
///
/// `None` when the padded input is smaller than the kernel or the stride is zero.
pub fn window_out(input: u64, kernel: u64, stride: u64, padding: u64) -> Option<u64> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_arithmetic() {
        assert_eq!(window_out(224, 7, 2, 3), Some(112));
        assert_eq!(window_out(112, 3, 2, 1), Some(56));
        assert_eq!(window_out(4, 7, 8, 3), Some(1));
        assert_eq!(window_out(2, 7, 1, 0), None);
    }

    #[test]
    fn byte_size() {
        let s = TensorShape::new(1, 3, 224, 224);
        assert_eq!(s.bytes(), 602_112);
        assert!(TensorShape::new(u64::MAX, 2, 2, 2).checked_bytes().is_none());
        assert!(!TensorShape::new(1, 0, 2, 2).is_valid());
    }

    #[test]
    fn dtype_defaults_to_fp32_in_json() {
        let s: TensorShape = serde_json::from_str(r#"{"n":1,"c":2,"h":3,"w":4}"#).unwrap();
        assert_eq!(s.dtype_bytes, 4);
        assert!(serde_json::from_str::<TensorShape>(r#"{"n":1,"c":2,"h":3,"w":4,"x":1}"#).is_err());
    }
}
