//! Convolution layer dimensions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_dt_bytes() -> usize {
    4
}

/// One convolution layer: a single (batch 1) NCHW input, `out_c` filters of
/// `in_c x f_h x f_w`, explicit symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvShape {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub f_h: usize,
    pub f_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    #[serde(default)]
    pub pad_h: usize,
    #[serde(default)]
    pub pad_w: usize,
    #[serde(default = "default_dt_bytes")]
    pub dt_bytes: usize,
}

impl ConvShape {
    /// Square filter, equal strides and padding on both axes.
    pub fn square(in_c: usize, in_hw: usize, out_c: usize, f: usize, stride: usize, pad: usize) -> Self {
        ConvShape {
            in_c,
            in_h: in_hw,
            in_w: in_hw,
            out_c,
            f_h: f,
            f_w: f,
            stride_h: stride,
            stride_w: stride,
            pad_h: pad,
            pad_w: pad,
            dt_bytes: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_c", self.in_c),
            ("in_h", self.in_h),
            ("in_w", self.in_w),
            ("out_c", self.out_c),
            ("f_h", self.f_h),
            ("f_w", self.f_w),
            ("stride_h", self.stride_h),
            ("stride_w", self.stride_w),
            ("dt_bytes", self.dt_bytes),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(Error::InvalidShape {
                    field,
                    reason: "must be positive".into(),
                });
            }
        }
        if self.f_h > self.padded_h() {
            return Err(Error::InvalidShape {
                field: "f_h",
                reason: format!(
                    "{} exceeds padded input height {} (in_h + 2*pad_h)",
                    self.f_h,
                    self.padded_h()
                ),
            });
        }
        if self.f_w > self.padded_w() {
            return Err(Error::InvalidShape {
                field: "f_w",
                reason: format!(
                    "{} exceeds padded input width {} (in_w + 2*pad_w)",
                    self.f_w,
                    self.padded_w()
                ),
            });
        }
        Ok(())
    }

    pub fn padded_h(&self) -> usize {
        self.in_h + 2 * self.pad_h
    }

    pub fn padded_w(&self) -> usize {
        self.in_w + 2 * self.pad_w
    }

    /// Output height; assumes the shape is valid.
    pub fn out_h(&self) -> usize {
        (self.padded_h() - self.f_h) / self.stride_h + 1
    }

    pub fn out_w(&self) -> usize {
        (self.padded_w() - self.f_w) / self.stride_w + 1
    }

    /// Number of windows (output spatial positions).
    pub fn num_windows(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Elements in one window per channel.
    pub fn window_len(&self) -> usize {
        self.f_h * self.f_w
    }

    pub fn is_pointwise(&self) -> bool {
        self.f_h == 1 && self.f_w == 1 && self.stride_h == 1 && self.stride_w == 1 && self.pad_h == 0 && self.pad_w == 0
    }

    pub fn is_unit_stride(&self) -> bool {
        self.stride_h == 1 && self.stride_w == 1
    }
}

/// `(out_h, out_w)` for a shape, rejecting shapes where no window fits.
pub fn output_dims(shape: &ConvShape) -> Result<(usize, usize)> {
    shape.validate()?;
    Ok((shape.out_h(), shape.out_w()))
}
