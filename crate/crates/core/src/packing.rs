//! Micro-kernel operand layouts.
//!
//! An input tile holds `nw` consecutive windows (row-major over the output
//! plane) of `nc` channels. For every channel and window position
//! `p = fh * f_w + fw` the `nw` window elements are stored contiguously:
//!
//! ```text
//! index(c, p, w) = (c * f_h * f_w + p) * nw + w
//! ```
//!
//! Filter tiles use the same order with filters in place of windows, so step
//! `k = c * f_h * f_w + p` of the micro-kernel reads one contiguous run from
//! each operand.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::shape::ConvShape;
use crate::tensor::{Tensor3, Tensor4};

/// Which windows and channels an input tile covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputTileCoords {
    pub c_base: usize,
    pub nc: usize,
    /// Flattened output position of the first window.
    pub window_base: usize,
    pub nw: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PackedInputTile {
    pub data: Vec<f32>,
    pub nc: usize,
    pub nw: usize,
    pub window_base: usize,
    pub window_len: usize,
    /// Padded-plane offset of each window's top-left element.
    origins: Vec<usize>,
}

impl PackedInputTile {
    /// An empty tile whose buffers can hold up to `capacity` elements.
    pub fn with_capacity(capacity: usize) -> Self {
        PackedInputTile {
            data: Vec::with_capacity(capacity),
            ..Default::default()
        }
    }

    /// Micro-kernel steps in this tile.
    pub fn depth(&self) -> usize {
        self.nc * self.window_len
    }

    pub fn get(&self, c: usize, p: usize, w: usize) -> f32 {
        self.data[(c * self.window_len + p) * self.nw + w]
    }

    fn reset(&mut self, coords: &InputTileCoords, window_len: usize) {
        self.nc = coords.nc;
        self.nw = coords.nw;
        self.window_base = coords.window_base;
        self.window_len = window_len;
        self.data.clear();
        self.data.resize(coords.nc * window_len * coords.nw, 0.0);
    }
}

fn check_input_tile(padded: &Tensor3, shape: &ConvShape, coords: &InputTileCoords) -> Result<()> {
    let expected = [shape.in_c, shape.padded_h(), shape.padded_w()];
    if padded.dims() != expected {
        return Err(Error::DimMismatch(format!(
            "padded input is {:?}, shape expects {:?}",
            padded.dims(),
            expected
        )));
    }
    if coords.nc == 0 || coords.c_base + coords.nc > shape.in_c {
        return Err(Error::TileOutOfRange(format!(
            "channels {}..{} of {}",
            coords.c_base,
            coords.c_base + coords.nc,
            shape.in_c
        )));
    }
    if coords.nw == 0 || coords.window_base + coords.nw > shape.num_windows() {
        return Err(Error::TileOutOfRange(format!(
            "windows {}..{} of {}",
            coords.window_base,
            coords.window_base + coords.nw,
            shape.num_windows()
        )));
    }
    Ok(())
}

/// Packs one input tile for any stride.
pub fn pack_input_tile(padded: &Tensor3, shape: &ConvShape, coords: InputTileCoords) -> Result<PackedInputTile> {
    let mut tile = PackedInputTile::default();
    pack_input_tile_into(&mut tile, padded, shape, &coords)?;
    Ok(tile)
}

/// Packs into an existing buffer; returns the number of element stores.
pub fn pack_input_tile_into(
    tile: &mut PackedInputTile,
    padded: &Tensor3,
    shape: &ConvShape,
    coords: &InputTileCoords,
) -> Result<usize> {
    check_input_tile(padded, shape, coords)?;
    let (f_h, f_w) = (shape.f_h, shape.f_w);
    let window_len = f_h * f_w;
    tile.reset(coords, window_len);

    let out_w = shape.out_w();
    let row = shape.padded_w();
    let plane = shape.padded_h() * row;
    tile.origins.clear();
    tile.origins.extend((coords.window_base..coords.window_base + coords.nw).map(|win| {
        let (oh, ow) = (win / out_w, win % out_w);
        oh * shape.stride_h * row + ow * shape.stride_w
    }));

    let src = padded.as_slice();
    let nw = coords.nw;
    let mut stores = 0;
    for c in 0..coords.nc {
        let src_plane = &src[(coords.c_base + c) * plane..(coords.c_base + c + 1) * plane];
        for fh in 0..f_h {
            for fw in 0..f_w {
                let k = c * window_len + fh * f_w + fw;
                let dst = &mut tile.data[k * nw..(k + 1) * nw];
                let offset = fh * row + fw;
                for (d, &origin) in dst.iter_mut().zip(&tile.origins) {
                    *d = src_plane[origin + offset];
                }
                stores += nw;
            }
        }
    }
    Ok(stores)
}

/// Vector-based packing for unit stride; same layout as [`pack_input_tile`].
pub fn pack_input_tile_vbp(padded: &Tensor3, shape: &ConvShape, coords: InputTileCoords) -> Result<PackedInputTile> {
    let mut tile = PackedInputTile::default();
    let mut reg = Vec::new();
    pack_input_tile_vbp_into(&mut tile, &mut reg, padded, shape, &coords)?;
    Ok(tile)
}

/// Vector-based packing into an existing buffer. `reg` models the vector
/// register pair and is reused across calls. Returns the number of element
/// stores.
///
/// Within one output row, the windows' elements at `(fh, fw + 1)` are the
/// elements at `(fh, fw)` shifted left by one, with the next input element
/// shifted in at the right. The shift pipeline restarts at each output-row
/// boundary inside the tile.
pub fn pack_input_tile_vbp_into(
    tile: &mut PackedInputTile,
    reg: &mut Vec<f32>,
    padded: &Tensor3,
    shape: &ConvShape,
    coords: &InputTileCoords,
) -> Result<usize> {
    if !shape.is_unit_stride() {
        return Err(Error::NonUnitStride {
            stride_h: shape.stride_h,
            stride_w: shape.stride_w,
        });
    }
    check_input_tile(padded, shape, coords)?;
    let (f_h, f_w) = (shape.f_h, shape.f_w);
    let window_len = f_h * f_w;
    tile.reset(coords, window_len);
    tile.origins.clear();

    let out_w = shape.out_w();
    let row = shape.padded_w();
    let plane = shape.padded_h() * row;
    let src = padded.as_slice();
    let nw = coords.nw;
    let mut stores = 0;

    // Split the tile into runs of windows on the same output row.
    let mut first = 0;
    while first < nw {
        let win = coords.window_base + first;
        let (oh, ow) = (win / out_w, win % out_w);
        let len = (out_w - ow).min(nw - first);

        for c in 0..coords.nc {
            let src_plane = &src[(coords.c_base + c) * plane..(coords.c_base + c + 1) * plane];
            for fh in 0..f_h {
                let src_row = &src_plane[(oh + fh) * row..(oh + fh + 1) * row];
                // Load: position (fh, 0) of the `len` windows is a contiguous run.
                reg.clear();
                reg.extend_from_slice(&src_row[ow..ow + len]);
                for fw in 0..f_w {
                    if fw > 0 {
                        reg.copy_within(1.., 0);
                        reg[len - 1] = src_row[ow + len - 1 + fw];
                    }
                    let k = c * window_len + fh * f_w + fw;
                    tile.data[k * nw + first..k * nw + first + len].copy_from_slice(reg);
                    stores += len;
                }
            }
        }
        first += len;
    }
    Ok(stores)
}

/// All filter tiles of one layer, ordered by channel set then filter tile.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedFilterSet {
    pub data: Vec<f32>,
    pub out_c: usize,
    pub in_c: usize,
    pub f_h: usize,
    pub f_w: usize,
    pub n_c: usize,
    pub nf: usize,
    offsets: Vec<usize>,
}

/// Borrowed view of one packed filter tile.
#[derive(Debug, Clone, Copy)]
pub struct FilterTile<'a> {
    pub data: &'a [f32],
    pub nc: usize,
    pub nf: usize,
    pub window_len: usize,
}

impl FilterTile<'_> {
    pub fn depth(&self) -> usize {
        self.nc * self.window_len
    }
}

impl PackedFilterSet {
    pub fn num_channel_sets(&self) -> usize {
        self.in_c.div_ceil(self.n_c)
    }

    pub fn num_filter_tiles(&self) -> usize {
        self.out_c.div_ceil(self.nf)
    }

    /// Channels in channel set `cs` (the last one may be short).
    pub fn set_channels(&self, cs: usize) -> usize {
        self.n_c.min(self.in_c - cs * self.n_c)
    }

    /// Filters in filter tile `ft` (the last one may be short).
    pub fn tile_filters(&self, ft: usize) -> usize {
        self.nf.min(self.out_c - ft * self.nf)
    }

    pub fn tile(&self, cs: usize, ft: usize) -> FilterTile<'_> {
        let i = cs * self.num_filter_tiles() + ft;
        FilterTile {
            data: &self.data[self.offsets[i]..self.offsets[i + 1]],
            nc: self.set_channels(cs),
            nf: self.tile_filters(ft),
            window_len: self.f_h * self.f_w,
        }
    }
}

/// Rearranges `(out_c, in_c, f_h, f_w)` filters into micro-kernel tiles of
/// `nf` filters by `n_c` channels. No element is replicated.
pub fn pack_filters(filters: &Tensor4, nf: usize, n_c: usize) -> Result<PackedFilterSet> {
    let [out_c, in_c, f_h, f_w] = filters.dims();
    if nf == 0 || n_c == 0 || n_c > in_c {
        return Err(Error::DimMismatch(format!(
            "cannot tile {in_c} channels by {n_c} and {out_c} filters by {nf}"
        )));
    }
    let window_len = f_h * f_w;
    let src = filters.as_slice();
    let mut set = PackedFilterSet {
        data: Vec::with_capacity(src.len()),
        out_c,
        in_c,
        f_h,
        f_w,
        n_c,
        nf,
        offsets: vec![0],
    };
    for cs in 0..set.num_channel_sets() {
        let (c0, nc) = (cs * n_c, set.set_channels(cs));
        for ft in 0..set.num_filter_tiles() {
            let (f0, nf_tile) = (ft * nf, set.tile_filters(ft));
            for c in 0..nc {
                for p in 0..window_len {
                    for f in 0..nf_tile {
                        set.data.push(src[((f0 + f) * in_c + c0 + c) * window_len + p]);
                    }
                }
            }
            set.offsets.push(set.data.len());
        }
    }
    Ok(set)
}

/// Inverse of [`pack_filters`].
pub fn unpack_filters(set: &PackedFilterSet) -> Tensor4 {
    let mut out = Tensor4::zeros(set.out_c, set.in_c, set.f_h, set.f_w);
    let window_len = set.f_h * set.f_w;
    let dst = out.as_mut_slice();
    for cs in 0..set.num_channel_sets() {
        for ft in 0..set.num_filter_tiles() {
            let tile = set.tile(cs, ft);
            for c in 0..tile.nc {
                for p in 0..window_len {
                    for f in 0..tile.nf {
                        let v = tile.data[(c * window_len + p) * tile.nf + f];
                        dst[((ft * set.nf + f) * set.in_c + cs * set.n_c + c) * window_len + p] = v;
                    }
                }
            }
        }
    }
    out
}

/// Text dump of a packed input tile: one line per `(channel, position)` step.
pub fn dump_input_tile(tile: &PackedInputTile) -> String {
    let mut s = format!(
        "# input tile: nc={} nw={} window_base={} window_len={}\n",
        tile.nc, tile.nw, tile.window_base, tile.window_len
    );
    for c in 0..tile.nc {
        for p in 0..tile.window_len {
            let _ = write!(s, "c{c} p{p}:");
            for w in 0..tile.nw {
                let _ = write!(s, " {}", tile.get(c, p, w));
            }
            s.push('\n');
        }
    }
    s
}
