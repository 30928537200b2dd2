//! Spatial token grids and the non-parametric space-to-channel transforms.
//!
//! Channel layout after a space-to-channel fold with ratio `r`: output token
//! `(i, j)`, channel `(u*r + v)*C + c` holds input token `(r*i + u, r*j + v)`,
//! channel `c`, for `u, v` in `0..r`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear grid reduction factor; token count shrinks by `r²`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct CompressionRatio(usize);

impl CompressionRatio {
    pub const IDENTITY: CompressionRatio = CompressionRatio(1);

    pub fn new(r: usize) -> Result<Self> {
        if r == 0 {
            return Err(Error::Config("compression ratio must be >= 1".into()));
        }
        Ok(Self(r))
    }

    pub fn get(self) -> usize {
        self.0
    }

    pub fn area(self) -> usize {
        self.0 * self.0
    }

    pub fn is_identity(self) -> bool {
        self.0 == 1
    }

    pub fn check_divides(self, height: usize, width: usize) -> Result<()> {
        if !height.is_multiple_of(self.0) || !width.is_multiple_of(self.0) {
            return Err(Error::Divisibility {
                height,
                width,
                ratio: self.0,
            });
        }
        Ok(())
    }

    fn check_channels(self, channels: usize) -> Result<usize> {
        if !channels.is_multiple_of(self.area()) {
            return Err(Error::ChannelDivisibility {
                channels,
                ratio: self.0,
            });
        }
        Ok(channels / self.area())
    }
}

impl TryFrom<usize> for CompressionRatio {
    type Error = Error;
    fn try_from(r: usize) -> Result<Self> {
        Self::new(r)
    }
}

impl From<CompressionRatio> for usize {
    fn from(r: CompressionRatio) -> usize {
        r.0
    }
}

impl fmt::Display for CompressionRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// An `H x W` grid of `C`-dimensional tokens stored as a row-major
/// `[H x W x C]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    height: usize,
    width: usize,
    channels: usize,
    values: Tensor,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let values = Tensor::new(vec![height, width, channels], data)?;
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::new(
            height,
            width,
            channels,
            vec![0.0; height * width * channels],
        )
        .expect("zero extent")
    }

    /// Reinterprets an `N x C` token matrix as an `H x W` grid.
    pub fn from_tokens(height: usize, width: usize, tokens: &Tensor) -> Result<Self> {
        match tokens.shape() {
            [n, c] if *n == height * width => Self::new(height, width, *c, tokens.data().to_vec()),
            other => Err(Error::dim("from_tokens", other, &[height * width, 0])),
        }
    }

    /// Flattens to the `N x C` token matrix.
    pub fn to_tokens(&self) -> Tensor {
        self.values
            .reshape(&[self.token_count(), self.channels])
            .expect("grid extents are consistent")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn token_count(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn data(&self) -> &[f64] {
        self.values.data()
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data()[(row * self.width + col) * self.channels + channel]
    }

    pub fn token(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data()[start..start + self.channels]
    }

    pub fn max_abs_diff(&self, other: &TokenGrid) -> f64 {
        self.values.max_abs_diff(&other.values)
    }

    /// Folds each `r x r` block of tokens into one token with `r²·C` channels.
    pub fn pixel_shuffle(&self, r: CompressionRatio) -> Result<TokenGrid> {
        let index = pixel_shuffle_index(self.height, self.width, self.channels, r)?;
        let data = index.iter().map(|&i| self.data()[i]).collect();
        TokenGrid::new(
            self.height / r.get(),
            self.width / r.get(),
            self.channels * r.area(),
            data,
        )
    }

    /// Inverse of [`pixel_shuffle`](Self::pixel_shuffle).
    pub fn pixel_unshuffle(&self, r: CompressionRatio) -> Result<TokenGrid> {
        let c = r.check_channels(self.channels)?;
        let (h, w) = (self.height * r.get(), self.width * r.get());
        let index = pixel_shuffle_index(h, w, c, r)?;
        let mut data = vec![0.0; self.data().len()];
        for (src, &dst) in index.iter().enumerate() {
            data[dst] = self.data()[src];
        }
        TokenGrid::new(h, w, c, data)
    }

    /// Averages the `r²` spatial groups of a folded grid back to `C` channels.
    pub fn channel_average(&self, r: CompressionRatio) -> Result<TokenGrid> {
        let c = r.check_channels(self.channels)?;
        let data = channel_average_kernel(self.data(), self.token_count(), r.area(), c);
        TokenGrid::new(self.height, self.width, c, data)
    }

    /// The parameter-free merge path: fold then average.
    pub fn residual_shortcut(&self, r: CompressionRatio) -> Result<TokenGrid> {
        self.pixel_shuffle(r)?.channel_average(r)
    }
}

/// Gather index for the space-to-channel fold: output element `o` of the
/// folded grid is input element `index[o]`.
pub fn pixel_shuffle_index(
    height: usize,
    width: usize,
    channels: usize,
    r: CompressionRatio,
) -> Result<Vec<usize>> {
    r.check_divides(height, width)?;
    let rr = r.get();
    let (oh, ow) = (height / rr, width / rr);
    let mut index = Vec::with_capacity(height * width * channels);
    for i in 0..oh {
        for j in 0..ow {
            for u in 0..rr {
                for v in 0..rr {
                    let src_token = (rr * i + u) * width + (rr * j + v);
                    index.extend((0..channels).map(|c| src_token * channels + c));
                }
            }
        }
    }
    Ok(index)
}

pub(crate) fn channel_average_kernel(
    data: &[f64],
    tokens: usize,
    groups: usize,
    c: usize,
) -> Vec<f64> {
    let scale = 1.0 / groups as f64;
    let mut out = vec![0.0; tokens * c];
    for (t, token) in data.chunks_exact(groups * c).enumerate() {
        let dst = &mut out[t * c..(t + 1) * c];
        for group in token.chunks_exact(c) {
            for (o, v) in dst.iter_mut().zip(group) {
                *o += v;
            }
        }
        for o in dst.iter_mut() {
            *o *= scale;
        }
    }
    out
}

/// Direct `r x r` non-overlapping window mean, per channel.
pub fn avg_pool_oracle(g: &TokenGrid, r: CompressionRatio) -> Result<TokenGrid> {
    r.check_divides(g.height(), g.width())?;
    let rr = r.get();
    let (oh, ow, c) = (g.height() / rr, g.width() / rr, g.channels());
    let mut out = TokenGrid::zeros(oh, ow, c);
    let data = out.values.data_mut();
    for i in 0..oh {
        for j in 0..ow {
            for ch in 0..c {
                let mut acc = 0.0;
                for di in 0..rr {
                    for dj in 0..rr {
                        acc += g.get(i * rr + di, j * rr + dj, ch);
                    }
                }
                data[(i * ow + j) * c + ch] = acc / (rr * rr) as f64;
            }
        }
    }
    Ok(out)
}
