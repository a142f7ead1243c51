//! Event streams, voxel grids and synthetic event/low-light data.

mod io;
mod synth;

pub use io::{read_events, read_voxels, write_events, write_voxels};
pub use synth::{luminance, synth_events, synth_lowlight, LOG_EPS};

use crate::error::{ensure, Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Default number of temporal bins.
pub const NUM_BINS: usize = 5;

/// Events voxelised per work unit; fixed so that sums do not depend on threading.
const VOXEL_CHUNK: usize = 1 << 14;

/// A signed brightness change at pixel `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub t: f64,
    pub x: u32,
    pub y: u32,
    /// +1 or -1.
    pub p: i8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub t_start: f64,
    pub t_end: f64,
    pub width: usize,
    pub height: usize,
}

impl EventStream {
    /// Builds a stream and checks every invariant.
    pub fn new(
        events: Vec<Event>,
        t_start: f64,
        t_end: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let s = Self {
            events,
            t_start,
            t_end,
            width,
            height,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn empty(t_start: f64, t_end: f64, width: usize, height: usize) -> Self {
        Self {
            events: Vec::new(),
            t_start,
            t_end,
            width,
            height,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn polarity_sum(&self) -> i64 {
        self.events.iter().map(|e| e.p as i64).sum()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.t_end.is_finite() && self.t_start.is_finite() && self.t_end > self.t_start,
            Error::InvalidArgument(format!(
                "empty or inverted time window [{}, {}]",
                self.t_start, self.t_end
            ))
        );
        ensure!(
            self.width > 0 && self.height > 0,
            Error::InvalidArgument("sensor resolution must be positive".into())
        );
        let mut prev = f64::NEG_INFINITY;
        for (i, e) in self.events.iter().enumerate() {
            ensure!(
                (e.x as usize) < self.width && (e.y as usize) < self.height,
                Error::InvalidArgument(format!(
                    "event {i} at ({}, {}) outside {}x{} sensor",
                    e.x, e.y, self.width, self.height
                ))
            );
            ensure!(
                e.p == 1 || e.p == -1,
                Error::InvalidArgument(format!("event {i} has polarity {}", e.p))
            );
            ensure!(
                e.t >= self.t_start && e.t <= self.t_end,
                Error::InvalidArgument(format!(
                    "event {i} at t={} outside [{}, {}]",
                    e.t, self.t_start, self.t_end
                ))
            );
            ensure!(
                e.t >= prev,
                Error::InvalidArgument(format!("events not sorted by time at index {i}"))
            );
            prev = e.t;
        }
        Ok(())
    }
}

/// Signed event counts split over temporal bins, `[bins, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    data: Tensor,
}

impl VoxelGrid {
    pub fn from_tensor(data: Tensor) -> Result<Self> {
        data.dims3()?;
        Ok(Self { data })
    }

    pub fn bins(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.sum()
    }

    /// Zero-mean, unit-variance rescaling of the non-zero cells; empty cells stay zero.
    pub fn normalized(&self) -> Self {
        let nz: Vec<f64> = self.data.data().iter().copied().filter(|v| *v != 0.0).collect();
        if nz.is_empty() {
            return self.clone();
        }
        let mean = nz.iter().sum::<f64>() / nz.len() as f64;
        let var = nz.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nz.len() as f64;
        let std = var.sqrt();
        let data = self
            .data
            .map(|v| if v == 0.0 { 0.0 } else if std > 0.0 { (v - mean) / std } else { v - mean });
        Self { data }
    }
}

/// Normalised bin coordinate of timestamp `t`, in `[0, bins - 1]`.
fn bin_coordinate(t: f64, t_start: f64, t_end: f64, bins: usize) -> f64 {
    if t >= t_end {
        return (bins - 1) as f64;
    }
    ((t - t_start) / (t_end - t_start) * (bins - 1) as f64).clamp(0.0, (bins - 1) as f64)
}

/// Splits each event's polarity linearly between the two nearest temporal bins.
pub fn voxelize(stream: &EventStream, num_bins: usize) -> Result<VoxelGrid> {
    ensure!(
        num_bins >= 1,
        Error::InvalidArgument("need at least one temporal bin".into())
    );
    stream.validate()?;
    let (w, h) = (stream.width, stream.height);
    let plane = w * h;
    let n_chunks = stream.events.len().div_ceil(VOXEL_CHUNK);
    let partials = par::map_range(n_chunks, |ci| {
        let mut grid = vec![0.0; num_bins * plane];
        let end = ((ci + 1) * VOXEL_CHUNK).min(stream.events.len());
        for e in &stream.events[ci * VOXEL_CHUNK..end] {
            let tb = bin_coordinate(e.t, stream.t_start, stream.t_end, num_bins);
            let left = tb.floor() as usize;
            let cell = e.y as usize * w + e.x as usize;
            let p = e.p as f64;
            if left + 1 >= num_bins {
                grid[(num_bins - 1) * plane + cell] += p;
            } else {
                let frac = tb - left as f64;
                grid[left * plane + cell] += p * (1.0 - frac);
                if frac > 0.0 {
                    grid[(left + 1) * plane + cell] += p * frac;
                }
            }
        }
        grid
    });
    let mut data = vec![0.0; num_bins * plane];
    for part in partials {
        for (d, v) in data.iter_mut().zip(part) {
            *d += v;
        }
    }
    Ok(VoxelGrid {
        data: Tensor::from_parts(vec![num_bins, h, w], data),
    })
}
