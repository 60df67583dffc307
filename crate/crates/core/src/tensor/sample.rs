use crate::error::{Error, Result};

/// A precomputed sparse linear resampling: every output position is a fixed
/// weighted sum of input positions, applied identically to each channel.
///
/// Bilinear/trilinear sampling, integer shifts and masked gathers are all
/// expressed as taps; the weights are constants, so gradients only flow to
/// the sampled values.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTaps {
    n_in: usize,
    out_shape: Vec<usize>,
    offsets: Vec<usize>,
    index: Vec<u32>,
    weight: Vec<f64>,
}

impl SampleTaps {
    pub fn builder(n_in: usize, out_shape: impl Into<Vec<usize>>) -> TapsBuilder {
        let out_shape = out_shape.into();
        let n_out: usize = out_shape.iter().product();
        TapsBuilder {
            taps: SampleTaps {
                n_in,
                out_shape,
                offsets: Vec::with_capacity(n_out + 1),
                index: Vec::new(),
                weight: Vec::new(),
            },
            row_open: false,
        }
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn row(&self, o: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.offsets[o], self.offsets[o + 1]);
        (&self.index[a..b], &self.weight[a..b])
    }

    /// Resample one channel.
    pub fn apply(&self, src: &[f64], dst: &mut [f64]) {
        debug_assert_eq!(src.len(), self.n_in);
        for (o, d) in dst.iter_mut().enumerate() {
            let (idx, w) = self.row(o);
            let mut acc = 0.0;
            for (&i, &wt) in idx.iter().zip(w) {
                acc += wt * src[i as usize];
            }
            *d = acc;
        }
    }

    /// Adjoint of [`apply`](Self::apply): scatter-add output gradients to inputs.
    pub fn apply_transpose(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let (idx, w) = self.row(o);
            for (&i, &wt) in idx.iter().zip(w) {
                grad_in[i as usize] += wt * g;
            }
        }
    }
}

pub struct TapsBuilder {
    taps: SampleTaps,
    row_open: bool,
}

impl TapsBuilder {
    /// Add a contribution to the current output row.
    pub fn push(&mut self, index: usize, weight: f64) {
        debug_assert!(index < self.taps.n_in);
        if !self.row_open {
            self.taps.offsets.push(self.taps.index.len());
            self.row_open = true;
        }
        if weight != 0.0 {
            self.taps.index.push(index as u32);
            self.taps.weight.push(weight);
        }
    }

    /// Close the current output row (an empty row samples zero).
    pub fn end_row(&mut self) {
        if !self.row_open {
            self.taps.offsets.push(self.taps.index.len());
        }
        self.row_open = false;
    }

    pub fn finish(mut self) -> Result<SampleTaps> {
        if self.row_open {
            self.end_row();
        }
        self.taps.offsets.push(self.taps.index.len());
        let n_out: usize = self.taps.out_shape.iter().product();
        if self.taps.n_out() != n_out {
            return Err(Error::shape(
                "bilinear_sample_2d",
                format!(
                    "built {} rows for output shape {:?}",
                    self.taps.n_out(),
                    self.taps.out_shape
                ),
            ));
        }
        Ok(self.taps)
    }
}

/// Index sets over flattened input positions; each set is max-pooled into one output.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Regions {
    pub n_in: usize,
    pub sets: Vec<Vec<usize>>,
}
