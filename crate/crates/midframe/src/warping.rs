//! Backward warping and warp-state resampling.
//!
//! A [`WarpState`] packs both intermediate flows and the composition-mask
//! logits into one 5-channel map `[fx0, fy0, fx1, fy1, m]`, which is how the
//! decoders consume and predict it. Displacements are in pixel units of their
//! own resolution, so spatial rescaling also rescales flow values.

use crate::ops;
use crate::tape::{Element, Tape, Tx};
use ndarray::{ArrayD, IxDyn};

/// Flows toward both frames plus mask logits, all at one resolution.
#[derive(Clone, Copy)]
pub struct WarpState<'t, E: Element> {
    /// `(5, H, W)`: channels `[fx0, fy0, fx1, fy1, mask_logits]`.
    pub all: Tx<'t, E>,
}

impl<'t, E: Element> WarpState<'t, E> {
    pub fn new(all: Tx<'t, E>) -> Self {
        assert_eq!(all.shape()[0], 5, "warp state needs 5 channels");
        WarpState { all }
    }

    pub fn zeros(tape: &'t Tape<E>, h: usize, w: usize) -> Self {
        WarpState { all: tape.leaf(ArrayD::zeros(IxDyn(&[5, h, w]))) }
    }

    /// Flow sampling frame 0, `(2, H, W)`.
    pub fn flow_to_0(&self) -> Tx<'t, E> {
        ops::slice_ch(self.all, 0, 2)
    }

    /// Flow sampling frame 1, `(2, H, W)`.
    pub fn flow_to_1(&self) -> Tx<'t, E> {
        ops::slice_ch(self.all, 2, 4)
    }

    /// Pre-sigmoid composition mask, `(1, H, W)`.
    pub fn mask_logits(&self) -> Tx<'t, E> {
        ops::slice_ch(self.all, 4, 5)
    }

    pub fn spatial(&self) -> (usize, usize) {
        let s = self.all.shape();
        (s[1], s[2])
    }
}

/// Sample `source` at `x + flow(x)` with bilinear interpolation and border
/// replication. Differentiable in both arguments.
///
/// Panics if the flow is not `(2, H, W)` for a `(C, H, W)` source.
pub fn backward_warp<'t, E: Element>(source: Tx<'t, E>, flow: Tx<'t, E>) -> Tx<'t, E> {
    ops::grid_sample(source, flow)
}

/// Double the resolution of a warp state: bilinear on all channels, then ×2 on
/// the flow values (pixel units of the finer grid); mask logits pass unscaled.
pub fn upsample_warp_state<'t, E: Element>(w: WarpState<'t, E>) -> WarpState<'t, E> {
    let up = ops::bilinear_up2(w.all);
    let flows = ops::scale(ops::slice_ch(up, 0, 4), 2.0);
    let mask = ops::slice_ch(up, 4, 5);
    WarpState::new(ops::concat_ch(&[flows, mask]))
}

/// Halve the resolution of a warp state `levels` times (area averaging), with
/// flow values scaled by `2^-levels`; mask logits pass unscaled.
pub fn downscale_warp_state<'t, E: Element>(
    w: WarpState<'t, E>,
    levels: usize,
) -> WarpState<'t, E> {
    if levels == 0 {
        return w;
    }
    let mut all = w.all;
    for _ in 0..levels {
        all = ops::down2(all);
    }
    let flows = ops::scale(ops::slice_ch(all, 0, 4), 0.5f64.powi(levels as i32));
    let mask = ops::slice_ch(all, 4, 5);
    WarpState::new(ops::concat_ch(&[flows, mask]))
}

/// Area-averaged ×0.5 downsample. `factor` must be 0.5; apply repeatedly for
/// deeper pyramid levels.
pub fn downsample_image<'t, E: Element>(img: Tx<'t, E>, factor: f64) -> Tx<'t, E> {
    assert_eq!(factor, 0.5, "only ×0.5 steps are supported");
    let s = img.shape();
    assert!(s[1] >= 2 && s[2] >= 2, "downsample would produce an empty image");
    ops::down2(img)
}

/// `img` reduced by `levels` halvings (level-l resolution).
pub fn downsample_to_level<'t, E: Element>(img: Tx<'t, E>, levels: usize) -> Tx<'t, E> {
    let mut out = img;
    for _ in 0..levels {
        out = downsample_image(out, 0.5);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_assert, test_array};
    use crate::ops::{mean, mul};
    use ndarray::IxDyn;

    #[test]
    fn zero_flow_is_identity() {
        let t: Tape<f64> = Tape::new();
        let img = t.leaf(test_array(&[3, 6, 7], 101, 0.0, 1.0));
        let flow = t.leaf(ArrayD::zeros(IxDyn(&[2, 6, 7])));
        let out = backward_warp(img, flow);
        assert_eq!(&*out.value(), &*img.value());
    }

    #[test]
    fn unit_flow_shifts_one_column_with_replicated_border() {
        let t: Tape<f64> = Tape::new();
        let img = t.leaf(ArrayD::from_shape_fn(IxDyn(&[1, 8, 8]), |ix| (ix[1] * 8 + ix[2]) as f64));
        let mut f = ArrayD::zeros(IxDyn(&[2, 8, 8]));
        f.index_axis_mut(ndarray::Axis(0), 0).fill(1.0);
        let out = backward_warp(img, t.leaf(f)).value();
        let iv = img.value();
        for y in 0..8 {
            for x in 0..7 {
                assert_eq!(out[[0, y, x]], iv[[0, y, x + 1]]);
            }
            assert_eq!(out[[0, y, 7]], iv[[0, y, 7]]);
        }
    }

    #[test]
    fn half_pixel_sample_averages_neighbors() {
        let t: Tape<f64> = Tape::new();
        let img = t.leaf(
            ndarray::Array3::from_shape_vec((1, 2, 2), vec![1.0, 3.0, 5.0, 7.0])
                .unwrap()
                .into_dyn(),
        );
        let mut f = ArrayD::zeros(IxDyn(&[2, 2, 2]));
        f[[0, 0, 0]] = 0.5;
        let out = backward_warp(img, t.leaf(f)).value();
        assert_eq!(out[[0, 0, 0]], 2.0); // mean of 1 and 3
    }

    #[test]
    fn warp_gradients_match_finite_differences() {
        let src = test_array(&[2, 8, 8], 102, -1.0, 1.0);
        let mut flow = ArrayD::zeros(IxDyn(&[2, 8, 8]));
        flow.fill(0.25); // off the bilinear kinks
        fd_assert(
            |_t, xs| mean(mul(backward_warp(xs[0], xs[1]), xs[0])),
            &[src, flow],
            60,
            1e-4,
        );
    }

    #[test]
    fn upsampled_constant_state_doubles_flow_values_only() {
        let t: Tape<f64> = Tape::new();
        let mut arr = ArrayD::zeros(IxDyn(&[5, 16, 16]));
        for (c, v) in [(0, 3.0), (1, -1.0), (2, 0.5), (3, 2.0), (4, 0.7)] {
            arr.index_axis_mut(ndarray::Axis(0), c).fill(v);
        }
        let up = upsample_warp_state(WarpState::new(t.leaf(arr)));
        assert_eq!(up.all.shape(), vec![5, 32, 32]);
        let v = up.all.value();
        for (c, want) in [(0, 6.0), (1, -2.0), (2, 1.0), (3, 4.0), (4, 0.7)] {
            for val in v.index_axis(ndarray::Axis(0), c).iter() {
                assert_eq!(*val, want, "channel {c}");
            }
        }
    }

    #[test]
    fn zero_state_stays_zero_across_resampling() {
        let t: Tape<f64> = Tape::new();
        let ws = WarpState::zeros(&t, 8, 8);
        let up = upsample_warp_state(ws);
        assert!(up.all.value().iter().all(|v| *v == 0.0));
        let down = downscale_warp_state(ws, 2);
        assert_eq!(down.all.shape(), vec![5, 2, 2]);
        assert!(down.all.value().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn downscale_halves_flow_values_per_level() {
        let t: Tape<f64> = Tape::new();
        let mut arr = ArrayD::zeros(IxDyn(&[5, 8, 8]));
        arr.index_axis_mut(ndarray::Axis(0), 0).fill(4.0);
        arr.index_axis_mut(ndarray::Axis(0), 4).fill(0.3);
        let down = downscale_warp_state(WarpState::new(t.leaf(arr)), 2);
        let v = down.all.value();
        assert_eq!(v[[0, 0, 0]], 1.0); // 4.0 · 2^-2
        assert_eq!(v[[4, 0, 0]], 0.3);
    }

    #[test]
    fn image_pyramid_shapes_and_means() {
        let t: Tape<f64> = Tape::new();
        let block = t.leaf(
            ndarray::Array3::from_shape_vec((1, 2, 2), vec![1.0, 2.0, 3.0, 6.0])
                .unwrap()
                .into_dyn(),
        );
        let d = downsample_image(block, 0.5);
        assert_eq!(d.shape(), vec![1, 1, 1]);
        assert_eq!(d.value()[[0, 0, 0]], 3.0);

        let img = t.leaf(ArrayD::from_elem(IxDyn(&[1, 256, 448]), 0.25));
        let l3 = downsample_to_level(img, 3);
        assert_eq!(l3.shape(), vec![1, 32, 56]);
        assert!(l3.value().iter().all(|v| *v == 0.25));
    }
}
