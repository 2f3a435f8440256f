//! Separable bilinear resampling with the half-pixel (align-corners = false) convention.
//!
//! Output coordinate `i` maps to source coordinate `(i + 0.5) * in / out - 0.5`,
//! clamped to the valid range, and reads the two neighbouring source samples.

/// Two-tap interpolation weights for one output coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

pub fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            Tap {
                i0,
                i1,
                w0: 1.0 - frac,
                w1: frac,
            }
        })
        .collect()
}

/// Resample one `h x w` plane to `oh x ow`.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow];
    resize_plane(src, h, w, &bilinear_taps(h, oh), &bilinear_taps(w, ow), &mut out);
    out
}

pub(crate) fn resize_plane(src: &[f64], _h: usize, w: usize, rows: &[Tap], cols: &[Tap], out: &mut [f64]) {
    let ow = cols.len();
    for (oi, r) in rows.iter().enumerate() {
        let a = &src[r.i0 * w..(r.i0 + 1) * w];
        let b = &src[r.i1 * w..(r.i1 + 1) * w];
        let dst = &mut out[oi * ow..(oi + 1) * ow];
        for (d, c) in dst.iter_mut().zip(cols) {
            let top = c.w0 * a[c.i0] + c.w1 * a[c.i1];
            let bot = c.w0 * b[c.i0] + c.w1 * b[c.i1];
            *d = r.w0 * top + r.w1 * bot;
        }
    }
}

/// Adjoint of [`resize_plane`]: scatters `grad_out` back onto the source grid.
pub(crate) fn resize_plane_adjoint(grad_out: &[f64], w: usize, rows: &[Tap], cols: &[Tap], grad_in: &mut [f64]) {
    let ow = cols.len();
    for (oi, r) in rows.iter().enumerate() {
        let g = &grad_out[oi * ow..(oi + 1) * ow];
        for (gv, c) in g.iter().zip(cols) {
            let top = r.w0 * gv;
            let bot = r.w1 * gv;
            grad_in[r.i0 * w + c.i0] += top * c.w0;
            grad_in[r.i0 * w + c.i1] += top * c.w1;
            grad_in[r.i1 * w + c.i0] += bot * c.w0;
            grad_in[r.i1 * w + c.i1] += bot * c.w1;
        }
    }
}
