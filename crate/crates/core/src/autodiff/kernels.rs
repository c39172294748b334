//! Raw dense kernels shared by the tape ops and the graph-free spiking pass.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Geometry of a grouped 2-D cross-correlation with square kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || !c_in.is_multiple_of(groups) || !c_out.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "groups={groups} must divide c_in={c_in} and c_out={c_out}"
            )));
        }
        if k == 0 || stride == 0 {
            return Err(Error::Config("kernel size and stride must be >= 1".into()));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Shape(format!(
                "kernel {k} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        Ok(ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            groups,
            h_out,
            w_out,
        })
    }

    pub fn with_batch(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn cin_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    pub fn cout_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    /// Rows of one group's im2col matrix: `C_in/groups · k · k`.
    pub fn fan_in(&self) -> usize {
        self.cin_per_group() * self.k * self.k
    }

    pub fn out_positions(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn in_len(&self) -> usize {
        self.n * self.c_in * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.n * self.c_out * self.h_out * self.w_out
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.fan_in()
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.cin_per_group(), self.k, self.k]
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.h_out, self.w_out]
    }
}

/// Unfolds channels `[c0, c0+cg)` of one sample into `col[cg·k·k, h_out·w_out]`.
pub fn im2col<S: Scalar>(x_sample: &[S], g: &ConvGeom, c0: usize, col: &mut [S]) {
    let cg = g.cin_per_group();
    let p = g.out_positions();
    debug_assert!(col.len() >= cg * g.k * g.k * p);
    for c in 0..cg {
        let plane = &x_sample[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = &mut col[((c * g.k + ki) * g.k + kj) * p..][..p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy as usize >= g.h {
                        dst.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix as usize >= g.w {
                            S::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back onto channels `[c0, c0+cg)`.
pub fn col2im<S: Scalar>(col: &[S], g: &ConvGeom, c0: usize, dx_sample: &mut [S]) {
    let cg = g.cin_per_group();
    let p = g.out_positions();
    for c in 0..cg {
        let plane = &mut dx_sample[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = &col[((c * g.k + ki) * g.k + kj) * p..][..p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        plane[iy as usize * g.w + ix as usize] =
                            plane[iy as usize * g.w + ix as usize] + row[oy * g.w_out + ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<S: Scalar>(x: &[S], w: &[S], g: &ConvGeom) -> Vec<S> {
    let mut out = vec![S::zero(); g.out_len()];
    let p = g.out_positions();
    let (cg, og, fan) = (g.cin_per_group(), g.cout_per_group(), g.fan_in());
    let mut col = vec![S::zero(); fan * p];
    let in_sample = g.c_in * g.h * g.w;
    let out_sample = g.c_out * p;
    for n in 0..g.n {
        let xs = &x[n * in_sample..(n + 1) * in_sample];
        for grp in 0..g.groups {
            im2col(xs, g, grp * cg, &mut col);
            let wg = &w[grp * og * fan..(grp + 1) * og * fan];
            let dst = &mut out[n * out_sample + grp * og * p..][..og * p];
            S::gemm(og, fan, p, wg, false, &col, false, S::zero(), dst);
        }
    }
    out
}

/// Gradient of the convolution with respect to its input.
pub fn conv2d_backward_input<S: Scalar>(gout: &[S], w: &[S], g: &ConvGeom) -> Vec<S> {
    let mut dx = vec![S::zero(); g.in_len()];
    let p = g.out_positions();
    let (cg, og, fan) = (g.cin_per_group(), g.cout_per_group(), g.fan_in());
    let mut col = vec![S::zero(); fan * p];
    let in_sample = g.c_in * g.h * g.w;
    let out_sample = g.c_out * p;
    for n in 0..g.n {
        let dxs = &mut dx[n * in_sample..(n + 1) * in_sample];
        for grp in 0..g.groups {
            let wg = &w[grp * og * fan..(grp + 1) * og * fan];
            let go = &gout[n * out_sample + grp * og * p..][..og * p];
            S::gemm(fan, og, p, wg, true, go, false, S::zero(), &mut col);
            col2im(&col, g, grp * cg, dxs);
        }
    }
    dx
}

/// Gradient of the convolution with respect to its weights.
pub fn conv2d_backward_weight<S: Scalar>(x: &[S], gout: &[S], g: &ConvGeom) -> Vec<S> {
    let mut dw = vec![S::zero(); g.weight_len()];
    let p = g.out_positions();
    let (cg, og, fan) = (g.cin_per_group(), g.cout_per_group(), g.fan_in());
    let mut col = vec![S::zero(); fan * p];
    let in_sample = g.c_in * g.h * g.w;
    let out_sample = g.c_out * p;
    for n in 0..g.n {
        let xs = &x[n * in_sample..(n + 1) * in_sample];
        for grp in 0..g.groups {
            im2col(xs, g, grp * cg, &mut col);
            let go = &gout[n * out_sample + grp * og * p..][..og * p];
            let dwg = &mut dw[grp * og * fan..(grp + 1) * og * fan];
            S::gemm(og, p, fan, go, false, &col, true, S::one(), dwg);
        }
    }
    dw
}

/// `y[N, out] = x[N, in] · w[out, in]ᵀ`
pub fn linear_forward<S: Scalar>(x: &[S], w: &[S], n: usize, d_in: usize, d_out: usize) -> Vec<S> {
    let mut y = vec![S::zero(); n * d_out];
    S::gemm(n, d_in, d_out, x, false, w, true, S::zero(), &mut y);
    y
}

pub fn linear_backward_input<S: Scalar>(gout: &[S], w: &[S], n: usize, d_in: usize, d_out: usize) -> Vec<S> {
    let mut dx = vec![S::zero(); n * d_in];
    S::gemm(n, d_out, d_in, gout, false, w, false, S::zero(), &mut dx);
    dx
}

pub fn linear_backward_weight<S: Scalar>(x: &[S], gout: &[S], n: usize, d_in: usize, d_out: usize) -> Vec<S> {
    let mut dw = vec![S::zero(); d_out * d_in];
    S::gemm(d_out, n, d_in, gout, true, x, false, S::zero(), &mut dw);
    dw
}
