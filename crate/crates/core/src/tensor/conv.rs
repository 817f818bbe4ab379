//! im2col convolution kernels (NCHW input, OIHW weights).

use super::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Option<Self> {
        let (&[n, c, h, wd], &[o, ci, kh, kw]) = (x, w) else {
            return None;
        };
        if ci != c || stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return None;
        }
        Some(Self {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.oh, self.ow]
    }
}

fn im2col<T: Element>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let l = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let l = g.cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[base + ix as usize] = plane[base + ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let (rows, l) = (g.rows(), g.cols());
    let in_len = g.c * g.h * g.w;
    let out_len = g.o * l;
    let mut out = vec![T::zero(); g.n * out_len];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * l] };
    for n in 0..g.n {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let src: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        let on = &mut out[n * out_len..(n + 1) * out_len];
        T::gemm(g.o, rows, l, T::one(), w, (rows as isize, 1), src, (l as isize, 1), T::zero(), on, (l as isize, 1));
        if let Some(b) = b {
            for (o, &bo) in b.iter().enumerate() {
                on[o * l..(o + 1) * l].iter_mut().for_each(|v| *v = *v + bo);
            }
        }
    }
    out
}

/// Returns (dx, dw, db).
pub(crate) fn backward<T: Element>(g: &ConvGeom, x: &[T], w: &[T], dy: &[T], want_dx: bool) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (rows, l) = (g.rows(), g.cols());
    let in_len = g.c * g.h * g.w;
    let out_len = g.o * l;
    let mut dx = if want_dx { vec![T::zero(); g.n * in_len] } else { Vec::new() };
    let mut dw = vec![T::zero(); g.o * rows];
    let mut db = vec![T::zero(); g.o];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * l] };
    let mut dcols = vec![T::zero(); rows * l];
    for n in 0..g.n {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let dyn_ = &dy[n * out_len..(n + 1) * out_len];
        let src: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        T::gemm(g.o, l, rows, T::one(), dyn_, (l as isize, 1), src, (1, l as isize), T::one(), &mut dw, (rows as isize, 1));
        for (o, d) in db.iter_mut().enumerate() {
            *d = *d + dyn_[o * l..(o + 1) * l].iter().copied().sum::<T>();
        }
        if want_dx {
            // dcols = Wᵀ · dY
            T::gemm(rows, g.o, l, T::one(), w, (1, rows as isize), dyn_, (l as isize, 1), T::zero(), &mut dcols, (l as isize, 1));
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                dxn.iter_mut().zip(&dcols).for_each(|(a, &b)| *a = *a + b);
            } else {
                col2im(g, &dcols, dxn);
            }
        }
    }
    (dx, dw, db)
}
