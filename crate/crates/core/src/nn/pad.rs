use super::{missing_cache, Mode, Module, Tensor};
use crate::error::{input_err, Result};

/// Mirror padding without repeating the edge pixel (`[a b c] → b [a b c] b`).
pub struct ReflectionPad2d {
    pad: usize,
    input_dim: Option<(usize, usize, usize, usize)>,
}

impl ReflectionPad2d {
    pub fn new(pad: usize) -> Self {
        ReflectionPad2d {
            pad,
            input_dim: None,
        }
    }
}

/// Source index for padded position `i` of a length-`n` axis padded by `p`.
pub(crate) fn reflect(i: usize, n: usize, p: usize) -> usize {
    let i = i as isize - p as isize;
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

impl Module for ReflectionPad2d {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, c, h, w) = x.dim();
        let p = self.pad;
        if p == 0 {
            self.input_dim = mode.caches().then_some(x.dim());
            return Ok(x.clone());
        }
        if p >= h || p >= w {
            return Err(input_err!(
                "reflection padding {p} needs an input larger than {h}×{w}"
            ));
        }
        let rows: Vec<usize> = (0..h + 2 * p).map(|i| reflect(i, h, p)).collect();
        let cols: Vec<usize> = (0..w + 2 * p).map(|j| reflect(j, w, p)).collect();
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let (ph, pw) = (h + 2 * p, w + 2 * p);
        let mut out = Tensor::zeros((n, c, ph, pw));
        let os = out.as_slice_mut().expect("fresh array");
        for plane in 0..n * c {
            let src = &xs[plane * h * w..(plane + 1) * h * w];
            let dst = &mut os[plane * ph * pw..(plane + 1) * ph * pw];
            for (i, &r) in rows.iter().enumerate() {
                let srow = &src[r * w..(r + 1) * w];
                let drow = &mut dst[i * pw..(i + 1) * pw];
                drow[p..p + w].copy_from_slice(srow);
                for j in (0..p).chain(p + w..pw) {
                    drow[j] = srow[cols[j]];
                }
            }
        }
        self.input_dim = mode.caches().then_some(x.dim());
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = self.input_dim.ok_or_else(|| missing_cache("reflection_pad"))?;
        let p = self.pad;
        if p == 0 {
            return Ok(grad.clone());
        }
        let mut dx = Tensor::zeros((n, c, h, w));
        let (ph, pw) = (h + 2 * p, w + 2 * p);
        let rows: Vec<usize> = (0..ph).map(|i| reflect(i, h, p)).collect();
        let cols: Vec<usize> = (0..pw).map(|j| reflect(j, w, p)).collect();
        for b in 0..n {
            for ch in 0..c {
                for i in 0..ph {
                    for j in 0..pw {
                        dx[[b, ch, rows[i], cols[j]]] += grad[[b, ch, i, j]];
                    }
                }
            }
        }
        Ok(dx)
    }
}
