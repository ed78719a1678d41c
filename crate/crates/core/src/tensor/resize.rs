//! Bilinear resize with half-pixel centers (align_corners = false).

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Per-axis interpolation table: for each output coordinate the two source
/// indices and the fractional weight of the second one.
fn axis_table(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = pos.floor() as usize;
            let i0 = i0.min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Resize [b, c, h, w] to [b, c, oh, ow] with half-pixel sampling. Matching
/// sizes return an identity copy.
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::BadShape {
            op: "bilinear_resize",
            shape: x.shape().to_vec(),
            reason: "input must be [batch, channels, h, w]".into(),
        });
    }
    if oh == 0 || ow == 0 {
        return Err(Error::BadShape {
            op: "bilinear_resize",
            shape: vec![oh, ow],
            reason: "target size must be positive".into(),
        });
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if oh == h && ow == w {
        return Ok(Tensor::from_op(
            x.shape().to_vec(),
            x.data().to_vec(),
            vec![x.clone()],
            |g, _| vec![Some(g.to_vec())],
        ));
    }

    let ys = axis_table(h, oh);
    let xs = axis_table(w, ow);
    let xd = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for p in 0..b * c {
        let plane = &xd[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            let fy = T::from_f64(fy);
            let row0 = &plane[y0 * w..(y0 + 1) * w];
            let row1 = &plane[y1 * w..(y1 + 1) * w];
            for &(x0, x1, fx) in &xs {
                let fx = T::from_f64(fx);
                let top = row0[x0] * (T::one() - fx) + row0[x1] * fx;
                let bot = row1[x0] * (T::one() - fx) + row1[x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    Ok(Tensor::from_op(
        vec![b, c, oh, ow],
        out,
        vec![x.clone()],
        move |g, _| {
            let mut dx = vec![T::zero(); b * c * h * w];
            for p in 0..b * c {
                let plane = &mut dx[p * h * w..(p + 1) * h * w];
                let gp = &g[p * oh * ow..(p + 1) * oh * ow];
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    let fy = T::from_f64(fy);
                    for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let fx = T::from_f64(fx);
                        let gv = gp[oy * ow + ox];
                        plane[y0 * w + x0] += gv * (T::one() - fy) * (T::one() - fx);
                        plane[y0 * w + x1] += gv * (T::one() - fy) * fx;
                        plane[y1 * w + x0] += gv * fy * (T::one() - fx);
                        plane[y1 * w + x1] += gv * fy * fx;
                    }
                }
            }
            vec![Some(dx)]
        },
    ))
}
