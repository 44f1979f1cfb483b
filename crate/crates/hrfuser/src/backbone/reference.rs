//! Scalar-loop counterparts of the resampling primitives, for oracle checks
//! of the exchange unit.

use crate::nn::Conv2d;
use crate::tensor::Tensor;

/// Six-nested-loop convolution reading the layer's current weights.
pub fn naive_conv2d(x: &Tensor, conv: &Conv2d) -> Tensor {
    let w = conv.weight.get();
    let bias = conv.bias.as_ref().map(|b| b.get());
    let (b_, ci, h, wi) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, cig, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let groups = ci / cig;
    let cog = co / groups;
    let (s, p) = (conv.stride, conv.padding);
    let oh = (h + 2 * p - kh) / s + 1;
    let ow = (wi + 2 * p - kw) / s + 1;
    let mut out = vec![0.0; b_ * co * oh * ow];
    for b in 0..b_ {
        for o in 0..co {
            let g = o / cog;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.as_ref().map_or(0.0, |bb| bb.data()[o]);
                    for cl in 0..cig {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * s + dy) as isize - p as isize;
                                let ix = (xo * s + dx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wi as isize {
                                    continue;
                                }
                                let c = g * cig + cl;
                                acc += x.data()[((b * ci + c) * h + iy as usize) * wi + ix as usize]
                                    * w.data()[((o * cig + cl) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((b * co + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::new(out, &[b_, co, oh, ow]).unwrap()
}

/// Nearest upsample by `factor`, cropped bottom/right to the target size.
pub fn naive_upsample_crop(x: &Tensor, factor: usize, th: usize, tw: usize) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert!(h * factor >= th && w * factor >= tw);
    let mut out = vec![0.0; b * c * th * tw];
    for plane in 0..b * c {
        for y in 0..th {
            for xx in 0..tw {
                out[plane * th * tw + y * tw + xx] =
                    x.data()[plane * h * w + (y / factor) * w + xx / factor];
            }
        }
    }
    Tensor::new(out, &[b, c, th, tw]).unwrap()
}
