//! Interval evaluation of a network suffix.
//!
//! Every layer is monotone in each input (affine accumulation, monotone
//! requantization, ReLU, max), so propagating per-activation `[lo, hi]`
//! bounds gives sound bounds on every reachable output.

use super::layer::Layer;
use super::network::QNetwork;

/// Bounds on the network output for any activation between `lo` and `hi`
/// (elementwise) entering layer `start`. `None` when an accumulator could
/// leave the int32 range, where wrapping would break monotonicity.
pub(crate) fn resume_bounds(net: &QNetwork, start: usize, mut lo: Vec<i8>, mut hi: Vec<i8>) -> Option<(Vec<i8>, Vec<i8>)> {
    for (i, layer) in net.layers().iter().enumerate().skip(start) {
        let shape = net.shape_at(i);
        match layer {
            Layer::FullyConnected(fc) => {
                let mut nlo = Vec::with_capacity(fc.out_features);
                let mut nhi = Vec::with_capacity(fc.out_features);
                for o in 0..fc.out_features {
                    let (mut a, mut b) = (i64::from(fc.bias[o]), i64::from(fc.bias[o]));
                    for ((&w, &l), &h) in fc.row(o).iter().zip(&lo).zip(&hi) {
                        let (p, q) = (i64::from(w) * i64::from(l), i64::from(w) * i64::from(h));
                        a += p.min(q);
                        b += p.max(q);
                    }
                    let (a, b) = (narrow(a)?, narrow(b)?);
                    let m = net.multiplier(i);
                    nlo.push(fc.grids[o].requantize(a, m));
                    nhi.push(fc.grids[o].requantize(b, m));
                }
                (lo, hi) = (nlo, nhi);
            }
            Layer::Conv2d(conv) => {
                let (h, w) = (shape[1], shape[2]);
                let (oh, ow) = conv.output_hw(h, w).expect("validated conv geometry");
                let m = net.multiplier(i);
                let mut nlo = Vec::with_capacity(conv.out_channels * oh * ow);
                let mut nhi = Vec::with_capacity(conv.out_channels * oh * ow);
                for oc in 0..conv.out_channels {
                    let filter = conv.filter(oc);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let (mut a, mut b) = (i64::from(conv.bias[oc]), i64::from(conv.bias[oc]));
                            conv.for_each_tap((h, w), (oy, ox), |src, k| {
                                let wk = i64::from(filter[k]);
                                let (p, q) = (wk * i64::from(lo[src]), wk * i64::from(hi[src]));
                                a += p.min(q);
                                b += p.max(q);
                            });
                            let (a, b) = (narrow(a)?, narrow(b)?);
                            nlo.push(conv.grids[oc].requantize(a, m));
                            nhi.push(conv.grids[oc].requantize(b, m));
                        }
                    }
                }
                (lo, hi) = (nlo, nhi);
            }
            Layer::Relu => {
                for v in lo.iter_mut().chain(hi.iter_mut()) {
                    *v = (*v).max(0);
                }
            }
            Layer::MaxPool2d(pool) => {
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = pool.output_hw(h, w).expect("validated pool geometry");
                let mut nlo = Vec::with_capacity(c * oh * ow);
                let mut nhi = Vec::with_capacity(c * oh * ow);
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let (mut a, mut b) = (i8::MIN, i8::MIN);
                            for ky in 0..pool.window {
                                for kx in 0..pool.window {
                                    let idx = (ch * h + oy * pool.stride + ky) * w + ox * pool.stride + kx;
                                    a = a.max(lo[idx]);
                                    b = b.max(hi[idx]);
                                }
                            }
                            nlo.push(a);
                            nhi.push(b);
                        }
                    }
                }
                (lo, hi) = (nlo, nhi);
            }
            Layer::Flatten => {}
        }
    }
    Some((lo, hi))
}

fn narrow(x: i64) -> Option<i32> {
    i32::try_from(x).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnn::{FullyConnected, MaxPool2d, NoHook, Conv2d};
    use proptest::prelude::*;

    fn net() -> QNetwork {
        let conv = Conv2d::new(1, 2, (2, 2), 1, 0, vec![3, -4, 6, 2, -5, 4, -2, 7], vec![4, -2], 0.05, 0.1);
        QNetwork::new("i", vec![1, 4, 4], 0.1, 3, vec![
            Layer::Conv2d(conv),
            Layer::Relu,
            Layer::MaxPool2d(MaxPool2d { window: 2, stride: 1 }),
            Layer::Flatten,
            Layer::FullyConnected(FullyConnected::new(8, 3, (0..24).map(|i| (i * 37 % 61 - 30) as i8).collect(), vec![5, -5, 0], 0.02, 0.2)),
        ])
        .unwrap()
    }

    proptest! {
        #[test]
        fn bounds_contain_every_point(base in prop::collection::vec(any::<i8>(), 16), unit in 0usize..16, a in any::<i8>(), b in any::<i8>()) {
            let net = net();
            let (l, h) = (a.min(b), a.max(b));
            let mut lo = base.clone();
            let mut hi = base.clone();
            lo[unit] = l;
            hi[unit] = h;
            let (olo, ohi) = resume_bounds(&net, 0, lo, hi).unwrap();
            for v in l..=h {
                let mut x = base.clone();
                x[unit] = v;
                let out = net.resume(0, x, &mut NoHook).logits;
                for (k, &y) in out.iter().enumerate() {
                    prop_assert!(i32::from(olo[k]) <= y && y <= i32::from(ohi[k]));
                }
            }
        }
    }
}
