use crate::error::{Error, Result};
use crate::qnn::{resume_bounds, NeuronId, NoHook, QNetwork, QTensor, Trace};

/// Smallest positive and closest-to-zero negative perturbation of a neuron's
/// output that changes the network's classification.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BoundsResult {
    /// In `[1, 127]` when present.
    pub r_upper: Option<i32>,
    /// In `[-128, -1]` when present.
    pub r_lower: Option<i32>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BoundsMethod {
    /// Exhaustive scan of every perturbation.
    #[default]
    Scan,
    /// Branch and bound: perturbation brackets are halved and discarded
    /// when interval bounds on the logits prove no member misclassifies.
    /// Always returns the scan's answer.
    Bisect,
}

/// Brackets narrower than this are scanned directly.
const SCAN_BELOW: i32 = 4;

/// Evaluates one neuron on one input starting from a cached fault-free trace.
pub(crate) struct Prober<'a> {
    net: &'a QNetwork,
    trace: &'a Trace,
    neuron: NeuronId,
    golden: usize,
    observed: i32,
}

impl<'a> Prober<'a> {
    pub(crate) fn new(net: &'a QNetwork, trace: &'a Trace, neuron: NeuronId, golden: usize) -> Self {
        let observed = i32::from(trace.layer_output(neuron.layer)[neuron.unit]);
        Self {
            net,
            trace,
            neuron,
            golden,
            observed,
        }
    }

    /// Does adding `delta` (with saturation) misclassify?
    pub(crate) fn flips(&self, delta: i32) -> bool {
        let start = self.net.block_end(self.neuron.layer);
        let mut act = self.trace.stages[start].clone();
        act[self.neuron.unit] = (self.observed + delta).clamp(-128, 127) as i8;
        self.net.resume(start, act, &mut NoHook).predicted_class != self.golden
    }

    /// Largest useful |delta| on each side: beyond it the clamp repeats values.
    fn reach(&self, positive: bool) -> i32 {
        if positive {
            (127 - self.observed).min(127)
        } else {
            (self.observed + 128).min(128)
        }
    }

    fn scan(&self, positive: bool) -> Option<i32> {
        let sign = if positive { 1 } else { -1 };
        (1..=self.reach(positive)).map(|m| sign * m).find(|&d| self.flips(d))
    }

    /// Can no perturbation with magnitude in `[a, b]` change the class?
    /// Decided from interval bounds on the logits, so `true` is a proof.
    fn certified_safe(&self, sign: i32, a: i32, b: i32) -> bool {
        let start = self.net.block_end(self.neuron.layer);
        let v = |m: i32| (self.observed + sign * m).clamp(-128, 127) as i8;
        let (l, h) = if sign > 0 { (v(a), v(b)) } else { (v(b), v(a)) };
        let mut lo = self.trace.stages[start].clone();
        let mut hi = lo.clone();
        lo[self.neuron.unit] = l;
        hi[self.neuron.unit] = h;
        let Some((lo, hi)) = resume_bounds(self.net, start, lo, hi) else {
            return false;
        };
        let g = self.golden;
        // Ties go to the lowest index, so earlier classes must stay strictly below.
        (0..lo.len()).filter(|&c| c != g).all(|c| if c < g { lo[g] > hi[c] } else { lo[g] >= hi[c] })
    }

    /// First misclassifying magnitude in `[a, b]`, skipping certified brackets.
    fn search(&self, sign: i32, a: i32, b: i32) -> Option<i32> {
        if b - a < SCAN_BELOW {
            return (a..=b).map(|m| sign * m).find(|&d| self.flips(d));
        }
        if self.certified_safe(sign, a, b) {
            return None;
        }
        let mid = a + (b - a) / 2;
        self.search(sign, a, mid).or_else(|| self.search(sign, mid + 1, b))
    }

    fn bisect(&self, positive: bool) -> Option<i32> {
        let reach = self.reach(positive);
        if reach == 0 {
            return None;
        }
        self.search(if positive { 1 } else { -1 }, 1, reach)
    }

    pub(crate) fn bounds(&self, method: BoundsMethod) -> BoundsResult {
        match method {
            BoundsMethod::Scan => BoundsResult {
                r_upper: self.scan(true),
                r_lower: self.scan(false),
            },
            BoundsMethod::Bisect => BoundsResult {
                r_upper: self.bisect(true),
                r_lower: self.bisect(false),
            },
        }
    }
}

/// Misclassification bounds of `neuron` for `input`, with the golden class
/// taken from the same fault-free pass.
pub fn misclassification_bounds(
    net: &QNetwork,
    input: &QTensor,
    neuron: NeuronId,
    method: BoundsMethod,
) -> Result<BoundsResult> {
    net.validate_neuron(neuron)?;
    let trace = net.trace(input)?;
    let golden = crate::qnn::argmax(trace.output());
    Ok(Prober::new(net, &trace, neuron, golden).bounds(method))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Positive,
    Negative,
}

/// How negative-side perturbations map to bit positions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NegativeBitRule {
    /// `floor(log2 |r|) + 1`, the same as the positive side.
    #[default]
    Symmetric,
    /// `floor(log2 |r|)` without the `+ 1`, clamped into range.
    Unshifted,
}

/// Bit position in `[1, 8]` whose flip first produces a perturbation of
/// magnitude `|r|`: `floor(log2 |r|) + 1`.
pub fn bit_index(r: i32, side: Side) -> Result<u8> {
    bit_index_with(r, side, NegativeBitRule::Symmetric)
}

pub fn bit_index_with(r: i32, side: Side, rule: NegativeBitRule) -> Result<u8> {
    if r == 0 {
        return Err(Error::InvalidArgument("perturbation must be nonzero".into()));
    }
    let magnitude = r.unsigned_abs();
    if magnitude > 128 {
        return Err(Error::InvalidArgument(format!("perturbation {r} exceeds int8 range")));
    }
    let log = magnitude.ilog2() as i32;
    let bit = match (side, rule) {
        (Side::Negative, NegativeBitRule::Unshifted) => log,
        _ => log + 1,
    };
    Ok(bit.clamp(1, 8) as u8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnn::{FullyConnected, Layer};

    /// 1 input -> 1 hidden (identity) -> 2 logits; class 1 wins once the
    /// hidden value exceeds 10.
    fn threshold_net() -> QNetwork {
        QNetwork::new(
            "thr",
            vec![1],
            1.0,
            2,
            vec![
                Layer::FullyConnected(FullyConnected::new(1, 1, vec![1], vec![0], 1.0, 1.0)),
                Layer::FullyConnected(FullyConnected::new(1, 2, vec![0, 1], vec![10, 0], 1.0, 1.0)),
            ],
        )
        .unwrap()
    }

    fn exhaustive_oracle(net: &QNetwork, input: &QTensor, neuron: NeuronId) -> BoundsResult {
        let golden = net.forward(input).unwrap().predicted_class;
        let observed = net.forward_with_taps(input, &[]).unwrap().taps
            .iter()
            .find(|t| t.neuron == neuron)
            .unwrap()
            .observed_value;
        let flips = |d: i32| {
            let v = (i32::from(observed) + d).clamp(-128, 127) as i8;
            let o = crate::qnn::TapOverride { neuron, value: v };
            net.forward_with_taps(input, &[o]).unwrap().inference.predicted_class != golden
        };
        BoundsResult {
            r_upper: (1..=127).find(|&d| flips(d)),
            r_lower: (1..=128).map(|m| -m).find(|&d| flips(d)),
        }
    }

    #[test]
    fn threshold_crossing_found_exactly() {
        let net = threshold_net();
        let x = QTensor::new(vec![1], vec![8], 1.0).unwrap();
        let n = NeuronId::new(0, 0);
        let oracle = exhaustive_oracle(&net, &x, n);
        assert_eq!(oracle.r_upper, Some(3));
        for m in [BoundsMethod::Scan, BoundsMethod::Bisect] {
            assert_eq!(misclassification_bounds(&net, &x, n, m).unwrap(), oracle);
        }
    }

    /// Class 1 wins only while the hidden value lies in 21..=23.
    fn island_net() -> QNetwork {
        QNetwork::new(
            "island",
            vec![1],
            1.0,
            2,
            vec![
                Layer::FullyConnected(FullyConnected::new(1, 1, vec![1], vec![0], 1.0, 1.0)),
                Layer::FullyConnected(FullyConnected::new(1, 2, vec![1, 1], vec![-20, -22], 1.0, 1.0)),
                Layer::Relu,
                Layer::FullyConnected(FullyConnected::new(2, 2, vec![0, 0, 2, -4], vec![1, 0], 1.0, 1.0)),
            ],
        )
        .unwrap()
    }

    #[test]
    fn bisection_finds_narrow_flip_island() {
        let net = island_net();
        let x = QTensor::new(vec![1], vec![0], 1.0).unwrap();
        let n = NeuronId::new(0, 0);
        let oracle = exhaustive_oracle(&net, &x, n);
        assert_eq!(oracle.r_upper, Some(21));
        assert_eq!(misclassification_bounds(&net, &x, n, BoundsMethod::Bisect).unwrap(), oracle);
    }

    proptest::proptest! {
        #[test]
        fn bisection_equals_scan(
            w1 in proptest::collection::vec(-60i8..60, 6),
            w2 in proptest::collection::vec(-60i8..60, 9),
            w3 in proptest::collection::vec(-60i8..60, 9),
            b in proptest::collection::vec(-300i32..300, 9),
            x in proptest::collection::vec(proptest::num::i8::ANY, 2),
        ) {
            let fc = |i, o, w: &[i8], b: &[i32]| Layer::FullyConnected(FullyConnected::new(i, o, w.to_vec(), b.to_vec(), 0.02, 0.1));
            let net = QNetwork::new("p", vec![2], 0.1, 3, vec![
                fc(2, 3, &w1, &b[0..3]),
                Layer::Relu,
                fc(3, 3, &w2, &b[3..6]),
                Layer::Relu,
                fc(3, 3, &w3, &b[6..9]),
            ]).unwrap();
            let x = QTensor::new(vec![2], x, 0.1).unwrap();
            for n in net.neurons().collect::<Vec<_>>() {
                let scan = misclassification_bounds(&net, &x, n, BoundsMethod::Scan).unwrap();
                let bis = misclassification_bounds(&net, &x, n, BoundsMethod::Bisect).unwrap();
                proptest::prop_assert_eq!(scan, bis);
            }
        }
    }

    #[test]
    fn zero_influence_neuron_has_no_bounds() {
        let net = QNetwork::new(
            "dead",
            vec![1],
            1.0,
            2,
            vec![
                Layer::FullyConnected(FullyConnected::new(1, 1, vec![1], vec![0], 1.0, 1.0)),
                Layer::FullyConnected(FullyConnected::new(1, 2, vec![0, 0], vec![1, 0], 1.0, 1.0)),
            ],
        )
        .unwrap();
        let x = QTensor::new(vec![1], vec![8], 1.0).unwrap();
        let b = misclassification_bounds(&net, &x, NeuronId::new(0, 0), BoundsMethod::Scan).unwrap();
        assert_eq!(b, BoundsResult::default());
    }

    #[test]
    fn bit_index_examples() {
        assert_eq!(bit_index(1, Side::Positive).unwrap(), 1);
        assert_eq!(bit_index(64, Side::Positive).unwrap(), 7);
        assert_eq!(bit_index(127, Side::Positive).unwrap(), 7);
        assert_eq!(bit_index(-8, Side::Negative).unwrap(), 4);
        assert_eq!(bit_index(-128, Side::Negative).unwrap(), 8);
        assert_eq!(bit_index_with(-8, Side::Negative, NegativeBitRule::Unshifted).unwrap(), 3);
        assert_eq!(bit_index_with(-1, Side::Negative, NegativeBitRule::Unshifted).unwrap(), 1);
        assert!(bit_index(0, Side::Positive).is_err());
    }

    #[test]
    fn bit_index_covers_int8_range() {
        for r in 1..=127 {
            let b = bit_index(r, Side::Positive).unwrap();
            // flipping bit b-1 (0-based) adds 2^(b-1) <= r < 2^b
            assert!((1i32 << (b - 1)) <= r && r < (1i32 << b));
        }
    }
}
