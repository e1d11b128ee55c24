use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::Dataset;
use super::float_model::{FloatLayer, FloatModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Fixed hyperparameters of the reference trainer.
pub const LEARNING_RATE: f64 = 0.05;
pub const BATCH_SIZE: usize = 16;

/// Trains a ReLU MLP with softmax cross-entropy and plain mini-batch SGD.
///
/// `topology` lists layer widths from input features to classes, e.g.
/// `[2, 16, 16, 4]`. Deterministic for a given seed.
pub fn train_reference_mlp<T: Scalar>(
    dataset: &Dataset,
    topology: &[usize],
    epochs: usize,
    seed: u64,
) -> Result<FloatModel<T>> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if topology.len() < 2 {
        return Err(Error::InvalidArgument("topology needs input and output widths".into()));
    }
    if topology[0] != dataset.feature_width() {
        return Err(Error::InvalidArgument(format!(
            "topology input width {} does not match {} features",
            topology[0],
            dataset.feature_width()
        )));
    }
    if *topology.last().expect("len >= 2") != dataset.class_count {
        return Err(Error::InvalidArgument(format!(
            "topology must end in {} class units",
            dataset.class_count
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dense: Vec<(Vec<T>, Vec<T>)> = topology
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            let weights = (0..fan_in * fan_out)
                .map(|_| T::lit(rng.gen_range(-limit..limit)))
                .collect();
            (weights, vec![T::zero(); fan_out])
        })
        .collect();

    let inputs: Vec<Vec<T>> = dataset
        .samples
        .iter()
        .map(|s| s.features.iter().map(|&f| T::lit(f)).collect())
        .collect();
    let lr = T::lit(LEARNING_RATE);
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = T::zero();
        for batch in order.chunks(BATCH_SIZE) {
            let mut grads: Vec<(Vec<T>, Vec<T>)> = dense
                .iter()
                .map(|(w, b)| (vec![T::zero(); w.len()], vec![T::zero(); b.len()]))
                .collect();
            for &idx in batch {
                // forward, keeping every layer's post-activation output
                let mut acts = vec![inputs[idx].clone()];
                for (l, (w, b)) in dense.iter().enumerate() {
                    let x = acts.last().expect("input");
                    let out_f = b.len();
                    let in_f = x.len();
                    let mut z: Vec<T> = (0..out_f)
                        .map(|o| {
                            w[o * in_f..(o + 1) * in_f]
                                .iter()
                                .zip(x)
                                .fold(b[o], |acc, (&wi, &xi)| acc + wi * xi)
                        })
                        .collect();
                    if l + 1 < dense.len() {
                        z.iter_mut().for_each(|v| *v = v.max(T::zero()));
                    }
                    acts.push(z);
                }
                let logits = acts.last().expect("output");
                let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
                let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
                let total: T = exps.iter().copied().sum();
                let label = dataset.samples[idx].label;
                epoch_loss += -(exps[label] / total).ln();
                let mut delta: Vec<T> = exps
                    .iter()
                    .enumerate()
                    .map(|(c, &e)| e / total - if c == label { T::one() } else { T::zero() })
                    .collect();
                for l in (0..dense.len()).rev() {
                    let x = &acts[l];
                    let in_f = x.len();
                    let (gw, gb) = &mut grads[l];
                    for (o, &d) in delta.iter().enumerate() {
                        gb[o] += d;
                        for (g, &xi) in gw[o * in_f..(o + 1) * in_f].iter_mut().zip(x) {
                            *g += d * xi;
                        }
                    }
                    if l == 0 {
                        break;
                    }
                    let w = &dense[l].0;
                    delta = (0..in_f)
                        .map(|i| {
                            if x[i] <= T::zero() {
                                return T::zero();
                            }
                            delta
                                .iter()
                                .enumerate()
                                .map(|(o, &d)| d * w[o * in_f + i])
                                .sum()
                        })
                        .collect();
                }
            }
            let step = lr / T::lit(batch.len() as f64);
            for ((w, b), (gw, gb)) in dense.iter_mut().zip(&grads) {
                for (p, &g) in w.iter_mut().zip(gw).chain(b.iter_mut().zip(gb)) {
                    *p -= step * g;
                }
            }
        }
        if !epoch_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("loss became {epoch_loss}"),
            });
        }
    }

    let mut layers = Vec::new();
    let last = dense.len() - 1;
    for (l, (weights, bias)) in dense.into_iter().enumerate() {
        layers.push(FloatLayer::Dense {
            in_features: topology[l],
            out_features: topology[l + 1],
            weights,
            bias,
        });
        if l < last {
            layers.push(FloatLayer::Relu);
        }
    }
    let mut model = FloatModel {
        name: format!(
            "mlp-{}",
            topology.iter().map(ToString::to_string).collect::<Vec<_>>().join("-")
        ),
        input_shape: vec![topology[0]],
        class_count: dataset.class_count,
        layers,
        metadata: BTreeMap::new(),
    };
    model.validate()?;
    let train_acc = model.accuracy(dataset);
    let meta = &mut model.metadata;
    meta.insert("trainer".into(), "minibatch-sgd-softmax-ce".into());
    meta.insert("learning_rate".into(), LEARNING_RATE.to_string());
    meta.insert("batch_size".into(), BATCH_SIZE.to_string());
    meta.insert("epochs".into(), epochs.to_string());
    meta.insert("seed".into(), seed.to_string());
    meta.insert("train_accuracy".into(), format!("{train_acc:.6}"));
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{gaussian_blobs, BlobSpec, Dataset, Sample, Split};

    fn two_clusters() -> Dataset {
        let samples = (0..40)
            .map(|i| {
                let label = i % 2;
                let offset = if label == 0 { -2.0 } else { 2.0 };
                let jitter = (i as f64 * 0.37).sin() * 0.5;
                Sample {
                    features: vec![offset + jitter, offset - jitter],
                    label,
                }
            })
            .collect();
        Dataset::new(Split::Train, 2, samples).unwrap()
    }

    #[test]
    fn separable_single_layer_fits() {
        let data = two_clusters();
        let model = train_reference_mlp::<f64>(&data, &[2, 2], 50, 1).unwrap();
        assert!(model.accuracy(&data) >= 0.99);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let (train, _) = gaussian_blobs(BlobSpec::PLANAR_4, 5).unwrap();
        let a = train_reference_mlp::<f32>(&train, &[2, 8, 4], 5, 11).unwrap();
        let b = train_reference_mlp::<f32>(&train, &[2, 8, 4], 5, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn blobs_mlp_generalizes() {
        let (train, test) = gaussian_blobs(BlobSpec::PLANAR_4, 42).unwrap();
        let model = train_reference_mlp::<f64>(&train, &[2, 16, 16, 4], 60, 42).unwrap();
        assert!(model.accuracy(&train) >= 0.90);
        assert!(model.accuracy(&test) >= 0.90);
    }

    #[test]
    fn topology_must_match_classes() {
        let data = two_clusters();
        assert!(train_reference_mlp::<f64>(&data, &[2, 3], 1, 0).is_err());
        assert!(train_reference_mlp::<f64>(&data, &[3, 2], 1, 0).is_err());
    }
}
