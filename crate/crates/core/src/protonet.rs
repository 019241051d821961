//! Vanilla prototypes and the distance-softmax classifier.

use serde::{Deserialize, Serialize};

use crate::data::Episode;
use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, softmax, sq_dist_values, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrototypeKind {
    Vanilla,
    Overfitted,
    Diffused,
}

/// `N × D` prototypes; row `i` belongs to episode label `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet<T> {
    pub kind: PrototypeKind,
    pub vectors: Tensor<T>,
}

impl<T: Real> PrototypeSet<T> {
    pub fn new(kind: PrototypeKind, vectors: Tensor<T>) -> Result<Self> {
        vectors.dims2()?;
        if !vectors.is_finite() {
            return Err(Error::NonFinite(format!("{kind:?} prototypes")));
        }
        Ok(PrototypeSet { kind, vectors })
    }

    pub fn n_way(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }
}

/// Distance used by the classifier. Probabilities are `softmax(−d)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Metric {
    SquaredEuclidean,
    /// `d = −temperature · cos(q, z)`.
    Cosine {
        temperature: f64,
    },
}

impl Default for Metric {
    fn default() -> Self {
        Metric::SquaredEuclidean
    }
}

impl Metric {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Metric::Cosine { temperature } if !(temperature > 0.0) => Err(Error::InvalidArgument(format!(
                "cosine temperature must be positive, got {temperature}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Metric::SquaredEuclidean => "sqeuclidean".into(),
            Metric::Cosine { temperature } => format!("cosine:{temperature}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let m = match s {
            "sqeuclidean" | "squared_euclidean" | "euclidean" => Metric::SquaredEuclidean,
            "cosine" => Metric::Cosine { temperature: 10.0 },
            _ => match s.strip_prefix("cosine:") {
                Some(t) => Metric::Cosine {
                    temperature: t
                        .parse()
                        .map_err(|_| Error::Config(format!("bad cosine temperature {t:?}")))?,
                },
                None => return Err(Error::Config(format!("unknown metric {s:?}"))),
            },
        };
        m.validate()?;
        Ok(m)
    }
}

/// Mean of each class's `k_shot` support rows (class-major layout).
pub fn prototypes_from_support<T: Real>(support: &Tensor<T>, n_way: usize, k_shot: usize) -> Result<Tensor<T>> {
    let (rows, d) = support.dims2()?;
    if k_shot == 0 || rows != n_way * k_shot {
        return Err(Error::InvalidArgument(format!(
            "{rows} support rows cannot form {n_way} classes of {k_shot} shots"
        )));
    }
    let mut out = vec![T::zero(); n_way * d];
    let inv = T::one() / T::from_usize(k_shot);
    for c in 0..n_way {
        let dst = &mut out[c * d..(c + 1) * d];
        for k in 0..k_shot {
            for (o, &v) in dst.iter_mut().zip(support.row(c * k_shot + k)) {
                *o = *o + v;
            }
        }
        dst.iter_mut().for_each(|o| *o = *o * inv);
    }
    Tensor::new(vec![n_way, d], out)
}

pub fn vanilla_prototypes<T: Real>(episode: &Episode) -> Result<PrototypeSet<T>> {
    let v = prototypes_from_support(&episode.support_as::<T>(), episode.n_way, episode.k_shot)?;
    PrototypeSet::new(PrototypeKind::Vanilla, v)
}

/// Logits `−d(q, z)` for every query row against every prototype.
pub fn logits<T: Real>(queries: &Tensor<T>, protos: &Tensor<T>, metric: Metric) -> Result<Tensor<T>> {
    let (m, d) = queries.dims2()?;
    let (n, d2) = protos.dims2()?;
    if d != d2 {
        return Err(Error::ShapeMismatch {
            op: "logits",
            lhs: queries.shape().to_vec(),
            rhs: protos.shape().to_vec(),
        });
    }
    let data = match metric {
        Metric::SquaredEuclidean => sq_dist_values(queries.data(), protos.data(), m, n, d)
            .into_iter()
            .map(|x| -x)
            .collect(),
        Metric::Cosine { temperature } => {
            metric.validate()?;
            let unit = |x: &Tensor<T>| -> Result<Vec<T>> {
                let mut out = x.data().to_vec();
                for row in out.chunks_mut(d) {
                    let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if norm == T::zero() {
                        return Err(Error::InvalidArgument("zero-norm vector under cosine metric".into()));
                    }
                    row.iter_mut().for_each(|v| *v = *v / norm);
                }
                Ok(out)
            };
            let (q, z) = (unit(queries)?, unit(protos)?);
            let tau = T::from_f64(temperature);
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    let dot: T = q[i * d..(i + 1) * d]
                        .iter()
                        .zip(&z[j * d..(j + 1) * d])
                        .map(|(&a, &b)| a * b)
                        .sum();
                    out[i * n + j] = tau * dot;
                }
            }
            out
        }
    };
    Tensor::new(vec![m, n], data)
}

/// Class probabilities for a batch of queries, `[M × N]`.
pub fn classify_batch<T: Real>(queries: &Tensor<T>, protos: &PrototypeSet<T>, metric: Metric) -> Result<Tensor<T>> {
    softmax(&logits(queries, &protos.vectors, metric)?, 1)
}

/// Class probabilities for one query vector.
pub fn classify<T: Real>(query: &[T], protos: &PrototypeSet<T>, metric: Metric) -> Result<Vec<T>> {
    let q = Tensor::new(vec![1, query.len()], query.to_vec())?;
    Ok(classify_batch(&q, protos, metric)?.into_vec())
}

/// `−log softmax(logits)[label]` in fused log-sum-exp form.
pub fn cross_entropy<T: Real>(logits: &[T], label: usize) -> Result<T> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let (lse, _) = log_sum_exp(logits);
    Ok(lse - logits[label])
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict<T: Real>(probs: &Tensor<T>) -> Vec<usize> {
    let n = probs.last_dim();
    probs.data().chunks(n).map(argmax).collect()
}

/// Query accuracy of `protos` on `episode`.
pub fn evaluate_accuracy<T: Real>(episode: &Episode, protos: &PrototypeSet<T>, metric: Metric) -> Result<f64> {
    let probs = classify_batch(&episode.query_as::<T>(), protos, metric)?;
    episode.score(&predict(&probs))
}

/// Logits on the tape, for losses that train through the classifier.
pub fn logits_var<T: Real>(tape: &mut Tape<T>, queries: Var, protos: Var, metric: Metric) -> Result<Var> {
    match metric {
        Metric::SquaredEuclidean => {
            let d = tape.sq_dist(queries, protos)?;
            Ok(tape.neg(d))
        }
        Metric::Cosine { temperature } => {
            metric.validate()?;
            let q = tape.normalize_rows(queries)?;
            let z = tape.normalize_rows(protos)?;
            let c = tape.matmul_nt(q, z)?;
            Ok(tape.scale(c, T::from_f64(temperature)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, sample_episode, SyntheticConfig};
    use crate::numerics::RngStream;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn protos(rows: &[Vec<f64>]) -> PrototypeSet<f64> {
        PrototypeSet::new(PrototypeKind::Vanilla, Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn mean_of_support_rows() {
        let s = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let p = prototypes_from_support(&s, 1, 2).unwrap();
        assert_eq!(p.data(), &[2.0, 3.0]);
        let one = prototypes_from_support(&s, 2, 1).unwrap();
        assert_eq!(one, s);
        assert!(prototypes_from_support(&s, 1, 0).is_err());
    }

    #[test]
    fn prototypes_match_summation_oracle() {
        let mut rng = RngStream::new(11);
        let (n, k, d) = (3, 5, 8);
        let s: Tensor<f64> = rng.gaussian(&[n * k, d]);
        let p = prototypes_from_support(&s, n, k).unwrap();
        for c in 0..n {
            for j in 0..d {
                let mut total = 0.0;
                for i in 0..k {
                    total += s.data()[(c * k + i) * d + j];
                }
                assert_abs_diff_eq!(p.get(c, j), total / k as f64, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn two_way_hand_example() {
        let p = classify(
            &[0.0, 0.0],
            &protos(&[vec![0.0, 0.0], vec![2.0, 0.0]]),
            Metric::SquaredEuclidean,
        )
        .unwrap();
        assert_abs_diff_eq!(p[0], 0.982_013_790_037_908_4, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.017_986_209_962_091_56, epsilon = 1e-15);
    }

    #[test]
    fn equidistant_query_is_uniform() {
        let p = classify(
            &[0.0, 0.0],
            &protos(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]),
            Metric::SquaredEuclidean,
        )
        .unwrap();
        for v in p {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn cosine_rejects_zero_vectors() {
        let m = Metric::Cosine { temperature: 1.0 };
        assert!(classify(&[0.0, 0.0], &protos(&[vec![1.0, 0.0]]), m).is_err());
        assert!(Metric::parse("cosine:0").is_err());
        assert_eq!(
            Metric::parse("cosine:2.5").unwrap(),
            Metric::Cosine { temperature: 2.5 }
        );
    }

    #[test]
    fn cross_entropy_edge_cases() {
        assert_eq!(
            cross_entropy(&[0.0, f64::NEG_INFINITY, f64::NEG_INFINITY], 0).unwrap(),
            0.0
        );
        assert_abs_diff_eq!(cross_entropy(&[0.3; 5], 2).unwrap(), 5f64.ln(), epsilon = 1e-15);
        assert!(cross_entropy(&[0.0, 1.0], 2).is_err());
        // large logits would overflow a naive exp
        assert_abs_diff_eq!(cross_entropy(&[1000.0, 0.0], 0).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_matches_log_then_index() {
        let mut rng = RngStream::new(4);
        for _ in 0..100 {
            let l: Tensor<f64> = rng.gaussian(&[7]);
            let label = rng.below(7);
            let z: f64 = l.data().iter().map(|x| x.exp()).sum();
            let naive = -(l.data()[label].exp() / z).ln();
            assert_abs_diff_eq!(cross_entropy(l.data(), label).unwrap(), naive, epsilon = 1e-10);
        }
    }

    #[test]
    fn ambiguous_query_breaks_tie_to_class_zero() {
        let support = Tensor::from_rows(&[vec![0.0f32, 0.0], vec![2.0, 0.0]]).unwrap();
        // label 0 query is clearly class 0; label 1 query sits exactly midway
        let query = Tensor::from_rows(&[vec![0.0f32, 0.1], vec![1.0, 0.0]]).unwrap();
        let ep = crate::data::Episode::from_rows(2, 1, 1, support, query).unwrap();
        let p = vanilla_prototypes::<f64>(&ep).unwrap();
        assert_eq!(evaluate_accuracy(&ep, &p, Metric::SquaredEuclidean).unwrap(), 0.5);
    }

    #[test]
    fn separable_episode_is_perfect() {
        let ds = generate_synthetic(&SyntheticConfig {
            std: 0.0,
            n_classes: 10,
            samples_per_class: 20,
            ..Default::default()
        })
        .unwrap();
        let ep = sample_episode(&ds, 5, 1, 15, 8).unwrap();
        let p = vanilla_prototypes::<f64>(&ep).unwrap();
        assert_eq!(evaluate_accuracy(&ep, &p, Metric::SquaredEuclidean).unwrap(), 1.0);
    }

    #[test]
    fn permuted_prototypes_with_permuted_labels_score_the_same() {
        let ds = generate_synthetic(&SyntheticConfig {
            n_classes: 10,
            samples_per_class: 20,
            std: 0.4,
            ..Default::default()
        })
        .unwrap();
        let ep = sample_episode(&ds, 5, 1, 10, 21).unwrap();
        let p = vanilla_prototypes::<f64>(&ep).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| p.vectors.row(i).to_vec()).collect();
        let permuted = Tensor::from_rows(&rows).unwrap();
        let q = ep.query_as::<f64>();
        let a = predict(&classify_batch(&q, &p, Metric::SquaredEuclidean).unwrap());
        let b = predict(&softmax(&logits(&q, &permuted, Metric::SquaredEuclidean).unwrap(), 1).unwrap());
        let labels = ep.query_labels();
        let acc_a = a.iter().zip(&labels).filter(|(p, l)| p == l).count();
        let acc_b = b.iter().zip(&labels).filter(|(&p, &l)| perm[p] == l).count();
        assert_eq!(acc_a, acc_b);
    }

    proptest! {
        #[test]
        fn shift_invariance(d in prop::collection::vec(-20.0f64..20.0, 2..8), c in -50.0f64..50.0) {
            let shifted: Vec<f64> = d.iter().map(|x| x + c).collect();
            let a = softmax(&Tensor::new(vec![d.len()], d.clone()).unwrap(), 0).unwrap();
            let b = softmax(&Tensor::new(vec![d.len()], shifted.clone()).unwrap(), 0).unwrap();
            prop_assert_eq!(argmax(a.data()), argmax(b.data()));
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            prop_assert!((a.sum() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn support_order_does_not_matter(seed in 0u64..1000) {
            let mut rng = RngStream::new(seed);
            let s: Tensor<f64> = rng.gaussian(&[4, 3]);
            let order = rng.choose(&[0usize, 1, 2, 3], 4);
            let rows: Vec<Vec<f64>> = order.iter().map(|&i| s.row(i).to_vec()).collect();
            let a = prototypes_from_support(&s, 1, 4).unwrap();
            let b = prototypes_from_support(&Tensor::from_rows(&rows).unwrap(), 1, 4).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn cross_entropy_is_non_negative(l in prop::collection::vec(-30.0f64..30.0, 2..6), pick in 0usize..6) {
            let label = pick % l.len();
            prop_assert!(cross_entropy(&l, label).unwrap() >= 0.0);
        }
    }
}
