//! Dataset handling: binary/CSV formats, missing-value policy, z-score
//! normalization, chronological splitting with window extraction, the
//! distance-based pre-defined adjacency, and a planted-graph synthesizer for
//! desk-scale verification.

mod csvio;
mod stlg;
mod synthetic;

pub use csvio::{
    convert_csv_to_stlg, load_dense_csv, load_triplets, save_dense_csv, save_triplets,
};
pub use stlg::{load_dataset, save_dataset};
pub use synthetic::{generate_synthetic, SynthParams};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

/// How non-finite readings are repaired at load time.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NanPolicy {
    /// Replace a gap with the last finite value of the same node/feature;
    /// gaps before the first finite value become 0. Preserves the scale of
    /// sensors that drop out transiently.
    #[default]
    CarryForward,
    /// Replace every gap with 0.
    ZeroFill,
}

/// A multivariate sensor series, time-outermost: `values[(t*M + m)*F + f]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficSeries {
    pub num_nodes: usize,
    pub num_features: usize,
    pub num_steps: usize,
    /// Row-major `[t][node][feature]`, always finite after construction.
    pub values: Vec<f64>,
    /// Sampling interval; 5-minute bins for the road datasets.
    pub interval_minutes: u32,
}

impl TrafficSeries {
    pub fn new(num_nodes: usize, num_features: usize, num_steps: usize, values: Vec<f64>) -> Result<Self> {
        let expect = num_nodes
            .checked_mul(num_features)
            .and_then(|x| x.checked_mul(num_steps))
            .ok_or_else(|| Error::Data("series dimensions overflow".into()))?;
        if values.len() != expect {
            return Err(Error::Data(format!(
                "series payload holds {} values but T*M*F = {}*{}*{} = {}",
                values.len(),
                num_steps,
                num_nodes,
                num_features,
                expect
            )));
        }
        Ok(TrafficSeries {
            num_nodes,
            num_features,
            num_steps,
            values,
            interval_minutes: 5,
        })
    }

    #[inline]
    pub fn get(&self, t: usize, m: usize, f: usize) -> f64 {
        self.values[(t * self.num_nodes + m) * self.num_features + f]
    }

    /// Repair non-finite readings in place. Fails if some node/feature
    /// channel has no finite reading at all.
    pub fn apply_nan_policy(&mut self, policy: NanPolicy) -> Result<()> {
        let (m_n, f_n) = (self.num_nodes, self.num_features);
        for m in 0..m_n {
            for f in 0..f_n {
                let mut any_finite = false;
                let mut last = 0.0f64;
                for t in 0..self.num_steps {
                    let idx = (t * m_n + m) * f_n + f;
                    let v = self.values[idx];
                    if v.is_finite() {
                        any_finite = true;
                        last = v;
                    } else {
                        self.values[idx] = match policy {
                            NanPolicy::CarryForward => last,
                            NanPolicy::ZeroFill => 0.0,
                        };
                    }
                }
                if !any_finite {
                    return Err(Error::Data(format!(
                        "node {m} feature {f} has no finite reading in any of {} steps",
                        self.num_steps
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Thresholded Gaussian kernel over road distances:
/// `A_ij = exp(-d_ij^2 / sigma^2)` when `d_ij <= kappa`, else 0. The zero
/// diagonal of a distance table therefore maps to `A_ii = 1`.
///
/// Unlisted pairs in a sparse distance CSV load as distance 0, i.e. weight 1;
/// distance tables are expected dense (every disconnected pair listed with a
/// distance beyond `kappa`).
pub fn build_predefined_adjacency(
    dist: &Tensor<f64>,
    sigma: f64,
    kappa: f64,
) -> Result<Tensor<f64>> {
    let shape = dist.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Data(format!(
            "distance table must be square, got {shape:?}"
        )));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    if kappa < 0.0 {
        return Err(Error::Config(format!(
            "kappa must be nonnegative, got {kappa}"
        )));
    }
    let m = shape[0];
    for i in 0..m {
        let d_ii = dist.get2(i, i);
        if d_ii != 0.0 {
            return Err(Error::Data(format!(
                "distance table diagonal must be zero, entry ({i},{i}) = {d_ii}"
            )));
        }
    }
    let mut adj = Tensor::zeros(&[m, m]);
    for i in 0..m {
        for j in 0..m {
            let d = dist.get2(i, j);
            if d < 0.0 {
                return Err(Error::Data(format!(
                    "negative distance {d} at ({i},{j})"
                )));
            }
            if d <= kappa {
                adj.set2(i, j, (-(d * d) / (sigma * sigma)).exp());
            }
        }
    }
    Ok(adj)
}

/// Per-node-per-feature z-score statistics fitted on the training split.
#[derive(Clone, Debug)]
pub struct Normalizer {
    num_nodes: usize,
    num_features: usize,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Normalizer {
    /// Fit over time steps `[0, t_end)`.
    pub fn fit(series: &TrafficSeries, t_end: usize) -> Result<Self> {
        if t_end == 0 || t_end > series.num_steps {
            return Err(Error::Data(format!(
                "normalizer fit range [0,{t_end}) invalid for {} steps",
                series.num_steps
            )));
        }
        let (m_n, f_n) = (series.num_nodes, series.num_features);
        let mut mean = vec![0.0; m_n * f_n];
        let mut std = vec![0.0; m_n * f_n];
        let n = t_end as f64;
        for m in 0..m_n {
            for f in 0..f_n {
                let mut s = 0.0;
                for t in 0..t_end {
                    s += series.get(t, m, f);
                }
                let mu = s / n;
                let mut sq = 0.0;
                for t in 0..t_end {
                    let d = series.get(t, m, f) - mu;
                    sq += d * d;
                }
                mean[m * f_n + f] = mu;
                std[m * f_n + f] = (sq / n).sqrt().max(1e-8);
            }
        }
        Ok(Normalizer {
            num_nodes: m_n,
            num_features: f_n,
            mean,
            std,
        })
    }

    #[inline]
    pub fn transform(&self, m: usize, f: usize, x: f64) -> f64 {
        let i = m * self.num_features + f;
        (x - self.mean[i]) / self.std[i]
    }

    #[inline]
    pub fn inverse(&self, m: usize, f: usize, z: f64) -> f64 {
        let i = m * self.num_features + f;
        z * self.std[i] + self.mean[i]
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }
}

/// Windowing parameters for [`split_and_window`].
#[derive(Clone, Debug)]
pub struct SplitSpec {
    /// Chronological (train, val, test) fractions; must sum to 1.
    pub ratios: (f64, f64, f64),
    pub t_in: usize,
    pub t_out: usize,
    pub batch: usize,
    /// Which feature channel is predicted.
    pub target_feature: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            ratios: (0.7, 0.2, 0.1),
            t_in: 12,
            t_out: 12,
            batch: 64,
            target_feature: 0,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One minibatch of supervised windows.
pub struct WindowBatch<T> {
    /// z-scored inputs, shape (b, T_in, M, F).
    pub inputs: Tensor<T>,
    /// Raw-unit targets for metric computation, shape (b, T_out, M).
    pub targets_raw: Tensor<T>,
    /// z-scored targets for the training loss, shape (b, T_out, M).
    pub targets_z: Tensor<T>,
}

/// Split series plus everything needed to stream batches from it.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub series: TrafficSeries,
    /// z-scored copy of `series.values`, same layout.
    series_z: Vec<f64>,
    pub normalizer: Normalizer,
    pub spec: SplitSpec,
    /// Time ranges `[start, end)` for train/val/test.
    pub ranges: [(usize, usize); 3],
    /// Degenerate-but-legal conditions observed while splitting.
    pub warnings: Vec<String>,
}

/// Chronological 7:2:1-style split with z-scoring fitted on train only.
/// Windows never span a split boundary: a window starting at `t0` consumes
/// `[t0, t0 + T_in + T_out)` and must fit inside its split.
pub fn split_and_window(series: TrafficSeries, spec: SplitSpec) -> Result<Dataset> {
    let (r_tr, r_va, r_te) = spec.ratios;
    if r_tr < 0.0 || r_va < 0.0 || r_te < 0.0 || (r_tr + r_va + r_te - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "split ratios must be nonnegative and sum to 1, got {:?}",
            spec.ratios
        )));
    }
    if spec.t_in == 0 || spec.t_out == 0 {
        return Err(Error::Config(format!(
            "T_in and T_out must be >= 1, got {} and {}",
            spec.t_in, spec.t_out
        )));
    }
    if spec.batch == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if spec.target_feature >= series.num_features {
        return Err(Error::Config(format!(
            "target feature {} out of range for {} features",
            spec.target_feature, series.num_features
        )));
    }

    let t = series.num_steps;
    let n_train = (r_tr * t as f64).floor() as usize;
    let n_val = (r_va * t as f64).floor() as usize;
    let ranges = [
        (0, n_train),
        (n_train, n_train + n_val),
        (n_train + n_val, t),
    ];

    let window = spec.t_in + spec.t_out;
    if n_train < window {
        return Err(Error::Data(format!(
            "train split of {n_train} steps cannot hold one window of {window}"
        )));
    }
    let mut warnings = Vec::new();
    for (range, name) in ranges[1..].iter().zip(["validation", "test"]) {
        if range.1 - range.0 < window {
            warnings.push(format!(
                "{name} split has {} steps, fewer than one window of {window}; it will be empty",
                range.1 - range.0
            ));
        }
    }

    let normalizer = Normalizer::fit(&series, n_train)?;
    let (m_n, f_n) = (series.num_nodes, series.num_features);
    let mut series_z = vec![0.0; series.values.len()];
    for ti in 0..t {
        for m in 0..m_n {
            for f in 0..f_n {
                let idx = (ti * m_n + m) * f_n + f;
                series_z[idx] = normalizer.transform(m, f, series.values[idx]);
            }
        }
    }

    Ok(Dataset {
        series,
        series_z,
        normalizer,
        spec,
        ranges,
        warnings,
    })
}

impl Dataset {
    fn range(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => self.ranges[0],
            Split::Val => self.ranges[1],
            Split::Test => self.ranges[2],
        }
    }

    /// Valid window start indices for a split, chronological order.
    pub fn window_starts(&self, split: Split) -> Vec<usize> {
        let (s, e) = self.range(split);
        let window = self.spec.t_in + self.spec.t_out;
        if e - s < window {
            return Vec::new();
        }
        (s..=e - window).collect()
    }

    /// Start indices grouped into batches. Train batches are shuffled with
    /// the caller's RNG; a trailing short batch is kept.
    pub fn epoch_batches(&self, split: Split, rng: Option<&mut ChaCha8Rng>) -> Vec<Vec<usize>> {
        let mut starts = self.window_starts(split);
        if let Some(rng) = rng {
            starts.shuffle(rng);
        }
        starts
            .chunks(self.spec.batch)
            .map(|c| c.to_vec())
            .collect()
    }

    /// Materialize the batch for the given window starts.
    pub fn batch<T: Real>(&self, starts: &[usize]) -> WindowBatch<T> {
        let b = starts.len();
        let (m_n, f_n) = (self.series.num_nodes, self.series.num_features);
        let (t_in, t_out, tf) = (self.spec.t_in, self.spec.t_out, self.spec.target_feature);
        let mut inputs = Tensor::zeros(&[b, t_in, m_n, f_n]);
        let mut targets_raw = Tensor::zeros(&[b, t_out, m_n]);
        let mut targets_z = Tensor::zeros(&[b, t_out, m_n]);
        for (bi, &t0) in starts.iter().enumerate() {
            for ti in 0..t_in {
                let src = ((t0 + ti) * m_n) * f_n;
                let dst = ((bi * t_in + ti) * m_n) * f_n;
                for i in 0..m_n * f_n {
                    inputs.data_mut()[dst + i] = T::from_f64(self.series_z[src + i]);
                }
            }
            for to in 0..t_out {
                for m in 0..m_n {
                    let raw = self.series.get(t0 + t_in + to, m, tf);
                    let dst = (bi * t_out + to) * m_n + m;
                    targets_raw.data_mut()[dst] = T::from_f64(raw);
                    targets_z.data_mut()[dst] = T::from_f64(self.normalizer.transform(m, tf, raw));
                }
            }
        }
        WindowBatch {
            inputs,
            targets_raw,
            targets_z,
        }
    }

    /// Generator input: each node's z-scored training-split history of the
    /// target channel, shape (M, T_train). Validation and test steps are
    /// excluded so the learned graph cannot leak future information.
    pub fn generator_input<T: Real>(&self) -> Tensor<T> {
        let (s, e) = self.ranges[0];
        let (m_n, f_n, tf) = (
            self.series.num_nodes,
            self.series.num_features,
            self.spec.target_feature,
        );
        let mut out = Tensor::zeros(&[m_n, e - s]);
        for m in 0..m_n {
            for t in s..e {
                out.data_mut()[m * (e - s) + (t - s)] =
                    T::from_f64(self.series_z[(t * m_n + m) * f_n + tf]);
            }
        }
        out
    }

    /// De-normalize a z-scored prediction tensor of shape (b, T_out, M).
    pub fn denormalize_predictions<T: Real>(&self, pred_z: &Tensor<T>) -> Tensor<T> {
        let shape = pred_z.shape();
        let m_n = shape[shape.len() - 1];
        let tf = self.spec.target_feature;
        let rows = pred_z.numel() / m_n;
        let mut out = pred_z.clone();
        for r in 0..rows {
            for m in 0..m_n {
                let z = out.data()[r * m_n + m].to_f64();
                out.data_mut()[r * m_n + m] = T::from_f64(self.normalizer.inverse(m, tf, z));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn ramp_series(t: usize, m: usize) -> TrafficSeries {
        // deterministic, node-dependent values so normalization is nontrivial
        let values = (0..t * m)
            .map(|i| {
                let (ti, mi) = (i / m, i % m);
                (ti as f64) * 0.1 + (mi as f64 + 1.0) * 3.0
            })
            .collect();
        TrafficSeries::new(m, 1, t, values).unwrap()
    }

    #[test]
    fn adjacency_kernel_fixtures() {
        // 3 nodes: d_01 = sigma exactly, d_02 beyond kappa.
        let sigma = 2.0;
        let dist = Tensor::from_vec(
            vec![3, 3],
            vec![0.0, 2.0, 9.0, 2.0, 0.0, 1.0, 9.0, 1.0, 0.0],
        )
        .unwrap();
        let adj = build_predefined_adjacency(&dist, sigma, 5.0).unwrap();
        assert_eq!(adj.get2(0, 0), 1.0); // exp(0)
        assert_eq!(adj.get2(0, 2), 0.0); // beyond threshold
        assert_relative_eq!(adj.get2(0, 1), 0.367879, max_relative = 1e-5); // d = sigma
        // symmetric input stays symmetric, all entries in [0,1]
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(adj.get2(i, j), adj.get2(j, i));
                assert!((0.0..=1.0).contains(&adj.get2(i, j)));
            }
        }
    }

    #[test]
    fn adjacency_rejects_negative_distance() {
        let dist = Tensor::from_vec(vec![2, 2], vec![0.0, -1.0, -1.0, 0.0]).unwrap();
        let err = build_predefined_adjacency(&dist, 1.0, 10.0).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn adjacency_rejects_bad_sigma() {
        let dist = Tensor::<f64>::zeros(&[2, 2]);
        assert_eq!(
            build_predefined_adjacency(&dist, 0.0, 1.0)
                .unwrap_err()
                .exit_code(),
            2
        );
    }

    #[test]
    fn nan_policy_carry_forward_and_zero_fill() {
        let nan = f64::NAN;
        let mk = || TrafficSeries::new(1, 1, 5, vec![nan, 2.0, nan, nan, 7.0]).unwrap();

        let mut cf = mk();
        cf.apply_nan_policy(NanPolicy::CarryForward).unwrap();
        assert_eq!(cf.values, vec![0.0, 2.0, 2.0, 2.0, 7.0]);

        let mut zf = mk();
        zf.apply_nan_policy(NanPolicy::ZeroFill).unwrap();
        assert_eq!(zf.values, vec![0.0, 2.0, 0.0, 0.0, 7.0]);
    }

    #[test]
    fn nan_policy_rejects_dead_node() {
        // layout [t][node]: node 1 is NaN at every step
        let nan = f64::NAN;
        let mut s = TrafficSeries::new(2, 1, 3, vec![1.0, nan, 2.0, nan, 3.0, nan]).unwrap();
        let err = s.apply_nan_policy(NanPolicy::CarryForward).unwrap_err();
        assert!(err.to_string().contains("node 1"), "{err}");
    }

    #[test]
    fn window_count_matches_counting_oracle() {
        // T=100, 7:2:1 split, T_in = T_out = 12: train holds starts 0..=46.
        let ds = split_and_window(ramp_series(100, 3), SplitSpec::default()).unwrap();
        assert_eq!(ds.window_starts(Split::Train).len(), 47);
        assert_eq!(ds.ranges, [(0, 70), (70, 90), (90, 100)]);
    }

    #[test]
    fn windows_never_cross_split_boundaries() {
        let ds = split_and_window(ramp_series(100, 3), SplitSpec::default()).unwrap();
        let window = ds.spec.t_in + ds.spec.t_out;
        let max_train_start = *ds.window_starts(Split::Train).last().unwrap();
        assert!(max_train_start + window <= ds.ranges[1].0);
        for &s in &ds.window_starts(Split::Val) {
            assert!(s >= ds.ranges[1].0 && s + window <= ds.ranges[1].1);
        }
    }

    #[test]
    fn degenerate_ratios_warn_but_succeed() {
        let ds = split_and_window(
            ramp_series(100, 2),
            SplitSpec {
                ratios: (1.0, 0.0, 0.0),
                ..SplitSpec::default()
            },
        )
        .unwrap();
        assert!(ds.window_starts(Split::Val).is_empty());
        assert!(ds.window_starts(Split::Test).is_empty());
        assert_eq!(ds.warnings.len(), 2);
    }

    #[test]
    fn ratios_must_sum_to_one() {
        let err = split_and_window(
            ramp_series(100, 2),
            SplitSpec {
                ratios: (0.5, 0.2, 0.1),
                ..SplitSpec::default()
            },
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn train_split_too_small_is_a_data_error() {
        let err = split_and_window(ramp_series(30, 2), SplitSpec::default()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn seeded_shuffle_is_reproducible() {
        let ds = split_and_window(ramp_series(200, 2), SplitSpec::default()).unwrap();
        let mut rng1 = ChaCha8Rng::seed_from_u64(11);
        let mut rng2 = ChaCha8Rng::seed_from_u64(11);
        let b1 = ds.epoch_batches(Split::Train, Some(&mut rng1));
        let b2 = ds.epoch_batches(Split::Train, Some(&mut rng2));
        assert_eq!(b1, b2);
        let mut rng3 = ChaCha8Rng::seed_from_u64(12);
        assert_ne!(b1, ds.epoch_batches(Split::Train, Some(&mut rng3)));
    }

    #[test]
    fn normalizer_train_stats_and_roundtrip() {
        let ds = split_and_window(ramp_series(500, 4), SplitSpec::default()).unwrap();
        let (m_n, t_end) = (4usize, ds.ranges[0].1);
        for m in 0..m_n {
            let zs: Vec<f64> = (0..t_end).map(|t| ds.series_z[t * m_n + m]).collect();
            let mean: f64 = zs.iter().sum::<f64>() / zs.len() as f64;
            let var: f64 = zs.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / zs.len() as f64;
            assert!(mean.abs() < 1e-6, "z-mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-4, "z-std {}", var.sqrt());
        }
        // transform . inverse == identity within 1e-6
        let x = 57.25;
        let z = ds.normalizer.transform(2, 0, x);
        assert!((ds.normalizer.inverse(2, 0, z) - x).abs() < 1e-6);
    }

    #[test]
    fn batch_shapes_and_target_alignment() {
        let ds = split_and_window(ramp_series(100, 3), SplitSpec::default()).unwrap();
        let batch = ds.batch::<f64>(&[0, 5]);
        assert_eq!(batch.inputs.shape(), &[2, 12, 3, 1]);
        assert_eq!(batch.targets_raw.shape(), &[2, 12, 3]);
        // target horizon h of window t0 is the raw series at t0 + T_in + h
        let (w, h, m) = (1usize, 3usize, 1usize); // window 1 starts at t0 = 5
        let want = ds.series.get(5 + 12 + h, m, 0);
        assert_eq!(batch.targets_raw.data()[(w * 12 + h) * 3 + m], want);
        // z target de-normalizes back to the raw value
        let z = batch.targets_z.data()[(w * 12 + h) * 3 + m];
        assert!((ds.normalizer.inverse(m, 0, z) - want).abs() < 1e-9);
    }

    #[test]
    fn generator_input_is_train_history_only() {
        let ds = split_and_window(ramp_series(100, 3), SplitSpec::default()).unwrap();
        let x = ds.generator_input::<f64>();
        assert_eq!(x.shape(), &[3, 70]);
        // node 0 at train step 7, both in (M, T) and flat (t·M + m)·F layout
        assert_eq!(x.data()[7], ds.series_z[7 * 3]);
    }
}
