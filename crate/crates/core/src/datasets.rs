//! Synthetic targets: merged-staircase boolean functions and Gaussian
//! multi-index polynomials, with persistence and label shuffling.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::{self, gaussian, load_matrix, qr_orthonormal, save_matrix, Matrix, Rng};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("index set {0} is empty")]
    EmptySet(usize),
    #[error("index {index} out of range for input dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("index sets {0} and {1} are identical")]
    DuplicateSet(usize, usize),
    #[error("coefficient count {got} does not match set count {expected}")]
    CoefficientCount { expected: usize, got: usize },
    #[error("input entry {0} is not +1 or -1")]
    NotBoolean(f64),
    #[error("input has length {got}, expected {expected}")]
    InputLength { expected: usize, got: usize },
    #[error("latent dimension {latent} exceeds input dimension {input}")]
    LatentTooLarge { latent: usize, input: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("meta.toml: {0}")]
    Meta(String),
}

/// Sparse Fourier-Walsh expansion `f(z) = Σ_S c_S Π_{i∈S} z_i` on `{±1}^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MspSpec {
    pub input_dim: usize,
    pub sets: Vec<Vec<usize>>,
    pub coefficients: Vec<f64>,
}

impl MspSpec {
    /// Unit coefficients on every set.
    pub fn new(input_dim: usize, sets: Vec<Vec<usize>>) -> Result<Self, DatasetError> {
        let coefficients = vec![1.0; sets.len()];
        Self::with_coefficients(input_dim, sets, coefficients)
    }

    pub fn with_coefficients(
        input_dim: usize,
        sets: Vec<Vec<usize>>,
        coefficients: Vec<f64>,
    ) -> Result<Self, DatasetError> {
        let spec = Self {
            input_dim,
            sets,
            coefficients,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The eight-set staircase on `d = 30` used throughout the experiments:
    /// `z7 + z2z7 + z0z2z7 + z4z5z7 + z1 + z0z4 + z3z7 + z0z1z2z3z4z6z7`.
    pub fn reference_staircase() -> Self {
        let sets = vec![
            vec![7],
            vec![2, 7],
            vec![0, 2, 7],
            vec![5, 7, 4],
            vec![1],
            vec![0, 4],
            vec![3, 7],
            vec![0, 1, 2, 3, 4, 6, 7],
        ];
        Self::new(30, sets).expect("reference spec is valid")
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.coefficients.len() != self.sets.len() {
            return Err(DatasetError::CoefficientCount {
                expected: self.sets.len(),
                got: self.coefficients.len(),
            });
        }
        let mut seen: Vec<Vec<usize>> = Vec::with_capacity(self.sets.len());
        for (i, set) in self.sets.iter().enumerate() {
            if set.is_empty() {
                return Err(DatasetError::EmptySet(i));
            }
            if let Some(&index) = set.iter().find(|&&k| k >= self.input_dim) {
                return Err(DatasetError::IndexOutOfRange {
                    index,
                    dim: self.input_dim,
                });
            }
            let mut key = set.clone();
            key.sort_unstable();
            key.dedup();
            if let Some(j) = seen.iter().position(|s| *s == key) {
                return Err(DatasetError::DuplicateSet(j, i));
            }
            seen.push(key);
        }
        Ok(())
    }
}

/// Whether some ordering of `sets` adds at least one new coordinate with every
/// set (the merged-staircase property).
///
/// Depth-first search over orderings; states are identified by the set of
/// already-placed sets, and failed states are memoized.
pub fn msp_check(sets: &[Vec<usize>]) -> Result<bool, DatasetError> {
    if let Some(i) = sets.iter().position(|s| s.is_empty()) {
        return Err(DatasetError::EmptySet(i));
    }
    let universe: Vec<usize> = {
        let mut u: Vec<usize> = sets.iter().flatten().copied().collect();
        u.sort_unstable();
        u.dedup();
        u
    };
    let members: Vec<Vec<usize>> = sets
        .iter()
        .map(|s| {
            let mut v: Vec<usize> = s
                .iter()
                .map(|k| universe.binary_search(k).expect("collected above"))
                .collect();
            v.sort_unstable();
            v.dedup();
            v
        })
        .collect();

    struct Search<'a> {
        members: &'a [Vec<usize>],
        failed: HashSet<Vec<bool>>,
    }

    impl Search<'_> {
        fn extend(&mut self, placed: &mut Vec<bool>, covered: &mut Vec<u32>) -> bool {
            if placed.iter().all(|&p| p) {
                return true;
            }
            if self.failed.contains(placed) {
                return false;
            }
            for i in 0..self.members.len() {
                if placed[i] || self.members[i].iter().all(|&k| covered[k] > 0) {
                    continue;
                }
                placed[i] = true;
                for &k in &self.members[i] {
                    covered[k] += 1;
                }
                let ok = self.extend(placed, covered);
                for &k in &self.members[i] {
                    covered[k] -= 1;
                }
                placed[i] = false;
                if ok {
                    return true;
                }
            }
            self.failed.insert(placed.clone());
            false
        }
    }

    let mut search = Search {
        members: &members,
        failed: HashSet::new(),
    };
    let mut placed = vec![false; sets.len()];
    let mut covered = vec![0u32; universe.len()];
    Ok(search.extend(&mut placed, &mut covered))
}

/// `Σ_S c_S Π_{i∈S} z_i` for a `±1` input.
pub fn msp_eval(spec: &MspSpec, z: &[f64]) -> Result<f64, DatasetError> {
    if z.len() != spec.input_dim {
        return Err(DatasetError::InputLength {
            expected: spec.input_dim,
            got: z.len(),
        });
    }
    if let Some(&bad) = z.iter().find(|&&v| v != 1.0 && v != -1.0) {
        return Err(DatasetError::NotBoolean(bad));
    }
    Ok(spec
        .sets
        .iter()
        .zip(&spec.coefficients)
        .map(|(set, c)| c * set.iter().map(|&i| z[i]).product::<f64>())
        .sum())
}

/// Gaussian multi-index polynomial target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiIndexSpec {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub max_degree: usize,
    pub noise_std: f64,
    /// Seed for the projection and the polynomial coefficients.
    pub seed: u64,
}

impl MultiIndexSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.latent_dim > self.input_dim {
            return Err(DatasetError::LatentTooLarge {
                latent: self.latent_dim,
                input: self.input_dim,
            });
        }
        if self.max_degree < 1 || self.latent_dim < 1 {
            return Err(DatasetError::Invalid(
                "multi-index target needs latent_dim >= 1 and max_degree >= 1".into(),
            ));
        }
        if !(self.noise_std >= 0.0) {
            return Err(DatasetError::Invalid("noise_std must be >= 0".into()));
        }
        Ok(())
    }
}

/// Realized multi-index polynomial: orthonormal projection `U` (d × r) and
/// one coefficient per multi-index `α` with `1 ≤ |α| ≤ p`.
///
/// The constant term is left out; it would be removed by label normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiIndexTarget {
    pub projection: Matrix,
    pub terms: Vec<(Vec<u32>, f64)>,
}

impl MultiIndexTarget {
    pub fn new(spec: &MultiIndexSpec) -> Result<Self, DatasetError> {
        spec.validate()?;
        let mut rng = Rng::stream(spec.seed, 0);
        let g = gaussian(&mut rng, spec.input_dim, spec.latent_dim, 1.0);
        let projection = qr_orthonormal(&g)?;
        let mut rng = Rng::stream(spec.seed, 1);
        let terms = multi_indices(spec.latent_dim, spec.max_degree)
            .into_iter()
            .map(|alpha| {
                let c = rng.normal();
                (alpha, c)
            })
            .collect();
        Ok(Self { projection, terms })
    }

    /// `f(x)` on every row of `x`.
    pub fn eval(&self, x: &Matrix) -> Result<Vec<f64>, DatasetError> {
        let latent = numerics::matmul(x, &self.projection)?;
        Ok((0..latent.rows())
            .map(|i| {
                let z = latent.row(i);
                self.terms
                    .iter()
                    .map(|(alpha, c)| {
                        c * alpha
                            .iter()
                            .zip(z)
                            .map(|(&a, &zi)| zi.powi(a as i32))
                            .product::<f64>()
                    })
                    .sum()
            })
            .collect())
    }
}

/// All `α ∈ ℕ^r` with `1 ≤ |α|₁ ≤ p`, by increasing degree then
/// lexicographically descending.
pub fn multi_indices(r: usize, p: usize) -> Vec<Vec<u32>> {
    fn fill(pos: usize, remaining: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if pos + 1 == cur.len() {
            cur[pos] = remaining;
            out.push(cur.clone());
            return;
        }
        for a in (0..=remaining).rev() {
            cur[pos] = a;
            fill(pos + 1, remaining - a, cur, out);
        }
    }
    let mut out = Vec::new();
    let mut cur = vec![0u32; r];
    for degree in 1..=p as u32 {
        fill(0, degree, &mut cur, &mut out);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    Msp(MspSpec),
    MultiIndex(MultiIndexSpec),
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: GeneratorSpec,
    pub seed: u64,
    pub split: Split,
    pub rng: String,
    pub shuffled: bool,
    /// Row `i` of the stored labels is original row `permutation[i]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutation: Option<Vec<usize>>,
    /// Affine label normalization `(y - mean) / std`, from training data.
    pub label_mean: f64,
    pub label_std: f64,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Matrix,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(x: Matrix, y: Matrix, meta: DatasetMeta) -> Result<Self, DatasetError> {
        if x.rows() != y.rows() {
            return Err(DatasetError::Invalid(format!(
                "{} inputs but {} labels",
                x.rows(),
                y.rows()
            )));
        }
        if !y.is_finite() {
            return Err(DatasetError::Invalid("non-finite labels".into()));
        }
        Ok(Self { x, y, meta })
    }

    /// Unlabelled-provenance dataset, e.g. for user-supplied matrices.
    pub fn from_arrays(x: Matrix, y: Matrix) -> Result<Self, DatasetError> {
        let meta = DatasetMeta {
            generator: GeneratorSpec::External,
            seed: 0,
            split: Split::Train,
            rng: numerics::RNG_ALGORITHM.into(),
            shuffled: false,
            permutation: None,
            label_mean: 0.0,
            label_std: 1.0,
            notes: vec![],
        };
        Self::new(x, y, meta)
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.y.cols()
    }

    /// Rows in the given order, provenance carried over.
    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(rows),
            y: self.y.select_rows(rows),
            meta: DatasetMeta {
                permutation: None,
                ..self.meta.clone()
            },
        }
    }

    /// Labels as a flat vector (first output column).
    pub fn labels(&self) -> Vec<f64> {
        self.y.column(0)
    }
}

fn base_meta(generator: GeneratorSpec, seed: u64, split: Split) -> DatasetMeta {
    DatasetMeta {
        generator,
        seed,
        split,
        rng: numerics::RNG_ALGORITHM.into(),
        shuffled: false,
        permutation: None,
        label_mean: 0.0,
        label_std: 1.0,
        notes: vec![],
    }
}

/// `m` uniform points of `{±1}^d` labelled by the staircase (training split).
pub fn gen_msp(spec: &MspSpec, m: usize, seed: u64) -> Result<Dataset, DatasetError> {
    gen_msp_split(spec, m, seed, Split::Train)
}

/// Train and test splits draw from disjoint streams of the same seed.
pub fn gen_msp_split(
    spec: &MspSpec,
    m: usize,
    seed: u64,
    split: Split,
) -> Result<Dataset, DatasetError> {
    spec.validate()?;
    let d = spec.input_dim;
    let mut rng = Rng::stream(seed, split.stream());
    let mut x = Matrix::zeros(m, d);
    for v in x.as_mut_slice() {
        *v = rng.sign();
    }
    let mut y = Matrix::zeros(m, 1);
    for i in 0..m {
        y[(i, 0)] = msp_eval(spec, x.row(i))?;
    }
    Dataset::new(
        x,
        y,
        base_meta(GeneratorSpec::Msp(spec.clone()), seed, split),
    )
}

fn multi_index_raw(
    spec: &MultiIndexSpec,
    target: &MultiIndexTarget,
    m: usize,
    seed: u64,
    split: Split,
) -> Result<(Matrix, Vec<f64>), DatasetError> {
    let mut rng = Rng::stream(seed, split.stream());
    let x = gaussian(&mut rng, m, spec.input_dim, 1.0);
    let mut y = target.eval(&x)?;
    if spec.noise_std > 0.0 {
        let mut noise = Rng::stream(seed, 2 + split.stream());
        for v in &mut y {
            *v += spec.noise_std * noise.sign();
        }
    }
    Ok((x, y))
}

fn normalization(y: &[f64]) -> (f64, f64) {
    let n = y.len().max(1) as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 0.0 { std } else { 1.0 })
}

fn multi_index_dataset(
    spec: &MultiIndexSpec,
    x: Matrix,
    y: Vec<f64>,
    (mean, std): (f64, f64),
    seed: u64,
    split: Split,
) -> Result<Dataset, DatasetError> {
    let labels: Vec<f64> = y.iter().map(|v| (v - mean) / std).collect();
    let mut meta = base_meta(GeneratorSpec::MultiIndex(spec.clone()), seed, split);
    meta.label_mean = mean;
    meta.label_std = std;
    meta.notes
        .push("polynomial terms cover 1 <= |alpha| <= p; no constant term".into());
    meta.notes
        .push("labels normalized with training-set population mean/std".into());
    Dataset::new(x, Matrix::column_vector(&labels), meta)
}

/// Training split of a multi-index task, normalized with its own statistics.
pub fn gen_multi_index(
    spec: &MultiIndexSpec,
    m: usize,
    seed: u64,
) -> Result<Dataset, DatasetError> {
    let target = MultiIndexTarget::new(spec)?;
    let (x, y) = multi_index_raw(spec, &target, m, seed, Split::Train)?;
    let norm = normalization(&y);
    multi_index_dataset(spec, x, y, norm, seed, Split::Train)
}

/// Training and test splits sharing the projection and coefficients; the test
/// labels are normalized with the training statistics.
pub fn gen_multi_index_pair(
    spec: &MultiIndexSpec,
    m_train: usize,
    m_test: usize,
    seed: u64,
) -> Result<(Dataset, Dataset), DatasetError> {
    let target = MultiIndexTarget::new(spec)?;
    let (x, y) = multi_index_raw(spec, &target, m_train, seed, Split::Train)?;
    let norm = normalization(&y);
    let train = multi_index_dataset(spec, x, y, norm, seed, Split::Train)?;
    let (xt, yt) = multi_index_raw(spec, &target, m_test, seed, Split::Test)?;
    let test = multi_index_dataset(spec, xt, yt, norm, seed, Split::Test)?;
    Ok((train, test))
}

/// Permutes label rows across samples; inputs are untouched.
pub fn shuffle_labels(ds: &Dataset, seed: u64) -> Result<Dataset, DatasetError> {
    if ds.is_empty() {
        return Err(DatasetError::Invalid(
            "cannot shuffle an empty dataset".into(),
        ));
    }
    let perm = Rng::stream(seed, 7).permutation(ds.len());
    let y = ds.y.select_rows(&perm);
    let composed = match &ds.meta.permutation {
        Some(prev) => perm.iter().map(|&i| prev[i]).collect(),
        None => perm,
    };
    let mut meta = ds.meta.clone();
    meta.shuffled = true;
    meta.permutation = Some(composed);
    Dataset::new(ds.x.clone(), y, meta)
}

/// Undoes a stored label permutation.
pub fn unshuffle_labels(ds: &Dataset) -> Dataset {
    let mut out = ds.clone();
    if let Some(perm) = &ds.meta.permutation {
        for (i, &src) in perm.iter().enumerate() {
            out.y.row_mut(src).copy_from_slice(ds.y.row(i));
        }
        out.meta.permutation = None;
        out.meta.shuffled = false;
    }
    out
}

/// Writes `meta.toml`, `X.bin` and `Y.bin` into `dir`.
pub fn save_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<(), DatasetError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let meta = toml::to_string(&ds.meta).map_err(|e| DatasetError::Meta(e.to_string()))?;
    fs::write(dir.join("meta.toml"), meta)?;
    save_matrix(dir.join("X.bin"), &ds.x)?;
    save_matrix(dir.join("Y.bin"), &ds.y)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let dir = dir.as_ref();
    let meta: DatasetMeta = toml::from_str(&fs::read_to_string(dir.join("meta.toml"))?)
        .map_err(|e| DatasetError::Meta(e.to_string()))?;
    let x = load_matrix(dir.join("X.bin"))?;
    let y = load_matrix(dir.join("Y.bin"))?;
    Dataset::new(x, y, meta)
}

/// CSV with header `x0,..,x{d-1},y0,..`.
pub fn dataset_to_csv(ds: &Dataset) -> String {
    let mut header: Vec<String> = (0..ds.input_dim()).map(|i| format!("x{i}")).collect();
    header.extend((0..ds.output_dim()).map(|i| format!("y{i}")));
    let mut out = header.join(",");
    out.push('\n');
    for i in 0..ds.len() {
        let fields: Vec<String> =
            ds.x.row(i)
                .iter()
                .chain(ds.y.row(i))
                .map(|v| v.to_string())
                .collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive oracle: try every permutation of the sets.
    fn msp_brute_force(sets: &[Vec<usize>]) -> bool {
        fn permute(k: usize, order: &mut Vec<usize>, sets: &[Vec<usize>]) -> bool {
            if k == order.len() {
                let mut covered = HashSet::new();
                for &i in order.iter() {
                    let novel = sets[i].iter().any(|e| !covered.contains(e));
                    if !novel {
                        return false;
                    }
                    covered.extend(sets[i].iter().copied());
                }
                return true;
            }
            for j in k..order.len() {
                order.swap(k, j);
                if permute(k + 1, order, sets) {
                    return true;
                }
                order.swap(k, j);
            }
            false
        }
        let mut order: Vec<usize> = (0..sets.len()).collect();
        permute(0, &mut order, sets)
    }

    #[test]
    fn single_set_is_msp() {
        assert!(msp_check(&[vec![7]]).unwrap());
    }

    #[test]
    fn pairwise_triangle_is_not_msp() {
        let sets = vec![vec![1, 2], vec![1, 3], vec![2, 3]];
        assert!(!msp_check(&sets).unwrap());
        assert!(!msp_brute_force(&sets));
    }

    #[test]
    fn reference_staircase_is_msp() {
        let spec = MspSpec::reference_staircase();
        assert!(msp_check(&spec.sets).unwrap());
        assert!(msp_brute_force(&spec.sets));
    }

    #[test]
    fn ordering_matters_for_nested_sets() {
        // greedy on {1,2} first would fail; {1} then {1,2} works
        assert!(msp_check(&[vec![1, 2], vec![1]]).unwrap());
    }

    #[test]
    fn empty_member_is_an_error() {
        assert!(matches!(
            msp_check(&[vec![1], vec![]]),
            Err(DatasetError::EmptySet(1))
        ));
    }

    #[test]
    fn eval_reference_staircase() {
        let spec = MspSpec::reference_staircase();
        let ones = vec![1.0; 30];
        assert_eq!(msp_eval(&spec, &ones).unwrap(), 8.0);
        let mut flipped = ones.clone();
        flipped[7] = -1.0;
        assert_eq!(msp_eval(&spec, &flipped).unwrap(), -4.0);
    }

    #[test]
    fn eval_empty_expansion_is_zero() {
        let spec = MspSpec::new(4, vec![]).unwrap();
        assert_eq!(msp_eval(&spec, &[1.0, -1.0, 1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn eval_rejects_non_boolean() {
        let spec = MspSpec::new(2, vec![vec![0]]).unwrap();
        assert!(matches!(
            msp_eval(&spec, &[0.5, 1.0]),
            Err(DatasetError::NotBoolean(_))
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(MspSpec::new(3, vec![vec![3]]).is_err());
        assert!(MspSpec::new(3, vec![vec![0, 1], vec![1, 0]]).is_err());
        assert!(MspSpec::new(3, vec![vec![]]).is_err());
    }

    #[test]
    fn msp_generation_is_reproducible_and_consistent() {
        let spec = MspSpec::reference_staircase();
        let a = gen_msp(&spec, 1, 99).unwrap();
        let b = gen_msp(&spec, 1, 99).unwrap();
        assert_eq!(a, b);
        let ds = gen_msp(&spec, 500, 3).unwrap();
        for i in 0..ds.len() {
            let y = ds.y[(i, 0)];
            assert_eq!(y, msp_eval(&spec, ds.x.row(i)).unwrap());
            assert_eq!(y, y.round());
            assert!((-8.0..=8.0).contains(&y));
        }
    }

    #[test]
    fn msp_coordinates_are_centered() {
        let spec = MspSpec::reference_staircase();
        let m = 10_000;
        let ds = gen_msp(&spec, m, 2024).unwrap();
        let means = ds.x.column_sums();
        let bound = 3.0 / (m as f64).sqrt();
        for s in means {
            assert!((s / m as f64).abs() < bound);
        }
    }

    #[test]
    fn train_and_test_streams_differ() {
        let spec = MspSpec::reference_staircase();
        let a = gen_msp_split(&spec, 20, 1, Split::Train).unwrap();
        let b = gen_msp_split(&spec, 20, 1, Split::Test).unwrap();
        assert_ne!(a.x, b.x);
    }

    fn mi_spec(noise: f64) -> MultiIndexSpec {
        MultiIndexSpec {
            input_dim: 20,
            latent_dim: 3,
            max_degree: 5,
            noise_std: noise,
            seed: 17,
        }
    }

    #[test]
    fn multi_index_projection_is_orthonormal() {
        let t = MultiIndexTarget::new(&mi_spec(0.0)).unwrap();
        let utu = numerics::matmul_tn(&t.projection, &t.projection).unwrap();
        assert!(utu.sub(&Matrix::identity(3)).unwrap().max_abs() < 1e-8);
        // C(3+5, 5) - 1 monomials of degree 1..=5
        assert_eq!(t.terms.len(), 55);
    }

    #[test]
    fn multi_index_noiseless_labels_are_the_polynomial() {
        let spec = mi_spec(0.0);
        let ds = gen_multi_index(&spec, 50, 4).unwrap();
        let t = MultiIndexTarget::new(&spec).unwrap();
        let f = t.eval(&ds.x).unwrap();
        for (i, fi) in f.iter().enumerate() {
            let raw = ds.y[(i, 0)] * ds.meta.label_std + ds.meta.label_mean;
            assert!((raw - fi).abs() < 1e-9 * fi.abs().max(1.0));
        }
    }

    #[test]
    fn multi_index_training_labels_are_standardized() {
        let ds = gen_multi_index(&mi_spec(0.3), 400, 8).unwrap();
        let y = ds.labels();
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn multi_index_test_uses_training_statistics() {
        let (train, test) = gen_multi_index_pair(&mi_spec(0.0), 100, 60, 5).unwrap();
        assert_eq!(train.meta.label_mean, test.meta.label_mean);
        assert_eq!(train.meta.label_std, test.meta.label_std);
        let alone = gen_multi_index(&mi_spec(0.0), 100, 5).unwrap();
        assert_eq!(alone, train);
    }

    #[test]
    fn multi_index_rejects_latent_above_input() {
        let mut spec = mi_spec(0.0);
        spec.latent_dim = 21;
        assert!(matches!(
            gen_multi_index(&spec, 10, 0),
            Err(DatasetError::LatentTooLarge { .. })
        ));
    }

    #[test]
    fn multi_index_regeneration_is_bit_exact() {
        let a = gen_multi_index(&mi_spec(0.5), 64, 77).unwrap();
        let b = gen_multi_index(&mi_spec(0.5), 64, 77).unwrap();
        assert_eq!(a.y.as_slice(), b.y.as_slice());
    }

    #[test]
    fn shuffling_permutes_labels_only() {
        let spec = MspSpec::reference_staircase();
        let ds = gen_msp(&spec, 200, 1).unwrap();
        let sh = shuffle_labels(&ds, 5).unwrap();
        assert!(sh.meta.shuffled);
        assert_eq!(sh.x, ds.x);
        let mut a = ds.labels();
        let mut b = sh.labels();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        assert_eq!(shuffle_labels(&ds, 5).unwrap(), sh);
        assert_eq!(unshuffle_labels(&sh).y, ds.y);
    }

    #[test]
    fn shuffling_single_row_is_identity() {
        let spec = MspSpec::reference_staircase();
        let ds = gen_msp(&spec, 1, 1).unwrap();
        let sh = shuffle_labels(&ds, 3).unwrap();
        assert_eq!(sh.y, ds.y);
        assert_eq!(sh.x, ds.x);
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds =
            shuffle_labels(&gen_msp(&MspSpec::reference_staircase(), 16, 2).unwrap(), 1).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let ds = gen_msp(&MspSpec::new(2, vec![vec![0, 1]]).unwrap(), 3, 0).unwrap();
        let csv = dataset_to_csv(&ds);
        assert!(csv.starts_with("x0,x1,y0\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    fn random_sets() -> impl Strategy<Value = Vec<Vec<usize>>> {
        prop::collection::vec(
            prop::collection::btree_set(0usize..6, 1..4).prop_map(|s| s.into_iter().collect()),
            1..=8,
        )
    }

    proptest! {
        #[test]
        fn msp_check_matches_enumeration(sets in random_sets()) {
            prop_assert_eq!(msp_check(&sets).unwrap(), msp_brute_force(&sets));
        }

        #[test]
        fn shuffle_is_invertible(seed in any::<u64>(), m in 1usize..40) {
            let ds = gen_msp(&MspSpec::reference_staircase(), m, seed).unwrap();
            let sh = shuffle_labels(&shuffle_labels(&ds, seed).unwrap(), seed ^ 1).unwrap();
            prop_assert_eq!(unshuffle_labels(&sh).y, ds.y);
        }
    }
}
