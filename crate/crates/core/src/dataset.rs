//! Finite-support joint distributions over pairs of "views" together with the
//! normalized affinity matrix `M_ij = p(x_i, x′_j) / √(p(x_i) p(x′_j))`,
//! synthetic generators with known eigenstructure, and seeded samplers.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, format_f64, Matrix};

const MASS_TOLERANCE: f64 = 1e-12;

/// Joint probability table `p(x_i, x′_j)` with its marginals and a class
/// label per `x` support point.
#[derive(Clone, Debug, PartialEq)]
pub struct JointDistribution {
    table: Matrix,
    marginal_x: Vec<f64>,
    marginal_xp: Vec<f64>,
    labels: Vec<usize>,
}

impl JointDistribution {
    /// Validates a table: non-negative, total mass 1 within 1e-12, no support
    /// point with zero marginal.
    pub fn from_table(table: Matrix, labels: Vec<usize>) -> Result<Self> {
        let (n, np) = table.shape();
        if n == 0 || np == 0 {
            return Err(Error::pre("empty joint table"));
        }
        if labels.len() != n {
            return Err(Error::dim(format!("{} labels for {n} support points", labels.len())));
        }
        if table.as_slice().iter().any(|&p| p < 0.0) {
            return Err(Error::pre("negative probability"));
        }
        let total: f64 = table.as_slice().iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::pre(format!("joint mass is {total}, expected 1")));
        }
        let marginal_x: Vec<f64> = (0..n).map(|i| table.row(i).iter().sum()).collect();
        let marginal_xp = table.t_mat_vec(&vec![1.0; n])?;
        if marginal_x.iter().chain(&marginal_xp).any(|&p| p <= 0.0) {
            return Err(Error::pre("support point with zero marginal probability"));
        }
        Ok(Self { table, marginal_x, marginal_xp, labels })
    }

    /// Drops rows with zero `x` marginal and columns with zero `x′` marginal,
    /// then validates.
    pub fn from_table_pruned(table: Matrix, labels: Vec<usize>) -> Result<Self> {
        let keep_rows: Vec<usize> = (0..table.rows()).filter(|&i| table.row(i).iter().sum::<f64>() > 0.0).collect();
        let keep_cols: Vec<usize> =
            (0..table.cols()).filter(|&j| (0..table.rows()).map(|i| table[(i, j)]).sum::<f64>() > 0.0).collect();
        let mut pruned = Matrix::zeros(keep_rows.len(), keep_cols.len());
        for (a, &i) in keep_rows.iter().enumerate() {
            for (b, &j) in keep_cols.iter().enumerate() {
                pruned[(a, b)] = table[(i, j)];
            }
        }
        let labels = keep_rows.iter().map(|&i| labels.get(i).copied().unwrap_or(0)).collect();
        Self::from_table(pruned, labels)
    }

    pub fn table(&self) -> &Matrix {
        &self.table
    }

    pub fn marginal_x(&self) -> &[f64] {
        &self.marginal_x
    }

    pub fn marginal_xp(&self) -> &[f64] {
        &self.marginal_xp
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn support_size_x(&self) -> usize {
        self.table.rows()
    }

    pub fn support_size_xp(&self) -> usize {
        self.table.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Both views share one support with `p(x, x′) = p(x′, x)`.
    pub fn is_symmetric(&self) -> bool {
        self.table.is_square() && self.table.asymmetry() <= MASS_TOLERANCE
    }

    pub fn sqrt_marginal_x(&self) -> Vec<f64> {
        self.marginal_x.iter().map(|p| p.sqrt()).collect()
    }
}

/// `M_ij = p(x_i, x′_j) / √(p(x_i) p(x′_j))`
pub fn build_m_matrix(joint: &JointDistribution) -> Matrix {
    let (px, pxp) = (joint.marginal_x(), joint.marginal_xp());
    let mut m = joint.table().clone();
    for i in 0..m.rows() {
        for (j, v) in m.row_mut(i).iter_mut().enumerate() {
            *v /= (px[i] * pxp[j]).sqrt();
        }
    }
    m
}

/// One raw feature vector per support point; the encoder's input.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    features: Matrix,
}

impl FeatureTable {
    pub fn new(features: Matrix) -> Self {
        Self { features }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.features
    }
}

/// Parameters of [`make_block_graph`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockGraphParams {
    pub num_classes: usize,
    pub points_per_class: usize,
    /// Total probability on same-class pairs; the rest is spread uniformly
    /// over cross-class pairs.
    pub intra_mass: f64,
    /// Standard deviation of the per-coordinate Gaussian feature perturbation.
    pub noise: f64,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for BlockGraphParams {
    fn default() -> Self {
        Self { num_classes: 4, points_per_class: 8, intra_mass: 0.9, noise: 0.1, feature_dim: 16, seed: 7 }
    }
}

/// Class-structured "augmentation graph": same-class pairs share
/// `intra_mass` uniformly, cross-class pairs share the remainder. Support
/// points are ordered class by class. Features are unit-norm Gaussian class
/// centroids plus `noise`-scaled Gaussian perturbations.
///
/// With uniform marginals the spectrum of `M` is `1` (constant eigenvector),
/// `intra_mass − (1 − intra_mass)/(K − 1)` with multiplicity `K − 1`, and
/// zero elsewhere, so the top-`K` eigenspace is spanned by class indicators.
pub fn make_block_graph(params: &BlockGraphParams) -> Result<(JointDistribution, FeatureTable)> {
    let &BlockGraphParams { num_classes: k, points_per_class: n, intra_mass, noise, feature_dim, seed } = params;
    if k < 2 {
        return Err(Error::pre(format!("need at least 2 classes, got {k}")));
    }
    if n == 0 || feature_dim == 0 {
        return Err(Error::pre("points_per_class and feature_dim must be positive"));
    }
    if !(intra_mass > 0.0 && intra_mass <= 1.0) {
        return Err(Error::pre(format!("intra_mass must lie in (0, 1], got {intra_mass}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::pre(format!("noise must be finite and >= 0, got {noise}")));
    }
    let total = k * n;
    let same_cell = intra_mass / (k * n * n) as f64;
    let cross_cell = (1.0 - intra_mass) / (k * (k - 1) * n * n) as f64;
    let labels: Vec<usize> = (0..total).map(|i| i / n).collect();
    let mut table = Matrix::zeros(total, total);
    for i in 0..total {
        for j in 0..total {
            table[(i, j)] = if labels[i] == labels[j] { same_cell } else { cross_cell };
        }
    }
    let mass: f64 = table.as_slice().iter().sum();
    table = table.scale(1.0 / mass);
    let joint = JointDistribution::from_table(table, labels.clone())?;

    let m = build_m_matrix(&joint);
    let spectrum = linalg::sym_eigen(&m)?.eigenvalues;
    if spectrum.iter().any(|l| l.abs() > 1.0 + 1e-10) {
        return Err(Error::pre("generated affinity has a singular value above 1"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let mut c: Vec<f64> = (0..feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let nrm = linalg::norm(&c).max(1e-12);
            c.iter_mut().for_each(|x| *x /= nrm);
            c
        })
        .collect();
    let mut features = Matrix::zeros(total, feature_dim);
    for (i, &label) in labels.iter().enumerate() {
        for (f, c) in features.row_mut(i).iter_mut().zip(&centroids[label]) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *f = c + noise * z;
        }
    }
    Ok((joint, FeatureTable::new(features)))
}

/// Symmetric joint over `n` points whose `M` has eigenvalue 1 on `√p` and the
/// prescribed non-negative eigenvalues on a random orthonormal complement,
/// all scaled by one common factor `≤ 1` so every cell stays non-negative.
/// Ratios between the prescribed eigenvalues are therefore preserved.
pub fn make_spectral_joint(n: usize, spectrum: &[f64], seed: u64) -> Result<JointDistribution> {
    if n < 2 || spectrum.len() > n - 1 {
        return Err(Error::pre("spectrum must fit in the complement of sqrt(p)"));
    }
    if spectrum.iter().any(|&l| !(0.0..=1.0).contains(&l)) {
        return Err(Error::pre("prescribed eigenvalues must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let sqrt_p: Vec<f64> = p.iter().map(|v| v.sqrt()).collect();

    let mut cols = vec![sqrt_p.clone()];
    for _ in 0..spectrum.len() {
        cols.push((0..n).map(|_| StandardNormal.sample(&mut rng)).collect());
    }
    let basis = linalg::gram_schmidt(&Matrix::from_columns(&cols)?);
    if !basis.dead.is_empty() {
        return Err(Error::pre("random basis was rank deficient"));
    }

    let mut r = Matrix::zeros(n, n);
    for (k, &lambda) in spectrum.iter().enumerate() {
        linalg::add_outer(&mut r, lambda, &basis.q.column(k + 1));
    }
    // largest scale keeping p_i p_j + t·√(p_i p_j)·R_ij ≥ 0
    let mut scale = 1.0f64;
    for i in 0..n {
        for j in 0..n {
            let rij = r[(i, j)];
            if rij < 0.0 {
                scale = scale.min(0.9 * sqrt_p[i] * sqrt_p[j] / -rij);
            }
        }
    }
    let mut table = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let sym = 0.5 * (r[(i, j)] + r[(j, i)]);
            table[(i, j)] = p[i] * p[j] + scale * sqrt_p[i] * sqrt_p[j] * sym;
        }
    }
    let mass: f64 = table.as_slice().iter().sum();
    JointDistribution::from_table(table.scale(1.0 / mass), vec![0; n])
}

/// Product joint `p(x)p(x′)` with `p` on both sides.
pub fn independent_joint(p: &[f64]) -> Result<JointDistribution> {
    let rows: Vec<Vec<f64>> = p.iter().map(|a| p.iter().map(|b| a * b).collect()).collect();
    JointDistribution::from_table(Matrix::from_rows(&rows)?, vec![0; p.len()])
}

/// Inverse-CDF sampler over a flattened probability vector.
#[derive(Clone, Debug)]
struct CdfTable {
    cumulative: Vec<f64>,
}

impl CdfTable {
    fn new(weights: &[f64]) -> Self {
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Self { cumulative }
    }

    fn draw(&self, rng: &mut impl Rng) -> usize {
        let total = *self.cumulative.last().expect("non-empty");
        let u = rng.random::<f64>() * total;
        let idx = self.cumulative.partition_point(|&c| c <= u);
        // skip trailing zero-mass cells if u landed on the boundary
        idx.min(self.cumulative.len() - 1)
    }
}

/// Draws i.i.d. `(x, x′)` index pairs from a joint.
#[derive(Clone, Debug)]
pub struct PairSampler {
    cdf: CdfTable,
    cols: usize,
}

impl PairSampler {
    pub fn new(joint: &JointDistribution) -> Self {
        Self { cdf: CdfTable::new(joint.table().as_slice()), cols: joint.support_size_xp() }
    }

    pub fn sample(&self, rng: &mut impl Rng, batch: usize) -> Vec<(usize, usize)> {
        (0..batch)
            .map(|_| {
                let flat = self.cdf.draw(rng);
                (flat / self.cols, flat % self.cols)
            })
            .collect()
    }
}

/// `batch` i.i.d. pairs from the joint, deterministic in `rng_seed`.
pub fn sample_pairs(joint: &JointDistribution, batch: usize, rng_seed: u64) -> Result<Vec<(usize, usize)>> {
    if batch == 0 {
        return Err(Error::pre("batch must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok(PairSampler::new(joint).sample(&mut rng, batch))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    X,
    XPrime,
}

/// `batch` i.i.d. support indices from one marginal.
pub fn sample_marginal(joint: &JointDistribution, side: Side, batch: usize, rng_seed: u64) -> Result<Vec<usize>> {
    if batch == 0 {
        return Err(Error::pre("batch must be >= 1"));
    }
    let weights = match side {
        Side::X => joint.marginal_x(),
        Side::XPrime => joint.marginal_xp(),
    };
    let cdf = CdfTable::new(weights);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok((0..batch).map(|_| cdf.draw(&mut rng)).collect())
}

/// A joint distribution, its feature table and the generator settings that
/// produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub joint: JointDistribution,
    pub features: FeatureTable,
    pub params: Option<BlockGraphParams>,
}

const DATASET_MAGIC: &str = "minc-dataset v1";

impl Dataset {
    pub fn generate(params: &BlockGraphParams) -> Result<Self> {
        let (joint, features) = make_block_graph(params)?;
        Ok(Self { joint, features, params: Some(params.clone()) })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{DATASET_MAGIC}");
        match &self.params {
            Some(p) => {
                let _ = writeln!(
                    s,
                    "generator block_graph classes={} per_class={} intra_mass={} noise={} feature_dim={} seed={}",
                    p.num_classes,
                    p.points_per_class,
                    format_f64(p.intra_mass),
                    format_f64(p.noise),
                    p.feature_dim,
                    p.seed
                );
            }
            None => {
                let _ = writeln!(s, "generator none");
            }
        }
        let _ = writeln!(s, "support {} {}", self.joint.support_size_x(), self.joint.support_size_xp());
        let _ = writeln!(s, "joint");
        s.push_str(&self.joint.table().to_text());
        let labels: Vec<String> = self.joint.labels().iter().map(|l| l.to_string()).collect();
        let _ = writeln!(s, "labels");
        let _ = writeln!(s, "{}", labels.join(" "));
        let _ = writeln!(s, "features");
        s.push_str(&self.features.matrix().to_text());
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut next = |what: &str| lines_next(&mut lines, what);
        if next("magic")? != DATASET_MAGIC {
            return Err(Error::Parse("not a dataset file".into()));
        }
        let params = parse_generator(next("generator")?)?;
        let support = next("support")?;
        let sizes: Vec<usize> = support
            .split_whitespace()
            .skip(1)
            .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad support line {support:?}"))))
            .collect::<Result<_>>()?;
        expect_line(next("joint")?, "joint")?;
        let table = Matrix::read_lines(&mut lines)?;
        if sizes != [table.rows(), table.cols()] {
            return Err(Error::Parse("support sizes disagree with joint table".into()));
        }
        let mut next = |what: &str| lines_next(&mut lines, what);
        expect_line(next("labels")?, "labels")?;
        let labels: Vec<usize> = next("label values")?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad label {t:?}"))))
            .collect::<Result<_>>()?;
        expect_line(next("features")?, "features")?;
        let features = Matrix::read_lines(&mut lines)?;
        let joint = JointDistribution::from_table(table, labels)?;
        if features.rows() != joint.support_size_x() {
            return Err(Error::Parse("feature rows disagree with support size".into()));
        }
        Ok(Self { joint, features: FeatureTable::new(features), params })
    }
}

fn lines_next<'a>(lines: &mut impl Iterator<Item = &'a str>, what: &str) -> Result<&'a str> {
    lines.next().map(str::trim).ok_or_else(|| Error::Parse(format!("unexpected end of file before {what}")))
}

fn expect_line(line: &str, want: &str) -> Result<()> {
    if line == want {
        Ok(())
    } else {
        Err(Error::Parse(format!("expected {want:?}, found {line:?}")))
    }
}

fn parse_generator(line: &str) -> Result<Option<BlockGraphParams>> {
    let mut toks = line.split_whitespace();
    if toks.next() != Some("generator") {
        return Err(Error::Parse(format!("bad generator line {line:?}")));
    }
    match toks.next() {
        Some("none") => return Ok(None),
        Some("block_graph") => {}
        _ => return Err(Error::Parse(format!("unknown generator in {line:?}"))),
    }
    let mut p = BlockGraphParams::default();
    for tok in toks {
        let (key, value) = tok.split_once('=').ok_or_else(|| Error::Parse(format!("bad token {tok:?}")))?;
        let bad = |_| Error::Parse(format!("bad value in {tok:?}"));
        match key {
            "classes" => p.num_classes = value.parse().map_err(bad)?,
            "per_class" => p.points_per_class = value.parse().map_err(bad)?,
            "intra_mass" => p.intra_mass = value.parse().map_err(|_| Error::Parse(tok.into()))?,
            "noise" => p.noise = value.parse().map_err(|_| Error::Parse(tok.into()))?,
            "feature_dim" => p.feature_dim = value.parse().map_err(bad)?,
            "seed" => p.seed = value.parse().map_err(bad)?,
            _ => return Err(Error::Parse(format!("unknown generator key {key:?}"))),
        }
    }
    Ok(Some(p))
}
