//! Point-cloud container, neighborhoods, farthest point sampling and
//! cross-scale interpolation.
//!
//! Clouds may hold several samples at once: `batch_ids` is non-decreasing
//! and each run of equal ids is one sample. Neighborhoods, sampling and
//! interpolation never cross sample boundaries.

use std::fmt::Write as _;
use std::ops::Range;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geom3d::{RigidMotion, Rotation3, Vec3};

/// Per-point supervision attached to a cloud.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// Scalar class labels; invariant under rigid motion.
    Classes(Vec<usize>),
    /// Vector labels; rotated by rigid motion.
    Vectors(Vec<Vec3>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(c) => c.len(),
            Labels::Vectors(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vec3>,
    /// `P x S`, row-major.
    pub scalar_features: Vec<f64>,
    pub n_scalars: usize,
    /// `P x V` vectors, point-major.
    pub vector_features: Vec<Vec3>,
    pub n_vectors: usize,
    pub batch_ids: Vec<usize>,
    pub labels: Option<Labels>,
    /// Per-point reference frame (columns are the frame axes). Identity
    /// unless a rigid motion has been applied.
    pub frames: Vec<Rotation3>,
}

impl PointCloud {
    /// A single-sample cloud with positions only.
    pub fn from_positions(positions: Vec<Vec3>) -> Self {
        let p = positions.len();
        Self {
            positions,
            scalar_features: Vec::new(),
            n_scalars: 0,
            vector_features: Vec::new(),
            n_vectors: 0,
            batch_ids: vec![0; p],
            labels: None,
            frames: vec![Rotation3::identity(); p],
        }
    }

    pub fn with_scalars(mut self, n_scalars: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_scalars * self.len() {
            return Err(Error::Precondition(format!(
                "expected {} scalar values, got {}",
                n_scalars * self.len(),
                values.len()
            )));
        }
        self.n_scalars = n_scalars;
        self.scalar_features = values;
        Ok(self)
    }

    pub fn with_vectors(mut self, n_vectors: usize, values: Vec<Vec3>) -> Result<Self> {
        if values.len() != n_vectors * self.len() {
            return Err(Error::Precondition(format!(
                "expected {} vector values, got {}",
                n_vectors * self.len(),
                values.len()
            )));
        }
        self.n_vectors = n_vectors;
        self.vector_features = values;
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Labels) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::Precondition("label count does not match points".into()));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn scalar(&self, point: usize, s: usize) -> f64 {
        self.scalar_features[point * self.n_scalars + s]
    }

    pub fn vector(&self, point: usize, v: usize) -> Vec3 {
        self.vector_features[point * self.n_vectors + v]
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let p = self.len();
        if self.positions.iter().any(|x| !x.iter().all(|c| c.is_finite())) {
            return Err(Error::Precondition("non-finite position".into()));
        }
        if self.batch_ids.len() != p || self.frames.len() != p {
            return Err(Error::Precondition("batch_ids/frames length mismatch".into()));
        }
        if self.batch_ids.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Precondition("batch_ids must be non-decreasing".into()));
        }
        if self.scalar_features.len() != p * self.n_scalars
            || self.vector_features.len() != p * self.n_vectors
        {
            return Err(Error::Precondition("feature array size mismatch".into()));
        }
        if let Some(l) = &self.labels {
            if l.len() != p {
                return Err(Error::Precondition("label count does not match points".into()));
            }
        }
        Ok(())
    }

    /// Index ranges of the contiguous sample groups.
    pub fn groups(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.len() {
            if i == self.len() || self.batch_ids[i] != self.batch_ids[start] {
                out.push(start..i);
                start = i;
            }
        }
        out
    }

    /// Position of point `i`'s group in `groups()` for every point.
    pub fn group_index(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        for (g, r) in self.groups().into_iter().enumerate() {
            out.extend(std::iter::repeat(g).take(r.len()));
        }
        out
    }

    /// Keeps the points at `indices` (in the given order).
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let labels = self.labels.as_ref().map(|l| match l {
            Labels::Classes(c) => Labels::Classes(indices.iter().map(|&i| c[i]).collect()),
            Labels::Vectors(v) => Labels::Vectors(indices.iter().map(|&i| v[i]).collect()),
        });
        PointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            scalar_features: indices
                .iter()
                .flat_map(|&i| {
                    self.scalar_features[i * self.n_scalars..(i + 1) * self.n_scalars]
                        .iter()
                        .copied()
                })
                .collect(),
            n_scalars: self.n_scalars,
            vector_features: indices
                .iter()
                .flat_map(|&i| {
                    self.vector_features[i * self.n_vectors..(i + 1) * self.n_vectors]
                        .iter()
                        .copied()
                })
                .collect(),
            n_vectors: self.n_vectors,
            batch_ids: indices.iter().map(|&i| self.batch_ids[i]).collect(),
            labels,
            frames: indices.iter().map(|&i| self.frames[i]).collect(),
        }
    }

    /// Concatenates single- or multi-sample clouds into one batch with
    /// consecutive batch ids. Feature layouts must agree.
    pub fn concat(clouds: &[&PointCloud]) -> Result<PointCloud> {
        let first = clouds
            .first()
            .ok_or_else(|| Error::Precondition("cannot batch zero clouds".into()))?;
        let mut out = PointCloud::from_positions(Vec::new());
        out.n_scalars = first.n_scalars;
        out.n_vectors = first.n_vectors;
        let mut class_labels = Vec::new();
        let mut vector_labels = Vec::new();
        let mut next_id = 0;
        for c in clouds {
            if c.n_scalars != first.n_scalars || c.n_vectors != first.n_vectors {
                return Err(Error::Precondition("feature layouts differ across batch".into()));
            }
            let mut last = None;
            for &b in &c.batch_ids {
                if last.is_some_and(|l| l != b) {
                    next_id += 1;
                }
                last = Some(b);
                out.batch_ids.push(next_id);
            }
            if last.is_some() {
                next_id += 1;
            }
            out.positions.extend_from_slice(&c.positions);
            out.scalar_features.extend_from_slice(&c.scalar_features);
            out.vector_features.extend_from_slice(&c.vector_features);
            out.frames.extend_from_slice(&c.frames);
            match &c.labels {
                Some(Labels::Classes(l)) => class_labels.extend_from_slice(l),
                Some(Labels::Vectors(l)) => vector_labels.extend_from_slice(l),
                None => {}
            }
        }
        if class_labels.len() == out.len() && !class_labels.is_empty() {
            out.labels = Some(Labels::Classes(class_labels));
        } else if vector_labels.len() == out.len() && !vector_labels.is_empty() {
            out.labels = Some(Labels::Vectors(vector_labels));
        }
        Ok(out)
    }

    /// Writes the cloud in the column layout
    /// `x,y,z[,s0..][,v0x,v0y,v0z..][,label|lx,ly,lz][,batch]`.
    pub fn to_csv(&self) -> String {
        let mut header = vec!["x".to_string(), "y".into(), "z".into()];
        header.extend((0..self.n_scalars).map(|s| format!("s{s}")));
        for v in 0..self.n_vectors {
            header.extend([format!("v{v}x"), format!("v{v}y"), format!("v{v}z")]);
        }
        match &self.labels {
            Some(Labels::Classes(_)) => header.push("label".into()),
            Some(Labels::Vectors(_)) => header.extend(["lx".into(), "ly".into(), "lz".into()]),
            None => {}
        }
        header.push("batch".into());
        let mut out = header.join(",");
        out.push('\n');
        for i in 0..self.len() {
            let mut row: Vec<String> = self.positions[i].iter().map(|c| fmt_float(*c)).collect();
            for s in 0..self.n_scalars {
                row.push(fmt_float(self.scalar(i, s)));
            }
            for v in 0..self.n_vectors {
                row.extend(self.vector(i, v).iter().map(|c| fmt_float(*c)));
            }
            match &self.labels {
                Some(Labels::Classes(l)) => row.push(l[i].to_string()),
                Some(Labels::Vectors(l)) => row.extend(l[i].iter().map(|c| fmt_float(*c))),
                None => {}
            }
            row.push(self.batch_ids[i].to_string());
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    /// Parses the CSV layout written by [`PointCloud::to_csv`]. Columns are
    /// matched by name: `x,y,z` are required; `s<k>` scalar features;
    /// `v<k>x,v<k>y,v<k>z` vector features; `label` integer class or
    /// `lx,ly,lz` vector label; `batch` sample id (default 0).
    pub fn from_csv(text: &str) -> Result<PointCloud> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Parse("empty point-cloud CSV".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let find = |name: &str| cols.iter().position(|c| *c == name);
        let (xi, yi, zi) = match (find("x"), find("y"), find("z")) {
            (Some(x), Some(y), Some(z)) => (x, y, z),
            _ => return Err(Error::Parse("point-cloud CSV needs x,y,z columns".into())),
        };
        let scalar_cols: Vec<usize> = (0..)
            .map_while(|s| find(&format!("s{s}")))
            .collect();
        let vector_cols: Vec<[usize; 3]> = (0..)
            .map_while(|v| {
                Some([
                    find(&format!("v{v}x"))?,
                    find(&format!("v{v}y"))?,
                    find(&format!("v{v}z"))?,
                ])
            })
            .collect();
        let label_col = find("label");
        let vlabel_cols = match (find("lx"), find("ly"), find("lz")) {
            (Some(a), Some(b), Some(c)) => Some([a, b, c]),
            _ => None,
        };
        let batch_col = find("batch");
        let known = 3
            + scalar_cols.len()
            + 3 * vector_cols.len()
            + label_col.map_or(0, |_| 1)
            + vlabel_cols.map_or(0, |_| 3)
            + batch_col.map_or(0, |_| 1);
        if known != cols.len() {
            return Err(Error::Parse(format!("unrecognized columns in header `{header}`")));
        }

        let mut positions = Vec::new();
        let mut scalars = Vec::new();
        let mut vectors = Vec::new();
        let mut classes = Vec::new();
        let mut vlabels = Vec::new();
        let mut batch = Vec::new();
        for (lineno, line) in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != cols.len() {
                return Err(Error::Parse(format!(
                    "line {}: expected {} fields, found {}",
                    lineno + 1,
                    cols.len(),
                    fields.len()
                )));
            }
            let num = |i: usize| -> Result<f64> {
                fields[i]
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: `{}`: {e}", lineno + 1, fields[i])))
            };
            let int = |i: usize| -> Result<usize> {
                fields[i]
                    .parse::<usize>()
                    .map_err(|e| Error::Parse(format!("line {}: `{}`: {e}", lineno + 1, fields[i])))
            };
            positions.push(Vec3::new(num(xi)?, num(yi)?, num(zi)?));
            for &c in &scalar_cols {
                scalars.push(num(c)?);
            }
            for c in &vector_cols {
                vectors.push(Vec3::new(num(c[0])?, num(c[1])?, num(c[2])?));
            }
            if let Some(c) = label_col {
                classes.push(int(c)?);
            }
            if let Some(c) = vlabel_cols {
                vlabels.push(Vec3::new(num(c[0])?, num(c[1])?, num(c[2])?));
            }
            batch.push(match batch_col {
                Some(c) => int(c)?,
                None => 0,
            });
        }
        let mut cloud = PointCloud::from_positions(positions)
            .with_scalars(scalar_cols.len(), scalars)?
            .with_vectors(vector_cols.len(), vectors)?;
        cloud.batch_ids = batch;
        if label_col.is_some() {
            cloud.labels = Some(Labels::Classes(classes));
        } else if vlabel_cols.is_some() {
            cloud.labels = Some(Labels::Vectors(vlabels));
        }
        cloud.validate()?;
        Ok(cloud)
    }
}

fn fmt_float(v: f64) -> String {
    format!("{v:.17e}")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NeighborMode {
    Knn(usize),
    Radius(f64),
}

/// Directed edges `(target i, source j)` with `j ∈ N(i)`, grouped by target
/// in increasing order and, within a target, by increasing distance.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    pub targets: Vec<usize>,
    pub sources: Vec<usize>,
    pub mode: NeighborMode,
    pub n_points: usize,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.targets.iter().copied().zip(self.sources.iter().copied())
    }

    pub fn edge_set(&self) -> std::collections::BTreeSet<(usize, usize)> {
        self.edges().collect()
    }
}

/// Builds neighborhoods by exhaustive search inside each sample.
///
/// The query point itself is not a candidate. k-NN keeps the
/// `min(k, group size - 1)` closest points with ties broken toward the lower
/// index; radius mode keeps every other point within `r`. A point left
/// without neighbors receives a self-loop.
pub fn build_neighbors(cloud: &PointCloud, mode: NeighborMode) -> Result<NeighborGraph> {
    if cloud.is_empty() {
        return Err(Error::Precondition("cannot build neighbors of an empty cloud".into()));
    }
    match mode {
        NeighborMode::Knn(0) => {
            return Err(Error::Precondition("k must be positive".into()));
        }
        NeighborMode::Radius(r) if !(r > 0.0) => {
            return Err(Error::Precondition("radius must be positive".into()));
        }
        _ => {}
    }
    let mut targets = Vec::new();
    let mut sources = Vec::new();
    let mut candidates: Vec<(f64, usize)> = Vec::new();
    for group in cloud.groups() {
        for i in group.clone() {
            candidates.clear();
            let xi = cloud.positions[i];
            for j in group.clone() {
                if j != i {
                    candidates.push(((cloud.positions[j] - xi).norm_squared(), j));
                }
            }
            candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let before = sources.len();
            match mode {
                NeighborMode::Knn(k) => {
                    for &(_, j) in candidates.iter().take(k) {
                        targets.push(i);
                        sources.push(j);
                    }
                }
                NeighborMode::Radius(r) => {
                    let r2 = r * r;
                    for &(d2, j) in candidates.iter().take_while(|c| c.0 <= r2) {
                        let _ = d2;
                        targets.push(i);
                        sources.push(j);
                    }
                }
            }
            if sources.len() == before {
                targets.push(i);
                sources.push(i);
            }
        }
    }
    Ok(NeighborGraph {
        targets,
        sources,
        mode,
        n_points: cloud.len(),
    })
}

/// Greedy max-min subsampling inside each sample, seeded at the lowest index
/// of the group. Returns `ceil(ratio * group size)` indices per group, sorted
/// ascending.
pub fn farthest_point_sample(cloud: &PointCloud, ratio: f64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Precondition(format!("FPS ratio {ratio} outside (0, 1]")));
    }
    let mut out = Vec::new();
    for group in cloud.groups() {
        let n = group.len();
        let m = ((ratio * n as f64) - 1e-9).ceil().max(1.0) as usize;
        let m = m.min(n);
        let pts = &cloud.positions[group.clone()];
        let mut chosen = vec![false; n];
        let mut min_d2 = vec![f64::INFINITY; n];
        let mut current = 0;
        let mut selected = Vec::with_capacity(m);
        for _ in 0..m {
            chosen[current] = true;
            selected.push(group.start + current);
            let mut best = None::<(f64, usize)>;
            for j in 0..n {
                if chosen[j] {
                    continue;
                }
                let d2 = (pts[j] - pts[current]).norm_squared();
                if d2 < min_d2[j] {
                    min_d2[j] = d2;
                }
                if best.map_or(true, |(bd, _)| min_d2[j] > bd) {
                    best = Some((min_d2[j], j));
                }
            }
            match best {
                Some((_, j)) => current = j,
                None => break,
            }
        }
        selected.sort_unstable();
        out.extend(selected);
    }
    Ok(out)
}

pub const IDW_EPSILON: f64 = 1e-8;

/// Sparse linear map from coarse to fine points: fine row `i` is
/// `Σ_t weights[t] * coarse[indices[t]]` over its entries `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationPlan {
    pub fine_rows: Vec<usize>,
    pub coarse_rows: Vec<usize>,
    pub weights: Vec<f64>,
    pub n_fine: usize,
    pub n_coarse: usize,
}

/// Inverse-distance weights `1/(d + ε)` over the `k` nearest coarse points of
/// the same sample, normalized to sum to one. A fine point that coincides
/// with a coarse point copies it exactly.
pub fn interpolation_plan(
    coarse: &PointCloud,
    fine: &PointCloud,
    k: usize,
) -> Result<InterpolationPlan> {
    if k == 0 {
        return Err(Error::Precondition("interpolation needs k >= 1".into()));
    }
    let coarse_groups = coarse.groups();
    let coarse_lookup: std::collections::HashMap<usize, Range<usize>> = coarse_groups
        .iter()
        .map(|r| (coarse.batch_ids[r.start], r.clone()))
        .collect();
    let mut plan = InterpolationPlan {
        fine_rows: Vec::new(),
        coarse_rows: Vec::new(),
        weights: Vec::new(),
        n_fine: fine.len(),
        n_coarse: coarse.len(),
    };
    let mut cand: Vec<(f64, usize)> = Vec::new();
    for i in 0..fine.len() {
        let range = coarse_lookup.get(&fine.batch_ids[i]).ok_or_else(|| {
            Error::Precondition(format!("no coarse points for sample {}", fine.batch_ids[i]))
        })?;
        cand.clear();
        for j in range.clone() {
            cand.push(((coarse.positions[j] - fine.positions[i]).norm(), j));
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if cand[0].0 == 0.0 {
            plan.fine_rows.push(i);
            plan.coarse_rows.push(cand[0].1);
            plan.weights.push(1.0);
            continue;
        }
        let take = &cand[..k.min(cand.len())];
        let total: f64 = take.iter().map(|(d, _)| 1.0 / (d + IDW_EPSILON)).sum();
        for &(d, j) in take {
            plan.fine_rows.push(i);
            plan.coarse_rows.push(j);
            plan.weights.push(1.0 / (d + IDW_EPSILON) / total);
        }
    }
    Ok(plan)
}

/// Interpolates a coarse field (`P' x ...` tensor) onto fine positions.
pub fn interpolate_up(
    coarse_values: &Tensor,
    coarse: &PointCloud,
    fine: &PointCloud,
    k: usize,
) -> Result<Tensor> {
    let plan = interpolation_plan(coarse, fine, k)?;
    apply_plan(&plan, coarse_values)
}

pub fn apply_plan(plan: &InterpolationPlan, coarse_values: &Tensor) -> Result<Tensor> {
    let shape = coarse_values.shape();
    if shape.first() != Some(&plan.n_coarse) {
        return Err(Error::Shape {
            op: "interpolate_up",
            detail: format!("coarse field shape {shape:?} vs {} coarse points", plan.n_coarse),
        });
    }
    let row = coarse_values.len() / plan.n_coarse.max(1);
    let mut out_shape = shape.to_vec();
    out_shape[0] = plan.n_fine;
    let mut out = vec![0.0; plan.n_fine * row];
    let src = coarse_values.data();
    for ((&f, &c), &w) in plan.fine_rows.iter().zip(&plan.coarse_rows).zip(&plan.weights) {
        let dst = &mut out[f * row..(f + 1) * row];
        for (d, s) in dst.iter_mut().zip(&src[c * row..(c + 1) * row]) {
            *d += w * s;
        }
    }
    Tensor::new(out_shape, out)
}

/// Applies `g` to positions, vector features, frames and vector labels.
pub fn transform_cloud(cloud: &PointCloud, g: &RigidMotion) -> PointCloud {
    let mut out = cloud.clone();
    for p in &mut out.positions {
        *p = g.apply_point(p);
    }
    for v in &mut out.vector_features {
        *v = g.apply_vector(v);
    }
    for f in &mut out.frames {
        *f = g.rotation.compose(f);
    }
    if let Some(Labels::Vectors(l)) = &mut out.labels {
        for v in l {
            *v = g.apply_vector(v);
        }
    }
    out
}

/// Reorders points by `perm` (new point `i` is old point `perm[i]`).
pub fn permute_cloud(cloud: &PointCloud, perm: &[usize]) -> PointCloud {
    cloud.select(perm)
}

/// Mean neighbor distance over all non-self edges; the natural length unit
/// of a dataset for attribute normalization.
pub fn mean_neighbor_distance(cloud: &PointCloud, graph: &NeighborGraph) -> f64 {
    let (sum, count) = graph
        .edges()
        .filter(|(i, j)| i != j)
        .fold((0.0, 0usize), |(s, c), (i, j)| {
            (s + (cloud.positions[j] - cloud.positions[i]).norm(), c + 1)
        });
    if count == 0 {
        1.0
    } else {
        sum / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom3d::{random_motion, random_rotation};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line3() -> PointCloud {
        PointCloud::from_positions(vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(2.0, 0.0, 0.0),
        ])
    }

    fn random_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
        let pts = (0..n)
            .map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen()) * 2.0)
            .collect();
        let vecs = (0..n)
            .map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        PointCloud::from_positions(pts)
            .with_vectors(1, vecs)
            .unwrap()
            .with_scalars(1, (0..n).map(|i| i as f64).collect())
            .unwrap()
    }

    #[test]
    fn knn_on_collinear_points_breaks_ties_low() {
        let g = build_neighbors(&line3(), NeighborMode::Knn(1)).unwrap();
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 1), (1, 0), (2, 1)]);
    }

    #[test]
    fn knn_matches_brute_force_distance_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = random_cloud(&mut rng, 10);
        let k = 3;
        let g = build_neighbors(&cloud, NeighborMode::Knn(k)).unwrap();
        for i in 0..10 {
            let mut table: Vec<(f64, usize)> = (0..10)
                .filter(|&j| j != i)
                .map(|j| ((cloud.positions[i] - cloud.positions[j]).norm(), j))
                .collect();
            table.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expect: Vec<usize> = table[..k].iter().map(|t| t.1).collect();
            let got: Vec<usize> = g.edges().filter(|e| e.0 == i).map(|e| e.1).collect();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn small_radius_gives_self_loops() {
        let g = build_neighbors(&line3(), NeighborMode::Radius(0.5)).unwrap();
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 0), (1, 1), (2, 2)]);
        let g = build_neighbors(&line3(), NeighborMode::Radius(1.0)).unwrap();
        assert_eq!(g.edge_set().len(), 4);
    }

    #[test]
    fn neighbor_errors() {
        let empty = PointCloud::from_positions(vec![]);
        assert!(build_neighbors(&empty, NeighborMode::Knn(2)).is_err());
        assert!(build_neighbors(&line3(), NeighborMode::Knn(0)).is_err());
        assert!(build_neighbors(&line3(), NeighborMode::Radius(-1.0)).is_err());
    }

    #[test]
    fn knn_is_permutation_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = random_cloud(&mut rng, 10);
        let mut perm: Vec<usize> = (0..10).collect();
        perm.shuffle(&mut rng);
        let permuted = permute_cloud(&cloud, &perm);
        let g = build_neighbors(&cloud, NeighborMode::Knn(4)).unwrap();
        let gp = build_neighbors(&permuted, NeighborMode::Knn(4)).unwrap();
        let mapped: std::collections::BTreeSet<_> =
            gp.edges().map(|(i, j)| (perm[i], perm[j])).collect();
        assert_eq!(mapped, g.edge_set());
    }

    #[test]
    fn neighbors_stay_inside_batch_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_cloud(&mut rng, 5);
        let b = random_cloud(&mut rng, 1);
        let c = random_cloud(&mut rng, 6);
        let batch = PointCloud::concat(&[&a, &b, &c]).unwrap();
        assert_eq!(batch.groups(), vec![0..5, 5..6, 6..12]);
        let g = build_neighbors(&batch, NeighborMode::Knn(16)).unwrap();
        for (i, j) in g.edges() {
            assert_eq!(batch.batch_ids[i], batch.batch_ids[j]);
        }
        // Singleton sample falls back to a self-loop.
        assert_eq!(g.edges().filter(|e| e.0 == 5).collect::<Vec<_>>(), vec![(5, 5)]);
        for i in 0..12 {
            assert!(g.targets.contains(&i));
        }
    }

    #[test]
    fn neighbors_are_motion_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let cloud = random_cloud(&mut rng, 20);
            let g = random_motion(&mut rng, 3.0);
            let a = build_neighbors(&cloud, NeighborMode::Knn(5)).unwrap();
            let b = build_neighbors(&transform_cloud(&cloud, &g), NeighborMode::Knn(5)).unwrap();
            assert_eq!(a.edge_set(), b.edge_set());
        }
    }

    #[test]
    fn fps_examples() {
        assert_eq!(farthest_point_sample(&line3(), 2.0 / 3.0).unwrap(), vec![0, 2]);
        assert_eq!(farthest_point_sample(&line3(), 1.0).unwrap(), vec![0, 1, 2]);
        assert!(farthest_point_sample(&line3(), 0.0).is_err());
        assert!(farthest_point_sample(&line3(), 1.5).is_err());
    }

    fn min_pairwise(pts: &[Vec3], idx: &[usize]) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..idx.len() {
            for b in (a + 1)..idx.len() {
                best = best.min((pts[idx[a]] - pts[idx[b]]).norm());
            }
        }
        best
    }

    #[test]
    fn fps_within_factor_two_of_exhaustive_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let cloud = random_cloud(&mut rng, 20);
            let sel = farthest_point_sample(&cloud, 0.2).unwrap();
            assert_eq!(sel.len(), 4);
            let fps_min = min_pairwise(&cloud.positions, &sel);
            let mut best: f64 = 0.0;
            for a in 0..20 {
                for b in a + 1..20 {
                    for c in b + 1..20 {
                        for d in c + 1..20 {
                            best = best.max(min_pairwise(&cloud.positions, &[a, b, c, d]));
                        }
                    }
                }
            }
            assert!(fps_min >= 0.5 * best - 1e-12, "{fps_min} vs optimum {best}");
        }
    }

    #[test]
    fn fps_commutes_with_motion_and_respects_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_cloud(&mut rng, 9);
        let b = random_cloud(&mut rng, 7);
        let batch = PointCloud::concat(&[&a, &b]).unwrap();
        let sel = farthest_point_sample(&batch, 0.5).unwrap();
        assert_eq!(sel.iter().filter(|&&i| i < 9).count(), 5);
        assert_eq!(sel.iter().filter(|&&i| i >= 9).count(), 4);
        let g = random_motion(&mut rng, 1.0);
        assert_eq!(farthest_point_sample(&transform_cloud(&batch, &g), 0.5).unwrap(), sel);
    }

    #[test]
    fn interpolation_examples() {
        let coarse = PointCloud::from_positions(vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0)]);
        let values = Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap();
        let fine = PointCloud::from_positions(vec![
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(2.0, 0.0, 0.0),
            Vec3::new(0.3, 0.5, 0.0),
        ]);
        let out = interpolate_up(&values, &coarse, &fine, 2).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-9);
        assert!((out.data()[1] - 2.0).abs() < 1e-9);

        let constant = Tensor::new(vec![2, 2], vec![3.5, -1.0, 3.5, -1.0]).unwrap();
        let out = interpolate_up(&constant, &coarse, &fine, 2).unwrap();
        for row in out.data().chunks(2) {
            assert!((row[0] - 3.5).abs() < 1e-12 && (row[1] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn transform_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cloud = random_cloud(&mut rng, 6);
        assert_eq!(transform_cloud(&cloud, &RigidMotion::identity()), cloud);

        let shift = RigidMotion::from_translation(Vec3::new(1.0, -2.0, 0.5));
        let moved = transform_cloud(&cloud, &shift);
        assert_eq!(moved.vector_features, cloud.vector_features);
        assert_eq!(moved.scalar_features, cloud.scalar_features);

        for _ in 0..20 {
            let g = random_motion(&mut rng, 2.0);
            let h = random_motion(&mut rng, 2.0);
            let once = transform_cloud(&cloud, &g.compose(&h));
            let twice = transform_cloud(&transform_cloud(&cloud, &h), &g);
            for (a, b) in once.positions.iter().zip(&twice.positions) {
                assert!((a - b).norm() < 1e-12);
            }
            for (a, b) in once.vector_features.iter().zip(&twice.vector_features) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn vector_labels_rotate_class_labels_do_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = random_cloud(&mut rng, 3);
        let r = random_rotation(&mut rng);
        let g = RigidMotion::from_rotation(r);
        let classes = base.clone().with_labels(Labels::Classes(vec![0, 1, 2])).unwrap();
        assert_eq!(transform_cloud(&classes, &g).labels, classes.labels);
        let v = Vec3::new(1.0, 2.0, 3.0);
        let vectors = base.with_labels(Labels::Vectors(vec![v; 3])).unwrap();
        match transform_cloud(&vectors, &g).labels {
            Some(Labels::Vectors(l)) => assert!((l[0] - r.apply(&v)).norm() < 1e-12),
            _ => panic!("labels lost"),
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_cloud(&mut rng, 4)
            .with_labels(Labels::Classes(vec![0, 1, 1, 2]))
            .unwrap();
        let b = random_cloud(&mut rng, 3)
            .with_labels(Labels::Classes(vec![2, 2, 0]))
            .unwrap();
        let batch = PointCloud::concat(&[&a, &b]).unwrap();
        let back = PointCloud::from_csv(&batch.to_csv()).unwrap();
        assert_eq!(back, batch);
        assert!(PointCloud::from_csv("x,y\n1,2\n").is_err());
        assert!(PointCloud::from_csv("x,y,z,q\n1,2,3,4\n").is_err());
        assert!(PointCloud::from_csv("x,y,z\n1,2\n").is_err());
    }
}
