//! Posterior field statistics, the text field format and PPM heatmaps.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, InverseGamma};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fields::DisplacementNet;
use crate::inference::{sample_posterior, GammaParams, Hyper, Problem, VariationalParams};
use crate::mesh::{Point, TriMesh};

pub const Q_LO: f64 = 0.025;
pub const Q_HI: f64 = 0.975;

/// Names of the reported fields, in file order.
pub const FIELD_NAMES: [&str; 7] = ["ln_e", "u1", "u2", "s11", "s12", "s22", "lambda_c_inv"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    /// One value per inversion-mesh element (or collocation point at its centroid).
    Element,
    /// One value per mesh node.
    Node,
    /// One value per observation point.
    Point,
}

impl FieldKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FieldKind::Element => "element",
            FieldKind::Node => "node",
            FieldKind::Point => "point",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "element" => Some(FieldKind::Element),
            "node" => Some(FieldKind::Node),
            "point" => Some(FieldKind::Point),
            _ => None,
        }
    }
}

/// Empirical quantile with linear interpolation between order statistics:
/// position `h = (n - 1) p` in the sorted sample.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let w = h - lo as f64;
    if w == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + w * (sorted[hi] - sorted[lo])
    }
}

/// Location-wise mean, variance, 2.5% and 97.5% quantiles, with an optional
/// flag per location telling whether the truth lies inside `[q_lo, q_hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldStats {
    pub name: String,
    pub kind: FieldKind,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub q_lo: Vec<f64>,
    pub q_hi: Vec<f64>,
    pub envelope: Option<Vec<bool>>,
}

impl FieldStats {
    /// `samples[b][i]` is draw `b` at location `i`. Variance uses `1/B`.
    pub fn from_samples(name: &str, kind: FieldKind, samples: &[Vec<f64>]) -> Result<Self> {
        let b = samples.len();
        if b < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 samples, got {b}")));
        }
        let n = samples[0].len();
        if samples.iter().any(|s| s.len() != n) {
            return Err(Error::InvalidArgument("samples have different lengths".into()));
        }
        let mut stats = Self {
            name: name.to_string(),
            kind,
            mean: vec![0.0; n],
            variance: vec![0.0; n],
            q_lo: vec![0.0; n],
            q_hi: vec![0.0; n],
            envelope: None,
        };
        let mut column = vec![0.0; b];
        for i in 0..n {
            for (c, s) in column.iter_mut().zip(samples) {
                *c = s[i];
            }
            // shifted by the first draw, so constant samples give their value exactly
            let c = column[0];
            let mean = c + column.iter().map(|v| v - c).sum::<f64>() / b as f64;
            stats.mean[i] = mean;
            stats.variance[i] = column.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / b as f64;
            column.sort_by(f64::total_cmp);
            stats.q_lo[i] = quantile_sorted(&column, Q_LO);
            stats.q_hi[i] = quantile_sorted(&column, Q_HI);
        }
        Ok(stats)
    }

    /// Statistics of `1/lambda` for `lambda ~ Gamma(a, b)` (rate `b`), in
    /// closed form. The mean `b/(a-1)` needs `a > 1`; below that it does not
    /// exist and `b/a = 1/E[lambda]` is reported instead. The variance is
    /// infinite for `a <= 2`.
    pub fn inverse_gamma(name: &str, kind: FieldKind, g: &GammaParams) -> Result<Self> {
        let n = g.len();
        let mut stats = Self {
            name: name.to_string(),
            kind,
            mean: Vec::with_capacity(n),
            variance: Vec::with_capacity(n),
            q_lo: Vec::with_capacity(n),
            q_hi: Vec::with_capacity(n),
            envelope: None,
        };
        for (&a, &b) in g.a.iter().zip(&g.b) {
            let dist = InverseGamma::new(a, b)
                .map_err(|e| Error::InvalidArgument(format!("Gamma({a}, {b}): {e}")))?;
            stats.mean.push(if a > 1.0 { b / (a - 1.0) } else { b / a });
            stats.variance.push(if a > 2.0 {
                b * b / ((a - 1.0).powi(2) * (a - 2.0))
            } else {
                f64::INFINITY
            });
            stats.q_lo.push(dist.inverse_cdf(Q_LO));
            stats.q_hi.push(dist.inverse_cdf(Q_HI));
        }
        Ok(stats)
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn set_truth(&mut self, truth: &[f64]) -> Result<()> {
        if truth.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "{}: truth has {} values for {} locations",
                self.name,
                truth.len(),
                self.len()
            )));
        }
        self.envelope = Some(
            truth
                .iter()
                .enumerate()
                .map(|(i, &t)| self.q_lo[i] <= t && t <= self.q_hi[i])
                .collect(),
        );
        Ok(())
    }

    /// Fraction of locations whose truth lies in the credible interval.
    pub fn coverage(&self) -> Option<f64> {
        let env = self.envelope.as_ref()?;
        Some(env.iter().filter(|&&v| v).count() as f64 / env.len().max(1) as f64)
    }

    /// Rows `mean variance q_lo q_hi [inside]`.
    pub fn to_field(&self, meta: &FieldMeta) -> Field {
        let comps = if self.envelope.is_some() { 5 } else { 4 };
        let mut values = Vec::with_capacity(comps * self.len());
        for i in 0..self.len() {
            values.extend([self.mean[i], self.variance[i], self.q_lo[i], self.q_hi[i]]);
            if let Some(env) = &self.envelope {
                values.push(if env[i] { 1.0 } else { 0.0 });
            }
        }
        Field {
            kind: self.kind,
            components: comps,
            values,
            meta: meta.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorFieldStats {
    /// In the order of [`FIELD_NAMES`].
    pub fields: Vec<FieldStats>,
}

impl PosteriorFieldStats {
    pub fn get(&self, name: &str) -> Option<&FieldStats> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut FieldStats> {
        self.fields.iter_mut().find(|f| f.name == name)
    }
}

/// Masked basis `d(s) NN(s)` at `points`, one `points x d_z` block per component.
pub fn displacement_basis(net: &DisplacementNet, points: &[Point]) -> Result<[Tensor; 2]> {
    let raw = net.mlp.forward_f64(&Tensor::from_fn(points.len(), 2, |i, j| points[i][j]))?;
    let d_z = net.d_z;
    Ok(std::array::from_fn(|c| {
        Tensor::from_fn(points.len(), d_z, |i, k| net.mask.factor(points[i]) * raw.get(i, c * d_z + k))
    }))
}

fn apply_basis(basis: &Tensor, z: &[f64]) -> Vec<f64> {
    (0..basis.rows())
        .map(|i| basis.row_slice(i).iter().zip(z).map(|(a, b)| a * b).sum())
        .collect()
}

/// Draws `b` posterior samples and summarizes `ln E` and the stress per
/// element, the displacement at the mesh nodes, and `1/lambda_c` per
/// collocation point. Fields are summarized on up to `threads` threads; the
/// result does not depend on the thread count.
pub fn posterior_stats(
    params: &VariationalParams,
    problem: &Problem,
    hyper: &Hyper,
    b: usize,
    seed: u64,
    threads: usize,
) -> Result<PosteriorFieldStats> {
    if b < 2 {
        return Err(Error::InvalidArgument(format!("need B >= 2 posterior samples, got {b}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = sample_posterior(params, b, &mut rng)?;
    let n_el = problem.n_elements();
    let basis = displacement_basis(&params.disp, problem.mesh.nodes())?;

    let mut sampled: Vec<(&str, FieldKind, Vec<Vec<f64>>)> = vec![
        ("ln_e", FieldKind::Element, draws.iter().map(|d| d.x.clone()).collect()),
        ("u1", FieldKind::Node, draws.iter().map(|d| apply_basis(&basis[0], &d.z)).collect()),
        ("u2", FieldKind::Node, draws.iter().map(|d| apply_basis(&basis[1], &d.z)).collect()),
    ];
    for (c, name) in ["s11", "s12", "s22"].into_iter().enumerate() {
        let comp = draws.iter().map(|d| d.chi[c * n_el..(c + 1) * n_el].to_vec()).collect();
        sampled.push((name, FieldKind::Element, comp));
    }

    let threads = threads.clamp(1, sampled.len());
    let chunk = sampled.len().div_ceil(threads);
    let mut fields: Vec<FieldStats> = std::thread::scope(|scope| {
        let handles: Vec<_> = sampled
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|(name, kind, s)| FieldStats::from_samples(name, *kind, s))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("statistics thread panicked"))
            .collect::<Result<Vec<Vec<_>>>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    fields.push(FieldStats::inverse_gamma("lambda_c_inv", FieldKind::Element, &hyper.lambda_c)?);
    Ok(PosteriorFieldStats { fields })
}

/// Provenance written into every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FieldMeta {
    pub config_hash: String,
    pub seed: u64,
}

/// A table of `n` entities with `components` values each (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub kind: FieldKind,
    pub components: usize,
    pub values: Vec<f64>,
    pub meta: FieldMeta,
}

impl Field {
    pub fn n(&self) -> usize {
        self.values.len() / self.components.max(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.components..(i + 1) * self.components]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.n()).map(|i| self.values[i * self.components + c]).collect()
    }
}

/// Text form:
///
/// ```text
/// wnvi-field v1 <kind> <n> <components> config=<hash> seed=<seed>
/// <index> <v1> ... <v_components>
/// ```
///
/// Values use 17 significant digits, so reading back is bit-exact.
pub fn format_field(field: &Field) -> Result<String> {
    if field.components == 0 || field.values.len() % field.components != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} values do not form rows of {} components",
            field.values.len(),
            field.components
        )));
    }
    if field.meta.config_hash.is_empty() || field.meta.config_hash.contains(char::is_whitespace) {
        return Err(Error::InvalidArgument("config hash must be a non-empty token".into()));
    }
    let mut out = format!(
        "wnvi-field v1 {} {} {} config={} seed={}\n",
        field.kind.as_str(),
        field.n(),
        field.components,
        field.meta.config_hash,
        field.meta.seed
    );
    for i in 0..field.n() {
        write!(out, "{i}").unwrap();
        for v in field.row(i) {
            write!(out, " {v:.16e}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_field(text: &str) -> Result<Field> {
    let err = |line: usize, msg: String| Error::Parse { line, msg };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let tok: Vec<&str> = header.split_whitespace().collect();
    if tok.len() != 7 || tok[0] != "wnvi-field" || tok[1] != "v1" {
        return Err(err(1, format!("bad header {header:?}")));
    }
    let kind = FieldKind::parse(tok[2]).ok_or_else(|| err(1, format!("unknown kind {:?}", tok[2])))?;
    let n: usize = tok[3].parse().map_err(|_| err(1, format!("bad count {:?}", tok[3])))?;
    let components: usize = tok[4]
        .parse()
        .ok()
        .filter(|&c| c > 0)
        .ok_or_else(|| err(1, format!("bad component count {:?}", tok[4])))?;
    let config_hash = tok[5]
        .strip_prefix("config=")
        .filter(|h| !h.is_empty())
        .ok_or_else(|| err(1, "missing config=<hash>".into()))?
        .to_string();
    let seed: u64 = tok[6]
        .strip_prefix("seed=")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| err(1, "missing seed=<seed>".into()))?;

    let mut values = Vec::with_capacity(n * components);
    for i in 0..n {
        let line_no = i + 2;
        let line = lines
            .next()
            .ok_or_else(|| err(line_no, format!("expected {n} rows, file ends after {i}")))?;
        let mut it = line.split_whitespace();
        let idx: Option<usize> = it.next().and_then(|s| s.parse().ok());
        if idx != Some(i) {
            return Err(err(line_no, format!("expected row index {i}")));
        }
        let before = values.len();
        for t in it {
            values.push(t.parse::<f64>().map_err(|_| err(line_no, format!("bad number {t:?}")))?);
        }
        if values.len() - before != components {
            return Err(err(
                line_no,
                format!("expected {components} values, found {}", values.len() - before),
            ));
        }
    }
    if let Some((k, _)) = lines.enumerate().find(|(_, l)| !l.trim().is_empty()) {
        return Err(err(n + 2 + k, "unexpected data after the last row".into()));
    }
    Ok(Field {
        kind,
        components,
        values,
        meta: FieldMeta { config_hash, seed },
    })
}

pub fn write_field(path: &Path, field: &Field) -> Result<()> {
    std::fs::write(path, format_field(field)?)?;
    Ok(())
}

pub fn read_field(path: &Path) -> Result<Field> {
    parse_field(&std::fs::read_to_string(path)?)
}

/// Anchors of the colormap, evenly spaced on `[0, 1]`; colors between two
/// anchors are interpolated linearly per channel. Dark blue, light blue,
/// white, orange, dark red.
pub const COLORMAP: [[u8; 3]; 5] = [
    [5, 48, 97],
    [103, 169, 207],
    [247, 247, 247],
    [239, 138, 98],
    [103, 0, 13],
];

pub fn colormap(t: f64) -> [u8; 3] {
    let t = if t.is_nan() { 0.5 } else { t.clamp(0.0, 1.0) };
    let pos = t * (COLORMAP.len() - 1) as f64;
    let k = (pos.floor() as usize).min(COLORMAP.len() - 2);
    let w = pos - k as f64;
    std::array::from_fn(|c| {
        let (a, b) = (COLORMAP[k][c] as f64, COLORMAP[k + 1][c] as f64);
        (a + w * (b - a)).round() as u8
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ColorScale {
    /// Field minimum to maximum; a constant field maps to the middle color.
    Auto,
    Fixed { min: f64, max: f64 },
}

/// Binary PPM of a field on `mesh`, `px` pixels per grid cell, `y` up.
/// Element fields fill their triangles; node fields are averaged over the
/// three nodes of each element.
pub fn render_heatmap(
    values: &[f64],
    kind: FieldKind,
    mesh: &TriMesh,
    scale: ColorScale,
    px: usize,
    meta: &FieldMeta,
) -> Result<Vec<u8>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("cannot render an empty field".into()));
    }
    if px == 0 {
        return Err(Error::InvalidArgument("pixels per cell must be positive".into()));
    }
    let per_element: Vec<f64> = match kind {
        FieldKind::Element if values.len() == mesh.n_elements() => values.to_vec(),
        FieldKind::Node if values.len() == mesh.n_nodes() => mesh
            .elements()
            .iter()
            .map(|el| el.iter().map(|&n| values[n]).sum::<f64>() / 3.0)
            .collect(),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "{} values do not match a {} field on this mesh",
                values.len(),
                kind.as_str()
            )))
        }
    };
    if per_element.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("field has non-finite values".into()));
    }
    let (lo, hi) = match scale {
        ColorScale::Auto => per_element
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v))),
        ColorScale::Fixed { min, max } => (min, max),
    };
    let colors: Vec<[u8; 3]> = per_element
        .iter()
        .map(|&v| colormap(if hi > lo { (v - lo) / (hi - lo) } else { 0.5 }))
        .collect();

    let side = (mesh.n_nodes_per_side() - 1) * px;
    let mut img = format!(
        "P6\n# config={} seed={} min={lo:e} max={hi:e}\n{side} {side}\n255\n",
        meta.config_hash, meta.seed
    )
    .into_bytes();
    img.reserve(3 * side * side);
    for row in 0..side {
        for col in 0..side {
            let s = [(col as f64 + 0.5) / side as f64, 1.0 - (row as f64 + 0.5) / side as f64];
            img.extend(colors[mesh.locate_element(s)?]);
        }
    }
    Ok(img)
}
