//! Bilinear attention over a scene graph's own connectivity, stacked
//! residually, pooled and projected to a fixed-length graph embedding.
//! Forward and backward are written out by hand.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Table;
use crate::nn::{axpy, dot, Linear};
use crate::rng;
use crate::train::GradCheckReport;
use crate::types::SceneGraph;

use super::text::{HeteroVocab, Side};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Sum,
    Mean,
}

/// `M_ij = 1` iff entity `i` takes part in relation `j`; `A` is `M` with
/// rows normalized (zero rows stay zero).
#[derive(Debug, Clone, PartialEq)]
pub struct Connection {
    pub m: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
}

pub fn build_connection(g: &SceneGraph) -> Connection {
    let (ne, nr) = (g.entities.len(), g.relations.len());
    let mut m = vec![vec![0.0; nr]; ne];
    for (j, rel) in g.relations.iter().enumerate() {
        for e in [rel.subject(), rel.object()] {
            if e < ne {
                m[e][j] = 1.0;
            }
        }
    }
    let a = m
        .iter()
        .map(|row| {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter().map(|v| v / s).collect()
            } else {
                vec![0.0; nr]
            }
        })
        .collect();
    Connection { m, a }
}

/// Per-side lookup tables: entities, and the subject / predicate / object
/// parts of a relation embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideTables {
    pub entity: Table,
    pub subject: Table,
    pub predicate: Table,
    pub object: Table,
}

impl SideTables {
    fn gaussian(n_ent: usize, n_pred: usize, d: usize, std: f64, r: &mut impl Rng) -> Self {
        SideTables {
            entity: Table::gaussian(n_ent, d, std, r),
            subject: Table::gaussian(n_ent, d, std, r),
            predicate: Table::gaussian(n_pred, d, std, r),
            object: Table::gaussian(n_ent, d, std, r),
        }
    }

    fn zeros_like(&self) -> Self {
        let z = |t: &Table| Table::zeros(t.rows, t.cols);
        SideTables {
            entity: z(&self.entity),
            subject: z(&self.subject),
            predicate: z(&self.predicate),
            object: z(&self.object),
        }
    }
}

/// One residual layer: `N_p` rank-one glimpses `u_p F_i · v_p R_j` and the
/// map `W_b` from glimpses back to `N_d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanLayer {
    /// `N_p x N_d`
    pub u: Table,
    /// `N_p x 3N_d`
    pub v: Table,
    /// `N_d x N_p`
    pub w_b: Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedParams {
    pub layers: Vec<BanLayer>,
    pub fc1: Linear,
    pub fc2: Linear,
    pub image: SideTables,
    pub text: SideTables,
}

impl EmbedParams {
    pub fn zeros_like(&self) -> Self {
        let z = |t: &Table| Table::zeros(t.rows, t.cols);
        EmbedParams {
            layers: self
                .layers
                .iter()
                .map(|l| BanLayer {
                    u: z(&l.u),
                    v: z(&l.v),
                    w_b: z(&l.w_b),
                })
                .collect(),
            fc1: Linear::zeros(self.fc1.out, self.fc1.inp),
            fc2: Linear::zeros(self.fc2.out, self.fc2.inp),
            image: self.image.zeros_like(),
            text: self.text.zeros_like(),
        }
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.u"), &mut l.u.data[..]));
            out.push((format!("layer{i}.v"), &mut l.v.data[..]));
            out.push((format!("layer{i}.w_b"), &mut l.w_b.data[..]));
        }
        out.push(("fc1.w".into(), &mut self.fc1.w[..]));
        out.push(("fc1.b".into(), &mut self.fc1.b[..]));
        out.push(("fc2.w".into(), &mut self.fc2.w[..]));
        out.push(("fc2.b".into(), &mut self.fc2.b[..]));
        for (side, t) in [("image", &mut self.image), ("text", &mut self.text)] {
            out.push((format!("{side}.entity"), &mut t.entity.data[..]));
            out.push((format!("{side}.subject"), &mut t.subject.data[..]));
            out.push((format!("{side}.predicate"), &mut t.predicate.data[..]));
            out.push((format!("{side}.object"), &mut t.object.data[..]));
        }
        out
    }

    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.u"), &l.u.data[..]));
            out.push((format!("layer{i}.v"), &l.v.data[..]));
            out.push((format!("layer{i}.w_b"), &l.w_b.data[..]));
        }
        out.push(("fc1.w".into(), &self.fc1.w[..]));
        out.push(("fc1.b".into(), &self.fc1.b[..]));
        out.push(("fc2.w".into(), &self.fc2.w[..]));
        out.push(("fc2.b".into(), &self.fc2.b[..]));
        for (side, t) in [("image", &self.image), ("text", &self.text)] {
            out.push((format!("{side}.entity"), &t.entity.data[..]));
            out.push((format!("{side}.subject"), &t.subject.data[..]));
            out.push((format!("{side}.predicate"), &t.predicate.data[..]));
            out.push((format!("{side}.object"), &t.object.data[..]));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.blocks()
            .iter()
            .map(|(_, b)| b.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for (_, b) in self.blocks_mut() {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn step(&mut self, grad: &EmbedParams, lr: f64) {
        let g = grad.blocks();
        for ((_, p), (_, d)) in self.blocks_mut().into_iter().zip(g) {
            axpy(-lr, d, p);
        }
    }

    fn side(&self, side: Side) -> &SideTables {
        match side {
            Side::Image => &self.image,
            Side::Text => &self.text,
        }
    }

    fn side_mut(&mut self, side: Side) -> &mut SideTables {
        match side {
            Side::Image => &mut self.image,
            Side::Text => &mut self.text,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedShape {
    pub embed_dim: usize,
    pub residual_layers: usize,
    pub glimpses: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub pooling: Pooling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgEmbedder {
    pub shape: EmbedShape,
    pub params: EmbedParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEmbedding {
    pub vector: Vec<f64>,
    pub side: Side,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct EmbedCache {
    side: Side,
    classes: Vec<usize>,
    /// `(subject class, predicate, object class)` per relation.
    rel_tokens: Vec<(usize, usize, usize)>,
    a: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    /// `F_0 .. F_L`.
    f: Vec<Vec<Vec<f64>>>,
    /// Per layer: `a_ip = u_p · F_i`, `b_jp = v_p · R_j`, glimpses `c`.
    proj_e: Vec<Vec<Vec<f64>>>,
    proj_r: Vec<Vec<Vec<f64>>>,
    glimpse: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    h1: Vec<f64>,
    out: Vec<f64>,
}

/// `F + 1 (W_b c)^T` with `c_p = Σ_ij A_ij (u_p · F_i)(v_p · R_j)`.
pub fn ban_layer(
    f: &[Vec<f64>],
    r: &[Vec<f64>],
    a: &[Vec<f64>],
    layer: &BanLayer,
) -> Vec<Vec<f64>> {
    let (next, _, _, _) = ban_layer_parts(f, r, a, layer);
    next
}

#[allow(clippy::type_complexity)]
fn ban_layer_parts(
    f: &[Vec<f64>],
    r: &[Vec<f64>],
    a: &[Vec<f64>],
    layer: &BanLayer,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
    let np = layer.u.rows;
    let pe: Vec<Vec<f64>> = f
        .iter()
        .map(|fi| (0..np).map(|p| dot(layer.u.row(p), fi)).collect())
        .collect();
    let pr: Vec<Vec<f64>> = r
        .iter()
        .map(|rj| (0..np).map(|p| dot(layer.v.row(p), rj)).collect())
        .collect();
    let mut c = vec![0.0; np];
    for (i, row) in a.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            if w != 0.0 {
                for p in 0..np {
                    c[p] += w * pe[i][p] * pr[j][p];
                }
            }
        }
    }
    let nd = layer.w_b.rows;
    let bias: Vec<f64> = (0..nd).map(|d| dot(layer.w_b.row(d), &c)).collect();
    let next = f
        .iter()
        .map(|fi| fi.iter().zip(&bias).map(|(x, b)| x + b).collect())
        .collect();
    (next, pe, pr, c)
}

fn relu(v: &mut [f64]) {
    crate::nn::relu_in_place(v)
}

impl SgEmbedder {
    pub fn init(
        shape: EmbedShape,
        image: &HeteroVocab,
        text: &HeteroVocab,
        init_std: f64,
        seed: u64,
    ) -> Result<Self> {
        if shape.embed_dim == 0 || shape.glimpses == 0 || shape.residual_layers == 0 {
            return Err(Error::config(
                "embed_dim, glimpses and residual_layers must be positive",
            ));
        }
        if shape.hidden_dim == 0 || shape.output_dim == 0 {
            return Err(Error::config("projection dimensions must be positive"));
        }
        let mut r = rng::stream(seed, &[rng::tag::INIT, 1]);
        let (d, np) = (shape.embed_dim, shape.glimpses);
        let layers = (0..shape.residual_layers)
            .map(|_| BanLayer {
                u: Table::gaussian(np, d, 1.0 / (d as f64).sqrt(), &mut r),
                v: Table::gaussian(np, 3 * d, 1.0 / (3.0 * d as f64).sqrt(), &mut r),
                w_b: Table::gaussian(d, np, init_std, &mut r),
            })
            .collect();
        let fc1 = Linear::gaussian(shape.hidden_dim, d, (2.0 / d as f64).sqrt(), &mut r);
        let fc2 = Linear::gaussian(
            shape.output_dim,
            shape.hidden_dim,
            (2.0 / shape.hidden_dim as f64).sqrt(),
            &mut r,
        );
        let image_t = SideTables::gaussian(
            image.entities.len(),
            image.predicates.len(),
            d,
            init_std,
            &mut r,
        );
        let text_t = SideTables::gaussian(
            text.entities.len(),
            text.predicates.len(),
            d,
            init_std,
            &mut r,
        );
        Ok(SgEmbedder {
            shape,
            params: EmbedParams {
                layers,
                fc1,
                fc2,
                image: image_t,
                text: text_t,
            },
        })
    }

    fn check_graph(&self, g: &SceneGraph, side: Side) -> Result<()> {
        let t = self.params.side(side);
        if g.entities.is_empty() {
            return Err(Error::data("cannot embed a graph without entities"));
        }
        for e in &g.entities {
            if e.class >= t.entity.rows {
                return Err(Error::data(format!(
                    "entity class {} outside the {side:?} vocabulary",
                    e.class
                )));
            }
        }
        for rel in &g.relations {
            if rel.subject() >= g.entities.len() || rel.object() >= g.entities.len() {
                return Err(Error::data("relation endpoint out of range"));
            }
            if rel.predicate() >= t.predicate.rows {
                return Err(Error::data(format!(
                    "predicate {} outside the {side:?} vocabulary",
                    rel.predicate()
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, g: &SceneGraph, side: Side) -> Result<EmbedCache> {
        self.check_graph(g, side)?;
        let t = self.params.side(side);
        let classes: Vec<usize> = g.entities.iter().map(|e| e.class).collect();
        let rel_tokens: Vec<(usize, usize, usize)> = g
            .relations
            .iter()
            .map(|r| (classes[r.subject()], r.predicate(), classes[r.object()]))
            .collect();
        let r: Vec<Vec<f64>> = rel_tokens
            .iter()
            .map(|&(s, p, o)| {
                let mut v = Vec::with_capacity(3 * self.shape.embed_dim);
                v.extend_from_slice(t.subject.row(s));
                v.extend_from_slice(t.predicate.row(p));
                v.extend_from_slice(t.object.row(o));
                v
            })
            .collect();
        let a = build_connection(g).a;
        let mut f = vec![classes
            .iter()
            .map(|&c| t.entity.row(c).to_vec())
            .collect::<Vec<_>>()];
        let (mut proj_e, mut proj_r, mut glimpse) = (Vec::new(), Vec::new(), Vec::new());
        for layer in &self.params.layers {
            let (next, pe, pr, c) = ban_layer_parts(f.last().expect("F_0 exists"), &r, &a, layer);
            f.push(next);
            proj_e.push(pe);
            proj_r.push(pr);
            glimpse.push(c);
        }
        let last = f.last().expect("at least one layer");
        let mut pooled = vec![0.0; self.shape.embed_dim];
        for fi in last {
            axpy(1.0, fi, &mut pooled);
        }
        if self.shape.pooling == Pooling::Mean {
            let n = last.len() as f64;
            pooled.iter_mut().for_each(|v| *v /= n);
        }
        let mut h1 = self.params.fc1.forward(&pooled);
        relu(&mut h1);
        let mut out = self.params.fc2.forward(&h1);
        relu(&mut out);
        Ok(EmbedCache {
            side,
            classes,
            rel_tokens,
            a,
            r,
            f,
            proj_e,
            proj_r,
            glimpse,
            pooled,
            h1,
            out,
        })
    }

    pub fn embed_graph(&self, g: &SceneGraph, side: Side) -> Result<GraphEmbedding> {
        Ok(GraphEmbedding {
            vector: self.forward(g, side)?.out,
            side,
        })
    }

    /// Accumulates `d out / d θ · d_out` into `grad`.
    pub fn backward(&self, cache: &EmbedCache, d_out: &[f64], grad: &mut EmbedParams) {
        let p = &self.params;
        let d = self.shape.embed_dim;
        let mut d2: Vec<f64> = d_out
            .iter()
            .zip(&cache.out)
            .map(|(g, o)| if *o > 0.0 { *g } else { 0.0 })
            .collect();
        let mut dh1 = vec![0.0; p.fc2.inp];
        p.fc2
            .backward(&cache.h1, &d2, &mut grad.fc2, Some(&mut dh1));
        for (g, h) in dh1.iter_mut().zip(&cache.h1) {
            if *h <= 0.0 {
                *g = 0.0;
            }
        }
        let mut dpool = vec![0.0; d];
        p.fc1
            .backward(&cache.pooled, &dh1, &mut grad.fc1, Some(&mut dpool));
        let ne = cache.classes.len();
        if self.shape.pooling == Pooling::Mean {
            dpool.iter_mut().for_each(|v| *v /= ne as f64);
        }
        d2.clear();

        let mut df: Vec<Vec<f64>> = vec![dpool; ne];
        let mut dr: Vec<Vec<f64>> = vec![vec![0.0; 3 * d]; cache.r.len()];
        for (l, layer) in p.layers.iter().enumerate().rev() {
            let gl = &mut grad.layers[l];
            let np = layer.u.rows;
            let fin = &cache.f[l];
            let (pe, pr, c) = (&cache.proj_e[l], &cache.proj_r[l], &cache.glimpse[l]);
            let mut dbias = vec![0.0; d];
            for row in &df {
                axpy(1.0, row, &mut dbias);
            }
            let mut dc = vec![0.0; np];
            for (k, &g) in dbias.iter().enumerate() {
                if g != 0.0 {
                    axpy(g, c, gl.w_b.row_mut(k));
                    axpy(g, layer.w_b.row(k), &mut dc);
                }
            }
            for (i, arow) in cache.a.iter().enumerate() {
                for (j, &w) in arow.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    for q in 0..np {
                        let g = dc[q] * w;
                        if g == 0.0 {
                            continue;
                        }
                        // d c_q / d pe_iq = w pr_jq, d c_q / d pr_jq = w pe_iq
                        let gpe = g * pr[j][q];
                        let gpr = g * pe[i][q];
                        axpy(gpe, &fin[i], gl.u.row_mut(q));
                        axpy(gpe, layer.u.row(q), &mut df[i]);
                        axpy(gpr, &cache.r[j], gl.v.row_mut(q));
                        axpy(gpr, layer.v.row(q), &mut dr[j]);
                    }
                }
            }
        }
        let t = grad.side_mut(cache.side);
        for (i, &cls) in cache.classes.iter().enumerate() {
            axpy(1.0, &df[i], t.entity.row_mut(cls));
        }
        for (j, &(s, pr, o)) in cache.rel_tokens.iter().enumerate() {
            axpy(1.0, &dr[j][..d], t.subject.row_mut(s));
            axpy(1.0, &dr[j][d..2 * d], t.predicate.row_mut(pr));
            axpy(1.0, &dr[j][2 * d..], t.object.row_mut(o));
        }
    }
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// A text anchor with its image positive and an image negative.
#[derive(Debug, Clone, Copy)]
pub struct Triplet<'a> {
    pub anchor: &'a SceneGraph,
    pub positive: &'a SceneGraph,
    pub negative: &'a SceneGraph,
}

/// `max(0, |a - p|_1 - |a - n|_1 + margin)`; with `grad`, accumulates
/// `scale * dL/dθ` through both towers.
pub fn triplet_step(
    model: &SgEmbedder,
    t: Triplet,
    margin: f64,
    grad: Option<(&mut EmbedParams, f64)>,
) -> Result<f64> {
    let ca = model.forward(t.anchor, Side::Text)?;
    let cp = model.forward(t.positive, Side::Image)?;
    let cn = model.forward(t.negative, Side::Image)?;
    let loss = l1_distance(&ca.out, &cp.out) - l1_distance(&ca.out, &cn.out) + margin;
    if loss <= 0.0 {
        return Ok(0.0);
    }
    if let Some((g, scale)) = grad {
        let n = ca.out.len();
        let mut da = vec![0.0; n];
        let mut dp = vec![0.0; n];
        let mut dn = vec![0.0; n];
        for k in 0..n {
            let sp = sign(ca.out[k] - cp.out[k]);
            let sn = sign(ca.out[k] - cn.out[k]);
            da[k] = scale * (sp - sn);
            dp[k] = -scale * sp;
            dn[k] = scale * sn;
        }
        model.backward(&ca, &da, g);
        model.backward(&cp, &dp, g);
        model.backward(&cn, &dn, g);
    }
    Ok(loss)
}

/// Central differences (`h = 1e-4`) on the triplet loss, sampling up to
/// `coords_per_block` coordinates per block. Blocks with no gradient path
/// (tokens absent from the triplet) are included and must read zero.
pub fn triplet_gradient_check(
    model: &SgEmbedder,
    t: Triplet,
    margin: f64,
    coords_per_block: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let h = 1e-4;
    let mut analytic = model.params.zeros_like();
    triplet_step(model, t, margin, Some((&mut analytic, 1.0)))?;
    let mut probe = model.clone();
    let mut r = rng::stream(seed, &[]);
    let names: Vec<(String, usize)> = model
        .params
        .blocks()
        .iter()
        .map(|(n, b)| (n.clone(), b.len()))
        .collect();
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for (bi, (name, len)) in names.iter().enumerate() {
        let idx: Vec<usize> = if *len <= coords_per_block {
            (0..*len).collect()
        } else {
            (0..coords_per_block)
                .map(|_| r.random_range(0..*len))
                .collect()
        };
        for c in idx {
            let orig = probe.params.blocks()[bi].1[c];
            probe.params.blocks_mut()[bi].1[c] = orig + h;
            let up = triplet_step(&probe, t, margin, None)?;
            probe.params.blocks_mut()[bi].1[c] = orig - h;
            let down = triplet_step(&probe, t, margin, None)?;
            probe.params.blocks_mut()[bi].1[c] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.blocks()[bi].1[c];
            let rel = crate::train::relative_error(a, numeric);
            if worst.1.is_empty() || rel > worst.0 {
                worst = (rel.max(worst.0), name.clone());
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        worst_block: worst.1,
        coordinates_checked: checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{BoundingBox, Entity, Relation};
    use proptest::prelude::*;

    fn graph(classes: &[usize], rels: &[(usize, usize, usize)]) -> SceneGraph {
        let b = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        SceneGraph {
            entities: classes
                .iter()
                .map(|&class| Entity { class, bbox: b })
                .collect(),
            relations: rels.iter().map(|&(s, p, o)| Relation(s, p, o)).collect(),
        }
    }

    fn shape(d: usize, np: usize, hidden: usize, out: usize) -> EmbedShape {
        EmbedShape {
            embed_dim: d,
            residual_layers: 2,
            glimpses: np,
            hidden_dim: hidden,
            output_dim: out,
            pooling: Pooling::Sum,
        }
    }

    fn toy(s: EmbedShape, seed: u64) -> SgEmbedder {
        let image = HeteroVocab::image(6, 5).unwrap();
        let text = HeteroVocab::image(8, 7).unwrap();
        SgEmbedder::init(s, &image, &text, 0.5, seed).unwrap()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn connection_cases() {
        let c = build_connection(&graph(&[0, 1], &[(0, 1, 0), (0, 2, 1)]));
        assert_eq!(c.m, vec![vec![1.0, 1.0], vec![0.0, 1.0]]);
        assert_eq!(c.a, vec![vec![0.5, 0.5], vec![0.0, 1.0]]);
        let c = build_connection(&graph(&[0, 1, 2], &[(0, 1, 1)]));
        assert_eq!(c.m, vec![vec![1.0], vec![1.0], vec![0.0]]);
        assert_eq!(c.a, vec![vec![1.0], vec![1.0], vec![0.0]]);
    }

    #[test]
    fn edgeless_layer_is_identity() {
        let m = toy(shape(4, 3, 5, 6), 1);
        let f = vec![vec![0.3, -1.0, 2.0, 0.5], vec![1.5, 0.0, -0.25, 4.0]];
        let a = vec![vec![], vec![]];
        assert_eq!(ban_layer(&f, &[], &a, &m.params.layers[0]), f);
    }

    #[test]
    fn single_glimpse_matches_dense_bilinear_form() {
        // N_d = 2, one entity, one relation, one glimpse
        let layer = BanLayer {
            u: Table {
                rows: 1,
                cols: 2,
                data: vec![0.5, -1.0],
            },
            v: Table {
                rows: 1,
                cols: 6,
                data: vec![1.0, 2.0, 0.0, -1.0, 0.5, 3.0],
            },
            w_b: Table {
                rows: 2,
                cols: 1,
                data: vec![1.0, -2.0],
            },
        };
        let e = vec![2.0, 1.0];
        let r = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        // E^T (u v^T) R with the outer product written out
        let mut c = 0.0;
        for (i, ei) in e.iter().enumerate() {
            for (j, rj) in r.iter().enumerate() {
                c += ei * layer.u.data[i] * layer.v.data[j] * rj;
            }
        }
        let next = ban_layer(std::slice::from_ref(&e), &[r], &[vec![1.0]], &layer);
        assert!((next[0][0] - (e[0] + c)).abs() < 1e-15);
        assert!((next[0][1] - (e[1] - 2.0 * c)).abs() < 1e-15);
    }

    #[test]
    fn three_entity_layer_regression() {
        let m = toy(shape(3, 2, 4, 4), 9);
        let g = graph(&[1, 2, 3], &[(0, 1, 1), (1, 3, 2)]);
        let c = m.forward(&g, Side::Image).unwrap();
        let f1: Vec<f64> = c.f[1].iter().flatten().copied().collect();
        let want = [
            0.9040610834476677,
            0.12002302486571224,
            0.6964256782989664,
            0.8109127897997115,
            0.5341900396923072,
            0.19276380386332426,
            -0.9229988204313511,
            0.2660816089921586,
            -0.3304538164924481,
        ];
        assert!(max_diff(&f1, &want) < 1e-12);
    }

    #[test]
    fn default_shape_regression() {
        let image = HeteroVocab::image(15, 11).unwrap();
        let text = HeteroVocab::image(30, 25).unwrap();
        let s = shape(512, 8, 1024, 1024);
        let m = SgEmbedder::init(s, &image, &text, 0.1, 42).unwrap();
        let g = graph(&[3, 0, 7, 7], &[(0, 2, 1), (2, 5, 0), (3, 1, 2)]);
        let v = m.embed_graph(&g, Side::Image).unwrap().vector;
        assert_eq!(v.len(), 1024);
        assert!(v.iter().all(|x| x.is_finite()));
        let sum: f64 = v.iter().sum();
        assert!((sum - 137.97703185708443).abs() < 1e-9);
        assert!(max_diff(&v[..4], &[0.0, 0.0, 0.0, 0.2897013459415358]) < 1e-12);
    }

    #[test]
    fn embedding_is_deterministic_and_rejects_empty_graphs() {
        let m = toy(shape(4, 3, 5, 6), 2);
        let g = graph(&[1, 2, 3], &[(0, 1, 1), (2, 4, 0)]);
        assert_eq!(
            m.embed_graph(&g, Side::Text).unwrap(),
            m.embed_graph(&g, Side::Text).unwrap()
        );
        assert!(matches!(
            m.embed_graph(&SceneGraph::default(), Side::Image),
            Err(Error::Data(_))
        ));
        assert!(m.embed_graph(&graph(&[6], &[]), Side::Image).is_err());
    }

    #[test]
    fn shared_tower_with_equal_tables() {
        let image = HeteroVocab::image(6, 5).unwrap();
        let mut m = SgEmbedder::init(shape(4, 3, 5, 6), &image, &image, 0.5, 3).unwrap();
        m.params.text = m.params.image.clone();
        let g = graph(&[1, 2, 3, 1], &[(0, 1, 1), (2, 4, 0), (3, 2, 1)]);
        assert_eq!(
            m.embed_graph(&g, Side::Text).unwrap().vector,
            m.embed_graph(&g, Side::Image).unwrap().vector
        );
    }

    #[test]
    fn mean_pooling_divides_the_sum() {
        let mut m = toy(shape(4, 3, 5, 6), 4);
        let g = graph(&[1, 2, 3], &[(0, 1, 1)]);
        let sum = m.forward(&g, Side::Image).unwrap().pooled;
        m.shape.pooling = Pooling::Mean;
        let mean = m.forward(&g, Side::Image).unwrap().pooled;
        assert!(max_diff(&sum.iter().map(|v| v / 3.0).collect::<Vec<_>>(), &mean) < 1e-15);
    }

    #[test]
    fn triplet_loss_cases() {
        let m = toy(shape(4, 3, 5, 6), 5);
        let a = graph(&[1, 2], &[(0, 1, 1)]);
        let p = graph(&[3, 2], &[(1, 2, 0)]);
        let t = Triplet {
            anchor: &a,
            positive: &p,
            negative: &p,
        };
        assert!((triplet_step(&m, t, 1.0, None).unwrap() - 1.0).abs() < 1e-12);
        // same graph and tables on both sides: zero positive distance
        let image = HeteroVocab::image(6, 5).unwrap();
        let mut m = SgEmbedder::init(shape(4, 3, 5, 6), &image, &image, 0.5, 5).unwrap();
        m.params.text = m.params.image.clone();
        let n = graph(&[4, 5, 0], &[(0, 3, 1), (2, 1, 0)]);
        let t = Triplet {
            anchor: &a,
            positive: &a,
            negative: &n,
        };
        let gap = l1_distance(
            &m.embed_graph(&a, Side::Text).unwrap().vector,
            &m.embed_graph(&n, Side::Image).unwrap().vector,
        );
        assert!(gap > 0.0);
        assert_eq!(triplet_step(&m, t, gap, None).unwrap(), 0.0);
    }

    #[test]
    fn triplet_gradients_match_differences() {
        for pooling in [Pooling::Sum, Pooling::Mean] {
            let mut s = shape(6, 3, 7, 5);
            s.pooling = pooling;
            let m = toy(s, 11);
            let a = graph(&[1, 7, 2], &[(0, 3, 1), (2, 6, 0)]);
            let p = graph(&[1, 2, 4], &[(0, 1, 1), (1, 4, 2)]);
            let n = graph(&[5, 0], &[(1, 2, 0)]);
            let t = Triplet {
                anchor: &a,
                positive: &p,
                negative: &n,
            };
            let rep = triplet_gradient_check(&m, t, 50.0, 50, 3).unwrap();
            assert!(rep.max_relative_error < 1e-4, "{rep:?}");
            assert!(rep.coordinates_checked >= 50);
        }
    }

    fn arb_graph() -> impl Strategy<Value = SceneGraph> {
        (1usize..6).prop_flat_map(|ne| {
            (
                prop::collection::vec(0usize..6, ne),
                prop::collection::vec((0..ne, 1usize..5, 0..ne), 0..7),
            )
                .prop_map(|(c, r)| graph(&c, &r))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn attention_rows_normalize(g in arb_graph()) {
            let c = build_connection(&g);
            for (mrow, arow) in c.m.iter().zip(&c.a) {
                let s: f64 = arow.iter().sum();
                if mrow.iter().any(|&v| v > 0.0) {
                    prop_assert!((s - 1.0).abs() < 1e-12);
                } else {
                    prop_assert_eq!(s, 0.0);
                }
            }
            for (j, r) in g.relations.iter().enumerate() {
                let col: f64 = c.m.iter().map(|row| row[j]).sum();
                prop_assert_eq!(col, if r.subject() == r.object() { 1.0 } else { 2.0 });
            }
        }

        #[test]
        fn reindexing_leaves_embedding_unchanged(g in arb_graph(), seed in 0u64..1000) {
            let m = toy(shape(5, 3, 6, 4), 21);
            let mut r = rng::stream(seed, &[]);
            let mut perm: Vec<usize> = (0..g.entities.len()).collect();
            rand::seq::SliceRandom::shuffle(&mut perm[..], &mut r);
            let mut ents = g.entities.clone();
            for (old, &new) in perm.iter().enumerate() {
                ents[new] = g.entities[old].clone();
            }
            let mut rels: Vec<Relation> = g.relations.iter().map(|x| Relation(perm[x.0], x.1, perm[x.2])).collect();
            rels.reverse();
            let h = SceneGraph { entities: ents, relations: rels };
            let a = m.embed_graph(&g, Side::Image).unwrap().vector;
            let b = m.embed_graph(&h, Side::Image).unwrap().vector;
            prop_assert!(max_diff(&a, &b) < 1e-9);
        }

        #[test]
        fn edgeless_embedding_depends_on_entity_multiset(c in prop::collection::vec(0usize..6, 1..6)) {
            let m = toy(shape(5, 3, 6, 4), 22);
            let mut sorted = c.clone();
            sorted.sort_unstable();
            let a = m.forward(&graph(&c, &[]), Side::Image).unwrap();
            prop_assert_eq!(&a.f[0], &a.f[2]);
            let b = m.embed_graph(&graph(&sorted, &[]), Side::Image).unwrap().vector;
            prop_assert!(max_diff(&a.out, &b) < 1e-12);
        }
    }
}
