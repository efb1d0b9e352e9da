//! Browser bindings for three small views of the library: where the head puts
//! a 2-D pooled vector, how extra edges change a tree's δ, and the scan/SSD
//! equivalence. Everything here also runs natively so it can be tested.

use him::autograd::Tensor;
use him::encoder::{ssd_dense, ssd_matrix, ssm_scan};
use him::geometry::{self, ManifoldKind};
use him::hierarchy::{delta_hyperbolicity, delta_hyperbolicity_exact, generate_synthetic_tree, Graph, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

// `JsError` only exists inside a browser, so the logic reports plain strings
// and the exported wrappers convert them.
type Res<T> = Result<T, String>;

fn kind_of(name: &str) -> Res<ManifoldKind> {
    name.parse().map_err(|e: him::Error| e.to_string())
}

fn js(e: him::Error) -> String {
    e.to_string()
}

fn to_js<T>(r: Res<T>) -> Result<T, JsError> {
    r.map_err(|e| JsError::new(&e))
}

/// Head output for a pooled vector `(sx, sy)`:
/// `[disk_x, disk_y, h_norm, coords…]`. `disk_*` is the point drawn in the
/// unit disk (the Lorentz point is mapped there stereographically).
#[wasm_bindgen]
pub fn project_2d(kind: &str, sx: f64, sy: f64, c: f64, gamma: f64) -> Result<Vec<f64>, JsError> {
    to_js(project_point(kind, sx, sy, c, gamma))
}

pub fn project_point(kind: &str, sx: f64, sy: f64, c: f64, gamma: f64) -> Res<Vec<f64>> {
    let kind = kind_of(kind)?;
    if !(c > 0.0 && c.is_finite() && gamma.is_finite()) {
        return Err("c must be positive and gamma finite".into());
    }
    let u = [sx.tanh(), sy.tanh()];
    let h = geometry::norm_scale(&u, gamma, kind);
    let e = geometry::project(kind, &h, c);
    let r = c.sqrt();
    let disk = match kind {
        ManifoldKind::Euclidean => [e[0], e[1]],
        ManifoldKind::Poincare => [e[0] / r, e[1] / r],
        ManifoldKind::Lorentz => [e[1] / (e[0] + r), e[2] / (e[0] + r)],
    };
    let hn = geometry::h_norm(&e, c, kind).map_err(js)?;
    let mut out = vec![disk[0], disk[1], hn];
    out.extend(e);
    Ok(out)
}

/// Geodesic distance between the head outputs of two pooled vectors.
#[wasm_bindgen]
pub fn distance_2d(kind: &str, a: &[f64], b: &[f64], c: f64, gamma: f64) -> Result<f64, JsError> {
    to_js(point_distance(kind, a, b, c, gamma))
}

pub fn point_distance(kind: &str, a: &[f64], b: &[f64], c: f64, gamma: f64) -> Res<f64> {
    if a.len() != 2 || b.len() != 2 {
        return Err("pooled vectors are 2-D".into());
    }
    let pa = project_point(kind, a[0], a[1], c, gamma)?;
    let pb = project_point(kind, b[0], b[1], c, gamma)?;
    geometry::distance(kind_of(kind)?, &pa[3..], &pb[3..], c).map_err(js)
}

/// A random tree plus user-added edges, for δ-hyperbolicity.
#[wasm_bindgen]
pub struct TreeDemo {
    parent: Vec<i32>,
    depth: Vec<u32>,
    extra: Vec<(usize, usize)>,
}

#[wasm_bindgen]
impl TreeDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(branching: usize, depth: usize, seed: u64) -> Result<TreeDemo, JsError> {
        to_js(Self::build(branching, depth, seed))
    }
}

impl TreeDemo {
    pub fn build(branching: usize, depth: usize, seed: u64) -> Res<TreeDemo> {
        let tax = generate_synthetic_tree(&SynthConfig {
            min_branching: 2.min(branching),
            ..SynthConfig::new(branching, depth, seed)
        })
        .map_err(js)?;
        let parent = (0..tax.len())
            .map(|v| tax.parents(v).first().map_or(-1, |&p| p as i32))
            .collect();
        let depth = (0..tax.len()).map(|v| tax.depth(v)).collect();
        Ok(TreeDemo {
            parent,
            depth,
            extra: Vec::new(),
        })
    }

    fn graph(&self) -> Res<Graph> {
        let mut edges: Vec<(usize, usize)> = self
            .parent
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= 0)
            .map(|(v, &p)| (v, p as usize))
            .collect();
        edges.extend(&self.extra);
        Graph::from_edges(self.len(), &edges).map_err(js)
    }

    pub fn sampled_delta(&self, quadruples: u64, seed: u64) -> Res<Vec<f64>> {
        let r = delta_hyperbolicity(&self.graph()?, quadruples, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(js)?;
        Ok(vec![r.mean_delta, r.mean_normalized_delta, r.quadruples as f64, r.nodes as f64])
    }

    pub fn exact_delta(&self) -> Res<Vec<f64>> {
        let r = delta_hyperbolicity_exact(&self.graph()?).map_err(js)?;
        Ok(vec![r.mean_delta, r.mean_normalized_delta, r.quadruples as f64, r.nodes as f64])
    }
}

#[wasm_bindgen]
impl TreeDemo {
    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    /// Parent of each node, `-1` for the root.
    pub fn parents(&self) -> Vec<i32> {
        self.parent.clone()
    }

    pub fn depths(&self) -> Vec<u32> {
        self.depth.clone()
    }

    /// Flattened `[u0, v0, u1, v1, …]`.
    pub fn extra_edges(&self) -> Vec<u32> {
        self.extra.iter().flat_map(|&(u, v)| [u as u32, v as u32]).collect()
    }

    /// Adds an undirected edge; false if it is a loop or already present.
    pub fn add_edge(&mut self, u: usize, v: usize) -> bool {
        let n = self.len();
        if u >= n || v >= n || u == v {
            return false;
        }
        let tree_edge = self.parent[u] == v as i32 || self.parent[v] == u as i32;
        let key = (u.min(v), u.max(v));
        if tree_edge || self.extra.contains(&key) {
            return false;
        }
        self.extra.push(key);
        true
    }

    pub fn clear_extra(&mut self) {
        self.extra.clear();
    }

    /// `[mean δ, mean normalized δ, quadruples, nodes]` from sampling.
    pub fn delta(&self, quadruples: u64, seed: u64) -> Result<Vec<f64>, JsError> {
        to_js(self.sampled_delta(quadruples, seed))
    }

    /// Same as [`TreeDemo::delta`] but over every quadruple.
    pub fn delta_exact(&self) -> Result<Vec<f64>, JsError> {
        to_js(self.exact_delta())
    }
}

/// Random selective-scan inputs run both ways.
#[wasm_bindgen]
pub struct SsdDemo {
    len: usize,
    channels: usize,
    matrix: Vec<f64>,
    scan: Vec<f64>,
    dual: Vec<f64>,
}

#[wasm_bindgen]
impl SsdDemo {
    /// `decay_min` bounds the per-step decays `a_t ∈ [decay_min, 1)`.
    #[wasm_bindgen(constructor)]
    pub fn new(len: usize, state: usize, channels: usize, decay_min: f64, seed: u64) -> Result<SsdDemo, JsError> {
        to_js(Self::build(len, state, channels, decay_min, seed))
    }
}

impl SsdDemo {
    pub fn build(len: usize, state: usize, channels: usize, decay_min: f64, seed: u64) -> Res<SsdDemo> {
        if len == 0 || state == 0 || channels == 0 || len > 256 {
            return Err("need 1 ≤ L ≤ 256 and positive N, P".into());
        }
        if !(0.0..1.0).contains(&decay_min) {
            return Err("decay_min must be in [0, 1)".into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
        let a = Tensor::new(vec![len], draw(len, decay_min, 1.0)).map_err(js)?;
        let b = Tensor::matrix(len, state, draw(len * state, -1.0, 1.0)).map_err(js)?;
        let c = Tensor::matrix(len, state, draw(len * state, -1.0, 1.0)).map_err(js)?;
        let u = Tensor::matrix(len, channels, draw(len * channels, -1.0, 1.0)).map_err(js)?;
        let matrix = ssd_matrix(&a, &b, &c).map_err(js)?.data().to_vec();
        let scan = ssm_scan(&a, &b, &c, &u).map_err(js)?.data().to_vec();
        let dual = ssd_dense(&a, &b, &c, &u).map_err(js)?.data().to_vec();
        Ok(SsdDemo {
            len,
            channels,
            matrix,
            scan,
            dual,
        })
    }
}

#[wasm_bindgen]
impl SsdDemo {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Row-major `L × L` mixing matrix; zero above the diagonal.
    pub fn matrix(&self) -> Vec<f64> {
        self.matrix.clone()
    }

    /// Row-major `L × P` outputs of the recurrent scan.
    pub fn scan(&self) -> Vec<f64> {
        self.scan.clone()
    }

    pub fn dual(&self) -> Vec<f64> {
        self.dual.clone()
    }

    pub fn max_deviation(&self) -> f64 {
        self.scan
            .iter()
            .zip(&self.dual)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }
}
