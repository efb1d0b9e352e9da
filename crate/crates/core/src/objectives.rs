//! Losses: centripetal and clustering hinges with curvature-scaled margins,
//! their weighted sum, and the in-batch softmax loss used for pretraining.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, ManifoldKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the centripetal term.
    pub w_ce: f64,
    /// Weight of the clustering term.
    pub w_cl: f64,
    pub alpha0: f64,
    pub beta0: f64,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_ce: 1.0,
            w_cl: 1.0,
            alpha0: 1.0,
            beta0: 0.1,
            temperature: 0.05,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_ce, self.w_cl, self.alpha0, self.beta0];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("loss weights and margins must be finite and ≥ 0"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        Ok(())
    }
}

/// `(α, β) = (alpha0·√c, beta0·√c)`.
pub fn dynamic_margins(c: f64, cfg: &LossConfig) -> (f64, f64) {
    let r = c.sqrt();
    (cfg.alpha0 * r, cfg.beta0 * r)
}

fn check_points(kind: ManifoldKind, c: f64, pts: &[&[f64]]) -> Result<()> {
    for p in pts {
        let ok = match kind {
            ManifoldKind::Poincare => p.iter().map(|v| v * v).sum::<f64>() < c,
            ManifoldKind::Lorentz => p.len() >= 2 && p[0] > 0.0,
            ManifoldKind::Euclidean => true,
        };
        if !ok || p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("invalid {kind} point")));
        }
    }
    Ok(())
}

/// Batch mean of `max(‖e⁺‖_c − ‖e‖_c + β, 0)`.
pub fn centripetal_loss(
    anchors: &[Vec<f64>],
    positives: &[Vec<f64>],
    c: f64,
    kind: ManifoldKind,
    beta: f64,
) -> Result<f64> {
    if anchors.len() != positives.len() || anchors.is_empty() {
        return Err(Error::dim("centripetal loss needs equally many anchors and positives"));
    }
    let mut total = 0.0;
    for (e, ep) in anchors.iter().zip(positives) {
        check_points(kind, c, &[e, ep])?;
        let h = geometry::h_norm(e, c, kind)?;
        let hp = geometry::h_norm(ep, c, kind)?;
        total += (hp - h + beta).max(0.0);
    }
    Ok(total / anchors.len() as f64)
}

/// Batch mean of `max(d(e, e⁺) − d(e, e⁻) + α, 0)`.
pub fn clustering_loss(
    anchors: &[Vec<f64>],
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    c: f64,
    kind: ManifoldKind,
    alpha: f64,
) -> Result<f64> {
    if anchors.len() != positives.len() || anchors.len() != negatives.len() || anchors.is_empty() {
        return Err(Error::dim("clustering loss needs equally many anchors, positives, negatives"));
    }
    let mut total = 0.0;
    for ((e, ep), en) in anchors.iter().zip(positives).zip(negatives) {
        check_points(kind, c, &[e, ep, en])?;
        let dp = geometry::distance(kind, e, ep, c)?;
        let dn = geometry::distance(kind, e, en, c)?;
        total += (dp - dn + alpha).max(0.0);
    }
    Ok(total / anchors.len() as f64)
}

/// Components of [`hyperbolic_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperbolicLoss {
    pub total: f64,
    pub centripetal: f64,
    pub clustering: f64,
}

/// `w_ce·centripetal + w_cl·clustering` with margins from the current `c`.
pub fn hyperbolic_loss(
    anchors: &[Vec<f64>],
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    c: f64,
    kind: ManifoldKind,
    cfg: &LossConfig,
) -> Result<HyperbolicLoss> {
    let (alpha, beta) = dynamic_margins(c, cfg);
    let centripetal = centripetal_loss(anchors, positives, c, kind, beta)?;
    let clustering = clustering_loss(anchors, positives, negatives, c, kind, alpha)?;
    Ok(HyperbolicLoss {
        total: cfg.w_ce * centripetal + cfg.w_cl * clustering,
        centripetal,
        clustering,
    })
}

/// Cross-entropy of each row of `U Uᵀ / τ` against its partner column, with
/// the diagonal removed. `pair[i]` is the row index of item `i`'s positive.
pub fn batch_contrastive_loss(units: &[Vec<f64>], pair: &[usize], temperature: f64) -> Result<f64> {
    let n = units.len();
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let d = units[0].len();
    let mut t = crate::autograd::Tape::new();
    let flat: Vec<f64> = units.iter().flatten().copied().collect();
    if flat.len() != n * d {
        return Err(Error::dim("embeddings differ in width"));
    }
    let u = t.constant(crate::autograd::Tensor::matrix(n, d, flat)?);
    let l = diff::batch_contrastive_loss(&mut t, u, pair, temperature)?;
    Ok(t.value(l).item())
}

/// The losses recorded on a tape. Embedding arguments are `[B, ·]` rows.
pub mod diff {
    use crate::autograd::{Tape, Var};
    use crate::error::{Error, Result};
    use crate::geometry::{diff as g, ManifoldKind};

    use super::LossConfig;

    fn check_rows(t: &Tape, kind: ManifoldKind, c: Var, pts: &[Var]) -> Result<()> {
        let cv = t.value(c).item();
        for &p in pts {
            let v = t.value(p);
            if !v.all_finite() {
                return Err(Error::NonFinite("embedding".into()));
            }
            let ok = match kind {
                ManifoldKind::Poincare => (0..v.rows()).all(|r| v.row(r).iter().map(|x| x * x).sum::<f64>() < cv),
                ManifoldKind::Lorentz => (0..v.rows()).all(|r| v.row(r)[0] > 0.0),
                ManifoldKind::Euclidean => true,
            };
            if !ok {
                return Err(Error::Domain(format!("invalid {kind} point in batch")));
            }
        }
        Ok(())
    }

    /// `(α, β)` as tape values so margins follow the learned curvature.
    pub fn dynamic_margins(t: &mut Tape, c: Var, cfg: &LossConfig) -> (Var, Var) {
        let r = t.sqrt(c);
        (t.scale(r, cfg.alpha0), t.scale(r, cfg.beta0))
    }

    pub fn centripetal_loss(t: &mut Tape, kind: ManifoldKind, e: Var, ep: Var, c: Var, beta: Var) -> Result<Var> {
        check_rows(t, kind, c, &[e, ep])?;
        let h = g::h_norm(t, kind, e, c)?;
        let hp = g::h_norm(t, kind, ep, c)?;
        let diff = t.sub(hp, h)?;
        let shifted = t.add_scalar(diff, beta)?;
        let hinge = t.relu(shifted);
        Ok(t.mean(hinge))
    }

    pub fn clustering_loss(
        t: &mut Tape,
        kind: ManifoldKind,
        e: Var,
        ep: Var,
        en: Var,
        c: Var,
        alpha: Var,
    ) -> Result<Var> {
        check_rows(t, kind, c, &[e, ep, en])?;
        let dp = g::distance(t, kind, e, ep, c)?;
        let dn = g::distance(t, kind, e, en, c)?;
        let diff = t.sub(dp, dn)?;
        let shifted = t.add_scalar(diff, alpha)?;
        let hinge = t.relu(shifted);
        Ok(t.mean(hinge))
    }

    #[derive(Clone, Copy, Debug)]
    pub struct HyperbolicLoss {
        pub total: Var,
        pub centripetal: Var,
        pub clustering: Var,
    }

    pub fn hyperbolic_loss(
        t: &mut Tape,
        kind: ManifoldKind,
        e: Var,
        ep: Var,
        en: Var,
        c: Var,
        cfg: &LossConfig,
    ) -> Result<HyperbolicLoss> {
        let (alpha, beta) = dynamic_margins(t, c, cfg);
        let centripetal = centripetal_loss(t, kind, e, ep, c, beta)?;
        let clustering = clustering_loss(t, kind, e, ep, en, c, alpha)?;
        let a = t.scale(centripetal, cfg.w_ce);
        let b = t.scale(clustering, cfg.w_cl);
        let total = t.add(a, b)?;
        Ok(HyperbolicLoss { total, centripetal, clustering })
    }

    /// `units` are `[n, D]` unit rows; `pair[i]` indexes item `i`'s positive.
    pub fn batch_contrastive_loss(t: &mut Tape, units: Var, pair: &[usize], temperature: f64) -> Result<Var> {
        let n = t.value(units).rows();
        if pair.len() != n {
            return Err(Error::dim("one positive index per row"));
        }
        if pair.iter().enumerate().any(|(i, &j)| j >= n || j == i) {
            return Err(Error::invalid("every item needs a positive other than itself"));
        }
        let sims = t.matmul_bt(units, units)?;
        let logits = t.scale(sims, 1.0 / temperature);
        let excluded: Vec<bool> = (0..n * n).map(|k| k / n == k % n).collect();
        t.cross_entropy(logits, pair, Some(&excluded))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{finite_difference_check, Tape, Tensor, Var};
    use crate::geometry::{project_lorentz, project_poincare};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A Lorentz point (c = 1) at hyperbolic distance `r` from the apex.
    fn at_radius(r: f64, dir: usize) -> Vec<f64> {
        let mut h = vec![0.0; 3];
        h[dir] = r;
        project_lorentz(&h, 1.0).into_inner()
    }

    /// Two Lorentz points (c = 1) at geodesic distance `d` apart, one at the apex.
    fn separated(d: f64) -> (Vec<f64>, Vec<f64>) {
        (at_radius(0.0, 0), at_radius(d, 0))
    }

    #[test]
    fn centripetal_fixtures() {
        let l = ManifoldKind::Lorentz;
        let v = centripetal_loss(&[at_radius(0.8, 0)], &[at_radius(0.5, 1)], 1.0, l, 0.1).unwrap();
        assert_eq!(v, 0.0);
        let v = centripetal_loss(&[at_radius(0.5, 0)], &[at_radius(0.9, 1)], 1.0, l, 0.1).unwrap();
        assert!((v - 0.5).abs() < 1e-12, "{v}");
        let v = centripetal_loss(&[at_radius(1.7, 2)], &[at_radius(0.0, 0)], 1.0, l, 0.0).unwrap();
        assert_eq!(v, 0.0);
        let bad = centripetal_loss(&[vec![0.9, 0.9]], &[vec![0.0, 0.0]], 1.0, ManifoldKind::Poincare, 0.1);
        assert!(matches!(bad, Err(Error::Domain(_))));
    }

    #[test]
    fn clustering_fixtures() {
        let l = ManifoldKind::Lorentz;
        // anchor at apex; positive and negative placed along different axes
        let (e, _) = separated(0.0);
        let ep = at_radius(0.2, 0);
        let en = at_radius(1.0, 1);
        let v = clustering_loss(&[e.clone()], &[ep], &[en], 1.0, l, 0.5).unwrap();
        assert_eq!(v, 0.0);
        let ep = at_radius(1.0, 0);
        let en = at_radius(0.2, 1);
        let v = clustering_loss(&[e.clone()], &[ep.clone()], &[en], 1.0, l, 0.5).unwrap();
        assert!((v - 1.3).abs() < 1e-12, "{v}");
        let v = clustering_loss(&[e], &[ep.clone()], &[ep], 1.0, l, 0.5).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn margins_scale_with_radius() {
        let cfg = LossConfig::default();
        assert_eq!(dynamic_margins(1.0, &cfg), (1.0, 0.1));
        let (a, b) = dynamic_margins(4.0, &cfg);
        assert!((a - 2.0).abs() < 1e-15 && (b - 0.2).abs() < 1e-15);
        for c in [0.01, 0.3, 7.0, 100.0] {
            let (a, b) = dynamic_margins(c, &cfg);
            assert!((a / b - 10.0).abs() < 1e-12);
        }
    }

    fn random_batch(kind: ManifoldKind, n: usize, rng: &mut ChaCha8Rng) -> [Vec<Vec<f64>>; 3] {
        std::array::from_fn(|_| {
            (0..n)
                .map(|_| {
                    let h: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                    geometry::project(kind, &h, 1.0)
                })
                .collect()
        })
    }

    #[test]
    fn combined_loss_is_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in [ManifoldKind::Poincare, ManifoldKind::Lorentz] {
            let [a, p, n] = random_batch(kind, 16, &mut rng);
            for (w_ce, w_cl) in [(0.0, 1.0), (1.0, 0.0), (1.0, 1.0), (0.3, 2.5)] {
                let cfg = LossConfig { w_ce, w_cl, ..LossConfig::default() };
                let l = hyperbolic_loss(&a, &p, &n, 1.0, kind, &cfg).unwrap();
                assert!((l.total - (w_ce * l.centripetal + w_cl * l.clustering)).abs() < 1e-12);
                if w_ce == 0.0 {
                    assert_eq!(l.total, l.clustering);
                }
                if w_cl == 0.0 {
                    assert_eq!(l.total, l.centripetal);
                }
            }
        }
    }

    #[test]
    fn zero_when_every_triplet_is_satisfied() {
        let cfg = LossConfig::default();
        let e = vec![at_radius(2.0, 0)];
        let ep = vec![at_radius(1.0, 0)];
        let en = vec![at_radius(3.0, 1)];
        let l = hyperbolic_loss(&e, &ep, &en, 1.0, ManifoldKind::Lorentz, &cfg).unwrap();
        assert_eq!(l.total, 0.0);
    }

    #[test]
    fn margins_are_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let [a, p, n] = random_batch(ManifoldKind::Poincare, 32, &mut rng);
        let mut prev = -1.0;
        for k in 0..20 {
            let cfg = LossConfig { alpha0: k as f64 * 0.1, beta0: k as f64 * 0.02, ..LossConfig::default() };
            let l = hyperbolic_loss(&a, &p, &n, 1.0, ManifoldKind::Poincare, &cfg).unwrap().total;
            assert!(l >= prev);
            prev = l;
        }
    }

    fn tape_loss(kind: ManifoldKind, rows: [&Tensor; 3], c: f64, cfg: &LossConfig) -> (f64, f64, f64) {
        let mut t = Tape::new();
        let [e, ep, en] = rows.map(|r| t.constant(r.clone()));
        let cv = t.constant(Tensor::scalar(c));
        let l = diff::hyperbolic_loss(&mut t, kind, e, ep, en, cv, cfg).unwrap();
        (t.value(l.total).item(), t.value(l.centripetal).item(), t.value(l.clustering).item())
    }

    fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
        Tensor::matrix(rows.len(), rows[0].len(), rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn tape_losses_match_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = LossConfig::default();
        for kind in [ManifoldKind::Euclidean, ManifoldKind::Poincare, ManifoldKind::Lorentz] {
            let [a, p, n] = random_batch(kind, 24, &mut rng);
            let plain = hyperbolic_loss(&a, &p, &n, 1.0, kind, &cfg).unwrap();
            let (tot, ce, cl) = tape_loss(kind, [&to_tensor(&a), &to_tensor(&p), &to_tensor(&n)], 1.0, &cfg);
            assert!((plain.total - tot).abs() < 1e-9);
            assert!((plain.centripetal - ce).abs() < 1e-9);
            assert!((plain.clustering - cl).abs() < 1e-9);
        }
    }

    #[test]
    fn clustering_step_reduces_violation() {
        // single violating triplet in the ball: positive far, negative close
        let kind = ManifoldKind::Poincare;
        let cfg = LossConfig { w_ce: 0.0, ..LossConfig::default() };
        let e0 = Tensor::matrix(1, 2, vec![0.1, 0.2]).unwrap();
        let ep = Tensor::matrix(1, 2, project_poincare(&[-1.2, 0.4], 1.0).into_inner()).unwrap();
        let en = Tensor::matrix(1, 2, vec![0.15, 0.25]).unwrap();
        let gap = |e: &Tensor| {
            geometry::poincare_distance(e.row(0), ep.row(0), 1.0).unwrap()
                - geometry::poincare_distance(e.row(0), en.row(0), 1.0).unwrap()
        };
        let mut t = Tape::new();
        let ev = t.param(e0.clone());
        let (pv, nv) = (t.constant(ep.clone()), t.constant(en.clone()));
        let cv = t.constant(Tensor::scalar(1.0));
        let l = diff::hyperbolic_loss(&mut t, kind, ev, pv, nv, cv, &cfg).unwrap();
        let g = t.backward(l.total).unwrap().get(ev).unwrap();
        let stepped = Tensor::matrix(1, 2, e0.data().iter().zip(g.data()).map(|(x, d)| x - 1e-3 * d).collect()).unwrap();
        assert!(gap(&stepped) < gap(&e0));
    }

    #[test]
    fn losses_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = LossConfig { alpha0: 3.0, beta0: 1.0, ..LossConfig::default() };
        for kind in [ManifoldKind::Euclidean, ManifoldKind::Poincare, ManifoldKind::Lorentz] {
            for _ in 0..20 {
                let h: Vec<Tensor> = (0..3)
                    .map(|_| Tensor::matrix(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
                    .collect();
                let (hp, hn) = (h[1].clone(), h[2].clone());
                let c = rng.random_range(0.5..2.0);
                let cfg2 = cfg.clone();
                let f = move |t: &mut Tape, x: Var| -> Result<Var> {
                    let cv = t.constant(Tensor::scalar(c));
                    let p = t.constant(hp.clone());
                    let n = t.constant(hn.clone());
                    let e = geometry::diff::project(t, kind, x, cv)?;
                    let ep = geometry::diff::project(t, kind, p, cv)?;
                    let en = geometry::diff::project(t, kind, n, cv)?;
                    Ok(diff::hyperbolic_loss(t, kind, e, ep, en, cv, &cfg2)?.total)
                };
                let r = finite_difference_check(f, &h[0], 1e-6).unwrap();
                assert!(r.max_rel_error < 1e-4, "{kind}: {r:?}");
            }
        }
    }

    #[test]
    fn contrastive_examples() {
        let units = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        let l = batch_contrastive_loss(&units, &[1, 0, 3, 2], 0.05).unwrap();
        assert!(l < 0.01, "{l}");

        let same = vec![vec![1.0, 0.0]; 5];
        let l = batch_contrastive_loss(&same, &[1, 0, 3, 2, 0], 0.05).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let units: Vec<Vec<f64>> = (0..6)
            .map(|_| geometry::squash_normalize(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.3]).u)
            .collect();
        let pair = [1, 0, 3, 2, 5, 4];
        let base = batch_contrastive_loss(&units, &pair, 0.05).unwrap();
        // swap pairs (0,1) and (4,5) positions
        let perm = [4, 5, 2, 3, 0, 1];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| units[i].clone()).collect();
        let l2 = batch_contrastive_loss(&permuted, &pair, 0.05).unwrap();
        assert!((base - l2).abs() < 1e-12);

        assert!(batch_contrastive_loss(&units, &[0, 1, 2, 3, 4, 5], 0.05).is_err());
    }

    #[test]
    fn contrastive_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = Tensor::matrix(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let r = finite_difference_check(
            |t, x| {
                let u = geometry::diff::squash_normalize(t, x)?;
                diff::batch_contrastive_loss(t, u, &[1, 0, 3, 2], 0.5)
            },
            &s,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
