use him_demo::{point_distance, project_point, SsdDemo, TreeDemo};

#[test]
fn projection_lands_in_the_disk() {
    for kind in ["poincare", "lorentz"] {
        for &(sx, sy) in &[(0.0, 0.0), (0.3, -0.2), (5.0, 5.0), (-40.0, 1.0)] {
            let p = project_point(kind, sx, sy, 2.0, 1.5).unwrap();
            assert!(p[0].hypot(p[1]) < 1.0, "{kind} {p:?}");
            assert!(p[2] >= 0.0);
        }
    }
    let origin = project_point("lorentz", 0.0, 0.0, 4.0, 1.0).unwrap();
    assert_eq!(&origin[..3], &[0.0, 0.0, 0.0]);
    assert_eq!(&origin[3..], &[2.0, 0.0, 0.0]);
    let e = project_point("euclidean", 1.0, 0.0, 1.0, 7.0).unwrap();
    assert_eq!(e[3], 1f64.tanh());
    assert!(project_point("sphere", 0.0, 0.0, 1.0, 1.0).is_err());
    assert!(project_point("poincare", 0.0, 0.0, -1.0, 1.0).is_err());
}

#[test]
fn disk_views_agree() {
    // same direction; the ball head puts the point at radius tanh(z), the
    // hyperboloid's stereographic image at tanh(z/2)
    let p = project_point("poincare", 0.4, -0.1, 1.0, 0.8).unwrap();
    let l = project_point("lorentz", 0.4, -0.1, 1.0, 0.8).unwrap();
    let (rp, rl) = (p[0].hypot(p[1]), l[0].hypot(l[1]));
    assert!((p[0] / rp - l[0] / rl).abs() < 1e-12);
    assert!((rl - (rp.atanh() / 2.0).tanh()).abs() < 1e-12);
    let d = point_distance("lorentz", &[0.2, 0.1], &[0.2, 0.1], 1.0, 1.0).unwrap();
    assert!(d.abs() < 1e-7);
    let far = point_distance("poincare", &[3.0, 0.0], &[-3.0, 0.0], 1.0, 2.0).unwrap();
    let near = point_distance("poincare", &[0.1, 0.0], &[-0.1, 0.0], 1.0, 2.0).unwrap();
    assert!(far > near);
    assert!(point_distance("poincare", &[1.0], &[0.0, 0.0], 1.0, 1.0).is_err());
}

#[test]
fn tree_delta_responds_to_edges() {
    let mut t = TreeDemo::build(3, 4, 1).unwrap();
    assert!(t.len() > 10);
    let parents = t.parents();
    assert_eq!(parents[0], -1);
    assert!(parents[1..].iter().all(|&p| p >= 0));
    assert_eq!(t.exact_delta().unwrap()[0], 0.0);
    assert_eq!(t.sampled_delta(2000, 3).unwrap()[0], 0.0);

    assert!(!t.add_edge(1, 0), "tree edge");
    assert!(!t.add_edge(2, 2));
    assert!(!t.add_edge(0, 10_000));
    let leaves: Vec<usize> = (0..t.len()).filter(|&v| !parents.contains(&(v as i32))).collect();
    assert!(t.add_edge(leaves[0], *leaves.last().unwrap()));
    assert!(!t.add_edge(*leaves.last().unwrap(), leaves[0]), "duplicate");
    assert_eq!(t.extra_edges().len(), 2);
    assert!(t.exact_delta().unwrap()[0] > 0.0);
    t.clear_extra();
    assert_eq!(t.exact_delta().unwrap()[0], 0.0);
}

#[test]
fn scan_and_dual_agree() {
    let d = SsdDemo::build(48, 8, 3, 0.5, 7).unwrap();
    assert_eq!(d.matrix().len(), 48 * 48);
    assert_eq!(d.scan().len(), 48 * 3);
    assert!(d.max_deviation() < 1e-9);
    let m = d.matrix();
    for t in 0..48 {
        for s in t + 1..48 {
            assert_eq!(m[t * 48 + s], 0.0);
        }
    }
    assert!(SsdDemo::build(0, 1, 1, 0.5, 0).is_err());
    assert!(SsdDemo::build(8, 1, 1, 1.0, 0).is_err());
}
