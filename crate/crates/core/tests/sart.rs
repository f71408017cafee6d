use raymarch_ct::geometry::{make_circular_geometry, ScanGeometry};
use raymarch_ct::metrics::psnr;
use raymarch_ct::phantom::{builtin_bounds, builtin_phantom};
use raymarch_ct::projector::{forward_project, ProjectionSet};
use raymarch_ct::sart::{sart_reconstruct, sart_reconstruct_with, SartConfig};

fn blocks_data(dims: usize, views: usize, det: usize) -> (raymarch_ct::Volume, ProjectionSet) {
    let gt = builtin_phantom("blocks", [dims; 3]).unwrap();
    let b = builtin_bounds();
    let pitch = ScanGeometry::covering_pitch(&b, 80.0, 160.0, det);
    let geom = make_circular_geometry(views, 80.0, 160.0, det, det, pitch, pitch, b).unwrap();
    let step = 0.5 * gt.spacing.min_elem();
    let p = forward_project(&gt, &geom, step).unwrap();
    (gt, p)
}

#[test]
fn residual_is_non_increasing_on_consistent_data() {
    let (gt, p) = blocks_data(16, 16, 24);
    let step = 0.5 * gt.spacing.min_elem();
    let cfg = SartConfig { iterations: 10, nonneg_clamp: false, ..SartConfig::default() };
    let mut residuals = Vec::new();
    sart_reconstruct_with(&p, gt.dims, gt.spacing, gt.origin, &cfg, |_, x| {
        let ax = forward_project(x, &p.geom, step).unwrap();
        residuals.push(p.map2(&ax, |a, b| a - b).norm());
    })
    .unwrap();
    let first = p.norm();
    assert!(residuals[0] < first);
    for w in residuals.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-6), "{residuals:?}");
    }
}

#[test]
fn dense_views_reach_25_db_and_sparse_views_score_lower() {
    let (gt, dense) = blocks_data(32, 90, 48);
    let cfg = SartConfig::default();
    let rec = sart_reconstruct(&dense, gt.dims, gt.spacing, gt.origin, &cfg).unwrap();
    let dense_psnr = psnr(&gt, &rec, None).unwrap();
    assert!(dense_psnr >= 25.0, "dense-view SART {dense_psnr:.2} dB");

    let (_, sparse) = blocks_data(32, 10, 48);
    let rec = sart_reconstruct(&sparse, gt.dims, gt.spacing, gt.origin, &cfg).unwrap();
    let sparse_psnr = psnr(&gt, &rec, None).unwrap();
    assert!(sparse_psnr < dense_psnr, "sparse {sparse_psnr:.2} vs dense {dense_psnr:.2}");
}

#[test]
fn reconstruction_is_deterministic() {
    let (gt, p) = blocks_data(12, 6, 16);
    let cfg = SartConfig { iterations: 3, ..SartConfig::default() };
    let a = sart_reconstruct(&p, gt.dims, gt.spacing, gt.origin, &cfg).unwrap();
    let b = sart_reconstruct(&p, gt.dims, gt.spacing, gt.origin, &cfg).unwrap();
    assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
}
