use proptest::prelude::*;

use raymarch_ct::field::{FieldConfig, HashEncoderConfig, RdaField, Sequence};
use raymarch_ct::geometry::{make_circular_geometry, ray_aabb_intersect, Aabb, Ray, ScanGeometry, Vec3};
use raymarch_ct::io;
use raymarch_ct::metrics::{mask_overlap, psnr, ssim};
use raymarch_ct::projector::{backproject, forward_project, project_ray, ProjectionSet};
use raymarch_ct::rng::Prng;
use raymarch_ct::sampler::{
    density_pdf, hybrid_sample, systematic_allocate, traverse_occupied, HybridOptions, OccupancyGrid, SegmentMode,
};
use raymarch_ct::volume::Volume;

fn vec3() -> impl Strategy<Value = Vec3> {
    (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn unit_dir() -> impl Strategy<Value = Vec3> {
    vec3().prop_filter("non-degenerate", |v| v.norm() > 0.1).prop_map(|v| v.normalized())
}

fn random_volume(dims: [usize; 3], bounds: &Aabb, seed: u64) -> Volume {
    let mut v = Volume::covering(bounds, dims).unwrap();
    let mut rng = Prng::new(seed);
    for x in &mut v.data {
        *x = rng.uniform() as f32;
    }
    v
}

fn small_geometry(views: usize, n: usize, bounds: Aabb) -> ScanGeometry {
    let pitch = ScanGeometry::covering_pitch(&bounds, 20.0, 40.0, n);
    make_circular_geometry(views, 20.0, 40.0, n, n, pitch, pitch, bounds).unwrap()
}

/// Inside-test marching along the ray at a fixed step.
fn brute_interval(origin: Vec3, dir: Vec3, b: &Aabb, t_far: f64, step: f64) -> Option<(f64, f64)> {
    let mut first = None;
    let mut last = None;
    let n = (t_far / step) as usize;
    for i in 0..=n {
        let t = i as f64 * step;
        if b.contains(origin + dir * t) {
            first.get_or_insert(t);
            last = Some(t);
        }
    }
    Some((first?, last?))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn slab_test_agrees_with_brute_force_march(origin in vec3(), dir in unit_dir(), half in (0.2..1.5f64, 0.2..1.5f64, 0.2..1.5f64)) {
        let b = Aabb::new(Vec3::new(-half.0, -half.1, -half.2), Vec3::new(half.0, half.1, half.2)).unwrap();
        let step = 1e-3;
        let brute = brute_interval(origin, dir, &b, 12.0, step);
        let ray = Ray::new(origin, dir);
        // The slab test reports the whole line; the march only sees t >= 0.
        let slab = ray_aabb_intersect(&ray, &b).filter(|&(_, t1)| t1 >= 0.0).map(|(t0, t1)| (t0.max(0.0), t1));
        match (slab, brute) {
            (Some((t0, t1)), Some((b0, b1))) => {
                prop_assert!((t0 - b0).abs() <= step + 1e-9, "entry {t0} vs {b0}");
                prop_assert!((t1 - b1).abs() <= step + 1e-9, "exit {t1} vs {b1}");
            }
            (Some((t0, t1)), None) => prop_assert!(t1 - t0 < 2.0 * step, "march missed a chord of {}", t1 - t0),
            (None, Some((b0, b1))) => prop_assert!(b1 - b0 < 2.0 * step),
            (None, None) => {}
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn projector_pair_is_adjoint(seed in any::<u64>()) {
        let bounds = Aabb::centered_cube(4.0);
        let geom = small_geometry(4, 10, bounds);
        let x = random_volume([10, 10, 10], &bounds, seed);
        let ax = forward_project(&x, &geom, 0.4).unwrap();
        let mut y = ProjectionSet::zeros(geom);
        let mut rng = Prng::new(seed ^ 0x5eed);
        for img in &mut y.images {
            for v in img.iter_mut() {
                *v = rng.uniform() as f32 - 0.5;
            }
        }
        let aty = backproject(&y, x.dims, x.spacing, x.origin, 0.4).unwrap();
        let lhs = ax.dot(&y);
        let rhs: f64 = x.data.iter().zip(&aty.data).map(|(&a, &b)| a as f64 * b as f64).sum();
        prop_assert!((lhs - rhs).abs() / (ax.norm() * y.norm()) <= 1e-5, "{lhs} vs {rhs}");
    }

    #[test]
    fn projection_is_linear(seed in any::<u64>(), a in -2.0..2.0f32, b in -2.0..2.0f32) {
        let bounds = Aabb::centered_cube(4.0);
        let geom = small_geometry(3, 8, bounds);
        let x = random_volume([8, 8, 8], &bounds, seed);
        let y = random_volume([8, 8, 8], &bounds, seed.wrapping_add(1));
        let mut combo = x.clone();
        for ((c, &xv), &yv) in combo.data.iter_mut().zip(&x.data).zip(&y.data) {
            *c = a * xv + b * yv;
        }
        let px = forward_project(&x, &geom, 0.5).unwrap();
        let py = forward_project(&y, &geom, 0.5).unwrap();
        let pc = forward_project(&combo, &geom, 0.5).unwrap();
        let scale = px.norm() + py.norm();
        for ((&c, &u), &v) in pc.values().collect::<Vec<_>>().iter().zip(&px.values().collect::<Vec<_>>()).zip(&py.values().collect::<Vec<_>>()) {
            prop_assert!((c as f64 - (a * u + b * v) as f64).abs() <= 1e-5 * scale.max(1.0));
        }
    }

    #[test]
    fn midpoint_error_shrinks_with_step(seed in any::<u64>(), origin in vec3(), dir in unit_dir()) {
        // Trilinear interpolation of values in [0, 1] at spacing s is
        // sqrt(3)/s-Lipschitz, so the midpoint rule over a chord of length
        // len errs by at most L * h * len / 4.
        let bounds = Aabb::centered_cube(2.0);
        let vol = random_volume([6, 6, 6], &bounds, seed);
        let pad = bounds.extent() * 0.5 + vol.spacing;
        let big = Aabb::new(-pad, pad).unwrap();
        let ray = Ray::new(origin * 3.0, dir).clipped_to(&big);
        prop_assume!(!ray.is_empty());
        let lip = 3f64.sqrt() / vol.spacing.min_elem();
        let fine = 0.002;
        let reference = project_ray(&vol, &ray, fine);
        for h in [0.4, 0.2, 0.1] {
            let err = (project_ray(&vol, &ray, h) - reference).abs();
            prop_assert!(err <= lip * ray.length() * (h + fine) / 4.0 + 1e-9, "h {h}: err {err}");
        }
    }
}

/// `(k + v) / n2` inverted through the cumulative sum of `pdf`, written
/// without reference to the library.
fn eq2_oracle(z: &[f64], pdf: &[f64], n2: usize, v: f64, k: usize) -> f64 {
    let position = (k as f64 + v) / n2 as f64;
    let mut acc = 0.0;
    let mut seg = pdf.len() - 1;
    for (i, p) in pdf.iter().enumerate() {
        acc += p;
        if position < acc && i < pdf.len() - 1 {
            seg = i;
            break;
        }
    }
    let x = v + k as f64 / n2 as f64;
    z[seg] + (x - x.floor()) * (z[seg + 1] - z[seg])
}

fn edges_and_pdf() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..24).prop_flat_map(|m| {
        (
            proptest::collection::vec(0.01..3.0f64, m),
            proptest::collection::vec(0.0..5.0f64, m),
            -10.0..10.0f64,
        )
            .prop_map(|(gaps, w, start)| {
                let mut z = vec![start];
                for g in gaps {
                    z.push(z.last().unwrap() + g);
                }
                (z, density_pdf(&w).0)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn systematic_fine_matches_placement_formula((z, pdf) in edges_and_pdf(), n2 in 1usize..64, v in 0.0..1.0f64) {
        let got = systematic_allocate(&z, &pdf, n2, v).unwrap();
        prop_assert_eq!(got.len(), n2);
        for (k, &(t, seg)) in got.iter().enumerate() {
            let want = eq2_oracle(&z, &pdf, n2, v, k);
            prop_assert!((t - want).abs() <= 1e-12 * want.abs().max(1.0), "k {k}: {t} vs {want}");
            prop_assert!(t >= z[seg] && t <= z[seg + 1]);
        }
    }

    #[test]
    fn systematic_counts_are_floor_or_ceil((z, pdf) in edges_and_pdf(), n2 in 1usize..64, v in 0.0..1.0f64) {
        let got = systematic_allocate(&z, &pdf, n2, v).unwrap();
        let mut counts = vec![0usize; pdf.len()];
        for &(_, seg) in &got {
            counts[seg] += 1;
        }
        for (c, p) in counts.iter().zip(&pdf) {
            let expect = p * n2 as f64;
            prop_assert!((*c as f64) >= (expect - 1e-9).floor() && (*c as f64) <= (expect + 1e-9).ceil(), "count {c} for mass {expect}");
        }
    }

    #[test]
    fn uniform_pdf_puts_one_sample_per_segment(m in 1usize..40, v in 0.0..1.0f64) {
        let z: Vec<f64> = (0..=m).map(|i| i as f64).collect();
        let (pdf, _) = density_pdf(&vec![1.0; m]);
        let got = systematic_allocate(&z, &pdf, m, v).unwrap();
        let mut counts = vec![0usize; m];
        for &(_, seg) in &got {
            counts[seg] += 1;
        }
        prop_assert!(counts.iter().all(|&c| c == 1), "{counts:?}");
    }

    #[test]
    fn hybrid_samples_stay_inside_occupied_intervals(
        seed in any::<u64>(),
        origin in vec3(),
        dir in unit_dir(),
        n1 in 1usize..40,
        n2 in 0usize..40,
        by_interval in any::<bool>(),
    ) {
        let bounds = Aabb::centered_cube(1.0);
        let mut grid = OccupancyGrid::full([6, 6, 6], bounds).unwrap();
        let mut rng = Prng::new(seed);
        for o in &mut grid.occupied {
            *o = rng.uniform() < 0.5;
        }
        let ray = Ray::new(origin * 2.0, dir);
        let intervals = traverse_occupied(&grid, &ray);
        let total: f64 = intervals.iter().map(|(a, b)| b - a).sum();
        let segments = if by_interval { SegmentMode::OccupiedIntervals } else { SegmentMode::CoarseStrata };
        let opts = HybridOptions { n1, n2, segments };
        let s = hybrid_sample(&grid, &ray, opts, &mut rng, |t| t.iter().map(|&x| (3.0 * x).sin().abs()).collect()).unwrap();
        prop_assert!(s.len() <= n1 + n2);
        prop_assert_eq!(s.is_empty(), intervals.is_empty());
        for w in s.t_values.windows(2) {
            prop_assert!(w[0] < w[1]);
        }
        let mut delta_sum = 0.0;
        for ((&t, &d), &seg) in s.t_values.iter().zip(&s.deltas).zip(&s.segment_ids) {
            let (a, b) = s.intervals[seg];
            prop_assert!(t >= a - 1e-12 && t <= b + 1e-12, "{t} outside [{a}, {b}]");
            prop_assert!(d >= 0.0 && t + d <= b + 1e-12);
            delta_sum += d;
        }
        prop_assert!(delta_sum <= total + 1e-9);
    }

    #[test]
    fn traversal_intervals_are_ordered_and_disjoint(seed in any::<u64>(), origin in vec3(), dir in unit_dir()) {
        let bounds = Aabb::centered_cube(1.0);
        let mut grid = OccupancyGrid::full([5, 7, 4], bounds).unwrap();
        let mut rng = Prng::new(seed);
        for o in &mut grid.occupied {
            *o = rng.uniform() < 0.4;
        }
        let ray = Ray::new(origin * 2.0, dir);
        let iv = traverse_occupied(&grid, &ray);
        for (a, b) in &iv {
            prop_assert!(a < b);
            let mid = ray.at(0.5 * (a + b));
            prop_assert!(grid.is_occupied_at(mid));
        }
        for w in iv.windows(2) {
            prop_assert!(w[0].1 <= w[1].0);
        }
    }
}

fn tiny_field(seed: u64, use_attention: bool) -> RdaField {
    let cfg = FieldConfig {
        encoder: HashEncoderConfig { levels: 2, log2_table_size: 6, feats_per_level: 2, base_res: 2, growth: 2.0 },
        width: 8,
        heads: 2,
        blocks: 2,
        use_attention,
        ..FieldConfig::default()
    };
    RdaField::new(cfg, Aabb::centered_cube(1.0), &mut Prng::new(seed)).unwrap()
}

fn unit_points(n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = Prng::new(seed);
    (0..n).map(|_| Vec3::new(rng.uniform(), rng.uniform(), rng.uniform())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn densities_are_non_negative_for_any_parameters(seed in any::<u64>(), scale in 0.1..50.0f64, n in 1usize..12) {
        let mut f = tiny_field(seed, true);
        let mut rng = Prng::new(seed ^ 1);
        for p in &mut f.params {
            *p = scale * (2.0 * rng.uniform() - 1.0);
        }
        let d = f.query_densities(&unit_points(n, seed), None);
        prop_assert!(d.iter().all(|&x| x >= 0.0 && x.is_finite()), "{d:?}");
    }

    #[test]
    fn query_is_permutation_equivariant(seed in any::<u64>(), n in 1usize..16) {
        let mut f = tiny_field(seed, true);
        let mut rng = Prng::new(seed ^ 2);
        for p in &mut f.params {
            *p = 2.0 * rng.uniform() - 1.0;
        }
        let pts = unit_points(n, seed);
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.below(i + 1));
        }
        let permuted: Vec<Vec3> = order.iter().map(|&i| pts[i]).collect();
        let a = f.query_densities(&pts, None);
        let b = f.forward(&Sequence::points(&permuted), None);
        for (k, &i) in order.iter().enumerate() {
            prop_assert!((b[k] - a[i]).abs() <= 1e-6 * a[i].abs().max(1e-12), "{} vs {}", b[k], a[i]);
        }
    }

    #[test]
    fn repeated_queries_are_bit_identical(seed in any::<u64>(), n in 1usize..10) {
        let f = tiny_field(seed, true);
        let pts = unit_points(n, seed);
        prop_assert_eq!(f.query_densities(&pts, None), f.query_densities(&pts, None));
    }
}

fn mask(len: usize) -> impl Strategy<Value = Vec<bool>> {
    proptest::collection::vec(any::<bool>(), len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dice_is_a_function_of_iou((a, b) in (1usize..300).prop_flat_map(|n| (mask(n), mask(n)))) {
        let (iou, dice) = mask_overlap(a.iter().copied(), b.iter().copied());
        prop_assert!((0.0..=1.0).contains(&iou) && (0.0..=1.0).contains(&dice));
        prop_assert!((dice - 2.0 * iou / (1.0 + iou)).abs() <= 1e-12);
    }

    #[test]
    fn psnr_and_ssim_are_scale_invariant(seed in any::<u64>(), s in 0.5..4.0f32) {
        let bounds = Aabb::centered_cube(1.0);
        let gt = random_volume([8, 8, 8], &bounds, seed);
        let pred = random_volume([8, 8, 8], &bounds, seed ^ 9);
        let p1 = psnr(&gt, &pred, Some(1.0)).unwrap();
        let p2 = psnr(&gt.scaled(s), &pred.scaled(s), Some(s as f64)).unwrap();
        prop_assert!((p1 - p2).abs() < 1e-4, "{p1} vs {p2}");
        let s1 = ssim(&gt, &pred, Some(1.0)).unwrap();
        let s2 = ssim(&pred, &gt, Some(1.0)).unwrap();
        prop_assert!((s1 - s2).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&s1));
    }

    #[test]
    fn psnr_falls_as_error_grows(seed in any::<u64>()) {
        let bounds = Aabb::centered_cube(1.0);
        let gt = random_volume([6, 6, 6], &bounds, seed);
        let noise = random_volume([6, 6, 6], &bounds, seed ^ 3);
        let mut last = f64::INFINITY;
        for amp in [0.01f32, 0.05, 0.1] {
            let mut pred = gt.clone();
            for (p, &n) in pred.data.iter_mut().zip(&noise.data) {
                *p += amp * (2.0 * n - 1.0);
            }
            let v = psnr(&gt, &pred, Some(1.0)).unwrap();
            prop_assert!(v < last);
            last = v;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn volume_files_round_trip_bit_exactly(nx in 1usize..6, ny in 1usize..6, nz in 1usize..6, bits in proptest::collection::vec(any::<u32>(), 125)) {
        let dir = tempfile::tempdir().unwrap();
        let mut v = Volume::covering(&Aabb::centered_cube(1.3), [nx, ny, nz]).unwrap();
        for (x, &b) in v.data.iter_mut().zip(&bits) {
            let f = f32::from_bits(b);
            *x = if f.is_finite() { f } else { 0.0 };
        }
        let path = dir.path().join("vol");
        io::write_volume(&path, &v).unwrap();
        let back = io::read_volume(&path).unwrap();
        prop_assert_eq!(back.dims, v.dims);
        prop_assert_eq!(back.spacing, v.spacing);
        prop_assert_eq!(back.origin, v.origin);
        prop_assert!(back.data.iter().zip(&v.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn projection_dirs_round_trip_bit_exactly(views in 1usize..5, rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let geom = make_circular_geometry(views, 30.0, 45.0, rows, cols, 0.7, 0.9, Aabb::centered_cube(2.0)).unwrap();
        let mut p = ProjectionSet::zeros(geom);
        let mut rng = Prng::new(seed);
        for img in &mut p.images {
            for x in img.iter_mut() {
                *x = f32::from_bits(rng.next_u64() as u32 & 0x7f7f_ffff);
            }
        }
        io::write_projections(dir.path(), &p).unwrap();
        let back = io::read_projections(dir.path()).unwrap();
        prop_assert_eq!(back.geom, p.geom);
        for (a, b) in back.images.iter().zip(&p.images) {
            prop_assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
