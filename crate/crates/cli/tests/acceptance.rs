//! Acceptance checks on synthetic ground truth. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use capvision_core::detection::{detect_circles, RadiusRange};
use capvision_core::evaluation::{depth_accuracy, f_score, match_detections, DEPTH_WINDOW};
use capvision_core::imgcore::{otsu_threshold, BinaryMask, ImageGray};
use capvision_core::io::save_ply;
use capvision_core::linalg::{Mat3, Point3};
use capvision_core::localization::{localize, CameraIntrinsics, DepthFrame};
use capvision_core::pipeline::{segment_and_detect, PipelineConfig};
use capvision_core::registration::{angle_between, estimate_pose, rotation_to_quaternion, PoseParams, Quaternion, RigidTransform};
use capvision_core::segmentation::{chan_vese_energy, chan_vese_run, Backend, ChanVeseParams, LevelSetField};
use capvision_core::synthetic::{render_scene, sample_cap_cloud, CapSpec, HoleDisk, SceneSpec};
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg)
    }
}

fn k() -> CameraIntrinsics<f64> {
    CameraIntrinsics::default()
}

fn c1_fscore() -> Outcome {
    let f: f64 = f_score(0.9929, 0.9899).map_err(|e| e.to_string())?;
    ensure((f - 0.9914).abs() <= 1e-4, format!("f = {f}"))?;
    Ok(format!("f = {f:.6}"))
}

fn c2_depth_protocol() -> Outcome {
    // 0.1 mm units so that 79.58 cm is representable exactly.
    let frame = DepthFrame::filled(640, 480, 7958, 1e-4).map_err(|e| e.to_string())?;
    let s = depth_accuracy::<f64>(&frame, 0.7930, DEPTH_WINDOW).map_err(|e| e.to_string())?;
    ensure((s.offset_m + 0.0028).abs() <= 1e-12, format!("offset {} m", s.offset_m))?;
    ensure(s.std_m == 0.0 && s.range_m == 0.0, format!("std {} range {}", s.std_m, s.range_m))?;
    Ok(format!("offset = {:.4} mm", s.offset_m * 1e3))
}

/// Untilted domes at random non-overlapping image positions with projected radii in [8, 38].
fn random_dome_scene(rng: &mut ChaCha8Rng) -> SceneSpec<f64> {
    let k = k();
    let n = rng.random_range(1..=8);
    let mut caps: Vec<CapSpec<f64>> = Vec::new();
    let mut circles: Vec<(f64, f64, f64)> = Vec::new();
    let mut attempts = 0;
    while caps.len() < n && attempts < 10_000 {
        attempts += 1;
        let z = rng.random_range(0.34..0.40);
        let target = rng.random_range(8.0..=38.0);
        let radius = target * z / k.fx;
        let (u, v) = (rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        let center = Point3::new((u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z);
        let cap = CapSpec::dome(center, radius);
        let c = cap.image_circle(&k);
        let inside = c.cx - c.r >= 2.0 && c.cy - c.r >= 2.0 && c.cx + c.r <= 637.0 && c.cy + c.r <= 477.0;
        let apart = circles.iter().all(|&(x, y, r)| (x - c.cx).hypot(y - c.cy) >= r + c.r + 6.0);
        if (8.0..=38.0).contains(&c.r) && inside && apart {
            circles.push((c.cx, c.cy, c.r));
            caps.push(cap);
        }
    }
    SceneSpec { noise_sigma: 5.0, seed: rng.random(), ..SceneSpec::new(0.43, caps) }
}

fn c3_detection_unity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = PipelineConfig::<f64>::default();
    let (mut caps, mut worst_c, mut worst_r) = (0, 0.0f64, 0.0f64);
    for scene_idx in 0..20 {
        let spec = random_dome_scene(&mut rng);
        let scene = render_scene(&spec, &k()).map_err(|e| e.to_string())?;
        let dets = segment_and_detect(&scene.rgb, &cfg).map_err(|e| e.to_string())?;
        let m = match_detections(&dets, &scene.gt_circles, 0.5);
        ensure(
            m.recall == 1.0 && m.precision == 1.0,
            format!("scene {scene_idx}: tp {} fp {} fn {}", m.tp, m.fp, m.fn_),
        )?;
        for &(di, gi) in &m.matches {
            let (d, g) = (dets[di], scene.gt_circles[gi]);
            worst_c = worst_c.max((d.cx - g.cx).hypot(d.cy - g.cy));
            worst_r = worst_r.max((d.r - g.r).abs());
        }
        caps += scene.gt_circles.len();
    }
    ensure(worst_c <= 2.0 && worst_r <= 2.0, format!("center err {worst_c:.3} px, radius err {worst_r:.3} px"))?;
    Ok(format!("{caps} caps; max center err {worst_c:.2} px, max radius err {worst_r:.2} px"))
}

/// Straightforward 3D-accumulator Hough transform used as the reference detector. A
/// digital disk boundary spans one pixel radially, so cells are scored over two adjacent
/// radius bins.
fn brute_force_hough(mask: &BinaryMask, r_min: usize, r_max: usize, thresh: f64, nms: f64) -> Vec<(f64, f64, f64)> {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let fg = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && mask.get(x as usize, y as usize);
    let edges: Vec<(i64, i64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| fg(x, y) && [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| !fg(x + dx, y + dy)))
        .collect();
    let votes: Vec<Vec<f64>> = (r_min..=r_max)
        .map(|r| {
            let rf = r as f64;
            let ring: Vec<(i64, i64)> = (-(r as i64) - 1..=r as i64 + 1)
                .flat_map(|dy| (-(r as i64) - 1..=r as i64 + 1).map(move |dx| (dx, dy)))
                .filter(|&(dx, dy)| {
                    let d = ((dx * dx + dy * dy) as f64).sqrt();
                    d >= rf - 0.5 && d < rf + 0.5
                })
                .collect();
            let mut v = vec![0.0f64; (w * h) as usize];
            let weight = 1.0 / ring.len() as f64;
            for &(ex, ey) in &edges {
                for &(dx, dy) in &ring {
                    let (x, y) = (ex + dx, ey + dy);
                    if x >= 0 && y >= 0 && x < w && y < h {
                        v[(y * w + x) as usize] += weight;
                    }
                }
            }
            v
        })
        .collect();
    let mut best = vec![(0.0f64, 0.0f64); (w * h) as usize];
    for (i, pair) in votes.windows(2).enumerate() {
        let r = (r_min + i) as f64;
        for (c, b) in best.iter_mut().enumerate() {
            let s = pair[0][c] + pair[1][c];
            if s > b.0 {
                *b = (s, (r * pair[0][c] + (r + 1.0) * pair[1][c]) / s);
            }
        }
    }
    let score = |x: i64, y: i64| if x < 0 || y < 0 || x >= w || y >= h { 0.0 } else { best[(y * w + x) as usize].0 };
    let mut peaks: Vec<(f64, i64, i64)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let s = score(x, y);
            let local_max = (-1..=1).all(|dy| (-1..=1).all(|dx| score(x + dx, y + dy) <= s));
            if s >= thresh && local_max {
                peaks.push((s, x, y));
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out: Vec<(f64, f64, f64)> = Vec::new();
    for (_, x, y) in peaks {
        let (xf, yf) = (x as f64, y as f64);
        if out.iter().all(|&(ox, oy, _)| (ox - xf).hypot(oy - yf) >= nms) {
            out.push((xf, yf, best[(y * w + x) as usize].1));
        }
    }
    out
}

fn c4_cht_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let range = RadiusRange::<f64>::default();
    let (mut total, mut worst) = (0, 0.0f64);
    for mask_idx in 0..20 {
        let (w, h) = (240usize, 200usize);
        let n = rng.random_range(1..=5);
        let mut disks: Vec<(f64, f64, f64)> = Vec::new();
        let mut attempts = 0;
        while disks.len() < n && attempts < 10_000 {
            attempts += 1;
            let r = rng.random_range(10.0..36.0);
            let (cx, cy) = (rng.random_range(r + 2.0..w as f64 - r - 2.0), rng.random_range(r + 2.0..h as f64 - r - 2.0));
            if disks.iter().all(|&(x, y, q)| (x - cx).hypot(y - cy) >= q + r + 4.0) {
                disks.push((cx, cy, r));
            }
        }
        let mask = BinaryMask::from_fn(w, h, |x, y| {
            disks.iter().any(|&(cx, cy, r)| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r)
        })
        .map_err(|e| e.to_string())?;
        let fast = detect_circles(&mask, &range, 0.45, range.r_min);
        let slow = brute_force_hough(&mask, 8, 38, 0.45, range.r_min);
        ensure(fast.len() == slow.len(), format!("mask {mask_idx}: {} vs {} detections", fast.len(), slow.len()))?;
        let mut used = vec![false; fast.len()];
        for &(ox, oy, or) in &slow {
            let hit = fast.iter().enumerate().find(|(i, d)| {
                !used[*i] && (d.cx - ox).abs() <= 2.0 && (d.cy - oy).abs() <= 2.0 && (d.r - or).abs() <= 2.0
            });
            let Some((i, d)) = hit else {
                return Err(format!("mask {mask_idx}: oracle circle ({ox}, {oy}, {or:.2}) unmatched"));
            };
            used[i] = true;
            worst = worst.max((d.cx - ox).abs().max((d.cy - oy).abs()).max((d.r - or).abs()));
        }
        total += slow.len();
    }
    Ok(format!("{total} circles matched one-to-one; max deviation {worst:.2} px"))
}

fn noisy_disk(seed: u64) -> (ImageGray<f64>, BinaryMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 5.0).unwrap();
    let truth = BinaryMask::from_fn(64, 64, |x, y| (x as f64 - 31.5).powi(2) + (y as f64 - 31.5).powi(2) <= 16.0 * 16.0).unwrap();
    let data = truth
        .data()
        .iter()
        .map(|&b| (if b { 200.0f64 } else { 60.0 } + noise.sample(&mut rng)).clamp(0.0, 255.0))
        .collect();
    (ImageGray::new(64, 64, data).unwrap(), truth)
}

fn c5_chan_vese() -> Outcome {
    let mut worst = 1.0f64;
    for seed in 0..10 {
        let (img, truth) = noisy_disk(seed);
        let (init, _) = otsu_threshold(&img).map_err(|e| e.to_string())?;
        for backend in [Backend::Pde, Backend::Morphological] {
            let params = ChanVeseParams { backend, ..ChanVeseParams::default() };
            let seg = chan_vese_run(&img, &init, &params).map_err(|e| e.to_string())?;
            let agree = seg.mask.agreement(&truth);
            worst = worst.min(agree);
            ensure(agree >= 0.99, format!("seed {seed} {backend:?}: agreement {agree}"))?;
            if backend == Backend::Pde {
                let e0 = chan_vese_energy(&img, &LevelSetField::from_mask(&init), &params).map_err(|e| e.to_string())?;
                let e1 = chan_vese_energy(&img, &seg.phi, &params).map_err(|e| e.to_string())?;
                ensure(e1 <= e0, format!("seed {seed}: energy rose {e0} -> {e1}"))?;
            }
        }
    }
    Ok(format!("min agreement {:.4}", worst))
}

fn five_domes() -> SceneSpec<f64> {
    let caps = [(-0.06, -0.04, 0.018), (0.0, -0.04, 0.02), (0.06, -0.035, 0.016), (-0.03, 0.04, 0.021), (0.045, 0.045, 0.017)]
        .iter()
        .map(|&(x, y, r)| CapSpec::dome(Point3::new(x, y, 0.40), r))
        .collect();
    SceneSpec { noise_sigma: 3.0, seed: 6, ..SceneSpec::new(0.43, caps) }
}

fn c6_hole_filling() -> Outcome {
    let spec = five_domes();
    let clean = render_scene(&spec, &k()).map_err(|e| e.to_string())?;
    let dets = segment_and_detect(&clean.rgb, &PipelineConfig::default()).map_err(|e| e.to_string())?;
    ensure(dets.len() == 5, format!("{} detections", dets.len()))?;
    let holes = clean.gt_circles.iter().map(|g| HoleDisk { cx: g.cx, cy: g.cy, r: 5.0 }).collect();
    let holed = render_scene(&SceneSpec { hole_disks: holes, ..spec }, &k()).map_err(|e| e.to_string())?;
    ensure(holed.rgb == clean.rgb, "holes altered the RGB frame".into())?;
    let (a, ra) = localize(&dets, &clean.depth, &k());
    let (b, rb) = localize(&dets, &holed.depth, &k());
    ensure(ra.is_empty() && rb.is_empty() && a.len() == 5 && b.len() == 5, "localization rejected a cap".into())?;
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(&b) {
        ensure(!x.fill_used && y.fill_used, format!("fill_used {} -> {}", x.fill_used, y.fill_used))?;
        worst = worst.max(x.position.distance(&y.position));
    }
    ensure(worst <= 0.005, format!("position moved {:.2} mm", worst * 1e3))?;
    Ok(format!("max shift {:.2} mm", worst * 1e3))
}

fn c7_diameter() -> Outcome {
    let diameters = [0.020, 0.040, 0.060];
    let caps: Vec<_> = diameters
        .iter()
        .zip([-0.12, 0.0, 0.12])
        .map(|(&d, x)| CapSpec::disk(Point3::new(x, 0.0, 0.50), d / 2.0))
        .collect();
    let mut report = Vec::new();
    for (sigma, tol) in [(0.0, 0.003), (0.001, 0.005)] {
        let spec = SceneSpec { depth_noise_sigma: sigma, noise_sigma: 2.0, seed: 7, ..SceneSpec::new(0.55, caps.clone()) };
        let scene = render_scene(&spec, &k()).map_err(|e| e.to_string())?;
        let dets = segment_and_detect(&scene.rgb, &PipelineConfig::default()).map_err(|e| e.to_string())?;
        let (locs, rejects) = localize(&dets, &scene.depth, &k());
        ensure(rejects.is_empty() && locs.len() == 3, format!("sigma {sigma}: {} located", locs.len()))?;
        let mut worst = 0.0f64;
        for (i, &d) in diameters.iter().enumerate() {
            let g = scene.gt_circles[i];
            let loc = locs
                .iter()
                .find(|l| (l.circle.cx - g.cx).hypot(l.circle.cy - g.cy) <= 3.0)
                .ok_or(format!("disk {i} not found"))?;
            let err = loc.diameter_m - d;
            ensure(err.abs() <= tol, format!("sigma {sigma}: {} mm disk estimated {:.2} mm", d * 1e3, loc.diameter_m * 1e3))?;
            worst = worst.max(err.abs());
        }
        report.push(format!("noise {} mm: max err {:.2} mm", sigma * 1e3, worst * 1e3));
    }
    Ok(report.join("; "))
}

fn random_rotation(rng: &mut ChaCha8Rng, max_deg: f64) -> Mat3<f64> {
    let axis = loop {
        let a = Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = a.norm();
        if n > 1e-3 && n <= 1.0 {
            break a / n;
        }
    };
    Mat3::from_axis_angle(&axis, rng.random_range(0.0..=max_deg).to_radians())
}

fn c8_pose() -> Outcome {
    let up = Point3::new(0.0, 0.0, 1.0);
    let model = sample_cap_cloud(0.025, 3000, &RigidTransform::identity(), 0.0, 1000);
    let params = PoseParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut good, mut worst_noisy, mut worst_clean) = (0, 0.0f64, 0.0f64);
    for case in 0..30u64 {
        let rot = random_rotation(&mut rng, 40.0);
        let t = Point3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(0.3..0.5));
        let truth = RigidTransform::new(rot, t);
        let normal = rot.mul_vec(&up);
        for noise in [0.001, 0.0] {
            let sample = sample_cap_cloud(0.025, 3000, &truth, noise, case);
            let est = estimate_pose(&model, &sample, &up, &params).map_err(|e| format!("case {case}: {e}"))?;
            let hist = &est.result.objective_history;
            ensure(hist.windows(2).all(|w| w[1] <= w[0]), format!("case {case}: ICP objective increased"))?;
            let err = angle_between(&normal, &est.cap_normal).map_err(|e| e.to_string())?;
            if noise > 0.0 {
                good += usize::from(err <= 8.0);
                worst_noisy = worst_noisy.max(err);
            } else {
                ensure(err <= 3.0, format!("clean case {case}: {err:.2} deg"))?;
                worst_clean = worst_clean.max(err);
            }
        }
    }
    ensure(good >= 27, format!("{good}/30 noisy cases within 8 deg"))?;
    Ok(format!("noisy {good}/30 within 8 deg (max {worst_noisy:.2}); clean max {worst_clean:.2} deg"))
}

fn c9_quaternions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut worst = 0.0f64;
    for i in 0..100 {
        let v: [f64; 4] = std::array::from_fn(|_| normal.sample(&mut rng));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let q = Quaternion { x: v[0] / n, y: v[1] / n, z: v[2] / n, w: v[3] / n }.canonical();
        let r = q.to_rotation();
        let det = r.determinant();
        let rtr = r.transpose().mul_mat(&r);
        ensure((det - 1.0).abs() <= 1e-9, format!("rotation {i}: det {det}"))?;
        ensure(rtr.frobenius_distance(&Mat3::identity()) <= 1e-9, format!("rotation {i}: not orthonormal"))?;
        let back = rotation_to_quaternion(&r).map_err(|e| e.to_string())?;
        ensure((back.norm() - 1.0).abs() <= 1e-9, format!("rotation {i}: |q| = {}", back.norm()))?;
        let err = [back.x - q.x, back.y - q.y, back.z - q.z, back.w - q.w].iter().fold(0.0f64, |m, d| m.max(d.abs()));
        ensure(err <= 1e-9, format!("rotation {i}: round-trip error {err:e}"))?;
        worst = worst.max(err);
    }
    Ok(format!("max round-trip error {worst:.1e}"))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_capvision")).args(args).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let spec = serde_json::json!({
        "plane_depth": 0.43, "noise_sigma": 4.0, "seed": 10,
        "caps": [
            {"center": [-0.05, -0.03, 0.40], "radius": 0.018},
            {"center": [0.04, 0.02, 0.39], "radius": 0.02},
            {"center": [0.05, -0.05, 0.40], "radius": 0.015}
        ]
    });
    std::fs::write(p("spec.json"), spec.to_string()).map_err(|e| e.to_string())?;
    run_cli(&["synth", "--spec", &p("spec.json"), "--out-dir", &p("scene")])?;
    let scene = |f: &str| p(&format!("scene/{f}"));
    for out in ["a.json", "b.json"] {
        run_cli(&[
            "detect", "--rgb", &scene("rgb.png"), "--depth", &scene("depth.png"), "--intrinsics", &scene("intrinsics.json"),
            "--config", &scene("config.json"), "--out", &p(out),
        ])?;
    }
    let truth = RigidTransform::new(Mat3::from_axis_angle(&Point3::new(1.0, 0.5, 0.0), 0.4), Point3::new(0.0, 0.0, 0.4));
    save_ply(dir.path().join("sample.ply").as_path(), &sample_cap_cloud(0.02, 2000, &truth, 0.0005, 3)).map_err(|e| e.to_string())?;
    for out in ["pa.json", "pb.json"] {
        run_cli(&["pose", "--model", &scene("model.ply"), "--sample", &p("sample.ply"), "--out", &p(out)])?;
    }
    let read = |f: &str| std::fs::read(p(f)).map_err(|e| e.to_string());
    let (a, b, pa, pb) = (read("a.json")?, read("b.json")?, read("pa.json")?, read("pb.json")?);
    ensure(a == b, "detect reports differ".into())?;
    ensure(pa == pb, "pose outputs differ".into())?;
    let doc: serde_json::Value = serde_json::from_slice(&a).map_err(|e| e.to_string())?;
    let n = doc["reports"].as_array().map_or(0, |r| r.len());
    ensure(n == 3, format!("{n} reports"))?;
    Ok(format!("detect {} bytes, pose {} bytes identical", a.len(), pa.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, u64); 10] = [
        ("f-score arithmetic", c1_fscore, 1),
        ("depth accuracy protocol", c2_depth_protocol, 1),
        ("detection unity on clean scenes", c3_detection_unity, 60),
        ("phase-coded CHT matches 3D Hough oracle", c4_cht_oracle, 120),
        ("Chan-Vese correctness", c5_chan_vese, 30),
        ("hole-filling localization", c6_hole_filling, 30),
        ("diameter estimation", c7_diameter, 30),
        ("pose recovery", c8_pose, 120),
        ("quaternion round-trip", c9_quaternions, 1),
        ("CLI determinism", c10_determinism, 30),
    ];
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let res = check();
        let dt = t0.elapsed();
        let res = match res {
            Ok(msg) if dt > Duration::from_secs(*budget) => Err(format!("{msg}; took {dt:.1?}, budget {budget} s")),
            other => other,
        };
        match res {
            Ok(msg) => println!("PASS {:>2} {name}: {msg} [{dt:.2?}]", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {msg} [{dt:.2?}]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
