//! Image, flow and depth metrics against synthetic ground truth.

use std::fmt::Write as _;

use rand::seq::index;

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::geometry::{project, Camera, Pose, Vec3};
use crate::rng::{stream, tag};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PCK_ALPHA: f64 = 0.05;
pub const MAX_KEYPOINTS: usize = 200;

fn check_pair(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() || a.is_empty() {
        return Err(Error::domain(format!(
            "image shapes differ or are empty: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_mask(mask: &Matrix, pixels: usize) -> Result<()> {
    if mask.shape() != (pixels, 1) {
        return Err(Error::domain(format!("mask shape {:?} != ({pixels}, 1)", mask.shape())));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Peak signal-to-noise ratio for `[n, c]` images in `[0, 1]`.
pub fn psnr(a: &Matrix, b: &Matrix) -> Result<f64> {
    check_pair(a, b)?;
    masked_psnr(a, b, &Matrix::filled(a.rows(), 1, 1.0))
}

/// PSNR over pixels with `mask = 1`.
pub fn masked_psnr(a: &Matrix, b: &Matrix, mask: &Matrix) -> Result<f64> {
    check_pair(a, b)?;
    check_mask(mask, a.rows())?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in 0..a.rows() {
        if mask.get(r, 0) > 0.5 {
            sum += a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            count += a.cols();
        }
    }
    if count == 0 {
        return Err(Error::domain("mask selects no pixels"));
    }
    Ok(psnr_from_mse(sum / count as f64))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    std::array::from_fn(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
}

/// Local SSIM at every pixel, channel-averaged. Each window uses the
/// Gaussian weights of the pixels that lie inside the image and inside
/// `support`, renormalized to sum to one.
fn ssim_map(a: &Matrix, b: &Matrix, width: usize, height: usize, support: Option<&Matrix>) -> Vec<f64> {
    let kernel = gaussian_kernel();
    let half = SSIM_WINDOW as isize / 2;
    let channels = a.cols();
    let inside = |i: usize| support.is_none_or(|m| m.get(i, 0) > 0.5);
    let mut out = vec![0.0; width * height];
    for v in 0..height {
        for u in 0..width {
            let mut total = 0.0;
            for c in 0..channels {
                let (mut wsum, mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -half..=half {
                    let y = v as isize + dy;
                    if y < 0 || y >= height as isize {
                        continue;
                    }
                    for dx in -half..=half {
                        let x = u as isize + dx;
                        if x < 0 || x >= width as isize {
                            continue;
                        }
                        let i = y as usize * width + x as usize;
                        if !inside(i) {
                            continue;
                        }
                        let w = kernel[(dy + half) as usize] * kernel[(dx + half) as usize];
                        let (pa, pb) = (a.get(i, c), b.get(i, c));
                        wsum += w;
                        ma += w * pa;
                        mb += w * pb;
                        saa += w * pa * pa;
                        sbb += w * pb * pb;
                        sab += w * pa * pb;
                    }
                }
                if wsum == 0.0 {
                    continue;
                }
                let (ma, mb) = (ma / wsum, mb / wsum);
                let va = (saa / wsum - ma * ma).max(0.0);
                let vb = (sbb / wsum - mb * mb).max(0.0);
                let cov = sab / wsum - ma * mb;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
            out[v * width + u] = total / channels as f64;
        }
    }
    out
}

fn check_image(a: &Matrix, width: usize, height: usize) -> Result<()> {
    if a.rows() != width * height {
        return Err(Error::domain(format!(
            "image has {} pixels, expected {width}×{height}",
            a.rows()
        )));
    }
    Ok(())
}

/// Mean structural similarity of two `[H·W, c]` images.
pub fn ssim(a: &Matrix, b: &Matrix, width: usize, height: usize) -> Result<f64> {
    check_pair(a, b)?;
    check_image(a, width, height)?;
    let map = ssim_map(a, b, width, height, None);
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// SSIM averaged over windows centered on masked pixels, each window
/// restricted to masked pixels.
pub fn masked_ssim(a: &Matrix, b: &Matrix, mask: &Matrix, width: usize, height: usize) -> Result<f64> {
    check_pair(a, b)?;
    check_image(a, width, height)?;
    check_mask(mask, a.rows())?;
    let all = mask.data().iter().all(|m| *m > 0.5);
    let map = ssim_map(a, b, width, height, (!all).then_some(mask));
    let picked: Vec<f64> = map
        .iter()
        .zip(mask.data())
        .filter(|(_, m)| **m > 0.5)
        .map(|(s, _)| *s)
        .collect();
    if picked.is_empty() {
        return Err(Error::domain("mask selects no pixels"));
    }
    Ok(picked.iter().sum::<f64>() / picked.len() as f64)
}

/// `(PSNR, SSIM)` over the masked region.
pub fn masked_metrics(a: &Matrix, b: &Matrix, mask: &Matrix, width: usize, height: usize) -> Result<(f64, f64)> {
    Ok((masked_psnr(a, b, mask)?, masked_ssim(a, b, mask, width, height)?))
}

/// Up to `max` distinct masked pixel indices, chosen by a seeded stream and
/// returned in increasing order.
pub fn sample_keypoints(mask: &Matrix, max: usize, seed: u64, frame: usize) -> Vec<usize> {
    let candidates: Vec<usize> = (0..mask.rows()).filter(|&i| mask.get(i, 0) > 0.5).collect();
    if candidates.len() <= max {
        return candidates;
    }
    let mut rng = stream(seed, &[tag::KEYPOINTS, frame as u64]);
    let mut picked: Vec<usize> = index::sample(&mut rng, candidates.len(), max)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// One keypoint carried to the next frame by predicted scene flow.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transfer {
    /// Predicted surface point at time `t`.
    pub surface: Vec3,
    /// Predicted flow of that point toward `t + 1`.
    pub flow: Vec3,
    /// Ground-truth pixel of the same material point in frame `t + 1`.
    pub target: [f64; 2],
}

/// Fraction of transfers whose projection into the next frame lands within
/// `alpha · max(H, W)` pixels of the ground-truth correspondence. Points
/// that end up behind the next camera count as misses.
pub fn pck_t(camera: &Camera, next_pose: &Pose, transfers: &[Transfer], alpha: f64) -> Result<f64> {
    if transfers.is_empty() {
        return Err(Error::domain("no keypoints to transfer"));
    }
    if !(alpha > 0.0) {
        return Err(Error::domain("PCK threshold must be positive"));
    }
    let radius = alpha * camera.width.max(camera.height) as f64;
    let correct = transfers
        .iter()
        .filter(|k| match project(camera, next_pose, &(k.surface + k.flow)) {
            Ok((u, v, _)) => (u - k.target[0]).hypot(v - k.target[1]) <= radius,
            Err(_) => false,
        })
        .count();
    Ok(correct as f64 / transfers.len() as f64)
}

/// Mean Euclidean error between `[n, 3]` flows over masked rows.
pub fn flow_epe(pred: &Matrix, gt: &Matrix, mask: &Matrix) -> Result<f64> {
    check_pair(pred, gt)?;
    check_mask(mask, pred.rows())?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in 0..pred.rows() {
        if mask.get(r, 0) > 0.5 {
            sum += pred.row(r).iter().zip(gt.row(r)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::domain("mask selects no pixels"));
    }
    Ok(sum / count as f64)
}

/// Root-mean-square depth error over valid rows.
pub fn depth_rmse(pred: &Matrix, gt: &Matrix, valid: &Matrix) -> Result<f64> {
    check_pair(pred, gt)?;
    check_mask(valid, pred.rows())?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in 0..pred.rows() {
        if valid.get(r, 0) > 0.5 {
            sum += (pred.get(r, 0) - gt.get(r, 0)).powi(2);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::domain("no valid depth pixels"));
    }
    Ok((sum / count as f64).sqrt())
}

/// Scores for one held-out view.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameScores {
    pub frame: usize,
    pub time: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// `None` when the view has no dynamic pixels.
    pub masked_psnr: Option<f64>,
    pub masked_ssim: Option<f64>,
    pub depth_rmse: f64,
}

impl FrameScores {
    pub fn compute(
        frame: usize,
        time: f64,
        pred: (&Matrix, &Matrix),
        gt: (&Matrix, &Matrix),
        mask: &Matrix,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let (rgb, depth) = pred;
        let (gt_rgb, gt_depth) = gt;
        let any = mask.data().iter().any(|m| *m > 0.5);
        let (masked_psnr, masked_ssim) = if any {
            let (p, s) = masked_metrics(rgb, gt_rgb, mask, width, height)?;
            (Some(p), Some(s))
        } else {
            (None, None)
        };
        let valid = Matrix::filled(depth.rows(), 1, 1.0);
        Ok(Self {
            frame,
            time,
            psnr: psnr(rgb, gt_rgb)?,
            ssim: ssim(rgb, gt_rgb, width, height)?,
            masked_psnr,
            masked_ssim,
            depth_rmse: depth_rmse(depth, gt_depth, &valid)?,
        })
    }
}

/// Evaluation summary over held-out views plus flow quality.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub frames: Vec<FrameScores>,
    pub pck_t: Option<f64>,
    pub flow_epe: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    pub fn mean_psnr(&self) -> Option<f64> {
        mean(self.frames.iter().map(|f| f.psnr))
    }

    pub fn mean_ssim(&self) -> Option<f64> {
        mean(self.frames.iter().map(|f| f.ssim))
    }

    pub fn mean_masked_psnr(&self) -> Option<f64> {
        mean(self.frames.iter().filter_map(|f| f.masked_psnr))
    }

    pub fn mean_masked_ssim(&self) -> Option<f64> {
        mean(self.frames.iter().filter_map(|f| f.masked_ssim))
    }

    pub fn mean_depth_rmse(&self) -> Option<f64> {
        mean(self.frames.iter().map(|f| f.depth_rmse))
    }

    /// Human-readable report: one block per view, then a summary block.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for f in &self.frames {
            let _ = writeln!(s, "[frame {}]", f.frame);
            let _ = writeln!(s, "time = {:.6}", f.time);
            let _ = writeln!(s, "psnr = {:.6}", f.psnr);
            let _ = writeln!(s, "ssim = {:.6}", f.ssim);
            let _ = writeln!(s, "masked_psnr = {}", fmt_opt(f.masked_psnr));
            let _ = writeln!(s, "masked_ssim = {}", fmt_opt(f.masked_ssim));
            let _ = writeln!(s, "depth_rmse = {:.6}", f.depth_rmse);
            s.push('\n');
        }
        let _ = writeln!(s, "[summary]");
        let _ = writeln!(s, "views = {}", self.frames.len());
        let _ = writeln!(s, "psnr = {}", fmt_opt(self.mean_psnr()));
        let _ = writeln!(s, "ssim = {}", fmt_opt(self.mean_ssim()));
        let _ = writeln!(s, "masked_psnr = {}", fmt_opt(self.mean_masked_psnr()));
        let _ = writeln!(s, "masked_ssim = {}", fmt_opt(self.mean_masked_ssim()));
        let _ = writeln!(s, "depth_rmse = {}", fmt_opt(self.mean_depth_rmse()));
        let _ = writeln!(s, "pck_t = {}", fmt_opt(self.pck_t));
        let _ = writeln!(s, "flow_epe = {}", fmt_opt(self.flow_epe));
        s
    }

    /// Tab-separated table with a header row, one row per view and a final
    /// `mean` row.
    pub fn to_table(&self) -> String {
        let mut s = String::from("frame\ttime\tpsnr\tssim\tmasked_psnr\tmasked_ssim\tdepth_rmse\n");
        for f in &self.frames {
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{:.6}",
                f.frame,
                f.time,
                f.psnr,
                f.ssim,
                fmt_opt(f.masked_psnr),
                fmt_opt(f.masked_ssim),
                f.depth_rmse
            );
        }
        let _ = writeln!(
            s,
            "mean\tnan\t{}\t{}\t{}\t{}\t{}",
            fmt_opt(self.mean_psnr()),
            fmt_opt(self.mean_ssim()),
            fmt_opt(self.mean_masked_psnr()),
            fmt_opt(self.mean_masked_ssim()),
            fmt_opt(self.mean_depth_rmse())
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn image(w: usize, h: usize, seed: u64) -> Matrix {
        let mut rng = stream(seed, &[99]);
        Matrix::from_fn(w * h, 3, |_, _| rng.random::<f64>())
    }

    #[test]
    fn psnr_examples() {
        let a = image(8, 8, 1);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let a = image(8, 8, 2);
        let noise = image(8, 8, 3);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let b = Matrix::from_fn(64, 3, |r, c| a.get(r, c) + amp * (noise.get(r, c) - 0.5));
            let p = psnr(&a, &b).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_of_constant_images() {
        let (a, b) = (0.2, 0.7);
        let x = Matrix::filled(100, 3, a);
        let y = Matrix::filled(100, 3, b);
        let expected = (2.0 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1);
        assert!((ssim(&x, &y, 10, 10).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = image(16, 12, 4);
        let b = image(16, 12, 5);
        assert_eq!(ssim(&a, &a, 16, 12).unwrap(), 1.0);
        assert!((ssim(&a, &b, 16, 12).unwrap() - ssim(&b, &a, 16, 12).unwrap()).abs() < 1e-15);
        let s = ssim(&a, &b, 16, 12).unwrap();
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn masked_metrics_with_full_mask_match_unmasked() {
        let a = image(16, 16, 6);
        let b = image(16, 16, 7);
        let ones = Matrix::filled(256, 1, 1.0);
        let (p, s) = masked_metrics(&a, &b, &ones, 16, 16).unwrap();
        assert_eq!(p, psnr(&a, &b).unwrap());
        assert_eq!(s, ssim(&a, &b, 16, 16).unwrap());
    }

    #[test]
    fn differences_outside_mask_are_invisible() {
        let a = image(16, 16, 8);
        let mask = Matrix::from_fn(256, 1, |r, _| (r % 16 < 8) as u8 as f64);
        let b = Matrix::from_fn(256, 3, |r, c| if r % 16 < 8 { a.get(r, c) } else { 0.0 });
        let (p, s) = masked_metrics(&a, &b, &mask, 16, 16).unwrap();
        assert_eq!(p, 99.0);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_masked_uniform_error() {
        // error 0.2 on masked left half, 0.4 on right half
        let a = Matrix::filled(64, 3, 0.5);
        let b = Matrix::from_fn(64, 3, |r, _| if r % 8 < 4 { 0.7 } else { 0.9 });
        let mask = Matrix::from_fn(64, 1, |r, _| (r % 8 < 4) as u8 as f64);
        let expected = 10.0 * (1.0f64 / 0.04).log10();
        assert!((masked_psnr(&a, &b, &mask).unwrap() - expected).abs() < 1e-9);
        // unmasked mse = (0.04 + 0.16) / 2
        assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0f64 / 0.1).log10()).abs() < 1e-9);
    }

    fn straight_transfers(cam: &Camera, pose: &Pose, flow: Vec3) -> Vec<Transfer> {
        (0..10)
            .map(|i| {
                let surface = Vec3::new(-0.3 + 0.06 * i as f64, 0.1, 2.0);
                let (u, v, _) = project(cam, pose, &(surface + flow)).unwrap();
                Transfer {
                    surface,
                    flow,
                    target: [u, v],
                }
            })
            .collect()
    }

    #[test]
    fn pck_examples() {
        let cam = Camera::new(64.0, 64.0, 32.0, 32.0, 64, 64).unwrap();
        let pose = Pose::identity();
        let flow = Vec3::new(0.2, 0.0, 0.0);
        let mut ks = straight_transfers(&cam, &pose, flow);
        assert_eq!(pck_t(&cam, &pose, &ks, PCK_ALPHA).unwrap(), 1.0);
        // zero flow misses: 0.2 world units at depth 2 is 6.4 px > 3.2 px
        let zero: Vec<_> = ks.iter().map(|k| Transfer { flow: Vec3::zeros(), ..*k }).collect();
        assert_eq!(pck_t(&cam, &pose, &zero, PCK_ALPHA).unwrap(), 0.0);
        for k in ks.iter_mut().step_by(2) {
            k.target[1] += 4.0;
        }
        assert_eq!(pck_t(&cam, &pose, &ks, PCK_ALPHA).unwrap(), 0.5);
        ks.reverse();
        assert_eq!(pck_t(&cam, &pose, &ks, PCK_ALPHA).unwrap(), 0.5);
    }

    #[test]
    fn keypoints_are_seeded_and_masked() {
        let mask = Matrix::from_fn(1000, 1, |r, _| (r % 3 == 0) as u8 as f64);
        let a = sample_keypoints(&mask, 200, 7, 2);
        assert_eq!(a, sample_keypoints(&mask, 200, 7, 2));
        assert_ne!(a, sample_keypoints(&mask, 200, 8, 2));
        assert_eq!(a.len(), 200);
        assert!(a.iter().all(|&i| i % 3 == 0));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        let small = Matrix::from_fn(10, 1, |r, _| (r < 4) as u8 as f64);
        assert_eq!(sample_keypoints(&small, 200, 1, 0), vec![0, 1, 2, 3]);
    }

    #[test]
    fn flow_and_depth_errors() {
        let gt = Matrix::from_fn(4, 3, |r, c| (r * 3 + c) as f64);
        let ones = Matrix::filled(4, 1, 1.0);
        assert_eq!(flow_epe(&gt, &gt, &ones).unwrap(), 0.0);
        let off = gt.map(|v| v + 1.0);
        assert!((flow_epe(&off, &gt, &ones).unwrap() - 3f64.sqrt()).abs() < 1e-12);
        // rows: error (3,4,0) → 5 and (0,0,1) → 1, third row unmasked
        let mut pred = gt.clone();
        pred.row_mut(0).copy_from_slice(&[3.0, 5.0, 2.0]);
        pred.set(1, 2, 6.0);
        pred.set(2, 0, 100.0);
        let mask = Matrix::column(&[1.0, 1.0, 0.0, 1.0]);
        assert!((flow_epe(&pred, &gt, &mask).unwrap() - 2.0).abs() < 1e-12);

        let d = Matrix::column(&[1.0, 2.0, 3.0]);
        let valid = Matrix::filled(3, 1, 1.0);
        assert!((depth_rmse(&d.map(|v| v - 0.5), &d, &valid).unwrap() - 0.5).abs() < 1e-12);
        let e = Matrix::column(&[2.0, 2.0, 6.0]);
        // errors 1, 0, 3 → sqrt(10/3)
        assert!((depth_rmse(&e, &d, &valid).unwrap() - (10.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn report_serializes_every_view() {
        let a = image(12, 12, 9);
        let mask = Matrix::from_fn(144, 1, |r, _| (r < 30) as u8 as f64);
        let depth = Matrix::filled(144, 1, 3.0);
        let rows = (1..4)
            .map(|n| FrameScores::compute(n, n as f64 / 3.0, (&a, &depth), (&a, &depth), &mask, 12, 12).unwrap())
            .collect();
        let report = EvalReport {
            frames: rows,
            pck_t: Some(1.0),
            flow_epe: None,
        };
        assert_eq!(report.mean_psnr(), Some(99.0));
        assert_eq!(report.to_table().lines().count(), 5);
        assert_eq!(report.to_text().matches("[frame").count(), 3);
    }

    proptest! {
        #[test]
        fn ssim_stays_in_range(seed in 0u64..500) {
            let a = image(12, 12, seed);
            let b = image(12, 12, seed + 1000);
            let s = ssim(&a, &b, 12, 12).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
