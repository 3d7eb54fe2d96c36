use mwdcnn::data::ImageBuffer;
use mwdcnn::metrics::{psnr, psnr_samples, ssim, ssim_plane, QualityReport};
use proptest::prelude::*;

fn constant(w: usize, h: usize, v: u8) -> ImageBuffer {
    ImageBuffer::new(w, h, 1, vec![v; w * h]).unwrap()
}

fn textured(w: usize, h: usize, seed: u64) -> ImageBuffer {
    let px = (0..w * h).map(|i| ((i as u64 * 2654435761 + seed * 97) % 251) as u8).collect();
    ImageBuffer::new(w, h, 1, px).unwrap()
}

/// SSIM by explicit per-window weighted sums.
fn ssim_window_oracle(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let norm: f64 = g.iter().sum::<f64>().powi(2);
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    let wt = g[dy] * g[dx] / norm;
                    let (p, q) = (a[(y0 + dy) * w + x0 + dx], b[(y0 + dy) * w + x0 + dx]);
                    ma += wt * p;
                    mb += wt * q;
                    aa += wt * p * p;
                    bb += wt * q * q;
                    ab += wt * p * q;
                }
            }
            let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn psnr_closed_forms() {
    let a = vec![10.0; 100];
    let b = vec![35.5; 100];
    assert!((psnr_samples(&a, &b, 255.0).unwrap() - 20.0).abs() < 1e-3);
    let c = constant(20, 20, 100);
    let d = ImageBuffer::new(20, 20, 1, (0..400).map(|i| if i % 2 == 0 { 99 } else { 101 }).collect()).unwrap();
    assert!((psnr(&c, &d).unwrap() - 48.1308).abs() < 1e-3);
    assert_eq!(psnr(&c, &c).unwrap(), 100.0);
}

#[test]
fn psnr_is_symmetric_and_translation_consistent() {
    let a = textured(16, 16, 1);
    let b = textured(16, 16, 2);
    let shift = |img: &ImageBuffer| ImageBuffer::new(16, 16, 1, img.pixels.iter().map(|&p| p + 4).collect()).unwrap();
    assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    assert_eq!(psnr(&a, &b).unwrap(), psnr(&shift(&a), &shift(&b)).unwrap());
}

#[test]
fn psnr_falls_as_noise_grows() {
    let clean = textured(32, 32, 3);
    let mut last = f64::INFINITY;
    for amp in [1i32, 3, 6, 12, 24] {
        let noisy = ImageBuffer::new(
            32,
            32,
            1,
            clean
                .pixels
                .iter()
                .enumerate()
                .map(|(i, &p)| (p as i32 + if i % 2 == 0 { amp } else { -amp }).clamp(0, 255) as u8)
                .collect(),
        )
        .unwrap();
        let p = psnr(&clean, &noisy).unwrap();
        assert!(p < last, "{amp}: {p} !< {last}");
        last = p;
    }
}

#[test]
fn ssim_constant_images_match_closed_form_and_window_oracle() {
    for (v, d) in [(50u8, 10u8), (100, 60), (0, 255)] {
        let a = constant(16, 13, v);
        let b = constant(16, 13, v.saturating_add(d));
        let (v, vd) = (v as f64, v.saturating_add(d) as f64);
        let c1 = (0.01f64 * 255.0).powi(2);
        let closed = (2.0 * v * vd + c1) / (v * v + vd * vd + c1);
        let s = ssim(&a, &b).unwrap();
        assert!((s - closed).abs() < 1e-9, "{s} vs {closed}");
    }
    let (a, b) = (textured(23, 19, 5), textured(23, 19, 9));
    let fa: Vec<f64> = a.pixels.iter().map(|&p| p as f64).collect();
    let fb: Vec<f64> = b.pixels.iter().map(|&p| p as f64).collect();
    assert!((ssim_plane(&fa, &fb, 23, 19).unwrap() - ssim_window_oracle(&fa, &fb, 23, 19)).abs() < 1e-10);
}

#[test]
fn color_ssim_uses_luma() {
    let rgb = ImageBuffer::new(12, 12, 3, (0..432).map(|i| (i * 37 % 256) as u8).collect()).unwrap();
    let other = ImageBuffer::new(12, 12, 3, (0..432).map(|i| (i * 53 % 256) as u8).collect()).unwrap();
    let luma = |img: &ImageBuffer| -> Vec<f64> {
        img.pixels.chunks(3).map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).collect()
    };
    assert_eq!(ssim(&rgb, &other).unwrap(), ssim_plane(&luma(&rgb), &luma(&other), 12, 12).unwrap());
}

#[test]
fn report_means_are_arithmetic_averages() {
    let clean = textured(16, 16, 1);
    let mut r = QualityReport::default();
    for s in 2..5 {
        r.evaluate(format!("img{s}"), &clean, &textured(16, 16, s)).unwrap();
    }
    let mp = r.rows.iter().map(|x| x.psnr_db).sum::<f64>() / 3.0;
    assert_eq!(r.mean_psnr(), mp);
    let csv = r.to_csv();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().last().unwrap().starts_with("MEAN,"));
}

proptest! {
    #[test]
    fn ssim_symmetric_bounded_and_one_only_for_identical(seed_a in 0u64..1000, seed_b in 0u64..1000, w in 11usize..20, h in 11usize..20) {
        let a = textured(w, h, seed_a);
        let b = textured(w, h, seed_b);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        if a != b {
            prop_assert!(ab < 1.0);
        }
    }
}
