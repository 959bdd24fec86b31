use ncn_core::metrics::{self, bd_quality, bd_rate, QualityKind, RdCurve, RdPoint};
use ncn_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plane-wise MS-SSIM written directly from the definition: a dense 2-D
/// Gaussian window, valid positions only, 2x2 mean pooling with one zero of
/// padding on odd sides.
mod oracle {
    const WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    const C1: f64 = 1e-4;
    const C2: f64 = 9e-4;

    #[derive(Clone)]
    pub struct Plane {
        pub h: usize,
        pub w: usize,
        pub v: Vec<f64>,
    }

    impl Plane {
        fn at(&self, y: isize, x: isize) -> f64 {
            if y < 0 || x < 0 || y as usize >= self.h || x as usize >= self.w {
                0.0
            } else {
                self.v[y as usize * self.w + x as usize]
            }
        }

        fn pool(&self) -> Plane {
            let (py, px) = ((self.h % 2) as isize, (self.w % 2) as isize);
            let (h, w) = (self.h.div_ceil(2), self.w.div_ceil(2));
            let mut v = Vec::with_capacity(h * w);
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let (y0, x0) = (2 * y - py, 2 * x - px);
                    v.push((self.at(y0, x0) + self.at(y0 + 1, x0) + self.at(y0, x0 + 1) + self.at(y0 + 1, x0 + 1)) / 4.0);
                }
            }
            Plane { h, w, v }
        }
    }

    fn window(side: usize) -> Vec<Vec<f64>> {
        let mut k = side.min(11);
        if k % 2 == 0 {
            k -= 1;
        }
        let c = (k / 2) as f64;
        let mut g = vec![vec![0.0; k]; k];
        let mut total = 0.0;
        for (i, row) in g.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
                *v = (-d2 / (2.0 * 1.5 * 1.5)).exp();
                total += *v;
            }
        }
        g.iter_mut().flatten().for_each(|v| *v /= total);
        g
    }

    fn ssim_cs(a: &Plane, b: &Plane) -> (f64, f64) {
        let g = window(a.h.min(a.w));
        let k = g.len();
        let (mut s_sum, mut c_sum, mut n) = (0.0, 0.0, 0.0);
        for y in 0..=a.h - k {
            for x in 0..=a.w - k {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (i, row) in g.iter().enumerate() {
                    for (j, &wt) in row.iter().enumerate() {
                        let p = a.v[(y + i) * a.w + x + j];
                        let q = b.v[(y + i) * b.w + x + j];
                        ma += wt * p;
                        mb += wt * q;
                        aa += wt * p * p;
                        bb += wt * q * q;
                        ab += wt * p * q;
                    }
                }
                let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                let cs = (2.0 * cov + C2) / (va + vb + C2);
                let l = (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
                s_sum += l * cs;
                c_sum += cs;
                n += 1.0;
            }
        }
        (s_sum / n, c_sum / n)
    }

    pub fn ms_ssim(a: &Plane, b: &Plane) -> f64 {
        let mut m = 1;
        let mut s = a.h.min(a.w);
        while m < 5 && s.div_ceil(2) >= 4 {
            s = s.div_ceil(2);
            m += 1;
        }
        let wsum: f64 = WEIGHTS[..m].iter().sum();
        let (mut a, mut b) = (a.clone(), b.clone());
        let mut acc = 1.0;
        for (j, wt) in WEIGHTS[..m].iter().enumerate() {
            let (ssim, cs) = ssim_cs(&a, &b);
            let term = if j + 1 == m { ssim } else { cs };
            acc *= term.max(1e-12).powf(wt / wsum);
            a = a.pool();
            b = b.pool();
        }
        acc
    }
}

fn planes(t: &Tensor) -> Vec<oracle::Plane> {
    let [n, c, h, w] = t.shape();
    (0..n * c)
        .map(|p| oracle::Plane {
            h,
            w,
            v: t.data()[p * h * w..(p + 1) * h * w].to_vec(),
        })
        .collect()
}

fn noisy_pair(rng: &mut ChaCha8Rng, h: usize, w: usize, noise: f64) -> (Tensor, Tensor) {
    let shape = [1, 3, h, w];
    let n = 3 * h * w;
    let x: Vec<f64> = (0..n).map(|i| 0.5 + 0.4 * ((i % w) as f64 * 0.3 + (i / w) as f64 * 0.17).sin() * rng.gen::<f64>()).collect();
    let y: Vec<f64> = x.iter().map(|v| (v + noise * (rng.gen::<f64>() - 0.5)).clamp(0.0, 1.0)).collect();
    (Tensor::from_vec(shape, x), Tensor::from_vec(shape, y))
}

#[test]
fn ms_ssim_matches_direct_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (h, w, noise) in [(64, 64, 0.2), (40, 52, 0.5), (23, 23, 0.1), (11, 30, 0.3), (7, 9, 0.4)] {
        let (x, y) = noisy_pair(&mut rng, h, w, noise);
        let ours = metrics::ms_ssim(&x, &y).unwrap();
        let ps = (planes(&x), planes(&y));
        let want = ps.0.iter().zip(&ps.1).map(|(a, b)| oracle::ms_ssim(a, b)).sum::<f64>() / 3.0;
        assert!((ours - want).abs() < 1e-10, "{h}x{w}: {ours} vs {want}");
    }
}

#[test]
fn ms_ssim_identity_and_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (x, y) = noisy_pair(&mut rng, 32, 32, 0.3);
    assert!((metrics::ms_ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    let (a, b) = (metrics::ms_ssim(&x, &y).unwrap(), metrics::ms_ssim(&y, &x).unwrap());
    assert!((a - b).abs() < 1e-12);
    assert!(a < 1.0);
}

#[test]
fn psnr_of_constant_offset() {
    let x = Tensor::full([1, 3, 8, 8], 0.4);
    for d in [0.1, 0.01, 1e-3] {
        let y = Tensor::full([1, 3, 8, 8], 0.4 + d);
        let want = -20.0 * f64::log10(d);
        assert!((metrics::psnr(&x, &y).unwrap() - want).abs() < 1e-9);
    }
    assert_eq!(metrics::psnr(&x, &x).unwrap(), metrics::PSNR_CAP);
}

fn curve(label: &str, pts: &[(f64, f64)]) -> RdCurve {
    RdCurve::new(label, QualityKind::Psnr, pts.iter().map(|&(bpp, quality)| RdPoint { bpp, quality }).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bd_rate_is_antisymmetric(
        base in prop::collection::vec(0.05f64..0.5, 4),
        gains in prop::collection::vec(0.5f64..3.0, 4),
        factor in 0.4f64..2.5,
    ) {
        let mut rates: Vec<f64> = base.iter().scan(0.02, |acc, d| { *acc += d; Some(*acc) }).collect();
        rates.sort_by(f64::total_cmp);
        let q: Vec<f64> = gains.iter().scan(25.0, |acc, g| { *acc += g; Some(*acc) }).collect();
        let a = curve("a", &rates.iter().zip(&q).map(|(&r, &q)| (r, q)).collect::<Vec<_>>());
        let b = curve("b", &rates.iter().zip(&q).map(|(&r, &q)| (r * factor, q)).collect::<Vec<_>>());
        // Pure rate scaling shifts log-rate by a constant.
        let ab = bd_rate(&b, &a).unwrap();
        prop_assert!((ab - (factor - 1.0) * 100.0).abs() < 1e-6, "{ab}");
        let ba = bd_rate(&a, &b).unwrap();
        prop_assert!(((1.0 + ab / 100.0) * (1.0 + ba / 100.0) - 1.0).abs() < 1e-9);
        prop_assert!(bd_quality(&a, &a).unwrap().abs() < 1e-12);
    }
}
