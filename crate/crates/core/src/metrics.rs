//! Image quality metrics over a foreground mask, ROI statistics and lesion
//! contrast. Volumes are x-fastest; SSIM works slice by slice.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::volume::{ColorMap, Dims, ScalarMap};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Report encoding of an infinite PSNR or ROI percent error.
pub const PSNR_INF_SENTINEL: &str = "+inf";

fn check(img: &[f64], reference: &[f64], mask: &[bool]) -> Result<()> {
    if img.len() != reference.len() || mask.len() != reference.len() {
        return Err(Error::Shape(format!(
            "image {} / reference {} / mask {} lengths differ",
            img.len(),
            reference.len(),
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidArgument("empty foreground mask".into()));
    }
    Ok(())
}

/// ‖img − ref‖² / ‖ref‖² over the mask.
pub fn nmse(img: &[f64], reference: &[f64], mask: &[bool]) -> Result<f64> {
    check(img, reference, mask)?;
    let (mut num, mut den) = (0.0, 0.0);
    for i in (0..img.len()).filter(|&i| mask[i]) {
        let d = img[i] - reference[i];
        num += d * d;
        den += reference[i] * reference[i];
    }
    if den == 0.0 {
        return Err(Error::InvalidArgument("reference is zero on the foreground".into()));
    }
    Ok(num / den)
}

/// 10·log10(MAX² / MSE) over the mask with MAX the reference foreground
/// maximum. Identical images give +∞.
pub fn psnr(img: &[f64], reference: &[f64], mask: &[bool]) -> Result<f64> {
    check(img, reference, mask)?;
    let (mut se, mut n, mut max) = (0.0, 0usize, f64::NEG_INFINITY);
    for i in (0..img.len()).filter(|&i| mask[i]) {
        let d = img[i] - reference[i];
        se += d * d;
        n += 1;
        max = max.max(reference[i]);
    }
    if se == 0.0 {
        return Ok(f64::INFINITY);
    }
    if max <= 0.0 {
        return Err(Error::InvalidArgument("reference maximum is not positive".into()));
    }
    let mse = se / n as f64;
    Ok(10.0 * (max * max / mse).log10())
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut t = [0.0; SSIM_WINDOW];
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Mean local SSIM over foreground pixels whose 11×11 window lies inside
/// the slice. Dynamic range L = larger foreground maximum of the two
/// images, which keeps the index symmetric.
pub fn ssim(img: &[f64], reference: &[f64], dims: Dims, mask: &[bool]) -> Result<f64> {
    check(img, reference, mask)?;
    if img.len() != dims.len() {
        return Err(Error::Shape("image length differs from dims".into()));
    }
    if dims.nx < SSIM_WINDOW || dims.ny < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "slice {}×{} smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window",
            dims.nx, dims.ny
        )));
    }
    let mut l = 0.0f64;
    for i in (0..img.len()).filter(|&i| mask[i]) {
        l = l.max(img[i]).max(reference[i]);
    }
    if l <= 0.0 {
        l = 1.0;
    }
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);
    let taps = gaussian_taps();
    let r = SSIM_WINDOW / 2;
    let (nx, ny) = (dims.nx, dims.ny);
    let (mut total, mut count) = (0.0, 0usize);
    for z in 0..dims.nz {
        let off = z * dims.slice_len();
        for cy in r..ny - r {
            for cx in r..nx - r {
                if !mask[off + cy * nx + cx] {
                    continue;
                }
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (ky, wy) in taps.iter().enumerate() {
                    let row = off + (cy + ky - r) * nx;
                    for (kx, wx) in taps.iter().enumerate() {
                        let w = wy * wx;
                        let i = row + cx + kx - r;
                        let (a, b) = (img[i], reference[i]);
                        mx += w * a;
                        my += w * b;
                        sxx += w * a * a;
                        syy += w * b * b;
                        sxy += w * a * b;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cxy = sxy - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("no foreground pixel has a full SSIM window".into()));
    }
    Ok(total / count as f64)
}

/// PSNR, NMSE and SSIM of one map against its reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapScores {
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    pub nmse: f64,
    pub ssim: f64,
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if *v == f64::INFINITY {
        s.serialize_str(PSNR_INF_SENTINEL)
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) if t == PSNR_INF_SENTINEL => Ok(f64::INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("invalid number '{t}'"))),
    }
}

pub fn score_scalar(img: &ScalarMap, reference: &ScalarMap, mask: &[bool]) -> Result<MapScores> {
    if img.dims != reference.dims {
        return Err(Error::Shape("map dims differ".into()));
    }
    Ok(MapScores {
        psnr: psnr(&img.data, &reference.data, mask)?,
        nmse: nmse(&img.data, &reference.data, mask)?,
        ssim: ssim(&img.data, &reference.data, reference.dims, mask)?,
    })
}

/// Colour-map scores: each metric averaged over the 3 channels.
pub fn score_color(img: &ColorMap, reference: &ColorMap, mask: &[bool]) -> Result<MapScores> {
    if img.dims != reference.dims {
        return Err(Error::Shape("map dims differ".into()));
    }
    let mut acc = MapScores {
        psnr: 0.0,
        nmse: 0.0,
        ssim: 0.0,
    };
    for c in 0..3 {
        let s = score_scalar(&img.channel(c), &reference.channel(c), mask)?;
        acc.psnr += s.psnr / 3.0;
        acc.nmse += s.nmse / 3.0;
        acc.ssim += s.ssim / 3.0;
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiStat {
    pub label: u32,
    pub voxels: usize,
    pub mean: f64,
    pub ref_mean: f64,
    /// +∞ when the reference mean is zero and the map mean is not.
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub percent_error: f64,
}

/// Mean of `map` and `reference` per label with |Δ|/ref × 100. Labels without
/// voxels are returned separately so callers can warn about them.
pub fn roi_stats(map: &[f64], labels: &[u32], reference: &[f64], wanted: &[u32]) -> Result<(Vec<RoiStat>, Vec<u32>)> {
    if map.len() != labels.len() || reference.len() != labels.len() {
        return Err(Error::Shape("map, labels and reference lengths differ".into()));
    }
    let (mut stats, mut skipped) = (Vec::new(), Vec::new());
    for &label in wanted {
        let (mut s, mut r, mut n) = (0.0, 0.0, 0usize);
        for i in (0..labels.len()).filter(|&i| labels[i] == label) {
            s += map[i];
            r += reference[i];
            n += 1;
        }
        if n == 0 {
            skipped.push(label);
            continue;
        }
        let (mean, ref_mean) = (s / n as f64, r / n as f64);
        let percent_error = if ref_mean == 0.0 {
            if mean == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (mean - ref_mean).abs() / ref_mean.abs() * 100.0
        };
        stats.push(RoiStat {
            label,
            voxels: n,
            mean,
            ref_mean,
            percent_error,
        });
    }
    Ok((stats, skipped))
}

/// (mean_lesion − mean_background) / mean_background.
pub fn lesion_contrast(fa: &[f64], lesion: &[bool], background: &[bool]) -> Result<f64> {
    if fa.len() != lesion.len() || fa.len() != background.len() {
        return Err(Error::Shape("map and masks differ in length".into()));
    }
    if lesion.iter().zip(background).any(|(&a, &b)| a && b) {
        return Err(Error::InvalidArgument("lesion and background masks overlap".into()));
    }
    let mean = |m: &[bool]| -> Option<f64> {
        let (s, n) = fa
            .iter()
            .zip(m)
            .filter(|(_, &k)| k)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        (n > 0).then(|| s / n as f64)
    };
    let l = mean(lesion).ok_or_else(|| Error::InvalidArgument("empty lesion mask".into()))?;
    let b = mean(background).ok_or_else(|| Error::InvalidArgument("empty background mask".into()))?;
    if b == 0.0 {
        return Err(Error::InvalidArgument("background mean is zero".into()));
    }
    Ok((l - b) / b)
}

/// Scores of one method on one map, with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub map: String,
    pub n_dwi: usize,
    pub seed: u64,
    pub scores: MapScores,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rois: Vec<RoiStat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lesion_contrast: Option<f64>,
}

/// One row of a training-size sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub size: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
}

pub const SWEEP_HEADER: &str = "size,psnr_db,ssim,nmse";

/// CSV with header `size,psnr_db,ssim,nmse`; +∞ PSNR is written as `+inf`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let p = if r.psnr == f64::INFINITY {
            PSNR_INF_SENTINEL.to_string()
        } else {
            format!("{}", r.psnr)
        };
        s.push_str(&format!("{},{},{},{}\n", r.size, p, r.ssim, r.nmse));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0.1..1.0)).collect()
    }

    #[test]
    fn nmse_examples() {
        let r = random(64, 1);
        let m = vec![true; 64];
        assert_eq!(nmse(&r, &r, &m).unwrap(), 0.0);
        assert_eq!(nmse(&[0.0; 64], &r, &m).unwrap(), 1.0);
        let twice: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        assert!((nmse(&twice, &r, &m).unwrap() - 1.0).abs() < 1e-15);
        assert!(nmse(&r, &[0.0; 64], &m).is_err());
    }

    #[test]
    fn psnr_examples() {
        let r = random(64, 2);
        let m = vec![true; 64];
        assert_eq!(psnr(&r, &r, &m).unwrap(), f64::INFINITY);
        let max = r.iter().cloned().fold(0.0, f64::max);
        let off: Vec<f64> = r.iter().map(|v| v + max).collect();
        assert!(psnr(&off, &r, &m).unwrap().abs() < 1e-12);
        let tenth: Vec<f64> = r.iter().map(|v| v + max / 10.0).collect();
        assert!((psnr(&tenth, &r, &m).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_closed_form() {
        let dims = Dims::new(16, 16, 1);
        let m = vec![true; 256];
        let (a, b) = (0.4, 0.7);
        assert_eq!(ssim(&[a; 256], &[a; 256], dims, &m).unwrap(), 1.0);
        let c1 = (SSIM_K1 * b).powi(2);
        let want = (2.0 * a * b + c1) / (a * a + b * b + c1);
        assert!((ssim(&[a; 256], &[b; 256], dims, &m).unwrap() - want).abs() < 1e-12);
        assert!(ssim(&[a; 100], &[b; 100], Dims::new(10, 10, 1), &[true; 100]).is_err());
    }

    #[test]
    fn ssim_noise_is_between_bounds() {
        let dims = Dims::new(32, 32, 2);
        let r = random(dims.len(), 3);
        let noise = random(dims.len(), 4);
        let img: Vec<f64> = r.iter().zip(&noise).map(|(a, n)| a + 3.0 * (n - 0.55)).collect();
        let s = ssim(&img, &r, dims, &vec![true; dims.len()]).unwrap();
        assert!(s < 0.5 && s > -1.0, "{s}");
    }

    #[test]
    fn roi_examples() {
        let labels = vec![1, 1, 2, 2, 0];
        let reference = vec![0.5, 0.5, 0.5, 0.5, 0.0];
        let map = vec![0.5, 0.5, 0.55, 0.55, 9.0];
        let (s, skipped) = roi_stats(&map, &labels, &reference, &[1, 2, 3]).unwrap();
        assert_eq!(skipped, vec![3]);
        assert_eq!(s[0].mean, 0.5);
        assert_eq!(s[0].percent_error, 0.0);
        assert!((s[1].percent_error - 10.0).abs() < 1e-9);
        let (same, _) = roi_stats(&reference, &labels, &reference, &[1, 2]).unwrap();
        assert!(same.iter().all(|r| r.percent_error == 0.0));
        let (zero, _) = roi_stats(&map, &labels, &[0.0; 5], &[1]).unwrap();
        let j = serde_json::to_string(&zero[0]).unwrap();
        assert!(j.contains("\"percent_error\":\"+inf\""), "{j}");
        assert_eq!(serde_json::from_str::<RoiStat>(&j).unwrap(), zero[0]);
    }

    #[test]
    fn lesion_examples() {
        let l = [true, false, false];
        let b = [false, true, true];
        assert_eq!(lesion_contrast(&[0.5, 0.5, 0.5], &l, &b).unwrap(), 0.0);
        assert!((lesion_contrast(&[0.1, 0.5, 0.5], &l, &b).unwrap() + 0.8).abs() < 1e-12);
        assert!((lesion_contrast(&[0.75, 0.5, 0.5], &l, &b).unwrap() - 0.5).abs() < 1e-12);
        assert!(lesion_contrast(&[0.1, 0.0, 0.0], &l, &b).is_err());
        assert!(lesion_contrast(&[0.1, 0.0, 0.0], &l, &l).is_err());
    }

    #[test]
    fn report_psnr_sentinel_round_trip() {
        let r = EvalReport {
            method: "mf".into(),
            map: "fa".into(),
            n_dwi: 6,
            seed: 7,
            scores: MapScores {
                psnr: f64::INFINITY,
                nmse: 0.0,
                ssim: 1.0,
            },
            rois: vec![],
            lesion_contrast: None,
        };
        let j = serde_json::to_string(&r).unwrap();
        assert!(j.contains("\"+inf\""));
        assert_eq!(serde_json::from_str::<EvalReport>(&j).unwrap(), r);
        let csv = sweep_csv(&[SweepRow {
            size: 1,
            psnr: 30.5,
            ssim: 0.9,
            nmse: 0.01,
        }]);
        assert_eq!(csv, "size,psnr_db,ssim,nmse\n1,30.5,0.9,0.01\n");
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let r = random(400, 5);
        let n = random(400, 6);
        let m = vec![true; 400];
        let vals: Vec<f64> = [0.01, 0.05, 0.2]
            .iter()
            .map(|a| {
                let img: Vec<f64> = r.iter().zip(&n).map(|(x, e)| x + a * (e - 0.55)).collect();
                psnr(&img, &r, &m).unwrap()
            })
            .collect();
        assert!(vals[0] > vals[1] && vals[1] > vals[2]);
    }

    proptest! {
        #[test]
        fn nmse_of_scaled_reference(a in -3.0f64..3.0, seed in 0u64..1000) {
            let r = random(50, seed);
            let img: Vec<f64> = r.iter().map(|v| a * v).collect();
            let got = nmse(&img, &r, &[true; 50]).unwrap();
            prop_assert!((got - (a - 1.0).powi(2)).abs() < 1e-12 * (1.0 + (a - 1.0).powi(2)));
        }

        #[test]
        fn ssim_symmetric_and_bounded(s1 in 0u64..1000, s2 in 0u64..1000) {
            let dims = Dims::new(14, 13, 2);
            let a = random(dims.len(), s1);
            let b = random(dims.len(), s2 + 5000);
            let mask: Vec<bool> = (0..dims.len()).map(|i| i % 7 != 0).collect();
            let ab = ssim(&a, &b, dims, &mask).unwrap();
            let ba = ssim(&b, &a, dims, &mask).unwrap();
            prop_assert!((ab - ba).abs() < 1e-14);
            prop_assert!(ab <= 1.0 && ab >= -1.0);
        }
    }
}
